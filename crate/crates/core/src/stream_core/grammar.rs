//! Parser and canonical serializer for the structured step-output grammar:
//! a `<think>` block followed by either `<silent>` or `<response>` plus
//! nonempty content running to end of turn.

use super::vocab::{RESPONSE_STR, SILENT_STR, THINK_CLOSE_STR, THINK_OPEN_STR};
use super::{Action, StepOutput};

/// Which grammar rule a malformed step output violated. The format reward
/// consumes these classifications.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("output does not begin with {THINK_OPEN_STR}")]
    MissingThink,
    #[error("think block is never closed")]
    UnclosedThink,
    #[error("no action marker after the think block")]
    MissingAction,
    #[error("trailing content after {SILENT_STR}")]
    TrailingContent,
    #[error("response marker with empty content")]
    EmptyResponse,
}

/// Total parse of the step grammar: every string either decomposes into a
/// [`StepOutput`] or yields the [`FormatError`] naming the first rule broken.
/// The parsed step carries `chunk_index == 0`; the engine stamps the real
/// chunk ordinal.
pub fn parse_step_output(text: &str) -> Result<StepOutput, FormatError> {
    let rest = text
        .strip_prefix(THINK_OPEN_STR)
        .ok_or(FormatError::MissingThink)?;
    let close = rest
        .find(THINK_CLOSE_STR)
        .ok_or(FormatError::UnclosedThink)?;
    let reasoning = &rest[..close];
    let tail = &rest[close + THINK_CLOSE_STR.len()..];

    if let Some(after) = tail.strip_prefix(SILENT_STR) {
        if !after.is_empty() {
            return Err(FormatError::TrailingContent);
        }
        Ok(StepOutput::new(reasoning, Action::Silent, 0))
    } else if let Some(content) = tail.strip_prefix(RESPONSE_STR) {
        if content.is_empty() {
            return Err(FormatError::EmptyResponse);
        }
        Ok(StepOutput::new(
            reasoning,
            Action::Respond(content.to_string()),
            0,
        ))
    } else {
        Err(FormatError::MissingAction)
    }
}

/// Canonical string form; the inverse of [`parse_step_output`] for every
/// well-formed step (reasoning free of `</think>`, response content nonempty).
pub fn render_step_output(step: &StepOutput) -> String {
    let mut out = String::with_capacity(
        THINK_OPEN_STR.len() + step.reasoning.len() + THINK_CLOSE_STR.len() + 16,
    );
    out.push_str(THINK_OPEN_STR);
    out.push_str(&step.reasoning);
    out.push_str(THINK_CLOSE_STR);
    match &step.action {
        Action::Silent => out.push_str(SILENT_STR),
        Action::Respond(content) => {
            out.push_str(RESPONSE_STR);
            out.push_str(content);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_silent_step() {
        let step = parse_step_output("<think>door still closed</think><silent>").unwrap();
        assert_eq!(step.reasoning, "door still closed");
        assert_eq!(step.action, Action::Silent);
    }

    #[test]
    fn parses_empty_reasoning_response() {
        let step = parse_step_output("<think></think><response>B").unwrap();
        assert_eq!(step.reasoning, "");
        assert_eq!(step.action, Action::Respond("B".to_string()));
    }

    #[test]
    fn rejects_untagged_text() {
        assert_eq!(
            parse_step_output("no tags at all"),
            Err(FormatError::MissingThink)
        );
    }

    #[test]
    fn rejects_unclosed_think() {
        assert_eq!(
            parse_step_output("<think>forever"),
            Err(FormatError::UnclosedThink)
        );
    }

    #[test]
    fn rejects_missing_action() {
        assert_eq!(
            parse_step_output("<think>x</think>"),
            Err(FormatError::MissingAction)
        );
        assert_eq!(
            parse_step_output("<think>x</think>stray<silent>"),
            Err(FormatError::MissingAction)
        );
    }

    #[test]
    fn rejects_trailing_content_after_silent() {
        assert_eq!(
            parse_step_output("<think>x</think><silent>oops"),
            Err(FormatError::TrailingContent)
        );
    }

    #[test]
    fn rejects_empty_response() {
        assert_eq!(
            parse_step_output("<think>x</think><response>"),
            Err(FormatError::EmptyResponse)
        );
    }

    #[test]
    fn render_is_inverse_of_parse() {
        let cases = [
            StepOutput::new("x", Action::Silent, 0),
            StepOutput::new("", Action::Respond("yes".to_string()), 0),
            StepOutput::new(
                "a b <silent> c",
                Action::Respond("two words".to_string()),
                0,
            ),
        ];
        for step in cases {
            assert_eq!(parse_step_output(&render_step_output(&step)).unwrap(), step);
        }
        assert_eq!(
            render_step_output(&StepOutput::new("x", Action::Silent, 0)),
            "<think>x</think><silent>"
        );
        assert_eq!(
            render_step_output(&StepOutput::new("", Action::Respond("yes".to_string()), 0)),
            "<think></think><response>yes"
        );
    }
}

//! Grammar totality and the parse/render round trip under randomized input.

use proptest::prelude::*;

use wts_core::stream_core::{parse_step_output, render_step_output, Action, StepOutput};

/// Reasoning strings must not contain the close marker; everything else goes.
fn reasoning_strategy() -> impl Strategy<Value = String> {
    "[a-z0-9 <>/]{0,40}".prop_filter("no close marker", |s| !s.contains("</think>"))
}

fn action_strategy() -> impl Strategy<Value = Action> {
    prop_oneof![
        Just(Action::Silent),
        "[a-zA-Z0-9 .,]{1,30}".prop_map(Action::Respond),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn round_trip_is_identity(reasoning in reasoning_strategy(), action in action_strategy()) {
        let step = StepOutput { reasoning, action, chunk_index: 0 };
        let rendered = render_step_output(&step);
        let parsed = parse_step_output(&rendered).unwrap();
        prop_assert_eq!(parsed, step);
    }

    #[test]
    fn parse_is_total(text in ".{0,120}") {
        // Any string must yield either a step or a classified error; this
        // simply must not panic.
        let _ = parse_step_output(&text);
    }

    #[test]
    fn parse_accepts_only_the_grammar(text in "[a-z<>/ ]{0,60}") {
        if let Ok(step) = parse_step_output(&text) {
            // Whatever parses must re-render to a parseable string with the
            // same decomposition.
            let again = parse_step_output(&render_step_output(&step)).unwrap();
            prop_assert_eq!(again, step);
        }
    }
}

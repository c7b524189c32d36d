//! Rule-based verifiable rewards: a binary format reward over the whole
//! trajectory, a linearly decaying time reward around the ground-truth
//! response step, a deterministic accuracy verifier per answer type, and
//! their weighted sum.

use crate::stream_core::{parse_step_output, AnswerType, FormatError, GroundTruth};
use crate::wts_engine::Trajectory;

/// Weights and the time-reward tolerance window (in chunks).
#[derive(Debug, Clone, PartialEq)]
pub struct RewardConfig {
    pub tolerance_w: f64,
    pub format_weight: f64,
    pub time_weight: f64,
    pub acc_weight: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            tolerance_w: 3.0,
            format_weight: 1.0,
            time_weight: 1.0,
            acc_weight: 1.0,
        }
    }
}

/// Why a step cost the format reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    Grammar(FormatError),
    BudgetForced,
    NoActionFallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation {
    pub chunk_index: u32,
    pub kind: ViolationKind,
}

/// All three components, their weighted sum, and the audit trail.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardBreakdown {
    pub r_format: f64,
    pub r_time: f64,
    pub r_acc: f64,
    pub total: f64,
    pub t_resp: Option<u32>,
    pub violations: Vec<Violation>,
}

/// 1 iff every step's raw text parses cleanly and no step carries a budget
/// or fallback violation; strictly binary, no partial credit.
pub fn format_reward(trajectory: &Trajectory) -> f64 {
    if trajectory.is_empty() {
        return 0.0;
    }
    let clean = trajectory.steps.iter().all(|s| {
        parse_step_output(&s.raw_text).is_ok() && !s.budget_forced && !s.no_action_fallback
    });
    if clean {
        1.0
    } else {
        0.0
    }
}

/// Linear decay inside the tolerance window, symmetric in early and late
/// responses: `max(0, 1 - |t_resp - t_gt| / w)`. No response scores zero.
pub fn time_reward(t_resp: Option<u32>, t_gt: u32, tolerance_w: f64) -> f64 {
    match t_resp {
        None => 0.0,
        Some(t) => {
            let delta = (t as f64 - t_gt as f64).abs();
            (1.0 - delta / tolerance_w).max(0.0)
        }
    }
}

/// 1 iff the first response's content verifies against the ground truth
/// under the answer type's deterministic rule; 0 otherwise, including when
/// the trajectory never responds.
pub fn accuracy_reward(trajectory: &Trajectory, ground_truth: &GroundTruth) -> f64 {
    match trajectory.first_response() {
        Some((_, content))
            if verify_answer(ground_truth.answer_type, &ground_truth.answer, content) =>
        {
            1.0
        }
        _ => 0.0,
    }
}

/// All components plus the weighted sum of the reward formula.
pub fn total_reward(
    trajectory: &Trajectory,
    ground_truth: &GroundTruth,
    config: &RewardConfig,
) -> RewardBreakdown {
    let r_format = format_reward(trajectory);
    let t_resp = trajectory.first_response_chunk();
    let r_time = time_reward(t_resp, ground_truth.t_gt, config.tolerance_w);
    let r_acc = accuracy_reward(trajectory, ground_truth);
    let total =
        config.format_weight * r_format + config.time_weight * r_time + config.acc_weight * r_acc;

    let mut violations = Vec::new();
    for step in &trajectory.steps {
        let chunk_index = step.metrics.chunk_index;
        if let Err(err) = parse_step_output(&step.raw_text) {
            violations.push(Violation {
                chunk_index,
                kind: ViolationKind::Grammar(err),
            });
        }
        if step.budget_forced {
            violations.push(Violation {
                chunk_index,
                kind: ViolationKind::BudgetForced,
            });
        }
        if step.no_action_fallback {
            violations.push(Violation {
                chunk_index,
                kind: ViolationKind::NoActionFallback,
            });
        }
    }

    RewardBreakdown {
        r_format,
        r_time,
        r_acc,
        total,
        t_resp,
        violations,
    }
}

/// Deterministic verification of a response against the expected answer.
pub fn verify_answer(answer_type: AnswerType, expected: &str, response: &str) -> bool {
    match answer_type {
        AnswerType::MultipleChoice => match (extract_choice(expected), extract_choice(response)) {
            (Some(e), Some(r)) => e == r,
            _ => false,
        },
        AnswerType::Binary => match (extract_binary(expected), extract_binary(response)) {
            (Some(e), Some(r)) => e == r,
            _ => false,
        },
        AnswerType::Counting => match (extract_count(expected), extract_count(response)) {
            (Some(e), Some(r)) => e == r,
            _ => false,
        },
    }
}

fn strip_punct(word: &str) -> &str {
    word.trim_matches(|c: char| c.is_ascii_punctuation())
}

/// First standalone letter A-E, case-insensitive, punctuation trimmed.
fn extract_choice(text: &str) -> Option<char> {
    text.split_whitespace().find_map(|word| {
        let w = strip_punct(word);
        if w.len() == 1 {
            let c = w.chars().next().unwrap().to_ascii_lowercase();
            if ('a'..='e').contains(&c) {
                return Some(c);
            }
        }
        None
    })
}

/// Leading yes/no after lowercasing and punctuation strip.
fn extract_binary(text: &str) -> Option<bool> {
    let first = text.split_whitespace().next()?;
    match strip_punct(first).to_ascii_lowercase().as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

const NUMERAL_WORDS: [&str; 21] = [
    "zero",
    "one",
    "two",
    "three",
    "four",
    "five",
    "six",
    "seven",
    "eight",
    "nine",
    "ten",
    "eleven",
    "twelve",
    "thirteen",
    "fourteen",
    "fifteen",
    "sixteen",
    "seventeen",
    "eighteen",
    "nineteen",
    "twenty",
];

/// First integer in the text, words zero..twenty included.
fn extract_count(text: &str) -> Option<i64> {
    text.split_whitespace().find_map(|word| {
        let w = strip_punct(word).to_ascii_lowercase();
        if let Ok(n) = w.parse::<i64>() {
            return Some(n);
        }
        NUMERAL_WORDS.iter().position(|n| *n == w).map(|i| i as i64)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wts_engine::Trajectory;

    fn gt(answer: &str, answer_type: AnswerType, t_gt: u32) -> GroundTruth {
        GroundTruth {
            answer: answer.to_string(),
            answer_type,
            t_gt,
        }
    }

    #[test]
    fn clean_trajectory_scores_format_one() {
        let traj = Trajectory::from_raw_texts(&[
            "<think>nothing yet</think><silent>",
            "<think></think><response>yes",
        ]);
        assert_eq!(format_reward(&traj), 1.0);
    }

    #[test]
    fn one_bad_step_zeroes_format() {
        let traj = Trajectory::from_raw_texts(&[
            "<think>ok</think><silent>",
            "<think>ok</think><silent>trailing",
        ]);
        assert_eq!(format_reward(&traj), 0.0);
    }

    #[test]
    fn empty_trajectory_scores_zero() {
        assert_eq!(format_reward(&Trajectory::default()), 0.0);
    }

    #[test]
    fn violation_flags_zero_format_even_when_text_parses() {
        let mut traj = Trajectory::from_raw_texts(&["<think>x</think><silent>"]);
        traj.steps[0].budget_forced = true;
        assert_eq!(format_reward(&traj), 0.0);
    }

    #[test]
    fn time_reward_formula() {
        assert_eq!(time_reward(Some(10), 10, 3.0), 1.0);
        assert_eq!(time_reward(Some(13), 10, 3.0), 0.0);
        assert_eq!(time_reward(Some(7), 10, 3.0), 0.0);
        assert_eq!(time_reward(Some(11), 10, 3.0), 1.0 - 1.0 / 3.0);
        assert_eq!(time_reward(Some(9), 10, 3.0), 1.0 - 1.0 / 3.0);
        assert_eq!(time_reward(Some(20), 10, 3.0), 0.0);
        assert_eq!(time_reward(None, 10, 3.0), 0.0);
    }

    #[test]
    fn binary_verifier_normalizes() {
        assert!(verify_answer(AnswerType::Binary, "yes", "Yes."));
        assert!(verify_answer(AnswerType::Binary, "yes", "yes definitely"));
        assert!(!verify_answer(AnswerType::Binary, "yes", "No"));
        assert!(!verify_answer(AnswerType::Binary, "yes", "maybe yes"));
        assert!(verify_answer(AnswerType::Binary, "No", "no!"));
    }

    #[test]
    fn choice_verifier_finds_first_standalone_letter() {
        assert!(verify_answer(AnswerType::MultipleChoice, "B", "b"));
        assert!(verify_answer(
            AnswerType::MultipleChoice,
            "B",
            "the answer is (B)."
        ));
        assert!(!verify_answer(AnswerType::MultipleChoice, "B", "c"));
        assert!(!verify_answer(AnswerType::MultipleChoice, "B", "bravo"));
    }

    #[test]
    fn counting_verifier_reads_digits_and_words() {
        assert!(verify_answer(AnswerType::Counting, "4", "four"));
        assert!(verify_answer(AnswerType::Counting, "four", "4 items"));
        assert!(!verify_answer(AnswerType::Counting, "4", "three"));
        assert!(verify_answer(AnswerType::Counting, "12", "I count twelve."));
        assert!(!verify_answer(AnswerType::Counting, "4", "several"));
    }

    #[test]
    fn total_reward_sums_components() {
        let cfg = RewardConfig::default();
        let traj = Trajectory::from_raw_texts(&[
            "<think>watching</think><silent>",
            "<think>event</think><response>yes",
        ]);
        let b = total_reward(&traj, &gt("yes", AnswerType::Binary, 2), &cfg);
        assert_eq!((b.r_format, b.r_time, b.r_acc), (1.0, 1.0, 1.0));
        assert_eq!(b.total, 3.0);
        assert_eq!(b.t_resp, Some(2));
        assert!(b.violations.is_empty());
    }

    #[test]
    fn never_responding_keeps_only_format() {
        let cfg = RewardConfig::default();
        let traj =
            Trajectory::from_raw_texts(&["<think>a</think><silent>", "<think>b</think><silent>"]);
        let b = total_reward(&traj, &gt("yes", AnswerType::Binary, 1), &cfg);
        assert_eq!(b.t_resp, None);
        assert_eq!((b.r_time, b.r_acc), (0.0, 0.0));
        assert_eq!(b.total, b.r_format);
        assert_eq!(b.total, 1.0);
    }

    #[test]
    fn first_response_defines_t_resp() {
        let cfg = RewardConfig::default();
        let traj = Trajectory::from_raw_texts(&[
            "<think></think><silent>",
            "<think></think><response>no",
            "<think></think><response>yes",
        ]);
        let b = total_reward(&traj, &gt("yes", AnswerType::Binary, 2), &cfg);
        assert_eq!(b.t_resp, Some(2));
        // The first response is the verified one; "yes" at chunk 3 is ignored.
        assert_eq!(b.r_acc, 0.0);
        assert_eq!(b.r_time, 1.0);
    }

    #[test]
    fn weighted_sum_is_recomputable_bitwise() {
        let cfg = RewardConfig {
            tolerance_w: 3.0,
            format_weight: 0.5,
            time_weight: 2.0,
            acc_weight: 0.25,
        };
        let traj = Trajectory::from_raw_texts(&["<think></think><response>yes"]);
        let b = total_reward(&traj, &gt("yes", AnswerType::Binary, 2), &cfg);
        let expected =
            cfg.format_weight * b.r_format + cfg.time_weight * b.r_time + cfg.acc_weight * b.r_acc;
        assert_eq!(b.total.to_bits(), expected.to_bits());
    }

    #[test]
    fn improving_one_component_never_decreases_total() {
        // Non-negative weights make the sum monotone in each component.
        let weight_grids = [
            RewardConfig::default(),
            RewardConfig {
                tolerance_w: 3.0,
                format_weight: 0.0,
                time_weight: 2.5,
                acc_weight: 0.1,
            },
            RewardConfig {
                tolerance_w: 5.0,
                format_weight: 1.5,
                time_weight: 0.0,
                acc_weight: 3.0,
            },
        ];
        let sum = |cfg: &RewardConfig, c: (f64, f64, f64)| {
            cfg.format_weight * c.0 + cfg.time_weight * c.1 + cfg.acc_weight * c.2
        };
        for cfg in &weight_grids {
            for base in [(0.0, 0.0, 0.0), (1.0, 0.5, 0.0), (0.0, 1.0, 1.0)] {
                for bump in [
                    (base.0 + 1.0, base.1, base.2),
                    (base.0, base.1 + 0.25, base.2),
                    (base.0, base.1, base.2 + 1.0),
                ] {
                    assert!(sum(cfg, bump) >= sum(cfg, base));
                }
            }
        }
    }

    #[test]
    fn violations_carry_chunk_and_kind() {
        let mut traj =
            Trajectory::from_raw_texts(&["<think>fine</think><silent>", "<think>broken"]);
        traj.steps[1].no_action_fallback = true;
        let b = total_reward(
            &traj,
            &gt("yes", AnswerType::Binary, 1),
            &RewardConfig::default(),
        );
        assert_eq!(b.violations.len(), 2);
        assert_eq!(b.violations[0].chunk_index, 2);
        assert!(matches!(
            b.violations[0].kind,
            ViolationKind::Grammar(FormatError::UnclosedThink)
        ));
        assert!(matches!(
            b.violations[1].kind,
            ViolationKind::NoActionFallback
        ));
    }
}

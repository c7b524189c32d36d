//! The toy token universe: reserved marker ids, a small word lexicon for
//! verifiable answers, and the deterministic text<->id mappings used by
//! instruction tokenization and trace rendering.
//!
//! Layout of the 256-id universe:
//!   0..=4    structural markers (`<think>`, `</think>`, `<silent>`,
//!            `<response>`, end-of-turn)
//!   5        the evidence-marked visual id the synthetic environment hides
//!            in chunks at/after the ground-truth onset
//!   6..=33   word lexicon (yes/no, choice letters, numerals zero..twenty)
//!   34..=255 general ids (visual features, reasoning filler, hashed words)

use super::splitmix64;

pub const THINK_OPEN: u32 = 0;
pub const THINK_CLOSE: u32 = 1;
pub const SILENT: u32 = 2;
pub const RESPONSE: u32 = 3;
pub const END_OF_TURN: u32 = 4;
pub const EVIDENCE: u32 = 5;

pub const THINK_OPEN_STR: &str = "<think>";
pub const THINK_CLOSE_STR: &str = "</think>";
pub const SILENT_STR: &str = "<silent>";
pub const RESPONSE_STR: &str = "<response>";

const WORD_BASE: u32 = 6;

/// Lexicon words, id = `WORD_BASE + index`.
pub const WORDS: [&str; 28] = [
    "yes",
    "no",
    "a",
    "b",
    "c",
    "d",
    "e",
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

/// First id of the general (non-reserved) range.
pub const GENERAL_BASE: u32 = WORD_BASE + WORDS.len() as u32;

/// Size of the token universe. Decoders must be configured with at least
/// this many vocabulary entries.
pub const UNIVERSE: u32 = 256;

/// Reserved id for a lexicon word, if it has one.
pub fn word_id(word: &str) -> Option<u32> {
    let lower = word.to_ascii_lowercase();
    WORDS
        .iter()
        .position(|w| *w == lower)
        .map(|i| WORD_BASE + i as u32)
}

/// Maps a hash into the general id range.
pub fn general_id(hash: u64) -> u32 {
    GENERAL_BASE + (hash % (UNIVERSE - GENERAL_BASE) as u64) as u32
}

/// Deterministic toy tokenizer: lexicon words keep their reserved ids,
/// everything else hashes into the general range.
pub fn tokenize_text(text: &str) -> Vec<u32> {
    text.split_whitespace()
        .map(|word| {
            word_id(word).unwrap_or_else(|| {
                let mut h = 0xcbf2_9ce4_8422_2325u64;
                for b in word.as_bytes() {
                    h = splitmix64(h ^ *b as u64);
                }
                general_id(h)
            })
        })
        .collect()
}

/// Human-readable form of a single id.
pub fn render_token(id: u32) -> &'static str {
    match id {
        THINK_OPEN => THINK_OPEN_STR,
        THINK_CLOSE => THINK_CLOSE_STR,
        SILENT => SILENT_STR,
        RESPONSE => RESPONSE_STR,
        END_OF_TURN => "",
        _ => {
            if (WORD_BASE..GENERAL_BASE).contains(&id) {
                WORDS[(id - WORD_BASE) as usize]
            } else {
                // General ids get a stable synthetic spelling.
                general_spelling(id)
            }
        }
    }
}

fn general_spelling(id: u32) -> &'static str {
    // One static spelling per id keeps rendering allocation-free.
    static SPELLINGS: std::sync::OnceLock<Vec<String>> = std::sync::OnceLock::new();
    let table = SPELLINGS.get_or_init(|| (0..UNIVERSE).map(|i| format!("w{i}")).collect());
    &table[id as usize % table.len()]
}

/// Renders a generated id sequence into the step-output text form. Marker
/// ids print bare; consecutive word-like ids are space-separated.
pub fn render_tokens(ids: &[u32]) -> String {
    let mut out = String::new();
    let mut prev_was_text = false;
    for &id in ids {
        if id == END_OF_TURN {
            continue;
        }
        let is_marker = id <= RESPONSE;
        if is_marker {
            out.push_str(render_token(id));
            prev_was_text = false;
        } else {
            if prev_was_text {
                out.push(' ');
            }
            out.push_str(render_token(id));
            prev_was_text = true;
        }
    }
    out
}

/// True for ids that render as markers rather than text content.
pub fn is_marker(id: u32) -> bool {
    id <= END_OF_TURN
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicon_lookup_is_case_insensitive() {
        assert_eq!(word_id("YES"), Some(6));
        assert_eq!(word_id("b"), word_id("B"));
        assert_eq!(word_id("twenty"), Some(33));
        assert_eq!(word_id("banana"), None);
    }

    #[test]
    fn tokenize_hashes_unknown_words_into_general_range() {
        let ids = tokenize_text("watch the door yes");
        assert_eq!(ids.len(), 4);
        assert!(ids[0] >= GENERAL_BASE && ids[0] < UNIVERSE);
        assert_eq!(ids[3], 6);
        assert_eq!(ids, tokenize_text("watch the door yes"));
    }

    #[test]
    fn render_joins_words_and_keeps_markers_tight() {
        let ids = vec![
            THINK_OPEN,
            word_id("three").unwrap(),
            200,
            THINK_CLOSE,
            SILENT,
        ];
        assert_eq!(render_tokens(&ids), "<think>three w200</think><silent>");
    }

    #[test]
    fn end_of_turn_renders_as_nothing() {
        let ids = vec![
            THINK_OPEN,
            THINK_CLOSE,
            RESPONSE,
            word_id("yes").unwrap(),
            END_OF_TURN,
        ];
        assert_eq!(render_tokens(&ids), "<think></think><response>yes");
    }
}

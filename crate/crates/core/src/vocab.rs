//! Fixed synthetic vocabulary: control tokens first, then narration words.

pub type TokenId = u32;

pub const SILENCE: TokenId = 0;
pub const RESPOND: TokenId = 1;
pub const STREAM_TAG: TokenId = 2;
pub const USER_TAG: TokenId = 3;
pub const FOCUS_PHRASE: TokenId = 4;
pub const FRAME_SEP: TokenId = 5;
pub const TURN_END: TokenId = 6;
pub const N_SPECIAL: TokenId = 7;

pub const OBJECT: TokenId = 7;
pub const ENTERS: TokenId = 8;
pub const LEAVES: TokenId = 9;
pub const LEFT_HAND: TokenId = 10;
pub const RIGHT_HAND: TokenId = 11;
pub const MOVES: TokenId = 12;
pub const UP: TokenId = 13;
pub const DOWN: TokenId = 14;
pub const LEFTWARD: TokenId = 15;
pub const RIGHTWARD: TokenId = 16;
pub const TOP_LEFT: TokenId = 17;
pub const TOP_RIGHT: TokenId = 18;
pub const BOTTOM_LEFT: TokenId = 19;
pub const BOTTOM_RIGHT: TokenId = 20;
pub const WHERE: TokenId = 21;
pub const IS: TokenId = 22;
pub const NOTHING: TokenId = 23;
pub const HERE: TokenId = 24;

/// Smallest vocabulary that holds every named token.
pub const MIN_VOCAB: usize = 25;

const NAMES: [&str; MIN_VOCAB] = [
    "<silence>",
    "<assistant>",
    "<stream>",
    "<user>",
    "<focus>",
    "<sep>",
    "<turn_end>",
    "object",
    "enters",
    "leaves",
    "left_hand",
    "right_hand",
    "moves",
    "up",
    "down",
    "leftward",
    "rightward",
    "top_left",
    "top_right",
    "bottom_left",
    "bottom_right",
    "where",
    "is",
    "nothing",
    "here",
];

pub fn is_special(id: TokenId) -> bool {
    id < N_SPECIAL
}

pub fn token_name(id: TokenId) -> String {
    NAMES
        .get(id as usize)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("w{id}"))
}

/// Tokens that never appear in generated ground truth; used to corrupt turns.
pub fn filler_range(vocab_size: usize) -> std::ops::Range<TokenId> {
    MIN_VOCAB as TokenId..vocab_size as TokenId
}

pub fn render(tokens: &[TokenId]) -> String {
    tokens.iter().map(|&t| token_name(t)).collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_are_disjoint_from_words() {
        assert_ne!(SILENCE, RESPOND);
        for id in [SILENCE, RESPOND, STREAM_TAG, USER_TAG, FOCUS_PHRASE, FRAME_SEP, TURN_END] {
            assert!(is_special(id));
        }
        for id in OBJECT..MIN_VOCAB as TokenId {
            assert!(!is_special(id));
        }
        assert_eq!(token_name(40), "w40");
    }
}

//! Character-level tokenizer over printable ASCII plus six specials.

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const TRAJ: usize = 4;
pub const STEP: usize = 5;

const NUM_SPECIALS: usize = 6;
const FIRST_CHAR: u8 = 32;
const LAST_CHAR: u8 = 126;

/// Printable ASCII (95 characters) plus specials.
pub const VOCAB_SIZE: usize = NUM_SPECIALS + (LAST_CHAR - FIRST_CHAR + 1) as usize;

/// Uncovered characters (including newlines) are encoded as this one.
pub const REPLACEMENT: char = ' ';

/// Literal markers recognized by [`Tokenizer::encode_marked`].
const MARKERS: [(&str, usize); 3] = [("[SEP]", SEP), ("[TRAJ", TRAJ), ("[STEP", STEP)];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn char_id(c: char) -> usize {
        let c = if (FIRST_CHAR as char..=LAST_CHAR as char).contains(&c) {
            c
        } else {
            REPLACEMENT
        };
        NUM_SPECIALS + (c as u8 - FIRST_CHAR) as usize
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_SPECIALS
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars().map(Self::char_id).collect()
    }

    /// Like [`encode`](Self::encode) but maps the literal markers `[SEP]`,
    /// `[TRAJ` and `[STEP` to their special tokens.
    pub fn encode_marked(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::with_capacity(text.len());
        let mut rest = text;
        'outer: while !rest.is_empty() {
            for (m, id) in MARKERS {
                if let Some(tail) = rest.strip_prefix(m) {
                    out.push(id);
                    rest = tail;
                    continue 'outer;
                }
            }
            let c = rest.chars().next().expect("nonempty");
            out.push(Self::char_id(c));
            rest = &rest[c.len_utf8()..];
        }
        out
    }

    /// Inverse of [`encode`](Self::encode). `PAD`, `BOS` and `EOS` render as
    /// nothing; marker specials render as their literal markers.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut s = String::with_capacity(ids.len());
        for &id in ids {
            match id {
                PAD | BOS | EOS => {}
                SEP => s.push_str("[SEP]"),
                TRAJ => s.push_str("[TRAJ"),
                STEP => s.push_str("[STEP"),
                _ if id < VOCAB_SIZE => s.push((FIRST_CHAR + (id - NUM_SPECIALS) as u8) as char),
                _ => s.push(REPLACEMENT),
            }
        }
        s
    }

    /// True when every character of `text` survives a round trip.
    pub fn covers(text: &str) -> bool {
        text.chars()
            .all(|c| (FIRST_CHAR as char..=LAST_CHAR as char).contains(&c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vocab_is_101() {
        assert_eq!(VOCAB_SIZE, 101);
    }

    #[test]
    fn small_round_trips() {
        let t = Tokenizer;
        let ids = t.encode("ab");
        assert_eq!(ids, vec![Tokenizer::char_id('a'), Tokenizer::char_id('b')]);
        assert_eq!(t.decode(&ids), "ab");
        assert!(t.encode("").is_empty());
        assert_eq!(t.decode(&[]), "");
    }

    #[test]
    fn specials_never_collide_with_characters() {
        for c in ' '..='~' {
            assert!(!Tokenizer::is_special(Tokenizer::char_id(c)));
        }
    }

    #[test]
    fn uncovered_characters_are_replaced() {
        let t = Tokenizer;
        assert_eq!(t.decode(&t.encode("a\nb")), "a b");
        assert_eq!(t.decode(&t.encode("é")), " ");
    }

    #[test]
    fn markers_become_specials() {
        let t = Tokenizer;
        let ids = t.encode_marked("ROLE: x [SEP] [TRAJ 1]");
        assert!(ids.contains(&SEP) && ids.contains(&TRAJ));
        assert_eq!(t.decode(&ids), "ROLE: x [SEP] [TRAJ 1]");
    }

    proptest! {
        #[test]
        fn covered_strings_round_trip(s in "[ -~]{0,64}") {
            let t = Tokenizer;
            prop_assert_eq!(t.decode(&t.encode(&s)), s);
        }
    }
}

//! Fixed byte-class tokenizer, vocabulary size 64. The vocabulary is
//! frozen in code because cross-checkpoint compatibility underpins every
//! merge method.

pub const VOCAB_SIZE: usize = 64;
pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const NEWLINE: u32 = 3;
pub const SPACE: u32 = 4;

const SYMBOLS: &[char] = &[
    '+', '-', '*', '/', '=', '(', ')', '[', ']', '{', '}', '<', '>', ':', ';', ',', '.', '?',
    '!', '_', '%', '#', '\'',
];

/// Token id for a character, if it is in the vocabulary.
pub fn encode_char(c: char) -> Option<u32> {
    match c {
        '\n' => Some(NEWLINE),
        ' ' => Some(SPACE),
        'a'..='z' => Some(5 + (c as u32 - 'a' as u32)),
        '0'..='9' => Some(31 + (c as u32 - '0' as u32)),
        _ => SYMBOLS
            .iter()
            .position(|&s| s == c)
            .map(|i| 41 + i as u32),
    }
}

pub fn decode_char(id: u32) -> Option<char> {
    match id {
        NEWLINE => Some('\n'),
        SPACE => Some(' '),
        5..=30 => Some((b'a' + (id - 5) as u8) as char),
        31..=40 => Some((b'0' + (id - 31) as u8) as char),
        41..=63 => Some(SYMBOLS[(id - 41) as usize]),
        _ => None, // pad/bos/eos have no character form
    }
}

/// Encode a string. Panics on characters outside the vocabulary; the
/// generators only produce in-vocabulary text.
pub fn encode(s: &str) -> Vec<u32> {
    s.chars()
        .map(|c| encode_char(c).unwrap_or_else(|| panic!("char {c:?} not in vocabulary")))
        .collect()
}

pub fn decode(ids: &[u32]) -> String {
    ids.iter().filter_map(|&id| decode_char(id)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_exactly_64_and_bijective_on_chars() {
        let mut seen = std::collections::BTreeSet::new();
        for id in 0..VOCAB_SIZE as u32 {
            if let Some(c) = decode_char(id) {
                assert_eq!(encode_char(c), Some(id));
                assert!(seen.insert(c), "duplicate char {c:?}");
            }
        }
        // 64 ids total: 3 specials without char form + 61 characters.
        assert_eq!(seen.len(), 61);
        assert_eq!(decode_char(64), None);
    }

    #[test]
    fn encode_decode_round_trip() {
        let s = "e:the cat runs>gvk 12+7=19\nprint(a);output:5";
        assert_eq!(decode(&encode(s)), s);
    }
}

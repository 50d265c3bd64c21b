use std::collections::HashMap;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;

/// Literal spellings of the special tokens, in id order.
pub const SPECIALS: [&str; 5] = ["<pad>", "<s>", "</s>", "<mask>", "<unk>"];

const EXTRA_CHARS: [char; 4] = ['\n', '\t', '\u{2018}', '\u{2019}'];

/// Character-level tokenizer over printable ASCII plus a few typographic characters.
///
/// The spellings `<s>`, `</s>` and `<mask>` inside a text map to their special ids.
#[derive(Debug, Clone)]
pub struct CharTokenizer {
    to_id: HashMap<char, u32>,
    to_char: Vec<char>,
}

impl Default for CharTokenizer {
    fn default() -> Self {
        let chars: Vec<char> = (b' '..=b'~').map(char::from).chain(EXTRA_CHARS).collect();
        let offset = SPECIALS.len() as u32;
        let to_id = chars.iter().enumerate().map(|(i, &c)| (c, offset + i as u32)).collect();
        CharTokenizer { to_id, to_char: chars }
    }
}

impl CharTokenizer {
    pub fn vocab_size(&self) -> usize {
        SPECIALS.len() + self.to_char.len()
    }

    /// Token ids of `text` without the surrounding `<s>`/`</s>`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::with_capacity(text.len());
        let mut rest = text;
        'outer: while let Some(c) = rest.chars().next() {
            if c == '<' {
                for (id, special) in SPECIALS.iter().enumerate().skip(1).take(3) {
                    if let Some(tail) = rest.strip_prefix(special) {
                        ids.push(id as u32);
                        rest = tail;
                        continue 'outer;
                    }
                }
            }
            ids.push(self.to_id.get(&c).copied().unwrap_or(UNK));
            rest = &rest[c.len_utf8()..];
        }
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let offset = SPECIALS.len() as u32;
        ids.iter()
            .map(|&id| match id {
                id if id >= offset => self.to_char[(id - offset) as usize].to_string(),
                UNK => "\u{fffd}".to_owned(),
                PAD | CLS => String::new(),
                id => SPECIALS[id as usize].to_owned(),
            })
            .collect()
    }

    pub fn id_to_token(&self, id: u32) -> String {
        self.decode(&[id])
    }
}

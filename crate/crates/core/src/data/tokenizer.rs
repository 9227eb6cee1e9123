use crate::error::{Error, Result};

/// Character-level tokenizer over printable ASCII plus newline, shared by
/// every specialist so that response token ids line up across templates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tokenizer;

const FIRST_PRINTABLE: u8 = b' ';
const LAST_PRINTABLE: u8 = b'~';
const NEWLINE_ID: usize = (LAST_PRINTABLE - FIRST_PRINTABLE + 1) as usize;

impl Tokenizer {
    /// End-of-response marker; terminates every response span.
    pub const EOS: usize = NEWLINE_ID + 1;

    pub fn new() -> Self {
        Tokenizer
    }

    pub fn vocab_size(&self) -> usize {
        Self::EOS + 1
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| match c {
                '\n' => Ok(NEWLINE_ID),
                ' '..='~' => Ok((c as u8 - FIRST_PRINTABLE) as usize),
                _ => Err(Error::Alphabet(c)),
            })
            .collect()
    }

    /// Decodes ids back to text, dropping the end-of-response marker.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&id| self.token_str(id)).collect()
    }

    pub fn token_str(&self, id: usize) -> Option<char> {
        match id {
            NEWLINE_ID => Some('\n'),
            i if i < NEWLINE_ID => Some((FIRST_PRINTABLE + i as u8) as char),
            _ => None,
        }
    }

    /// Display form of a token for listings: escapes newline and names EOS.
    pub fn display(&self, id: usize) -> String {
        match id {
            NEWLINE_ID => "\\n".into(),
            Self::EOS => "<eos>".into(),
            _ => self.token_str(id).map(String::from).unwrap_or_else(|| format!("<{id}>")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_all_printable() {
        let tok = Tokenizer::new();
        let text: String = (b' '..=b'~').map(|b| b as char).chain(['\n']).collect();
        let ids = tok.encode(&text).unwrap();
        assert_eq!(ids.len(), 96);
        assert!(ids.iter().all(|&i| i < tok.vocab_size() && i != Tokenizer::EOS));
        assert_eq!(tok.decode(&ids), text);
    }

    #[test]
    fn eos_is_dropped_on_decode() {
        let tok = Tokenizer::new();
        let mut ids = tok.encode("ab").unwrap();
        ids.push(Tokenizer::EOS);
        assert_eq!(tok.decode(&ids), "ab");
        assert_eq!(tok.vocab_size(), 97);
    }

    #[test]
    fn rejects_foreign_characters() {
        assert!(Tokenizer::new().encode("tab\there").is_err());
        assert!(Tokenizer::new().encode("é").is_err());
    }
}

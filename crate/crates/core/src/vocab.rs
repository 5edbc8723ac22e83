use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EOS: usize = 0;
pub const EOS_TOKEN: &str = "</s>";

/// Token inventory: end-of-sequence, one tag per language, then the shared
/// content words `w0 .. w{n-1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    languages: Vec<String>,
    content_size: usize,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(languages: Vec<String>, content_size: usize) -> Self {
        let mut v = Self {
            languages,
            content_size,
            index: HashMap::new(),
        };
        v.rebuild_index();
        v
    }

    pub(crate) fn rebuild_index(&mut self) {
        self.index = (0..self.len()).map(|id| (self.token(id), id)).collect();
    }

    pub fn len(&self) -> usize {
        1 + self.languages.len() + self.content_size
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn content_size(&self) -> usize {
        self.content_size
    }

    pub fn lang_tag(code: &str) -> String {
        format!("__{code}__")
    }

    pub fn lang_id(&self, code: &str) -> Result<usize> {
        self.languages
            .iter()
            .position(|l| l == code)
            .map(|p| 1 + p)
            .ok_or_else(|| Error::UnknownLanguage(code.to_string()))
    }

    pub fn is_lang_id(&self, id: usize) -> bool {
        (1..=self.languages.len()).contains(&id)
    }

    pub fn word_id(&self, word: usize) -> usize {
        1 + self.languages.len() + word
    }

    pub fn first_word_id(&self) -> usize {
        1 + self.languages.len()
    }

    pub fn token(&self, id: usize) -> String {
        if id == EOS {
            EOS_TOKEN.to_string()
        } else if self.is_lang_id(id) {
            Self::lang_tag(&self.languages[id - 1])
        } else {
            format!("w{}", id - self.first_word_id())
        }
    }

    pub fn encode_text(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|t| {
                self.index
                    .get(t)
                    .copied()
                    .ok_or_else(|| Error::UnknownToken(t.to_string()))
            })
            .collect()
    }

    pub fn decode_ids(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_round_trip() {
        let v = Vocab::new(vec!["aa".into(), "bb".into()], 4);
        assert_eq!(v.len(), 7);
        assert_eq!(v.lang_id("bb").unwrap(), 2);
        assert_eq!(v.token(3), "w0");
        let ids = v.encode_text("w3 w0 __aa__ </s>").unwrap();
        assert_eq!(ids, vec![6, 3, 1, 0]);
        assert_eq!(v.decode_ids(&ids), "w3 w0 __aa__ </s>");
        assert!(matches!(v.lang_id("zz"), Err(Error::UnknownLanguage(_))));
        assert!(v.encode_text("w9").is_err());
    }
}

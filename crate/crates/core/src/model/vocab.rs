use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";

/// Explicit string-to-id vocabulary with whitespace tokenization.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    unk: Option<u32>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty vocab".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!(
                    "vocab token {i} is empty or contains whitespace"
                )));
            }
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocab token {t:?}")));
            }
        }
        let unk = ids.get(UNK).copied();
        Ok(Self { tokens, ids, unk })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn unk_id(&self) -> Option<u32> {
        self.unk
    }

    /// Resolve a token strictly, without falling back to `<unk>`.
    pub fn resolve(&self, token: &str) -> Result<u32> {
        self.id(token)
            .ok_or_else(|| Error::UnresolvableToken(token.to_string()))
    }

    /// Whitespace-split encoding; unknown words map to `<unk>` when present.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| match (self.id(w), self.unk) {
                (Some(id), _) => Ok(id),
                (None, Some(unk)) => Ok(unk),
                (None, None) => Err(Error::UnresolvableToken(w.to_string())),
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `token<TAB>id` lines; ids must be dense in `[0, V)`.
    pub fn parse_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut slots: Vec<Option<String>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (tok, id) = line.split_once('\t').ok_or_else(|| {
                Error::parse(path, format!("line {}: expected token<TAB>id", lineno + 1))
            })?;
            let id: usize = id.trim().parse().map_err(|_| {
                Error::parse(path, format!("line {}: bad id {id:?}", lineno + 1))
            })?;
            if id >= slots.len() {
                slots.resize(id + 1, None);
            }
            if slots[id].replace(tok.to_string()).is_some() {
                return Err(Error::parse(path, format!("duplicate id {id}")));
            }
        }
        let tokens = slots
            .into_iter()
            .enumerate()
            .map(|(i, t)| t.ok_or_else(|| Error::parse(path, format!("id {i} missing"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(tokens)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(t);
            out.push('\t');
            out.push_str(&i.to_string());
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Vocab {
        Vocab::new(vec!["<unk>".into(), "a".into(), "b".into()]).unwrap()
    }

    #[test]
    fn encode_with_unk() {
        let v = toy();
        assert_eq!(v.encode("a  b\tzz a").unwrap(), vec![1, 2, 0, 1]);
        assert_eq!(v.decode(&[1, 2]), "a b");
        assert!(matches!(v.resolve("zz"), Err(Error::UnresolvableToken(_))));
    }

    #[test]
    fn tsv_round_trip() {
        let v = toy();
        let back = Vocab::parse_tsv(&v.to_tsv(), Path::new("v.tsv")).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn tsv_rejects_gaps_and_duplicates() {
        assert!(Vocab::parse_tsv("a\t0\nb\t2\n", Path::new("v")).is_err());
        assert!(Vocab::parse_tsv("a\t0\nb\t0\n", Path::new("v")).is_err());
        assert!(Vocab::parse_tsv("a\t0\na\t1\n", Path::new("v")).is_err());
    }
}

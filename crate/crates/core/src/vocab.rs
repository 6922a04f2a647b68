//! Subword vocabulary: the id space shared by the models and the decoder.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::bpe::BpeError;
use crate::lexer::{EOC, META_TOKENS, SOC};

pub const UNK: &str = "<unk>";

/// Ids 0..=4 are `<unk>` and the four meta-tokens, in that order; learned
/// subwords follow by descending frequency, then lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    entries: Vec<(String, u64)>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_counts(counts: HashMap<String, u64>) -> Self {
        let mut entries: Vec<(String, u64)> = std::iter::once(UNK)
            .chain(META_TOKENS)
            .map(|s| (s.to_string(), counts.get(s).copied().unwrap_or(0)))
            .collect();
        let mut rest: Vec<(String, u64)> =
            counts.into_iter().filter(|(s, _)| s != UNK && !META_TOKENS.contains(&s.as_str())).collect();
        rest.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        entries.extend(rest);
        Vocabulary::from_entries(entries)
    }

    /// Counts subwords over encoded documents.
    pub fn build<S: AsRef<str>>(docs: &[Vec<S>]) -> Self {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for sw in docs.iter().flatten() {
            *counts.entry(sw.as_ref().to_string()).or_insert(0) += 1;
        }
        Vocabulary::from_counts(counts)
    }

    fn from_entries(entries: Vec<(String, u64)>) -> Self {
        let index = entries.iter().enumerate().map(|(i, (s, _))| (s.clone(), i as u32)).collect();
        Vocabulary { entries, index }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn unk_id(&self) -> u32 {
        0
    }

    pub fn soc_id(&self) -> u32 {
        self.index[SOC]
    }

    pub fn eoc_id(&self) -> u32 {
        self.index[EOC]
    }

    pub fn id(&self, subword: &str) -> Option<u32> {
        self.index.get(subword).copied()
    }

    pub fn subword(&self, id: u32) -> Option<&str> {
        self.entries.get(id as usize).map(|(s, _)| s.as_str())
    }

    /// Maps subwords to ids; unknown subwords become `<unk>`.
    pub fn ids<S: AsRef<str>>(&self, subwords: &[S]) -> Vec<u32> {
        subwords.iter().map(|s| self.id(s.as_ref()).unwrap_or(0)).collect()
    }

    pub fn subwords(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.subword(i).unwrap_or(UNK).to_string()).collect()
    }

    /// One `subword count` line per entry, in id order.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(s, c)| format!("{s} {c}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self, BpeError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let err = || BpeError::Format { line: i + 1, message: format!("expected `subword count`, got {line:?}") };
            let (s, c) = line.rsplit_once(' ').ok_or_else(err)?;
            let c = c.parse().map_err(|_| err())?;
            entries.push((s.to_string(), c));
        }
        let expected: Vec<&str> = std::iter::once(UNK).chain(META_TOKENS).collect();
        if entries.len() < expected.len() || entries.iter().zip(&expected).any(|((s, _), e)| s != e) {
            return Err(BpeError::Format {
                line: 1,
                message: "vocabulary must start with <unk> and the meta-tokens".into(),
            });
        }
        Ok(Vocabulary::from_entries(entries))
    }

    pub fn save(&self, path: &Path) -> Result<(), BpeError> {
        Ok(fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self, BpeError> {
        Vocabulary::from_text(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_first_then_by_frequency() {
        let docs = vec![vec!["b", "a", "b", "<soc>", "c@@", "b"]];
        let v = Vocabulary::build(&docs);
        assert_eq!(v.subword(0), Some(UNK));
        assert_eq!(v.soc_id(), 1);
        assert_eq!(v.eoc_id(), 2);
        assert_eq!(v.subword(5), Some("b"));
        assert_eq!(v.subword(6), Some("a"));
        assert_eq!(v.subword(7), Some("c@@"));
        assert_eq!(v.ids(&["a", "zz"]), [6, 0]);
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
    }
}

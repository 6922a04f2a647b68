//! Byte-pair encoding over corpus tokens.
//!
//! A token is split into characters; every piece except the last carries
//! the continuation suffix `@@`, so `"abc"` starts out as
//! `["a@@", "b@@", "c"]`. Merges are learned from the most frequent adjacent
//! pair and applied in learned order. Meta-tokens are atomic: they are
//! never split, never counted and pass through encoding unchanged.

use std::cmp::Reverse;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::lexer::META_TOKENS;

pub const CONTINUATION: &str = "@@";
const HEADER: &str = "#version 1";

#[derive(Debug, Error)]
pub enum BpeError {
    #[error("corpus contains no non-reserved tokens")]
    EmptyCorpus,
    #[error("subword sequence ends inside a token ({fragment:?})")]
    DanglingContinuation { fragment: String },
    #[error("merges file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeTable {
    merges: Vec<(String, String)>,
    reserved: BTreeSet<String>,
    ranks: HashMap<(String, String), usize>,
}

impl Default for MergeTable {
    fn default() -> Self {
        MergeTable::new(Vec::new()).expect("empty table is valid")
    }
}

impl MergeTable {
    /// Builds a table with the standard reserved meta-tokens.
    pub fn new(merges: Vec<(String, String)>) -> Result<Self, BpeError> {
        let reserved: BTreeSet<String> = META_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, pair) in merges.iter().enumerate() {
            if reserved.contains(&pair.0) || reserved.contains(&pair.1) {
                return Err(BpeError::Format { line: i + 2, message: "merge involves a reserved token".into() });
            }
            if ranks.insert(pair.clone(), i).is_some() {
                return Err(BpeError::Format {
                    line: i + 2,
                    message: format!("duplicate merge {} {}", pair.0, pair.1),
                });
            }
        }
        Ok(MergeTable { merges, reserved, ranks })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    pub fn reserved(&self) -> &BTreeSet<String> {
        &self.reserved
    }

    pub fn is_reserved(&self, token: &str) -> bool {
        self.reserved.contains(token)
    }

    /// The table formed by the first `n` merges.
    pub fn truncated(&self, n: usize) -> MergeTable {
        MergeTable::new(self.merges[..n.min(self.merges.len())].to_vec()).expect("prefix of a valid table")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for (l, r) in &self.merges {
            out.push_str(l);
            out.push(' ');
            out.push_str(r);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, BpeError> {
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(BpeError::Format { line: 1, message: format!("expected header {HEADER:?}") });
        }
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((l.to_string(), r.to_string()))
                }
                _ => {
                    return Err(BpeError::Format { line: i + 2, message: format!("expected two fields, got {line:?}") })
                }
            }
        }
        MergeTable::new(merges)
    }

    pub fn save(&self, path: &Path) -> Result<(), BpeError> {
        Ok(fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self, BpeError> {
        MergeTable::from_text(&fs::read_to_string(path)?)
    }

    /// Segments one token. Reserved tokens come back unchanged.
    pub fn encode_token(&self, token: &str) -> Vec<String> {
        if self.is_reserved(token) {
            return vec![token.to_string()];
        }
        let mut pieces = split_chars(token);
        // Lowest-rank-first merging is equivalent to applying the table in
        // order: any pair containing a merged symbol ranks after its merge.
        loop {
            let best = pieces
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let (left, right) = &self.merges[rank];
            let merged = merge_symbols(left, right);
            let mut out = Vec::with_capacity(pieces.len());
            let mut i = 0;
            while i < pieces.len() {
                if i + 1 < pieces.len() && &pieces[i] == left && &pieces[i + 1] == right {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut pieces[i]));
                    i += 1;
                }
            }
            pieces = out;
        }
        pieces
    }

    /// Encodes a token sequence. Tokens are expected not to end in `@@`
    /// (true of every Java token), which keeps decoding unambiguous.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<String> {
        let mut cache: HashMap<&str, Vec<String>> = HashMap::new();
        let mut out = Vec::with_capacity(tokens.len() * 2);
        for tok in tokens {
            let tok = tok.as_ref();
            let pieces = cache.entry(tok).or_insert_with(|| self.encode_token(tok));
            out.extend(pieces.iter().cloned());
        }
        out
    }
}

fn split_chars(token: &str) -> Vec<String> {
    let n = token.chars().count();
    token
        .chars()
        .enumerate()
        .map(|(i, c)| if i + 1 < n { format!("{c}{CONTINUATION}") } else { c.to_string() })
        .collect()
}

fn merge_symbols(left: &str, right: &str) -> String {
    let stem = left.strip_suffix(CONTINUATION).unwrap_or(left);
    format!("{stem}{right}")
}

/// Learns up to `num_merges` merges from `corpus`. At each step the most
/// frequent adjacent pair wins, ties going to the lexicographically
/// smallest `(left, right)`. Learning stops once no pair occurs twice.
pub fn learn_merges<S: AsRef<str>>(corpus: &[S], num_merges: usize) -> Result<MergeTable, BpeError> {
    let reserved: HashSet<&str> = META_TOKENS.iter().copied().collect();
    let mut word_counts: HashMap<&str, i64> = HashMap::new();
    for tok in corpus {
        let tok = tok.as_ref();
        if !reserved.contains(tok) {
            *word_counts.entry(tok).or_insert(0) += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(BpeError::EmptyCorpus);
    }
    let mut learner = Learner::new(word_counts);
    let mut merges = Vec::new();
    while merges.len() < num_merges {
        let Some(&(Reverse(count), ref left, ref right)) = learner.queue.first() else { break };
        if count < 2 {
            break;
        }
        let pair = (left.clone(), right.clone());
        learner.apply(&pair);
        merges.push(pair);
    }
    MergeTable::new(merges)
}

struct Learner {
    words: Vec<(Vec<String>, i64)>,
    counts: HashMap<(String, String), i64>,
    where_found: HashMap<(String, String), BTreeSet<usize>>,
    queue: BTreeSet<(Reverse<i64>, String, String)>,
}

impl Learner {
    fn new(word_counts: HashMap<&str, i64>) -> Self {
        let mut words: Vec<(Vec<String>, i64)> = word_counts.into_iter().map(|(w, c)| (split_chars(w), c)).collect();
        words.sort();
        let mut learner =
            Learner { words: Vec::new(), counts: HashMap::new(), where_found: HashMap::new(), queue: BTreeSet::new() };
        for (idx, (symbols, count)) in words.iter().enumerate() {
            learner.add_pairs(idx, symbols, *count);
        }
        learner.words = words;
        learner
    }

    fn adjust(&mut self, pair: &(String, String), delta: i64) {
        let entry = self.counts.entry(pair.clone()).or_insert(0);
        let old = *entry;
        *entry += delta;
        let new = *entry;
        if old > 0 {
            self.queue.remove(&(Reverse(old), pair.0.clone(), pair.1.clone()));
        }
        if new > 0 {
            self.queue.insert((Reverse(new), pair.0.clone(), pair.1.clone()));
        } else {
            self.counts.remove(pair);
        }
    }

    fn add_pairs(&mut self, idx: usize, symbols: &[String], count: i64) {
        for w in symbols.windows(2) {
            let pair = (w[0].clone(), w[1].clone());
            self.where_found.entry(pair.clone()).or_default().insert(idx);
            self.adjust(&pair, count);
        }
    }

    fn remove_pairs(&mut self, symbols: &[String], count: i64) {
        for w in symbols.windows(2) {
            self.adjust(&(w[0].clone(), w[1].clone()), -count);
        }
    }

    fn apply(&mut self, pair: &(String, String)) {
        let merged = merge_symbols(&pair.0, &pair.1);
        let affected = self.where_found.remove(pair).unwrap_or_default();
        for idx in affected {
            let (symbols, count) = std::mem::take(&mut self.words[idx]);
            if !symbols.windows(2).any(|w| w[0] == pair.0 && w[1] == pair.1) {
                self.words[idx] = (symbols, count);
                continue;
            }
            self.remove_pairs(&symbols, count);
            let mut out = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(symbols[i].clone());
                    i += 1;
                }
            }
            self.add_pairs(idx, &out, count);
            self.words[idx] = (out, count);
        }
    }
}

/// Joins subwords back into tokens by stripping continuation suffixes.
pub fn decode<S: AsRef<str>>(subwords: &[S]) -> Result<Vec<String>, BpeError> {
    let (tokens, fragment) = decode_partial(subwords);
    match fragment {
        Some(fragment) => Err(BpeError::DanglingContinuation { fragment }),
        None => Ok(tokens),
    }
}

/// Decodes and returns any trailing unfinished fragment separately.
pub fn decode_partial<S: AsRef<str>>(subwords: &[S]) -> (Vec<String>, Option<String>) {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut open = false;
    for sw in subwords {
        let sw = sw.as_ref();
        match sw.strip_suffix(CONTINUATION) {
            Some(stem) if !META_TOKENS.contains(&sw) => {
                current.push_str(stem);
                open = true;
            }
            _ => {
                current.push_str(sw);
                tokens.push(std::mem::take(&mut current));
                open = false;
            }
        }
    }
    (tokens, open.then_some(current))
}

/// Decodes, dropping a trailing unfinished fragment with a warning.
pub fn decode_lossy<S: AsRef<str>>(subwords: &[S]) -> Vec<String> {
    let (tokens, fragment) = decode_partial(subwords);
    if let Some(f) = fragment {
        log::warn!("dropping truncated subword fragment {f:?}");
    }
    tokens
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(l: &str, r: &str) -> (String, String) {
        (l.to_string(), r.to_string())
    }

    #[test]
    fn learns_most_frequent_pair() {
        let table = learn_merges(&["ab", "ab", "ac"], 1).unwrap();
        assert_eq!(table.merges(), &[pair("a@@", "b")]);
    }

    #[test]
    fn reserved_only_corpus_is_empty() {
        assert!(matches!(learn_merges(&["<soc>", "<soc>"], 5), Err(BpeError::EmptyCorpus)));
        let none: [&str; 0] = [];
        assert!(matches!(learn_merges(&none, 5), Err(BpeError::EmptyCorpus)));
    }

    #[test]
    fn ties_break_lexicographically() {
        let table = learn_merges(&["xy", "xy", "ab", "ab"], 1).unwrap();
        assert_eq!(table.merges(), &[pair("a@@", "b")]);
    }

    #[test]
    fn stops_when_no_pair_repeats() {
        let table = learn_merges(&["abc", "abc"], 100).unwrap();
        assert_eq!(table.merges(), &[pair("a@@", "b@@"), pair("ab@@", "c")]);
        let table = learn_merges(&["ab", "cd"], 100).unwrap();
        assert!(table.is_empty());
    }

    #[test]
    fn encode_examples() {
        let table = MergeTable::new(vec![pair("a@@", "b")]).unwrap();
        assert_eq!(table.encode(&["ab"]), ["ab"]);
        assert_eq!(table.encode(&["<num_val>"]), ["<num_val>"]);
        assert_eq!(MergeTable::default().encode(&["xy"]), ["x@@", "y"]);
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode(&["a@@", "b"]).unwrap(), ["ab"]);
        assert_eq!(decode(&["<soc>", "a@@", "c"]).unwrap(), ["<soc>", "ac"]);
        assert!(matches!(decode(&["a@@"]), Err(BpeError::DanglingContinuation { .. })));
        assert_eq!(decode_lossy(&["x", "a@@"]), ["x"]);
    }

    #[test]
    fn at_sign_tokens_round_trip() {
        let table = learn_merges(&["@", "@", "x@", "@x"], 10).unwrap();
        let toks = ["@", "x@", "@x", "@@"];
        assert_eq!(decode(&table.encode(&toks)).unwrap(), toks);
    }

    #[test]
    fn text_format_round_trip() {
        let table = learn_merges(&["foo", "foo", "bar", "bar", "fob"], 10).unwrap();
        let text = table.to_text();
        assert!(text.starts_with("#version 1\n"));
        assert_eq!(MergeTable::from_text(&text).unwrap(), table);
        assert!(MergeTable::from_text("a b\n").is_err());
        assert!(MergeTable::from_text("#version 1\na b\na b\n").is_err());
        assert!(MergeTable::from_text("#version 1\n<soc> b\n").is_err());
    }
}

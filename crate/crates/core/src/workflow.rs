//! File-level pipeline stages shared by the command-line tool and tests.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::bpe::{self, BpeError, MergeTable, CONTINUATION};
use crate::corpus::{self, CorpusError, SplitName};
use crate::eval::EvalError;
use crate::model::LmError;
use crate::par;
use crate::vocab::Vocabulary;

pub const MERGES_FILE: &str = "merges.txt";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Bpe(#[from] BpeError),
    #[error(transparent)]
    Model(#[from] LmError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codec {
    pub table: MergeTable,
    pub vocab: Vocabulary,
}

impl Codec {
    pub fn encode_ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        self.vocab.ids(&self.table.encode(tokens))
    }

    pub fn load(dir: &Path) -> Result<Self, BpeError> {
        Ok(Codec { table: MergeTable::load(&dir.join(MERGES_FILE))?, vocab: Vocabulary::load(&dir.join(VOCAB_FILE))? })
    }
}

/// Vocabulary over the encoded training split plus every subword a merge
/// can produce and both forms of every training character, so encoding
/// any split with `table` yields known ids for all characters seen in
/// training.
pub fn build_vocabulary(table: &MergeTable, encoded_train: &[Vec<String>]) -> Vocabulary {
    let mut counts: HashMap<String, u64> = HashMap::new();
    for sw in encoded_train.iter().flatten() {
        *counts.entry(sw.clone()).or_insert(0) += 1;
    }
    let chars: std::collections::BTreeSet<char> = counts
        .keys()
        .filter(|s| !table.is_reserved(s))
        .flat_map(|s| s.strip_suffix(CONTINUATION).unwrap_or(s).chars().collect::<Vec<_>>())
        .collect();
    for c in chars {
        counts.entry(c.to_string()).or_insert(0);
        counts.entry(format!("{c}{CONTINUATION}")).or_insert(0);
    }
    for (left, right) in table.merges() {
        let merged = format!("{}{}", left.strip_suffix(CONTINUATION).unwrap_or(left), right);
        for sw in [left.clone(), right.clone(), merged] {
            counts.entry(sw).or_insert(0);
        }
    }
    Vocabulary::from_counts(counts)
}

/// Learns merges from training documents only and builds the vocabulary.
pub fn learn_codec(train: &[Vec<String>], num_merges: usize) -> Result<Codec, BpeError> {
    let flat: Vec<&str> = train.iter().flatten().map(String::as_str).collect();
    let table = bpe::learn_merges(&flat, num_merges)?;
    let encoded = par::map(train, |d| table.encode(d));
    let vocab = build_vocabulary(&table, &encoded);
    Ok(Codec { table, vocab })
}

pub fn bpe_file_name(split: SplitName) -> String {
    split.file_name().replace(".txt", ".bpe")
}

/// Learns a codec from `corpus_dir/train.txt`, writes the merges and
/// vocabulary files to `out_dir`, and encodes every split present in
/// `corpus_dir` to a `.bpe` sibling in `out_dir`.
pub fn encode_splits(corpus_dir: &Path, out_dir: &Path, num_merges: usize) -> Result<Codec, PipelineError> {
    let train = corpus::read_corpus(&corpus_dir.join(SplitName::Training.file_name()))?;
    let codec = learn_codec(&train, num_merges)?;
    fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    codec.table.save(&out_dir.join(MERGES_FILE))?;
    codec.vocab.save(&out_dir.join(VOCAB_FILE))?;
    for split in [SplitName::Training, SplitName::Validation, SplitName::Testing] {
        let src = corpus_dir.join(split.file_name());
        if !src.exists() {
            continue;
        }
        let docs = corpus::read_corpus(&src)?;
        let lines = par::map(&docs, |d| codec.table.encode(d).join(" ") + "\n");
        let dst = out_dir.join(bpe_file_name(split));
        fs::write(&dst, lines.concat()).map_err(|e| PipelineError::io(&dst, e))?;
    }
    Ok(codec)
}

/// Reads a `.bpe` file as id documents; empty lines are skipped.
pub fn load_ids(path: &Path, vocab: &Vocabulary) -> Result<Vec<Vec<u32>>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| vocab.ids(&l.split_whitespace().collect::<Vec<_>>()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_covers_merge_products() {
        let train = vec![vec!["ab".to_string(), "ab".into(), "abc".into()]];
        let codec = learn_codec(&train, 10).unwrap();
        for (l, r) in codec.table.merges() {
            assert!(codec.vocab.id(l).is_some() && codec.vocab.id(r).is_some());
        }
        let ids = codec.encode_ids(&["ab", "abc", "a"]);
        assert!(ids.iter().all(|&i| i != codec.vocab.unk_id()));
        assert_eq!(codec.encode_ids(&["q"]), [0]);
    }
}

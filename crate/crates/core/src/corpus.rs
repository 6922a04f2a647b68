//! Corpus preparation: filtering, stratified distribution, clone marking,
//! normalization, literal replacement and merging into split files.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lexer::{self, LexError, Token, TokenStream, EOC, SOC};
use crate::par;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("row {row}: {message}")]
    Format { row: usize, message: String },
    #[error("{path}: {source}")]
    Lex {
        path: String,
        #[source]
        source: LexError,
    },
    #[error("clone reference {start_line}-{end_line} covers no tokens")]
    Range { start_line: u32, end_line: u32 },
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CloneReference {
    pub file_path: String,
    pub start_line: u32,
    pub end_line: u32,
    pub functionality_id: u32,
    pub true_positive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClonePair {
    pub ref_a: CloneReference,
    pub ref_b: CloneReference,
    pub functionality_id: u32,
    pub syntactic_similarity: f64,
}

/// Contents of a references TSV: single-method rows and pair rows may be mixed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct References {
    pub refs: Vec<CloneReference>,
    pub pairs: Vec<ClonePair>,
}

fn normalize_path(p: &str) -> String {
    let p = p.replace('\\', "/");
    p.strip_prefix("./").map(str::to_string).unwrap_or(p)
}

fn field<T: std::str::FromStr>(cols: &[&str], idx: usize, row: usize, name: &str) -> Result<T, CorpusError> {
    cols[idx]
        .trim()
        .parse()
        .map_err(|_| CorpusError::Format { row, message: format!("cannot parse {name} from {:?}", cols[idx]) })
}

fn positive_line(cols: &[&str], idx: usize, row: usize, name: &str) -> Result<u32, CorpusError> {
    let v: u32 = field(cols, idx, row, name)?;
    if v == 0 {
        return Err(CorpusError::Format { row, message: format!("{name} must be positive") });
    }
    Ok(v)
}

fn span(cols: &[&str], row: usize) -> Result<(String, u32, u32), CorpusError> {
    let start = positive_line(cols, 1, row, "start_line")?;
    let end = positive_line(cols, 2, row, "end_line")?;
    if start > end {
        return Err(CorpusError::Format { row, message: format!("start line {start} after end line {end}") });
    }
    Ok((normalize_path(cols[0]), start, end))
}

/// Parses the references TSV format. Five-column rows are clone references
/// (`path start end functionality true_positive`); eight-column rows are
/// clone pairs (`path_a start_a end_a path_b start_b end_b functionality similarity`).
/// Blank lines are skipped; row numbers are 1-based line numbers.
pub fn parse_references(text: &str) -> Result<References, CorpusError> {
    let mut out = References::default();
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        match cols.len() {
            5 => {
                let (file_path, start_line, end_line) = span(&cols, row)?;
                let functionality_id = field(&cols, 3, row, "functionality_id")?;
                let true_positive = match cols[4].trim() {
                    "1" => true,
                    "0" => false,
                    other => {
                        return Err(CorpusError::Format {
                            row,
                            message: format!("true_positive must be 0 or 1, got {other:?}"),
                        })
                    }
                };
                out.refs.push(CloneReference { file_path, start_line, end_line, functionality_id, true_positive });
            }
            8 => {
                let functionality_id = field(&cols, 6, row, "functionality_id")?;
                let similarity: f64 = field(&cols, 7, row, "similarity")?;
                if !(0.0..=1.0).contains(&similarity) {
                    return Err(CorpusError::Format { row, message: format!("similarity {similarity} outside [0,1]") });
                }
                let (pa, sa, ea) = span(&cols[0..3], row)?;
                let (pb, sb, eb) = span(&cols[3..6], row)?;
                let mk = |file_path, start_line, end_line| CloneReference {
                    file_path,
                    start_line,
                    end_line,
                    functionality_id,
                    true_positive: true,
                };
                let pair = ClonePair {
                    ref_a: mk(pa, sa, ea),
                    ref_b: mk(pb, sb, eb),
                    functionality_id,
                    syntactic_similarity: similarity,
                };
                if pair.ref_a == pair.ref_b {
                    return Err(CorpusError::Format { row, message: "pair references the same method twice".into() });
                }
                out.pairs.push(pair);
            }
            n => return Err(CorpusError::Format { row, message: format!("expected 5 or 8 columns, found {n}") }),
        }
    }
    Ok(out)
}

pub fn load_references(path: &Path) -> Result<References, CorpusError> {
    let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    parse_references(&text)
}

pub fn format_reference(r: &CloneReference) -> String {
    format!("{}\t{}\t{}\t{}\t{}", r.file_path, r.start_line, r.end_line, r.functionality_id, u8::from(r.true_positive))
}

pub fn format_pair(p: &ClonePair) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        p.ref_a.file_path,
        p.ref_a.start_line,
        p.ref_a.end_line,
        p.ref_b.file_path,
        p.ref_b.start_line,
        p.ref_b.end_line,
        p.functionality_id,
        p.syntactic_similarity
    )
}

/// Keeps true-positive references whose file is present, in input order.
pub fn filter_true_positives(refs: &[CloneReference], files: &HashSet<String>) -> Vec<CloneReference> {
    refs.iter().filter(|r| r.true_positive && files.contains(&r.file_path)).cloned().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Training,
    Validation,
    Testing,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Training, SplitName::Validation, SplitName::Testing];

    pub fn file_name(self) -> &'static str {
        match self {
            SplitName::Training => "train.txt",
            SplitName::Validation => "valid.txt",
            SplitName::Testing => "test.txt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Path relative to the corpus root, `/`-separated.
    pub path: String,
    /// Hex SHA-256 of the raw file bytes.
    pub content_hash: String,
    pub functionality_id: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub training: Vec<FileRecord>,
    pub validation: Vec<FileRecord>,
    pub testing: Vec<FileRecord>,
    /// Files dropped because their content already appeared earlier.
    pub duplicates: Vec<FileRecord>,
}

impl CorpusSplit {
    pub fn get(&self, split: SplitName) -> &[FileRecord] {
        match split {
            SplitName::Training => &self.training,
            SplitName::Validation => &self.validation,
            SplitName::Testing => &self.testing,
        }
    }

    fn get_mut(&mut self, split: SplitName) -> &mut Vec<FileRecord> {
        match split {
            SplitName::Training => &mut self.training,
            SplitName::Validation => &mut self.validation,
            SplitName::Testing => &mut self.testing,
        }
    }
}

/// Largest-remainder allocation of `n` items over 80/10/10 quotas. Ties on
/// the remainder go to training, then validation, then testing.
pub fn allocate_counts(n: usize) -> [usize; 3] {
    const TENTHS: [usize; 3] = [8, 1, 1];
    let mut counts = TENTHS.map(|t| n * t / 10);
    let remainders = TENTHS.map(|t| n * t % 10);
    let mut left = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    // Stable sort keeps the tie order.
    order.sort_by_key(|&i| std::cmp::Reverse(remainders[i]));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

pub fn content_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Groups `.java` files under `root` by their top-level functionality
/// folder (a directory named by a positive integer). Other files are
/// ignored. Paths are relative to `root` and sorted.
pub fn discover_files(root: &Path) -> Result<BTreeMap<u32, Vec<String>>, CorpusError> {
    let mut out: BTreeMap<u32, Vec<String>> = BTreeMap::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            CorpusError::Io { path, source: e.into() }
        })?;
        if !entry.file_type().is_file() || entry.path().extension().is_none_or(|x| x != "java") {
            continue;
        }
        let rel = entry.path().strip_prefix(root).expect("walkdir stays under root");
        let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        let Some(folder) = rel.split('/').next().filter(|_| rel.contains('/')) else {
            log::warn!("{rel}: not inside a functionality folder, ignored");
            continue;
        };
        match folder.parse::<u32>() {
            Ok(id) if id > 0 => out.entry(id).or_default().push(rel),
            _ => log::warn!("{rel}: folder {folder:?} is not a functionality id, ignored"),
        }
    }
    Ok(out)
}

fn folder_rng(seed: u64, functionality_id: u32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ u64::from(functionality_id).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Stratified 80/10/10 split. Each functionality folder is shuffled with a
/// seeded RNG and allocated by [`allocate_counts`]; folders are processed in
/// ascending id order and, within a folder, training before validation
/// before testing. A file whose content hash was already seen is moved to
/// `duplicates`.
pub fn stratified_split(
    root: &Path,
    files_by_functionality: &BTreeMap<u32, Vec<String>>,
    seed: u64,
) -> Result<CorpusSplit, CorpusError> {
    let mut split = CorpusSplit::default();
    let mut seen = HashSet::new();
    for (&fid, files) in files_by_functionality {
        let mut files = files.clone();
        files.sort();
        files.dedup();
        files.shuffle(&mut folder_rng(seed, fid));
        let hashes = par::try_map(&files, |rel| {
            let path = root.join(rel);
            fs::read(&path).map(|b| content_hash(&b)).map_err(|e| CorpusError::io(&path, e))
        })?;
        let counts = allocate_counts(files.len());
        let mut records = files.into_iter().zip(hashes);
        for (name, count) in SplitName::ALL.into_iter().zip(counts) {
            for (path, content_hash) in records.by_ref().take(count) {
                let record = FileRecord { path, content_hash, functionality_id: fid };
                if seen.insert(record.content_hash.clone()) {
                    split.get_mut(name).push(record);
                } else {
                    split.duplicates.push(record);
                }
            }
        }
    }
    Ok(split)
}

/// Resolves overlapping references within one file: sorted by start line
/// (longest first on equal starts), a reference is kept only if it starts
/// after the previously kept one ends. Returns `(kept, dropped)`.
pub fn resolve_overlaps(refs: &[CloneReference]) -> (Vec<CloneReference>, Vec<CloneReference>) {
    let mut sorted = refs.to_vec();
    sorted.sort_by(|a, b| a.start_line.cmp(&b.start_line).then(b.end_line.cmp(&a.end_line)));
    let mut kept: Vec<CloneReference> = Vec::new();
    let mut dropped = Vec::new();
    for r in sorted {
        match kept.last() {
            Some(prev) if r.start_line <= prev.end_line => dropped.push(r),
            _ => kept.push(r),
        }
    }
    (kept, dropped)
}

/// Inserts `<soc>` before the first token at or after each reference's start
/// line and `<eoc>` after the last token at or before its end line.
pub fn mark_clones(stream: TokenStream, refs: &[CloneReference]) -> Result<TokenStream, CorpusError> {
    let (kept, dropped) = resolve_overlaps(refs);
    for r in &dropped {
        log::warn!("{}: overlapping clone reference {}-{} dropped", r.file_path, r.start_line, r.end_line);
    }
    let tokens = &stream.tokens;
    // (insert position, marker) pairs; positions index the original stream.
    let mut inserts = Vec::with_capacity(kept.len() * 2);
    for r in &kept {
        let first = tokens.partition_point(|t| t.line < r.start_line);
        let after_last = tokens.partition_point(|t| t.line <= r.end_line);
        if first >= after_last {
            return Err(CorpusError::Range { start_line: r.start_line, end_line: r.end_line });
        }
        inserts.push((first, Token::meta(SOC, tokens[first].line)));
        inserts.push((after_last, Token::meta(EOC, tokens[after_last - 1].line)));
    }
    let mut out = Vec::with_capacity(tokens.len() + inserts.len());
    let mut pending = inserts.into_iter().peekable();
    for (i, tok) in stream.tokens.into_iter().enumerate() {
        while let Some((_, marker)) = pending.next_if(|(pos, _)| *pos == i) {
            out.push(marker);
        }
        out.push(tok);
    }
    out.extend(pending.map(|(_, m)| m));
    Ok(TokenStream { tokens: out, source_path: stream.source_path })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub functionality_id: u32,
    pub content_hash: String,
    pub tokens: usize,
    pub clone_methods: usize,
    /// Functionality id of each marked clone, in marker order.
    pub clone_functionalities: Vec<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub file: String,
    pub files: usize,
    pub clone_methods: usize,
    pub tokens: usize,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileFailure {
    pub path: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub training: SplitManifest,
    pub validation: SplitManifest,
    pub testing: SplitManifest,
    pub duplicates: Vec<String>,
    pub failures: Vec<FileFailure>,
}

impl Manifest {
    pub fn split(&self, name: SplitName) -> &SplitManifest {
        match name {
            SplitName::Training => &self.training,
            SplitName::Validation => &self.validation,
            SplitName::Testing => &self.testing,
        }
    }

    fn split_mut(&mut self, name: SplitName) -> &mut SplitManifest {
        match name {
            SplitName::Training => &mut self.training,
            SplitName::Validation => &mut self.validation,
            SplitName::Testing => &mut self.testing,
        }
    }

    pub fn total_clone_methods(&self) -> usize {
        SplitName::ALL.iter().map(|&s| self.split(s).clone_methods).sum()
    }

    pub fn load(path: &Path) -> Result<Manifest, CorpusError> {
        let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CorpusError::Format { row: e.line(), message: e.to_string() })
    }
}

/// Tokenizes, marks and literal-replaces one file. Returns the stream and the
/// functionality id of each marked clone in marker order.
pub fn process_file(source: &str, refs: &[CloneReference]) -> Result<(TokenStream, Vec<u32>), CorpusError> {
    let stream = lexer::tokenize(source).map_err(|source| CorpusError::Lex { path: String::new(), source })?;
    let (kept, _) = resolve_overlaps(refs);
    let marked = mark_clones(stream, refs)?;
    Ok((lexer::replace_literals(marked), kept.iter().map(|r| r.functionality_id).collect()))
}

fn process_record(
    root: &Path,
    record: &FileRecord,
    refs: &[CloneReference],
) -> Result<(TokenStream, Vec<u32>), CorpusError> {
    let path = root.join(&record.path);
    let source = fs::read_to_string(&path).map_err(|e| CorpusError::io(&path, e))?;
    let (stream, fids) = process_file(&source, refs).map_err(|e| match e {
        CorpusError::Lex { source, .. } => CorpusError::Lex { path: record.path.clone(), source },
        other => other,
    })?;
    Ok((stream.with_source(record.path.clone()), fids))
}

/// Writes `train.txt`, `valid.txt`, `test.txt` and `manifest.json` under
/// `output_dir`. Each retained source file becomes one line of
/// space-separated tokens. Files that fail to lex or mark are listed in the
/// manifest's `failures` and skipped.
pub fn build_corpus(
    root: &Path,
    split: &CorpusSplit,
    refs: &[CloneReference],
    output_dir: &Path,
) -> Result<Manifest, CorpusError> {
    fs::create_dir_all(output_dir).map_err(|e| CorpusError::io(output_dir, e))?;
    let mut by_file: HashMap<&str, Vec<CloneReference>> = HashMap::new();
    for r in refs.iter().filter(|r| r.true_positive) {
        by_file.entry(r.file_path.as_str()).or_default().push(r.clone());
    }
    let mut manifest =
        Manifest { duplicates: split.duplicates.iter().map(|r| r.path.clone()).collect(), ..Manifest::default() };
    for name in SplitName::ALL {
        let records = split.get(name);
        let processed = par::map(records, |rec| {
            let file_refs = by_file.get(rec.path.as_str()).map_or(&[][..], Vec::as_slice);
            process_record(root, rec, file_refs)
        });
        let mut text = String::new();
        let sm = manifest.split_mut(name);
        sm.file = name.file_name().to_string();
        let mut failures = Vec::new();
        for (rec, result) in records.iter().zip(processed) {
            match result {
                Ok((stream, clone_functionalities)) => {
                    text.push_str(&stream.to_corpus_line());
                    text.push('\n');
                    sm.files += 1;
                    sm.tokens += stream.len();
                    sm.clone_methods += clone_functionalities.len();
                    sm.entries.push(ManifestEntry {
                        path: rec.path.clone(),
                        functionality_id: rec.functionality_id,
                        content_hash: rec.content_hash.clone(),
                        tokens: stream.len(),
                        clone_methods: clone_functionalities.len(),
                        clone_functionalities,
                    });
                }
                Err(e) => {
                    log::error!("{}: skipped: {e}", rec.path);
                    failures.push(FileFailure { path: rec.path.clone(), error: e.to_string() });
                }
            }
        }
        manifest.failures.extend(failures);
        let out = output_dir.join(name.file_name());
        fs::write(&out, text).map_err(|e| CorpusError::io(&out, e))?;
    }
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let out = output_dir.join("manifest.json");
    fs::write(&out, json + "\n").map_err(|e| CorpusError::io(&out, e))?;
    Ok(manifest)
}

/// The full preparation pipeline: discover, filter, split, then build.
/// Files without any true-positive reference are not part of the corpus,
/// unless no reference matches at all, in which case every file is kept.
pub fn prepare(root: &Path, references: &References, output_dir: &Path, seed: u64) -> Result<Manifest, CorpusError> {
    let discovered = discover_files(root)?;
    let present: HashSet<String> = discovered.values().flatten().cloned().collect();
    let refs = filter_true_positives(&references.refs, &present);
    let retained: BTreeMap<u32, Vec<String>> = if refs.is_empty() {
        log::warn!("no true-positive clone references match the corpus; keeping every file, output will contain no clone markers");
        discovered
    } else {
        let referenced: HashSet<&str> = refs.iter().map(|r| r.file_path.as_str()).collect();
        discovered
            .into_iter()
            .map(|(fid, files)| {
                (fid, files.into_iter().filter(|f| referenced.contains(f.as_str())).collect::<Vec<_>>())
            })
            .filter(|(_, files)| !files.is_empty())
            .collect()
    };
    let split = stratified_split(root, &retained, seed)?;
    build_corpus(root, &split, &refs, output_dir)
}

/// Reads a corpus split file: one document per line, whitespace-separated tokens.
pub fn read_corpus(path: &Path) -> Result<Vec<Vec<String>>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    Ok(text.lines().map(|l| l.split_whitespace().map(str::to_string).collect()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexer::TokenKind;

    fn r(path: &str, start: u32, end: u32, tp: bool) -> CloneReference {
        CloneReference {
            file_path: path.into(),
            start_line: start,
            end_line: end,
            functionality_id: 7,
            true_positive: tp,
        }
    }

    #[test]
    fn parses_reference_row() {
        let refs = parse_references("a/B.java\t5\t9\t7\t1\n").unwrap();
        assert_eq!(refs.refs, vec![r("a/B.java", 5, 9, true)]);
        assert!(refs.pairs.is_empty());
    }

    #[test]
    fn empty_file_has_no_rows() {
        assert_eq!(parse_references("").unwrap(), References::default());
    }

    #[test]
    fn pair_row_round_trips() {
        let row = "a/B.java\t5\t9\ta/C.java\t2\t6\t7\t0.903";
        let parsed = parse_references(row).unwrap();
        assert_eq!(parsed.pairs[0].syntactic_similarity, 0.903);
        assert_eq!(format_pair(&parsed.pairs[0]), row);
        let ref_row = "x/Y.java\t1\t2\t3\t0";
        assert_eq!(format_reference(&parse_references(ref_row).unwrap().refs[0]), ref_row);
    }

    #[test]
    fn malformed_rows_report_row_number() {
        let err = parse_references("a\t1\t2\t3\t1\n\nb\t1\t2\n").unwrap_err();
        assert!(matches!(err, CorpusError::Format { row: 3, .. }));
        let err = parse_references("a\tx\t2\t3\t1").unwrap_err();
        assert!(matches!(err, CorpusError::Format { row: 1, .. }));
        let err = parse_references("a\t1\t2\t3\t2").unwrap_err();
        assert!(matches!(err, CorpusError::Format { row: 1, .. }));
        let err = parse_references("a\t9\t2\t3\t1").unwrap_err();
        assert!(matches!(err, CorpusError::Format { row: 1, .. }));
    }

    #[test]
    fn filter_keeps_true_positives_in_present_files() {
        let refs = [r("A", 1, 2, true), r("A", 3, 4, false), r("B", 1, 2, true)];
        let files: HashSet<String> = ["A".to_string()].into();
        assert_eq!(filter_true_positives(&refs, &files), vec![r("A", 1, 2, true)]);
        let fps = [r("A", 1, 2, false)];
        assert!(filter_true_positives(&fps, &files).is_empty());
    }

    #[test]
    fn largest_remainder_allocation() {
        assert_eq!(allocate_counts(10), [8, 1, 1]);
        assert_eq!(allocate_counts(1), [1, 0, 0]);
        assert_eq!(allocate_counts(5), [4, 1, 0]);
        assert_eq!(allocate_counts(0), [0, 0, 0]);
        assert_eq!(allocate_counts(2), [2, 0, 0]);
        assert_eq!(allocate_counts(15), [12, 2, 1]);
        for n in 0..200 {
            let c = allocate_counts(n);
            assert_eq!(c.iter().sum::<usize>(), n);
            if n >= 10 {
                assert!(c.iter().all(|&x| x > 0));
            }
        }
    }

    fn numbered_stream(lines: &[u32]) -> TokenStream {
        TokenStream::new(
            lines.iter().enumerate().map(|(i, &l)| Token::new(TokenKind::Identifier, format!("t{i}"), l)).collect(),
        )
    }

    #[test]
    fn marks_clone_span() {
        let s = numbered_stream(&[3, 5, 5, 7, 9, 9, 11]);
        let out = mark_clones(s, &[r("f", 5, 9, true)]).unwrap();
        assert_eq!(out.texts(), ["t0", "<soc>", "t1", "t2", "t3", "t4", "t5", "<eoc>", "t6"]);
        let lines: Vec<u32> = out.tokens.iter().map(|t| t.line).collect();
        assert!(lines.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn no_refs_leaves_stream_unchanged() {
        let s = numbered_stream(&[1, 2, 3]);
        assert_eq!(mark_clones(s.clone(), &[]).unwrap(), s);
    }

    #[test]
    fn overlapping_refs_keep_earliest() {
        let s = numbered_stream(&[5, 6, 7, 8, 9, 10, 11, 12]);
        let refs = [r("f", 7, 12, true), r("f", 5, 9, true)];
        let out = mark_clones(s, &refs).unwrap();
        assert_eq!(out.texts().iter().filter(|t| **t == SOC).count(), 1);
        assert_eq!(out.texts()[0], SOC);
        assert_eq!(out.texts()[6], EOC);
        // Same start: the longer one wins.
        let (kept, dropped) = resolve_overlaps(&[r("f", 5, 6, true), r("f", 5, 9, true)]);
        assert_eq!(kept, vec![r("f", 5, 9, true)]);
        assert_eq!(dropped.len(), 1);
    }

    #[test]
    fn adjacent_refs_both_marked() {
        let s = numbered_stream(&[1, 2, 3, 4]);
        let out = mark_clones(s, &[r("f", 1, 2, true), r("f", 3, 4, true)]).unwrap();
        assert_eq!(out.texts(), ["<soc>", "t0", "t1", "<eoc>", "<soc>", "t2", "t3", "<eoc>"]);
    }

    #[test]
    fn empty_span_is_range_error() {
        let s = numbered_stream(&[1, 2, 10]);
        assert!(matches!(mark_clones(s, &[r("f", 4, 8, true)]), Err(CorpusError::Range { .. })));
    }

    #[test]
    fn one_file_one_clone_adds_two_markers() {
        let src = "class A {\n int f() {\n return 1;\n }\n int g;\n}\n";
        let (out, fids) = process_file(src, &[r("f", 2, 4, true)]).unwrap();
        let plain = lexer::tokenize(src).unwrap();
        assert_eq!(out.len(), plain.len() + 2);
        assert_eq!(fids, vec![7]);
        assert!(out.texts().contains(&"<num_val>"));
    }
}

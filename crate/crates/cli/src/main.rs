mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use clonelm::corpus::{self, ClonePair, Manifest, SplitName};
use clonelm::eval::{self, EvalInputs};
use clonelm::lexer::{self, SOC};
use clonelm::model::{load_checkpoint, save_checkpoint, train};
use clonelm::workflow::{self, bpe_file_name, Codec, PipelineError};
use clonelm::{bpe, decoder, par, EvalError, LmError, Strategy, Termination};

use config::RunConfig;

const MANIFEST_FILE: &str = "manifest.json";
const CHECKPOINT_FILE: &str = "best.clmc";
const LOG_CSV_FILE: &str = "train_log.csv";
const REPORT_FILE: &str = "eval_report.json";

#[derive(Parser)]
#[command(name = "clonelm", version, about = "Clone-aware language modeling for Java source code")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run every stage on one thread.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Directory receiving all outputs.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Split a functionality-foldered Java corpus and write marked token files.
    Prepare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source_dir: Option<PathBuf>,
        #[arg(long)]
        refs: Option<PathBuf>,
    },
    /// Learn merges from the training split and encode all splits.
    Bpe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        num_merges: Option<usize>,
    },
    /// Train a language model on the encoded corpus.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// References file holding clone pairs.
        #[arg(long)]
        refs: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Complete a clone method from a context.
    Complete {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Java source to continue; may contain `<soc>`.
        #[arg(long, conflicts_with = "context_file")]
        context: Option<String>,
        #[arg(long)]
        context_file: Option<PathBuf>,
        /// Reference method; prints ROUGE-1/2/L of the completed clone against it.
        #[arg(long)]
        ground_truth: Option<String>,
        #[arg(long)]
        max_new_tokens: Option<usize>,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long)]
        top_p: Option<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Greedy,
    Nucleus,
}

/// Bad invocation or configuration.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn numerical(e: &LmError) -> bool {
    matches!(e, LmError::Numerical { .. })
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        let is_numerical = match (
            cause.downcast_ref::<LmError>(),
            cause.downcast_ref::<EvalError>(),
            cause.downcast_ref::<PipelineError>(),
        ) {
            (Some(e), _, _) | (_, Some(EvalError::Model(e)), _) | (_, _, Some(PipelineError::Model(e))) => {
                if matches!(e, LmError::Config(_)) {
                    return 1;
                }
                numerical(e)
            }
            (_, _, Some(PipelineError::Eval(EvalError::Model(e)))) => numerical(e),
            _ => false,
        };
        if is_numerical {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn setup(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.propagate_seed();
    if let Some(dir) = &common.output_dir {
        cfg.paths.output_dir = Some(dir.clone());
    }
    if common.deterministic {
        par::set_mode(par::Mode::Sequential);
    }
    let out =
        cfg.paths.output_dir.clone().ok_or_else(|| usage("no output directory (--output-dir or paths.output_dir)"))?;
    Ok((cfg, out))
}

fn require(path: &Path) -> Result<()> {
    anyhow::ensure!(path.exists(), "{}: not found", path.display());
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Prepare { common, source_dir, refs } => {
            let (mut cfg, out) = setup(&common)?;
            cfg.paths.source_dir = source_dir.or(cfg.paths.source_dir);
            cfg.paths.refs = refs.or(cfg.paths.refs);
            let src =
                cfg.paths.source_dir.ok_or_else(|| usage("no source directory (--source-dir or paths.source_dir)"))?;
            let refs = cfg.paths.refs.ok_or_else(|| usage("no references file (--refs or paths.refs)"))?;
            cmd_prepare(&src, &refs, &out, cfg.seed)
        }
        Command::Bpe { common, num_merges } => {
            let (cfg, out) = setup(&common)?;
            cmd_bpe(&out, num_merges.unwrap_or(cfg.bpe.num_merges))
        }
        Command::Train { common, epochs } => {
            let (mut cfg, out) = setup(&common)?;
            if let Some(e) = epochs {
                cfg.training.epochs = e;
            }
            cmd_train(&cfg, &out)
        }
        Command::Eval { common, checkpoint, refs, pairs } => {
            let (mut cfg, out) = setup(&common)?;
            cfg.paths.refs = refs.or(cfg.paths.refs);
            cfg.paths.pairs = pairs.or(cfg.paths.pairs);
            let checkpoint = checkpoint.unwrap_or_else(|| out.join(CHECKPOINT_FILE));
            cmd_eval(&cfg, &out, &checkpoint)
        }
        Command::Complete {
            common,
            checkpoint,
            context,
            context_file,
            ground_truth,
            max_new_tokens,
            strategy,
            top_p,
        } => {
            let (mut cfg, out) = setup(&common)?;
            if let Some(n) = max_new_tokens {
                cfg.generation.max_new_tokens = n;
            }
            if let Some(s) = strategy {
                cfg.generation.strategy = match s {
                    StrategyArg::Greedy => Strategy::Greedy,
                    StrategyArg::Nucleus => Strategy::Nucleus,
                };
            }
            if let Some(p) = top_p {
                if !(p > 0.0 && p <= 1.0) {
                    return Err(usage("--top-p must be in (0, 1]"));
                }
                cfg.generation.nucleus_p = p;
            }
            let context = match (context, context_file) {
                (Some(c), _) => c,
                (None, Some(path)) => fs::read_to_string(&path).with_context(|| path.display().to_string())?,
                (None, None) => return Err(usage("no context (--context or --context-file)")),
            };
            let checkpoint = checkpoint.unwrap_or_else(|| out.join(CHECKPOINT_FILE));
            cmd_complete(&cfg, &out, &checkpoint, &context, ground_truth.as_deref())
        }
    }
}

fn cmd_prepare(src: &Path, refs: &Path, out: &Path, seed: u64) -> Result<()> {
    require(src)?;
    require(refs)?;
    let references = corpus::load_references(refs)?;
    let manifest = corpus::prepare(src, &references, out, seed)?;
    for name in SplitName::ALL {
        let s = manifest.split(name);
        println!("{}: {} files, {} clone methods, {} tokens", s.file, s.files, s.clone_methods, s.tokens);
    }
    if !manifest.duplicates.is_empty() {
        println!("dropped {} duplicate files", manifest.duplicates.len());
    }
    if !manifest.failures.is_empty() {
        for f in &manifest.failures {
            eprintln!("{}: {}", f.path, f.error);
        }
        anyhow::bail!("{} files could not be processed", manifest.failures.len());
    }
    Ok(())
}

fn cmd_bpe(out: &Path, num_merges: usize) -> Result<()> {
    require(&out.join(SplitName::Training.file_name()))?;
    let codec = workflow::encode_splits(out, out, num_merges)?;
    println!("{} merges, {} vocabulary entries", codec.table.len(), codec.vocab.len());
    Ok(())
}

fn load_codec(out: &Path) -> Result<Codec> {
    require(&out.join(workflow::MERGES_FILE))?;
    require(&out.join(workflow::VOCAB_FILE))?;
    Ok(Codec::load(out)?)
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let codec = load_codec(out)?;
    let train_path = out.join(bpe_file_name(SplitName::Training));
    require(&train_path)?;
    let train_ids = workflow::load_ids(&train_path, &codec.vocab)?;
    let valid_path = out.join(bpe_file_name(SplitName::Validation));
    let valid_ids = if valid_path.exists() { workflow::load_ids(&valid_path, &codec.vocab)? } else { Vec::new() };
    let model_config = cfg.model.resolve(codec.vocab.len());
    model_config.validate()?;
    let (params, log) = train(&train_ids, &valid_ids, &model_config, &cfg.training, Some(out))?;
    save_checkpoint(&params, &out.join(CHECKPOINT_FILE))?;
    let csv = out.join(LOG_CSV_FILE);
    fs::write(&csv, log.to_csv()).with_context(|| csv.display().to_string())?;
    println!("{} parameters, {} log records", params.num_parameters(), log.records.len());
    if let Some(best) = log.best() {
        println!("best validation perplexity {:.4} at step {}", best.validation_perplexity, best.step);
    }
    Ok(())
}

fn load_pairs(cfg: &RunConfig) -> Result<Vec<ClonePair>> {
    let mut pairs = Vec::new();
    for path in [&cfg.paths.refs, &cfg.paths.pairs].into_iter().flatten() {
        require(path)?;
        pairs.extend(corpus::load_references(path)?.pairs);
    }
    Ok(pairs)
}

fn cmd_eval(cfg: &RunConfig, out: &Path, checkpoint: &Path) -> Result<()> {
    require(checkpoint)?;
    let codec = load_codec(out)?;
    let model = load_checkpoint(checkpoint)?;
    anyhow::ensure!(
        model.config.vocab_size == codec.vocab.len(),
        "checkpoint vocabulary size {} does not match {} ({})",
        model.config.vocab_size,
        workflow::VOCAB_FILE,
        codec.vocab.len()
    );
    let test_path = out.join(SplitName::Testing.file_name());
    require(&test_path)?;
    let test_tokens = corpus::read_corpus(&test_path)?;
    let valid_path = out.join(SplitName::Validation.file_name());
    let valid_tokens = if valid_path.exists() { Some(corpus::read_corpus(&valid_path)?) } else { None };

    let manifest_path = out.join(MANIFEST_FILE);
    let manifest = if manifest_path.exists() { Some(Manifest::load(&manifest_path)?) } else { None };
    let test_fids: Option<Vec<u32>> = manifest
        .as_ref()
        .map(|m| m.testing.entries.iter().flat_map(|e| e.clone_functionalities.iter().copied()).collect());
    let mut training_counts = BTreeMap::new();
    for fid in manifest.iter().flat_map(|m| &m.training.entries).flat_map(|e| &e.clone_functionalities) {
        *training_counts.entry(*fid).or_insert(0) += 1;
    }
    let pairs = load_pairs(cfg)?;

    let inputs = EvalInputs {
        table: &codec.table,
        vocab: &codec.vocab,
        test_tokens: &test_tokens,
        valid_tokens: valid_tokens.as_deref(),
        test_clone_functionalities: test_fids.as_deref(),
        pairs: &pairs,
        training_counts: &training_counts,
        context_length: model.config.context_length,
    };
    let report = eval::evaluate(&model, &inputs, &cfg.eval, &cfg.generation, cfg.seed)?;
    let json = report.to_json();
    let path = out.join(REPORT_FILE);
    fs::write(&path, &json).with_context(|| path.display().to_string())?;
    print!("{json}");
    Ok(())
}

fn normalized_tokens(text: &str) -> Result<Vec<String>> {
    let stream = lexer::tokenize_with_markers(text).map_err(|e| usage(format!("cannot tokenize input: {e}")))?;
    Ok(lexer::replace_literals(stream).texts().into_iter().map(str::to_string).collect())
}

fn cmd_complete(cfg: &RunConfig, out: &Path, checkpoint: &Path, context: &str, truth: Option<&str>) -> Result<()> {
    require(checkpoint)?;
    let codec = load_codec(out)?;
    let model = load_checkpoint(checkpoint)?;
    let context_tokens = normalized_tokens(context)?;
    let ids = codec.encode_ids(&context_tokens);
    if ids.is_empty() {
        return Err(usage("context is empty"));
    }
    if ids.contains(&codec.vocab.unk_id()) {
        log::warn!("context contains subwords outside the vocabulary");
    }
    let completion = decoder::complete_clone(&model, &ids, &cfg.generation, codec.vocab.eoc_id())?;
    let generated = bpe::decode_lossy(&codec.vocab.subwords(&completion.ids));
    println!("{}", lexer::render_texts(generated.iter().map(String::as_str)));
    if completion.reason == Termination::Truncated {
        eprintln!("completion truncated after {} subwords without <eoc>", completion.ids.len());
    }
    if let Some(truth) = truth {
        let reference = normalized_tokens(truth)?;
        let anchor = context_tokens.iter().rposition(|t| t == SOC).unwrap_or(context_tokens.len());
        let predicted: Vec<String> = context_tokens[anchor..].iter().cloned().chain(generated).collect();
        for (name, s) in [
            ("rouge-1", eval::rouge_n(&predicted, &reference, 1)),
            ("rouge-2", eval::rouge_n(&predicted, &reference, 2)),
            ("rouge-L", eval::rouge_l(&predicted, &reference)),
        ] {
            println!("{name} precision {:.4} recall {:.4} f {:.4}", s.precision, s.recall, s.f_measure);
        }
    }
    Ok(())
}

//! Mini-batch gradient descent with gradient accumulation, linear
//! learning-rate decay, periodic validation and best-checkpoint selection.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{init_model, save_checkpoint, Gradients, LmError, ModelConfig, ModelParameters, Precision};
use crate::eval;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_accumulation_steps: usize,
    /// Updates between log records, validation passes and checkpoints.
    pub checkpoint_interval: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Global gradient-norm clip; `0` disables clipping.
    pub max_grad_norm: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 50,
            batch_size: 64,
            learning_rate: 0.5,
            grad_accumulation_steps: 1,
            checkpoint_interval: 500,
            seed: 0,
            precision: Precision::F64,
            max_grad_norm: 5.0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        let fail = |m: &str| Err(LmError::Config(m.to_string()));
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.grad_accumulation_steps == 0 || self.checkpoint_interval == 0 {
            return fail("batch_size, grad_accumulation_steps and checkpoint_interval must be positive");
        }
        if self.max_grad_norm.is_nan() || self.max_grad_norm < 0.0 {
            return fail("max_grad_norm must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    /// Mean training loss over the updates since the previous record.
    pub train_loss: f64,
    pub learning_rate: f64,
    pub validation_perplexity: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,train_loss,learning_rate,validation_perplexity\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}\n", r.step, r.train_loss, r.learning_rate, r.validation_perplexity));
        }
        out
    }

    pub fn best(&self) -> Option<&LogRecord> {
        self.records.iter().min_by(|a, b| a.validation_perplexity.total_cmp(&b.validation_perplexity))
    }
}

/// Cuts documents into training sequences of at most `window + 1` ids,
/// consecutive sequences overlapping by one id so every position after a
/// document's first is a target exactly once.
pub fn chunk_documents(docs: &[Vec<u32>], window: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for doc in docs.iter().filter(|d| d.len() >= 2) {
        let mut start = 0;
        while start + 1 < doc.len() {
            let end = (start + window + 1).min(doc.len());
            out.push(doc[start..end].to_vec());
            start += window;
        }
    }
    out
}

/// Trains a fresh model. When `checkpoint_dir` is given, `last.clmc`,
/// `best.clmc` and `train_log.jsonl` are kept current there. Returns the
/// parameters with the lowest validation perplexity seen at a checkpoint
/// (the final parameters if no checkpoint was reached).
pub fn train(
    train_docs: &[Vec<u32>],
    valid_docs: &[Vec<u32>],
    model_config: &ModelConfig,
    config: &TrainingConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(ModelParameters, TrainingLog), LmError> {
    config.validate()?;
    let mut params = init_model(model_config, config.seed)?;
    params.precision = config.precision;
    params.quantize();

    let mut sequences = chunk_documents(train_docs, model_config.context_length);
    if sequences.is_empty() {
        return Err(LmError::Config("training corpus has no sequence of two or more ids".into()));
    }
    let valid_docs = if valid_docs.iter().any(|d| d.len() >= 2) {
        valid_docs
    } else {
        log::warn!("validation corpus is empty; validating on the training corpus");
        train_docs
    };
    if let Some(dir) = checkpoint_dir {
        fs::create_dir_all(dir)?;
    }

    let batches_per_epoch = sequences.len().div_ceil(config.batch_size);
    let updates_per_epoch = batches_per_epoch.div_ceil(config.grad_accumulation_steps);
    let total_updates = updates_per_epoch * config.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, ModelParameters)> = None;
    let mut step = 0;
    let mut window_loss = 0.0;
    let mut window_updates = 0;

    for _ in 0..config.epochs {
        sequences.shuffle(&mut rng);
        let batches: Vec<&[Vec<u32>]> = sequences.chunks(config.batch_size).collect();
        for group in batches.chunks(config.grad_accumulation_steps) {
            let mut grads = Gradients::zeros_like(&params);
            let mut loss = 0.0;
            for batch in group {
                let (l, g) = params.batch_loss_and_gradients(batch).map_err(|e| match e {
                    LmError::Numerical { .. } => numerical(step, &log),
                    other => other,
                })?;
                loss += l;
                grads.add_assign(&g);
            }
            let scale = 1.0 / group.len() as f64;
            loss *= scale;
            grads.scale(scale);
            if config.max_grad_norm > 0.0 {
                let norm = grads.norm();
                if norm > config.max_grad_norm {
                    grads.scale(config.max_grad_norm / norm);
                }
            }
            let lr = config.learning_rate * (1.0 - step as f64 / total_updates as f64);
            params.apply_gradients(&grads, lr);
            if !params.is_finite() {
                return Err(numerical(step, &log));
            }
            step += 1;
            window_loss += loss;
            window_updates += 1;

            if step % config.checkpoint_interval == 0 {
                let validation_perplexity =
                    eval::corpus_perplexity(&params, valid_docs).map_err(|_| numerical(step, &log))?;
                if !validation_perplexity.is_finite() {
                    return Err(numerical(step, &log));
                }
                let record = LogRecord {
                    step,
                    train_loss: window_loss / window_updates as f64,
                    learning_rate: lr,
                    validation_perplexity,
                };
                log::info!(
                    "step {step}: loss {:.4} lr {:.5} valid ppl {:.4}",
                    record.train_loss,
                    lr,
                    validation_perplexity
                );
                log.records.push(record);
                window_loss = 0.0;
                window_updates = 0;
                let improved = best.as_ref().is_none_or(|(b, _)| validation_perplexity < *b);
                if improved {
                    best = Some((validation_perplexity, params.clone()));
                }
                if let Some(dir) = checkpoint_dir {
                    save_checkpoint(&params, &dir.join("last.clmc"))?;
                    if improved {
                        save_checkpoint(&params, &dir.join("best.clmc"))?;
                    }
                    fs::write(dir.join("train_log.jsonl"), log.to_jsonl())?;
                }
            }
        }
    }
    let result = best.map_or(params, |(_, p)| p);
    Ok((result, log))
}

fn numerical(step: usize, log: &TrainingLog) -> LmError {
    LmError::Numerical { step, last_good_step: log.best().map(|r| r.step) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Family;

    fn toy_docs() -> Vec<Vec<u32>> {
        (0..6).map(|k| (0..40).map(|i| ((i * 3 + k) % 7 + 2) as u32).collect()).collect()
    }

    fn small(family: Family) -> ModelConfig {
        ModelConfig {
            family,
            vocab_size: 10,
            embedding_dim: 8,
            hidden_dim: 16,
            num_layers: 1,
            num_heads: 2,
            context_length: 8,
            init_scale: 0.1,
        }
    }

    #[test]
    fn chunking_covers_each_target_once() {
        let docs = vec![(0..10).collect::<Vec<u32>>(), vec![5], vec![1, 2]];
        let chunks = chunk_documents(&docs, 4);
        assert_eq!(chunks, vec![vec![0, 1, 2, 3, 4], vec![4, 5, 6, 7, 8], vec![8, 9], vec![1, 2]]);
        let targets: usize = chunks.iter().map(|c| c.len() - 1).sum();
        assert_eq!(targets, 9 + 1);
    }

    #[test]
    fn log_accounting_and_best_selection() {
        let cfg = TrainingConfig {
            epochs: 1,
            batch_size: 1,
            checkpoint_interval: 10,
            learning_rate: 0.3,
            ..Default::default()
        };
        let docs = toy_docs();
        let steps = chunk_documents(&docs, 8).len();
        let (best, log) = train(&docs, &docs[..2], &small(Family::Gru), &cfg, None).unwrap();
        assert_eq!(log.records.len(), steps / 10);
        assert!(log.records.windows(2).all(|w| w[0].step < w[1].step));
        let best_ppl = eval::corpus_perplexity(&best, &docs[..2]).unwrap();
        for r in &log.records {
            assert!(best_ppl <= r.validation_perplexity + 1e-12);
            assert!(r.train_loss.is_finite() && r.learning_rate > 0.0);
        }
    }

    #[test]
    fn loss_decreases_and_run_is_deterministic() {
        let cfg = TrainingConfig {
            epochs: 8,
            batch_size: 4,
            checkpoint_interval: 5,
            learning_rate: 0.5,
            ..Default::default()
        };
        let docs = toy_docs();
        for family in [Family::Gru, Family::Transformer] {
            let (p1, log1) = train(&docs, &docs, &small(family), &cfg, None).unwrap();
            let (p2, log2) = train(&docs, &docs, &small(family), &cfg, None).unwrap();
            assert_eq!(log1, log2);
            assert_eq!(p1, p2);
            let first = log1.records.first().unwrap().train_loss;
            let last = log1.records.last().unwrap().train_loss;
            assert!(last < first, "{family:?}: {first} -> {last}");
        }
    }

    #[test]
    fn accumulation_counts_updates() {
        let docs = toy_docs();
        let n = chunk_documents(&docs, 8).len();
        let cfg = TrainingConfig {
            epochs: 2,
            batch_size: 2,
            grad_accumulation_steps: 3,
            checkpoint_interval: 1,
            ..Default::default()
        };
        let (_, log) = train(&docs, &docs, &small(Family::Gru), &cfg, None).unwrap();
        assert_eq!(log.records.len(), 2 * n.div_ceil(2).div_ceil(3));
        let lrs: Vec<f64> = log.records.iter().map(|r| r.learning_rate).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = TrainingConfig {
            epochs: 3,
            batch_size: 2,
            learning_rate: 1e300,
            max_grad_norm: 0.0,
            checkpoint_interval: 1,
            ..Default::default()
        };
        let err = train(&toy_docs(), &toy_docs(), &small(Family::Gru), &cfg, None).unwrap_err();
        assert!(matches!(err, LmError::Numerical { .. }), "{err}");
    }

    #[test]
    fn checkpoints_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainingConfig { epochs: 1, batch_size: 2, checkpoint_interval: 3, ..Default::default() };
        let (best, log) = train(&toy_docs(), &toy_docs(), &small(Family::Gru), &cfg, Some(dir.path())).unwrap();
        assert_eq!(crate::model::load_checkpoint(&dir.path().join("best.clmc")).unwrap(), best);
        let lines = fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), log.records.len());
    }
}

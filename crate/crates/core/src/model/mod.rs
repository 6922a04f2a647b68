//! Autoregressive language models trained from scratch: a multi-layer GRU
//! and a pre-norm decoder-only transformer, both with hand-written
//! backpropagation in `f64`.

mod checkpoint;
mod gru;
mod ops;
mod train;
mod transformer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC, VERSION};
pub use train::{chunk_documents, train, LogRecord, TrainingConfig, TrainingLog};

use crate::par;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },
    #[error("context is empty")]
    EmptyContext,
    #[error("sequence of length {len} is too short to score")]
    SequenceTooShort { len: usize },
    #[error("sequence of length {len} exceeds context length {context_length} + 1")]
    SequenceTooLong { len: usize, context_length: usize },
    #[error("non-finite loss or gradient at step {step} (last good checkpoint: {last_good_step:?})")]
    Numerical { step: usize, last_good_step: Option<usize> },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gru,
    Transformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: Family,
    pub vocab_size: usize,
    pub embedding_dim: usize,
    /// GRU hidden-state size, or the transformer's feed-forward width.
    pub hidden_dim: usize,
    pub num_layers: usize,
    /// Attention heads; ignored by the GRU.
    pub num_heads: usize,
    /// Transformer attention window, and the training window for both families.
    pub context_length: usize,
    pub init_scale: f64,
}

impl ModelConfig {
    pub fn gru(vocab_size: usize) -> Self {
        ModelConfig {
            family: Family::Gru,
            vocab_size,
            embedding_dim: 128,
            hidden_dim: 128,
            num_layers: 2,
            num_heads: 1,
            context_length: 128,
            init_scale: 0.1,
        }
    }

    pub fn transformer(vocab_size: usize) -> Self {
        ModelConfig {
            family: Family::Transformer,
            vocab_size,
            embedding_dim: 256,
            hidden_dim: 1024,
            num_layers: 4,
            num_heads: 8,
            context_length: 128,
            init_scale: 0.02,
        }
    }

    pub fn validate(&self) -> Result<(), LmError> {
        let fail = |m: &str| Err(LmError::Config(m.to_string()));
        if self.vocab_size < 2 {
            return fail("vocab_size must be at least 2");
        }
        if self.context_length < 2 {
            return fail("context_length must be at least 2");
        }
        if self.embedding_dim == 0 || self.hidden_dim == 0 || self.num_layers == 0 {
            return fail("dimensions and layer count must be positive");
        }
        if !self.init_scale.is_finite() || self.init_scale < 0.0 {
            return fail("init_scale must be finite and non-negative");
        }
        if self.family == Family::Transformer
            && (self.num_heads == 0 || !self.embedding_dim.is_multiple_of(self.num_heads))
        {
            return fail("embedding_dim must be divisible by num_heads");
        }
        Ok(())
    }

    /// `(name, dims, kind)` for every tensor, in storage order.
    pub(crate) fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        match self.family {
            Family::Gru => gru::layout(self),
            Family::Transformer => transformer::layout(self),
        }
    }
}

/// How a tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub config: ModelConfig,
    pub precision: Precision,
    pub tensors: Vec<Tensor>,
}

/// Gradient buffers in the same order and shapes as [`ModelParameters::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(params: &ModelParameters) -> Self {
        Gradients(params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|x| x.is_finite())
    }
}

/// Weights are drawn from N(0, init_scale²); biases and layer-norm shifts
/// are zero, layer-norm gains one.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParameters, LmError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, config.init_scale).map_err(|e| LmError::Config(e.to_string()))?;
    let tensors = config
        .layout()
        .into_iter()
        .map(|(name, dims, init)| {
            let n = dims.iter().product();
            let data = match init {
                Init::Normal if config.init_scale > 0.0 => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                Init::Normal | Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            Tensor { name, dims, data }
        })
        .collect();
    Ok(ModelParameters { config: config.clone(), precision: Precision::F64, tensors })
}

impl ModelParameters {
    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flat_map(|t| &t.data).all(|x| x.is_finite())
    }

    /// Rounds every weight to the declared precision.
    pub fn quantize(&mut self) {
        if self.precision == Precision::F32 {
            self.tensors.iter_mut().flat_map(|t| t.data.iter_mut()).for_each(|x| *x = *x as f32 as f64);
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), LmError> {
        let vocab_size = self.config.vocab_size;
        match ids.iter().find(|&&id| id as usize >= vocab_size) {
            Some(&id) => Err(LmError::IdOutOfRange { id, vocab_size }),
            None => Ok(()),
        }
    }

    /// Mean cross-entropy over every position after the first of every
    /// sequence, with gradients for every tensor.
    pub fn batch_loss_and_gradients(&self, batch: &[Vec<u32>]) -> Result<(f64, Gradients), LmError> {
        for seq in batch {
            self.check_ids(seq)?;
            if seq.len() < 2 {
                return Err(LmError::SequenceTooShort { len: seq.len() });
            }
            if self.config.family == Family::Transformer && seq.len() > self.config.context_length + 1 {
                return Err(LmError::SequenceTooLong { len: seq.len(), context_length: self.config.context_length });
            }
        }
        let positions: usize = batch.iter().map(|s| s.len() - 1).sum();
        if positions == 0 {
            return Err(LmError::SequenceTooShort { len: 0 });
        }
        let per_seq = par::map(batch, |seq| {
            let mut grads = Gradients::zeros_like(self);
            let nll = match self.config.family {
                Family::Gru => gru::sequence_backward(self, seq, &mut grads),
                Family::Transformer => transformer::sequence_backward(self, seq, &mut grads),
            };
            (nll, grads)
        });
        let mut total = Gradients::zeros_like(self);
        let mut nll = 0.0;
        for (seq_nll, grads) in &per_seq {
            nll += seq_nll;
            total.add_assign(grads);
        }
        let scale = 1.0 / positions as f64;
        total.scale(scale);
        let loss = nll * scale;
        if !loss.is_finite() || !total.is_finite() {
            return Err(LmError::Numerical { step: 0, last_good_step: None });
        }
        Ok((loss, total))
    }

    /// In-place gradient step `w -= lr * g`.
    pub fn apply_gradients(&mut self, grads: &Gradients, learning_rate: f64) {
        for (t, g) in self.tensors.iter_mut().zip(&grads.0) {
            for (w, d) in t.data.iter_mut().zip(g) {
                *w -= learning_rate * d;
            }
        }
        self.quantize();
    }
}

/// Anything that yields next-token distributions over a fixed vocabulary.
pub trait LanguageModel: Sync {
    fn vocab_size(&self) -> usize;

    /// `P(next | context)`: strictly positive, summing to one.
    fn next_token_distribution(&self, context: &[u32]) -> Result<Vec<f64>, LmError>;

    /// Calls `visit(i, P(next | ids[..=i]))` for every `i` in order.
    /// Implementations may share work across prefixes.
    fn scan(&self, ids: &[u32], visit: &mut dyn FnMut(usize, &[f64])) -> Result<(), LmError> {
        for i in 0..ids.len() {
            let dist = self.next_token_distribution(&ids[..=i])?;
            visit(i, &dist);
        }
        Ok(())
    }

    /// `ln P(ids[i] | ids[..i])` for `i` in `scored`; `scored.start >= 1`.
    fn log_probs(&self, ids: &[u32], scored: std::ops::Range<usize>) -> Result<Vec<f64>, LmError> {
        assert!(scored.start >= 1 && scored.end <= ids.len(), "scored range out of bounds");
        let mut out = Vec::with_capacity(scored.len());
        if scored.is_empty() {
            return Ok(out);
        }
        self.scan(&ids[..scored.end - 1], &mut |i, dist| {
            if i + 1 >= scored.start {
                out.push(dist[ids[i + 1] as usize].ln());
            }
        })?;
        Ok(out)
    }

    /// Begins incremental decoding from `context`.
    fn start<'a>(&'a self, context: &[u32]) -> Result<Box<dyn DecodeState + 'a>, LmError> {
        let dist = self.next_token_distribution(context)?;
        Ok(Box::new(Recompute { model: self, context: context.to_vec(), dist }))
    }
}

/// Incremental next-token state used by the decoder.
pub trait DecodeState {
    fn distribution(&self) -> &[f64];
    fn push(&mut self, id: u32) -> Result<(), LmError>;
}

struct Recompute<'a, M: LanguageModel + ?Sized> {
    model: &'a M,
    context: Vec<u32>,
    dist: Vec<f64>,
}

impl<M: LanguageModel + ?Sized> DecodeState for Recompute<'_, M> {
    fn distribution(&self) -> &[f64] {
        &self.dist
    }

    fn push(&mut self, id: u32) -> Result<(), LmError> {
        self.context.push(id);
        self.dist = self.model.next_token_distribution(&self.context)?;
        Ok(())
    }
}

impl LanguageModel for ModelParameters {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn next_token_distribution(&self, context: &[u32]) -> Result<Vec<f64>, LmError> {
        if context.is_empty() {
            return Err(LmError::EmptyContext);
        }
        self.check_ids(context)?;
        Ok(match self.config.family {
            Family::Gru => gru::last_distribution(self, context),
            Family::Transformer => {
                let start = context.len().saturating_sub(self.config.context_length);
                transformer::distributions(self, &context[start..]).pop().expect("non-empty context")
            }
        })
    }

    fn scan(&self, ids: &[u32], visit: &mut dyn FnMut(usize, &[f64])) -> Result<(), LmError> {
        self.check_ids(ids)?;
        match self.config.family {
            Family::Gru => gru::scan(self, ids, visit),
            Family::Transformer => transformer::scan(self, ids, visit),
        }
        Ok(())
    }

    fn start<'a>(&'a self, context: &[u32]) -> Result<Box<dyn DecodeState + 'a>, LmError> {
        if context.is_empty() {
            return Err(LmError::EmptyContext);
        }
        self.check_ids(context)?;
        Ok(match self.config.family {
            Family::Gru => Box::new(gru::GruState::new(self, context)),
            Family::Transformer => {
                let dist = self.next_token_distribution(context)?;
                Box::new(Recompute { model: self, context: context.to_vec(), dist })
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(family: Family, init_scale: f64) -> ModelConfig {
        ModelConfig {
            family,
            vocab_size: 12,
            embedding_dim: 8,
            hidden_dim: 8,
            num_layers: 2,
            num_heads: 2,
            context_length: 6,
            init_scale,
        }
    }

    #[test]
    fn config_validation() {
        assert!(tiny(Family::Gru, 0.1).validate().is_ok());
        let mut c = tiny(Family::Transformer, 0.1);
        c.num_heads = 3;
        assert!(matches!(init_model(&c, 0), Err(LmError::Config(_))));
        let mut c = tiny(Family::Gru, 0.1);
        c.vocab_size = 1;
        assert!(c.validate().is_err());
        c.vocab_size = 5;
        c.context_length = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        for family in [Family::Gru, Family::Transformer] {
            let c = tiny(family, 0.02);
            assert_eq!(init_model(&c, 7).unwrap(), init_model(&c, 7).unwrap());
            assert_ne!(init_model(&c, 7).unwrap(), init_model(&c, 8).unwrap());
        }
    }

    #[test]
    fn zero_init_is_uniform() {
        for family in [Family::Gru, Family::Transformer] {
            let p = init_model(&tiny(family, 0.0), 1).unwrap();
            let d = p.next_token_distribution(&[3, 4, 5]).unwrap();
            assert!(d.iter().all(|&x| (x - 1.0 / 12.0).abs() < 1e-15));
            let (loss, _) = p.batch_loss_and_gradients(&[vec![1, 2, 3], vec![4, 5]]).unwrap();
            assert!((loss - 12f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn id_and_length_errors() {
        let p = init_model(&tiny(Family::Transformer, 0.1), 1).unwrap();
        assert!(matches!(p.next_token_distribution(&[12]), Err(LmError::IdOutOfRange { id: 12, .. })));
        assert!(matches!(p.next_token_distribution(&[]), Err(LmError::EmptyContext)));
        assert!(matches!(p.batch_loss_and_gradients(&[vec![1]]), Err(LmError::SequenceTooShort { .. })));
        assert!(matches!(
            p.batch_loss_and_gradients(&[vec![1; 8]]),
            Err(LmError::SequenceTooLong { len: 8, context_length: 6 })
        ));
        assert!(p.batch_loss_and_gradients(&[vec![1; 7]]).is_ok());
    }

    #[test]
    fn scan_matches_next_token_distribution() {
        for family in [Family::Gru, Family::Transformer] {
            let p = init_model(&tiny(family, 0.3), 5).unwrap();
            let ids: Vec<u32> = (0..15).map(|i| (i * 7 % 12) as u32).collect();
            let mut rows = Vec::new();
            p.scan(&ids, &mut |_, d| rows.push(d.to_vec())).unwrap();
            for (i, row) in rows.iter().enumerate() {
                let direct = p.next_token_distribution(&ids[..=i]).unwrap();
                for (a, b) in row.iter().zip(&direct) {
                    assert!((a - b).abs() < 1e-12, "{family:?} position {i}");
                }
            }
            let mut state = p.start(&ids[..3]).unwrap();
            for i in 3..ids.len() {
                state.push(ids[i]).unwrap();
                let direct = p.next_token_distribution(&ids[..=i]).unwrap();
                for (a, b) in state.distribution().iter().zip(&direct) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn distributions_are_normalized() {
        for family in [Family::Gru, Family::Transformer] {
            let p = init_model(&tiny(family, 1.0), 3).unwrap();
            for len in 1..20 {
                let ctx: Vec<u32> = (0..len).map(|i| ((i * 5 + len) % 12) as u32).collect();
                let d = p.next_token_distribution(&ctx).unwrap();
                assert!(d.iter().all(|&x| x > 0.0));
                assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn f32_precision_rounds_weights() {
        let mut p = init_model(&tiny(Family::Gru, 0.1), 1).unwrap();
        p.precision = Precision::F32;
        p.quantize();
        assert!(p.tensors.iter().flat_map(|t| &t.data).all(|&x| x == x as f32 as f64));
    }
}

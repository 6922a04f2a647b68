//! Next-token ranking and clone-method completion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{LanguageModel, LmError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Nucleus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub strategy: Strategy,
    pub nucleus_p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig { strategy: Strategy::Nucleus, nucleus_p: 0.95, max_new_tokens: 512, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRanking {
    pub context: Vec<u32>,
    /// `(id, probability)`, most probable first.
    pub candidates: Vec<(u32, f64)>,
}

impl PredictionRanking {
    /// 1-based rank of `id`, if present.
    pub fn rank_of(&self, id: u32) -> Option<usize> {
        self.candidates.iter().position(|&(c, _)| c == id).map(|p| p + 1)
    }
}

/// Ids sorted by descending probability, ties to the lower id.
pub fn sorted_by_probability(dist: &[f64]) -> Vec<(u32, f64)> {
    let mut order: Vec<(u32, f64)> = dist.iter().enumerate().map(|(i, &p)| (i as u32, p)).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order
}

/// Top `k` of a distribution.
pub fn top_k(dist: &[f64], k: usize) -> Vec<(u32, f64)> {
    let mut order = sorted_by_probability(dist);
    order.truncate(k);
    order
}

pub fn rank_top_k<M: LanguageModel + ?Sized>(
    model: &M,
    context: &[u32],
    k: usize,
) -> Result<PredictionRanking, LmError> {
    let dist = model.next_token_distribution(context)?;
    Ok(PredictionRanking { context: context.to_vec(), candidates: top_k(&dist, k) })
}

/// The smallest probability-sorted prefix whose mass reaches `p`.
pub fn nucleus(dist: &[f64], p: f64) -> Vec<(u32, f64)> {
    let mut order = sorted_by_probability(dist);
    let mut mass = 0.0;
    let mut keep = order.len();
    for (i, &(_, q)) in order.iter().enumerate() {
        mass += q;
        if mass >= p {
            keep = i + 1;
            break;
        }
    }
    order.truncate(keep);
    order
}

/// Draws from the nucleus of `dist`, renormalized over the nucleus.
pub fn sample_from_distribution<R: Rng + ?Sized>(dist: &[f64], p: f64, rng: &mut R) -> u32 {
    let set = nucleus(dist, p);
    let mass: f64 = set.iter().map(|&(_, q)| q).sum();
    let mut u = rng.random::<f64>() * mass;
    for &(id, q) in &set {
        if u < q {
            return id;
        }
        u -= q;
    }
    set.last().expect("nucleus is never empty").0
}

pub fn sample_nucleus<M: LanguageModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    context: &[u32],
    p: f64,
    rng: &mut R,
) -> Result<u32, LmError> {
    Ok(sample_from_distribution(&model.next_token_distribution(context)?, p, rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Termination {
    Eoc,
    Truncated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    /// Generated ids only; ends with `<eoc>` when `reason` is `Eoc`.
    pub ids: Vec<u32>,
    pub reason: Termination,
}

/// Extends `context` until `eoc_id` is produced or `max_new_tokens` ids
/// have been generated.
pub fn complete_clone<M: LanguageModel + ?Sized>(
    model: &M,
    context: &[u32],
    config: &GenerationConfig,
    eoc_id: u32,
) -> Result<Completion, LmError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = model.start(context)?;
    let mut ids = Vec::new();
    while ids.len() < config.max_new_tokens {
        let dist = state.distribution();
        let next = match config.strategy {
            Strategy::Greedy => sorted_by_probability(dist)[0].0,
            Strategy::Nucleus => sample_from_distribution(dist, config.nucleus_p, &mut rng),
        };
        ids.push(next);
        if next == eoc_id {
            return Ok(Completion { ids, reason: Termination::Eoc });
        }
        if ids.len() < config.max_new_tokens {
            state.push(next)?;
        }
    }
    Ok(Completion { ids, reason: Termination::Truncated })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Ignores context; always returns the same distribution.
    struct Fixed(Vec<f64>);

    impl LanguageModel for Fixed {
        fn vocab_size(&self) -> usize {
            self.0.len()
        }
        fn next_token_distribution(&self, context: &[u32]) -> Result<Vec<f64>, LmError> {
            if context.is_empty() {
                return Err(LmError::EmptyContext);
            }
            Ok(self.0.clone())
        }
    }

    #[test]
    fn uniform_ranking_breaks_ties_by_id() {
        let m = Fixed(vec![0.2; 5]);
        let r = rank_top_k(&m, &[1], 3).unwrap();
        assert_eq!(r.candidates, vec![(0, 0.2), (1, 0.2), (2, 0.2)]);
        let all = rank_top_k(&m, &[1], 5).unwrap();
        assert!((all.candidates.iter().map(|c| c.1).sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(all.rank_of(4), Some(5));
    }

    #[test]
    fn nucleus_sets() {
        let d = [0.05, 0.9, 0.05];
        assert_eq!(nucleus(&d, 0.5), vec![(1, 0.9)]);
        assert_eq!(nucleus(&d, 1.0).len(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            assert_eq!(sample_from_distribution(&d, 0.5, &mut rng), 1);
        }
        // Mass reaching p exactly stops there.
        assert_eq!(nucleus(&[0.5, 0.25, 0.25], 0.75).len(), 2);
    }

    #[test]
    fn always_eoc_model() {
        let m = Fixed(vec![0.0, 0.0, 1.0]);
        let c = complete_clone(&m, &[1], &GenerationConfig::default(), 2).unwrap();
        assert_eq!(c, Completion { ids: vec![2], reason: Termination::Eoc });
    }

    #[test]
    fn cap_truncates() {
        let m = Fixed(vec![0.5, 0.5, 0.0]);
        let cfg = GenerationConfig { max_new_tokens: 5, ..Default::default() };
        let c = complete_clone(&m, &[1], &cfg, 2).unwrap();
        assert_eq!(c.ids.len(), 5);
        assert_eq!(c.reason, Termination::Truncated);
    }

    #[test]
    fn greedy_ignores_seed() {
        let m = Fixed(vec![0.3, 0.5, 0.2]);
        let a = complete_clone(
            &m,
            &[0],
            &GenerationConfig { strategy: Strategy::Greedy, max_new_tokens: 4, seed: 1, ..Default::default() },
            2,
        )
        .unwrap();
        let b = complete_clone(
            &m,
            &[0],
            &GenerationConfig { strategy: Strategy::Greedy, max_new_tokens: 4, seed: 99, ..Default::default() },
            2,
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.ids, vec![1; 4]);
    }
}

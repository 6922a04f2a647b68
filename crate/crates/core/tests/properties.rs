use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use clonelm::bpe::{decode, learn_merges};
use clonelm::corpus::{filter_true_positives, CloneReference};
use clonelm::decoder::{self, nucleus, GenerationConfig, PredictionRanking, Strategy as Decoding, Termination};
use clonelm::eval::{self, extract_clone_snippets, nonclone_regions, rouge_l, rouge_n};
use clonelm::lexer::{self, render_texts, tokenize_with_markers};
use clonelm::{LanguageModel, LmError};

fn java_token() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-zA-Z_$][a-zA-Z0-9_$]{0,6}"
            .prop_filter("not a literal keyword", |s| !matches!(s.as_str(), "true" | "false" | "null")),
        prop::sample::select(vec!["int", "class", "return", "while", "true", "null", "var"]).prop_map(String::from),
        prop::sample::select(vec![
            "=", "==", "+", "++", "+=", "-", "->", "::", ">>>=", "<", "<=", "&&", "!", "?", ":", "@",
        ])
        .prop_map(String::from),
        prop::sample::select(vec!["(", ")", "{", "}", "[", "]", ";", ",", ".", "..."]).prop_map(String::from),
        prop::sample::select(vec!["0", "42", "0x1F", "0b101", "017", "1.5e3", "2f", "10L", "'a'", "'\\n'"])
            .prop_map(String::from),
        "[a-z ]{0,5}".prop_map(|s| format!("\"{s}\"")),
        prop::sample::select(vec!["<soc>", "<eoc>", "<num_val>", "<str_val>"]).prop_map(String::from),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn render_round_trips(tokens in prop::collection::vec(java_token(), 0..40)) {
        let text = render_texts(tokens.iter().map(String::as_str));
        let back = tokenize_with_markers(&text).unwrap();
        prop_assert_eq!(back.texts(), tokens.iter().map(String::as_str).collect::<Vec<_>>());
    }

    #[test]
    fn replace_literals_is_idempotent_and_length_preserving(tokens in prop::collection::vec(java_token(), 0..40)) {
        let text = render_texts(tokens.iter().filter(|t| !lexer::is_meta(t)).map(String::as_str));
        let stream = lexer::tokenize(&text).unwrap();
        let once = lexer::replace_literals(stream.clone());
        prop_assert_eq!(once.len(), stream.len());
        prop_assert_eq!(lexer::replace_literals(once.clone()), once.clone());
        for t in &once.tokens {
            prop_assert!(!t.text.is_empty() && !t.text.contains(char::is_whitespace));
        }
        prop_assert!(once.tokens.windows(2).all(|w| w[0].line <= w[1].line));
    }

    #[test]
    fn bpe_round_trip_and_monotone_compression(
        corpus in prop::collection::vec(prop_oneof!["[a-d]{1,6}", Just("<soc>".to_string())], 1..60),
        n in 1usize..40,
    ) {
        prop_assume!(corpus.iter().any(|t| t != "<soc>"));
        let table = learn_merges(&corpus, n).unwrap();
        let encoded = table.encode(&corpus);
        prop_assert_eq!(decode(&encoded).unwrap(), corpus.clone());
        let mut previous = usize::MAX;
        for m in 0..=table.len() {
            let len = table.truncated(m).encode(&corpus).len();
            prop_assert!(len <= previous);
            previous = len;
        }
        for sw in &encoded {
            prop_assert!(sw == "<soc>" || !sw.contains('<'));
        }
    }

    #[test]
    fn rouge_swap_symmetry(a in prop::collection::vec(0u8..6, 0..20), b in prop::collection::vec(0u8..6, 0..20)) {
        for n in 1..=3 {
            prop_assert_eq!(rouge_n(&a, &b, n).precision, rouge_n(&b, &a, n).recall);
        }
        prop_assert_eq!(rouge_l(&a, &b).precision, rouge_l(&b, &a).recall);
        let s = rouge_n(&a, &b, 1);
        for v in [s.precision, s.recall, s.f_measure] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn ranking_metric_bounds(ranks in prop::collection::vec(1usize..=12, 1..50)) {
        let ranking = PredictionRanking { context: vec![], candidates: (0..10).map(|i| (i, 0.1)).collect() };
        let rankings = vec![ranking; ranks.len()];
        let truths: Vec<u32> = ranks.iter().map(|&r| r as u32 - 1).collect();
        let acc: Vec<f64> = (1..=10).map(|k| eval::top_k_accuracy(&rankings, &truths, k).unwrap()).collect();
        prop_assert!(acc.windows(2).all(|w| w[0] <= w[1]));
        let m = eval::mrr(&rankings, &truths).unwrap();
        prop_assert!(acc[0] <= m + 1e-15 && m <= acc[9] + 1e-15);
    }

    #[test]
    fn snippets_partition_the_corpus(spans in prop::collection::vec((0usize..5, 0usize..6), 0..6), tail in 0usize..5) {
        let mut ids = Vec::new();
        for (gap, body) in spans {
            ids.extend(std::iter::repeat_n(7u32, gap));
            ids.push(1);
            ids.extend(std::iter::repeat_n(8u32, body));
            ids.push(2);
        }
        ids.extend(std::iter::repeat_n(9u32, tail));
        let snippets = extract_clone_snippets(&ids, &1, &2, 4).unwrap();
        let others = nonclone_regions(ids.len(), &snippets, 4);
        let mut covered: Vec<usize> = snippets.iter().chain(&others).flat_map(|s| s.span.clone()).collect();
        covered.sort_unstable();
        prop_assert_eq!(covered, (0..ids.len()).collect::<Vec<_>>());
        for s in &snippets {
            prop_assert!(s.span.start - s.context.start <= 4);
            prop_assert_eq!(ids[s.span.start], 1);
            prop_assert_eq!(ids[s.span.end - 1], 2);
        }
    }

    #[test]
    fn rank_top_k_matches_sort_oracle(weights in prop::collection::vec(0.01f64..1.0, 2..30), k in 1usize..30) {
        let total: f64 = weights.iter().sum();
        let dist: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut oracle: Vec<(u32, f64)> = dist.iter().enumerate().map(|(i, &p)| (i as u32, p)).collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        oracle.truncate(k);
        prop_assert_eq!(decoder::top_k(&dist, k), oracle);
    }
}

#[test]
fn filter_matches_predicate_scan() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let refs: Vec<CloneReference> = (0..1000)
        .map(|i| CloneReference {
            file_path: format!("{}/F{}.java", rng.random_range(1..4), rng.random_range(0..20)),
            start_line: i + 1,
            end_line: i + 3,
            functionality_id: rng.random_range(1..4),
            true_positive: rng.random_bool(0.6),
        })
        .collect();
    let files: HashSet<String> = (0..10).map(|k| format!("1/F{k}.java")).chain(["2/F3.java".to_string()]).collect();
    let mut expected = Vec::new();
    for r in &refs {
        if r.true_positive && files.contains(&r.file_path) {
            expected.push(r.clone());
        }
    }
    assert_eq!(filter_true_positives(&refs, &files), expected);
}

/// Next-token distribution depends on the last id only.
struct Markov(usize);

impl LanguageModel for Markov {
    fn vocab_size(&self) -> usize {
        self.0
    }
    fn next_token_distribution(&self, ctx: &[u32]) -> Result<Vec<f64>, LmError> {
        let last = *ctx.last().ok_or(LmError::EmptyContext)? as usize;
        let raw: Vec<f64> = (0..self.0).map(|i| 1.0 + ((i * 7 + last * 3) % 11) as f64).collect();
        let total: f64 = raw.iter().sum();
        Ok(raw.into_iter().map(|w| w / total).collect())
    }
}

#[test]
fn sampled_ids_stay_in_each_steps_nucleus() {
    let model = Markov(9);
    let eoc = 2;
    for seed in 0..50 {
        let cfg = GenerationConfig { strategy: Decoding::Nucleus, nucleus_p: 0.6, max_new_tokens: 40, seed };
        let completion = decoder::complete_clone(&model, &[1], &cfg, eoc).unwrap();
        let mut ctx = vec![1];
        for &id in &completion.ids {
            let support: Vec<u32> =
                nucleus(&model.next_token_distribution(&ctx).unwrap(), 0.6).iter().map(|c| c.0).collect();
            assert!(support.contains(&id));
            ctx.push(id);
        }
        assert!(completion.ids.len() <= 40);
        let eocs = completion.ids.iter().filter(|&&i| i == eoc).count();
        match completion.reason {
            Termination::Eoc => assert!(eocs == 1 && *completion.ids.last().unwrap() == eoc),
            Termination::Truncated => assert_eq!(eocs, 0),
        }
    }
}

#[test]
fn greedy_is_seed_independent() {
    let model = Markov(9);
    let run = |seed| {
        let cfg = GenerationConfig { strategy: Decoding::Greedy, max_new_tokens: 30, seed, ..Default::default() };
        decoder::complete_clone(&model, &[4, 5], &cfg, 2).unwrap()
    };
    assert_eq!(run(0), run(12345));
}

#[test]
fn nucleus_frequencies_at_full_mass() {
    let dist = [0.5, 0.3, 0.2];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut counts = [0usize; 3];
    for _ in 0..30_000 {
        counts[decoder::sample_from_distribution(&dist, 1.0, &mut rng) as usize] += 1;
    }
    for (c, p) in counts.iter().zip(dist) {
        let sigma = (30_000.0 * p * (1.0 - p)).sqrt();
        assert!((*c as f64 - 30_000.0 * p).abs() < 4.0 * sigma);
    }
}

mod common;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokflow::corpus::{
    generate_corpus, make_minimal_pairs, next_token_probe_accuracy, GrammarConfig, GrammarSpec, MinimalPair, PairKind,
    RenderConfig, RenderSpec,
};
use tokflow::eval::{frechet_distance, gen_ppl, paired_accuracy, speaker_similarity};
use tokflow::model::{InputMode, Model, ModelConfig, SeqRef};
use tokflow::sampler::{Continuation, StopReason};

fn world(beta: f64, seed: u64) -> (GrammarSpec, RenderSpec) {
    let g = GrammarSpec::generate(&GrammarConfig::default(), seed).unwrap();
    let cfg = RenderConfig {
        leak_beta: beta,
        ..RenderConfig::default()
    };
    let r = RenderSpec::generate(&cfg, g.vocab_size, seed + 100).unwrap();
    (g, r)
}

fn pairs(n: usize, seed: u64) -> Vec<MinimalPair> {
    let (g, r) = world(0.5, 1);
    make_minimal_pairs(&g, &r, PairKind::Lexical, n, seed).unwrap().pairs
}

fn sample_set(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, d), |(_, j)| rng.gen::<f64>() * (j + 1) as f64)
}

#[test]
fn leak_probe_accuracy_grows_with_beta() {
    let mut acc = Vec::new();
    for beta in [0.0, 0.25, 0.5] {
        let mut total = 0.0;
        for seed in 0..5 {
            let (g, r) = world(beta, seed);
            let train = generate_corpus(&g, &r, 200, 1000 + seed);
            let test = generate_corpus(&g, &r, 100, 2000 + seed);
            total += next_token_probe_accuracy(&r, &train, &test).unwrap();
        }
        acc.push(total / 5.0);
    }
    eprintln!("probe accuracy at beta 0, 0.25, 0.5: {acc:?}");
    assert!(acc[0] <= acc[1] && acc[1] <= acc[2]);
    assert!(acc[2] > 0.9);
}

#[test]
fn same_speaker_utterances_agree_on_attribute() {
    let (g, r) = world(0.5, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut sims = Vec::new();
    for _ in 0..200 {
        let s = r.speaker(rng.gen_range(0..r.n_speakers()));
        let mut frames = Vec::new();
        for _ in 0..2 {
            let t = g.sample_transcript(&mut rng).tokens(&g);
            let x = r.render_varying(&t, &vec![s.as_slice(); t.len()], &r.draw_noise(t.len(), &mut rng));
            frames.push(x.mapv(|v| v as f32));
        }
        sims.push(speaker_similarity(frames[0].view(), frames[1].view(), &r).unwrap());
    }
    sims.sort_by(|a, b| a.total_cmp(b));
    assert!(sims[10] > 0.9, "5th percentile {}", sims[10]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn corpus_is_a_pure_function_of_seed(seed in 0u64..1_000_000, n in 1usize..6) {
        let (g, r) = world(0.5, 2);
        let a = generate_corpus(&g, &r, n, seed);
        prop_assert_eq!(&a, &generate_corpus(&g, &r, n, seed));
        // item i depends on i alone, not on the corpus size
        prop_assert_eq!(&a[..n - 1], &generate_corpus(&g, &r, n - 1, seed)[..]);
    }

    #[test]
    fn paired_accuracy_order_and_swap(seed in 0u64..10_000) {
        let ps = pairs(12, seed);
        let score = |u: &tokflow::corpus::Utterance| -> f64 {
            // fixed but arbitrary scorer with occasional ties
            (u.tokens.iter().map(|&t| t as u64).sum::<u64>() % 7) as f64
        };
        let acc = paired_accuracy(&ps, |u| Ok(score(u))).unwrap();
        let mut shuffled = ps.clone();
        shuffled.reverse();
        shuffled.rotate_left((seed % 12) as usize);
        prop_assert_eq!(acc, paired_accuracy(&shuffled, |u| Ok(score(u))).unwrap());
        let swapped: Vec<MinimalPair> = ps
            .iter()
            .map(|p| MinimalPair { positive: p.negative.clone(), negative: p.positive.clone(), span: p.span })
            .collect();
        let flipped = paired_accuracy(&swapped, |u| Ok(score(u))).unwrap();
        prop_assert!((flipped - (1.0 - acc)).abs() < 1e-12);
    }

    #[test]
    fn frechet_symmetric_and_order_invariant(seed in 0u64..10_000, d in 1usize..5) {
        let a = sample_set(40, d, seed);
        let b = sample_set(30, d, seed + 1);
        let ab = frechet_distance(a.view(), b.view()).unwrap();
        let ba = frechet_distance(b.view(), a.view()).unwrap();
        prop_assert!((ab - ba).abs() < 1e-8);
        prop_assert!(ab >= -1e-9);
        let mut rows: Vec<usize> = (0..40).collect();
        rows.rotate_left((seed % 40) as usize);
        rows.swap(0, 39);
        let permuted = a.select(ndarray::Axis(0), &rows);
        prop_assert!((frechet_distance(permuted.view(), b.view()).unwrap() - ab).abs() < 1e-8);
        prop_assert!(frechet_distance(a.view(), a.view()).unwrap().abs() < 1e-8);
    }

    #[test]
    fn gen_ppl_ignores_continuation_order(seed in 0u64..10_000) {
        let (g, r) = world(0.5, 4);
        let us = generate_corpus(&g, &r, 6, seed);
        let conts: Vec<Continuation> = us
            .iter()
            .map(|u| {
                let p = u.len() / 2;
                Continuation {
                    prompt_tokens: u.tokens[..p].to_vec(),
                    tokens: u.tokens[p..].to_vec(),
                    embeddings: u.embeddings.slice(ndarray::s![p.., ..]).to_owned(),
                    prompt_len: p,
                    stopped_by: StopReason::Eos,
                }
            })
            .collect();
        let base = gen_ppl(&conts, &g).unwrap();
        let mut rev = conts.clone();
        rev.reverse();
        rev.rotate_left((seed % 6) as usize);
        prop_assert!((gen_ppl(&rev, &g).unwrap() - base).abs() <= 1e-12 * base);
    }

    #[test]
    fn perturbing_a_position_leaves_earlier_contexts_unchanged(seed in 0u64..10_000, j in 0usize..10, vector in any::<bool>()) {
        let cfg = ModelConfig {
            input_mode: if vector { InputMode::Vector } else { InputMode::Token },
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            cfm_enabled: false,
            vocab_size: 16,
            embed_dim: 16,
            ..ModelConfig::default()
        };
        let m = Model::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let mut tokens: Vec<u16> = (0..10).map(|_| rng.gen_range(0..16)).collect();
        let mut frames = Array2::from_shape_fn((10, 16), |_| rng.gen::<f32>());
        let before = m.contexts(SeqRef { tokens: &tokens, frames: frames.view() }).unwrap();
        tokens[j] = (tokens[j] + 1) % 16;
        frames.row_mut(j).mapv_inplace(|v| v + 1.0);
        let after = m.contexts(SeqRef { tokens: &tokens, frames: frames.view() }).unwrap();
        // row m is the context before position m, so rows 0..=j see only positions < j
        for row in 0..=j {
            prop_assert!(before.row(row) == after.row(row));
        }
        if j + 1 < 10 {
            prop_assert!(before.row(j + 1) != after.row(j + 1));
        }
    }
}

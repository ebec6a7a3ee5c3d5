mod common;

use common::*;
use ndarray::s;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tokflow::corpus::SILENCE;
use tokflow::flow::{ode_sample, sample_prior, SolverSpec};
use tokflow::model::{CfmQuery, InputMode, Model, ModelConfig, SeqRef};
use tokflow::sampler::{continue_prompt, generate_frame, Counters, FrameSource, GenerationConfig, StopReason};

fn model(cfg: &ModelConfig, seed: u64) -> Model<f32> {
    Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn fast_gen() -> GenerationConfig {
    GenerationConfig {
        solver: SolverSpec::midpoint(8).unwrap(),
        max_frames: 30,
        ..GenerationConfig::default()
    }
}

#[test]
fn one_transformer_advance_and_nfe_field_rows_per_frame() {
    let m = model(&tiny_model(InputMode::Vector, true), 1);
    let corpus = toy_corpus(3);
    let u = &corpus[0];
    let prompt = SeqRef {
        tokens: &u.tokens[..3],
        frames: u.embeddings.slice(s![..3, ..]),
    };
    for (scale, per_eval) in [(0.0, 1), (0.3, 2)] {
        let gen = GenerationConfig {
            cfg_scale: scale,
            ..fast_gen()
        };
        let mut c = Counters::default();
        let out = continue_prompt(&m, prompt, &gen, FrameSource::FlowHead, &mut ChaCha8Rng::seed_from_u64(4), &mut c).unwrap();
        assert_eq!(c.frames, out.tokens.len());
        assert_eq!(c.extensions, c.frames);
        assert_eq!(c.cfm_evals, c.frames * 8 * per_eval);
        assert_eq!(out.embeddings.nrows(), out.tokens.len());
        assert_eq!(out.prompt_len, 3);
    }
}

#[test]
fn zero_guidance_equals_the_conditional_field_alone() {
    let m = model(&tiny_model(InputMode::Vector, true), 2);
    let ctx = m.start().context().to_owned();
    let tokens = [5u16];
    let gen = GenerationConfig {
        cfg_scale: 0.0,
        ..fast_gen()
    };
    let got = generate_frame(&m, ctx.view(), &tokens, &gen, &mut ChaCha8Rng::seed_from_u64(9), &mut Counters::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x0: Vec<f32> = sample_prior(16, gen.prior_temperature, &mut rng);
    let want = ode_sample(
        |t, x: &[f32]| {
            let q = CfmQuery {
                xt: x,
                t: t as f64,
                context: ctx.view(),
                tokens: &tokens,
                drop: false,
            };
            Ok(m.cfm_field(&[q])?.row(0).to_vec())
        },
        &x0,
        gen.solver,
    )
    .unwrap();
    assert!(got.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn max_frames_bounds_output_and_zero_is_rejected() {
    let m = model(&tiny_model(InputMode::Vector, true), 3);
    let corpus = toy_corpus(1);
    let prompt = SeqRef::from(&corpus[0]);
    let gen = GenerationConfig {
        max_frames: 1,
        silence_penalty: 0.0,
        ..fast_gen()
    };
    let out = continue_prompt(&m, prompt, &gen, FrameSource::FlowHead, &mut ChaCha8Rng::seed_from_u64(0), &mut Counters::default()).unwrap();
    assert_eq!(out.tokens.len(), 1);
    assert_eq!(out.embeddings.dim(), (1, 16));
    assert!(out.tokens[0] == tokflow::corpus::EOS || out.stopped_by == StopReason::MaxFrames);
    let zero = GenerationConfig {
        max_frames: 0,
        ..gen
    };
    assert!(continue_prompt(&m, prompt, &zero, FrameSource::FlowHead, &mut ChaCha8Rng::seed_from_u64(0), &mut Counters::default()).is_err());
}

#[test]
fn flow_source_needs_a_flow_head() {
    let m = model(&tiny_model(InputMode::Token, false), 3);
    let corpus = toy_corpus(1);
    let r = continue_prompt(&m, (&corpus[0]).into(), &fast_gen(), FrameSource::FlowHead, &mut ChaCha8Rng::seed_from_u64(0), &mut Counters::default());
    assert!(r.is_err());
}

#[test]
fn generation_is_deterministic() {
    let m = model(&tiny_model(InputMode::Vector, true), 4);
    let corpus = toy_corpus(1);
    let run = || {
        continue_prompt(&m, (&corpus[0]).into(), &fast_gen(), FrameSource::FlowHead, &mut ChaCha8Rng::seed_from_u64(12), &mut Counters::default()).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn untrained_model_tokens_follow_its_softmax() {
    let cfg = tiny_model(InputMode::Token, false);
    let m = model(&cfg, 5);
    let render = toy_render(16);
    let logits = m.sem_logits(m.start().context());
    let row = logits.row(0).mapv(|v| v as f64);
    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let p: Vec<f64> = row.iter().map(|v| (v - max).exp() / z).collect();

    let gen = GenerationConfig {
        top_p: 1.0,
        silence_penalty: 0.0,
        max_frames: 200,
        ..fast_gen()
    };
    let corpus = toy_corpus(1);
    let prompt = SeqRef {
        tokens: &corpus[0].tokens[..1],
        frames: corpus[0].embeddings.slice(s![..1, ..]),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut counts = vec![0usize; cfg.vocab_size];
    // exact oracle: softmax averaged over the contexts actually visited
    let mut visited = vec![0.0f64; cfg.vocab_size];
    let mut n = 0;
    while n < 10_000 {
        let out = continue_prompt(&m, prompt, &gen, FrameSource::BlindRender(&render), &mut rng, &mut Counters::default()).unwrap();
        for &t in &out.tokens {
            counts[t as usize] += 1;
        }
        let tokens: Vec<u16> = prompt.tokens.iter().chain(&out.tokens).copied().collect();
        let frames = ndarray::concatenate![ndarray::Axis(0), prompt.frames, out.embeddings.view()];
        let ctx = m.contexts(SeqRef { tokens: &tokens, frames: frames.view() }).unwrap();
        for i in 0..out.tokens.len() {
            let l = m.sem_logits(ctx.row(prompt.tokens.len() + i)).row(0).mapv(|v| v as f64);
            let mx = l.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = l.iter().map(|v| (v - mx).exp()).sum();
            visited.iter_mut().zip(l.iter()).for_each(|(acc, v)| *acc += (v - mx).exp() / z);
        }
        n += out.tokens.len();
    }
    let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let tv = |q: &[f64], scale: f64| 0.5 * empirical.iter().zip(q).map(|(e, q)| (e - q / scale).abs()).sum::<f64>();
    let (tv_bos, tv_visited) = (tv(&p, 1.0), tv(&visited, n as f64));
    eprintln!("TV vs start softmax {tv_bos:.4}, vs visited contexts {tv_visited:.4}, {n} tokens");
    assert!(tv_bos < 0.05);
    assert!(tv_visited < 0.03);
}

#[test]
fn silence_fraction_non_increasing_in_penalty() {
    let m = model(&tiny_model(InputMode::Token, false), 6);
    let render = toy_render(16);
    let corpus = toy_corpus(1);
    let prompt = SeqRef::from(&corpus[0]);
    let frac = |penalty: f64| {
        let gen = GenerationConfig {
            silence_penalty: penalty,
            max_frames: 40,
            ..fast_gen()
        };
        let (mut sil, mut n) = (0, 0);
        for i in 0..200 {
            let out = continue_prompt(&m, prompt, &gen, FrameSource::BlindRender(&render), &mut ChaCha8Rng::seed_from_u64(i), &mut Counters::default()).unwrap();
            sil += out.tokens.iter().filter(|&&t| t == SILENCE).count();
            n += out.tokens.len();
        }
        sil as f64 / n as f64
    };
    let f: Vec<f64> = [0.0, 5.0, 10.0].iter().map(|&p| frac(p)).collect();
    assert!(f[0] >= f[1] && f[1] >= f[2], "{f:?}");
    assert!(f[0] > f[2]);
}

#[test]
fn blind_render_frames_match_token_count() {
    let m = model(&tiny_model(InputMode::Token, false), 7);
    let render = toy_render(16);
    let corpus = toy_corpus(1);
    let out = continue_prompt(&m, (&corpus[0]).into(), &fast_gen(), FrameSource::BlindRender(&render), &mut ChaCha8Rng::seed_from_u64(1), &mut Counters::default()).unwrap();
    assert_eq!(out.embeddings.dim(), (out.tokens.len(), 16));
}

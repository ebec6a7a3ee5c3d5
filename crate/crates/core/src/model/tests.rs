use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;

fn tiny(mode: InputMode, k: usize, cfm: bool) -> ModelConfig {
    ModelConfig {
        input_mode: mode,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        k_future: k,
        cfm_enabled: cfm,
        cfm_blocks: 2,
        cfm_hidden: 24,
        vocab_size: 11,
        embed_dim: 6,
        time_embed_dim: 8,
        cond_dropout_p: 0.3,
        sigma_min: 1e-5,
    }
}

struct Seq {
    tokens: Vec<u16>,
    frames: Array2<f32>,
}

impl Seq {
    fn view(&self) -> SeqRef<'_> {
        SeqRef {
            tokens: &self.tokens,
            frames: self.frames.view(),
        }
    }
}

fn random_seq(len: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Seq {
    Seq {
        tokens: (0..len).map(|_| rng.gen_range(0..cfg.vocab_size as u16)).collect(),
        frames: Array2::from_shape_fn((len, cfg.embed_dim), |_| rng.sample::<f32, _>(StandardNormal)),
    }
}

/// Larger-than-init weights so that gradients and causality checks are not
/// dominated by near-zero activations.
fn model(cfg: &ModelConfig, seed: u64) -> Model<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Model::<f64>::init(cfg, &mut rng).unwrap();
    for p in m.params_mut() {
        p.mapv_inplace(|v| v * 10.0 + 0.05 * rng.sample::<f64, _>(StandardNormal));
    }
    m
}

#[test]
fn init_cross_entropy_is_near_uniform() {
    let cfg = ModelConfig {
        vocab_size: 64,
        embed_dim: 32,
        d_model: 64,
        ..tiny(InputMode::Vector, 2, false)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = Model::<f64>::init(&cfg, &mut rng).unwrap();
    let seqs: Vec<Seq> = (0..4).map(|_| random_seq(30, &cfg, &mut rng)).collect();
    let refs: Vec<SeqRef> = seqs.iter().map(Seq::view).collect();
    let loss = m.loss_forward(&refs, &m.sample_draws(&refs, &mut rng)).unwrap();
    let uniform = 64f64.ln();
    assert!(loss.sem_loss > 0.95 * uniform && loss.sem_loss < 1.05 * uniform, "{}", loss.sem_loss);
}

#[test]
fn invalid_configs_rejected() {
    let mut c = tiny(InputMode::Vector, 1, true);
    c.n_heads = 3;
    assert!(c.validate().is_err());
    let mut c = tiny(InputMode::Vector, 1, true);
    c.k_future = 0;
    assert!(c.validate().is_err());
    let mut c = tiny(InputMode::Vector, 1, true);
    c.cond_dropout_p = 1.5;
    assert!(c.validate().is_err());
}

#[test]
fn contexts_are_strictly_causal() {
    for mode in [InputMode::Vector, InputMode::Token] {
        let cfg = tiny(mode, 1, false);
        let m = model(&cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_seq(12, &cfg, &mut rng);
        let base = m.contexts(a.view()).unwrap();
        for j in 0..12 {
            let mut b = Seq {
                tokens: a.tokens.clone(),
                frames: a.frames.clone(),
            };
            b.tokens[j] = (b.tokens[j] + 1) % cfg.vocab_size as u16;
            b.frames.row_mut(j).mapv_inplace(|v| v + 1.0);
            let c = m.contexts(b.view()).unwrap();
            for r in 0..12 {
                let diff = (&c.row(r) - &base.row(r)).mapv(f64::abs).sum();
                if r <= j {
                    assert_eq!(diff, 0.0, "row {r} changed after perturbing frame {j}");
                } else if r == j + 1 {
                    assert!(diff > 0.0);
                }
            }
        }
    }
}

#[test]
fn first_context_is_the_bos_state() {
    let cfg = tiny(InputMode::Vector, 1, false);
    let m = model(&cfg, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = m.contexts(random_seq(1, &cfg, &mut rng).view()).unwrap();
    let b = m.contexts(random_seq(1, &cfg, &mut rng).view()).unwrap();
    assert_eq!(a, b);
    let diff = (&a.row(0) - &m.start().context()).mapv(f64::abs).sum();
    assert!(diff < 1e-10);
}

#[test]
fn shared_prefix_gives_shared_contexts() {
    let cfg = tiny(InputMode::Token, 1, false);
    let m = model(&cfg, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random_seq(10, &cfg, &mut rng);
    let mut b = random_seq(14, &cfg, &mut rng);
    b.tokens[..6].copy_from_slice(&a.tokens[..6]);
    b.frames.slice_mut(s![..6, ..]).assign(&a.frames.slice(s![..6, ..]));
    let ca = m.contexts(a.view()).unwrap();
    let cb = m.contexts(b.view()).unwrap();
    assert_eq!(ca.slice(s![..7, ..]), cb.slice(s![..7, ..]));
}

#[test]
fn incremental_decoding_matches_full_forward() {
    for mode in [InputMode::Vector, InputMode::Token] {
        let cfg = tiny(mode, 2, true);
        let m = model(&cfg, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_seq(15, &cfg, &mut rng);
        let full = m.contexts(a.view()).unwrap();
        let mut st = m.start();
        for r in 0..15 {
            let diff = (&full.row(r) - &st.context()).mapv(f64::abs).fold(0.0, |x: f64, &y| x.max(y));
            assert!(diff < 1e-10, "{mode:?} row {r}: {diff}");
            m.extend(&mut st, a.tokens[r], a.frames.row(r)).unwrap();
        }
        assert_eq!(st.extensions, 16);
        assert_eq!(st.frames, 15);
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let cfg = tiny(InputMode::Vector, 2, true);
    let m = model(&cfg, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let seqs: Vec<Seq> = [7, 4, 9].iter().map(|&n| random_seq(n, &cfg, &mut rng)).collect();
    let refs: Vec<SeqRef> = seqs.iter().map(Seq::view).collect();
    let draws = m.sample_draws(&refs, &mut rng);
    assert!(draws.drop.iter().any(|&d| d) && draws.drop.iter().any(|&d| !d));
    let (_, grads) = m.grad(&refs, &draws).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..60 {
        let p = rng.gen_range(0..m.n_params());
        let (r, c) = m.params()[p].dim();
        let idx = (rng.gen_range(0..r), rng.gen_range(0..c));
        let eval = |delta: f64| {
            let mut mm = m.clone();
            mm.params_mut()[p][idx] += delta;
            mm.loss_forward(&refs, &draws).unwrap().total
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let g = grads[p][idx];
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-3);
        worst = worst.max(rel);
        assert!(rel < 1e-4, "{}[{idx:?}]: analytic {g}, numeric {fd}", m.names()[p]);
    }
    assert!(worst < 1e-4);
}

#[test]
fn disabled_cfm_contributes_nothing() {
    let cfg = tiny(InputMode::Vector, 1, false);
    let m = model(&cfg, 12);
    assert!(m.names().iter().all(|n| !n.starts_with("cfm.")));
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = random_seq(8, &cfg, &mut rng);
    let refs = [a.view()];
    let loss = m.loss_forward(&refs, &m.sample_draws(&refs, &mut rng)).unwrap();
    assert_eq!(loss.cfm_loss, 0.0);
    assert_eq!(loss.total, loss.sem_loss);
    assert!(m.cfm_field(&[]).is_err());
}

#[test]
fn heads_without_targets_get_zero_gradient() {
    let cfg = tiny(InputMode::Token, 2, false);
    let m = model(&cfg, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let a = random_seq(1, &cfg, &mut rng);
    let refs = [a.view()];
    let (_, g) = m.grad(&refs, &m.sample_draws(&refs, &mut rng)).unwrap();
    let w1 = m.param_index("sem.1.w").unwrap();
    assert!(g[w1].iter().all(|&v| v == 0.0));
    let w0 = m.param_index("sem.0.w").unwrap();
    assert!(g[w0].iter().any(|&v| v != 0.0));
}

#[test]
fn sem_loss_analytic_values() {
    let cfg = tiny(InputMode::Vector, 2, false);
    let mut m = model(&cfg, 16);
    let v = cfg.vocab_size as f64;
    for name in ["sem.0.w", "sem.0.b", "sem.1.w", "sem.1.b"] {
        let i = m.param_index(name).unwrap();
        m.params_mut()[i].fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut a = random_seq(9, &cfg, &mut rng);
    let refs = [a.view()];
    let none = m.sample_draws(&refs, &mut rng);
    let loss = m.loss_forward(&refs, &none).unwrap();
    assert!((loss.sem_loss - v.ln()).abs() < 1e-12);
    // head 0 certain of the (constant) token, head 1 uniform
    a.tokens.fill(5);
    let b0 = m.param_index("sem.0.b").unwrap();
    m.params_mut()[b0][(0, 5)] = 200.0;
    let loss = m.loss_forward(&[a.view()], &none).unwrap();
    assert!((loss.sem_loss - v.ln() / 2.0).abs() < 1e-12);
}

#[test]
fn token_mode_k1_matches_reference_next_token_ce() {
    let cfg = tiny(InputMode::Token, 1, false);
    let m = model(&cfg, 18);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let seqs: Vec<Seq> = [6, 11].iter().map(|&n| random_seq(n, &cfg, &mut rng)).collect();
    let refs: Vec<SeqRef> = seqs.iter().map(Seq::view).collect();
    let loss = m.loss_forward(&refs, &m.sample_draws(&refs, &mut rng)).unwrap();
    let w = &m.params()[m.param_index("sem.0.w").unwrap()];
    let b = &m.params()[m.param_index("sem.0.b").unwrap()];
    let (mut total, mut count) = (0.0, 0.0);
    for s in &seqs {
        let ctx = m.contexts(s.view()).unwrap();
        for (r, &z) in s.tokens.iter().enumerate() {
            let logits: Vec<f64> = (0..cfg.vocab_size)
                .map(|j| (0..cfg.d_model).map(|i| ctx[(r, i)] * w[(i, j)]).sum::<f64>() + b[(0, j)])
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
            total += lse - logits[z as usize];
            count += 1.0;
        }
    }
    assert!((loss.sem_loss - total / count).abs() < 1e-10);
}

#[test]
fn hard_wired_mean_field_loss_is_target_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x1 = Array2::from_shape_fn((50, 4), |_| rng.sample::<f64, _>(StandardNormal) + 3.0);
    let draws = NoiseDraws::sample(&[50], 4, 0.0, &mut rng);
    let (_, u) = flow_batch(&x1, &draws, 0.0);
    let mean = x1.mean_axis(Axis(0)).unwrap();
    let mut loss = 0.0;
    let mut var = 0.0;
    for r in 0..50 {
        let pred: Vec<f64> = (0..4).map(|j| mean[j] - draws.x0[(r, j)]).collect();
        loss += crate::flow::cfm_loss(&pred, u.row(r).as_slice().unwrap()).unwrap();
        var += (0..4).map(|j| (x1[(r, j)] - mean[j]).powi(2)).sum::<f64>();
    }
    assert!((loss - var).abs() < 1e-9 * var);
}

#[test]
fn flow_batch_matches_flow_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x1 = Array2::from_shape_fn((5, 3), |_| rng.sample::<f64, _>(StandardNormal));
    let draws = NoiseDraws::sample(&[5], 3, 0.0, &mut rng);
    let (xt, u) = flow_batch(&x1, &draws, 1e-5);
    for r in 0..5 {
        let p = crate::flow::FlowPoint::new(draws.t[r], draws.x0.row(r).to_vec(), x1.row(r).to_vec(), 1e-5).unwrap();
        for j in 0..3 {
            assert!((p.xt[j] - xt[(r, j)]).abs() < 1e-14);
            assert!((p.ut[j] - u[(r, j)]).abs() < 1e-14);
        }
    }
}

#[test]
fn duplicated_batch_gives_same_losses() {
    let cfg = tiny(InputMode::Vector, 2, true);
    let m = model(&cfg, 22);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let seqs: Vec<Seq> = [5, 8].iter().map(|&n| random_seq(n, &cfg, &mut rng)).collect();
    let refs: Vec<SeqRef> = seqs.iter().map(Seq::view).collect();
    let draws = m.sample_draws(&refs, &mut rng);
    let once = m.loss_forward(&refs, &draws).unwrap();
    let doubled: Vec<SeqRef> = refs.iter().chain(&refs).copied().collect();
    let twice = m.loss_forward(&doubled, &NoiseDraws::concat(&[&draws, &draws])).unwrap();
    for (a, b) in [
        (once.sem_loss, twice.sem_loss),
        (once.cfm_loss, twice.cfm_loss),
        (once.total, twice.total),
    ] {
        assert!((a - b).abs() <= 1e-12 * a.abs());
    }
}

#[test]
fn full_dropout_severs_conditioning() {
    let cfg = ModelConfig {
        cond_dropout_p: 1.0,
        ..tiny(InputMode::Vector, 2, true)
    };
    let m = model(&cfg, 24);
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let a = random_seq(9, &cfg, &mut rng);
    let draws = m.sample_draws(&[a.view()], &mut rng);
    let base = m.loss_forward(&[a.view()], &draws).unwrap();
    let mut b = Seq {
        tokens: a.tokens.clone(),
        frames: a.frames.clone(),
    };
    b.tokens.iter_mut().for_each(|t| *t = rng.gen_range(0..cfg.vocab_size as u16));
    let other = m.loss_forward(&[b.view()], &draws).unwrap();
    assert_eq!(base.cfm_loss, other.cfm_loss);
}

#[test]
fn dropped_query_ignores_conditioning() {
    let cfg = tiny(InputMode::Vector, 2, true);
    let m = model(&cfg, 26);
    let xt = vec![0.3; cfg.embed_dim];
    let c1 = ndarray::Array1::from_elem(cfg.d_model, 1.0);
    let c2 = ndarray::Array1::from_elem(cfg.d_model, -2.0);
    let mk = |ctx: &ndarray::Array1<f64>, toks: &[u16], drop: bool| {
        let query = CfmQuery {
            xt: &xt,
            t: 0.4,
            context: ctx.view(),
            tokens: toks,
            drop,
        };
        m.cfm_field(&[query]).unwrap()
    };
    let a = mk(&c1, &[1, 2], true);
    let b = mk(&c2, &[7, 3], true);
    assert_eq!(a, b);
    assert_eq!(a.dim(), (1, cfg.embed_dim));
    assert_ne!(mk(&c1, &[1, 2], false), mk(&c2, &[7, 3], false));
    assert_eq!(mk(&c1, &[1, 2], false), mk(&c1, &[1, 2], false));
}

#[test]
fn checkpoint_round_trip_and_version_check() {
    let cfg = tiny(InputMode::Token, 2, true);
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let m = Model::<f32>::init(&cfg, &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    let extra = vec![("adam.m.0".to_string(), Array2::from_elem((2, 3), 0.5f32))];
    let ck = m.to_checkpoint(extra, serde_json::json!({"step": 7}));
    save_checkpoint(&p, &ck).unwrap();
    let back = load_checkpoint(&p).unwrap();
    assert_eq!(back, ck);
    let m2 = Model::from_checkpoint(&back).unwrap();
    assert_eq!(m2.params(), m.params());

    let mut bytes = std::fs::read(&p).unwrap();
    bytes[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    std::fs::write(&p, &bytes).unwrap();
    let err = load_checkpoint(&p).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");
}

#[test]
fn bad_inputs_are_contract_errors() {
    let cfg = tiny(InputMode::Token, 1, false);
    let m = model(&cfg, 28);
    assert!(matches!(m.contexts(SeqRef { tokens: &[], frames: Array2::<f32>::zeros((0, 6)).view() }), Err(Error::Contract(_))));
    let f = Array2::<f32>::zeros((2, 6));
    assert!(matches!(m.contexts(SeqRef { tokens: &[1, 99], frames: f.view() }), Err(Error::Contract(_))));
    assert!(matches!(m.loss_forward(&[], &m.sample_draws(&[], &mut ChaCha8Rng::seed_from_u64(0))), Err(Error::Contract(_))));
}

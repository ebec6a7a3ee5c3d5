//! Causal transformer over past frames, `k` next-token heads, and a
//! conditional flow-matching head for the next continuous frame.
//!
//! Row `m` of the transformer input is a learned begin-of-sequence vector for
//! `m = 0` and the encoding of frame `m - 1` otherwise, so output row `m` is
//! the context `c_{<m}` used to predict token `z_m` (head 0), `z_{m+i}`
//! (head `i`), and frame `x_m`.

mod checkpoint;
mod config;
mod infer;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{InputMode, ModelConfig};
pub use infer::{CfmQuery, ContextState};

use crate::autodiff::{RowMix, Tape, Var};
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Borrowed view of one training or scoring sequence.
#[derive(Debug, Clone, Copy)]
pub struct SeqRef<'b> {
    pub tokens: &'b [u16],
    /// `M × embed_dim`.
    pub frames: ArrayView2<'b, f32>,
}

impl<'b> From<&'b Utterance> for SeqRef<'b> {
    fn from(u: &'b Utterance) -> Self {
        Self {
            tokens: &u.tokens,
            frames: u.embeddings.view(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub sem_loss: f64,
    pub cfm_loss: f64,
    pub total: f64,
}

/// Random draws for the flow-matching term, one row per frame of the packed
/// batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraws {
    pub t: Vec<f64>,
    /// `N × embed_dim`.
    pub x0: Array2<f64>,
    pub drop: Vec<bool>,
}

impl NoiseDraws {
    /// Draws per sequence in batch order: times, then prior samples, then
    /// dropout flags.
    pub fn sample<R: Rng + ?Sized>(lengths: &[usize], embed_dim: usize, dropout_p: f64, rng: &mut R) -> Self {
        let n: usize = lengths.iter().sum();
        let mut t = Vec::with_capacity(n);
        let mut x0 = Array2::zeros((n, embed_dim));
        let mut drop = Vec::with_capacity(n);
        let mut row = 0;
        for &len in lengths {
            t.extend((0..len).map(|_| rng.gen::<f64>()));
            for r in row..row + len {
                for j in 0..embed_dim {
                    x0[(r, j)] = StandardNormal.sample(rng);
                }
            }
            drop.extend((0..len).map(|_| rng.gen::<f64>() < dropout_p));
            row += len;
        }
        Self { t, x0, drop }
    }

    /// Draws for the concatenation of the batches behind `parts`.
    pub fn concat(parts: &[&NoiseDraws]) -> Self {
        let views: Vec<_> = parts.iter().map(|p| p.x0.view()).collect();
        Self {
            t: parts.iter().flat_map(|p| p.t.iter().copied()).collect(),
            x0: ndarray::concatenate(Axis(0), &views).expect("matching widths"),
            drop: parts.iter().flat_map(|p| p.drop.iter().copied()).collect(),
        }
    }
}

/// Interpolants and regression targets of the OT path for a packed batch.
pub fn flow_batch<F: Scalar>(frames: &Array2<F>, draws: &NoiseDraws, sigma_min: f64) -> (Array2<F>, Array2<F>) {
    let keep_x0 = F::one() - F::of(sigma_min);
    let mut xt = Array2::zeros(frames.raw_dim());
    let mut u = Array2::zeros(frames.raw_dim());
    for (r, &t) in draws.t.iter().enumerate() {
        let t = F::of(t);
        let a = F::one() - keep_x0 * t;
        for j in 0..frames.ncols() {
            let x0 = F::of(draws.x0[(r, j)]);
            let x1 = frames[(r, j)];
            xt[(r, j)] = t * x1 + a * x0;
            u[(r, j)] = x1 - keep_x0 * x0;
        }
    }
    (xt, u)
}

/// `[sin(1000·t·w_i), cos(1000·t·w_i)]` with geometric frequencies.
pub fn time_embedding<F: Scalar>(t: &[f64], dim: usize) -> Array2<F> {
    let half = dim / 2;
    Array2::from_shape_fn((t.len(), dim), |(r, j)| {
        let i = j % half.max(1);
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let arg = 1000.0 * t[r] * freq;
        F::of(if j < half { arg.sin() } else { arg.cos() })
    })
}

/// Sinusoidal encoding of sequence positions.
pub fn position_encoding<F: Scalar>(positions: impl Iterator<Item = usize>, dim: usize) -> Array2<F> {
    let pos: Vec<usize> = positions.collect();
    Array2::from_shape_fn((pos.len(), dim), |(r, j)| {
        let i = j / 2;
        let angle = pos[r] as f64 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
        F::of(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct BlockIds {
    ln1: Norm,
    qkv: Affine,
    out: Affine,
    ln2: Norm,
    fc: Affine,
    proj: Affine,
}

#[derive(Debug, Clone)]
struct CfmBlockIds {
    ln: Norm,
    fc1: Affine,
    fc2: Affine,
}

#[derive(Debug, Clone)]
struct CfmIds {
    tok_embed: usize,
    null_ctx: usize,
    null_tok: usize,
    input: Affine,
    blocks: Vec<CfmBlockIds>,
    ln_out: Norm,
    out: Affine,
}

#[derive(Debug, Clone)]
enum InputIds {
    Proj(Affine),
    Embed(usize),
}

#[derive(Debug, Clone)]
struct Layout {
    input: InputIds,
    bos: usize,
    blocks: Vec<BlockIds>,
    ln_f: Norm,
    sem: Vec<Affine>,
    cfm: Option<CfmIds>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

struct Builder<'r, R: Rng + ?Sized> {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
    rng: Option<&'r mut R>,
    tensors: Vec<Array2<f64>>,
}

const INIT_STD: f64 = 0.02;

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn add(&mut self, name: impl Into<String>, shape: (usize, usize), init: Init) -> usize {
        self.names.push(name.into());
        self.shapes.push(shape);
        self.inits.push(init);
        if let Some(rng) = self.rng.as_deref_mut() {
            let t = match init {
                Init::Zeros => Array2::zeros(shape),
                Init::Ones => Array2::ones(shape),
                Init::Normal => Array2::from_shape_fn(shape, |_| loop {
                    let z: f64 = StandardNormal.sample(rng);
                    if z.abs() <= 2.0 {
                        break INIT_STD * z;
                    }
                }),
            };
            self.tensors.push(t);
        }
        self.names.len() - 1
    }

    fn affine(&mut self, name: &str, fan_in: usize, fan_out: usize, w_init: Init) -> Affine {
        Affine {
            w: self.add(format!("{name}.w"), (fan_in, fan_out), w_init),
            b: self.add(format!("{name}.b"), (1, fan_out), Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            g: self.add(format!("{name}.g"), (1, dim), Init::Ones),
            b: self.add(format!("{name}.b"), (1, dim), Init::Zeros),
        }
    }
}

fn build_layout<R: Rng + ?Sized>(c: &ModelConfig, b: &mut Builder<'_, R>) -> Layout {
    let d = c.d_model;
    let input = match c.input_mode {
        InputMode::Vector => InputIds::Proj(b.affine("input.proj", c.embed_dim, d, Init::Normal)),
        InputMode::Token => InputIds::Embed(b.add("input.embed", (c.vocab_size, d), Init::Normal)),
    };
    let bos = b.add("bos", (1, d), Init::Normal);
    let blocks = (0..c.n_layers)
        .map(|l| BlockIds {
            ln1: b.norm(&format!("blocks.{l}.ln1"), d),
            qkv: b.affine(&format!("blocks.{l}.attn.qkv"), d, 3 * d, Init::Normal),
            out: b.affine(&format!("blocks.{l}.attn.out"), d, d, Init::Normal),
            ln2: b.norm(&format!("blocks.{l}.ln2"), d),
            fc: b.affine(&format!("blocks.{l}.mlp.fc"), d, 4 * d, Init::Normal),
            proj: b.affine(&format!("blocks.{l}.mlp.proj"), 4 * d, d, Init::Normal),
        })
        .collect();
    let ln_f = b.norm("ln_f", d);
    let sem = (0..c.k_future)
        .map(|i| b.affine(&format!("sem.{i}"), d, c.vocab_size, Init::Normal))
        .collect();
    let cfm = c.cfm_enabled.then(|| {
        let h = c.cfm_hidden;
        let in_dim = c.embed_dim + c.time_embed_dim + 2 * d;
        CfmIds {
            tok_embed: b.add("cfm.tok_embed", (c.k_future * (c.vocab_size + 1), d), Init::Normal),
            null_ctx: b.add("cfm.null_ctx", (1, d), Init::Normal),
            null_tok: b.add("cfm.null_tok", (1, d), Init::Normal),
            input: b.affine("cfm.in", in_dim, h, Init::Normal),
            blocks: (0..c.cfm_blocks)
                .map(|j| CfmBlockIds {
                    ln: b.norm(&format!("cfm.blocks.{j}.ln"), h),
                    fc1: b.affine(&format!("cfm.blocks.{j}.fc1"), h, h, Init::Normal),
                    fc2: b.affine(&format!("cfm.blocks.{j}.fc2"), h, h, Init::Normal),
                })
                .collect(),
            ln_out: b.norm("cfm.ln_out", h),
            // zero output layer: the initial field is identically zero
            out: b.affine("cfm.out", h, c.embed_dim, Init::Zeros),
        }
    });
    Layout {
        input,
        bos,
        blocks,
        ln_f,
        sem,
        cfm,
    }
}

#[derive(Debug, Clone)]
pub struct Model<F: Scalar> {
    pub config: ModelConfig,
    names: Vec<String>,
    layout: Layout,
    params: Vec<Array2<F>>,
}

/// Packed batch: row offsets and the teacher-forcing inputs.
struct Packed<F> {
    segments: Vec<(usize, usize)>,
    tokens: Vec<u16>,
    frames: Array2<F>,
}

fn pack<F: Scalar>(seqs: &[SeqRef<'_>], embed_dim: usize, vocab: usize) -> Result<Packed<F>> {
    if seqs.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let n: usize = seqs.iter().map(|s| s.tokens.len()).sum();
    let mut frames = Array2::zeros((n, embed_dim));
    let mut tokens = Vec::with_capacity(n);
    let mut segments = Vec::with_capacity(seqs.len());
    let mut row = 0;
    for (i, s) in seqs.iter().enumerate() {
        let m = s.tokens.len();
        if m == 0 {
            return Err(Error::contract(format!("sequence {i} is empty")));
        }
        if s.frames.dim() != (m, embed_dim) {
            return Err(Error::contract(format!(
                "sequence {i}: frames {:?} do not match {m} tokens × embed_dim {embed_dim}",
                s.frames.dim()
            )));
        }
        if let Some(&t) = s.tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::contract(format!("sequence {i}: token {t} outside vocabulary")));
        }
        frames
            .slice_mut(ndarray::s![row..row + m, ..])
            .assign(&s.frames.mapv(|v| F::of(v as f64)));
        tokens.extend_from_slice(s.tokens);
        segments.push((row, m));
        row += m;
    }
    Ok(Packed {
        segments,
        tokens,
        frames,
    })
}

impl<F: Scalar> Model<F> {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            names: Vec::new(),
            shapes: Vec::new(),
            inits: Vec::new(),
            rng: Some(rng),
            tensors: Vec::new(),
        };
        let layout = build_layout(config, &mut b);
        Ok(Self {
            config: config.clone(),
            names: b.names,
            layout,
            params: b.tensors.into_iter().map(|t| t.mapv(F::of)).collect(),
        })
    }

    /// Parameter names and shapes implied by `config`, in storage order.
    pub fn param_shapes(config: &ModelConfig) -> Vec<(String, (usize, usize))> {
        let mut b = Builder::<rand_chacha::ChaCha8Rng> {
            names: Vec::new(),
            shapes: Vec::new(),
            inits: Vec::new(),
            rng: None,
            tensors: Vec::new(),
        };
        build_layout(config, &mut b);
        b.names.into_iter().zip(b.shapes).collect()
    }

    pub fn from_params(config: &ModelConfig, params: Vec<Array2<F>>) -> Result<Self> {
        config.validate()?;
        let shapes = Self::param_shapes(config);
        if shapes.len() != params.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in shapes.iter().zip(&params) {
            if p.dim() != *shape {
                return Err(Error::contract(format!("{name}: shape {:?}, expected {shape:?}", p.dim())));
            }
        }
        let mut b = Builder::<rand_chacha::ChaCha8Rng> {
            names: Vec::new(),
            shapes: Vec::new(),
            inits: Vec::new(),
            rng: None,
            tensors: Vec::new(),
        };
        let layout = build_layout(config, &mut b);
        Ok(Self {
            config: config.clone(),
            names: b.names,
            layout,
            params,
        })
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            names: self.names.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|p| p.mapv(|v| G::of(v.f64()))).collect(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Array2<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array2<F>] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn p<'a>(&'a self, tape: &mut Tape<'a, F>, i: usize) -> Var {
        tape.param(i, &self.params[i])
    }

    fn affine<'a>(&'a self, tape: &mut Tape<'a, F>, x: Var, a: Affine) -> Var {
        let w = self.p(tape, a.w);
        let b = self.p(tape, a.b);
        tape.linear(x, w, Some(b))
    }

    fn norm<'a>(&'a self, tape: &mut Tape<'a, F>, x: Var, n: Norm) -> Var {
        let g = self.p(tape, n.g);
        let b = self.p(tape, n.b);
        tape.layer_norm(x, g, b)
    }

    /// Context vectors `c_{<m}` for every row of the packed batch.
    fn context_tape<'a>(&'a self, tape: &mut Tape<'a, F>, batch: &Packed<F>) -> Var {
        let n = batch.tokens.len();
        let first: Vec<bool> = {
            let mut v = vec![false; n];
            batch.segments.iter().for_each(|&(s, _)| v[s] = true);
            v
        };
        let h = match &self.layout.input {
            InputIds::Proj(a) => {
                let mut shifted = Array2::zeros(batch.frames.raw_dim());
                for &(s, m) in &batch.segments {
                    for r in 1..m {
                        shifted.row_mut(s + r).assign(&batch.frames.row(s + r - 1));
                    }
                }
                let x = tape.constant(shifted);
                self.affine(tape, x, *a)
            }
            InputIds::Embed(e) => {
                let table = self.p(tape, *e);
                let rows: RowMix<F> = (0..n)
                    .map(|r| {
                        if first[r] {
                            vec![]
                        } else {
                            vec![(batch.tokens[r - 1] as usize, F::one())]
                        }
                    })
                    .collect();
                tape.gather(table, rows)
            }
        };
        let bos = self.p(tape, self.layout.bos);
        let h = tape.replace_rows(h, bos, first);
        let positions = batch.segments.iter().flat_map(|&(_, m)| 0..m);
        let pe = tape.constant(position_encoding(positions, self.config.d_model));
        let mut h = tape.add(h, pe);
        for blk in &self.layout.blocks {
            let a = self.norm(tape, h, blk.ln1);
            let qkv = self.affine(tape, a, blk.qkv);
            let att = tape.causal_attention(qkv, self.config.n_heads, batch.segments.clone());
            let o = self.affine(tape, att, blk.out);
            h = tape.add(h, o);
            let a = self.norm(tape, h, blk.ln2);
            let f = self.affine(tape, a, blk.fc);
            let f = tape.gelu(f);
            let f = self.affine(tape, f, blk.proj);
            h = tape.add(h, f);
        }
        self.norm(tape, h, self.layout.ln_f)
    }

    /// Predicted field for rows `(xt, t, ctx, token mix, drop)`.
    fn cfm_tape<'a>(
        &'a self,
        tape: &mut Tape<'a, F>,
        xt: Var,
        t: &[f64],
        ctx: Var,
        tokens: RowMix<F>,
        drop: Vec<bool>,
    ) -> Result<Var> {
        let ids = self
            .layout
            .cfm
            .as_ref()
            .ok_or_else(|| Error::contract("model has no CFM head"))?;
        let table = self.p(tape, ids.tok_embed);
        let tok = tape.gather(table, tokens);
        let null_ctx = self.p(tape, ids.null_ctx);
        let null_tok = self.p(tape, ids.null_tok);
        let ctx = tape.replace_rows(ctx, null_ctx, drop.clone());
        let tok = tape.replace_rows(tok, null_tok, drop);
        let temb = tape.constant(time_embedding(t, self.config.time_embed_dim));
        let inp = tape.concat_cols(&[xt, temb, ctx, tok]);
        let mut h = self.affine(tape, inp, ids.input);
        for blk in &ids.blocks {
            let a = self.norm(tape, h, blk.ln);
            let a = self.affine(tape, a, blk.fc1);
            let a = tape.gelu(a);
            let a = self.affine(tape, a, blk.fc2);
            h = tape.add(h, a);
        }
        let h = self.norm(tape, h, ids.ln_out);
        Ok(self.affine(tape, h, ids.out))
    }

    /// Embedding rows for `z_{m..m+k-1}`: one table per offset, each with a
    /// trailing pad row for offsets past the end of the sequence.
    fn cond_row(&self, tokens: &[u16]) -> Vec<(usize, F)> {
        let stride = self.config.vocab_size + 1;
        (0..self.config.k_future)
            .map(|i| {
                let z = tokens.get(i).map_or(self.config.vocab_size, |&z| z as usize);
                (i * stride + z, F::one())
            })
            .collect()
    }

    fn lookahead_mix(&self, batch: &Packed<F>) -> RowMix<F> {
        let k = self.config.k_future;
        let mut rows = Vec::with_capacity(batch.tokens.len());
        for &(s, m) in &batch.segments {
            for r in 0..m {
                let avail = k.min(m - r);
                rows.push(self.cond_row(&batch.tokens[s + r..s + r + avail]));
            }
        }
        rows
    }

    fn loss_tape<'a>(
        &'a self,
        tape: &mut Tape<'a, F>,
        seqs: &[SeqRef<'_>],
        draws: Option<&NoiseDraws>,
    ) -> Result<(Var, Var, Option<Var>)> {
        let batch = pack::<F>(seqs, self.config.embed_dim, self.config.vocab_size)?;
        let ctx = self.context_tape(tape, &batch);
        let mut heads = Vec::new();
        for (i, a) in self.layout.sem.iter().enumerate() {
            let targets: Vec<Option<usize>> = batch
                .segments
                .iter()
                .flat_map(|&(s, m)| (0..m).map(move |r| (r + i < m).then(|| s + r + i)))
                .map(|o| o.map(|j| batch.tokens[j] as usize))
                .collect();
            if targets.iter().all(Option::is_none) {
                continue;
            }
            let logits = self.affine(tape, ctx, *a);
            heads.push(tape.cross_entropy(logits, targets));
        }
        let w = F::of(1.0 / heads.len() as f64);
        let terms: Vec<(Var, F)> = heads.iter().map(|&h| (h, w)).collect();
        let sem = tape.weighted_sum(&terms);
        let cfm = if self.config.cfm_enabled {
            let draws = draws.ok_or_else(|| Error::contract("CFM loss needs noise draws"))?;
            if draws.t.len() != batch.tokens.len() {
                return Err(Error::contract("noise draws do not match the batch"));
            }
            let (xt, u) = flow_batch(&batch.frames, draws, self.config.sigma_min);
            let xt = tape.constant(xt);
            let mix = self.lookahead_mix(&batch);
            let v = self.cfm_tape(tape, xt, &draws.t, ctx, mix, draws.drop.clone())?;
            Some(tape.sq_err(v, u))
        } else {
            None
        };
        let total = match cfm {
            Some(c) => tape.weighted_sum(&[(sem, F::one()), (c, F::one())]),
            None => tape.weighted_sum(&[(sem, F::one())]),
        };
        Ok((total, sem, cfm))
    }

    /// Noise draws matching `seqs` (empty when the CFM head is disabled).
    pub fn sample_draws<R: Rng + ?Sized>(&self, seqs: &[SeqRef<'_>], rng: &mut R) -> NoiseDraws {
        let lengths: Vec<usize> = seqs.iter().map(|s| s.tokens.len()).collect();
        if self.config.cfm_enabled {
            NoiseDraws::sample(&lengths, self.config.embed_dim, self.config.cond_dropout_p, rng)
        } else {
            NoiseDraws {
                t: vec![],
                x0: Array2::zeros((0, self.config.embed_dim)),
                drop: vec![],
            }
        }
    }

    fn breakdown(tape: &Tape<'_, F>, total: Var, sem: Var, cfm: Option<Var>) -> Result<LossBreakdown> {
        let out = LossBreakdown {
            sem_loss: tape.scalar(sem).f64(),
            cfm_loss: cfm.map_or(0.0, |c| tape.scalar(c).f64()),
            total: tape.scalar(total).f64(),
        };
        if !out.total.is_finite() {
            return Err(Error::Numerical {
                step: 0,
                msg: format!(
                    "non-finite loss (sem {}, cfm {}) over a batch of {} rows",
                    out.sem_loss,
                    out.cfm_loss,
                    tape.value(total).len()
                ),
            });
        }
        Ok(out)
    }

    pub fn loss_forward(&self, seqs: &[SeqRef<'_>], draws: &NoiseDraws) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let (total, sem, cfm) = self.loss_tape(&mut tape, seqs, Some(draws))?;
        Self::breakdown(&tape, total, sem, cfm)
    }

    /// Loss and the gradient of `total` for every parameter (zeros off the
    /// active path).
    pub fn grad(&self, seqs: &[SeqRef<'_>], draws: &NoiseDraws) -> Result<(LossBreakdown, Vec<Array2<F>>)> {
        let mut tape = Tape::new();
        let (total, sem, cfm) = self.loss_tape(&mut tape, seqs, Some(draws))?;
        let loss = Self::breakdown(&tape, total, sem, cfm)?;
        let grads = tape
            .backward(total, self.params.len())
            .into_iter()
            .zip(&self.params)
            .map(|(g, p)| g.unwrap_or_else(|| Array2::zeros(p.raw_dim())))
            .collect();
        Ok((loss, grads))
    }

    /// Teacher-forced context vectors of one sequence (`M × d_model`).
    pub fn contexts(&self, seq: SeqRef<'_>) -> Result<Array2<F>> {
        let batch = pack::<F>(&[seq], self.config.embed_dim, self.config.vocab_size)?;
        let mut tape = Tape::new();
        let c = self.context_tape(&mut tape, &batch);
        Ok(tape.value(c).clone())
    }

    /// `log P(z_m | c_{<m})` from head 0 at every position.
    pub fn token_logprobs(&self, seq: SeqRef<'_>) -> Result<Vec<f64>> {
        let ctx = self.contexts(seq)?;
        let a = self.layout.sem[0];
        let logits = ctx.dot(&self.params[a.w]) + &self.params[a.b].row(0);
        Ok(logits
            .rows()
            .into_iter()
            .zip(seq.tokens)
            .map(|(row, &z)| (row[z as usize] - crate::autodiff::log_sum_exp(row)).f64())
            .collect())
    }

    /// Logits of all `k` heads at context `c` (`k × vocab`).
    pub fn sem_logits(&self, ctx: ndarray::ArrayView1<'_, F>) -> Array2<F> {
        let mut out = Array2::zeros((self.config.k_future, self.config.vocab_size));
        for (i, a) in self.layout.sem.iter().enumerate() {
            let row = ctx.dot(&self.params[a.w]) + &self.params[a.b].row(0);
            out.row_mut(i).assign(&row);
        }
        out
    }

    /// Vector field for a batch of queries.
    pub fn cfm_field(&self, queries: &[CfmQuery<'_, F>]) -> Result<Array2<F>> {
        let d = self.config.embed_dim;
        let dm = self.config.d_model;
        let n = queries.len();
        let mut xt = Array2::zeros((n, d));
        let mut ctx = Array2::zeros((n, dm));
        let mut t = Vec::with_capacity(n);
        let mut mix = Vec::with_capacity(n);
        let mut drop = Vec::with_capacity(n);
        for (r, q) in queries.iter().enumerate() {
            if q.xt.len() != d || q.context.len() != dm {
                return Err(Error::contract("cfm query has wrong dimensions"));
            }
            if q.tokens.is_empty() && !q.drop {
                return Err(Error::contract("cfm query needs conditioning tokens"));
            }
            if q.tokens.len() > self.config.k_future {
                return Err(Error::contract("cfm query has more than k conditioning tokens"));
            }
            xt.row_mut(r).assign(&ndarray::ArrayView1::from(q.xt));
            ctx.row_mut(r).assign(&q.context);
            t.push(q.t);
            mix.push(self.cond_row(q.tokens));
            drop.push(q.drop);
        }
        let mut tape = Tape::new();
        let xt = tape.constant(xt);
        let ctx = tape.constant(ctx);
        let v = self.cfm_tape(&mut tape, xt, &t, ctx, mix, drop)?;
        Ok(tape.value(v).clone())
    }

    pub(crate) fn input_row(&self, token: u16, frame: ndarray::ArrayView1<'_, f32>) -> Array1<F> {
        match &self.layout.input {
            InputIds::Proj(a) => {
                let x = frame.mapv(|v| F::of(v as f64));
                x.dot(&self.params[a.w]) + &self.params[a.b].row(0)
            }
            InputIds::Embed(e) => self.params[*e].row(token as usize).to_owned(),
        }
    }
}

#[cfg(test)]
mod tests;

//! Incremental decoding with a per-layer key/value cache.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use super::{position_encoding, Affine, Model, Norm};
use crate::autodiff::{gelu, layer_norm_forward};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One row of a batched vector-field evaluation.
#[derive(Debug, Clone)]
pub struct CfmQuery<'q, F> {
    pub xt: &'q [F],
    pub t: f64,
    pub context: ArrayView1<'q, F>,
    /// Conditioning tokens `z_{m..m+k-1}`; missing trailing offsets are padded.
    pub tokens: &'q [u16],
    pub drop: bool,
}

/// Decoder state after consuming a prefix. `context()` is `c_{<m}` for the
/// next position `m`.
#[derive(Debug, Clone)]
pub struct ContextState<F: Scalar> {
    keys: Vec<Array2<F>>,
    values: Vec<Array2<F>>,
    context: Array1<F>,
    /// Frames consumed after the begin-of-sequence row.
    pub frames: usize,
    /// Transformer advances performed, begin-of-sequence included.
    pub extensions: usize,
}

impl<F: Scalar> ContextState<F> {
    pub fn context(&self) -> ArrayView1<'_, F> {
        self.context.view()
    }
}

fn row_affine<F: Scalar>(m: &Model<F>, x: &Array1<F>, a: Affine) -> Array1<F> {
    x.dot(&m.params[a.w]) + &m.params[a.b].row(0)
}

fn row_norm<F: Scalar>(m: &Model<F>, x: &Array1<F>, n: Norm) -> Array1<F> {
    let x2 = x.view().insert_axis(Axis(0));
    let (y, _, _) = layer_norm_forward(x2, m.params[n.g].row(0), m.params[n.b].row(0));
    y.row(0).to_owned()
}

impl<F: Scalar> Model<F> {
    /// State holding only the begin-of-sequence context `c_{<1}`.
    pub fn start(&self) -> ContextState<F> {
        let d = self.config.d_model;
        let mut state = ContextState {
            keys: vec![Array2::zeros((0, d)); self.layout.blocks.len()],
            values: vec![Array2::zeros((0, d)); self.layout.blocks.len()],
            context: Array1::zeros(d),
            frames: 0,
            extensions: 0,
        };
        let bos = self.params[self.layout.bos].row(0).to_owned();
        self.advance(&mut state, bos);
        state
    }

    /// Consume frame `m` (its token in token mode, its embedding in vector
    /// mode); afterwards `context()` is `c_{<m+1}`.
    pub fn extend(&self, state: &mut ContextState<F>, token: u16, frame: ArrayView1<'_, f32>) -> Result<()> {
        if frame.len() != self.config.embed_dim {
            return Err(Error::contract("frame width does not match embed_dim"));
        }
        if token as usize >= self.config.vocab_size {
            return Err(Error::contract(format!("token {token} outside vocabulary")));
        }
        let h = self.input_row(token, frame);
        self.advance(state, h);
        state.frames += 1;
        Ok(())
    }

    fn advance(&self, state: &mut ContextState<F>, input: Array1<F>) {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let pos = state.keys.first().map_or(0, |k| k.nrows());
        let pe = position_encoding::<F>(std::iter::once(pos), d);
        let mut h = input + &pe.row(0);
        for (l, blk) in self.layout.blocks.iter().enumerate() {
            let a = row_norm(self, &h, blk.ln1);
            let qkv = row_affine(self, &a, blk.qkv);
            state.keys[l].push_row(qkv.slice(s![d..2 * d])).unwrap();
            state.values[l].push_row(qkv.slice(s![2 * d..])).unwrap();
            let keys = &state.keys[l];
            let values = &state.values[l];
            let mut att = Array1::zeros(d);
            for hd in 0..heads {
                let cols = hd * dh..(hd + 1) * dh;
                let q = qkv.slice(s![cols.clone()]);
                let mut scores = keys.slice(s![.., cols.clone()]).dot(&q) * scale;
                let max = scores.fold(F::neg_infinity(), |a, &b| a.max(b));
                scores.mapv_inplace(|v| (v - max).exp());
                let sum = scores.sum();
                scores.mapv_inplace(|v| v / sum);
                att.slice_mut(s![cols.clone()])
                    .assign(&scores.dot(&values.slice(s![.., cols])));
            }
            h = h + row_affine(self, &att, blk.out);
            let a = row_norm(self, &h, blk.ln2);
            let f = row_affine(self, &a, blk.fc).mapv(gelu);
            h = h + row_affine(self, &f, blk.proj);
        }
        state.context = row_norm(self, &h, self.layout.ln_f);
        state.extensions += 1;
    }

    /// State after consuming every frame of a prompt.
    pub fn encode_prompt(&self, tokens: &[u16], frames: ndarray::ArrayView2<'_, f32>) -> Result<ContextState<F>> {
        if tokens.is_empty() {
            return Err(Error::contract("prompt must contain at least one frame"));
        }
        if frames.nrows() != tokens.len() {
            return Err(Error::contract("prompt tokens and frames differ in length"));
        }
        let mut state = self.start();
        for (z, x) in tokens.iter().zip(frames.rows()) {
            self.extend(&mut state, *z, x)?;
        }
        Ok(state)
    }
}

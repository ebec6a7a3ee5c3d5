//! Linear renderer from token ids and a speaker attribute to continuous frames.
//!
//! Frame m is `cb(z_m)·T + β·cb(z_{m+1})·L + a·A + c_m·N`, where `T`, `L`,
//! `A`, `N` are the row blocks of one random orthogonal matrix and `c` is an
//! AR(1) process in the remaining `embed_dim − 2·token_dim − attr_dim`
//! coordinates.

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::grammar::EOS;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub embed_dim: usize,
    pub token_dim: usize,
    pub attr_dim: usize,
    pub codebook_scale: f64,
    pub leak_beta: f64,
    pub smooth_alpha: f64,
    pub noise_sigma: f64,
    /// Norm of every speaker attribute.
    pub attr_scale: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            token_dim: 8,
            attr_dim: 8,
            codebook_scale: 0.15,
            leak_beta: 0.5,
            smooth_alpha: 0.9,
            noise_sigma: 0.1,
            attr_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderSpec {
    pub embed_dim: usize,
    pub attr_dim: usize,
    pub token_dim: usize,
    /// `|V| × token_dim`.
    pub token_codebook: Array2<f64>,
    /// `token_dim × embed_dim`, maps `cb(z_m)`.
    pub token_mix: Array2<f64>,
    /// `token_dim × embed_dim`, maps `cb(z_{m+1})`.
    pub leak_mix: Array2<f64>,
    /// `attr_dim × embed_dim`.
    pub attr_projection: Array2<f64>,
    /// `(embed_dim − 2·token_dim − attr_dim) × embed_dim`, maps `c_m`.
    pub noise_mix: Array2<f64>,
    pub leak_beta: f64,
    pub smooth_alpha: f64,
    pub noise_sigma: f64,
    /// Speaker bank, `n_speakers × attr_dim`: signed, scaled coordinate axes.
    pub speakers: Array2<f64>,
}

/// Per-utterance random draws that, with the tokens, fully determine the frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Latents {
    pub attribute: Vec<f64>,
    /// `M × noise_dim` AR(1) noise.
    pub noise: Array2<f64>,
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

impl RenderSpec {
    pub fn generate(config: &RenderConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        let d = config.embed_dim;
        let used = 2 * config.token_dim + config.attr_dim;
        if config.token_dim == 0 || config.attr_dim == 0 {
            return Err(Error::config("token_dim and attr_dim must be positive"));
        }
        if used > d {
            return Err(Error::config(format!(
                "2·token_dim + attr_dim = {used} exceeds embed_dim {d}"
            )));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(d, d, |_, _| gaussian(&mut rng));
        let q = g.qr().q();
        let rows = |start: usize, n: usize| Array2::from_shape_fn((n, d), |(i, j)| q[(j, start + i)]);
        let token_codebook = Array2::from_shape_fn((vocab_size, config.token_dim), |_| {
            config.codebook_scale * gaussian(&mut rng)
        });
        let n_speakers = 2 * config.attr_dim;
        let speakers = Array2::from_shape_fn((n_speakers, config.attr_dim), |(s, j)| {
            if s / 2 == j {
                if s % 2 == 0 {
                    config.attr_scale
                } else {
                    -config.attr_scale
                }
            } else {
                0.0
            }
        });
        let spec = Self {
            embed_dim: d,
            attr_dim: config.attr_dim,
            token_dim: config.token_dim,
            token_codebook,
            token_mix: rows(0, config.token_dim),
            leak_mix: rows(config.token_dim, config.token_dim),
            attr_projection: rows(2 * config.token_dim, config.attr_dim),
            noise_mix: rows(used, d - used),
            leak_beta: config.leak_beta,
            smooth_alpha: config.smooth_alpha,
            noise_sigma: config.noise_sigma,
            speakers,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, k, a) = (self.embed_dim, self.token_dim, self.attr_dim);
        if self.token_codebook.ncols() != k
            || self.token_mix.dim() != (k, d)
            || self.leak_mix.dim() != (k, d)
            || self.attr_projection.dim() != (a, d)
            || self.noise_mix.dim() != (d - (2 * k + a).min(d), d)
            || self.speakers.ncols() != a
        {
            return Err(Error::config("render matrices have inconsistent shapes"));
        }
        if !(0.0..1.0).contains(&self.smooth_alpha) {
            return Err(Error::config("smooth_alpha must be in [0, 1)"));
        }
        if !(self.leak_beta >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::config("leak_beta and noise_sigma must be non-negative"));
        }
        if self.speakers.nrows() < 2 {
            return Err(Error::config("need at least two speakers"));
        }
        Ok(())
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.nrows()
    }

    pub fn speaker(&self, s: usize) -> Vec<f64> {
        self.speakers.row(s).to_vec()
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_mix.nrows()
    }

    /// Stationary AR(1) noise for `frames` frames, in noise coordinates.
    pub fn draw_noise<R: Rng + ?Sized>(&self, frames: usize, rng: &mut R) -> Array2<f64> {
        let d = self.noise_dim();
        let a = self.smooth_alpha;
        let innov = (1.0 - a * a).sqrt();
        let mut c = Array2::zeros((frames, d));
        for m in 0..frames {
            for j in 0..d {
                let eps = self.noise_sigma * gaussian(rng);
                c[(m, j)] = if m == 0 { eps } else { a * c[(m - 1, j)] + innov * eps };
            }
        }
        c
    }

    pub fn draw_latents<R: Rng + ?Sized>(&self, frames: usize, rng: &mut R) -> Latents {
        let speaker = rng.gen_range(0..self.n_speakers());
        Latents {
            attribute: self.speaker(speaker),
            noise: self.draw_noise(frames, rng),
        }
    }

    /// Frames for `tokens` with attribute `attrs[m]` at frame m.
    pub fn render_varying(&self, tokens: &[u16], attrs: &[&[f64]], noise: &Array2<f64>) -> Array2<f64> {
        let m_len = tokens.len();
        assert_eq!(attrs.len(), m_len);
        assert_eq!(noise.dim(), (m_len, self.noise_dim()));
        let cb = |t: u16| self.token_codebook.row(t as usize);
        let mut x = noise.dot(&self.noise_mix);
        for m in 0..m_len {
            let next = if m + 1 < m_len { tokens[m + 1] } else { EOS };
            let mut row = x.row_mut(m);
            row += &cb(tokens[m]).dot(&self.token_mix);
            row.scaled_add(self.leak_beta, &cb(next).dot(&self.leak_mix));
            row += &ndarray::ArrayView1::from(attrs[m]).dot(&self.attr_projection);
        }
        x
    }

    pub fn render(&self, tokens: &[u16], latents: &Latents) -> Array2<f64> {
        let attrs = vec![latents.attribute.as_slice(); tokens.len()];
        self.render_varying(tokens, &attrs, &latents.noise)
    }

    /// Least-squares estimate of the attribute from the frame mean, treating
    /// the mean token and leak codes as nuisance unknowns.
    pub fn recover_attribute(&self, frames: ArrayView2<'_, f32>) -> Result<Vec<f64>> {
        if frames.nrows() < 4 {
            return Err(Error::contract(format!(
                "recover_attribute needs >= 4 frames, got {}",
                frames.nrows()
            )));
        }
        if frames.ncols() != self.embed_dim {
            return Err(Error::contract("frame width does not match embed_dim"));
        }
        let solver = self.attribute_solver()?;
        let mean = frames.mapv(|v| v as f64).mean_axis(Axis(0)).unwrap();
        Ok(mean.dot(&solver).to_vec())
    }

    /// `embed_dim × attr_dim` matrix `S` with `â = x̄·S`.
    pub fn attribute_solver(&self) -> Result<Array2<f64>> {
        let (k, a, d) = (self.token_dim, self.attr_dim, self.embed_dim);
        let r = 2 * k + a;
        let b = DMatrix::from_fn(r, d, |i, j| {
            if i < k {
                self.token_mix[(i, j)]
            } else if i < 2 * k {
                self.leak_mix[(i - k, j)]
            } else {
                self.attr_projection[(i - 2 * k, j)]
            }
        });
        let gram = &b * b.transpose();
        let eig = gram.clone().symmetric_eigen();
        let max = eig.eigenvalues.max();
        if !(eig.eigenvalues.min() > 1e-10 * max) {
            return Err(Error::config("render mixing matrix is rank deficient"));
        }
        let inv = gram
            .try_inverse()
            .ok_or_else(|| Error::config("render mixing matrix is rank deficient"))?;
        let s = b.transpose() * inv;
        Ok(Array2::from_shape_fn((d, a), |(i, j)| s[(i, 2 * k + j)]))
    }
}

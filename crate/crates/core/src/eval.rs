//! Metrics: minimal-pair likelihood accuracy, grammar perplexity of
//! continuations, speaker similarity, Fréchet distance, and flow-loss
//! consistency scoring.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{ConsistencyPair, GrammarSpec, MinimalPair, RenderSpec, Utterance};
use crate::error::{Error, Result};
use crate::model::{Model, NoiseDraws, SeqRef};
use crate::sampler::Continuation;
use crate::scalar::Scalar;

/// Covariance regularizer for [`frechet_distance`].
pub const FRECHET_EPS: f64 = 1e-6;
/// Flow times used by [`acoustic_consistency_score`]: midpoints of 8 equal bins.
pub const CONSISTENCY_TIMES: usize = 8;

/// Sum over positions of head-0 `log P(z_m | c_{<m})`, teacher-forced.
pub fn sequence_logprob<F: Scalar>(model: &Model<F>, seq: SeqRef<'_>) -> Result<f64> {
    Ok(model.token_logprobs(seq)?.iter().sum())
}

/// Mean head-0 negative log-likelihood per token.
pub fn heldout_ce<F: Scalar>(model: &Model<F>, utterances: &[Utterance]) -> Result<f64> {
    if utterances.is_empty() {
        return Err(Error::contract("held-out set is empty"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for u in utterances {
        total -= sequence_logprob(model, u.into())?;
        count += u.len();
    }
    Ok(total / count as f64)
}

/// Fraction of pairs whose positive scores strictly higher; ties count half.
pub fn paired_accuracy<S>(pairs: &[MinimalPair], mut score: S) -> Result<f64>
where
    S: FnMut(&Utterance) -> Result<f64>,
{
    if pairs.is_empty() {
        return Err(Error::contract("paired_accuracy needs at least one pair"));
    }
    let mut correct = 0.0;
    for p in pairs {
        let a = score(&p.positive)?;
        let b = score(&p.negative)?;
        correct += if a > b {
            1.0
        } else if a == b {
            0.5
        } else {
            0.0
        };
    }
    Ok(correct / pairs.len() as f64)
}

pub fn model_paired_accuracy<F: Scalar>(model: &Model<F>, pairs: &[MinimalPair]) -> Result<f64> {
    paired_accuracy(pairs, |u| sequence_logprob(model, u.into()))
}

/// `exp(-mean per-token log-probability)` of generated tokens, each scored
/// conditionally on its prompt.
pub fn gen_ppl(continuations: &[Continuation], grammar: &GrammarSpec) -> Result<f64> {
    if continuations.is_empty() {
        return Err(Error::contract("gen_ppl needs at least one continuation"));
    }
    let mut lp = 0.0;
    let mut n = 0usize;
    for c in continuations {
        let mut full = c.prompt_tokens.clone();
        full.extend_from_slice(&c.tokens);
        let prefix = if c.prompt_tokens.is_empty() {
            0.0
        } else {
            grammar.logprob(&c.prompt_tokens)
        };
        lp += grammar.logprob(&full) - prefix;
        n += c.tokens.len();
    }
    if n == 0 {
        return Err(Error::contract("continuations contain no generated tokens"));
    }
    Ok((-lp / n as f64).exp())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Cosine between the attributes recovered from two frame sequences.
pub fn speaker_similarity(prompt: ArrayView2<'_, f32>, continuation: ArrayView2<'_, f32>, render: &RenderSpec) -> Result<f64> {
    let a = render.recover_attribute(prompt)?;
    let b = render.recover_attribute(continuation)?;
    Ok(cosine(&a, &b))
}

fn mean_cov(x: ArrayView2<'_, f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mu = x.mean_axis(Axis(0)).unwrap();
    let centered = &x - &mu;
    let cov = centered.t().dot(&centered) / (n - 1.0);
    let d = x.ncols();
    let mut m = DMatrix::from_fn(d, d, |i, j| cov[(i, j)]);
    for i in 0..d {
        m[(i, i)] += FRECHET_EPS;
    }
    (mu.to_vec(), m)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two sample sets (rows are
/// samples).
pub fn frechet_distance(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    let d = a.ncols();
    if b.ncols() != d || d == 0 {
        return Err(Error::contract("feature sets differ in dimension"));
    }
    if a.nrows() < d + 1 || b.nrows() < d + 1 {
        return Err(Error::contract(format!(
            "frechet_distance needs at least {} samples per set",
            d + 1
        )));
    }
    let (mu_a, sa) = mean_cov(a);
    let (mu_b, sb) = mean_cov(b);
    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y).powi(2)).sum();
    // Tr((Sa Sb)^{1/2}) = Tr((Sa^{1/2} Sb Sa^{1/2})^{1/2}), the latter symmetric
    let ra = sym_sqrt(&sa);
    let inner = &ra * &sb * &ra;
    let eig = ((&inner + inner.transpose()) * 0.5).symmetric_eigen();
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let value = mean_term + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

/// Utterance-level features: the mean frame of each utterance.
pub fn mean_frames(utterances: &[&Array2<f32>]) -> Array2<f64> {
    let d = utterances.first().map_or(0, |u| u.ncols());
    let mut out = Array2::zeros((utterances.len(), d));
    for (r, u) in utterances.iter().enumerate() {
        out.row_mut(r).assign(&u.mapv(|v| v as f64).mean_axis(Axis(0)).unwrap());
    }
    out
}

/// Mean teacher-forced flow loss per frame over the stratified times, with
/// prior draws fixed by `seed`.
pub fn consistency_loss<F: Scalar>(model: &Model<F>, u: &Utterance, seed: u64) -> Result<f64> {
    if !model.config.cfm_enabled {
        return Err(Error::contract("consistency scoring needs a flow head"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = NoiseDraws::sample(&[u.len()], model.config.embed_dim, 0.0, &mut rng);
    let mut total = 0.0;
    for i in 0..CONSISTENCY_TIMES {
        let t = (i as f64 + 0.5) / CONSISTENCY_TIMES as f64;
        let draws = NoiseDraws {
            t: vec![t; u.len()],
            ..base.clone()
        };
        total += model.loss_forward(&[u.into()], &draws)?.cfm_loss;
    }
    Ok(total / CONSISTENCY_TIMES as f64)
}

/// 1 if the consistent member has the lower flow loss, 0.5 on a tie, else 0.
pub fn acoustic_consistency_score<F: Scalar>(model: &Model<F>, pair: &ConsistencyPair, seed: u64) -> Result<f64> {
    if pair.consistent.tokens != pair.inconsistent.tokens {
        return Err(Error::contract("consistency pair members differ in tokens"));
    }
    let a = consistency_loss(model, &pair.consistent, seed)?;
    let b = consistency_loss(model, &pair.inconsistent, seed)?;
    Ok(if a < b {
        1.0
    } else if a == b {
        0.5
    } else {
        0.0
    })
}

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
    pub config_hash: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn new(config_hash: String, seed: u64) -> Self {
        Self {
            config_hash,
            seed,
            ..Self::default()
        }
    }

    pub fn insert(&mut self, name: &str, value: f64, count: usize) {
        self.metrics.insert(name.to_string(), value);
        self.counts.insert(name.to_string(), count);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// Every metric has a sample count.
    pub fn is_consistent(&self) -> bool {
        self.metrics.keys().all(|k| self.counts.contains_key(k))
    }
}

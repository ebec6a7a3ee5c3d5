//! Autoregressive generation: nucleus sampling of the next tokens, then an
//! ODE solve of the flow head for the next frame, fed back into the
//! transformer one frame at a time.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{RenderSpec, EOS, SILENCE};
use crate::error::{Error, Result};
use crate::flow::{cfg_combine, ode_sample, sample_prior, SolverSpec};
use crate::model::{CfmQuery, Model, SeqRef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub top_p: f64,
    /// Subtracted from the silence logit before sampling.
    pub silence_penalty: f64,
    pub cfg_scale: f64,
    pub prior_temperature: f64,
    pub solver: SolverSpec,
    pub max_frames: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            top_p: 0.95,
            silence_penalty: 10.0,
            cfg_scale: 0.3,
            prior_temperature: 0.8,
            solver: SolverSpec::default(),
            max_frames: 125,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::config("top_p must lie in (0, 1]"));
        }
        if !(self.silence_penalty >= 0.0) || !(self.cfg_scale >= 0.0) {
            return Err(Error::config("silence_penalty and cfg_scale must be >= 0"));
        }
        if !(self.prior_temperature > 0.0) {
            return Err(Error::config("prior_temperature must be > 0"));
        }
        if self.max_frames == 0 {
            return Err(Error::config("max_frames must be >= 1"));
        }
        self.solver.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    MaxFrames,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Continuation {
    pub prompt_tokens: Vec<u16>,
    /// Generated tokens, prompt excluded.
    pub tokens: Vec<u16>,
    /// Generated frames, prompt excluded.
    pub embeddings: Array2<f32>,
    pub prompt_len: usize,
    pub stopped_by: StopReason,
}

/// Work performed by the sampler.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub frames: usize,
    /// Transformer advances after the prompt was consumed.
    pub extensions: usize,
    /// Vector-field rows evaluated (a guided step evaluates two).
    pub cfm_evals: usize,
}

/// Where generated frames come from.
#[derive(Debug, Clone, Copy)]
pub enum FrameSource<'r> {
    /// ODE solve of the model's flow head.
    FlowHead,
    /// Render the generated tokens with a speaker drawn independently of the
    /// prompt. Used for models without a flow head.
    BlindRender(&'r RenderSpec),
}

/// Probabilities actually sampled from: silence logit lowered by `penalty`,
/// then restricted to the smallest most-probable set with mass >= `top_p`.
pub fn nucleus_distribution(logits: ArrayView1<'_, f64>, top_p: f64, penalty: f64) -> Result<Vec<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("nucleus sampling needs finite logits"));
    }
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(Error::contract("top_p must lie in (0, 1]"));
    }
    let mut z = logits.to_vec();
    if let Some(s) = z.get_mut(SILENCE as usize) {
        *s -= penalty;
    }
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    let mut order: Vec<usize> = (0..p.len()).collect();
    // stable: ties keep the lower id first
    order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap());
    let mut kept = 0;
    let mut mass = 0.0;
    for &i in &order {
        mass += p[i];
        kept += 1;
        if mass >= top_p {
            break;
        }
    }
    let mut out = vec![0.0; p.len()];
    for &i in &order[..kept] {
        out[i] = p[i] / mass;
    }
    Ok(out)
}

pub fn nucleus_sample<R: Rng + ?Sized>(
    logits: ArrayView1<'_, f64>,
    top_p: f64,
    penalty: f64,
    rng: &mut R,
) -> Result<usize> {
    let p = nucleus_distribution(logits, top_p, penalty)?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &q) in p.iter().enumerate() {
        if q > 0.0 {
            acc += q;
            last = i;
            if u < acc {
                return Ok(i);
            }
        }
    }
    Ok(last)
}

/// One frame: prior draw, then the (guided) flow ODE.
pub fn generate_frame<R: Rng + ?Sized>(
    model: &Model<f32>,
    context: ArrayView1<'_, f32>,
    tokens: &[u16],
    gen: &GenerationConfig,
    rng: &mut R,
    counters: &mut Counters,
) -> Result<Vec<f32>> {
    let x0: Vec<f32> = sample_prior(model.config.embed_dim, gen.prior_temperature, rng);
    let guided = gen.cfg_scale > 0.0;
    ode_sample(
        |t, x: &[f32]| {
            let cond = CfmQuery {
                xt: x,
                t: t as f64,
                context: context.view(),
                tokens,
                drop: false,
            };
            let queries = if guided {
                vec![
                    cond.clone(),
                    CfmQuery {
                        drop: true,
                        ..cond
                    },
                ]
            } else {
                vec![cond]
            };
            counters.cfm_evals += queries.len();
            let v = model.cfm_field(&queries)?;
            if guided {
                cfg_combine(
                    v.row(0).as_slice().unwrap(),
                    v.row(1).as_slice().unwrap(),
                    gen.cfg_scale,
                )
            } else {
                Ok(v.row(0).to_vec())
            }
        },
        &x0,
        gen.solver,
    )
}

/// Continue `prompt` until EOS at head 0 or `max_frames` generated frames.
///
/// Every step samples all heads; head 0's token is emitted, the others only
/// condition the flow head.
pub fn continue_prompt<R: Rng + ?Sized>(
    model: &Model<f32>,
    prompt: SeqRef<'_>,
    gen: &GenerationConfig,
    source: FrameSource<'_>,
    rng: &mut R,
    counters: &mut Counters,
) -> Result<Continuation> {
    gen.validate()?;
    if matches!(source, FrameSource::FlowHead) && !model.config.cfm_enabled {
        return Err(Error::contract("model has no flow head; frames need another source"));
    }
    let d = model.config.embed_dim;
    let mut state = model.encode_prompt(prompt.tokens, prompt.frames)?;
    let mut tokens = Vec::new();
    let mut frames: Vec<Vec<f32>> = Vec::new();
    let mut stopped_by = StopReason::MaxFrames;
    let zero = Array1::<f32>::zeros(d);
    while tokens.len() < gen.max_frames {
        let ctx = state.context().to_owned();
        let logits = model.sem_logits(ctx.view()).mapv(|v| v as f64);
        let mut heads = Vec::with_capacity(logits.nrows());
        for row in logits.rows() {
            heads.push(nucleus_sample(row, gen.top_p, gen.silence_penalty, rng)? as u16);
        }
        let z = heads[0];
        let frame = match source {
            FrameSource::FlowHead => generate_frame(model, ctx.view(), &heads, gen, rng, counters)
                .map_err(|e| match e {
                    Error::Numerical { step, msg } => Error::Numerical {
                        step,
                        msg: format!("frame {}: {msg}", tokens.len()),
                    },
                    other => other,
                })?,
            FrameSource::BlindRender(_) => zero.to_vec(),
        };
        tokens.push(z);
        model.extend(&mut state, z, ArrayView1::from(&frame))?;
        frames.push(frame);
        counters.frames += 1;
        counters.extensions += 1;
        if z == EOS {
            stopped_by = StopReason::Eos;
            break;
        }
    }
    let embeddings = match source {
        FrameSource::FlowHead => {
            Array2::from_shape_vec((frames.len(), d), frames.concat()).expect("frame widths are uniform")
        }
        FrameSource::BlindRender(render) => {
            let lat = render.draw_latents(tokens.len(), rng);
            render.render(&tokens, &lat).mapv(|v| v as f32)
        }
    };
    Ok(Continuation {
        prompt_tokens: prompt.tokens.to_vec(),
        tokens,
        embeddings,
        prompt_len: prompt.tokens.len(),
        stopped_by,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tiny_top_p_is_argmax() {
        let logits = array![0.1, 2.0, 1.9, -3.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            assert_eq!(nucleus_sample(logits.view(), 1e-9, 0.0, &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn huge_penalty_never_samples_silence() {
        let logits = array![5.0, 0.0, 0.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            assert_ne!(nucleus_sample(logits.view(), 1.0, 1e6, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn nucleus_keeps_smallest_covering_prefix() {
        // probabilities 0.5, 0.3, 0.2 after softmax
        let logits = array![0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
        let p = nucleus_distribution(logits.view(), 0.5, 0.0).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] == 0.0 && p[2] == 0.0);
        let p = nucleus_distribution(logits.view(), 0.6, 0.0).unwrap();
        assert!((p[0] - 0.625).abs() < 1e-12 && (p[1] - 0.375).abs() < 1e-12 && p[2] == 0.0);
        let p = nucleus_distribution(logits.view(), 1.0, 0.0).unwrap();
        assert!((p[2] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn non_finite_logits_rejected() {
        let logits = array![0.0, f64::NAN];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(nucleus_sample(logits.view(), 0.9, 0.0, &mut rng).is_err());
    }

    #[test]
    fn zero_max_frames_rejected() {
        let g = GenerationConfig {
            max_frames: 0,
            ..GenerationConfig::default()
        };
        assert!(g.validate().is_err());
        let g = GenerationConfig {
            solver: SolverSpec {
                method: crate::flow::SolverMethod::Midpoint,
                nfe: 3,
            },
            ..GenerationConfig::default()
        };
        assert!(g.validate().is_err());
    }
}

//! Optimization loop and the input × objective ablation grid.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{MinimalPair, Utterance};
use crate::error::{Error, Result};
use crate::eval::{heldout_ce, model_paired_accuracy, EvalReport};
use crate::model::{save_checkpoint, Checkpoint, InputMode, LossBreakdown, Model, ModelConfig, SeqRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_utterances: usize,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub schedule: Schedule,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_utterances: 32,
            lr_peak: 1e-3,
            warmup_steps: 150,
            schedule: Schedule::Cosine,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            grad_clip_norm: 1.0,
            seed: 0,
            checkpoint_every: 1000,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps must be >= 1"));
        }
        if self.warmup_steps >= self.steps {
            return Err(Error::config("warmup_steps must be < steps"));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::config("grad_clip_norm must be > 0"));
        }
        if self.batch_utterances == 0 || self.log_every == 0 {
            return Err(Error::config("batch_utterances and log_every must be >= 1"));
        }
        if !(self.lr_peak >= 0.0) {
            return Err(Error::config("lr_peak must be >= 0"));
        }
        Ok(())
    }

    /// Learning rate for update `step` (0-based): linear warmup to the peak,
    /// then constant or half-cosine decay to zero at `steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr_peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            Schedule::Constant => self.lr_peak,
            Schedule::Cosine => {
                let span = (self.steps - self.warmup_steps) as f64;
                let progress = (step - self.warmup_steps) as f64 / span;
                0.5 * self.lr_peak * (1.0 + (PI * progress).cos())
            }
        }
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<Array2<f32>>,
    pub v: Vec<Array2<f32>>,
    /// Updates applied so far.
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &[Array2<f32>]) -> Self {
        Self {
            m: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut [Array2<f32>], grads: &[Array2<f32>], decay: &[bool], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step = (lr / c1) as f32;
        let c2 = c2 as f32;
        let eps = cfg.adam_eps as f32;
        let wd = (lr * cfg.weight_decay) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        for i in 0..params.len() {
            let p = &mut params[i];
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                if decay[i] {
                    *p -= wd * *p;
                }
                *p -= step * *m / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// One logged update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub sem_loss: f64,
    pub cfm_loss: f64,
    pub total: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global gradient norm after clipping.
    pub clipped_norm: f64,
}

fn rng_stream(seed: u64, salt: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(stream);
    rng
}

const INIT_SALT: u64 = 0x1417_0000;
const ORDER_SALT: u64 = 0x0bde_5000;
const NOISE_SALT: u64 = 0x2015_e000;

/// Utterance indices of update `step`: per-epoch seeded permutations, partial
/// final batch kept.
pub fn batch_indices(seed: u64, n: usize, batch: usize, step: usize) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch);
    let epoch = step / per_epoch;
    let j = step % per_epoch;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_stream(seed, ORDER_SALT, epoch as u64));
    perm[j * batch..((j + 1) * batch).min(n)].to_vec()
}

pub struct Trainer<'c> {
    pub model: Model<f32>,
    pub opt: AdamW,
    /// Updates completed.
    pub step: usize,
    pub config: TrainConfig,
    /// Stored under `meta.run` in checkpoints, e.g. config hashes.
    pub run_meta: serde_json::Value,
    corpus: &'c [Utterance],
    decay: Vec<bool>,
}

fn decay_mask(model: &Model<f32>) -> Vec<bool> {
    model.names().iter().map(|n| n.ends_with(".w")).collect()
}

impl<'c> Trainer<'c> {
    pub fn new(model_config: &ModelConfig, config: &TrainConfig, corpus: &'c [Utterance]) -> Result<Self> {
        config.validate()?;
        if corpus.is_empty() {
            return Err(Error::contract("training corpus is empty"));
        }
        let model = Model::<f32>::init(model_config, &mut rng_stream(config.seed, INIT_SALT, 0))?;
        Ok(Self {
            opt: AdamW::new(model.params()),
            decay: decay_mask(&model),
            model,
            step: 0,
            config: config.clone(),
            run_meta: serde_json::Value::Null,
            corpus,
        })
    }

    /// Continue a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, config: &TrainConfig, corpus: &'c [Utterance]) -> Result<Self> {
        config.validate()?;
        let model = Model::<f32>::from_checkpoint(ckpt)?;
        let step = ckpt.meta["step"]
            .as_u64()
            .ok_or_else(|| Error::contract("checkpoint has no step counter"))? as usize;
        let n = model.n_params();
        if ckpt.extra.len() != 2 * n {
            return Err(Error::contract("checkpoint lacks optimizer state"));
        }
        let opt = AdamW {
            m: ckpt.extra[..n].iter().map(|(_, t)| t.clone()).collect(),
            v: ckpt.extra[n..].iter().map(|(_, t)| t.clone()).collect(),
            t: step as u64,
        };
        Ok(Self {
            decay: decay_mask(&model),
            model,
            opt,
            step,
            config: config.clone(),
            run_meta: ckpt.meta["run"].clone(),
            corpus,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let names = self.model.names();
        let extra = names
            .iter()
            .zip(&self.opt.m)
            .map(|(n, t)| (format!("adam.m.{n}"), t.clone()))
            .chain(names.iter().zip(&self.opt.v).map(|(n, t)| (format!("adam.v.{n}"), t.clone())))
            .collect();
        let meta = serde_json::json!({
            "step": self.step,
            "train": self.config,
            // noise for update s is stream s of the seeded generator
            "rng": {"seed": self.config.seed, "next_stream": self.step},
            "workers": 1,
            "run": self.run_meta,
        });
        self.model.to_checkpoint(extra, meta)
    }

    /// Apply one update and return its record.
    pub fn step_once(&mut self) -> Result<StepRecord> {
        let s = self.step;
        let idx = batch_indices(self.config.seed, self.corpus.len(), self.config.batch_utterances, s);
        let batch: Vec<SeqRef> = idx.iter().map(|&i| (&self.corpus[i]).into()).collect();
        let draws = self.model.sample_draws(&batch, &mut rng_stream(self.config.seed, NOISE_SALT, s as u64));
        let (loss, mut grads) = self.model.grad(&batch, &draws).map_err(|e| match e {
            Error::Numerical { msg, .. } => Error::Numerical { step: s, msg },
            other => other,
        })?;
        let norm = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Numerical {
                step: s,
                msg: "non-finite gradient norm".into(),
            });
        }
        let mut clipped = norm;
        if norm > self.config.grad_clip_norm {
            let scale = (self.config.grad_clip_norm / norm) as f32;
            grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v * scale));
            clipped = grads
                .iter()
                .flat_map(|g| g.iter())
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt();
        }
        let lr = self.config.lr_at(s);
        self.opt
            .update(self.model.params_mut(), &grads, &self.decay, lr, &self.config);
        self.step += 1;
        Ok(StepRecord {
            step: s,
            sem_loss: loss.sem_loss,
            cfm_loss: loss.cfm_loss,
            total: loss.total,
            lr,
            grad_norm: norm,
            clipped_norm: clipped,
        })
    }

    /// Run until `config.steps` updates are done, passing every record to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&Trainer<'_>, &StepRecord) -> Result<()>) -> Result<()> {
        while self.step < self.config.steps {
            let rec = self.step_once()?;
            sink(self, &rec)?;
        }
        Ok(())
    }
}

/// Result of [`train`]: the model and the logged records.
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub log: Vec<StepRecord>,
}

/// Train from scratch. With `out_dir`, writes `metrics.jsonl`, periodic and
/// final `checkpoint.ckpt`, and wall-clock timing to `timing.jsonl`.
pub fn train(model_config: &ModelConfig, config: &TrainConfig, corpus: &[Utterance], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let trainer = Trainer::new(model_config, config, corpus)?;
    run_logged(trainer, out_dir)
}

pub fn run_logged(mut trainer: Trainer<'_>, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut log = Vec::new();
    let resume_at = trainer.step;
    // a fresh run truncates; a resumed run keeps only records before its step
    let open = |name: &str| -> Result<Option<(std::fs::File, std::path::PathBuf)>> {
        let Some(d) = out_dir else { return Ok(None) };
        let p = d.join(name);
        let kept = match std::fs::read_to_string(&p) {
            Ok(text) if resume_at > 0 => text
                .lines()
                .filter(|l| {
                    serde_json::from_str::<serde_json::Value>(l)
                        .ok()
                        .and_then(|v| v["step"].as_u64())
                        .is_some_and(|s| (s as usize) < resume_at)
                })
                .map(|l| format!("{l}\n"))
                .collect(),
            _ => String::new(),
        };
        std::fs::write(&p, kept).map_err(|e| Error::io(&p, e))?;
        let f = std::fs::OpenOptions::new().append(true).open(&p).map_err(|e| Error::io(&p, e))?;
        Ok(Some((f, p)))
    };
    let mut metrics = open("metrics.jsonl")?;
    let mut timing = open("timing.jsonl")?;
    let start = std::time::Instant::now();
    let cfg = trainer.config.clone();
    trainer.run(|t, rec| {
        let last = rec.step + 1 == cfg.steps;
        if rec.step % cfg.log_every == 0 || last {
            log.push(rec.clone());
            if let Some((f, p)) = metrics.as_mut() {
                let line = serde_json::to_string(rec).unwrap();
                writeln!(f, "{line}").map_err(|e| Error::io(p.clone(), e))?;
            }
            if let Some((f, p)) = timing.as_mut() {
                let line = serde_json::json!({"step": rec.step, "wall_s": start.elapsed().as_secs_f64()});
                writeln!(f, "{line}").map_err(|e| Error::io(p.clone(), e))?;
            }
        }
        if let Some(d) = out_dir {
            if last || (cfg.checkpoint_every > 0 && t.step % cfg.checkpoint_every == 0) {
                save_checkpoint(&d.join("checkpoint.ckpt"), &t.checkpoint())?;
            }
        }
        Ok(())
    })?;
    Ok(TrainOutcome {
        model: trainer.model,
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub input_modes: Vec<InputMode>,
    pub k_values: Vec<usize>,
    pub cfm_enabled: Vec<bool>,
    /// Restricts `k` for flow-head cells; `None` uses `k_values`.
    pub cfm_k_values: Option<Vec<usize>>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            input_modes: vec![InputMode::Token, InputMode::Vector],
            k_values: vec![1, 2, 4],
            cfm_enabled: vec![false, true],
            cfm_k_values: Some(vec![1, 4]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationCell {
    pub input_mode: InputMode,
    pub k_future: usize,
    pub cfm_enabled: bool,
}

impl AblationCell {
    pub fn objective(&self) -> String {
        if self.cfm_enabled {
            format!("L_sem-{} + L_CFM-{}", self.k_future, self.k_future)
        } else {
            format!("L_sem-{}", self.k_future)
        }
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            input_mode: self.input_mode,
            k_future: self.k_future,
            cfm_enabled: self.cfm_enabled,
            ..base.clone()
        }
    }
}

impl AblationGrid {
    /// Cells of the product; flow-head cells exist only for vector input.
    pub fn cells(&self) -> Result<Vec<AblationCell>> {
        let mut out = Vec::new();
        for &input_mode in &self.input_modes {
            for &cfm_enabled in &self.cfm_enabled {
                if cfm_enabled && input_mode == InputMode::Token {
                    continue;
                }
                for &k_future in &self.k_values {
                    if cfm_enabled && self.cfm_k_values.as_ref().is_some_and(|ks| !ks.contains(&k_future)) {
                        continue;
                    }
                    out.push(AblationCell {
                        input_mode,
                        k_future,
                        cfm_enabled,
                    });
                }
            }
        }
        if out.is_empty() {
            return Err(Error::config("ablation grid has no valid cells"));
        }
        Ok(out)
    }
}

/// Evaluation sets shared by every ablation cell.
pub struct AblationData<'d> {
    pub train: &'d [Utterance],
    pub heldout: &'d [Utterance],
    pub lexical: &'d [MinimalPair],
    pub syntactic: &'d [MinimalPair],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub objective: String,
    pub seed: u64,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

/// Evaluate one trained model on held-out CE and the pair sets (empty sets
/// are skipped).
pub fn evaluate_cell(model: &Model<f32>, data: &AblationData<'_>, report: &mut EvalReport) -> Result<()> {
    report.insert("heldout_ce", heldout_ce(model, data.heldout)?, data.heldout.len());
    if !data.lexical.is_empty() {
        report.insert("lexical_acc", model_paired_accuracy(model, data.lexical)?, data.lexical.len());
    }
    if !data.syntactic.is_empty() {
        report.insert(
            "syntactic_acc",
            model_paired_accuracy(model, data.syntactic)?,
            data.syntactic.len(),
        );
    }
    Ok(())
}

/// Train and evaluate every cell for every seed. A failing cell is recorded
/// and the remaining cells still run. `on_model` sees each trained model.
pub fn run_ablation(
    grid: &AblationGrid,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    data: &AblationData<'_>,
    seeds: &[u64],
    mut on_model: impl FnMut(&AblationCell, u64, &Model<f32>),
) -> Result<Vec<AblationRow>> {
    let cells = grid.cells()?;
    let mut rows = Vec::new();
    for cell in &cells {
        for &seed in seeds {
            let mcfg = cell.apply(base_model);
            let tcfg = TrainConfig {
                seed,
                ..base_train.clone()
            };
            let hash = crate::eval::config_hash(&(&mcfg, &tcfg));
            let result = train(&mcfg, &tcfg, data.train, None).and_then(|out| {
                let mut report = EvalReport::new(hash, seed);
                evaluate_cell(&out.model, data, &mut report)?;
                let last = out.log.last().expect("at least one step");
                report.insert("final_train_total", last.total, 1);
                on_model(cell, seed, &out.model);
                Ok(report)
            });
            let (report, error) = match result {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            rows.push(AblationRow {
                cell: *cell,
                objective: cell.objective(),
                seed,
                report,
                error,
            });
        }
    }
    Ok(rows)
}

/// Seed-averaged metric of one cell.
pub fn cell_mean(rows: &[AblationRow], cell: &AblationCell, metric: &str) -> Option<f64> {
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| r.cell == *cell)
        .filter_map(|r| r.report.as_ref()?.get(metric))
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Fixed-width text table: one row per cell, seed-averaged.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut cells: Vec<AblationCell> = Vec::new();
    for r in rows {
        if !cells.contains(&r.cell) {
            cells.push(r.cell);
        }
    }
    let mut out = format!(
        "{:<7} {:<22} {:>11} {:>13} {:>8}\n",
        "input", "objective", "lexical acc", "syntactic acc", "CE"
    );
    let fmt = |v: Option<f64>, pct: bool| match v {
        Some(x) if pct => format!("{:.1}", 100.0 * x),
        Some(x) => format!("{x:.3}"),
        None => "-".into(),
    };
    for c in cells {
        let failed = rows.iter().any(|r| r.cell == c && r.error.is_some());
        out.push_str(&format!(
            "{:<7} {:<22} {:>11} {:>13} {:>8}{}\n",
            c.input_mode.to_string(),
            c.objective(),
            fmt(cell_mean(rows, &c, "lexical_acc"), true),
            fmt(cell_mean(rows, &c, "syntactic_acc"), true),
            fmt(cell_mean(rows, &c, "heldout_ce"), false),
            if failed { "  (failed seeds)" } else { "" }
        ));
    }
    out
}

/// Loss of the current model on `batch` with fresh draws; used by tests and
/// diagnostics.
pub fn eval_loss(model: &Model<f32>, batch: &[SeqRef<'_>], seed: u64) -> Result<LossBreakdown> {
    let draws = model.sample_draws(batch, &mut rng_stream(seed, NOISE_SALT, u64::MAX));
    model.loss_forward(batch, &draws)
}

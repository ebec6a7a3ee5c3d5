//! Reproducible command pipeline behind the CLI verbs.
//!
//! One TOML file configures a run. [`RunConfig::resolve`] expands defaults,
//! derives every component seed from the root seed by name, and the resolved
//! file is written next to each command's outputs. Directory layout under
//! `out`:
//!
//! ```text
//! data/      train.shard heldout.shard {lexical,syntactic,consistency}.{pos,neg}.shard manifest.json
//! train/     checkpoint.ckpt metrics.jsonl timing.jsonl
//! generate/  continuations.shard generate.json
//! eval/      report.json
//! ablate/    table.json table.txt
//! ```
//!
//! Each command checks the config hash recorded by the step it depends on.
//! `timing.jsonl` is the only artifact that is not byte-reproducible.

use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::{concatenate, s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::shard::{read_shard, write_shard};
use crate::corpus::{
    corpus_perplexity, generate_corpus, make_consistency_pairs, make_minimal_pairs, ConsistencyPair, GrammarConfig,
    GrammarSpec, MinimalPair, PairKind, RenderConfig, RenderSpec, Utterance, SILENCE,
};
use crate::error::{Error, Result};
use crate::eval::{
    acoustic_consistency_score, config_hash, frechet_distance, gen_ppl, heldout_ce, mean_frames, model_paired_accuracy,
    speaker_similarity, EvalReport,
};
use crate::model::{load_checkpoint, Model, ModelConfig, SeqRef};
use crate::sampler::{continue_prompt, Continuation, Counters, FrameSource, GenerationConfig, StopReason};
use crate::train::{format_table, run_ablation, run_logged, AblationData, AblationGrid, AblationRow, StepRecord, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_utterances: usize,
    pub heldout_utterances: usize,
    pub lexical_pairs: usize,
    pub syntactic_pairs: usize,
    pub consistency_pairs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_utterances: 5000,
            heldout_utterances: 500,
            lexical_pairs: 400,
            syntactic_pairs: 400,
            consistency_pairs: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out utterances used as prompts.
    pub prompts: usize,
    pub continuations_per_prompt: usize,
    pub prompt_frames: usize,
    /// Score held-out suffixes instead of generated continuations.
    pub ground_truth: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            prompts: 100,
            continuations_per_prompt: 4,
            prompt_frames: 12,
            ground_truth: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub grid: AblationGrid,
    /// Training seeds per cell, derived from the root seed.
    pub replicates: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            grid: AblationGrid::default(),
            replicates: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub grammar: GrammarConfig,
    pub render: RenderConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generation: GenerationConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            grammar: GrammarConfig::default(),
            render: RenderConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            generation: GenerationConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// Seed of the substream `name` under `root`. Kept below 2^63 so it survives
/// TOML's signed integers.
pub fn substream_seed(root: u64, name: &str) -> u64 {
    let digest = Sha256::digest(format!("{root}/{name}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap()) & (i64::MAX as u64)
}

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn seed_for(&self, name: &str) -> u64 {
        substream_seed(self.seed, name)
    }

    /// Derive component seeds, tie model dimensions to the data, and validate.
    /// Idempotent.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed_for("train");
        self.generation.seed = self.seed_for("gen");
        self.model.vocab_size = self.grammar.vocab_size;
        self.model.embed_dim = self.render.embed_dim;
        self.model.validate()?;
        self.train.validate()?;
        self.generation.validate()?;
        self.world()?;
        if self.eval.prompt_frames < 4 {
            return Err(Error::config("eval.prompt_frames must be >= 4 for speaker similarity"));
        }
        if self.eval.prompts == 0 || self.eval.continuations_per_prompt == 0 {
            return Err(Error::config("eval.prompts and eval.continuations_per_prompt must be >= 1"));
        }
        if self.ablation.replicates == 0 {
            return Err(Error::config("ablation.replicates must be >= 1"));
        }
        Ok(self)
    }

    pub fn world(&self) -> Result<(GrammarSpec, RenderSpec)> {
        let g = GrammarSpec::generate(&self.grammar, self.seed_for("grammar"))?;
        let r = RenderSpec::generate(&self.render, g.vocab_size, self.seed_for("render"))?;
        Ok((g, r))
    }

    pub fn data_hash(&self) -> String {
        config_hash(&(self.seed, &self.grammar, &self.render, &self.data))
    }

    pub fn model_hash(&self) -> String {
        config_hash(&(self.data_hash(), &self.model, &self.train))
    }

    pub fn eval_hash(&self) -> String {
        config_hash(&(self.model_hash(), &self.generation, &self.eval))
    }

    pub fn dir(&self, step: &str) -> PathBuf {
        self.out.join(step)
    }

    fn prepare_dir(&self, step: &str) -> Result<PathBuf> {
        let d = self.dir(step);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        let p = d.join(RESOLVED_CONFIG);
        std::fs::write(&p, self.to_toml()).map_err(|e| Error::io(&p, e))?;
        Ok(d)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub config_hash: String,
    pub seeds: std::collections::BTreeMap<String, u64>,
    pub counts: std::collections::BTreeMap<String, usize>,
    pub train_perplexity: f64,
    pub heldout_perplexity: f64,
    pub lexical_spans: Vec<(usize, usize)>,
    pub syntactic_spans: Vec<(usize, usize)>,
    pub consistency_switch_frames: Vec<usize>,
}

/// Everything `make-data` produces, loaded back.
pub struct Dataset {
    pub grammar: GrammarSpec,
    pub render: RenderSpec,
    pub train: Vec<Utterance>,
    pub heldout: Vec<Utterance>,
    pub lexical: Vec<MinimalPair>,
    pub syntactic: Vec<MinimalPair>,
    pub consistency: Vec<ConsistencyPair>,
    pub manifest: DataManifest,
}

const SPLITS: [&str; 5] = ["train", "heldout", "lexical", "syntactic", "consistency"];

pub fn cmd_make_data(cfg: &RunConfig) -> Result<DataManifest> {
    let dir = cfg.prepare_dir("data")?;
    let (g, r) = cfg.world()?;
    let (d, a) = (r.embed_dim, r.attr_dim);
    let seeds: std::collections::BTreeMap<String, u64> = ["grammar", "render"]
        .iter()
        .chain(&SPLITS)
        .map(|n| (n.to_string(), cfg.seed_for(n)))
        .collect();
    info!("generating {} train utterances", cfg.data.train_utterances);
    let train = generate_corpus(&g, &r, cfg.data.train_utterances, seeds["train"]);
    let heldout = generate_corpus(&g, &r, cfg.data.heldout_utterances, seeds["heldout"]);
    write_shard(&dir.join("train.shard"), &train, d, a)?;
    write_shard(&dir.join("heldout.shard"), &heldout, d, a)?;
    let mut spans = Vec::new();
    for (kind, n, name) in [
        (PairKind::Lexical, cfg.data.lexical_pairs, "lexical"),
        (PairKind::Syntactic, cfg.data.syntactic_pairs, "syntactic"),
    ] {
        info!("generating {n} {name} pairs");
        let set = make_minimal_pairs(&g, &r, kind, n, seeds[name])?;
        let (pos, neg): (Vec<_>, Vec<_>) = set.pairs.iter().map(|p| (p.positive.clone(), p.negative.clone())).unzip();
        write_shard(&dir.join(format!("{name}.pos.shard")), &pos, d, a)?;
        write_shard(&dir.join(format!("{name}.neg.shard")), &neg, d, a)?;
        spans.push(set.pairs.iter().map(|p| p.span).collect::<Vec<_>>());
    }
    let cons = make_consistency_pairs(&g, &r, cfg.data.consistency_pairs, seeds["consistency"]);
    let (pos, neg): (Vec<_>, Vec<_>) = cons.iter().map(|p| (p.consistent.clone(), p.inconsistent.clone())).unzip();
    write_shard(&dir.join("consistency.pos.shard"), &pos, d, a)?;
    write_shard(&dir.join("consistency.neg.shard"), &neg, d, a)?;

    let counts = [
        ("train_utterances", train.len()),
        ("heldout_utterances", heldout.len()),
        ("lexical_pairs", spans[0].len()),
        ("syntactic_pairs", spans[1].len()),
        ("consistency_pairs", cons.len()),
        ("train_frames", train.iter().map(Utterance::len).sum()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let nonempty_ppl = |u: &[Utterance]| if u.is_empty() { f64::NAN } else { corpus_perplexity(&g, u) };
    let syntactic_spans = spans.pop().unwrap();
    let manifest = DataManifest {
        config_hash: cfg.data_hash(),
        seeds,
        counts,
        train_perplexity: nonempty_ppl(&train),
        heldout_perplexity: nonempty_ppl(&heldout),
        lexical_spans: spans.pop().unwrap(),
        syntactic_spans,
        consistency_switch_frames: cons.iter().map(|p| p.switch_frame).collect(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn hash_mismatch(what: &str, found: &str, expected: &str) -> Error {
    Error::config(format!(
        "config-hash mismatch for {what}: artifact has {found}, current config gives {expected}; rerun the producing command"
    ))
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.dir("data");
    let manifest: DataManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.config_hash != cfg.data_hash() {
        return Err(hash_mismatch("data", &manifest.config_hash, &cfg.data_hash()));
    }
    let (grammar, render) = cfg.world()?;
    let shard = |name: &str| read_shard(&dir.join(name));
    let pairs = |name: &str, spans: &[(usize, usize)]| -> Result<Vec<MinimalPair>> {
        let pos = shard(&format!("{name}.pos.shard"))?;
        let neg = shard(&format!("{name}.neg.shard"))?;
        if pos.len() != neg.len() || pos.len() != spans.len() {
            return Err(Error::format(&dir, format!("{name} pair shards disagree in length")));
        }
        Ok(pos
            .into_iter()
            .zip(neg)
            .zip(spans)
            .map(|((positive, negative), &span)| MinimalPair {
                positive,
                negative,
                span,
            })
            .collect())
    };
    let lexical = pairs("lexical", &manifest.lexical_spans)?;
    let syntactic = pairs("syntactic", &manifest.syntactic_spans)?;
    let cpos = shard("consistency.pos.shard")?;
    let cneg = shard("consistency.neg.shard")?;
    let consistency = cpos
        .into_iter()
        .zip(cneg)
        .zip(&manifest.consistency_switch_frames)
        .map(|((consistent, inconsistent), &switch_frame)| ConsistencyPair {
            consistent,
            inconsistent,
            switch_frame,
        })
        .collect();
    Ok(Dataset {
        grammar,
        render,
        train: shard("train.shard")?,
        heldout: shard("heldout.shard")?,
        lexical,
        syntactic,
        consistency,
        manifest,
    })
}

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

/// Train (or resume) the configured model on the generated corpus.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<Vec<StepRecord>> {
    let data = load_dataset(cfg)?;
    let dir = cfg.prepare_dir("train")?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let mut trainer = if resume {
        let ckpt = load_checkpoint(&ckpt_path)?;
        let found = ckpt.meta["run"]["model_hash"].as_str().unwrap_or_default().to_string();
        if found != cfg.model_hash() {
            return Err(hash_mismatch("checkpoint", &found, &cfg.model_hash()));
        }
        Trainer::resume(&ckpt, &cfg.train, &data.train)?
    } else {
        Trainer::new(&cfg.model, &cfg.train, &data.train)?
    };
    trainer.run_meta = serde_json::json!({"data_hash": cfg.data_hash(), "model_hash": cfg.model_hash()});
    info!("training {} steps from step {}", cfg.train.steps, trainer.step);
    let out = run_logged(trainer, Some(&dir))?;
    if let Some(last) = out.log.last() {
        info!("final step {}: total {:.4}", last.step, last.total);
    }
    Ok(out.log)
}

/// The fully trained model of this config.
pub fn load_trained_model(cfg: &RunConfig) -> Result<Model<f32>> {
    let ckpt = load_checkpoint(&cfg.dir("train").join(CHECKPOINT_FILE))?;
    let found = ckpt.meta["run"]["model_hash"].as_str().unwrap_or_default();
    if found != cfg.model_hash() {
        return Err(hash_mismatch("checkpoint", found, &cfg.model_hash()));
    }
    if ckpt.meta["step"].as_u64() != Some(cfg.train.steps as u64) {
        return Err(Error::config("checkpoint is from an unfinished run; resume training first"));
    }
    Model::from_checkpoint(&ckpt)
}

/// Held-out indices used as prompts: a seeded subset of utterances longer
/// than the prompt.
pub fn select_prompts(cfg: &RunConfig, heldout: &[Utterance]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..heldout.len())
        .filter(|&i| heldout[i].len() > cfg.eval.prompt_frames)
        .collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed_for("prompts")));
    idx.truncate(cfg.eval.prompts);
    idx
}

pub fn prompt_of(u: &Utterance, frames: usize) -> SeqRef<'_> {
    SeqRef {
        tokens: &u.tokens[..frames],
        frames: u.embeddings.slice(s![..frames, ..]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationRecord {
    pub prompt_index: usize,
    pub sample: usize,
    pub prompt_len: usize,
    pub frames: usize,
    pub stopped_by: StopReason,
}

/// Continuations of every prompt, `continuations_per_prompt` each. Sample `j`
/// of prompt `i` uses stream `i * per_prompt + j` of the generation seed.
pub fn generate_continuations(
    cfg: &RunConfig,
    model: &Model<f32>,
    render: &RenderSpec,
    heldout: &[Utterance],
    prompts: &[usize],
) -> Result<(Vec<(ContinuationRecord, Continuation)>, Counters)> {
    let source = if model.config.cfm_enabled {
        FrameSource::FlowHead
    } else {
        FrameSource::BlindRender(render)
    };
    let per = cfg.eval.continuations_per_prompt;
    let mut counters = Counters::default();
    let mut out = Vec::with_capacity(prompts.len() * per);
    for (i, &p) in prompts.iter().enumerate() {
        for j in 0..per {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.generation.seed);
            rng.set_stream((i * per + j) as u64);
            let prompt = prompt_of(&heldout[p], cfg.eval.prompt_frames);
            let c = continue_prompt(model, prompt, &cfg.generation, source, &mut rng, &mut counters)?;
            let rec = ContinuationRecord {
                prompt_index: p,
                sample: j,
                prompt_len: c.prompt_len,
                frames: c.tokens.len(),
                stopped_by: c.stopped_by,
            };
            out.push((rec, c));
        }
        if (i + 1) % 10 == 0 {
            info!("generated continuations for {} / {} prompts", i + 1, prompts.len());
        }
    }
    Ok((out, counters))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSidecar {
    pub config_hash: String,
    pub generation: GenerationConfig,
    pub source: String,
    pub records: Vec<ContinuationRecord>,
    pub frames: usize,
    pub extensions: usize,
    pub cfm_evals: usize,
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<GenerationSidecar> {
    let data = load_dataset(cfg)?;
    let model = load_trained_model(cfg)?;
    let dir = cfg.prepare_dir("generate")?;
    let prompts = select_prompts(cfg, &data.heldout);
    let (conts, counters) = generate_continuations(cfg, &model, &data.render, &data.heldout, &prompts)?;
    let utts: Vec<Utterance> = conts
        .iter()
        .map(|(r, c)| Utterance {
            tokens: c.tokens.clone(),
            embeddings: c.embeddings.clone(),
            attribute: data.heldout[r.prompt_index].attribute.clone(),
        })
        .collect();
    write_shard(&dir.join("continuations.shard"), &utts, data.render.embed_dim, data.render.attr_dim)?;
    let sidecar = GenerationSidecar {
        config_hash: cfg.eval_hash(),
        generation: cfg.generation.clone(),
        source: if model.config.cfm_enabled { "flow_head" } else { "blind_render" }.into(),
        records: conts.into_iter().map(|(r, _)| r).collect(),
        frames: counters.frames,
        extensions: counters.extensions,
        cfm_evals: counters.cfm_evals,
    };
    write_json(&dir.join("generate.json"), &sidecar)?;
    Ok(sidecar)
}

fn stack(frames: &[&Array2<f32>]) -> Array2<f64> {
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    concatenate(Axis(0), &views).expect("frame widths agree").mapv(|v| v as f64)
}

/// Metrics over continuations: grammar perplexity, speaker similarity to the
/// prompt, silence fraction, lengths, and frame/utterance Fréchet distances
/// against the held-out set.
pub fn continuation_metrics(
    report: &mut EvalReport,
    conts: &[(usize, Continuation)],
    data: &Dataset,
    prompt_frames: usize,
) -> Result<()> {
    let cs: Vec<Continuation> = conts.iter().map(|(_, c)| c.clone()).collect();
    report.insert("gen_ppl", gen_ppl(&cs, &data.grammar)?, cs.len());
    let mut sims = Vec::new();
    for (p, c) in conts {
        if c.embeddings.nrows() >= 4 {
            let prompt = data.heldout[*p].embeddings.slice(s![..prompt_frames, ..]);
            sims.push(speaker_similarity(prompt, c.embeddings.view(), &data.render)?);
        }
    }
    if !sims.is_empty() {
        report.insert("speaker_similarity", sims.iter().sum::<f64>() / sims.len() as f64, sims.len());
    }
    let n_tok: usize = cs.iter().map(|c| c.tokens.len()).sum();
    let n_sil = cs.iter().flat_map(|c| &c.tokens).filter(|&&t| t == SILENCE).count();
    report.insert("silence_fraction", n_sil as f64 / n_tok as f64, n_tok);
    report.insert("mean_continuation_frames", n_tok as f64 / cs.len() as f64, cs.len());
    let eos = cs.iter().filter(|c| c.stopped_by == StopReason::Eos).count();
    report.insert("eos_rate", eos as f64 / cs.len() as f64, cs.len());

    let gen_frames: Vec<&Array2<f32>> = cs.iter().map(|c| &c.embeddings).collect();
    let ref_frames: Vec<&Array2<f32>> = data.heldout.iter().map(|u| &u.embeddings).collect();
    let (gf, rf) = (stack(&gen_frames), stack(&ref_frames));
    match frechet_distance(gf.view(), rf.view()) {
        Ok(v) => report.insert("fsd_frame", v, gf.nrows()),
        Err(e) => warn!("frame-level Fréchet distance skipped: {e}"),
    }
    let (gm, rm) = (mean_frames(&gen_frames), mean_frames(&ref_frames));
    match frechet_distance(gm.view(), rm.view()) {
        Ok(v) => report.insert("fsd_utterance", v, gm.nrows()),
        Err(e) => warn!("utterance-level Fréchet distance skipped: {e}"),
    }
    Ok(())
}

/// Model metrics on the shared evaluation sets; empty sets are skipped.
pub fn model_metrics(report: &mut EvalReport, model: &Model<f32>, data: &Dataset) -> Result<()> {
    if !data.heldout.is_empty() {
        report.insert("heldout_ce", heldout_ce(model, &data.heldout)?, data.heldout.len());
    }
    if !data.lexical.is_empty() {
        report.insert("lexical_acc", model_paired_accuracy(model, &data.lexical)?, data.lexical.len());
    }
    if !data.syntactic.is_empty() {
        report.insert("syntactic_acc", model_paired_accuracy(model, &data.syntactic)?, data.syntactic.len());
    }
    if model.config.cfm_enabled && !data.consistency.is_empty() {
        let mut total = 0.0;
        for (i, p) in data.consistency.iter().enumerate() {
            total += acoustic_consistency_score(model, p, i as u64)?;
        }
        report.insert("consistency_acc", total / data.consistency.len() as f64, data.consistency.len());
    }
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let data = load_dataset(cfg)?;
    let prompts = select_prompts(cfg, &data.heldout);
    if prompts.is_empty() {
        return Err(Error::config("no held-out utterance is longer than eval.prompt_frames"));
    }
    let pf = cfg.eval.prompt_frames;
    let mut report = EvalReport::new(cfg.eval_hash(), cfg.seed);
    let conts: Vec<(usize, Continuation)> = if cfg.eval.ground_truth {
        prompts
            .iter()
            .map(|&p| {
                let u = &data.heldout[p];
                let c = Continuation {
                    prompt_tokens: u.tokens[..pf].to_vec(),
                    tokens: u.tokens[pf..].to_vec(),
                    embeddings: u.embeddings.slice(s![pf.., ..]).to_owned(),
                    prompt_len: pf,
                    stopped_by: StopReason::Eos,
                };
                (p, c)
            })
            .collect()
    } else {
        let model = load_trained_model(cfg)?;
        model_metrics(&mut report, &model, &data)?;
        let (conts, _) = generate_continuations(cfg, &model, &data.render, &data.heldout, &prompts)?;
        conts.into_iter().map(|(r, c)| (r.prompt_index, c)).collect()
    };
    report.insert("corpus_perplexity", data.manifest.heldout_perplexity, data.heldout.len());
    continuation_metrics(&mut report, &conts, &data, pf)?;
    let dir = cfg.prepare_dir("eval")?;
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub config_hash: String,
    pub base_model: ModelConfig,
    pub base_train: TrainConfig,
    pub grid: AblationGrid,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblationTable> {
    let data = load_dataset(cfg)?;
    let dir = cfg.prepare_dir("ablate")?;
    let seeds: Vec<u64> = (0..cfg.ablation.replicates)
        .map(|r| cfg.seed_for(&format!("ablate/{r}")))
        .collect();
    let shared = AblationData {
        train: &data.train,
        heldout: &data.heldout,
        lexical: &data.lexical,
        syntactic: &data.syntactic,
    };
    let rows = run_ablation(&cfg.ablation.grid, &cfg.model, &cfg.train, &shared, &seeds, |cell, seed, _| {
        info!("finished {} {} seed {seed}", cell.input_mode, cell.objective());
    })?;
    let table = AblationTable {
        config_hash: config_hash(&(cfg.data_hash(), &cfg.model, &cfg.train, &cfg.ablation)),
        base_model: cfg.model.clone(),
        base_train: cfg.train.clone(),
        grid: cfg.ablation.grid.clone(),
        seeds,
        rows,
    };
    write_json(&dir.join("table.json"), &table)?;
    let text = format_table(&table.rows);
    std::fs::write(dir.join("table.txt"), &text).map_err(|e| Error::io(dir.join("table.txt"), e))?;
    Ok(table)
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

pub fn read_ablation_table(path: &Path) -> Result<AblationTable> {
    read_json(path)
}

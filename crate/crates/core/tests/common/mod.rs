#![allow(dead_code)]

use tokflow::corpus::{generate_corpus, GrammarSpec, RenderConfig, RenderSpec, Utterance, WordClass};
use tokflow::model::{InputMode, ModelConfig};
use tokflow::train::TrainConfig;

/// Two one-word sentences with short silences; nearly deterministic.
pub fn toy_grammar() -> GrammarSpec {
    GrammarSpec {
        vocab_size: 16,
        lexicon: vec![vec![7, 9, 3, 12], vec![5, 4, 11]],
        word_classes: vec![WordClass::Subj, WordClass::Subj],
        templates: vec![vec![WordClass::Subj]],
        silence_mean: 0.5,
        continue_prob: 0.5,
        min_frames: 1,
        max_frames: 100,
        seed: 0,
    }
}

pub fn toy_render(embed_dim: usize) -> RenderSpec {
    let cfg = RenderConfig {
        embed_dim,
        token_dim: 4,
        attr_dim: 4,
        ..RenderConfig::default()
    };
    RenderSpec::generate(&cfg, 16, 3).unwrap()
}

pub fn toy_corpus(n: usize) -> Vec<Utterance> {
    generate_corpus(&toy_grammar(), &toy_render(16), n, 11)
}

pub fn tiny_model(input_mode: InputMode, cfm: bool) -> ModelConfig {
    ModelConfig {
        input_mode,
        d_model: 32,
        n_layers: 1,
        n_heads: 2,
        k_future: 1,
        cfm_enabled: cfm,
        cfm_blocks: 1,
        cfm_hidden: 32,
        vocab_size: 16,
        embed_dim: 16,
        time_embed_dim: 8,
        ..ModelConfig::default()
    }
}

pub fn short_run(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_utterances: 8,
        lr_peak: 3e-3,
        warmup_steps: steps / 10,
        checkpoint_every: 0,
        log_every: 1,
        seed: 5,
        ..TrainConfig::default()
    }
}

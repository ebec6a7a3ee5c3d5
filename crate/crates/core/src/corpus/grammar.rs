//! Probabilistic word grammar over semantic token ids, with an exact scorer.
//!
//! An utterance is a silence run, one or more sentences, a closing silence
//! run, then EOS. A sentence instantiates a template of word classes; every
//! word is a fixed token sequence from the lexicon; words are separated by
//! geometric silence runs. After each sentence another one follows with
//! probability `continue_prob`.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SILENCE: u16 = 0;
pub const EOS: u16 = 1;
/// Ids below this are reserved.
pub const FIRST_WORD_TOKEN: u16 = 2;
/// Substitution mass used by [`GrammarSpec::logprob`] for tokens the grammar
/// cannot produce.
pub const SMOOTHING: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum WordClass {
    Subj,
    Verb,
    Obj,
    Filler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrammarConfig {
    pub vocab_size: usize,
    pub n_words: usize,
    pub word_len_min: usize,
    pub word_len_max: usize,
    /// Number of distinct non-reserved ids the lexicon draws from (capped at
    /// `vocab_size - 2`). Small alphabets make words share bigrams, so telling
    /// a word from a non-word needs more than one token of context.
    pub alphabet_size: usize,
    /// Words per class, in SUBJ, VERB, OBJ, FILLER order. Must sum to `n_words`.
    pub class_sizes: [usize; 4],
    pub templates: Vec<Vec<WordClass>>,
    pub silence_mean: f64,
    pub continue_prob: f64,
    pub min_frames: usize,
    pub max_frames: usize,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        use WordClass::*;
        Self {
            vocab_size: 64,
            n_words: 40,
            word_len_min: 2,
            word_len_max: 4,
            alphabet_size: 12,
            class_sizes: [12, 10, 12, 6],
            templates: vec![vec![Subj, Verb, Obj], vec![Subj, Verb], vec![Filler, Subj, Verb, Obj]],
            silence_mean: 2.0,
            continue_prob: 0.6,
            min_frames: 20,
            max_frames: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarSpec {
    pub vocab_size: usize,
    /// Word id -> token sequence.
    pub lexicon: Vec<Vec<u16>>,
    /// Word id -> class.
    pub word_classes: Vec<WordClass>,
    pub templates: Vec<Vec<WordClass>>,
    pub silence_mean: f64,
    pub continue_prob: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    pub seed: u64,
}

/// Word-level plan of one utterance. `runs` holds the silence run lengths:
/// `runs[0]` precedes the first word and `runs[i + 1]` follows word `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    pub sentences: Vec<Sentence>,
    pub runs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub template: usize,
    pub words: Vec<usize>,
}

impl Transcript {
    pub fn words(&self) -> impl Iterator<Item = usize> + '_ {
        self.sentences.iter().flat_map(|s| s.words.iter().copied())
    }

    /// Token ids ending in EOS.
    pub fn tokens(&self, grammar: &GrammarSpec) -> Vec<u16> {
        let mut out = vec![SILENCE; self.runs[0]];
        for (i, w) in self.words().enumerate() {
            out.extend_from_slice(&grammar.lexicon[w]);
            out.extend(std::iter::repeat(SILENCE).take(self.runs[i + 1]));
        }
        out.push(EOS);
        out
    }

    /// Token span `[start, end)` of every word, in order.
    pub fn word_spans(&self, grammar: &GrammarSpec) -> Vec<(usize, usize)> {
        let mut pos = self.runs[0];
        let mut spans = Vec::new();
        for (i, w) in self.words().enumerate() {
            let len = grammar.lexicon[w].len();
            spans.push((pos, pos + len));
            pos += len + self.runs[i + 1];
        }
        spans
    }
}

impl GrammarSpec {
    pub fn generate(config: &GrammarConfig, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        if config.vocab_size < 3 {
            return Err(Error::config(format!(
                "vocab_size {} leaves no ids after the reserved silence and EOS ids",
                config.vocab_size
            )));
        }
        if config.word_len_min < 1 || config.word_len_max < config.word_len_min {
            return Err(Error::config("word length range is empty"));
        }
        if config.class_sizes.iter().sum::<usize>() != config.n_words {
            return Err(Error::config("class_sizes must sum to n_words"));
        }
        let alphabet_size = config.alphabet_size.min(config.vocab_size - 2).max(1);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut ids: Vec<u16> = (FIRST_WORD_TOKEN..config.vocab_size as u16).collect();
        ids.shuffle(&mut rng);
        ids.truncate(alphabet_size);

        let capacity: f64 = (config.word_len_min..=config.word_len_max)
            .map(|l| (alphabet_size as f64).powi(l as i32))
            .sum();
        if capacity < 2.0 * config.n_words as f64 {
            return Err(Error::config("alphabet too small for the requested lexicon"));
        }
        let mut seen = HashSet::new();
        let mut lexicon = Vec::with_capacity(config.n_words);
        while lexicon.len() < config.n_words {
            let len = rng.gen_range(config.word_len_min..=config.word_len_max);
            let word: Vec<u16> = (0..len).map(|_| *ids.choose(&mut rng).unwrap()).collect();
            if seen.insert(word.clone()) {
                lexicon.push(word);
            }
        }
        let classes = [WordClass::Subj, WordClass::Verb, WordClass::Obj, WordClass::Filler];
        let word_classes = classes
            .iter()
            .zip(config.class_sizes)
            .flat_map(|(&c, n)| std::iter::repeat(c).take(n))
            .collect();
        let spec = Self {
            vocab_size: config.vocab_size,
            lexicon,
            word_classes,
            templates: config.templates.clone(),
            silence_mean: config.silence_mean,
            continue_prob: config.continue_prob,
            min_frames: config.min_frames,
            max_frames: config.max_frames,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::config("vocab_size must be >= 3 (ids 0 and 1 are reserved)"));
        }
        if self.vocab_size > u16::MAX as usize {
            return Err(Error::config("vocab_size must fit in 16 bits"));
        }
        if self.lexicon.len() != self.word_classes.len() {
            return Err(Error::config("lexicon and word_classes differ in length"));
        }
        let mut seen = HashSet::new();
        for (i, w) in self.lexicon.iter().enumerate() {
            if w.is_empty() {
                return Err(Error::config(format!("word {i} is empty")));
            }
            if w.iter().any(|&t| t < FIRST_WORD_TOKEN || t as usize >= self.vocab_size) {
                return Err(Error::config(format!("word {i} uses a reserved or out-of-range id")));
            }
            if !seen.insert(w.clone()) {
                return Err(Error::config(format!("word {i} duplicates another lexicon entry")));
            }
        }
        if self.templates.is_empty() || self.templates.iter().any(|t| t.is_empty()) {
            return Err(Error::config("templates must be non-empty"));
        }
        for t in &self.templates {
            for c in t {
                if !self.word_classes.contains(c) {
                    return Err(Error::config(format!("template uses empty class {c:?}")));
                }
            }
        }
        if !(self.silence_mean >= 1.0) {
            return Err(Error::config("silence_mean must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.continue_prob) {
            return Err(Error::config("continue_prob must be in [0, 1)"));
        }
        if self.min_frames > self.max_frames {
            return Err(Error::config("min_frames exceeds max_frames"));
        }
        Ok(())
    }

    pub fn words_of(&self, class: WordClass) -> Vec<usize> {
        (0..self.lexicon.len())
            .filter(|&w| self.word_classes[w] == class)
            .collect()
    }

    pub fn is_word(&self, tokens: &[u16]) -> bool {
        self.lexicon.iter().any(|w| w == tokens)
    }

    fn silence_exit(&self) -> f64 {
        1.0 / self.silence_mean
    }

    fn run_length<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let exit = self.silence_exit();
        let mut len = 1;
        while rng.gen::<f64>() >= exit {
            len += 1;
        }
        len
    }

    fn sentence<R: Rng + ?Sized>(&self, rng: &mut R) -> Sentence {
        let template = rng.gen_range(0..self.templates.len());
        let words = self.templates[template]
            .iter()
            .map(|&c| *self.words_of(c).choose(rng).unwrap())
            .collect();
        Sentence { template, words }
    }

    /// One draw from the unconstrained process (no length bounds).
    pub fn sample_transcript_unbounded<R: Rng + ?Sized>(&self, rng: &mut R) -> Transcript {
        let mut sentences = vec![self.sentence(rng)];
        while rng.gen::<f64>() < self.continue_prob {
            sentences.push(self.sentence(rng));
        }
        let n_words: usize = sentences.iter().map(|s| s.words.len()).sum();
        let runs = (0..=n_words).map(|_| self.run_length(rng)).collect();
        Transcript { sentences, runs }
    }

    /// Rejection-samples a transcript whose token count (EOS included) lies in
    /// `[min_frames, max_frames]`.
    pub fn sample_transcript<R: Rng + ?Sized>(&self, rng: &mut R) -> Transcript {
        loop {
            let t = self.sample_transcript_unbounded(rng);
            let len = t.tokens(self).len();
            if (self.min_frames..=self.max_frames).contains(&len) {
                return t;
            }
        }
    }

    /// Log-probability that the grammar's token stream starts with `tokens`.
    ///
    /// Complete utterances end in EOS, so for them this is the full sequence
    /// log-probability. Each token may also be produced by a substitution with
    /// total mass [`SMOOTHING`] spread uniformly over the vocabulary, which
    /// keeps the value finite for arbitrary input. The empty sequence scores
    /// as a lone EOS.
    ///
    /// Length bounds used by [`Self::sample_transcript`] are not applied.
    pub fn logprob(&self, tokens: &[u16]) -> f64 {
        if tokens.is_empty() {
            return self.hmm().forward(&[EOS], SMOOTHING, self.vocab_size);
        }
        self.hmm().forward(tokens, SMOOTHING, self.vocab_size)
    }

    /// Whether `tokens` has nonzero probability without substitutions.
    pub fn parses(&self, tokens: &[u16]) -> bool {
        self.hmm().forward(tokens, 0.0, self.vocab_size).is_finite()
    }

    fn hmm(&self) -> Hmm {
        Hmm::compile(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Lead,
    Gap { template: usize, slot: usize },
    SentenceGap,
    Word { template: usize, slot: usize, word: usize, pos: usize },
    End,
}

/// The grammar unrolled into a token-emitting Markov chain.
struct Hmm {
    emit: Vec<u16>,
    trans: Vec<Vec<(usize, f64)>>,
    start: usize,
}

impl Hmm {
    fn compile(g: &GrammarSpec) -> Self {
        let mut states = vec![State::Lead, State::SentenceGap, State::End];
        for (ti, t) in g.templates.iter().enumerate() {
            for (slot, &class) in t.iter().enumerate() {
                if slot > 0 {
                    states.push(State::Gap { template: ti, slot });
                }
                for w in g.words_of(class) {
                    for pos in 0..g.lexicon[w].len() {
                        states.push(State::Word {
                            template: ti,
                            slot,
                            word: w,
                            pos,
                        });
                    }
                }
            }
        }
        let index = |s: &State| states.iter().position(|x| x == s).unwrap();
        let exit = g.silence_exit();
        let p_template = 1.0 / g.templates.len() as f64;
        let sentence_starts = |mass: f64| -> Vec<(State, f64)> {
            let mut out = Vec::new();
            for (ti, t) in g.templates.iter().enumerate() {
                let words = g.words_of(t[0]);
                for &w in &words {
                    out.push((
                        State::Word {
                            template: ti,
                            slot: 0,
                            word: w,
                            pos: 0,
                        },
                        mass * p_template / words.len() as f64,
                    ));
                }
            }
            out
        };
        let mut trans = Vec::with_capacity(states.len());
        let mut emit = Vec::with_capacity(states.len());
        for s in &states {
            let (e, next): (u16, Vec<(State, f64)>) = match *s {
                State::Lead => {
                    let mut v = vec![(State::Lead, 1.0 - exit)];
                    v.extend(sentence_starts(exit));
                    (SILENCE, v)
                }
                State::SentenceGap => {
                    let mut v = vec![(State::SentenceGap, 1.0 - exit)];
                    v.extend(sentence_starts(exit * g.continue_prob));
                    v.push((State::End, exit * (1.0 - g.continue_prob)));
                    (SILENCE, v)
                }
                State::Gap { template, slot } => {
                    let words = g.words_of(g.templates[template][slot]);
                    let mut v = vec![(s.clone_state(), 1.0 - exit)];
                    for &w in &words {
                        v.push((
                            State::Word {
                                template,
                                slot,
                                word: w,
                                pos: 0,
                            },
                            exit / words.len() as f64,
                        ));
                    }
                    (SILENCE, v)
                }
                State::Word {
                    template,
                    slot,
                    word,
                    pos,
                } => {
                    let tok = g.lexicon[word][pos];
                    let next = if pos + 1 < g.lexicon[word].len() {
                        State::Word {
                            template,
                            slot,
                            word,
                            pos: pos + 1,
                        }
                    } else if slot + 1 < g.templates[template].len() {
                        State::Gap {
                            template,
                            slot: slot + 1,
                        }
                    } else {
                        State::SentenceGap
                    };
                    (tok, vec![(next, 1.0)])
                }
                // nothing follows EOS; the self-loop only lets substitutions
                // absorb trailing garbage
                State::End => (EOS, vec![(State::End, 1.0)]),
            };
            emit.push(e);
            trans.push(next.iter().map(|(s, p)| (index(s), *p)).collect());
        }
        Self {
            emit,
            trans,
            start: index(&State::Lead),
        }
    }

    /// Scaled forward pass; returns the log prefix probability.
    fn forward(&self, tokens: &[u16], smoothing: f64, vocab: usize) -> f64 {
        let n = self.emit.len();
        let noise = smoothing / vocab as f64;
        let emission = |s: usize, tok: u16| {
            if self.emit[s] == tok {
                1.0 - smoothing + noise
            } else {
                noise
            }
        };
        let mut alpha = vec![0.0; n];
        alpha[self.start] = emission(self.start, tokens[0]);
        let mut logp = 0.0;
        let mut next = vec![0.0; n];
        for (step, &tok) in tokens.iter().enumerate() {
            if step > 0 {
                next.iter_mut().for_each(|v| *v = 0.0);
                for (s, &a) in alpha.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    for &(t, p) in &self.trans[s] {
                        next[t] += a * p;
                    }
                }
                for (s, v) in next.iter_mut().enumerate() {
                    *v *= emission(s, tok);
                }
                std::mem::swap(&mut alpha, &mut next);
            }
            let z: f64 = alpha.iter().sum();
            if z == 0.0 {
                return f64::NEG_INFINITY;
            }
            logp += z.ln();
            alpha.iter_mut().for_each(|v| *v /= z);
        }
        logp
    }
}

impl State {
    fn clone_state(&self) -> State {
        *self
    }
}

//! Synthetic speech-like corpus: grammar-driven token streams rendered into
//! continuous frames, plus minimal-pair and attribute-switch benchmark sets.

mod grammar;
mod render;
pub mod shard;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use grammar::{
    GrammarConfig, GrammarSpec, Sentence, Transcript, WordClass, EOS, FIRST_WORD_TOKEN, SILENCE, SMOOTHING,
};
pub use render::{Latents, RenderConfig, RenderSpec};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub tokens: Vec<u16>,
    /// `M × embed_dim`.
    pub embeddings: Array2<f32>,
    pub attribute: Vec<f32>,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn rendered(tokens: Vec<u16>, frames: Array2<f64>, attribute: &[f64]) -> Self {
        Self {
            tokens,
            embeddings: frames.mapv(|v| v as f32),
            attribute: attribute.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// RNG for item `index` of a stream rooted at `seed`.
pub fn item_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(index as u64))
}

pub fn sample_utterance<R: Rng + ?Sized>(grammar: &GrammarSpec, render: &RenderSpec, rng: &mut R) -> Utterance {
    let tokens = grammar.sample_transcript(rng).tokens(grammar);
    let lat = render.draw_latents(tokens.len(), rng);
    let x = render.render(&tokens, &lat);
    Utterance::rendered(tokens, x, &lat.attribute)
}

/// `n` independent utterances; utterance `i` uses the stream `seed + i`.
pub fn generate_corpus(grammar: &GrammarSpec, render: &RenderSpec, n: usize, seed: u64) -> Vec<Utterance> {
    (0..n)
        .map(|i| sample_utterance(grammar, render, &mut item_rng(seed, i)))
        .collect()
}

/// The encoder seam: generated utterances already carry their encoding.
pub fn encode(utterance: &Utterance) -> (&[u16], ArrayView2<'_, f32>) {
    (&utterance.tokens, utterance.embeddings.view())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Lexical,
    Syntactic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimalPair {
    pub positive: Utterance,
    pub negative: Utterance,
    /// Perturbed token span `[start, end)`.
    pub span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimalPairSet {
    pub kind: PairKind,
    pub pairs: Vec<MinimalPair>,
}

const PAIR_ATTEMPTS: usize = 200;

/// Non-word obtained by changing one token of `word`. Replacements that some
/// lexicon word carries at the same position are preferred, so negatives
/// look locally plausible.
fn non_word<R: Rng + ?Sized>(grammar: &GrammarSpec, word: &[u16], rng: &mut R) -> Option<Vec<u16>> {
    let pos = rng.gen_range(0..word.len());
    let mut plausible: Vec<u16> = grammar
        .lexicon
        .iter()
        .filter_map(|w| w.get(pos).copied())
        .filter(|&t| t != word[pos])
        .collect();
    plausible.sort_unstable();
    plausible.dedup();
    plausible.shuffle(rng);
    let mut any: Vec<u16> = (FIRST_WORD_TOKEN..grammar.vocab_size as u16)
        .filter(|&t| t != word[pos])
        .collect();
    any.shuffle(rng);
    plausible.into_iter().chain(any).find_map(|t| {
        let mut cand = word.to_vec();
        cand[pos] = t;
        (!grammar.is_word(&cand)).then_some(cand)
    })
}

fn lexical_negative<R: Rng + ?Sized>(
    grammar: &GrammarSpec,
    transcript: &Transcript,
    tokens: &[u16],
    rng: &mut R,
) -> Option<(Vec<u16>, (usize, usize))> {
    let spans = transcript.word_spans(grammar);
    let &(a, b) = spans.choose(rng)?;
    let replacement = non_word(grammar, &tokens[a..b], rng)?;
    let mut neg = tokens.to_vec();
    neg[a..b].copy_from_slice(&replacement);
    Some((neg, (a, b)))
}

fn syntactic_negative<R: Rng + ?Sized>(
    grammar: &GrammarSpec,
    transcript: &Transcript,
    rng: &mut R,
) -> Option<(Vec<u16>, (usize, usize))> {
    let candidates: Vec<usize> = (0..transcript.sentences.len())
        .filter(|&s| transcript.sentences[s].words.len() >= 2)
        .collect();
    let &s = candidates.choose(rng)?;
    let first: usize = transcript.sentences[..s].iter().map(|x| x.words.len()).sum();
    let n = transcript.sentences[s].words.len();
    let spans = transcript.word_spans(grammar);
    let span = (spans[first].0, spans[first + n - 1].1);
    let original = transcript.sentences[s].words.clone();
    let mut orders = vec![original.iter().rev().copied().collect::<Vec<_>>()];
    for _ in 0..8 {
        let mut o = original.clone();
        o.shuffle(rng);
        orders.push(o);
    }
    for order in orders {
        let classes: Vec<WordClass> = order.iter().map(|&w| grammar.word_classes[w]).collect();
        if order == original || grammar.templates.contains(&classes) {
            continue;
        }
        let mut t = transcript.clone();
        t.sentences[s].words = order;
        let toks = t.tokens(grammar);
        if !grammar.parses(&toks) {
            return Some((toks, span));
        }
    }
    None
}

/// Matched positive/negative pairs; pair `i` uses the stream `seed + i`.
pub fn make_minimal_pairs(
    grammar: &GrammarSpec,
    render: &RenderSpec,
    kind: PairKind,
    n_pairs: usize,
    seed: u64,
) -> Result<MinimalPairSet> {
    let mut pairs = Vec::with_capacity(n_pairs);
    for index in 0..n_pairs {
        let mut rng = item_rng(seed, index);
        let mut found = None;
        for _ in 0..PAIR_ATTEMPTS {
            let transcript = grammar.sample_transcript(&mut rng);
            let tokens = transcript.tokens(grammar);
            let neg = match kind {
                PairKind::Lexical => lexical_negative(grammar, &transcript, &tokens, &mut rng),
                PairKind::Syntactic => syntactic_negative(grammar, &transcript, &mut rng),
            };
            if let Some((negative, span)) = neg {
                if grammar.parses(&negative) {
                    continue;
                }
                found = Some((tokens, negative, span));
                break;
            }
        }
        let (tokens, negative, span) = found.ok_or_else(|| Error::Generation {
            index,
            msg: format!("no valid {kind:?} negative after {PAIR_ATTEMPTS} attempts"),
        })?;
        let lat = render.draw_latents(tokens.len(), &mut rng);
        let pos_x = render.render(&tokens, &lat);
        let neg_x = render.render(&negative, &lat);
        pairs.push(MinimalPair {
            positive: Utterance::rendered(tokens, pos_x, &lat.attribute),
            negative: Utterance::rendered(negative, neg_x, &lat.attribute),
            span,
        });
    }
    Ok(MinimalPairSet { kind, pairs })
}

/// Same tokens and noise; the negative changes speaker at a word boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyPair {
    pub consistent: Utterance,
    pub inconsistent: Utterance,
    pub switch_frame: usize,
}

pub fn make_consistency_pairs(
    grammar: &GrammarSpec,
    render: &RenderSpec,
    n_pairs: usize,
    seed: u64,
) -> Vec<ConsistencyPair> {
    (0..n_pairs)
        .map(|index| {
            let mut rng = item_rng(seed, index);
            let transcript = grammar.sample_transcript(&mut rng);
            let tokens = transcript.tokens(grammar);
            let lat = render.draw_latents(tokens.len(), &mut rng);
            let spans = transcript.word_spans(grammar);
            // the word starting closest to the middle
            let mid = tokens.len() / 2;
            let switch_frame = spans
                .iter()
                .map(|s| s.0)
                .filter(|&s| s > 0)
                .min_by_key(|&s| s.abs_diff(mid))
                .unwrap_or(mid);
            let n = render.n_speakers();
            let current = (0..n).find(|&s| render.speaker(s) == lat.attribute).unwrap_or(0);
            let other = (current + rng.gen_range(1..n)) % n;
            let other_attr = render.speaker(other);
            let attrs: Vec<&[f64]> = (0..tokens.len())
                .map(|m| {
                    if m < switch_frame {
                        lat.attribute.as_slice()
                    } else {
                        other_attr.as_slice()
                    }
                })
                .collect();
            let consistent = Utterance::rendered(tokens.clone(), render.render(&tokens, &lat), &lat.attribute);
            let inconsistent =
                Utterance::rendered(tokens.clone(), render.render_varying(&tokens, &attrs, &lat.noise), &lat.attribute);
            ConsistencyPair {
                consistent,
                inconsistent,
                switch_frame,
            }
        })
        .collect()
}

/// Per-token grammar perplexity of complete utterances.
pub fn corpus_perplexity(grammar: &GrammarSpec, utterances: &[Utterance]) -> f64 {
    let (lp, n) = utterances
        .iter()
        .fold((0.0, 0usize), |(lp, n), u| (lp + grammar.logprob(&u.tokens), n + u.len()));
    (-lp / n as f64).exp()
}

/// Accuracy of a linear probe reading `z_{m+1}` from `x_m`: least-squares
/// map (with bias) from frames to codebook space, fitted on `train`, then the
/// nearest codebook row on `test`.
pub fn next_token_probe_accuracy(render: &RenderSpec, train: &[Utterance], test: &[Utterance]) -> Result<f64> {
    let d = render.embed_dim;
    let k = render.token_dim;
    let pairs = |us: &[Utterance]| -> Vec<(Vec<f64>, u16)> {
        us.iter()
            .flat_map(|u| {
                (0..u.len().saturating_sub(1)).map(move |m| {
                    let mut x: Vec<f64> = u.embeddings.row(m).iter().map(|&v| v as f64).collect();
                    x.push(1.0);
                    (x, u.tokens[m + 1])
                })
            })
            .collect()
    };
    let (tr, te) = (pairs(train), pairs(test));
    if tr.len() <= d + 1 || te.is_empty() {
        return Err(Error::contract("probe needs more training frames than dimensions, and test frames"));
    }
    let mut xtx = nalgebra::DMatrix::<f64>::zeros(d + 1, d + 1);
    let mut xty = nalgebra::DMatrix::<f64>::zeros(d + 1, k);
    for (x, z) in &tr {
        let cb = render.token_codebook.row(*z as usize);
        for i in 0..=d {
            for j in 0..=d {
                xtx[(i, j)] += x[i] * x[j];
            }
            for j in 0..k {
                xty[(i, j)] += x[i] * cb[j];
            }
        }
    }
    let w = xtx
        .cholesky()
        .ok_or_else(|| Error::config("probe design matrix is singular"))?
        .solve(&xty);
    let mut correct = 0usize;
    for (x, z) in &te {
        let y: Vec<f64> = (0..k).map(|j| (0..=d).map(|i| x[i] * w[(i, j)]).sum()).collect();
        let best = render
            .token_codebook
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .unwrap();
        correct += usize::from(best == *z as usize);
    }
    Ok(correct as f64 / te.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> (GrammarSpec, RenderSpec) {
        let g = GrammarSpec::generate(&GrammarConfig::default(), 11).unwrap();
        let r = RenderSpec::generate(&RenderConfig::default(), g.vocab_size, 12).unwrap();
        (g, r)
    }

    #[test]
    fn corpus_is_deterministic_and_valid() {
        let (g, r) = specs();
        let a = generate_corpus(&g, &r, 20, 5);
        let b = generate_corpus(&g, &r, 20, 5);
        assert_eq!(a, b);
        for u in &a {
            assert_eq!(u.embeddings.nrows(), u.len());
            assert_eq!(*u.tokens.last().unwrap(), EOS);
            assert!(g.parses(&u.tokens));
        }
        let (t, x) = encode(&a[0]);
        assert_eq!(t, a[0].tokens.as_slice());
        assert_eq!(x, a[0].embeddings.view());
    }

    #[test]
    fn lexical_pairs_are_valid() {
        let (g, r) = specs();
        let set = make_minimal_pairs(&g, &r, PairKind::Lexical, 100, 3).unwrap();
        assert_eq!(set.pairs.len(), 100);
        for p in &set.pairs {
            let (a, b) = p.span;
            assert_eq!(p.positive.len(), p.negative.len());
            assert!(g.is_word(&p.positive.tokens[a..b]));
            assert!(!g.is_word(&p.negative.tokens[a..b]));
            assert_eq!(p.positive.tokens[..a], p.negative.tokens[..a]);
            assert_eq!(p.positive.tokens[b..], p.negative.tokens[b..]);
            assert!(!g.parses(&p.negative.tokens));
            assert!(g.logprob(&p.positive.tokens) > g.logprob(&p.negative.tokens));
        }
    }

    #[test]
    fn syntactic_pairs_are_valid() {
        let (g, r) = specs();
        let set = make_minimal_pairs(&g, &r, PairKind::Syntactic, 100, 4).unwrap();
        for p in &set.pairs {
            let (a, b) = p.span;
            assert_eq!(p.positive.len(), p.negative.len());
            assert_eq!(p.positive.tokens[..a], p.negative.tokens[..a]);
            assert_eq!(p.positive.tokens[b..], p.negative.tokens[b..]);
            assert!(g.parses(&p.positive.tokens));
            assert!(!g.parses(&p.negative.tokens));
        }
    }

    #[test]
    fn zero_pairs_is_empty() {
        let (g, r) = specs();
        assert!(make_minimal_pairs(&g, &r, PairKind::Syntactic, 0, 0).unwrap().pairs.is_empty());
    }

    #[test]
    fn exhausted_perturbations_name_the_pair() {
        // single two-word template whose only reorderings are also templates
        let (mut g, r) = specs();
        use WordClass::*;
        g.templates = vec![vec![Subj, Verb], vec![Verb, Subj]];
        let err = make_minimal_pairs(&g, &r, PairKind::Syntactic, 1, 0).unwrap_err();
        assert!(matches!(err, Error::Generation { index: 0, .. }));
    }

    #[test]
    fn consistency_pairs_share_tokens_and_switch_once() {
        let (g, r) = specs();
        for p in make_consistency_pairs(&g, &r, 20, 8) {
            assert_eq!(p.consistent.tokens, p.inconsistent.tokens);
            let m = p.switch_frame;
            assert!(m > 0 && m < p.consistent.len());
            assert_eq!(
                p.consistent.embeddings.slice(ndarray::s![..m, ..]),
                p.inconsistent.embeddings.slice(ndarray::s![..m, ..])
            );
            assert_ne!(p.consistent.embeddings.row(m), p.inconsistent.embeddings.row(m));
        }
    }
}

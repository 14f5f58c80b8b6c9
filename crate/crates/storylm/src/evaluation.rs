//! Automatic metrics and diagnostic protocols: perplexity, BLEU-1/2,
//! knowledge coverage, repetition-4, distinct-4, beginning/logic ranking,
//! relation ranking, and the story-type classifier report.
//!
//! Every metric is deterministic given `(model, data, seed)`; per-item
//! randomness derives from the item index so items can be scored in
//! parallel without changing results. Perplexity ranking ties count as
//! incorrect.

use crate::corpus::{LabeledStory, Story};
use crate::knowledge::{KnowledgeTriple, RelationEvalItem};
use crate::model::{classify_story, ModelError, ModelParams, N_CLASSES};
use crate::parallel;
use crate::rng::derive_rng;
use crate::tokenizer::Tokenizer;
use crate::training::{self, TrainError};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metric {metric} needs non-empty input")]
    EmptyInput { metric: &'static str },
    #[error("bleu: {hyps} hypotheses vs {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("distinct-4: corpus contains no 4-grams")]
    NoNgrams,
    #[error("beginning ranking needs at least 10 stories, got {0}")]
    PoolTooSmall(usize),
    #[error("logic ranking needs 5-sentence stories; story {id:?} has {n}")]
    WrongSentenceCount { id: String, n: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// The automatic-metric record for one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ppl: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub coverage: f64,
    pub repetition4_pct: f64,
    pub distinct4_pct: f64,
    pub n_stories: usize,
}

/// N-gram unit for repetition/distinct: BPE tokens match the tokenization
/// the model sees; whitespace words are available for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NgramMode {
    BpeTokens,
    Words,
}

/// Total negative log likelihood and token count of one text under the
/// model, over `[EOT] ++ encode(text) ++ [EOT]` (the training framing: the
/// text's tokens plus its termination).
fn text_nll(params: &ModelParams, tokenizer: &Tokenizer, text: &str) -> Result<(f64, usize), EvalError> {
    let seq = training::to_training_sequence(tokenizer, text);
    let (nll, count) = training::lm_nll_total(params, &[&seq])?;
    Ok((nll, count))
}

/// Per-text perplexity: `exp(mean per-token NLL)`.
fn text_ppl(params: &ModelParams, tokenizer: &Tokenizer, text: &str) -> Result<f64, EvalError> {
    let (nll, count) = text_nll(params, tokenizer, text)?;
    Ok((nll / count as f64).exp())
}

/// Corpus perplexity: exp of the mean per-token negative log likelihood over
/// all tokens of all texts.
pub fn perplexity(
    params: &ModelParams,
    tokenizer: &Tokenizer,
    texts: &[String],
) -> Result<f64, EvalError> {
    if texts.is_empty() {
        return Err(EvalError::EmptyInput {
            metric: "perplexity",
        });
    }
    let results = parallel::ordered_map(texts, |t| text_nll(params, tokenizer, t));
    let mut nll = 0.0;
    let mut count = 0usize;
    for r in results {
        let (l, n) = r?;
        nll += l;
        count += n;
    }
    Ok((nll / count as f64).exp())
}

fn word_tokens(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-n over whitespace words: clipped modified m-gram
/// precisions for m = 1..n, geometric mean with uniform weights, times the
/// brevity penalty `min(1, e^{1-r/c})`. No smoothing: a zero precision at
/// any order yields 0.
pub fn bleu_n(hypotheses: &[String], references: &[String], n: usize) -> Result<f64, EvalError> {
    if hypotheses.len() != references.len() {
        return Err(EvalError::LengthMismatch {
            hyps: hypotheses.len(),
            refs: references.len(),
        });
    }
    if hypotheses.is_empty() || n == 0 {
        return Err(EvalError::EmptyInput { metric: "bleu" });
    }
    let hyp_tokens: Vec<Vec<&str>> = hypotheses.iter().map(|h| word_tokens(h)).collect();
    let ref_tokens: Vec<Vec<&str>> = references.iter().map(|r| word_tokens(r)).collect();

    let c: usize = hyp_tokens.iter().map(|t| t.len()).sum();
    let r: usize = ref_tokens.iter().map(|t| t.len()).sum();
    if c == 0 {
        return Ok(0.0);
    }

    let mut log_precision_sum = 0.0;
    for m in 1..=n {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (hyp, reference) in hyp_tokens.iter().zip(&ref_tokens) {
            let hyp_counts = ngram_counts(hyp, m);
            let ref_counts = ngram_counts(reference, m);
            for (gram, &count) in &hyp_counts {
                total += count;
                matched += count.min(*ref_counts.get(gram).unwrap_or(&0));
            }
        }
        if matched == 0 || total == 0 {
            return Ok(0.0);
        }
        log_precision_sum += (matched as f64 / total as f64).ln();
    }
    let geo_mean = (log_precision_sum / n as f64).exp();
    let brevity_penalty = if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    Ok(geo_mean * brevity_penalty)
}

fn normalize_word(word: &str) -> Option<String> {
    let trimmed = word.trim_matches(|c: char| !c.is_ascii_alphanumeric());
    if trimmed.is_empty() {
        None
    } else {
        Some(trimmed.to_lowercase())
    }
}

fn normalized_words(text: &str) -> Vec<String> {
    text.split_whitespace().filter_map(normalize_word).collect()
}

fn phrase_occurs(story_words: &[String], phrase_words: &[String]) -> bool {
    if phrase_words.is_empty() || phrase_words.len() > story_words.len() {
        return false;
    }
    story_words
        .windows(phrase_words.len())
        .any(|w| w == phrase_words)
}

/// Average number of triples per story whose head AND tail both occur in
/// the story, as exact token-boundary phrase matches after lowercasing.
pub fn coverage(stories: &[String], triples: &[KnowledgeTriple]) -> f64 {
    if stories.is_empty() {
        return 0.0;
    }
    let phrases: Vec<(Vec<String>, Vec<String>)> = triples
        .iter()
        .map(|t| (normalized_words(&t.head), normalized_words(&t.tail)))
        .collect();
    let per_story = parallel::ordered_map(stories, |story| {
        let words = normalized_words(story);
        phrases
            .iter()
            .filter(|(head, tail)| phrase_occurs(&words, head) && phrase_occurs(&words, tail))
            .count()
    });
    per_story.iter().sum::<usize>() as f64 / stories.len() as f64
}

fn story_units(text: &str, tokenizer: &Tokenizer, mode: NgramMode) -> Vec<u32> {
    match mode {
        NgramMode::BpeTokens => tokenizer.encode(text),
        NgramMode::Words => {
            // Hash-cons words to ids; only equality matters for n-grams.
            let mut ids = HashMap::new();
            text.split_whitespace()
                .map(|w| {
                    let next = ids.len() as u32;
                    *ids.entry(w).or_insert(next)
                })
                .collect()
        }
    }
}

fn has_repeated_4gram(units: &[u32]) -> bool {
    let mut seen = HashSet::new();
    if units.len() < 4 {
        return false;
    }
    for w in units.windows(4) {
        if !seen.insert(w) {
            return true;
        }
    }
    false
}

/// Percentage of stories that repeat at least one 4-gram.
pub fn repetition_4(stories: &[String], tokenizer: &Tokenizer, mode: NgramMode) -> f64 {
    if stories.is_empty() {
        return 0.0;
    }
    let repetitive = parallel::ordered_map(stories, |s| {
        has_repeated_4gram(&story_units(s, tokenizer, mode))
    });
    100.0 * repetitive.iter().filter(|&&r| r).count() as f64 / stories.len() as f64
}

/// Ratio (as a percentage) of distinct 4-grams to all 4-grams across all
/// stories.
pub fn distinct_4(
    stories: &[String],
    tokenizer: &Tokenizer,
    mode: NgramMode,
) -> Result<f64, EvalError> {
    let mut unique: HashSet<[u32; 4]> = HashSet::new();
    let mut total = 0usize;
    for story in stories {
        let units = story_units(story, tokenizer, mode);
        if units.len() < 4 {
            continue;
        }
        for w in units.windows(4) {
            total += 1;
            unique.insert([w[0], w[1], w[2], w[3]]);
        }
    }
    if total == 0 {
        return Err(EvalError::NoNgrams);
    }
    Ok(100.0 * unique.len() as f64 / total as f64)
}

/// Outcome of a perplexity-ranking protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankingResult {
    pub accuracy: f64,
    pub n_items: usize,
    pub decisions: Vec<bool>,
}

impl RankingResult {
    fn from_decisions(decisions: Vec<bool>) -> Self {
        let correct = decisions.iter().filter(|&&d| d).count();
        Self {
            accuracy: correct as f64 / decisions.len() as f64,
            n_items: decisions.len(),
            decisions,
        }
    }
}

/// Beginning ranking: for each story, 9 negative beginnings are sampled
/// from other stories; the item is correct iff the true story has strictly
/// the lowest perplexity among the 10 variants.
pub fn beginning_ranking(
    params: &ModelParams,
    tokenizer: &Tokenizer,
    stories: &[Story],
    seed: u64,
) -> Result<RankingResult, EvalError> {
    if stories.len() < 10 {
        return Err(EvalError::PoolTooSmall(stories.len()));
    }
    let decisions = parallel::ordered_map_indexed(stories, |i, story| -> Result<bool, EvalError> {
        let mut rng = derive_rng(seed, "beginning-ranking", i as u64);
        let mut donors: Vec<usize> = Vec::with_capacity(9);
        while donors.len() < 9 {
            let d = rng.random_range(0..stories.len());
            if d != i && !donors.contains(&d) {
                donors.push(d);
            }
        }
        let true_ppl = text_ppl(params, tokenizer, &story.text())?;
        for &d in &donors {
            let mut sentences = story.sentences.clone();
            sentences[0] = stories[d].sentences[0].clone();
            let variant_ppl = text_ppl(params, tokenizer, &sentences.join(" "))?;
            if variant_ppl <= true_ppl {
                return Ok(false);
            }
        }
        Ok(true)
    });
    let decisions = decisions.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(RankingResult::from_decisions(decisions))
}

/// Logic ranking: four variants per story, each swapping one adjacent
/// sentence pair of the five-sentence story; correct iff the original has
/// strictly the lowest perplexity among the five candidates.
pub fn logic_ranking(
    params: &ModelParams,
    tokenizer: &Tokenizer,
    stories: &[Story],
) -> Result<RankingResult, EvalError> {
    for s in stories {
        if s.sentences.len() != 5 {
            return Err(EvalError::WrongSentenceCount {
                id: s.id.clone(),
                n: s.sentences.len(),
            });
        }
    }
    if stories.is_empty() {
        return Err(EvalError::EmptyInput {
            metric: "logic ranking",
        });
    }
    let decisions = parallel::ordered_map(stories, |story| -> Result<bool, EvalError> {
        let true_ppl = text_ppl(params, tokenizer, &story.text())?;
        for swap_at in 0..4 {
            let mut sentences = story.sentences.clone();
            sentences.swap(swap_at, swap_at + 1);
            let variant_ppl = text_ppl(params, tokenizer, &sentences.join(" "))?;
            if variant_ppl <= true_ppl {
                return Ok(false);
            }
        }
        Ok(true)
    });
    let decisions = decisions.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(RankingResult::from_decisions(decisions))
}

/// Relation-understanding scores: ranking accuracy plus pair-wise win rates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelationRankingResult {
    /// Percentage of items where the wrong-template sentence has strictly
    /// the highest perplexity of the three.
    pub accuracy_pct: f64,
    pub n_items: usize,
    /// Win rate (%) of correct over wrong: strictly lower perplexity.
    pub c_vs_w_pct: f64,
    /// Win rate (%) of training over correct.
    pub t_vs_c_pct: f64,
    /// Win rate (%) of training over wrong.
    pub t_vs_w_pct: f64,
}

pub fn relation_ranking(
    params: &ModelParams,
    tokenizer: &Tokenizer,
    eval_set: &[RelationEvalItem],
) -> Result<RelationRankingResult, EvalError> {
    if eval_set.is_empty() {
        return Err(EvalError::EmptyInput {
            metric: "relation ranking",
        });
    }
    let scored = parallel::ordered_map(eval_set, |item| -> Result<(f64, f64, f64), EvalError> {
        Ok((
            text_ppl(params, tokenizer, &item.training.text)?,
            text_ppl(params, tokenizer, &item.correct.text)?,
            text_ppl(params, tokenizer, &item.wrong.text)?,
        ))
    });
    let mut correct = 0usize;
    let mut c_vs_w = 0usize;
    let mut t_vs_c = 0usize;
    let mut t_vs_w = 0usize;
    let n = eval_set.len();
    for r in scored {
        let (t, c, w) = r?;
        if w > t && w > c {
            correct += 1;
        }
        if c < w {
            c_vs_w += 1;
        }
        if t < c {
            t_vs_c += 1;
        }
        if t < w {
            t_vs_w += 1;
        }
    }
    let pct = |x: usize| 100.0 * x as f64 / n as f64;
    Ok(RelationRankingResult {
        accuracy_pct: pct(correct),
        n_items: n,
        c_vs_w_pct: pct(c_vs_w),
        t_vs_c_pct: pct(t_vs_c),
        t_vs_w_pct: pct(t_vs_w),
    })
}

/// Classifier evaluation: per-class F1 on a labeled set and the predicted
/// type distribution of generated stories.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub f1: [f64; N_CLASSES],
    pub precision: [f64; N_CLASSES],
    pub recall: [f64; N_CLASSES],
    pub accuracy: f64,
    pub n_labeled: usize,
    /// Percentage of generated stories assigned to each class; zeros when
    /// no generated stories were provided.
    pub predicted_distribution_pct: [f64; N_CLASSES],
    pub n_generated: usize,
}

fn argmax4(probs: &[f64]) -> usize {
    (0..probs.len())
        .max_by(|&a, &b| probs[a].total_cmp(&probs[b]))
        .expect("non-empty probability vector")
}

/// Tokens a story classifier sees for raw text: the story's tokens plus the
/// end-of-text terminator, matching [`LabeledStory`]'s convention.
pub fn story_class_tokens(tokenizer: &Tokenizer, text: &str) -> Vec<u32> {
    let mut tokens = tokenizer.encode(text);
    tokens.push(tokenizer.end_of_text_id());
    tokens
}

pub fn classifier_report(
    params: &ModelParams,
    tokenizer: &Tokenizer,
    labeled: &[LabeledStory],
    generated: &[String],
) -> Result<ClassifierReport, EvalError> {
    if labeled.is_empty() {
        return Err(EvalError::EmptyInput {
            metric: "classifier report",
        });
    }
    let predictions = parallel::ordered_map(labeled, |story| -> Result<usize, EvalError> {
        Ok(argmax4(&classify_story(params, &story.tokens)?))
    });
    let mut true_pos = [0usize; N_CLASSES];
    let mut false_pos = [0usize; N_CLASSES];
    let mut false_neg = [0usize; N_CLASSES];
    let mut hits = 0usize;
    for (story, pred) in labeled.iter().zip(predictions) {
        let pred = pred?;
        let actual = story.label.index();
        if pred == actual {
            true_pos[actual] += 1;
            hits += 1;
        } else {
            false_pos[pred] += 1;
            false_neg[actual] += 1;
        }
    }
    let mut precision = [0.0; N_CLASSES];
    let mut recall = [0.0; N_CLASSES];
    let mut f1 = [0.0; N_CLASSES];
    for c in 0..N_CLASSES {
        let p_den = true_pos[c] + false_pos[c];
        let r_den = true_pos[c] + false_neg[c];
        precision[c] = if p_den == 0 {
            0.0
        } else {
            true_pos[c] as f64 / p_den as f64
        };
        recall[c] = if r_den == 0 {
            0.0
        } else {
            true_pos[c] as f64 / r_den as f64
        };
        f1[c] = if precision[c] + recall[c] == 0.0 {
            0.0
        } else {
            2.0 * precision[c] * recall[c] / (precision[c] + recall[c])
        };
    }

    let mut predicted_distribution_pct = [0.0; N_CLASSES];
    if !generated.is_empty() {
        let gen_preds = parallel::ordered_map(generated, |text| -> Result<usize, EvalError> {
            let tokens = story_class_tokens(tokenizer, text);
            Ok(argmax4(&classify_story(params, &tokens)?))
        });
        for pred in gen_preds {
            predicted_distribution_pct[pred?] += 1.0;
        }
        for v in &mut predicted_distribution_pct {
            *v *= 100.0 / generated.len() as f64;
        }
    }

    Ok(ClassifierReport {
        f1,
        precision,
        recall,
        accuracy: hits as f64 / labeled.len() as f64,
        n_labeled: labeled.len(),
        predicted_distribution_pct,
        n_generated: generated.len(),
    })
}

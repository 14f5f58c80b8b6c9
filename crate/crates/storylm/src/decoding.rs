//! Story generation by top-k temperature sampling.
//!
//! Logits are divided by the temperature first, everything outside the k
//! largest is masked, and the next token is drawn from the renormalized
//! softmax. Generation continues a leading context until K complete
//! sentences appear, end-of-text is sampled, or the token budget runs out.

use crate::corpus::segment_sentences;
use crate::model::{forward_lm, ModelError, ModelParams};
use crate::tokenizer::{Tokenizer, TokenizerError, END_OF_TEXT_ID};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("prompt needs {needed} tokens but the model accepts {budget}")]
    PromptTooLong { needed: usize, budget: usize },
    #[error("invalid generation config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// Sampling and stopping parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    /// Keep only the k most likely tokens.
    pub k: usize,
    /// Softmax temperature, applied before the top-k mask.
    pub temperature: f64,
    /// Stop after this many complete sentences.
    pub target_sentences: usize,
    /// Hard cap on generated tokens.
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            k: 40,
            temperature: 0.7,
            target_sentences: 4,
            max_tokens: 200,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.k == 0 {
            return Err(DecodeError::BadConfig("k must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(DecodeError::BadConfig("temperature must be > 0".into()));
        }
        if self.target_sentences == 0 {
            return Err(DecodeError::BadConfig(
                "target_sentences must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// A generated story: the prompt context and the K generated sentences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedStory {
    pub context: String,
    pub sentences: Vec<String>,
}

impl GeneratedStory {
    pub fn continuation_text(&self) -> String {
        self.sentences.join(" ")
    }
}

/// The token ids of the top-k set: the k largest logits, ties at the k-th
/// value broken toward the lower token id.
pub fn top_k_set(logits: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k.min(logits.len()));
    order
}

/// Samples the next token: temperature scaling, top-k mask, renormalized
/// softmax draw.
pub fn sample_next(logits: &[f64], config: &GenerationConfig, rng: &mut ChaCha8Rng) -> u32 {
    debug_assert!(config.k >= 1 && config.temperature > 0.0);
    let scaled: Vec<f64> = logits.iter().map(|v| v / config.temperature).collect();
    let kept = top_k_set(&scaled, config.k);
    if kept.len() == 1 {
        return kept[0] as u32;
    }
    let max = kept
        .iter()
        .map(|&i| scaled[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = kept.iter().map(|&i| (scaled[i] - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let draw = rng.random::<f64>() * total;
    let mut cumulative = 0.0;
    for (idx, w) in kept.iter().zip(&weights) {
        cumulative += w;
        if draw < cumulative {
            return *idx as u32;
        }
    }
    *kept.last().expect("k >= 1") as u32
}

/// Counts complete sentences (segments ending in terminal punctuation) in a
/// decoded continuation.
fn complete_sentences(text: &str) -> usize {
    segment_sentences(text)
        .iter()
        .filter(|s| s.ends_with(['.', '!', '?']))
        .count()
}

fn generate_from_prompt(
    params: &ModelParams,
    tokenizer: &Tokenizer,
    prompt: Vec<u32>,
    context: &str,
    config: &GenerationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GeneratedStory, DecodeError> {
    config.validate()?;
    let budget = params.config.max_seq_len;
    if prompt.len() >= budget {
        return Err(DecodeError::PromptTooLong {
            needed: prompt.len() + 1,
            budget,
        });
    }

    let prompt_len = prompt.len();
    let mut ids = prompt;
    let mut generated = 0usize;
    while generated < config.max_tokens && ids.len() < budget {
        let out = forward_lm(params, &ids)?;
        let v = params.config.vocab_size;
        let row = &out.logits.data()[(ids.len() - 1) * v..ids.len() * v];
        let next = sample_next(row, config, rng);
        if next == END_OF_TEXT_ID {
            break;
        }
        ids.push(next);
        generated += 1;
        let text = tokenizer.decode_lossy(&ids[prompt_len..])?;
        if complete_sentences(&text) >= config.target_sentences {
            break;
        }
    }

    let text = tokenizer.decode_lossy(&ids[prompt_len..])?;
    let mut sentences = segment_sentences(&text);
    // Keep the first K sentences; a trailing partial sentence is dropped.
    if sentences.len() > config.target_sentences {
        sentences.truncate(config.target_sentences);
    } else if let Some(last) = sentences.last() {
        if !last.ends_with(['.', '!', '?']) {
            sentences.pop();
        }
    }
    Ok(GeneratedStory {
        context: context.to_string(),
        sentences,
    })
}

/// Continues a one-sentence beginning into K sentences. The prompt is
/// `[EOT] ++ encode(context)`, matching the training framing; the returned
/// story holds only post-context sentences.
pub fn generate_story(
    params: &ModelParams,
    tokenizer: &Tokenizer,
    context: &str,
    config: &GenerationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GeneratedStory, DecodeError> {
    let mut prompt = vec![END_OF_TEXT_ID];
    prompt.extend(tokenizer.encode(context));
    generate_from_prompt(params, tokenizer, prompt, context, config, rng)
}

/// Zero-shot prompted generation used by the pretrain-only baseline: the
/// model is conditioned on example stories joined by end-of-text, then on
/// the beginning, and the first K generated sentences are returned. With no
/// examples this is exactly [`generate_story`].
pub fn generate_zero_shot(
    params: &ModelParams,
    tokenizer: &Tokenizer,
    example_stories: &[String],
    beginning: &str,
    config: &GenerationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GeneratedStory, DecodeError> {
    let mut prompt = vec![END_OF_TEXT_ID];
    for example in example_stories {
        prompt.extend(tokenizer.encode(example));
        prompt.push(END_OF_TEXT_ID);
    }
    prompt.extend(tokenizer.encode(beginning));
    if prompt.len() >= params.config.max_seq_len {
        return Err(DecodeError::PromptTooLong {
            needed: prompt.len() + 1,
            budget: params.config.max_seq_len,
        });
    }
    generate_from_prompt(params, tokenizer, prompt, beginning, config, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::derive_rng;
    use crate::model::ModelConfig;

    fn logits_desc(n: usize) -> Vec<f64> {
        // logits [2, 1, 0, -1, ...]
        (0..n).map(|i| 2.0 - i as f64).collect()
    }

    #[test]
    fn k_one_is_greedy_argmax() {
        let logits = vec![0.3, 2.5, -1.0, 2.4];
        let config = GenerationConfig {
            k: 1,
            ..GenerationConfig::default()
        };
        let mut rng = derive_rng(1, "decode", 0);
        for _ in 0..100 {
            assert_eq!(sample_next(&logits, &config, &mut rng), 1);
        }
    }

    #[test]
    fn samples_stay_inside_the_top_k_set() {
        let mut rng = derive_rng(2, "decode", 1);
        let logits: Vec<f64> = (0..50).map(|i| ((i * 7919) % 13) as f64 * 0.3).collect();
        let config = GenerationConfig {
            k: 5,
            temperature: 0.9,
            ..GenerationConfig::default()
        };
        let allowed: std::collections::HashSet<u32> = top_k_set(&logits, 5)
            .into_iter()
            .map(|i| i as u32)
            .collect();
        for _ in 0..10_000 {
            assert!(allowed.contains(&sample_next(&logits, &config, &mut rng)));
        }
    }

    #[test]
    fn ties_at_the_kth_value_prefer_lower_ids() {
        // Tokens 1 and 3 tie; with k = 2 the set must be {0, 1}.
        let logits = vec![5.0, 1.0, 0.0, 1.0];
        assert_eq!(top_k_set(&logits, 2), vec![0, 1]);
    }

    #[test]
    fn two_way_softmax_frequency_matches_analytic_value() {
        // logits [2,1,0,...], k=2, temperature 1: P(token 0) = e²/(e²+e¹).
        let logits = logits_desc(30);
        let config = GenerationConfig {
            k: 2,
            temperature: 1.0,
            ..GenerationConfig::default()
        };
        let mut rng = derive_rng(3, "decode", 2);
        let n = 100_000;
        let mut zeros = 0usize;
        for _ in 0..n {
            match sample_next(&logits, &config, &mut rng) {
                0 => zeros += 1,
                1 => {}
                other => panic!("token {other} outside top-2"),
            }
        }
        let expected = (2f64).exp() / ((2f64).exp() + (1f64).exp()); // ≈ 0.7311
        let observed = zeros as f64 / n as f64;
        assert!(
            (observed - expected).abs() < 0.02,
            "observed {observed}, expected {expected}"
        );
    }

    #[test]
    fn lowering_temperature_keeps_the_argmax() {
        let logits = vec![0.9, 2.1, -0.4, 1.3];
        for temperature in [2.0, 1.0, 0.5, 0.1] {
            let config = GenerationConfig {
                k: 1,
                temperature,
                ..GenerationConfig::default()
            };
            let mut rng = derive_rng(4, "decode", 3);
            assert_eq!(sample_next(&logits, &config, &mut rng), 1);
        }
    }

    #[test]
    fn full_vocab_unit_temperature_matches_model_distribution() {
        // With k = V and temperature 1 the empirical frequencies converge to
        // the softmax distribution; chi-square over a tiny vocab.
        let logits: Vec<f64> = vec![1.2, 0.3, -0.5, 0.8];
        let config = GenerationConfig {
            k: 4,
            temperature: 1.0,
            ..GenerationConfig::default()
        };
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();

        let mut rng = derive_rng(5, "decode", 4);
        let n = 200_000usize;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_next(&logits, &config, &mut rng) as usize] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .zip(&probs)
            .map(|(&c, &p)| {
                let expected = p * n as f64;
                (c as f64 - expected).powi(2) / expected
            })
            .sum();
        // 3 degrees of freedom; the 0.999 quantile is ≈ 16.27.
        assert!(chi2 < 16.27, "chi-square {chi2}");
    }

    fn small_model(seed: u64, vocab: usize) -> ModelParams {
        let config = ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: vocab,
            max_seq_len: 96,
            ..ModelConfig::default()
        };
        ModelParams::init(config, &mut derive_rng(seed, "decode-model", 0)).unwrap()
    }

    fn fixture_tokenizer() -> Tokenizer {
        Tokenizer::train(
            &["the cat sat. a dog ran. birds sing. night fell. rain came."],
            280,
        )
        .unwrap()
    }

    #[test]
    fn generated_story_has_at_most_k_sentences_and_no_context() {
        let tokenizer = fixture_tokenizer();
        let params = small_model(1, tokenizer.vocab_size());
        let config = GenerationConfig {
            k: 10,
            temperature: 1.0,
            target_sentences: 3,
            max_tokens: 60,
            seed: 0,
        };
        let mut rng = derive_rng(6, "decode", 5);
        let story =
            generate_story(&params, &tokenizer, "the cat sat.", &config, &mut rng).unwrap();
        assert!(story.sentences.len() <= 3);
        assert_eq!(story.context, "the cat sat.");
        assert!(!story.continuation_text().starts_with("the cat sat."));
    }

    #[test]
    fn generation_is_deterministic_given_seed() {
        let tokenizer = fixture_tokenizer();
        let params = small_model(2, tokenizer.vocab_size());
        let config = GenerationConfig {
            k: 8,
            temperature: 0.9,
            target_sentences: 2,
            max_tokens: 40,
            seed: 0,
        };
        let a = generate_story(
            &params,
            &tokenizer,
            "a dog ran.",
            &config,
            &mut derive_rng(7, "decode", 6),
        )
        .unwrap();
        let b = generate_story(
            &params,
            &tokenizer,
            "a dog ran.",
            &config,
            &mut derive_rng(7, "decode", 6),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_shot_without_examples_reduces_to_generate_story() {
        let tokenizer = fixture_tokenizer();
        let params = small_model(3, tokenizer.vocab_size());
        let config = GenerationConfig {
            k: 6,
            temperature: 1.0,
            target_sentences: 2,
            max_tokens: 30,
            seed: 0,
        };
        let a = generate_story(
            &params,
            &tokenizer,
            "birds sing.",
            &config,
            &mut derive_rng(8, "decode", 7),
        )
        .unwrap();
        let b = generate_zero_shot(
            &params,
            &tokenizer,
            &[],
            "birds sing.",
            &config,
            &mut derive_rng(8, "decode", 7),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overlong_prompt_names_the_budget() {
        let tokenizer = fixture_tokenizer();
        let params = small_model(4, tokenizer.vocab_size());
        let examples: Vec<String> = (0..40)
            .map(|_| "the cat sat. a dog ran. birds sing.".to_string())
            .collect();
        let err = generate_zero_shot(
            &params,
            &tokenizer,
            &examples,
            "night fell.",
            &GenerationConfig::default(),
            &mut derive_rng(9, "decode", 8),
        )
        .unwrap_err();
        match err {
            DecodeError::PromptTooLong { budget, .. } => {
                assert_eq!(budget, params.config.max_seq_len);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_sentence_target_returns_one_sentence() {
        let tokenizer = fixture_tokenizer();
        let params = small_model(5, tokenizer.vocab_size());
        let config = GenerationConfig {
            k: 6,
            temperature: 1.0,
            target_sentences: 1,
            max_tokens: 50,
            seed: 0,
        };
        let story = generate_story(
            &params,
            &tokenizer,
            "rain came.",
            &config,
            &mut derive_rng(10, "decode", 9),
        )
        .unwrap();
        assert!(story.sentences.len() <= 1);
    }
}

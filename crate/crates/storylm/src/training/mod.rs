//! The three-stage training framework: generic pretraining, knowledge
//! post-training, and multi-task fine-tuning.
//!
//! The first two stages are the same next-token objective on different data,
//! and share one loss implementation. Fine-tuning adds the 4-way story
//! classification loss: the language-modeling part is computed only on true
//! (D1) stories, the classification part on all four classes, combined as
//! `L_ST = L_LM + λ·L_CLS`. With λ = 0 the classification pass is skipped
//! entirely, so the trajectory is bit-identical to plain LM training.
//!
//! Batch items are processed as independent per-sequence graphs and reduced
//! in input order, so results do not depend on thread count.

mod adam;
mod checkpoint;

pub use adam::{adam_step, OptimizerState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, StageRecord};

use crate::corpus::{LabeledStory, StoryLabel};
use crate::model::{
    build_classifier_logits, build_lm_forward, ModelError, ModelParams, ParamNodes,
};
use crate::parallel;
use crate::rng::derive_rng;
use crate::tensor::{DropoutCtx, Graph, Tensor, TensorError};
use crate::tokenizer::Tokenizer;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient for parameter {param}; aborting step")]
    NonFiniteGradient { param: String },
    #[error("expected {expected} gradient tensors, got {got}")]
    GradCount { expected: usize, got: usize },
    #[error("fine-tuning batch contains no D1 (true) story; L_LM is undefined")]
    NoTrueStories,
    #[error("stage {stage:?} needs {expected} data")]
    StageDataMismatch { stage: Stage, expected: &'static str },
    #[error("{what} dataset is empty")]
    EmptyDataset { what: &'static str },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Training stage of the three-stage framework.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Pretrain,
    KnowledgePostTrain,
    FineTuneMultiTask,
}

/// Optimizer and schedule hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Scale factor λ on the classification loss during fine-tuning.
    pub lambda: f64,
    pub seed: u64,
    pub stage: Stage,
    /// Early-stopping patience in epochs without validation improvement.
    pub patience: usize,
    /// First epoch index of this run; nonzero when resuming, so the
    /// per-epoch shuffle streams continue where they left off.
    pub start_epoch: usize,
    /// Linearly decay the learning rate toward 10% across `epochs`.
    pub linear_lr_decay: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 10,
            epochs: 10,
            lambda: 0.05,
            seed: 0,
            stage: Stage::Pretrain,
            patience: 3,
            start_epoch: 0,
            linear_lr_decay: false,
        }
    }
}

impl TrainingConfig {
    fn effective_lr(&self, epoch: usize) -> f64 {
        if !self.linear_lr_decay || self.epochs <= 1 {
            return self.learning_rate;
        }
        let frac = (epoch - self.start_epoch) as f64 / self.epochs as f64;
        self.learning_rate * (1.0 - frac).max(0.1)
    }
}

/// Stage input: token sequences for the LM stages, labeled stories for
/// fine-tuning. Sequences must already carry the end-of-text framing (see
/// [`to_training_sequence`]).
pub enum StageData {
    Lm {
        train: Vec<Vec<u32>>,
        val: Vec<Vec<u32>>,
    },
    Multitask {
        train: Vec<LabeledStory>,
        val: Vec<LabeledStory>,
    },
}

/// Wraps a document for training and scoring: `[EOT] ++ encode(text) ++ [EOT]`.
/// The leading marker conditions the first token; the trailing one is the
/// termination target.
pub fn to_training_sequence(tokenizer: &Tokenizer, text: &str) -> Vec<u32> {
    let mut seq = Vec::new();
    seq.push(tokenizer.end_of_text_id());
    seq.extend(tokenizer.encode(text));
    seq.push(tokenizer.end_of_text_id());
    seq
}

/// The LM view of a labeled story: its tokens already end with end-of-text,
/// so only the leading marker is added.
fn labeled_lm_sequence(story: &LabeledStory) -> Vec<u32> {
    let mut seq = Vec::with_capacity(story.tokens.len() + 1);
    seq.push(crate::tokenizer::END_OF_TEXT_ID);
    seq.extend_from_slice(&story.tokens);
    seq
}

/// Dropout scheduling for one optimization step: each batch item derives its
/// own stream from `(seed, step, item)`.
#[derive(Clone, Copy)]
struct DropoutPlan {
    rate: f64,
    seed: u64,
    step: u64,
}

impl DropoutPlan {
    fn none() -> Self {
        Self {
            rate: 0.0,
            seed: 0,
            step: 0,
        }
    }

    fn rng_for(&self, item: usize) -> rand_chacha::ChaCha8Rng {
        derive_rng(
            self.seed,
            "dropout",
            self.step.wrapping_mul(1_000_003).wrapping_add(item as u64),
        )
    }
}

/// Per-sequence next-token loss and gradients.
fn lm_loss_one(
    params: &ModelParams,
    seq: &[u32],
    plan: DropoutPlan,
    item: usize,
) -> Result<(usize, f64, Vec<Tensor>), TrainError> {
    debug_assert!(seq.len() >= 2, "a sequence needs at least one target");
    let mut g = Graph::new();
    let pn = ParamNodes::insert(&mut g, params);
    let inputs = &seq[..seq.len() - 1];
    let targets = &seq[1..];
    let nodes = if plan.rate > 0.0 {
        let mut rng = plan.rng_for(item);
        let mut ctx = DropoutCtx {
            rate: plan.rate,
            rng: &mut rng,
        };
        build_lm_forward(&mut g, &params.config, &pn, inputs, Some(&mut ctx))?
    } else {
        build_lm_forward(&mut g, &params.config, &pn, inputs, None)?
    };
    let mask = vec![true; targets.len()];
    let loss = g.cross_entropy(nodes.logits, targets, &mask)?;
    let grads = g.backward(loss)?;
    Ok((
        targets.len(),
        g.value(loss).item(),
        pn.gradients(params, &grads),
    ))
}

fn accumulate_scaled(acc: &mut [Tensor], grads: &[Tensor], scale: f64) {
    for (a, g) in acc.iter_mut().zip(grads) {
        let dst = a.data_mut();
        for (d, s) in dst.iter_mut().zip(g.data()) {
            *d += s * scale;
        }
    }
}

fn zero_grads(params: &ModelParams) -> Vec<Tensor> {
    params
        .tensors()
        .into_iter()
        .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
        .collect()
}

fn lm_loss_batch_internal(
    params: &ModelParams,
    seqs: &[&[u32]],
    plan: DropoutPlan,
) -> Result<(f64, Vec<Tensor>), TrainError> {
    if seqs.is_empty() {
        return Err(TrainError::EmptyDataset { what: "batch" });
    }
    let results = parallel::ordered_map_indexed(seqs, |i, seq| lm_loss_one(params, seq, plan, i));
    let mut per_seq = Vec::with_capacity(results.len());
    let mut total_targets = 0usize;
    for r in results {
        let (n, loss, grads) = r?;
        total_targets += n;
        per_seq.push((n, loss, grads));
    }
    let mut loss = 0.0;
    let mut acc = zero_grads(params);
    for (n, l, grads) in per_seq {
        let w = n as f64 / total_targets as f64;
        loss += w * l;
        accumulate_scaled(&mut acc, &grads, w);
    }
    Ok((loss, acc))
}

/// Batch next-token loss with gradients: the token-weighted mean of
/// per-sequence masked cross entropies. Used identically by pretraining and
/// knowledge post-training — only the data differs.
pub fn lm_loss_batch(
    params: &ModelParams,
    seqs: &[&[u32]],
) -> Result<(f64, Vec<Tensor>), TrainError> {
    lm_loss_batch_internal(params, seqs, DropoutPlan::none())
}

/// Forward-only token-weighted LM loss, for validation and perplexity.
pub fn lm_loss_value(params: &ModelParams, seqs: &[&[u32]]) -> Result<f64, TrainError> {
    let (nll, count) = lm_nll_total(params, seqs)?;
    Ok(nll / count as f64)
}

/// Total negative log likelihood and target count over sequences.
pub fn lm_nll_total(params: &ModelParams, seqs: &[&[u32]]) -> Result<(f64, usize), TrainError> {
    if seqs.is_empty() {
        return Err(TrainError::EmptyDataset { what: "evaluation" });
    }
    let results = parallel::ordered_map(seqs, |seq| -> Result<(f64, usize), TrainError> {
        let mut g = Graph::new();
        let pn = ParamNodes::insert(&mut g, params);
        let inputs = &seq[..seq.len() - 1];
        let targets = &seq[1..];
        let nodes = build_lm_forward(&mut g, &params.config, &pn, inputs, None)?;
        let mask = vec![true; targets.len()];
        let loss = g.cross_entropy(nodes.logits, targets, &mask)?;
        Ok((g.value(loss).item() * targets.len() as f64, targets.len()))
    });
    let mut nll = 0.0;
    let mut count = 0;
    for r in results {
        let (l, n) = r?;
        nll += l;
        count += n;
    }
    Ok((nll, count))
}

/// Per-story classification loss and gradients.
fn cls_loss_one(
    params: &ModelParams,
    story: &LabeledStory,
    plan: DropoutPlan,
    item: usize,
) -> Result<(f64, Vec<Tensor>), TrainError> {
    let mut g = Graph::new();
    let pn = ParamNodes::insert(&mut g, params);
    let nodes = if plan.rate > 0.0 {
        let mut rng = plan.rng_for(item);
        let mut ctx = DropoutCtx {
            rate: plan.rate,
            rng: &mut rng,
        };
        build_lm_forward(&mut g, &params.config, &pn, &story.tokens, Some(&mut ctx))?
    } else {
        build_lm_forward(&mut g, &params.config, &pn, &story.tokens, None)?
    };
    let logits = build_classifier_logits(&mut g, &pn, nodes.hidden)?;
    let loss = g.cross_entropy(logits, &[story.label.index() as u32], &[true])?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item(), pn.gradients(params, &grads)))
}

fn cls_loss_value_one(params: &ModelParams, story: &LabeledStory) -> Result<f64, TrainError> {
    let mut g = Graph::new();
    let pn = ParamNodes::insert(&mut g, params);
    let nodes = build_lm_forward(&mut g, &params.config, &pn, &story.tokens, None)?;
    let logits = build_classifier_logits(&mut g, &pn, nodes.hidden)?;
    let loss = g.cross_entropy(logits, &[story.label.index() as u32], &[true])?;
    Ok(g.value(loss).item())
}

/// The three components of the fine-tuning objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultitaskLoss {
    /// `L_ST = L_LM + λ·L_CLS`.
    pub total: f64,
    /// Token-weighted next-token loss over the batch's D1 members.
    pub lm: f64,
    /// Mean classification loss over all batch members.
    pub cls: f64,
}

fn multitask_batch_internal(
    params: &ModelParams,
    batch: &[&LabeledStory],
    lambda: f64,
    plan: DropoutPlan,
) -> Result<(MultitaskLoss, Vec<Tensor>), TrainError> {
    let d1_seqs: Vec<Vec<u32>> = batch
        .iter()
        .filter(|s| s.label == StoryLabel::D1)
        .map(|s| labeled_lm_sequence(s))
        .collect();
    if d1_seqs.is_empty() {
        return Err(TrainError::NoTrueStories);
    }
    let d1_refs: Vec<&[u32]> = d1_seqs.iter().map(|s| s.as_slice()).collect();
    let (lm, mut grads) = lm_loss_batch_internal(params, &d1_refs, plan)?;

    // λ = 0 skips the classification pass entirely: the trajectory is then
    // bit-identical to plain LM training on the D1 members.
    if lambda == 0.0 {
        return Ok((
            MultitaskLoss {
                total: lm,
                lm,
                cls: 0.0,
            },
            grads,
        ));
    }

    let cls_plan = DropoutPlan {
        step: plan.step.wrapping_add(0x9e37_79b9),
        ..plan
    };
    let results = parallel::ordered_map_indexed(batch, |i, story| {
        cls_loss_one(params, story, cls_plan, i)
    });
    let n = batch.len() as f64;
    let mut cls = 0.0;
    for r in results {
        let (loss, g) = r?;
        cls += loss / n;
        accumulate_scaled(&mut grads, &g, lambda / n);
    }
    Ok((
        MultitaskLoss {
            total: lm + lambda * cls,
            lm,
            cls,
        },
        grads,
    ))
}

/// Fine-tuning batch loss with gradients: `L_LM` over the D1 members only,
/// `L_CLS` over every member, combined as `L_LM + λ·L_CLS`.
pub fn multitask_batch(
    params: &ModelParams,
    batch: &[&LabeledStory],
    lambda: f64,
) -> Result<(MultitaskLoss, Vec<Tensor>), TrainError> {
    multitask_batch_internal(params, batch, lambda, DropoutPlan::none())
}

/// Forward-only multitask loss over a dataset.
pub fn multitask_loss_value(
    params: &ModelParams,
    stories: &[LabeledStory],
    lambda: f64,
) -> Result<MultitaskLoss, TrainError> {
    let d1_seqs: Vec<Vec<u32>> = stories
        .iter()
        .filter(|s| s.label == StoryLabel::D1)
        .map(labeled_lm_sequence)
        .collect();
    if d1_seqs.is_empty() {
        return Err(TrainError::NoTrueStories);
    }
    let d1_refs: Vec<&[u32]> = d1_seqs.iter().map(|s| s.as_slice()).collect();
    let lm = lm_loss_value(params, &d1_refs)?;
    if lambda == 0.0 {
        return Ok(MultitaskLoss {
            total: lm,
            lm,
            cls: 0.0,
        });
    }
    let results = parallel::ordered_map(stories, |s| cls_loss_value_one(params, s));
    let mut cls = 0.0;
    let n = stories.len() as f64;
    for r in results {
        cls += r? / n;
    }
    Ok(MultitaskLoss {
        total: lm + lambda * cls,
        lm,
        cls,
    })
}

/// One epoch's train and validation losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Loss curve and best epoch of one stage run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl StageReport {
    /// Loss curve as CSV: `epoch,train_loss,val_loss`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_loss));
        }
        out
    }
}

/// Everything a stage run produces: the best-validation snapshot (what gets
/// checkpointed) and the final state (what a resumed run continues from).
pub struct StageOutcome {
    pub best_params: ModelParams,
    pub best_opt: OptimizerState,
    pub final_params: ModelParams,
    pub final_opt: OptimizerState,
    pub report: StageReport,
}

fn check_stage_data(stage: Stage, data: &StageData) -> Result<(), TrainError> {
    match (stage, data) {
        (Stage::Pretrain | Stage::KnowledgePostTrain, StageData::Lm { .. }) => Ok(()),
        (Stage::FineTuneMultiTask, StageData::Multitask { .. }) => Ok(()),
        (stage @ (Stage::Pretrain | Stage::KnowledgePostTrain), _) => {
            Err(TrainError::StageDataMismatch {
                stage,
                expected: "token-sequence (LM)",
            })
        }
        (stage, _) => Err(TrainError::StageDataMismatch {
            stage,
            expected: "labeled-story (multitask)",
        }),
    }
}

/// Groups labeled stories per origin id, preserving first-seen order. Each
/// fine-tuning batch holds whole groups, so every batch contains the D1
/// member of each story it touches.
fn group_by_origin(stories: &[LabeledStory]) -> Vec<Vec<usize>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: std::collections::HashMap<&str, Vec<usize>> = std::collections::HashMap::new();
    for (i, s) in stories.iter().enumerate() {
        let entry = groups.entry(&s.origin_id).or_default();
        if entry.is_empty() {
            order.push(s.origin_id.clone());
        }
        entry.push(i);
    }
    order
        .iter()
        .map(|id| groups.remove(id.as_str()).expect("group recorded"))
        .collect()
}

/// Runs one training stage: shuffled mini-batches per epoch, per-epoch train
/// and validation losses, early stopping, and best-checkpoint retention.
/// Fully deterministic given `(config, params, opt, data)`.
pub fn run_stage(
    config: &TrainingConfig,
    params: ModelParams,
    opt: Option<OptimizerState>,
    data: &StageData,
) -> Result<StageOutcome, TrainError> {
    check_stage_data(config.stage, data)?;
    let mut params = params;
    let mut opt = opt.unwrap_or_else(|| OptimizerState::new(&params));

    match data {
        StageData::Lm { train, val } => {
            if train.is_empty() {
                return Err(TrainError::EmptyDataset { what: "training" });
            }
            if val.is_empty() {
                return Err(TrainError::EmptyDataset { what: "validation" });
            }
        }
        StageData::Multitask { train, val } => {
            if train.is_empty() {
                return Err(TrainError::EmptyDataset { what: "training" });
            }
            if val.is_empty() {
                return Err(TrainError::EmptyDataset { what: "validation" });
            }
        }
    }

    let mut best_params = params.clone();
    let mut best_opt = opt.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = config.start_epoch;
    let mut stale_epochs = 0usize;
    let mut epochs = Vec::new();

    for epoch in config.start_epoch..config.start_epoch + config.epochs {
        let epoch_config = TrainingConfig {
            learning_rate: config.effective_lr(epoch),
            ..config.clone()
        };
        let plan_base = DropoutPlan {
            rate: params.config.dropout,
            seed: config.seed,
            step: 0,
        };
        let mut shuffle_rng = derive_rng(config.seed, "epoch-shuffle", epoch as u64);

        let (train_loss, val_loss) = match data {
            StageData::Lm { train, val } => {
                let mut order: Vec<usize> = (0..train.len()).collect();
                order.shuffle(&mut shuffle_rng);
                let mut nll = 0.0;
                let mut tokens = 0usize;
                for chunk in order.chunks(config.batch_size.max(1)) {
                    let seqs: Vec<&[u32]> =
                        chunk.iter().map(|&i| train[i].as_slice()).collect();
                    let plan = DropoutPlan {
                        step: opt.step,
                        ..plan_base
                    };
                    let (loss, grads) = lm_loss_batch_internal(&params, &seqs, plan)?;
                    adam_step(&mut params, &grads, &mut opt, &epoch_config)?;
                    let n: usize = seqs.iter().map(|s| s.len() - 1).sum();
                    nll += loss * n as f64;
                    tokens += n;
                }
                let val_refs: Vec<&[u32]> = val.iter().map(|s| s.as_slice()).collect();
                (nll / tokens as f64, lm_loss_value(&params, &val_refs)?)
            }
            StageData::Multitask { train, val } => {
                let groups = group_by_origin(train);
                let mut order: Vec<usize> = (0..groups.len()).collect();
                order.shuffle(&mut shuffle_rng);
                let mut loss_sum = 0.0;
                let mut members = 0usize;
                for chunk in order.chunks(config.batch_size.max(1)) {
                    let batch: Vec<&LabeledStory> = chunk
                        .iter()
                        .flat_map(|&gi| groups[gi].iter().map(|&i| &train[i]))
                        .collect();
                    let plan = DropoutPlan {
                        step: opt.step,
                        ..plan_base
                    };
                    let (loss, grads) =
                        multitask_batch_internal(&params, &batch, config.lambda, plan)?;
                    adam_step(&mut params, &grads, &mut opt, &epoch_config)?;
                    loss_sum += loss.total * batch.len() as f64;
                    members += batch.len();
                }
                let val_loss = multitask_loss_value(&params, val, config.lambda)?.total;
                (loss_sum / members as f64, val_loss)
            }
        };

        epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = params.clone();
            best_opt = opt.clone();
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= config.patience {
                break;
            }
        }
    }

    Ok(StageOutcome {
        best_params,
        best_opt,
        final_params: params,
        final_opt: opt,
        report: StageReport {
            stage: config.stage,
            epochs,
            best_epoch,
            best_val_loss: best_val,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_multitask_dataset, Story};
    use crate::derive_rng;
    use crate::model::ModelConfig;
    use approx::assert_abs_diff_eq;

    fn tiny_model(seed: u64, vocab: usize) -> ModelParams {
        let config = ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: vocab,
            max_seq_len: 64,
            ..ModelConfig::default()
        };
        ModelParams::init(config, &mut derive_rng(seed, "train-test", 0)).unwrap()
    }

    fn tok() -> Tokenizer {
        Tokenizer::train(
            &["the cat sat on the mat. a dog ran by the lake. birds sing in trees."],
            280,
        )
        .unwrap()
    }

    #[test]
    fn uniform_logit_model_has_ln_v_loss() {
        // Zeroing all weights makes logits identically zero: uniform.
        let mut params = tiny_model(1, 50);
        params.for_each_tensor_mut(&mut |t| {
            let data = t.data_mut();
            data.iter_mut().for_each(|v| *v = 0.0);
        });
        let seq: Vec<u32> = vec![0, 3, 7, 11, 2];
        let loss = lm_loss_value(&params, &[&seq]).unwrap();
        assert_abs_diff_eq!(loss, 50f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn lm_loss_matches_cross_entropy_oracle() {
        // The batch loss must equal the token-weighted mean of per-sequence
        // cross entropies computed independently.
        let params = tiny_model(2, 40);
        let seqs: Vec<Vec<u32>> = vec![vec![0, 5, 9, 3], vec![0, 1, 2, 3, 4, 5, 0]];
        let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
        let batch = lm_loss_value(&params, &refs).unwrap();

        let mut nll = 0.0;
        let mut count = 0usize;
        for seq in &seqs {
            let out = crate::model::forward_lm(&params, &seq[..seq.len() - 1]).unwrap();
            let v = params.config.vocab_size;
            for (t, &target) in seq[1..].iter().enumerate() {
                let row = &out.logits.data()[t * v..(t + 1) * v];
                let denom: f64 = row.iter().map(|x| (x - row[0]).exp()).sum();
                let p = (row[target as usize] - row[0]).exp() / denom;
                nll += -p.ln();
                count += 1;
            }
        }
        assert_abs_diff_eq!(batch, nll / count as f64, epsilon = 1e-9);
    }

    #[test]
    fn memorizing_one_sequence_drives_loss_toward_zero() {
        let mut params = tiny_model(3, 30);
        let seq: Vec<u32> = vec![0, 4, 9, 14, 19, 24, 0];
        let mut opt = OptimizerState::new(&params);
        let config = TrainingConfig {
            learning_rate: 3e-3,
            ..TrainingConfig::default()
        };
        let mut first = f64::NAN;
        let mut last = f64::NAN;
        for step in 0..250 {
            let (loss, grads) = lm_loss_batch(&params, &[&seq]).unwrap();
            if step == 0 {
                first = loss;
            }
            last = loss;
            adam_step(&mut params, &grads, &mut opt, &config).unwrap();
        }
        assert!(last < 0.05, "loss stayed at {last} (from {first})");
    }

    #[test]
    fn small_lr_training_strictly_decreases_loss_for_ten_steps() {
        let mut params = tiny_model(4, 30);
        let seq: Vec<u32> = vec![0, 7, 3, 11, 2, 9, 0];
        let mut opt = OptimizerState::new(&params);
        let config = TrainingConfig {
            learning_rate: 1e-4,
            ..TrainingConfig::default()
        };
        let mut prev = f64::INFINITY;
        for _ in 0..10 {
            let (loss, grads) = lm_loss_batch(&params, &[&seq]).unwrap();
            assert!(loss < prev, "loss {loss} did not decrease from {prev}");
            prev = loss;
            adam_step(&mut params, &grads, &mut opt, &config).unwrap();
        }
    }

    fn fixture_stories(n: usize) -> Vec<Story> {
        (0..n)
            .map(|i| Story {
                id: format!("s{i}"),
                sentences: vec![
                    format!("story {i} begins."),
                    format!("the cat {i} sat."),
                    format!("a dog {i} ran."),
                    format!("birds {i} sang."),
                    format!("night {i} fell."),
                ],
            })
            .collect()
    }

    #[test]
    fn multitask_loss_decomposition_is_exact() {
        let tokenizer = tok();
        let params = tiny_model(5, tokenizer.vocab_size());
        let stories = fixture_stories(3);
        let labeled = build_multitask_dataset(&stories, &tokenizer, 7).unwrap();
        let batch: Vec<&LabeledStory> = labeled.iter().collect();
        let lambda = 0.05;
        let (loss, _) = multitask_batch(&params, &batch, lambda).unwrap();
        assert!(
            (loss.total - loss.lm - lambda * loss.cls).abs() < 1e-12,
            "decomposition violated: {loss:?}"
        );
    }

    #[test]
    fn lambda_zero_equals_lm_loss_exactly() {
        let tokenizer = tok();
        let params = tiny_model(6, tokenizer.vocab_size());
        let stories = fixture_stories(2);
        let labeled = build_multitask_dataset(&stories, &tokenizer, 8).unwrap();
        let batch: Vec<&LabeledStory> = labeled.iter().collect();
        let (loss, grads) = multitask_batch(&params, &batch, 0.0).unwrap();
        assert_eq!(loss.total, loss.lm);
        assert_eq!(loss.cls, 0.0);

        // Bitwise identical to the plain LM loss on the D1 members.
        let d1_seqs: Vec<Vec<u32>> = labeled
            .iter()
            .filter(|s| s.label == StoryLabel::D1)
            .map(|s| super::labeled_lm_sequence(s))
            .collect();
        let d1_refs: Vec<&[u32]> = d1_seqs.iter().map(|s| s.as_slice()).collect();
        let (lm_loss, lm_grads) = lm_loss_batch(&params, &d1_refs).unwrap();
        assert_eq!(loss.total.to_bits(), lm_loss.to_bits());
        for (a, b) in grads.iter().zip(&lm_grads) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn batch_without_true_story_is_an_error() {
        let tokenizer = tok();
        let params = tiny_model(7, tokenizer.vocab_size());
        let stories = fixture_stories(2);
        let labeled = build_multitask_dataset(&stories, &tokenizer, 9).unwrap();
        let batch: Vec<&LabeledStory> = labeled
            .iter()
            .filter(|s| s.label != StoryLabel::D1)
            .collect();
        assert!(matches!(
            multitask_batch(&params, &batch, 0.05),
            Err(TrainError::NoTrueStories)
        ));
    }

    #[test]
    fn classifier_gradient_scales_linearly_with_lambda() {
        // L_LM never touches the classifier head, so its gradient under the
        // combined loss is exactly λ times the pure classification gradient.
        let tokenizer = tok();
        let params = tiny_model(8, tokenizer.vocab_size());
        let stories = fixture_stories(2);
        let labeled = build_multitask_dataset(&stories, &tokenizer, 10).unwrap();
        let batch: Vec<&LabeledStory> = labeled.iter().collect();

        let (_, grads_l1) = multitask_batch(&params, &batch, 1.0).unwrap();
        let lambda = 0.05;
        let (_, grads_l) = multitask_batch(&params, &batch, lambda).unwrap();

        // cls_w is the second-to-last tensor in visitor order.
        let n = grads_l.len();
        for idx in [n - 2, n - 1] {
            for (a, b) in grads_l[idx].data().iter().zip(grads_l1[idx].data()) {
                assert_abs_diff_eq!(*a, lambda * *b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn stage_data_mismatch_is_a_configuration_error() {
        let tokenizer = tok();
        let params = tiny_model(9, tokenizer.vocab_size());
        let config = TrainingConfig {
            stage: Stage::FineTuneMultiTask,
            epochs: 1,
            ..TrainingConfig::default()
        };
        let data = StageData::Lm {
            train: vec![vec![0, 1, 2]],
            val: vec![vec![0, 1, 2]],
        };
        assert!(matches!(
            run_stage(&config, params, None, &data),
            Err(TrainError::StageDataMismatch { .. })
        ));
    }

    #[test]
    fn pretrain_on_fixture_improves_validation_loss_over_first_epochs() {
        let tokenizer = tok();
        let mut params = tiny_model(10, tokenizer.vocab_size());
        params.config.max_seq_len = 32;
        let texts: Vec<String> = (0..50)
            .map(|i| match i % 3 {
                0 => "the cat sat on the mat.".to_string(),
                1 => "a dog ran by the lake.".to_string(),
                _ => "birds sing in trees.".to_string(),
            })
            .collect();
        let seqs: Vec<Vec<u32>> = texts
            .iter()
            .map(|t| to_training_sequence(&tokenizer, t))
            .collect();
        let config = TrainingConfig {
            learning_rate: 1e-3,
            batch_size: 10,
            epochs: 3,
            seed: 11,
            stage: Stage::Pretrain,
            patience: 10,
            ..TrainingConfig::default()
        };
        let data = StageData::Lm {
            train: seqs.clone(),
            val: seqs[..12].to_vec(),
        };
        let outcome = run_stage(&config, params, None, &data).unwrap();
        let e = &outcome.report.epochs;
        assert_eq!(e.len(), 3);
        assert!(e[1].val_loss < e[0].val_loss);
        assert!(e[2].val_loss < e[1].val_loss);
    }

    #[test]
    fn resume_from_checkpoint_matches_uninterrupted_run() {
        let tokenizer = tok();
        let params = tiny_model(11, tokenizer.vocab_size());
        let seqs: Vec<Vec<u32>> = (0..20)
            .map(|i| {
                to_training_sequence(
                    &tokenizer,
                    if i % 2 == 0 {
                        "the cat sat on the mat."
                    } else {
                        "a dog ran by the lake."
                    },
                )
            })
            .collect();
        let data = StageData::Lm {
            train: seqs.clone(),
            val: seqs[..5].to_vec(),
        };
        let base = TrainingConfig {
            learning_rate: 5e-4,
            batch_size: 5,
            epochs: 4,
            seed: 13,
            stage: Stage::Pretrain,
            patience: 100,
            ..TrainingConfig::default()
        };

        let straight = run_stage(&base, params.clone(), None, &data).unwrap();

        let first_half = TrainingConfig {
            epochs: 2,
            ..base.clone()
        };
        let part1 = run_stage(&first_half, params, None, &data).unwrap();

        // Round-trip the midpoint through a checkpoint file.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        let ckpt = Checkpoint {
            model: part1.final_params,
            opt: part1.final_opt,
            train_config: first_half.clone(),
            stage_history: vec![StageRecord {
                stage: Stage::Pretrain,
                epochs: 2,
            }],
            tokenizer_json: tokenizer.to_json(),
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        let second_half = TrainingConfig {
            epochs: 2,
            start_epoch: 2,
            ..base
        };
        let part2 = run_stage(&second_half, loaded.model, Some(loaded.opt), &data).unwrap();

        let mut combined: Vec<EpochStats> = part1.report.epochs;
        combined.extend(part2.report.epochs);
        assert_eq!(combined.len(), straight.report.epochs.len());
        for (a, b) in combined.iter().zip(&straight.report.epochs) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.val_loss.to_bits(), b.val_loss.to_bits());
        }
        assert_eq!(part2.final_params, straight.final_params);
    }

    #[test]
    fn run_stage_is_fully_deterministic() {
        let tokenizer = tok();
        let params = tiny_model(12, tokenizer.vocab_size());
        let seqs: Vec<Vec<u32>> = (0..12)
            .map(|_| to_training_sequence(&tokenizer, "the cat sat on the mat."))
            .collect();
        let config = TrainingConfig {
            epochs: 2,
            seed: 21,
            batch_size: 4,
            stage: Stage::Pretrain,
            ..TrainingConfig::default()
        };
        let data = StageData::Lm {
            train: seqs.clone(),
            val: seqs[..3].to_vec(),
        };
        let a = run_stage(&config, params.clone(), None, &data).unwrap();
        let b = run_stage(&config, params, None, &data).unwrap();
        assert_eq!(a.final_params, b.final_params);
        assert_eq!(a.report.epochs, b.report.epochs);
    }
}

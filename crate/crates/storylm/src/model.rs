//! The decoder-only transformer language model with a mean-pooled 4-way
//! story classification head.
//!
//! Blocks are pre-layer-norm (normalize, then attend / feed-forward, then
//! residual add), with a final layer norm after the last block, matching the
//! released GPT-2 ordering. Masked self-attention restricts every position
//! to its left context. The LM head is an independent projection by default;
//! `tie_lm_head` reuses the transposed token embedding instead.

use crate::tensor::{DropoutCtx, Gradients, Graph, NodeId, Tensor, TensorError};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const N_CLASSES: usize = 4;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
/// Finite stand-in for -inf in the causal mask; exp(x - max) underflows to
/// zero for any realistic row maximum while keeping all tensor values finite.
const MASKED_SCORE: f64 = -1e30;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_classes: usize,
    /// Reuse the transposed token embedding as the LM head.
    pub tie_lm_head: bool,
    /// Training-mode dropout rate; 0 disables dropout entirely.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 2,
            d_ff: 256,
            vocab_size: 300,
            max_seq_len: 256,
            n_classes: N_CLASSES,
            tie_lm_head: false,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(ModelError::BadConfig(
                "n_layers, d_ff, vocab_size and max_seq_len must be positive".into(),
            ));
        }
        if self.n_classes != N_CLASSES {
            return Err(ModelError::BadConfig(format!(
                "n_classes is fixed at {N_CLASSES}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::BadConfig("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
}

/// All model weights plus the architecture they follow.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub pos_embedding: Tensor,
    pub blocks: Vec<BlockParams>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
    pub lm_w: Tensor,
    pub lm_b: Tensor,
    pub cls_w: Tensor,
    pub cls_b: Tensor,
}

fn normal_tensor(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data)
        .expect("shape matches data")
        .with_requires_grad(true)
}

fn zeros_param(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape).with_requires_grad(true)
}

fn ones_param(len: usize) -> Tensor {
    Tensor::new(vec![len], vec![1.0; len])
        .expect("shape matches data")
        .with_requires_grad(true)
}

impl ModelParams {
    /// Fresh weights: normal(0, 0.02) for embeddings and projections, ones
    /// for layer-norm gains, zeros for biases.
    pub fn init(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let blocks = (0..config.n_layers)
            .map(|_| BlockParams {
                ln1_gain: ones_param(d),
                ln1_bias: zeros_param(vec![d]),
                wq: normal_tensor(vec![d, d], INIT_STD, rng),
                bq: zeros_param(vec![d]),
                wk: normal_tensor(vec![d, d], INIT_STD, rng),
                bk: zeros_param(vec![d]),
                wv: normal_tensor(vec![d, d], INIT_STD, rng),
                bv: zeros_param(vec![d]),
                wo: normal_tensor(vec![d, d], INIT_STD, rng),
                bo: zeros_param(vec![d]),
                ln2_gain: ones_param(d),
                ln2_bias: zeros_param(vec![d]),
                ff_w1: normal_tensor(vec![d, config.d_ff], INIT_STD, rng),
                ff_b1: zeros_param(vec![config.d_ff]),
                ff_w2: normal_tensor(vec![config.d_ff, d], INIT_STD, rng),
                ff_b2: zeros_param(vec![d]),
            })
            .collect();
        Ok(Self {
            token_embedding: normal_tensor(vec![config.vocab_size, d], INIT_STD, rng),
            pos_embedding: normal_tensor(vec![config.max_seq_len, d], INIT_STD, rng),
            blocks,
            lnf_gain: ones_param(d),
            lnf_bias: zeros_param(vec![d]),
            lm_w: normal_tensor(vec![d, config.vocab_size], INIT_STD, rng),
            lm_b: zeros_param(vec![config.vocab_size]),
            cls_w: normal_tensor(vec![d, config.n_classes], INIT_STD, rng),
            cls_b: zeros_param(vec![config.n_classes]),
            config,
        })
    }

    /// Visits every parameter tensor with its name, in a fixed order shared
    /// with [`ParamNodes::for_each_node`].
    pub fn for_each_tensor<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("token_embedding".into(), &self.token_embedding);
        f("pos_embedding".into(), &self.pos_embedding);
        for (i, b) in self.blocks.iter().enumerate() {
            f(format!("blocks.{i}.ln1_gain"), &b.ln1_gain);
            f(format!("blocks.{i}.ln1_bias"), &b.ln1_bias);
            f(format!("blocks.{i}.wq"), &b.wq);
            f(format!("blocks.{i}.bq"), &b.bq);
            f(format!("blocks.{i}.wk"), &b.wk);
            f(format!("blocks.{i}.bk"), &b.bk);
            f(format!("blocks.{i}.wv"), &b.wv);
            f(format!("blocks.{i}.bv"), &b.bv);
            f(format!("blocks.{i}.wo"), &b.wo);
            f(format!("blocks.{i}.bo"), &b.bo);
            f(format!("blocks.{i}.ln2_gain"), &b.ln2_gain);
            f(format!("blocks.{i}.ln2_bias"), &b.ln2_bias);
            f(format!("blocks.{i}.ff_w1"), &b.ff_w1);
            f(format!("blocks.{i}.ff_b1"), &b.ff_b1);
            f(format!("blocks.{i}.ff_w2"), &b.ff_w2);
            f(format!("blocks.{i}.ff_b2"), &b.ff_b2);
        }
        f("lnf_gain".into(), &self.lnf_gain);
        f("lnf_bias".into(), &self.lnf_bias);
        f("lm_w".into(), &self.lm_w);
        f("lm_b".into(), &self.lm_b);
        f("cls_w".into(), &self.cls_w);
        f("cls_b".into(), &self.cls_b);
    }

    pub fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.token_embedding);
        f(&mut self.pos_embedding);
        for b in &mut self.blocks {
            f(&mut b.ln1_gain);
            f(&mut b.ln1_bias);
            f(&mut b.wq);
            f(&mut b.bq);
            f(&mut b.wk);
            f(&mut b.bk);
            f(&mut b.wv);
            f(&mut b.bv);
            f(&mut b.wo);
            f(&mut b.bo);
            f(&mut b.ln2_gain);
            f(&mut b.ln2_bias);
            f(&mut b.ff_w1);
            f(&mut b.ff_b1);
            f(&mut b.ff_w2);
            f(&mut b.ff_b2);
        }
        f(&mut self.lnf_gain);
        f(&mut self.lnf_bias);
        f(&mut self.lm_w);
        f(&mut self.lm_b);
        f(&mut self.cls_w);
        f(&mut self.cls_b);
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.for_each_tensor(&mut |name, t| out.push((name, t)));
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Graph leaves mirroring [`ModelParams`] for one forward pass.
pub struct ParamNodes {
    pub token_embedding: NodeId,
    pub pos_embedding: NodeId,
    pub blocks: Vec<BlockNodes>,
    pub lnf_gain: NodeId,
    pub lnf_bias: NodeId,
    pub lm_w: NodeId,
    pub lm_b: NodeId,
    pub cls_w: NodeId,
    pub cls_b: NodeId,
}

pub struct BlockNodes {
    pub ln1_gain: NodeId,
    pub ln1_bias: NodeId,
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln2_gain: NodeId,
    pub ln2_bias: NodeId,
    pub ff_w1: NodeId,
    pub ff_b1: NodeId,
    pub ff_w2: NodeId,
    pub ff_b2: NodeId,
}

impl ParamNodes {
    /// Inserts every parameter as a graph leaf (cheap: buffers are shared).
    pub fn insert(g: &mut Graph, params: &ModelParams) -> Self {
        let blocks = params
            .blocks
            .iter()
            .map(|b| BlockNodes {
                ln1_gain: g.leaf(b.ln1_gain.clone()),
                ln1_bias: g.leaf(b.ln1_bias.clone()),
                wq: g.leaf(b.wq.clone()),
                bq: g.leaf(b.bq.clone()),
                wk: g.leaf(b.wk.clone()),
                bk: g.leaf(b.bk.clone()),
                wv: g.leaf(b.wv.clone()),
                bv: g.leaf(b.bv.clone()),
                wo: g.leaf(b.wo.clone()),
                bo: g.leaf(b.bo.clone()),
                ln2_gain: g.leaf(b.ln2_gain.clone()),
                ln2_bias: g.leaf(b.ln2_bias.clone()),
                ff_w1: g.leaf(b.ff_w1.clone()),
                ff_b1: g.leaf(b.ff_b1.clone()),
                ff_w2: g.leaf(b.ff_w2.clone()),
                ff_b2: g.leaf(b.ff_b2.clone()),
            })
            .collect();
        Self {
            token_embedding: g.leaf(params.token_embedding.clone()),
            pos_embedding: g.leaf(params.pos_embedding.clone()),
            blocks,
            lnf_gain: g.leaf(params.lnf_gain.clone()),
            lnf_bias: g.leaf(params.lnf_bias.clone()),
            lm_w: g.leaf(params.lm_w.clone()),
            lm_b: g.leaf(params.lm_b.clone()),
            cls_w: g.leaf(params.cls_w.clone()),
            cls_b: g.leaf(params.cls_b.clone()),
        }
    }

    /// Visits every parameter node in the same order as
    /// [`ModelParams::for_each_tensor`].
    pub fn for_each_node(&self, f: &mut dyn FnMut(NodeId)) {
        f(self.token_embedding);
        f(self.pos_embedding);
        for b in &self.blocks {
            f(b.ln1_gain);
            f(b.ln1_bias);
            f(b.wq);
            f(b.bq);
            f(b.wk);
            f(b.bk);
            f(b.wv);
            f(b.bv);
            f(b.wo);
            f(b.bo);
            f(b.ln2_gain);
            f(b.ln2_bias);
            f(b.ff_w1);
            f(b.ff_b1);
            f(b.ff_w2);
            f(b.ff_b2);
        }
        f(self.lnf_gain);
        f(self.lnf_bias);
        f(self.lm_w);
        f(self.lm_b);
        f(self.cls_w);
        f(self.cls_b);
    }

    /// Extracts gradients aligned with [`ModelParams::for_each_tensor`]
    /// order; parameters outside the loss get zeros.
    pub fn gradients(&self, params: &ModelParams, grads: &Gradients) -> Vec<Tensor> {
        let mut shapes: Vec<&[usize]> = Vec::new();
        params.for_each_tensor(&mut |_, t| shapes.push(t.shape()));
        let mut nodes = Vec::new();
        self.for_each_node(&mut |id| nodes.push(id));
        nodes
            .into_iter()
            .zip(shapes)
            .map(|(id, shape)| grads.get_or_zeros(id, shape))
            .collect()
    }
}

/// Hidden states and LM logits of one forward pass.
pub struct LmNodes {
    /// Final hidden states H^L, T×d.
    pub hidden: NodeId,
    /// LM logits, T×V.
    pub logits: NodeId,
}

/// Inference output: final hidden states (T×d) and LM logits (T×V).
pub struct ForwardOutput {
    pub hidden_states: Tensor,
    pub logits: Tensor,
}

fn check_tokens(config: &ModelConfig, tokens: &[u32]) -> Result<(), ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if tokens.len() > config.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: tokens.len(),
            max: config.max_seq_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| (t as usize) >= config.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            id: bad,
            vocab: config.vocab_size,
        });
    }
    Ok(())
}

fn causal_mask(t: usize) -> Tensor {
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            data[i * t + j] = MASKED_SCORE;
        }
    }
    Tensor::new(vec![t, t], data).expect("mask shape")
}

/// Records the transformer forward pass for `tokens` on `g` and returns the
/// final hidden states and LM logits. `dropout` is only consulted during
/// training.
pub fn build_lm_forward(
    g: &mut Graph,
    config: &ModelConfig,
    pn: &ParamNodes,
    tokens: &[u32],
    mut dropout: Option<&mut DropoutCtx<'_>>,
) -> Result<LmNodes, ModelError> {
    check_tokens(config, tokens)?;
    let t_len = tokens.len();
    let positions: Vec<u32> = (0..t_len as u32).collect();

    let tok_emb = g.gather(pn.token_embedding, tokens)?;
    let pos_emb = g.gather(pn.pos_embedding, &positions)?;
    let mut h = g.add(tok_emb, pos_emb)?;
    if let Some(ctx) = dropout.as_deref_mut() {
        h = g.dropout(h, ctx.rate, ctx.rng)?;
    }

    let mask = g.constant(causal_mask(t_len));
    let head_dim = config.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();

    for block in &pn.blocks {
        // Attention sublayer.
        let normed = g.layer_norm(h, block.ln1_gain, block.ln1_bias, LN_EPS)?;
        let q = g.matmul(normed, block.wq)?;
        let q = g.add_row(q, block.bq)?;
        let k = g.matmul(normed, block.wk)?;
        let k = g.add_row(k, block.bk)?;
        let v = g.matmul(normed, block.wv)?;
        let v = g.add_row(v, block.bv)?;

        let mut head_outputs = Vec::with_capacity(config.n_heads);
        for head in 0..config.n_heads {
            let lo = head * head_dim;
            let hi = lo + head_dim;
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let masked = g.add(scores, mask)?;
            let mut attn = g.softmax(masked, 1)?;
            if let Some(ctx) = dropout.as_deref_mut() {
                attn = g.dropout(attn, ctx.rate, ctx.rng)?;
            }
            head_outputs.push(g.matmul(attn, vh)?);
        }
        let concat = g.concat_cols(&head_outputs)?;
        let projected = g.matmul(concat, block.wo)?;
        let mut projected = g.add_row(projected, block.bo)?;
        if let Some(ctx) = dropout.as_deref_mut() {
            projected = g.dropout(projected, ctx.rate, ctx.rng)?;
        }
        h = g.add(h, projected)?;

        // Feed-forward sublayer.
        let normed = g.layer_norm(h, block.ln2_gain, block.ln2_bias, LN_EPS)?;
        let up = g.matmul(normed, block.ff_w1)?;
        let up = g.add_row(up, block.ff_b1)?;
        let act = g.gelu(up)?;
        let down = g.matmul(act, block.ff_w2)?;
        let mut down = g.add_row(down, block.ff_b2)?;
        if let Some(ctx) = dropout.as_deref_mut() {
            down = g.dropout(down, ctx.rate, ctx.rng)?;
        }
        h = g.add(h, down)?;
    }

    let hidden = g.layer_norm(h, pn.lnf_gain, pn.lnf_bias, LN_EPS)?;
    let logits = if config.tie_lm_head {
        let et = g.transpose(pn.token_embedding)?;
        let proj = g.matmul(hidden, et)?;
        g.add_row(proj, pn.lm_b)?
    } else {
        let proj = g.matmul(hidden, pn.lm_w)?;
        g.add_row(proj, pn.lm_b)?
    };
    Ok(LmNodes { hidden, logits })
}

/// Records the classifier head on top of final hidden states: mean-pool all
/// positions, project to the four classes.
pub fn build_classifier_logits(
    g: &mut Graph,
    pn: &ParamNodes,
    hidden: NodeId,
) -> Result<NodeId, ModelError> {
    let pooled = g.mean_rows(hidden)?;
    let proj = g.matmul(pooled, pn.cls_w)?;
    Ok(g.add_row(proj, pn.cls_b)?)
}

/// Inference forward pass.
pub fn forward_lm(params: &ModelParams, tokens: &[u32]) -> Result<ForwardOutput, ModelError> {
    let mut g = Graph::new();
    let pn = ParamNodes::insert(&mut g, params);
    let nodes = build_lm_forward(&mut g, &params.config, &pn, tokens, None)?;
    Ok(ForwardOutput {
        hidden_states: g.value(nodes.hidden).clone(),
        logits: g.value(nodes.logits).clone(),
    })
}

/// Next-token probability distribution at `position`: the softmax of that
/// logits row. Panics if `position` is out of range.
pub fn next_token_distribution(output: &ForwardOutput, position: usize) -> Vec<f64> {
    let t = output.logits.rows();
    assert!(position < t, "position {position} out of range for {t} rows");
    let v = output.logits.cols();
    let mut row = output.logits.data()[position * v..(position + 1) * v].to_vec();
    crate::tensor::kernels::softmax_rows_inplace(&mut row, v);
    row
}

/// Class probabilities over {D1, D2, D3, D4} for a story, by mean-pooling
/// the final hidden states over all token positions.
pub fn classify_story(params: &ModelParams, tokens: &[u32]) -> Result<Vec<f64>, ModelError> {
    let mut g = Graph::new();
    let pn = ParamNodes::insert(&mut g, params);
    let nodes = build_lm_forward(&mut g, &params.config, &pn, tokens, None)?;
    let logits = build_classifier_logits(&mut g, &pn, nodes.hidden)?;
    let probs = g.softmax(logits, 1)?;
    Ok(g.value(probs).data().to_vec())
}

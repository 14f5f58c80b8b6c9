//! Adam with bias correction.

use super::{TrainError, TrainingConfig};
use crate::model::ModelParams;
use crate::tensor::Tensor;

/// Per-parameter moment accumulators and the shared step counter, aligned
/// with [`ModelParams::for_each_tensor`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let mut m = Vec::new();
        params.for_each_tensor(&mut |_, t| m.push(Tensor::zeros(t.shape().to_vec())));
        let v = m.clone();
        Self { step: 0, m, v }
    }
}

/// One Adam update: `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`, with bias
/// corrections `m̂ = m/(1−β₁ᵗ)`, `v̂ = v/(1−β₂ᵗ)` and the step
/// `p ← p − lr·m̂/(√v̂ + ε)`. Aborts on a non-finite gradient.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut OptimizerState,
    config: &TrainingConfig,
) -> Result<(), TrainError> {
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    if grads.len() != names.len() {
        return Err(TrainError::GradCount {
            expected: names.len(),
            got: grads.len(),
        });
    }
    for (name, g) in names.iter().zip(grads) {
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGradient {
                param: name.clone(),
            });
        }
    }

    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - config.beta1.powf(t);
    let c2 = 1.0 - config.beta2.powf(t);
    let (b1, b2) = (config.beta1, config.beta2);
    let (lr, eps) = (config.learning_rate, config.epsilon);

    let mut idx = 0;
    params.for_each_tensor_mut(&mut |tensor| {
        let g = grads[idx].data();
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        let p = tensor.data_mut();
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        idx += 1;
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::derive_rng;
    use crate::model::{ModelConfig, ModelParams};
    use approx::assert_abs_diff_eq;

    fn tiny_params(seed: u64) -> ModelParams {
        let config = ModelConfig {
            n_layers: 1,
            d_model: 4,
            n_heads: 1,
            d_ff: 8,
            vocab_size: 9,
            max_seq_len: 6,
            ..ModelConfig::default()
        };
        ModelParams::init(config, &mut derive_rng(seed, "adam-test", 0)).unwrap()
    }

    fn zero_grads(params: &ModelParams) -> Vec<Tensor> {
        params
            .tensors()
            .into_iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect()
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // f(x) = x² at x₀ = 1 gives g = 2; at step 1 the bias-corrected
        // ratio m̂/(√v̂+ε) is g/|g| ≈ 1, so x₁ ≈ 1 − lr.
        let mut params = tiny_params(1);
        let x0 = params.token_embedding.data()[0];
        let mut grads = zero_grads(&params);
        {
            let g = grads[0].data_mut();
            g[0] = 2.0 * x0;
        }
        let mut state = OptimizerState::new(&params);
        let config = TrainingConfig {
            learning_rate: 0.1,
            ..TrainingConfig::default()
        };
        adam_step(&mut params, &grads, &mut state, &config).unwrap();
        let x1 = params.token_embedding.data()[0];
        assert_abs_diff_eq!(x1, x0 - 0.1, epsilon = 1e-6);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_fresh_parameters_unchanged() {
        let mut params = tiny_params(2);
        let before = params.clone();
        let grads = zero_grads(&params);
        let mut state = OptimizerState::new(&params);
        let config = TrainingConfig::default();
        adam_step(&mut params, &grads, &mut state, &config).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn moments_decay_on_zero_gradient() {
        let mut params = tiny_params(3);
        let mut grads = zero_grads(&params);
        grads[0].data_mut()[0] = 1.0;
        let mut state = OptimizerState::new(&params);
        let config = TrainingConfig::default();
        adam_step(&mut params, &grads, &mut state, &config).unwrap();
        let m_after_one = state.m[0].data()[0];
        grads[0].data_mut()[0] = 0.0;
        adam_step(&mut params, &grads, &mut state, &config).unwrap();
        assert_abs_diff_eq!(state.m[0].data()[0], m_after_one * 0.9, epsilon = 1e-15);
    }

    #[test]
    fn identical_runs_produce_identical_trajectories() {
        let run = || {
            let mut params = tiny_params(4);
            let mut state = OptimizerState::new(&params);
            let config = TrainingConfig::default();
            for step in 0..5 {
                let mut grads = zero_grads(&params);
                grads[0].data_mut()[step] = 0.5 + step as f64;
                adam_step(&mut params, &grads, &mut state, &config).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_aborts_with_the_parameter_name() {
        let mut params = tiny_params(5);
        let mut grads = zero_grads(&params);
        grads[2].data_mut()[0] = f64::NAN;
        let mut state = OptimizerState::new(&params);
        let err = adam_step(&mut params, &grads, &mut state, &TrainingConfig::default())
            .unwrap_err();
        match err {
            TrainError::NonFiniteGradient { param } => {
                assert_eq!(param, "blocks.0.ln1_gain");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}

//! First-order adaptive-moment (Adam) parameter updates with global-norm
//! gradient clipping.

use std::collections::BTreeMap;

use ndarray::Array2;

/// Adam moments for one parameter group.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    pub moments: BTreeMap<String, (Array2<f64>, Array2<f64>)>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    /// Clip scale for a gradient group of the given global L2 norm.
    pub fn clip_scale(norm: f64, clip_norm: f64) -> f64 {
        if norm > clip_norm && norm > 0.0 {
            clip_norm / norm
        } else {
            1.0
        }
    }

    /// Advance the step counter; call once per optimization step, before
    /// the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Update one parameter with its (pre-clip-scaled) gradient using the
    /// current step's bias correction.
    pub fn update_param(
        &mut self,
        name: &str,
        param: &mut Array2<f64>,
        grad: &Array2<f64>,
        learning_rate: f64,
        clip_scale: f64,
    ) {
        let t = self.step as i32;
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Array2::zeros(grad.dim()), Array2::zeros(grad.dim())));
        for ((pv, gv), (mv, vv)) in param
            .iter_mut()
            .zip(grad.iter())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            let g = gv * clip_scale;
            *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * g;
            *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *mv / bias1;
            let v_hat = *vv / bias2;
            *pv -= learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }

    /// Apply one Adam step over named (param, grad) pairs, clipping the
    /// gradients to `clip_norm` (global L2 norm over the group) first.
    pub fn apply(
        &mut self,
        updates: &mut [(String, &mut Array2<f64>, Array2<f64>)],
        learning_rate: f64,
        clip_norm: f64,
    ) {
        let mut sq_sum = 0.0;
        for (_, _, g) in updates.iter() {
            sq_sum += g.iter().map(|v| v * v).sum::<f64>();
        }
        let clip_scale = Self::clip_scale(sq_sum.sqrt(), clip_norm);
        self.begin_step();
        for (name, param, grad) in updates.iter_mut() {
            self.update_param(name, param, grad, learning_rate, clip_scale);
        }
    }
}

/// Optimizer state for both parameter groups: the main model and the
/// variational nets fitted in the inner loop.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub main: AdamState,
    pub variational: AdamState,
}

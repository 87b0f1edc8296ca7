//! Inter-domain feature adaptation: empirical maximum mean discrepancy,
//! gradient reversal, the projector heads, and the composite
//! domain-constrained MMD loss.

use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::StagedMlp;

/// Radial-basis kernel bandwidth selection: either explicit bandwidths or
/// multipliers applied to the per-batch median pairwise distance.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidths {
    Explicit(Vec<f64>),
    MedianMultipliers(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct KernelConfig {
    pub bandwidths: Bandwidths,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            bandwidths: Bandwidths::MedianMultipliers(vec![0.25, 0.5, 1.0, 2.0, 4.0]),
        }
    }
}

impl KernelConfig {
    pub fn explicit(bandwidths: Vec<f64>) -> Self {
        Self {
            bandwidths: Bandwidths::Explicit(bandwidths),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let list = match &self.bandwidths {
            Bandwidths::Explicit(v) | Bandwidths::MedianMultipliers(v) => v,
        };
        if list.is_empty() || list.iter().any(|&b| b <= 0.0 || !b.is_finite()) {
            return Err(Error::Validation(
                "kernel bandwidths must be a non-empty list of positive reals".into(),
            ));
        }
        Ok(())
    }

    /// Concrete bandwidth set for a sample pair. Median-multiplier configs
    /// use the median pairwise Euclidean distance over the pooled rows;
    /// the selection is treated as constant with respect to gradients.
    pub fn resolve(&self, x: &Array2<f64>, y: &Array2<f64>) -> Vec<f64> {
        match &self.bandwidths {
            Bandwidths::Explicit(v) => v.clone(),
            Bandwidths::MedianMultipliers(mult) => {
                let base = pooled_median_distance(x, y);
                let base = if base > 1e-12 { base } else { 1.0 };
                mult.iter().map(|m| m * base).collect()
            }
        }
    }
}

/// Median Euclidean distance over all pairs of the pooled rows of `x` and
/// `y`. Sorting makes the result independent of row order.
fn pooled_median_distance(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let rows: Vec<_> = x.rows().into_iter().chain(y.rows()).collect();
    let n = rows.len();
    if n < 2 {
        return 0.0;
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let d2: f64 = rows[i]
                .iter()
                .zip(rows[j].iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(d2.sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    dists[dists.len() / 2]
}

/// Empirical MMD between two sample matrices: the square root (clamped at
/// zero) of the biased V-statistic estimate of the squared mean-embedding
/// distance, summed over the kernel bandwidth set.
pub fn mmd(x: &Array2<f64>, y: &Array2<f64>, kernel: &KernelConfig) -> Result<f64> {
    if x.ncols() != y.ncols() {
        return Err(Error::Dimension(format!(
            "mmd: sample dimensions differ ({} vs {})",
            x.ncols(),
            y.ncols()
        )));
    }
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(Error::Validation("mmd: empty sample".into()));
    }
    kernel.validate()?;
    let bandwidths = Rc::new(kernel.resolve(x, y));
    let mut tape = Tape::new();
    let vx = tape.leaf(x.clone());
    let vy = tape.leaf(y.clone());
    let out = mmd_tape(&mut tape, vx, vy, &bandwidths);
    Ok(tape.scalar(out))
}

/// MMD on the tape with a fixed bandwidth set.
pub fn mmd_tape(tape: &mut Tape, x: Var, y: Var, bandwidths: &Rc<Vec<f64>>) -> Var {
    let kxx = tape.mean_rbf(x, x, Rc::clone(bandwidths));
    let kyy = tape.mean_rbf(y, y, Rc::clone(bandwidths));
    let kxy = tape.mean_rbf(x, y, Rc::clone(bandwidths));
    let sum = tape.add(kxx, kyy);
    let twice = tape.scale(kxy, 2.0);
    let sq = tape.sub(sum, twice);
    tape.sqrt_guard(sq)
}

/// Forward pass of a projector head: hidden rectifier, linear output of
/// width d.
pub fn projector_forward(tape: &mut Tape, head: &StagedMlp, x: Var) -> Var {
    let z1 = tape.matmul(x, head.w1);
    let z1 = tape.add_row_broadcast(z1, head.b1);
    let h = tape.relu(z1);
    let z2 = tape.matmul(h, head.w2);
    tape.add_row_broadcast(z2, head.b2)
}

/// Gradient reversal: identity forward; the gradient of any downstream
/// scalar w.r.t. the input is `-scale` times the gradient w.r.t. the
/// output.
pub fn gradient_reversal(tape: &mut Tape, x: Var, scale: f64) -> Var {
    tape.grl(x, scale)
}

/// Inputs to the composite alignment loss: the four row-aligned user
/// representation blocks.
pub struct AlignmentBatch {
    pub h_t: [Var; 2],
    pub h_s: [Var; 2],
}

/// Domain-constrained MMD: aligns the two domain-encompassing blocks, and
/// pushes each domain-specific block (through gradient reversal and its
/// projector head) away from the opposite encompassing distribution.
///
/// Term 1: mmd(h_t_a, h_t_b). Term 2: mmd(h_t_a, G_b(GRL(h_s_b))). With
/// `symmetric` set, term 3 mirrors term 2: mmd(h_t_b, G_a(GRL(h_s_a))).
pub fn dc_mmd_loss(
    tape: &mut Tape,
    batch: &AlignmentBatch,
    projectors: &[StagedMlp; 2],
    kernel: &KernelConfig,
    symmetric: bool,
    grl_scale: f64,
) -> Result<Var> {
    kernel.validate()?;
    let rows = tape.value(batch.h_t[0]).nrows();
    for block in [batch.h_t[1], batch.h_s[0], batch.h_s[1]] {
        if tape.value(block).nrows() != rows {
            return Err(Error::Dimension(
                "dc_mmd_loss: representation blocks are not row-aligned".into(),
            ));
        }
    }

    let bw_align = Rc::new(kernel.resolve(tape.value(batch.h_t[0]), tape.value(batch.h_t[1])));
    let term1 = mmd_tape(tape, batch.h_t[0], batch.h_t[1], &bw_align);

    let reversed_b = gradient_reversal(tape, batch.h_s[1], grl_scale);
    let projected_b = projector_forward(tape, &projectors[1], reversed_b);
    let bw_b = Rc::new(kernel.resolve(tape.value(batch.h_t[0]), tape.value(projected_b)));
    let term2 = mmd_tape(tape, batch.h_t[0], projected_b, &bw_b);

    let mut total = tape.add(term1, term2);
    if symmetric {
        let reversed_a = gradient_reversal(tape, batch.h_s[0], grl_scale);
        let projected_a = projector_forward(tape, &projectors[0], reversed_a);
        let bw_a = Rc::new(kernel.resolve(tape.value(batch.h_t[1]), tape.value(projected_a)));
        let term3 = mmd_tape(tape, batch.h_t[1], projected_a, &bw_a);
        total = tape.add(total, term3);
    }
    Ok(total)
}

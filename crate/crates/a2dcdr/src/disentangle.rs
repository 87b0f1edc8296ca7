//! Intra-domain disentanglement: the variational conditional density used
//! by the contrastive log-ratio upper bound on mutual information, and the
//! feature reconstructors that preserve information through the
//! disentanglement.

use std::rc::Rc;

use rand::seq::SliceRandom;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{StagedMlp, StagedVariational, LOGVAR_CLAMP};
use crate::rng::SeededRng;

const LN_2PI: f64 = 1.8378770664093453;

/// Forward pass of the variational net q(h_t | h_s): two rectified hidden
/// layers of width 2d, then diagonal-Gaussian mean and clamped
/// log-variance heads.
pub fn variational_forward(tape: &mut Tape, net: &StagedVariational, h_s: Var) -> (Var, Var) {
    let z1 = tape.matmul(h_s, net.w1);
    let z1 = tape.add_row_broadcast(z1, net.b1);
    let a1 = tape.relu(z1);
    let z2 = tape.matmul(a1, net.w2);
    let z2 = tape.add_row_broadcast(z2, net.b2);
    let a2 = tape.relu(z2);
    let mean = tape.matmul(a2, net.w_mean);
    let mean = tape.add_row_broadcast(mean, net.b_mean);
    let logvar = tape.matmul(a2, net.w_logvar);
    let logvar = tape.add_row_broadcast(logvar, net.b_logvar);
    let logvar = tape.clamp(logvar, LOGVAR_CLAMP.0, LOGVAR_CLAMP.1);
    (mean, logvar)
}

/// Mean diagonal-Gaussian log-density of the rows of `h_t` under
/// (mean, logvar): mean_i sum_d [-(ln 2pi + logvar + (h_t - mean)^2 /
/// exp(logvar)) / 2].
pub fn gaussian_log_likelihood(tape: &mut Tape, h_t: Var, mean: Var, logvar: Var) -> Var {
    let d = tape.value(h_t).ncols();
    let diff = tape.sub(h_t, mean);
    let sq = tape.mul(diff, diff);
    let neg_logvar = tape.neg(logvar);
    let inv_var = tape.exp(neg_logvar);
    let weighted = tape.mul(sq, inv_var);
    let inner = tape.add(weighted, logvar);
    let row = tape.row_sums(inner);
    let mean_rows = tape.mean_all(row);
    let scaled = tape.scale(mean_rows, -0.5);
    tape.add_const(scaled, -0.5 * LN_2PI * d as f64)
}

/// Mean conditional log-likelihood of aligned (h_t, h_s) rows under the
/// variational net; the inner fitting loop ascends this.
pub fn variational_log_likelihood(
    tape: &mut Tape,
    net: &StagedVariational,
    h_t: Var,
    h_s: Var,
) -> Result<Var> {
    if tape.value(h_t).nrows() != tape.value(h_s).nrows() {
        return Err(Error::Dimension(
            "variational_log_likelihood: rows are not aligned".into(),
        ));
    }
    let (mean, logvar) = variational_forward(tape, net, h_s);
    let ll = gaussian_log_likelihood(tape, h_t, mean, logvar);
    let value = tape.scalar(ll);
    if !value.is_finite() {
        return Err(Error::Numerical(format!(
            "variational log-likelihood is not finite ({value})"
        )));
    }
    Ok(ll)
}

/// Contrastive log-ratio upper bound on mutual information:
/// mean_i [log q(h_t_i | h_s_i) - log q(h_t_perm(i) | h_s_i)] under a
/// uniform random shuffle of the rows (fixed points permitted).
///
/// The caller freezes the net during this estimate; gradients flow to the
/// representations.
pub fn club_mi_loss(
    tape: &mut Tape,
    net: &StagedVariational,
    h_t: Var,
    h_s: Var,
    rng: &mut SeededRng,
) -> Result<Var> {
    let n = tape.value(h_t).nrows();
    if n < 2 {
        return Err(Error::Validation(
            "club_mi_loss: need at least 2 rows to shuffle".into(),
        ));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    club_mi_loss_with_permutation(tape, net, h_t, h_s, Rc::new(perm))
}

/// CLUB estimate with a caller-provided permutation (exposed for oracle
/// tests; the identity permutation makes each row's contribution zero).
pub fn club_mi_loss_with_permutation(
    tape: &mut Tape,
    net: &StagedVariational,
    h_t: Var,
    h_s: Var,
    perm: Rc<Vec<usize>>,
) -> Result<Var> {
    if tape.value(h_t).nrows() != tape.value(h_s).nrows() {
        return Err(Error::Dimension("club_mi_loss: rows are not aligned".into()));
    }
    let (mean, logvar) = variational_forward(tape, net, h_s);
    let positive = gaussian_log_likelihood(tape, h_t, mean, logvar);
    let shuffled = tape.gather_rows(h_t, perm);
    let negative = gaussian_log_likelihood(tape, shuffled, mean, logvar);
    let out = tape.sub(positive, negative);
    let value = tape.scalar(out);
    if !value.is_finite() {
        return Err(Error::Numerical(format!(
            "CLUB estimate is not finite ({value})"
        )));
    }
    Ok(out)
}

/// Weighted sum of the two per-domain MI losses.
pub fn total_mi_loss(loss_a: f64, loss_b: f64, beta_a: f64, beta_b: f64) -> f64 {
    beta_a * loss_a + beta_b * loss_b
}

/// Fit a standalone variational net by ascending the conditional
/// log-likelihood of fixed (h_t, h_s) samples for `steps` full-batch
/// adaptive-moment updates.
pub fn fit_variational_net(
    net: &mut crate::model::VariationalWeights,
    h_t: &ndarray::Array2<f64>,
    h_s: &ndarray::Array2<f64>,
    steps: usize,
    learning_rate: f64,
) -> Result<()> {
    let mut adam = crate::optim::AdamState::default();
    for _ in 0..steps {
        let mut tape = Tape::new();
        let staged = crate::model::stage_variational_net(&mut tape, net);
        let vars = [
            staged.w1,
            staged.b1,
            staged.w2,
            staged.b2,
            staged.w_mean,
            staged.b_mean,
            staged.w_logvar,
            staged.b_logvar,
        ];
        let vt = tape.leaf(h_t.clone());
        let vs = tape.leaf(h_s.clone());
        let ll = variational_log_likelihood(&mut tape, &staged, vt, vs)?;
        let objective = tape.neg(ll);
        let grads = tape.backward(objective);
        let mut updates = Vec::with_capacity(8);
        for (slot, (arr, var)) in net.arrays_mut().into_iter().zip(vars).enumerate() {
            let g = grads.get_or_zeros(var, arr.dim());
            updates.push((format!("q/{slot}"), arr, g));
        }
        adam.apply(&mut updates, learning_rate, 10.0);
    }
    Ok(())
}

/// CLUB estimate averaged over several fresh shuffles; the per-call
/// estimator uses a single shuffle, so averaging only reduces the
/// readout's Monte-Carlo noise.
pub fn club_estimate(
    net: &crate::model::VariationalWeights,
    h_t: &ndarray::Array2<f64>,
    h_s: &ndarray::Array2<f64>,
    shuffles: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..shuffles {
        let mut tape = Tape::new();
        let staged = crate::model::stage_variational_net(&mut tape, net);
        let vt = tape.leaf(h_t.clone());
        let vs = tape.leaf(h_s.clone());
        let est = club_mi_loss(&mut tape, &staged, vt, vs, rng)?;
        total += tape.scalar(est);
    }
    Ok(total / shuffles as f64)
}

/// Forward pass of a reconstructor: one rectified hidden layer, linear
/// output of width 2d.
pub fn reconstructor_forward(tape: &mut Tape, recon: &StagedMlp, x: Var) -> Var {
    let z1 = tape.matmul(x, recon.w1);
    let z1 = tape.add_row_broadcast(z1, recon.b1);
    let h = tape.relu(z1);
    let z2 = tape.matmul(h, recon.w2);
    tape.add_row_broadcast(z2, recon.b2)
}

/// Per-domain mean squared reconstruction residual, weighted and summed:
/// gamma_a * mean_i |u_hat_a_i - u_a_i|^2 + gamma_b * (same for b).
///
/// `raw` targets must already be detached; gradients flow only through the
/// reconstruction path.
pub struct ReconstructionInputs {
    /// concat(h_t, h_s) per domain, on the tape.
    pub encoded: [Var; 2],
    /// concat(u_t, u_s) raw embedding rows per domain, detached.
    pub targets: [Var; 2],
}

pub fn reconstruction_loss(
    tape: &mut Tape,
    reconstructors: &[StagedMlp; 2],
    inputs: &ReconstructionInputs,
    gamma_a: f64,
    gamma_b: f64,
) -> Result<Var> {
    let mut per_domain = [None, None];
    for d in 0..2 {
        let encoded = inputs.encoded[d];
        let target = inputs.targets[d];
        if tape.value(encoded).dim() != tape.value(target).dim() {
            return Err(Error::Dimension(format!(
                "reconstruction_loss: domain {d} shape mismatch ({:?} vs {:?})",
                tape.value(encoded).dim(),
                tape.value(target).dim()
            )));
        }
        let reconstructed = reconstructor_forward(tape, &reconstructors[d], encoded);
        let diff = tape.sub(reconstructed, target);
        let sq = tape.mul(diff, diff);
        let rows = tape.row_sums(sq);
        per_domain[d] = Some(tape.mean_all(rows));
    }
    let a = tape.scale(per_domain[0].unwrap(), gamma_a);
    let b = tape.scale(per_domain[1].unwrap(), gamma_b);
    Ok(tape.add(a, b))
}

//! Target-aware feature combination over the three user representations,
//! dot-product prediction, and the binary cross-entropy objective.

use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// How the three user representations are pooled for scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Target-aware attention over (cross-domain encompassing,
    /// own-domain encompassing, own-domain specific).
    Tafc,
    /// Unweighted sum pooling of the triple.
    SumPooling,
}

/// A fused user representation for one (user, candidate item) pair.
#[derive(Debug, Clone)]
pub struct FusedUserRep {
    pub e: Vec<f64>,
    /// Attention weights over (cross-domain h_t, own h_t, own h_s); a
    /// probability vector.
    pub attention_weights: [f64; 3],
}

/// Fuse an ordered triple of user vectors against a candidate item vector:
/// logits are scaled dot products <h_v, rep_k>/sqrt(d), weights their joint
/// softmax, and e the weighted combination.
pub fn tafc_fuse(h_v: &[f64], reps: [&[f64]; 3], d: usize) -> Result<FusedUserRep> {
    if h_v.len() != d || reps.iter().any(|r| r.len() != d) {
        return Err(Error::Dimension(format!(
            "tafc_fuse: expected dimension {d}, got query {} and reps {:?}",
            h_v.len(),
            reps.map(|r| r.len())
        )));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let logits: Vec<f64> = reps
        .iter()
        .map(|r| r.iter().zip(h_v).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let weights = [exps[0] / total, exps[1] / total, exps[2] / total];
    let mut e = vec![0.0; d];
    for (w, rep) in weights.iter().zip(reps.iter()) {
        for (ev, rv) in e.iter_mut().zip(rep.iter()) {
            *ev += w * rv;
        }
    }
    Ok(FusedUserRep {
        e,
        attention_weights: weights,
    })
}

/// Raw dot-product score between a fused user vector and an item vector.
pub fn predict(e: &[f64], h_v: &[f64]) -> Result<f64> {
    if e.len() != h_v.len() {
        return Err(Error::Dimension(format!(
            "predict: dimension mismatch ({} vs {})",
            e.len(),
            h_v.len()
        )));
    }
    Ok(e.iter().zip(h_v).map(|(a, b)| a * b).sum())
}

/// Mean binary cross-entropy of raw scores against 0/1 labels, squashing
/// through the logistic function in the numerically stable form.
pub fn bce_loss(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "bce_loss: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Validation("bce_loss: empty batch".into()));
    }
    let mut total = 0.0;
    for (&z, &y) in scores.iter().zip(labels) {
        total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    }
    Ok(total / scores.len() as f64)
}

/// Sum of the two per-domain cross-entropy losses.
pub fn domain_ce_sum(loss_a: f64, loss_b: f64) -> f64 {
    loss_a + loss_b
}

/// Batched fusion on the tape. Rows of `h_v` and of each rep matrix are
/// aligned (one row per (user, item) pair). Returns the fused matrix and
/// the (n, 3) attention weights.
pub fn fuse_batch_tape(
    tape: &mut Tape,
    h_v: Var,
    reps: [Var; 3],
    d: usize,
    mode: FusionMode,
) -> (Var, Var) {
    match mode {
        FusionMode::SumPooling => {
            let sum01 = tape.add(reps[0], reps[1]);
            let e = tape.add(sum01, reps[2]);
            let n = tape.value(h_v).nrows();
            let uniform = tape.leaf(Array2::from_elem((n, 3), 1.0 / 3.0));
            (e, uniform)
        }
        FusionMode::Tafc => {
            let scale = 1.0 / (d as f64).sqrt();
            let mut logit_cols = Vec::with_capacity(3);
            for rep in reps {
                let prod = tape.mul(h_v, rep);
                let dot = tape.row_sums(prod);
                logit_cols.push(tape.scale(dot, scale));
            }
            let l01 = tape.concat_cols(logit_cols[0], logit_cols[1]);
            let logits = tape.concat_cols(l01, logit_cols[2]);
            let weights = tape.softmax_rows(logits);
            let mut e = None;
            for (k, rep) in reps.into_iter().enumerate() {
                let wk = tape.slice_cols(weights, k..k + 1);
                let scaled = tape.scale_rows(rep, wk);
                e = Some(match e {
                    None => scaled,
                    Some(acc) => tape.add(acc, scaled),
                });
            }
            (e.unwrap(), weights)
        }
    }
}

/// Batched dot-product scores on the tape: (n, 1) column of <e_i, h_v_i>.
pub fn predict_batch_tape(tape: &mut Tape, e: Var, h_v: Var) -> Var {
    let prod = tape.mul(e, h_v);
    tape.row_sums(prod)
}

/// Batched BCE on the tape against fixed labels.
pub fn bce_loss_tape(tape: &mut Tape, scores: Var, labels: Rc<Vec<f64>>) -> Var {
    tape.bce_with_logits(scores, labels)
}

/// Plain batched scoring for evaluation: scores[i] = <fuse(reps_i), h_v_i>.
pub fn score_batch_plain(
    h_v: &Array2<f64>,
    reps: [&Array2<f64>; 3],
    mode: FusionMode,
) -> Vec<f64> {
    let d = h_v.ncols();
    let n = h_v.nrows();
    let scale = 1.0 / (d as f64).sqrt();
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let q = h_v.row(i);
        let weights = match mode {
            FusionMode::SumPooling => [1.0; 3],
            FusionMode::Tafc => {
                let logits: Vec<f64> = reps
                    .iter()
                    .map(|r| r.row(i).iter().zip(q.iter()).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                [exps[0] / total, exps[1] / total, exps[2] / total]
            }
        };
        let mut score = 0.0;
        for c in 0..d {
            let fused = weights[0] * reps[0][[i, c]]
                + weights[1] * reps[1][[i, c]]
                + weights[2] * reps[2][[i, c]];
            score += fused * q[c];
        }
        scores.push(score);
    }
    scores
}

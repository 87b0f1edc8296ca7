//! The composite training objective and optimization loop: cross-entropy
//! scoring losses for both domains, the adversarial alignment term, the
//! contrastive MI upper bound with its inner fitting loop, the
//! reconstruction term, and checkpoint-best evaluation.

use std::collections::BTreeMap;
use std::rc::Rc;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{dc_mmd_loss, AlignmentBatch, KernelConfig};
use crate::autodiff::Tape;
use crate::data::{
    build_candidate_sets, sample_training_negatives, CandidateSet, Domain, DomainDataset,
    DEFAULT_EVAL_NEGATIVES,
};
use crate::disentangle::{
    club_mi_loss, reconstruction_loss, variational_log_likelihood, ReconstructionInputs,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_both, EvalReport};
use crate::fusion::{bce_loss_tape, fuse_batch_tape, predict_batch_tape, FusionMode};
use crate::graph::PropagationGraph;
use crate::model::{
    self, config_hash, encode_full_plain, encode_full_tape, init_parameters, is_main_parameter,
    stage_parameters, stage_variational_pair, ModelParameters,
};
use crate::optim::AdamState;
use crate::rng::{derive_seed, rng_from_seed, SeededRng};

/// Gradient clipping threshold (global L2 norm) for both optimizers.
pub const CLIP_NORM: f64 = 10.0;

/// Which components of the objective and fusion are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Inter-domain adaptation only: no MI or reconstruction terms, sum
    /// pooling instead of target-aware fusion.
    InterOnly,
    /// Adds the MI minimization term to `InterOnly`.
    IntraInter,
    /// The full objective with sum pooling in place of the attention.
    WoTafc,
    /// Everything.
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::InterOnly,
        Ablation::IntraInter,
        Ablation::WoTafc,
        Ablation::Full,
    ];

    pub fn uses_mi(self) -> bool {
        !matches!(self, Ablation::InterOnly)
    }

    pub fn uses_reconstruction(self) -> bool {
        matches!(self, Ablation::WoTafc | Ablation::Full)
    }

    pub fn fusion_mode(self) -> FusionMode {
        match self {
            Ablation::Full => FusionMode::Tafc,
            _ => FusionMode::SumPooling,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::InterOnly => "inter_only",
            Ablation::IntraInter => "intra_inter",
            Ablation::WoTafc => "wo_tafc",
            Ablation::Full => "full",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inter_only" => Ok(Ablation::InterOnly),
            "intra_inter" => Ok(Ablation::IntraInter),
            "wo_tafc" => Ok(Ablation::WoTafc),
            "full" => Ok(Ablation::Full),
            other => Err(Error::Validation(format!(
                "unknown ablation '{other}' (expected inter_only, intra_inter, wo_tafc, full)"
            ))),
        }
    }
}

/// All training hyperparameters. Serialized as the run's config file;
/// every field has a default and is overridable from the CLI.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainingConfig {
    pub dim: usize,
    pub layers: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub alpha: f64,
    pub beta_a: f64,
    pub beta_b: f64,
    pub gamma_a: f64,
    pub gamma_b: f64,
    pub club_inner_steps: usize,
    pub grl_scale: f64,
    pub symmetric_dcmmd: bool,
    pub negative_ratio: usize,
    pub ablation: Ablation,
    pub seed: u64,
    pub eval_every: usize,
    pub kernel: KernelConfig,
    /// Sampled negatives per evaluation candidate set.
    pub eval_negatives: usize,
    pub eval_k: usize,
    /// Domain whose HR@k selects the best checkpoint.
    pub target_domain: Domain,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            layers: 2,
            learning_rate: 0.002,
            batch_size: 1024,
            epochs: 100,
            alpha: 1.0,
            beta_a: 1e-4,
            beta_b: 9e-4,
            gamma_a: 0.01,
            gamma_b: 0.09,
            club_inner_steps: 5,
            grl_scale: 1.0,
            symmetric_dcmmd: true,
            negative_ratio: 1,
            ablation: Ablation::Full,
            seed: 0,
            eval_every: 10,
            kernel: KernelConfig::default(),
            eval_negatives: DEFAULT_EVAL_NEGATIVES,
            eval_k: 10,
            target_domain: Domain::B,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Validation(msg.into()))
            }
        };
        check(self.dim >= 1, "dim must be >= 1")?;
        check(self.batch_size >= 2, "batch_size must be >= 2")?;
        check(self.epochs >= 1, "epochs must be >= 1")?;
        check(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning_rate must be positive",
        )?;
        check(
            self.alpha >= 0.0 && self.beta_a >= 0.0 && self.beta_b >= 0.0,
            "alpha and beta weights must be non-negative",
        )?;
        check(
            self.gamma_a >= 0.0 && self.gamma_b >= 0.0,
            "gamma weights must be non-negative",
        )?;
        check(self.negative_ratio >= 1, "negative_ratio must be >= 1")?;
        check(self.eval_every >= 1, "eval_every must be >= 1")?;
        check(self.eval_negatives >= 1, "eval_negatives must be >= 1")?;
        check(self.eval_k >= 1, "eval_k must be >= 1")?;
        self.kernel.validate()?;
        Ok(())
    }
}

/// ce + alpha * dcmmd + mi + rec, with the beta and gamma weights already
/// folded into mi and rec.
pub fn total_loss(ce: f64, dcmmd: f64, mi: f64, rec: f64, alpha: f64) -> f64 {
    ((ce + alpha * dcmmd) + mi) + rec
}

/// Loss terms recorded for one optimization step.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_ce: f64,
    pub l_dcmmd: f64,
    pub l_mi: f64,
    pub l_rec: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochEval {
    pub epoch: usize,
    pub report: EvalReport,
}

/// The deterministic training record: per-step loss terms and per-eval
/// reports. Wall-clock timings are kept out of this structure so that its
/// serialized form is identical across reruns of the same seed.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct TrainLog {
    pub alpha: f64,
    pub records: Vec<StepRecord>,
    pub evals: Vec<EpochEval>,
}

impl TrainLog {
    /// Check that every recorded total recombines exactly from its parts.
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            let expect = total_loss(r.l_ce, r.l_dcmmd, r.l_mi, r.l_rec, self.alpha);
            if (expect - r.l_total).abs() > 1e-6 {
                return Err(Error::Validation(format!(
                    "step {}/{}: recorded total {} != recombined {}",
                    r.epoch, r.step, r.l_total, expect
                )));
            }
        }
        Ok(())
    }

    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("train log serializes")
    }
}

/// Immutable per-run context shared by all steps.
pub struct TrainContext {
    pub graphs: [Rc<PropagationGraph>; 2],
}

impl TrainContext {
    pub fn new(dataset: &DomainDataset) -> Self {
        let graphs = model::build_graphs(dataset);
        let [ga, gb] = graphs;
        Self {
            graphs: [Rc::new(ga), Rc::new(gb)],
        }
    }
}

fn sample_positive_batch(
    dataset: &DomainDataset,
    domain: Domain,
    batch_size: usize,
    rng: &mut SeededRng,
) -> Vec<(u32, u32)> {
    let pool = dataset.train_interactions(domain);
    (0..batch_size)
        .map(|_| pool[rng.random_range(0..pool.len())])
        .collect()
}

/// The deduplicated, sorted user set fed to the alignment, MI, and
/// reconstruction terms; subsampled deterministically when larger than the
/// batch size.
fn aux_user_batch(
    positives: [&[(u32, u32)]; 2],
    cap: usize,
    rng: &mut SeededRng,
) -> Vec<usize> {
    let mut users: Vec<u32> = positives[0]
        .iter()
        .chain(positives[1].iter())
        .map(|&(u, _)| u)
        .collect();
    users.sort_unstable();
    users.dedup();
    if users.len() > cap {
        for pos in 0..cap {
            let swap = rng.random_range(pos..users.len());
            users.swap(pos, swap);
        }
        users.truncate(cap);
        users.sort_unstable();
    }
    users.into_iter().map(|u| u as usize).collect()
}

/// Run the inner fitting loop: ascend the variational log-likelihood of
/// both domains on frozen encoder outputs, updating only the variational
/// nets.
fn club_inner_loop(
    params: &mut ModelParameters,
    aux_reps: &[(Array2<f64>, Array2<f64>); 2],
    steps: usize,
    learning_rate: f64,
) -> Result<()> {
    for _ in 0..steps {
        let mut tape = Tape::new();
        let (staged, index) = stage_variational_pair(&mut tape, params);
        let mut ll_total = None;
        for d in 0..2 {
            let h_t = tape.leaf(aux_reps[d].0.clone());
            let h_s = tape.leaf(aux_reps[d].1.clone());
            let ll = variational_log_likelihood(&mut tape, &staged[d], h_t, h_s)?;
            ll_total = Some(match ll_total {
                None => ll,
                Some(acc) => tape.add(acc, ll),
            });
        }
        let objective = tape.neg(ll_total.unwrap());
        let grads = tape.backward(objective);

        let mut grad_map: BTreeMap<String, Array2<f64>> = BTreeMap::new();
        let mut sq_sum = 0.0;
        for (name, var, shape) in &index {
            let g = grads.get_or_zeros(*var, *shape);
            sq_sum += g.iter().map(|v| v * v).sum::<f64>();
            grad_map.insert(name.clone(), g);
        }
        let clip_scale = AdamState::clip_scale(sq_sum.sqrt(), CLIP_NORM);

        let mut opt = std::mem::take(&mut params.optimizer);
        opt.variational.begin_step();
        params.visit_mut(&mut |name, arr| {
            if !is_main_parameter(name) {
                if let Some(g) = grad_map.get(name) {
                    opt.variational
                        .update_param(name, arr, g, learning_rate, clip_scale);
                }
            }
        });
        params.optimizer = opt;
    }
    Ok(())
}

/// One optimization step: sample batches, fit the variational nets on
/// frozen encodings, evaluate the composite objective, and apply one
/// adaptive-moment update to the main parameters.
pub fn train_step(
    params: &mut ModelParameters,
    dataset: &DomainDataset,
    config: &TrainingConfig,
    rng: &mut SeededRng,
    ctx: &TrainContext,
) -> Result<StepRecord> {
    let dim = config.dim;
    let mode = config.ablation.fusion_mode();

    // (1) positives and training negatives per domain
    let positives_a = sample_positive_batch(dataset, Domain::A, config.batch_size, rng);
    let rows_a =
        sample_training_negatives(dataset, Domain::A, &positives_a, config.negative_ratio, rng)?;
    let positives_b = sample_positive_batch(dataset, Domain::B, config.batch_size, rng);
    let rows_b =
        sample_training_negatives(dataset, Domain::B, &positives_b, config.negative_ratio, rng)?;
    let aux_users = aux_user_batch([&positives_a, &positives_b], config.batch_size, rng);

    // (2, 3) inner fitting loop on frozen encodings
    if config.ablation.uses_mi() && config.club_inner_steps > 0 {
        let full = encode_full_plain(params, [&ctx.graphs[0], &ctx.graphs[1]])?;
        let gather = |src: &Array2<f64>| -> Array2<f64> {
            let mut out = Array2::zeros((aux_users.len(), src.ncols()));
            for (r, &u) in aux_users.iter().enumerate() {
                out.row_mut(r).assign(&src.row(u));
            }
            out
        };
        let aux_reps = [
            (gather(&full.h_t[0]), gather(&full.h_s[0])),
            (gather(&full.h_t[1]), gather(&full.h_s[1])),
        ];
        club_inner_loop(
            params,
            &aux_reps,
            config.club_inner_steps,
            config.learning_rate,
        )?;
    }

    // (4) composite objective with the variational nets frozen
    let mut tape = Tape::new();
    let staged = stage_parameters(&mut tape, params);
    let reps = encode_full_tape(&mut tape, &staged, &ctx.graphs, config.layers);

    let mut ce_terms = Vec::with_capacity(2);
    for (d, rows) in [(0usize, &rows_a), (1, &rows_b)] {
        let users = Rc::new(rows.iter().map(|&(u, _, _)| u as usize).collect::<Vec<_>>());
        let items = Rc::new(rows.iter().map(|&(_, i, _)| i as usize).collect::<Vec<_>>());
        let labels = Rc::new(rows.iter().map(|&(_, _, l)| l).collect::<Vec<_>>());
        let o = 1 - d;
        let cross = tape.gather_rows(reps.h_t[o], Rc::clone(&users));
        let own_t = tape.gather_rows(reps.h_t[d], Rc::clone(&users));
        let own_s = tape.gather_rows(reps.h_s[d], users);
        let h_v = tape.gather_rows(reps.h_v[d], items);
        let (e, _weights) = fuse_batch_tape(&mut tape, h_v, [cross, own_t, own_s], dim, mode);
        let scores = predict_batch_tape(&mut tape, e, h_v);
        ce_terms.push(bce_loss_tape(&mut tape, scores, labels));
    }
    let l_ce = tape.add(ce_terms[0], ce_terms[1]);

    let aux_idx = Rc::new(aux_users);
    let ht = [
        tape.gather_rows(reps.h_t[0], Rc::clone(&aux_idx)),
        tape.gather_rows(reps.h_t[1], Rc::clone(&aux_idx)),
    ];
    let hs = [
        tape.gather_rows(reps.h_s[0], Rc::clone(&aux_idx)),
        tape.gather_rows(reps.h_s[1], Rc::clone(&aux_idx)),
    ];
    let align_batch = AlignmentBatch { h_t: ht, h_s: hs };
    let l_dcmmd = dc_mmd_loss(
        &mut tape,
        &align_batch,
        &staged.projector,
        &config.kernel,
        config.symmetric_dcmmd,
        config.grl_scale,
    )?;

    let l_mi = if config.ablation.uses_mi() {
        let club_a = club_mi_loss(&mut tape, &staged.variational[0], ht[0], hs[0], rng)?;
        let club_b = club_mi_loss(&mut tape, &staged.variational[1], ht[1], hs[1], rng)?;
        let wa = tape.scale(club_a, config.beta_a);
        let wb = tape.scale(club_b, config.beta_b);
        Some(tape.add(wa, wb))
    } else {
        None
    };

    let l_rec = if config.ablation.uses_reconstruction() {
        let mut encoded = Vec::with_capacity(2);
        let mut targets = Vec::with_capacity(2);
        for d in 0..2 {
            encoded.push(tape.concat_cols(ht[d], hs[d]));
            let raw_t = tape.gather_rows(staged.u_t[d], Rc::clone(&aux_idx));
            let raw_s = tape.gather_rows(staged.u_s[d], Rc::clone(&aux_idx));
            let raw = tape.concat_cols(raw_t, raw_s);
            targets.push(tape.detach(raw));
        }
        let inputs = ReconstructionInputs {
            encoded: [encoded[0], encoded[1]],
            targets: [targets[0], targets[1]],
        };
        Some(reconstruction_loss(
            &mut tape,
            &staged.reconstructor,
            &inputs,
            config.gamma_a,
            config.gamma_b,
        )?)
    } else {
        None
    };

    let weighted_dcmmd = tape.scale(l_dcmmd, config.alpha);
    let mut total = tape.add(l_ce, weighted_dcmmd);
    if let Some(mi) = l_mi {
        total = tape.add(total, mi);
    }
    if let Some(rec) = l_rec {
        total = tape.add(total, rec);
    }

    let record = StepRecord {
        epoch: 0,
        step: 0,
        l_ce: tape.scalar(l_ce),
        l_dcmmd: tape.scalar(l_dcmmd),
        l_mi: l_mi.map(|v| tape.scalar(v)).unwrap_or(0.0),
        l_rec: l_rec.map(|v| tape.scalar(v)).unwrap_or(0.0),
        l_total: tape.scalar(total),
    };
    if !record.l_total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss (ce {}, dcmmd {}, mi {}, rec {})",
            record.l_ce, record.l_dcmmd, record.l_mi, record.l_rec
        )));
    }

    // (5) one adaptive-moment update of the main parameters
    let grads = tape.backward(total);
    let mut grad_map: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    let mut sq_sum = 0.0;
    for (name, var, shape) in &staged.by_name {
        if is_main_parameter(name) {
            let g = grads.get_or_zeros(*var, *shape);
            sq_sum += g.iter().map(|v| v * v).sum::<f64>();
            grad_map.insert(name.clone(), g);
        }
    }
    let clip_scale = AdamState::clip_scale(sq_sum.sqrt(), CLIP_NORM);
    let mut opt = std::mem::take(&mut params.optimizer);
    opt.main.begin_step();
    params.visit_mut(&mut |name, arr| {
        if is_main_parameter(name) {
            if let Some(g) = grad_map.get(name) {
                opt.main
                    .update_param(name, arr, g, config.learning_rate, clip_scale);
            }
        }
    });
    params.optimizer = opt;

    Ok(record)
}

/// Steps per epoch: the larger domain's train size divided by the batch
/// size, rounded up.
pub fn steps_per_epoch(dataset: &DomainDataset, config: &TrainingConfig) -> usize {
    let largest = dataset.train[0].len().max(dataset.train[1].len());
    largest.div_ceil(config.batch_size).max(1)
}

/// Everything `fit` produces: the best checkpoint (by target-domain HR@k),
/// the final-state parameters, the deterministic log, the best evaluation,
/// and wall-clock epoch timings.
pub struct FitResult {
    pub best_params: ModelParameters,
    pub final_params: ModelParameters,
    pub log: TrainLog,
    pub best_report: Option<EvalReport>,
    pub candidate_sets: [Vec<CandidateSet>; 2],
    pub epoch_millis: Vec<(usize, u128)>,
}

/// Build both domains' evaluation candidate sets for a config.
pub fn build_eval_candidates(
    dataset: &DomainDataset,
    config: &TrainingConfig,
) -> Result<[Vec<CandidateSet>; 2]> {
    let candidate_seed = derive_seed(config.seed, "fit/candidates");
    let a = build_candidate_sets(dataset, Domain::A, candidate_seed, config.eval_negatives);
    let b = build_candidate_sets(dataset, Domain::B, candidate_seed, config.eval_negatives);
    for (domain, build) in [(Domain::A, &a), (Domain::B, &b)] {
        if build.sets.is_empty() {
            return Err(Error::Validation(format!(
                "domain {domain}: no evaluable users ({} skipped for lacking {} candidates)",
                build.skipped_users, config.eval_negatives
            )));
        }
    }
    Ok([a.sets, b.sets])
}

/// Run the full optimization loop with periodic evaluation on both
/// domains. Deterministic for a fixed config.
pub fn fit(dataset: &DomainDataset, config: &TrainingConfig) -> Result<FitResult> {
    config.validate()?;
    let candidates = build_eval_candidates(dataset, config)?;
    fit_with_candidates(dataset, config, candidates)
}

/// As [`fit`], evaluating against caller-provided (typically persisted)
/// candidate sets so train-time and later evaluations are comparable.
pub fn fit_with_candidates(
    dataset: &DomainDataset,
    config: &TrainingConfig,
    candidates: [Vec<CandidateSet>; 2],
) -> Result<FitResult> {
    config.validate()?;
    dataset.validate()?;
    for d in Domain::BOTH {
        if dataset.train_interactions(d).is_empty() {
            return Err(Error::Validation(format!(
                "domain {d} has no train interactions"
            )));
        }
        if candidates[d.index()].is_empty() {
            return Err(Error::Validation(format!(
                "domain {d}: empty candidate sets"
            )));
        }
    }

    let hash = config_hash(config);
    let ctx = TrainContext::new(dataset);
    let mut params = init_parameters(dataset, config, config.seed)?;
    let [sets_a, sets_b] = candidates;

    let mut rng = rng_from_seed(derive_seed(config.seed, "fit/train"));
    let mut log = TrainLog {
        alpha: config.alpha,
        ..Default::default()
    };
    let mut best: Option<(f64, ModelParameters, EvalReport)> = None;
    let mut epoch_millis = Vec::new();
    let steps = steps_per_epoch(dataset, config);
    let mut last_good_eval_epoch = 0usize;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        for step in 0..steps {
            let mut record =
                train_step(&mut params, dataset, config, &mut rng, &ctx).map_err(|e| match e {
                    Error::Numerical(msg) => Error::Numerical(format!(
                        "epoch {epoch} step {step}: {msg}; last good evaluation at epoch \
                         {last_good_eval_epoch}"
                    )),
                    other => other,
                })?;
            record.epoch = epoch;
            record.step = step;
            log.records.push(record);
        }
        epoch_millis.push((epoch, started.elapsed().as_millis()));

        if epoch % config.eval_every == 0 {
            let report = evaluate_both(
                &params,
                dataset,
                [&sets_a, &sets_b],
                config.eval_k,
                config.ablation.fusion_mode(),
                &hash,
                config.seed,
            )?;
            let hr = report.domain(config.target_domain).hr;
            let improved = best.as_ref().map(|(b, _, _)| hr > *b).unwrap_or(true);
            if improved {
                best = Some((hr, params.clone(), report.clone()));
            }
            last_good_eval_epoch = epoch;
            log.evals.push(EpochEval { epoch, report });
        }
    }

    log.validate()?;
    let (best_params, best_report) = match best {
        Some((_, p, r)) => (p, Some(r)),
        None => (params.clone(), None),
    };
    Ok(FitResult {
        best_params,
        final_params: params,
        log,
        best_report,
        candidate_sets: [sets_a, sets_b],
        epoch_millis,
    })
}

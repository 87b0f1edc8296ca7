//! Acceptance suite: one test per criterion, each printing a pass/fail
//! line. Every tolerance is pinned in code.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the
//! per-criterion lines.

use std::rc::Rc;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use a2dcdr::alignment::{mmd, KernelConfig};
use a2dcdr::autodiff::Tape;
use a2dcdr::data::{synthesize_dataset, Domain, SyntheticSpec};
use a2dcdr::disentangle::{club_estimate, fit_variational_net};
use a2dcdr::eval::{evaluate_both, rank_metrics, simulate_random_ranking};
use a2dcdr::fusion::tafc_fuse;
use a2dcdr::model::{config_hash, init_parameters, VariationalWeights};
use a2dcdr::rng::{rng_from_seed, SeededRng};
use a2dcdr::training::{build_eval_candidates, fit_with_candidates, Ablation, TrainingConfig};

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn gaussian_matrix(rng: &mut SeededRng, n: usize, d: usize, mean: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| {
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        mean + (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

#[test]
fn criterion_1_gradient_suite() {
    let started = Instant::now();
    let reports = a2dcdr::gradcheck::run_all(20240601).unwrap();
    let mut worst = 0.0f64;
    let mut all_pass = true;
    for r in &reports {
        all_pass &= r.passed();
        worst = worst.max(r.worst_rel_err / r.tolerance);
        println!(
            "  gradient suite {:<24} rel err {:.3e} (tolerance {:.0e})",
            r.name, r.worst_rel_err, r.tolerance
        );
    }
    let elapsed = started.elapsed().as_secs_f64();
    report(
        "1 (gradient suite)",
        all_pass && elapsed < 60.0,
        &format!(
            "{} suites, worst err/tolerance ratio {worst:.2e}, {elapsed:.1}s < 60s",
            reports.len()
        ),
    );
}

#[test]
fn criterion_2_mmd_oracle() {
    let kernel = KernelConfig::default();

    // mmd(X, X) < 1e-7.
    let mut rng = rng_from_seed(2001);
    let x = gaussian_matrix(&mut rng, 64, 3, 0.0);
    let self_mmd = mmd(&x, &x.clone(), &kernel).unwrap();

    // Two shifted Gaussians (5 sigma apart, n = 256) beat the null in at
    // least 99 of 100 seeded trials.
    let mut wins = 0;
    for seed in 0..100u64 {
        let mut trial_rng = rng_from_seed(31000 + seed);
        let a = gaussian_matrix(&mut trial_rng, 256, 2, 0.0);
        let b = gaussian_matrix(&mut trial_rng, 256, 2, 5.0);
        let a2 = gaussian_matrix(&mut trial_rng, 256, 2, 0.0);
        if mmd(&a, &b, &kernel).unwrap() > mmd(&a, &a2, &kernel).unwrap() {
            wins += 1;
        }
    }

    // Exact symmetry and permutation invariance (bitwise).
    let y = gaussian_matrix(&mut rng, 48, 3, 1.0);
    let base = mmd(&x.slice(ndarray::s![..48, ..]).to_owned(), &y, &kernel).unwrap();
    let x48 = x.slice(ndarray::s![..48, ..]).to_owned();
    let swapped = mmd(&y, &x48, &kernel).unwrap();
    let mut perm: Vec<usize> = (0..48).collect();
    perm.shuffle(&mut rng);
    let mut xp = Array2::zeros(x48.dim());
    let mut yp = Array2::zeros(y.dim());
    for (r, &p) in perm.iter().enumerate() {
        xp.row_mut(r).assign(&x48.row(p));
        yp.row_mut(r).assign(&y.row(p));
    }
    let permuted = mmd(&xp, &yp, &kernel).unwrap();

    let pass = self_mmd < 1e-7
        && wins >= 99
        && base.to_bits() == swapped.to_bits()
        && base.to_bits() == permuted.to_bits();
    report(
        "2 (MMD oracle)",
        pass,
        &format!(
            "mmd(X,X) = {self_mmd:.1e}, separation {wins}/100, symmetry and permutation bitwise"
        ),
    );
}

#[test]
fn criterion_3_club_oracle() {
    let started = Instant::now();

    // Independent Gaussians: |estimate| < 0.1 after 200 fitting steps.
    let mut rng = rng_from_seed(41);
    let n = 512;
    let h_t = gaussian_matrix(&mut rng, n, 2, 0.0);
    let h_s = gaussian_matrix(&mut rng, n, 2, 0.0);
    let mut net = VariationalWeights::init(2, &mut rng);
    fit_variational_net(&mut net, &h_t, &h_s, 200, 0.01).unwrap();
    let mut shuffle_rng = rng_from_seed(42);
    let independent = club_estimate(&net, &h_t, &h_s, 16, &mut shuffle_rng).unwrap();

    // Correlated 1-D Gaussians, rho = 0.9: estimate >= 0.415, which is
    // half of the analytic MI -ln(1 - rho^2)/2 ~ 0.830.
    let rho: f64 = 0.9;
    let mut rng = rng_from_seed(43);
    let mut t = Array2::zeros((n, 1));
    let mut s = Array2::zeros((n, 1));
    for i in 0..n {
        let x = gaussian_matrix(&mut rng, 1, 1, 0.0)[[0, 0]];
        let eps = gaussian_matrix(&mut rng, 1, 1, 0.0)[[0, 0]];
        s[[i, 0]] = x;
        t[[i, 0]] = rho * x + (1.0 - rho * rho).sqrt() * eps;
    }
    let mut net = VariationalWeights::init(1, &mut rng);
    fit_variational_net(&mut net, &t, &s, 200, 0.01).unwrap();
    let mut shuffle_rng = rng_from_seed(44);
    let correlated = club_estimate(&net, &t, &s, 16, &mut shuffle_rng).unwrap();

    let elapsed = started.elapsed().as_secs_f64();
    let pass = independent.abs() < 0.1 && correlated >= 0.415 && elapsed < 120.0;
    report(
        "3 (CLUB oracle)",
        pass,
        &format!(
            "independent {independent:.4} (|.| < 0.1), correlated {correlated:.3} >= 0.415 \
             (analytic 0.830), {elapsed:.1}s < 120s"
        ),
    );
}

#[test]
fn criterion_4_grl_contract() {
    let mut rng = rng_from_seed(77);
    let x = gaussian_matrix(&mut rng, 4, 5, 0.0);
    let probe = gaussian_matrix(&mut rng, 4, 5, 0.0);
    let mut pass = true;
    for scale in [1.0, 0.5, 2.0] {
        let mut tape = Tape::new();
        let vx = tape.leaf(x.clone());
        let vp = tape.leaf(probe.clone());
        let reversed = tape.grl(vx, scale);
        pass &= tape.value(reversed) == &x; // forward identity, exact
        let prod = tape.mul(reversed, vp);
        let mean = tape.mean_all(prod);
        let loss = tape.scale(mean, 20.0); // sum over the 4x5 probe
        let grads = tape.backward(loss);
        // d loss / d x = -scale * probe, analytically.
        let g = grads.get(vx).unwrap();
        for (gv, pv) in g.iter().zip(probe.iter()) {
            pass &= (gv - (-scale * pv)).abs() < 1e-12;
        }
        // The probe itself sees the ordinary (unreversed) gradient.
        let gp = grads.get(vp).unwrap();
        for (gv, xv) in gp.iter().zip(x.iter()) {
            pass &= (gv - xv).abs() < 1e-12;
        }
    }
    report(
        "4 (GRL contract)",
        pass,
        "forward identity exact; backward equals -scale x downstream gradient on a linear probe",
    );
}

#[test]
fn criterion_5_ranking_oracle() {
    // Hand-computed 3-user instance (ranks 1, 2, 4 at K = 3).
    let lists = [
        (vec![9.0, 1.0, 2.0, 3.0], 1usize, 1.0),
        (vec![5.0, 7.0, 1.0, 0.0], 2, 1.0 / 3.0f64.log2()),
        (vec![1.0, 4.0, 3.0, 2.0], 4, 0.0),
    ];
    let mut hand_ok = true;
    for (scores, expect_rank, expect_ndcg) in &lists {
        let out = rank_metrics(scores, 0, 3).unwrap();
        hand_ok &= out.rank == *expect_rank && (out.ndcg - expect_ndcg).abs() < 1e-12;
    }

    // Random scores over 999 negatives: HR@10 = 1.0% +- 0.3 across 1e5
    // simulated users, and NDCG <= HR.
    let (hr, ndcg) = simulate_random_ranking(100_000, 999, 10, 505);
    let pass = hand_ok && (hr - 1.0).abs() < 0.3 && ndcg <= hr;
    report(
        "5 (ranking oracle)",
        pass,
        &format!("hand instance exact; random HR@10 {hr:.2}% in 1.0 +- 0.3, NDCG {ndcg:.2} <= HR"),
    );
}

#[test]
fn criterion_6_tafc_properties() {
    let mut rng = rng_from_seed(66);
    let d = 6;
    let mut pass = true;
    for _ in 0..200 {
        let h_v: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let reps: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let fused = tafc_fuse(&h_v, [&reps[0], &reps[1], &reps[2]], d).unwrap();

        // Probability vector within 1e-6.
        let sum: f64 = fused.attention_weights.iter().sum();
        pass &= (sum - 1.0).abs() < 1e-6 && fused.attention_weights.iter().all(|&w| w >= 0.0);

        // Convex combination residual.
        for c in 0..d {
            let combo: f64 = (0..3).map(|k| fused.attention_weights[k] * reps[k][c]).sum();
            pass &= (combo - fused.e[c]).abs() < 1e-6;
        }

        // Permutation equivariance.
        let permuted = tafc_fuse(&h_v, [&reps[2], &reps[0], &reps[1]], d).unwrap();
        pass &= (permuted.attention_weights[0] - fused.attention_weights[2]).abs() < 1e-9;
        pass &= (permuted.attention_weights[1] - fused.attention_weights[0]).abs() < 1e-9;
        for c in 0..d {
            pass &= (permuted.e[c] - fused.e[c]).abs() < 1e-9;
        }

        // Positive scaling of the query preserves the argmax.
        let scaled: Vec<f64> = h_v.iter().map(|v| v * 11.7).collect();
        let rescaled = tafc_fuse(&scaled, [&reps[0], &reps[1], &reps[2]], d).unwrap();
        let argmax = |w: &[f64; 3]| {
            w.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0
        };
        pass &= argmax(&rescaled.attention_weights) == argmax(&fused.attention_weights);
    }

    // Identical reps give exactly uniform weights.
    let rep = vec![0.4, -0.7, 1.1, 0.0, 2.0, -0.1];
    let h_v = vec![1.0, 0.5, -0.5, 2.0, 0.0, 1.0];
    let fused = tafc_fuse(&h_v, [&rep, &rep, &rep], d).unwrap();
    for w in fused.attention_weights {
        pass &= (w - 1.0 / 3.0).abs() < 1e-12;
    }

    report(
        "6 (TAFC properties)",
        pass,
        "probability vector, convex hull, equivariance, argmax scale invariance, uniform symmetry",
    );
}

/// The shared desk-scale setup for criterion 7.
fn synthetic_task(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        user_count: 500,
        item_counts: [200, 200],
        latent_dim: 8,
        shared_strength: 0.8,
        exclusive_strength: 0.5,
        noise: 0.1,
        interactions_per_user: 16,
        seed,
    }
}

fn learning_config(ablation: Ablation, seed: u64) -> TrainingConfig {
    TrainingConfig {
        dim: 16,
        layers: 2,
        learning_rate: 0.01,
        batch_size: 1024,
        epochs: 30,
        eval_every: 30,
        eval_negatives: 99,
        ablation,
        seed,
        ..Default::default()
    }
}

#[test]
fn criterion_7_end_to_end_synthetic_learning() {
    let started = Instant::now();
    let seeds = [0u64, 1, 2, 3, 4];
    let mut full_hr = Vec::new();
    let mut inter_hr = Vec::new();
    let mut baseline_hr = Vec::new();
    let mut ce_drops = Vec::new();

    for &seed in &seeds {
        let dataset = synthesize_dataset(&synthetic_task(seed)).unwrap();

        let full_config = learning_config(Ablation::Full, seed);
        let candidates = build_eval_candidates(&dataset, &full_config).unwrap();

        // Frozen-random-embedding baseline: initialized, never trained.
        let frozen = init_parameters(&dataset, &full_config, seed).unwrap();
        let baseline = evaluate_both(
            &frozen,
            &dataset,
            [&candidates[0], &candidates[1]],
            full_config.eval_k,
            full_config.ablation.fusion_mode(),
            &config_hash(&full_config),
            seed,
        )
        .unwrap();
        baseline_hr.push(baseline.domain(Domain::B).hr);

        let full = fit_with_candidates(&dataset, &full_config, candidates.clone()).unwrap();
        let full_report = full.best_report.as_ref().unwrap();
        full_hr.push(full_report.domain(Domain::B).hr);
        assert!(
            full_report.domain(Domain::A).ndcg <= full_report.domain(Domain::A).hr + 1e-9
                && full_report.domain(Domain::B).ndcg <= full_report.domain(Domain::B).hr + 1e-9,
            "NDCG <= HR must hold on every evaluation"
        );

        // Train-CE learning sanity on the same run: mean first-epoch CE vs
        // mean last-epoch CE drops by at least 30%.
        let mean_ce = |epoch: usize| {
            let (sum, count) = full
                .log
                .records
                .iter()
                .filter(|r| r.epoch == epoch)
                .fold((0.0, 0usize), |(s, c), r| (s + r.l_ce, c + 1));
            sum / count as f64
        };
        ce_drops.push((mean_ce(1), mean_ce(full_config.epochs)));

        let inter_config = learning_config(Ablation::InterOnly, seed);
        let inter_candidates = build_eval_candidates(&dataset, &inter_config).unwrap();
        let inter = fit_with_candidates(&dataset, &inter_config, inter_candidates).unwrap();
        inter_hr.push(inter.best_report.as_ref().unwrap().domain(Domain::B).hr);
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let full_mean = mean(&full_hr);
    let inter_mean = mean(&inter_hr);
    let baseline_mean = mean(&baseline_hr);
    let elapsed = started.elapsed().as_secs_f64();

    println!(
        "  per-seed HR@10 full {full_hr:?}\n  per-seed HR@10 inter_only {inter_hr:?}\n  \
         per-seed HR@10 frozen baseline {baseline_hr:?}"
    );
    for (first, last) in &ce_drops {
        println!("  train CE first epoch {first:.4} -> last epoch {last:.4}");
    }

    let ce_ok = ce_drops.iter().all(|(first, last)| *last <= 0.7 * first);
    let pass = full_mean >= baseline_mean + 5.0 && full_mean >= inter_mean && ce_ok
        && elapsed < 600.0;
    report(
        "7 (end-to-end synthetic learning)",
        pass,
        &format!(
            "mean HR@10: full {full_mean:.2} vs baseline {baseline_mean:.2} (gap >= 5) and \
             inter_only {inter_mean:.2} (full >= inter); CE drop >= 30% each seed; \
             {elapsed:.0}s < 600s"
        ),
    );
}

#[test]
fn criterion_8_reconstruction_overfit() {
    use a2dcdr::disentangle::{reconstruction_loss, ReconstructionInputs};
    use a2dcdr::model::{MlpWeights, StagedMlp};
    use a2dcdr::optim::AdamState;

    // d = 8 (width 16), N = 32, 500 reconstructor-only steps; the loss
    // must drop by at least 90%.
    let d = 8;
    let n = 32;
    let mut rng = rng_from_seed(88);
    let encoded = [
        gaussian_matrix(&mut rng, n, 2 * d, 0.0),
        gaussian_matrix(&mut rng, n, 2 * d, 0.0),
    ];
    let targets = [
        gaussian_matrix(&mut rng, n, 2 * d, 0.0),
        gaussian_matrix(&mut rng, n, 2 * d, 0.0),
    ];

    // Production-initialized reconstructors from a full parameter set.
    let dataset = synthesize_dataset(&SyntheticSpec {
        user_count: 8,
        item_counts: [12, 12],
        interactions_per_user: 3,
        ..Default::default()
    })
    .unwrap();
    let config = TrainingConfig {
        dim: d,
        ..Default::default()
    };
    let params = init_parameters(&dataset, &config, 88).unwrap();
    let mut recon = [params.reconstructor[0].clone(), params.reconstructor[1].clone()];

    fn stage(tape: &mut Tape, m: &MlpWeights) -> StagedMlp {
        StagedMlp {
            w1: tape.leaf(m.w1.clone()),
            b1: tape.leaf(m.b1.clone()),
            w2: tape.leaf(m.w2.clone()),
            b2: tape.leaf(m.b2.clone()),
        }
    }

    let eval_loss = |recon: &[MlpWeights; 2]| {
        let mut tape = Tape::new();
        let staged = [stage(&mut tape, &recon[0]), stage(&mut tape, &recon[1])];
        let inputs = ReconstructionInputs {
            encoded: [tape.leaf(encoded[0].clone()), tape.leaf(encoded[1].clone())],
            targets: [tape.leaf(targets[0].clone()), tape.leaf(targets[1].clone())],
        };
        let loss = reconstruction_loss(&mut tape, &staged, &inputs, 0.01, 0.09).unwrap();
        tape.scalar(loss)
    };
    let initial = eval_loss(&recon);

    let mut adam = AdamState::default();
    for _ in 0..500 {
        let mut tape = Tape::new();
        let staged = [stage(&mut tape, &recon[0]), stage(&mut tape, &recon[1])];
        let vars = [
            [staged[0].w1, staged[0].b1, staged[0].w2, staged[0].b2],
            [staged[1].w1, staged[1].b1, staged[1].w2, staged[1].b2],
        ];
        let inputs = ReconstructionInputs {
            encoded: [tape.leaf(encoded[0].clone()), tape.leaf(encoded[1].clone())],
            targets: [tape.leaf(targets[0].clone()), tape.leaf(targets[1].clone())],
        };
        let loss = reconstruction_loss(&mut tape, &staged, &inputs, 0.01, 0.09).unwrap();
        let grads = tape.backward(loss);
        let mut updates = Vec::new();
        let (ra, rb) = recon.split_at_mut(1);
        for (dom, m) in [(0usize, &mut ra[0]), (1, &mut rb[0])] {
            let arrays = [&mut m.w1, &mut m.b1, &mut m.w2, &mut m.b2];
            for (slot, (arr, var)) in arrays.into_iter().zip(vars[dom]).enumerate() {
                let g = grads.get_or_zeros(var, arr.dim());
                updates.push((format!("recon{dom}/{slot}"), arr, g));
            }
        }
        adam.apply(&mut updates, 0.01, 10.0);
    }
    let final_loss = eval_loss(&recon);
    let pass = final_loss <= 0.1 * initial;
    report(
        "8 (reconstruction overfit)",
        pass,
        &format!(
            "loss {initial:.5} -> {final_loss:.6} ({:.1}% of initial)",
            100.0 * final_loss / initial
        ),
    );
}

#[test]
fn criterion_9_determinism() {
    let dataset = synthesize_dataset(&SyntheticSpec {
        user_count: 120,
        item_counts: [80, 70],
        interactions_per_user: 8,
        seed: 9,
        ..Default::default()
    })
    .unwrap();
    let config = TrainingConfig {
        dim: 8,
        layers: 2,
        learning_rate: 0.01,
        batch_size: 128,
        epochs: 5,
        eval_every: 5,
        eval_negatives: 50,
        seed: 77,
        ..Default::default()
    };
    let a = a2dcdr::training::fit(&dataset, &config).unwrap();
    let b = a2dcdr::training::fit(&dataset, &config).unwrap();
    let logs_equal = a.log.to_canonical_json() == b.log.to_canonical_json();
    let params_equal = a.final_params.fingerprint(&|_| true)
        == b.final_params.fingerprint(&|_| true);
    report(
        "9 (determinism)",
        logs_equal && params_equal,
        "two full runs with identical config + seed: bitwise-identical logs and parameters",
    );
}

#[test]
fn criterion_10_optional_table_ingestion() {
    // Optional, not gating: exercised only when the corpus is present in
    // the documented per-domain format.
    let Some(dir) = std::env::var_os("A2DCDR_SPORT_CLOTH_DIR") else {
        println!(
            "criterion 10 (corpus ingestion): SKIPPED (set A2DCDR_SPORT_CLOTH_DIR to a \
             directory with sport.tsv/cloth.tsv[, test_sport.tsv/test_cloth.tsv] to enable; \
             the ingestion path itself is covered by unit tests)"
        );
        return;
    };
    let dir = std::path::PathBuf::from(dir);
    let format = a2dcdr::data::FileFormat::default();
    let test_a = dir.join("test_sport.tsv");
    let test_b = dir.join("test_cloth.tsv");
    let explicit = if test_a.exists() && test_b.exists() {
        Some([test_a.as_path(), test_b.as_path()])
    } else {
        None
    };
    let dataset = a2dcdr::data::load_interactions(
        &dir.join("sport.tsv"),
        &dir.join("cloth.tsv"),
        &format,
        explicit,
    )
    .unwrap();
    let pass = dataset.user_count == 9928
        && dataset.item_counts == [30796, 39008]
        && dataset.train[0].len() == 92612
        && dataset.train[1].len() == 87829
        && dataset.test[0].len() == 8326
        && dataset.test[1].len() == 7540;
    report(
        "10 (corpus ingestion)",
        pass,
        &format!(
            "users {}, items {:?}, train ({}, {}), test ({}, {})",
            dataset.user_count,
            dataset.item_counts,
            dataset.train[0].len(),
            dataset.train[1].len(),
            dataset.test[0].len(),
            dataset.test[1].len()
        ),
    );
}

//! Implementations of the CLI subcommands.

use std::fs;
use std::path::Path;

use a2dcdr::data::{
    build_candidate_sets, dataset_fingerprint, load_candidate_sets, load_dataset,
    load_interactions, save_candidate_sets, save_dataset, synthesize_dataset, CandidateSet,
    Domain, FileFormat, SyntheticSpec,
};
use a2dcdr::error::{Error, Result};
use a2dcdr::eval::{
    evaluate_both, export_representations, sparsity_report, EvalReport, DEFAULT_BUCKETS,
};
use a2dcdr::model::{config_hash, init_parameters, load_checkpoint, save_checkpoint};
use a2dcdr::training::{
    build_eval_candidates, fit_with_candidates, Ablation, FitResult, TrainingConfig,
};

use crate::manifest::RunManifest;
use crate::{AblateArgs, ConfigOverrides, EvalArgs, GradcheckArgs, PrepareArgs, TrainArgs};

/// Resolve the effective config: file (if given), then flag overrides.
fn resolve_config(overrides: &ConfigOverrides) -> Result<TrainingConfig> {
    let mut config = match &overrides.config {
        Some(path) => serde_json::from_str::<TrainingConfig>(&fs::read_to_string(path)?)
            .map_err(|e| Error::Validation(format!("bad config file {}: {e}", path.display())))?,
        None => TrainingConfig::default(),
    };
    macro_rules! apply {
        ($($field:ident),*) => {
            $(if let Some(v) = overrides.$field { config.$field = v; })*
        };
    }
    apply!(
        dim,
        layers,
        learning_rate,
        batch_size,
        epochs,
        alpha,
        beta_a,
        beta_b,
        gamma_a,
        gamma_b,
        club_inner_steps,
        grl_scale,
        symmetric_dcmmd,
        negative_ratio,
        ablation,
        seed,
        eval_every,
        eval_negatives,
        eval_k,
        target_domain
    );
    config.validate()?;
    Ok(config)
}

pub fn prepare(args: PrepareArgs, quiet: bool) -> Result<()> {
    let dataset = if args.synthetic {
        let spec = SyntheticSpec {
            user_count: args.users,
            item_counts: [args.items_a, args.items_b],
            latent_dim: args.latent_dim,
            shared_strength: args.shared,
            exclusive_strength: args.exclusive,
            noise: args.noise,
            interactions_per_user: args.interactions_per_user,
            seed: args.seed,
        };
        synthesize_dataset(&spec)?
    } else {
        match (&args.input_a, &args.input_b) {
            (Some(a), Some(b)) => {
                let format = FileFormat {
                    delimiter: args.delimiter,
                };
                let explicit = match (&args.test_a, &args.test_b) {
                    (Some(ta), Some(tb)) => Some([ta.as_path(), tb.as_path()]),
                    _ => None,
                };
                load_interactions(a, b, &format, explicit)?
            }
            _ => {
                return Err(Error::Validation(
                    "either --synthetic or both --input-a and --input-b are required".into(),
                ))
            }
        }
    };

    let mut manifest = RunManifest::new("prepare", dataset_fingerprint(&dataset), args.seed);
    fs::create_dir_all(&args.out)?;
    save_dataset(&dataset, &args.out)?;
    for name in [
        "manifest.json",
        "train_a.tsv",
        "train_b.tsv",
        "test_a.tsv",
        "test_b.tsv",
    ] {
        manifest.record(&args.out.join(name));
    }

    for domain in Domain::BOTH {
        let build = build_candidate_sets(&dataset, domain, args.seed, args.negatives);
        if build.skipped_users > 0 && !quiet {
            println!(
                "domain {domain}: skipped {} test users lacking {} candidates",
                build.skipped_users, args.negatives
            );
        }
        let path = args.out.join(format!("candidates_{domain}.tsv"));
        save_candidate_sets(&build.sets, &path)?;
        manifest.record(&path);
        if !quiet {
            println!(
                "domain {domain}: {} candidate sets of 1+{} items",
                build.sets.len(),
                args.negatives
            );
        }
    }

    if !quiet {
        println!(
            "prepared dataset: {} users, items ({}, {}), train ({}, {}), test ({}, {})",
            dataset.user_count,
            dataset.item_counts[0],
            dataset.item_counts[1],
            dataset.train[0].len(),
            dataset.train[1].len(),
            dataset.test[0].len(),
            dataset.test[1].len(),
        );
    }
    manifest.finish(&args.out.join("prepare_manifest.json"))
}

fn load_prepared_candidates(dir: &Path) -> Result<[Vec<CandidateSet>; 2]> {
    let a = load_candidate_sets(&dir.join("candidates_a.tsv"))?;
    let b = load_candidate_sets(&dir.join("candidates_b.tsv"))?;
    Ok([a, b])
}

/// Prepared (persisted) candidate sets when available, otherwise fresh
/// ones derived from the config seed.
fn candidates_for(
    data_dir: &Path,
    dataset: &a2dcdr::data::DomainDataset,
    config: &TrainingConfig,
) -> Result<[Vec<CandidateSet>; 2]> {
    if data_dir.join("candidates_a.tsv").exists() && data_dir.join("candidates_b.tsv").exists() {
        load_prepared_candidates(data_dir)
    } else {
        build_eval_candidates(dataset, config)
    }
}

fn run_fit(
    data_dir: &Path,
    dataset: &a2dcdr::data::DomainDataset,
    config: &TrainingConfig,
) -> Result<FitResult> {
    let candidates = candidates_for(data_dir, dataset, config)?;
    fit_with_candidates(dataset, config, candidates)
}

pub fn train(args: TrainArgs, quiet: bool) -> Result<()> {
    let config = resolve_config(&args.overrides)?;
    let dataset = load_dataset(&args.data)?;
    let hash = config_hash(&config);
    let run_dir = args.out.join(format!("{hash}-seed{}", config.seed));
    fs::create_dir_all(&run_dir)?;

    let mut manifest = RunManifest::new("train", dataset_fingerprint(&dataset), config.seed);
    manifest.config_hash = hash.clone();
    manifest.config = Some(config.clone());

    let result = run_fit(&args.data, &dataset, &config)?;

    let config_path = run_dir.join("config.json");
    fs::write(
        &config_path,
        serde_json::to_string_pretty(&config).map_err(Error::from)? + "\n",
    )?;
    manifest.record(&config_path);

    let log_path = run_dir.join("trainlog.json");
    fs::write(&log_path, result.log.to_canonical_json() + "\n")?;
    manifest.record(&log_path);

    let timings_path = run_dir.join("timings.csv");
    let mut timings = String::from("epoch,millis\n");
    for (epoch, ms) in &result.epoch_millis {
        timings.push_str(&format!("{epoch},{ms}\n"));
    }
    fs::write(&timings_path, timings)?;
    manifest.record(&timings_path);

    for (name, params) in [
        ("checkpoint_best", &result.best_params),
        ("checkpoint_final", &result.final_params),
    ] {
        let dir = run_dir.join(name);
        save_checkpoint(params, &dir, &hash)?;
        // Self-contained checkpoints: the config rides along.
        fs::write(
            dir.join("config.json"),
            serde_json::to_string_pretty(&config).map_err(Error::from)? + "\n",
        )?;
        manifest.record(&dir.join("manifest.json"));
        manifest.record(&dir.join("params.bin"));
        manifest.record(&dir.join("config.json"));
    }

    if let Some(report) = &result.best_report {
        let report_path = run_dir.join("eval_report.json");
        fs::write(
            &report_path,
            serde_json::to_string_pretty(report).map_err(Error::from)? + "\n",
        )?;
        manifest.record(&report_path);
        if !quiet {
            println!("best evaluation (by domain-{} HR@{}):", config.target_domain, config.eval_k);
            print!("{}", report.table());
        }
    }
    if !quiet {
        if let Some(last) = result.log.records.last() {
            println!(
                "final losses: ce {:.4}, dcmmd {:.4}, mi {:.6}, rec {:.6}, total {:.4}",
                last.l_ce, last.l_dcmmd, last.l_mi, last.l_rec, last.l_total
            );
        }
        println!("run directory: {}", run_dir.display());
    }
    manifest.finish(&run_dir.join("run_manifest.json"))
}

pub fn eval(args: EvalArgs, quiet: bool) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    // The checkpoint's own config (written by `train`) supplies the
    // architecture and fusion mode; flags can still override.
    let mut overrides = args.overrides.clone();
    let checkpoint_config = args.checkpoint.join("config.json");
    if overrides.config.is_none() && checkpoint_config.exists() {
        overrides.config = Some(checkpoint_config);
    }
    let config = resolve_config(&overrides)?;
    let template = init_parameters(&dataset, &config, config.seed)?;
    let params = load_checkpoint(&args.checkpoint, &template)?;

    let sets = load_prepared_candidates(&args.data)?;
    let hash = config_hash(&config);
    let mut report: EvalReport = evaluate_both(
        &params,
        &dataset,
        [&sets[0], &sets[1]],
        config.eval_k,
        config.ablation.fusion_mode(),
        &hash,
        config.seed,
    )?;

    if args.sparsity {
        let a = sparsity_report(
            &params,
            &dataset,
            Domain::A,
            &sets[0],
            &DEFAULT_BUCKETS,
            config.eval_k,
            config.ablation.fusion_mode(),
        )?;
        let b = sparsity_report(
            &params,
            &dataset,
            Domain::B,
            &sets[1],
            &DEFAULT_BUCKETS,
            config.eval_k,
            config.ablation.fusion_mode(),
        )?;
        report.sparsity = Some([a, b]);
    }

    fs::create_dir_all(&args.out)?;
    let mut manifest = RunManifest::new("eval", dataset_fingerprint(&dataset), config.seed);
    manifest.config_hash = hash;
    let report_path = args.out.join("eval_report.json");
    fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n",
    )?;
    manifest.record(&report_path);

    if let Some(reps_path) = &args.export_reps {
        let rows = export_representations(
            &params,
            &dataset,
            args.sample_size,
            config.seed,
            reps_path,
            args.export_specific_a,
        )?;
        manifest.record(reps_path);
        if !quiet {
            println!("exported {rows} representation rows to {}", reps_path.display());
        }
    }

    if !quiet {
        print!("{}", report.table());
        if let Some(sparsity) = &report.sparsity {
            for rep in sparsity {
                println!("sparsity buckets, domain {}:", rep.domain);
                print!("{}", rep.table());
            }
        }
    }
    manifest.finish(&args.out.join("eval_manifest.json"))
}

pub fn ablate(args: AblateArgs, quiet: bool) -> Result<()> {
    let base = resolve_config(&args.overrides)?;
    let dataset = load_dataset(&args.data)?;
    fs::create_dir_all(&args.out)?;
    let mut manifest = RunManifest::new("ablate", dataset_fingerprint(&dataset), base.seed);
    manifest.config_hash = config_hash(&base);

    let mut rows = Vec::new();
    for variant in Ablation::ALL {
        let config = TrainingConfig {
            ablation: variant,
            ..base.clone()
        };
        let result = run_fit(&args.data, &dataset, &config)?;
        let report = result
            .best_report
            .ok_or_else(|| Error::Validation("ablate: no evaluation was scheduled".into()))?;
        if !quiet {
            println!(
                "{:<12} HR(a) {:>6.2}  NDCG(a) {:>6.2}  HR(b) {:>6.2}  NDCG(b) {:>6.2}",
                variant.name(),
                report.domain(Domain::A).hr,
                report.domain(Domain::A).ndcg,
                report.domain(Domain::B).hr,
                report.domain(Domain::B).ndcg,
            );
        }
        rows.push((variant, report));
    }

    #[derive(serde::Serialize)]
    struct AblationRow {
        variant: &'static str,
        report: EvalReport,
    }
    let table: Vec<AblationRow> = rows
        .into_iter()
        .map(|(v, report)| AblationRow {
            variant: v.name(),
            report,
        })
        .collect();
    let path = args.out.join("ablation.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(&table).map_err(Error::from)? + "\n",
    )?;
    manifest.record(&path);
    manifest.finish(&args.out.join("ablate_manifest.json"))
}

pub fn gradcheck(args: GradcheckArgs, quiet: bool) -> Result<()> {
    let reports = a2dcdr::gradcheck::run_all(args.seed)?;
    let mut failed = false;
    for report in &reports {
        if !quiet || !report.passed() {
            println!(
                "{:<24} worst rel err {:>12.3e}  (tolerance {:.0e})  {}",
                report.name,
                report.worst_rel_err,
                report.tolerance,
                if report.passed() { "PASS" } else { "FAIL" }
            );
        }
        failed |= !report.passed();
    }
    if failed {
        return Err(Error::Numerical(
            "gradient check failed; see report above".into(),
        ));
    }
    Ok(())
}

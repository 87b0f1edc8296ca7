//! Ranked-retrieval evaluation: hit ratio and NDCG over sampled candidate
//! sets, sparsity-bucket analysis, and representation export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CandidateSet, Domain, DomainDataset};
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::model::{build_graphs, encode_full_plain, FullRepsPlain, ModelParameters};
use crate::rng::{derive_seed, rng_from_seed};

/// Rank outcome for a single candidate list with one positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankOutcome {
    pub hit: bool,
    pub ndcg: f64,
    /// 1-based rank of the positive under pessimistic tie-breaking.
    pub rank: usize,
}

/// Rank the positive among the candidates by descending score, breaking
/// ties pessimistically (the positive is placed after every equal-scored
/// negative). hr = rank <= k; ndcg = 1/log2(rank + 1) within the cutoff.
pub fn rank_metrics(scores: &[f64], positive_position: usize, k: usize) -> Result<RankOutcome> {
    if k < 1 {
        return Err(Error::Validation("rank_metrics: K must be >= 1".into()));
    }
    if positive_position >= scores.len() {
        return Err(Error::Index(format!(
            "rank_metrics: positive position {positive_position} out of {}",
            scores.len()
        )));
    }
    let positive = scores[positive_position];
    let mut rank = 1usize;
    for (i, &s) in scores.iter().enumerate() {
        if i != positive_position && s >= positive {
            rank += 1;
        }
    }
    let hit = rank <= k;
    let ndcg = if hit {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    };
    Ok(RankOutcome { hit, ndcg, rank })
}

/// Monte-Carlo HR@k / NDCG@k (percent) of a uniformly random scorer over
/// candidate lists of `negatives` + 1 items, driven through
/// [`rank_metrics`]. The closed-form expectation of HR is
/// 100 * k / (negatives + 1).
pub fn simulate_random_ranking(users: usize, negatives: usize, k: usize, seed: u64) -> (f64, f64) {
    use rand::Rng as _;
    let mut rng = rng_from_seed(seed);
    let mut hr_sum = 0.0;
    let mut ndcg_sum = 0.0;
    let mut scores = vec![0.0f64; negatives + 1];
    for _ in 0..users {
        for s in scores.iter_mut() {
            *s = rng.random_range(0.0..1.0);
        }
        let out = rank_metrics(&scores, 0, k).expect("valid k");
        hr_sum += out.hit as u8 as f64;
        ndcg_sum += out.ndcg;
    }
    let n = users as f64;
    (100.0 * hr_sum / n, 100.0 * ndcg_sum / n)
}

/// Per-domain aggregate metrics, as percentages.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DomainReport {
    pub domain: Domain,
    pub hr: f64,
    pub ndcg: f64,
    pub evaluated_users: usize,
}

/// Full evaluation output: per-domain metrics plus optional sparsity
/// breakdowns.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub config_hash: String,
    pub seed: u64,
    pub domains: [DomainReport; 2],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<[SparsityReport; 2]>,
}

impl EvalReport {
    pub fn domain(&self, domain: Domain) -> &DomainReport {
        &self.domains[domain.index()]
    }

    /// Fixed-width console table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<8} {:>10} {:>10} {:>8}", "domain", "HR", "NDCG", "users");
        for rep in &self.domains {
            let _ = writeln!(
                out,
                "{:<8} {:>10.2} {:>10.2} {:>8}",
                rep.domain.to_string(),
                rep.hr,
                rep.ndcg,
                rep.evaluated_users
            );
        }
        out
    }
}

/// Score a user's candidate list: the triple is (cross-domain
/// encompassing, own-domain encompassing, own-domain specific) fused
/// against each candidate's item representation.
pub fn score_candidates(
    full: &FullRepsPlain,
    domain: Domain,
    user: u32,
    candidates: &[u32],
    mode: FusionMode,
) -> Vec<f64> {
    let d = domain.index();
    let o = domain.other().index();
    let dim = full.h_v[d].ncols();
    let scale = 1.0 / (dim as f64).sqrt();
    let cross = full.h_t[o].row(user as usize);
    let own_t = full.h_t[d].row(user as usize);
    let own_s = full.h_s[d].row(user as usize);
    let reps = [cross, own_t, own_s];
    let mut scores = Vec::with_capacity(candidates.len());
    for &item in candidates {
        let q = full.h_v[d].row(item as usize);
        let weights = match mode {
            FusionMode::SumPooling => [1.0; 3],
            FusionMode::Tafc => {
                let logits: [f64; 3] = std::array::from_fn(|k| {
                    reps[k].iter().zip(q.iter()).map(|(a, b)| a * b).sum::<f64>() * scale
                });
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: [f64; 3] = std::array::from_fn(|k| (logits[k] - max).exp());
                let total: f64 = exps.iter().sum();
                [exps[0] / total, exps[1] / total, exps[2] / total]
            }
        };
        let mut score = 0.0;
        for c in 0..dim {
            let fused =
                weights[0] * reps[0][c] + weights[1] * reps[1][c] + weights[2] * reps[2][c];
            score += fused * q[c];
        }
        scores.push(score);
    }
    scores
}

/// Evaluate one domain over its candidate sets against pre-computed full
/// encodings.
pub fn evaluate_domain_encoded(
    full: &FullRepsPlain,
    domain: Domain,
    candidate_sets: &[CandidateSet],
    k: usize,
    mode: FusionMode,
) -> Result<DomainReport> {
    if candidate_sets.is_empty() {
        return Err(Error::Validation(format!(
            "no candidate sets for domain {domain}"
        )));
    }
    let mut hr_sum = 0.0;
    let mut ndcg_sum = 0.0;
    for set in candidate_sets {
        // Positive first, negatives after; rank_metrics gets its position.
        let mut candidates = Vec::with_capacity(1 + set.negatives.len());
        candidates.push(set.positive);
        candidates.extend_from_slice(&set.negatives);
        let scores = score_candidates(full, domain, set.user, &candidates, mode);
        let outcome = rank_metrics(&scores, 0, k)?;
        debug_assert!(outcome.ndcg <= (outcome.hit as u8) as f64 + 1e-12);
        hr_sum += outcome.hit as u8 as f64;
        ndcg_sum += outcome.ndcg;
    }
    let n = candidate_sets.len() as f64;
    let report = DomainReport {
        domain,
        hr: 100.0 * hr_sum / n,
        ndcg: 100.0 * ndcg_sum / n,
        evaluated_users: candidate_sets.len(),
    };
    debug_assert!(report.ndcg <= report.hr + 1e-9);
    Ok(report)
}

/// Evaluate one domain, encoding from scratch.
pub fn evaluate_domain(
    params: &ModelParameters,
    dataset: &DomainDataset,
    domain: Domain,
    candidate_sets: &[CandidateSet],
    k: usize,
    mode: FusionMode,
) -> Result<DomainReport> {
    let graphs = build_graphs(dataset);
    let full = encode_full_plain(params, [&graphs[0], &graphs[1]])?;
    evaluate_domain_encoded(&full, domain, candidate_sets, k, mode)
}

/// Evaluate both domains with a single encoding pass.
pub fn evaluate_both(
    params: &ModelParameters,
    dataset: &DomainDataset,
    sets: [&[CandidateSet]; 2],
    k: usize,
    mode: FusionMode,
    config_hash: &str,
    seed: u64,
) -> Result<EvalReport> {
    let graphs = build_graphs(dataset);
    let full = encode_full_plain(params, [&graphs[0], &graphs[1]])?;
    let a = evaluate_domain_encoded(&full, Domain::A, sets[0], k, mode)?;
    let b = evaluate_domain_encoded(&full, Domain::B, sets[1], k, mode)?;
    Ok(EvalReport {
        k,
        config_hash: config_hash.to_string(),
        seed,
        domains: [a, b],
        sparsity: None,
    })
}

/// Default sparsity buckets on train interaction counts: 1-10, 11-20,
/// 21-30, >30 (inclusive upper bounds).
pub const DEFAULT_BUCKETS: [usize; 3] = [10, 20, 30];

pub fn bucket_of(count: usize, bounds: &[usize]) -> usize {
    for (i, &b) in bounds.iter().enumerate() {
        if count <= b {
            return i;
        }
    }
    bounds.len()
}

pub fn bucket_label(index: usize, bounds: &[usize]) -> String {
    if index == 0 {
        format!("1-{}", bounds[0])
    } else if index < bounds.len() {
        format!("{}-{}", bounds[index - 1] + 1, bounds[index])
    } else {
        format!(">{}", bounds[bounds.len() - 1])
    }
}

/// Metrics for one (domain-A bucket, domain-B bucket) user group.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SparsityCell {
    pub bucket_a: String,
    pub bucket_b: String,
    pub users: usize,
    pub hr: f64,
    pub ndcg: f64,
}

/// Sparsity breakdown of one domain's evaluation: users grouped by their
/// train-interaction bucket pair. Empty cells are absent, not zero.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SparsityReport {
    pub domain: Domain,
    pub bounds: Vec<usize>,
    pub cells: Vec<SparsityCell>,
}

impl SparsityReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<8} {:<8} {:>7} {:>9} {:>9}",
            "dom-a", "dom-b", "users", "HR", "NDCG"
        );
        for cell in &self.cells {
            let _ = writeln!(
                out,
                "{:<8} {:<8} {:>7} {:>9.2} {:>9.2}",
                cell.bucket_a, cell.bucket_b, cell.users, cell.hr, cell.ndcg
            );
        }
        out
    }
}

/// Per-bucket-pair metrics for one domain's candidate sets.
pub fn sparsity_report(
    params: &ModelParameters,
    dataset: &DomainDataset,
    domain: Domain,
    candidate_sets: &[CandidateSet],
    bounds: &[usize],
    k: usize,
    mode: FusionMode,
) -> Result<SparsityReport> {
    let graphs = build_graphs(dataset);
    let full = encode_full_plain(params, [&graphs[0], &graphs[1]])?;
    sparsity_report_encoded(&full, dataset, domain, candidate_sets, bounds, k, mode)
}

pub fn sparsity_report_encoded(
    full: &FullRepsPlain,
    dataset: &DomainDataset,
    domain: Domain,
    candidate_sets: &[CandidateSet],
    bounds: &[usize],
    k: usize,
    mode: FusionMode,
) -> Result<SparsityReport> {
    let counts_a = dataset.train_counts(Domain::A);
    let counts_b = dataset.train_counts(Domain::B);
    let mut grouped: BTreeMap<(usize, usize), Vec<&CandidateSet>> = BTreeMap::new();
    for set in candidate_sets {
        let key = (
            bucket_of(counts_a[set.user as usize], bounds),
            bucket_of(counts_b[set.user as usize], bounds),
        );
        grouped.entry(key).or_default().push(set);
    }
    let mut cells = Vec::new();
    for ((ba, bb), sets) in grouped {
        let mut hr_sum = 0.0;
        let mut ndcg_sum = 0.0;
        for set in &sets {
            let mut candidates = Vec::with_capacity(1 + set.negatives.len());
            candidates.push(set.positive);
            candidates.extend_from_slice(&set.negatives);
            let scores = score_candidates(full, domain, set.user, &candidates, mode);
            let outcome = rank_metrics(&scores, 0, k)?;
            hr_sum += outcome.hit as u8 as f64;
            ndcg_sum += outcome.ndcg;
        }
        let n = sets.len() as f64;
        cells.push(SparsityCell {
            bucket_a: bucket_label(ba, bounds),
            bucket_b: bucket_label(bb, bounds),
            users: sets.len(),
            hr: 100.0 * hr_sum / n,
            ndcg: 100.0 * ndcg_sum / n,
        });
    }
    Ok(SparsityReport {
        domain,
        bounds: bounds.to_vec(),
        cells,
    })
}

/// Write sampled rows of the disentangled representation groups to a
/// delimited text file for external projection tools. Groups: the
/// domain-A encompassing block h_t_a, the domain-B encompassing block
/// h_t_b, the domain-B specific block h_s_b, and optionally h_s_a.
pub fn export_representations(
    params: &ModelParameters,
    dataset: &DomainDataset,
    sample_size: usize,
    seed: u64,
    path: &Path,
    include_specific_a: bool,
) -> Result<usize> {
    if sample_size > dataset.user_count {
        return Err(Error::Validation(format!(
            "sample_size {sample_size} exceeds user count {}",
            dataset.user_count
        )));
    }
    let graphs = build_graphs(dataset);
    let full = encode_full_plain(params, [&graphs[0], &graphs[1]])?;
    let dim = full.h_t[0].ncols();

    let mut groups: Vec<(&str, &ndarray::Array2<f64>)> = vec![
        ("h_t_a", &full.h_t[0]),
        ("h_t_b", &full.h_t[1]),
        ("h_s_b", &full.h_s[1]),
    ];
    if include_specific_a {
        groups.push(("h_s_a", &full.h_s[0]));
    }

    let mut out = String::new();
    out.push_str("group\tuser_index");
    for c in 0..dim {
        let _ = write!(out, "\tv{c}");
    }
    out.push('\n');

    let mut rows = 0usize;
    for (name, block) in groups {
        use rand::Rng as _;
        let mut rng = rng_from_seed(derive_seed(seed, &format!("export/{name}")));
        let mut users: Vec<u32> = (0..dataset.user_count as u32).collect();
        for pos in 0..sample_size {
            let swap = rng.random_range(pos..users.len());
            users.swap(pos, swap);
        }
        users.truncate(sample_size);
        for &u in &users {
            let _ = write!(out, "{name}\t{u}");
            for c in 0..dim {
                let _ = write!(out, "\t{}", block[[u as usize, c]]);
            }
            out.push('\n');
            rows += 1;
        }
    }
    fs::write(path, out)?;
    Ok(rows)
}

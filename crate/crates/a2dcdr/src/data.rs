//! Paired implicit-feedback domains: ingestion, synthesis, splits, and
//! negative sampling for training and evaluation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, SeededRng};

/// Default number of sampled negatives per evaluation candidate set.
pub const DEFAULT_EVAL_NEGATIVES: usize = 999;

/// One of the two interaction domains sharing the user set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub const BOTH: [Domain; 2] = [Domain::A, Domain::B];

    pub fn index(self) -> usize {
        match self {
            Domain::A => 0,
            Domain::B => 1,
        }
    }

    pub fn other(self) -> Domain {
        match self {
            Domain::A => Domain::B,
            Domain::B => Domain::A,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::A => write!(f, "a"),
            Domain::B => write!(f, "b"),
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Domain::A),
            "b" => Ok(Domain::B),
            other => Err(Error::Validation(format!("unknown domain tag '{other}'"))),
        }
    }
}

/// Original-id vocabularies kept so re-indexing stays a bijection.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Vocab {
    pub users: Vec<String>,
    pub items: [Vec<String>; 2],
}

/// Two aligned implicit-feedback domains over a shared user set, with
/// train/test splits and per-user interaction sets.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub user_count: usize,
    pub item_counts: [usize; 2],
    pub train: [Vec<(u32, u32)>; 2],
    pub test: [Vec<(u32, u32)>; 2],
    /// Per-domain, per-user set of interacted items (train plus test).
    pub user_item_sets: [Vec<HashSet<u32>>; 2],
    pub vocab: Option<Vocab>,
}

/// Evaluation candidates for one held-out positive: the positive plus
/// sampled non-interacted negatives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub user: u32,
    pub domain: Domain,
    pub positive: u32,
    pub negatives: Vec<u32>,
    pub seed: u64,
}

/// Parameters of the synthetic cross-domain generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub user_count: usize,
    pub item_counts: [usize; 2],
    pub latent_dim: usize,
    /// Weight of the user latent component shared by both domains, in [0, 1].
    pub shared_strength: f64,
    /// Weight of the source-exclusive latent component (domain A only), in [0, 1].
    pub exclusive_strength: f64,
    /// Standard deviation of the per-(user, item) score noise.
    pub noise: f64,
    /// Interactions generated per user per domain.
    pub interactions_per_user: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            user_count: 500,
            item_counts: [200, 200],
            latent_dim: 8,
            shared_strength: 0.8,
            exclusive_strength: 0.5,
            noise: 0.1,
            interactions_per_user: 16,
            seed: 0,
        }
    }
}

/// Ground-truth user latents behind a synthetic dataset, exposed for
/// correlation oracles and diagnostics.
#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    pub latents: [Array2<f64>; 2],
}

/// Column layout of an interaction file: user id, item id, optional
/// timestamp, separated by `delimiter`.
#[derive(Debug, Clone)]
pub struct FileFormat {
    pub delimiter: char,
}

impl Default for FileFormat {
    fn default() -> Self {
        Self { delimiter: '\t' }
    }
}

struct RawRow {
    user: String,
    item: String,
    timestamp: Option<i64>,
}

fn parse_file(path: &Path, format: &FileFormat) -> Result<Vec<RawRow>> {
    let file = fs::File::open(path).map_err(|e| {
        Error::Validation(format!("cannot open {}: {e}", path.display()))
    })?;
    let reader = BufReader::new(file);
    let mut rows = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.is_empty() {
            continue;
        }
        let mut cols = trimmed.split(format.delimiter);
        let user = cols.next().map(str::trim).unwrap_or("");
        let item = cols.next().map(str::trim);
        let ts = cols.next().map(str::trim);
        let item = match item {
            Some(i) if !i.is_empty() && !user.is_empty() => i,
            _ => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    message: format!("expected user{0}item[{0}timestamp]", format.delimiter),
                })
            }
        };
        let timestamp = match ts {
            None | Some("") => None,
            Some(t) => Some(t.parse::<i64>().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message: format!("bad timestamp '{t}'"),
            })?),
        };
        rows.push(RawRow {
            user: user.to_string(),
            item: item.to_string(),
            timestamp,
        });
    }
    Ok(rows)
}

fn build_user_item_sets(
    user_count: usize,
    train: &[Vec<(u32, u32)>; 2],
    test: &[Vec<(u32, u32)>; 2],
) -> [Vec<HashSet<u32>>; 2] {
    let mut sets = [
        vec![HashSet::new(); user_count],
        vec![HashSet::new(); user_count],
    ];
    for d in 0..2 {
        for &(u, i) in train[d].iter().chain(test[d].iter()) {
            sets[d][u as usize].insert(i);
        }
    }
    sets
}

impl DomainDataset {
    /// Validate the structural invariants: index ranges, disjoint splits,
    /// and no duplicate pairs within a split.
    pub fn validate(&self) -> Result<()> {
        for d in 0..2 {
            let mut train_seen = HashSet::new();
            for &(u, i) in &self.train[d] {
                if u as usize >= self.user_count || i as usize >= self.item_counts[d] {
                    return Err(Error::Index(format!(
                        "train pair ({u}, {i}) out of range in domain {d}"
                    )));
                }
                if !train_seen.insert((u, i)) {
                    return Err(Error::Validation(format!(
                        "duplicate train pair ({u}, {i}) in domain {d}"
                    )));
                }
            }
            let mut test_users = HashSet::new();
            for &(u, i) in &self.test[d] {
                if u as usize >= self.user_count || i as usize >= self.item_counts[d] {
                    return Err(Error::Index(format!(
                        "test pair ({u}, {i}) out of range in domain {d}"
                    )));
                }
                if train_seen.contains(&(u, i)) {
                    return Err(Error::Validation(format!(
                        "test positive ({u}, {i}) also in train, domain {d}"
                    )));
                }
                if !test_users.insert(u) {
                    return Err(Error::Validation(format!(
                        "user {u} has more than one test positive in domain {d}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn train_interactions(&self, domain: Domain) -> &[(u32, u32)] {
        &self.train[domain.index()]
    }

    pub fn test_interactions(&self, domain: Domain) -> &[(u32, u32)] {
        &self.test[domain.index()]
    }

    pub fn item_count(&self, domain: Domain) -> usize {
        self.item_counts[domain.index()]
    }

    pub fn user_items(&self, domain: Domain, user: u32) -> &HashSet<u32> {
        &self.user_item_sets[domain.index()][user as usize]
    }

    /// Train-only interaction count per user for a domain (sparsity buckets).
    pub fn train_counts(&self, domain: Domain) -> Vec<usize> {
        let mut counts = vec![0usize; self.user_count];
        for &(u, _) in &self.train[domain.index()] {
            counts[u as usize] += 1;
        }
        counts
    }
}

/// Split interactions per user: hold out the last interaction (by
/// timestamp when present, else file order) for every user with at least
/// two interactions in the domain.
fn leave_one_out(
    per_user: BTreeMap<u32, Vec<(u32, Option<i64>, usize)>>,
) -> (Vec<(u32, u32)>, Vec<(u32, u32)>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (user, mut items) in per_user {
        if items.len() >= 2 {
            // Stable: ties on timestamp fall back to input order.
            items.sort_by_key(|&(_, ts, order)| (ts.unwrap_or(order as i64), order));
            let (held, _, _) = items.pop().unwrap();
            test.push((user, held));
        }
        for (item, _, _) in items {
            train.push((user, item));
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Load two per-domain interaction files into an aligned dataset.
///
/// Users are re-indexed contiguously (first-appearance order over domain A
/// then B), items per domain likewise. Duplicate (user, item) pairs are
/// dropped. An explicit test split can be supplied per domain; otherwise a
/// leave-one-out split is taken.
pub fn load_interactions(
    path_a: &Path,
    path_b: &Path,
    format: &FileFormat,
    explicit_test: Option<[&Path; 2]>,
) -> Result<DomainDataset> {
    let raw = [parse_file(path_a, format)?, parse_file(path_b, format)?];
    let paths = [path_a, path_b];
    for (rows, path) in raw.iter().zip(paths.iter()) {
        if rows.is_empty() {
            return Err(Error::Validation(format!(
                "no interactions in {}",
                path.display()
            )));
        }
    }

    // Users must be fully shared across domains.
    let users_in: [HashSet<&str>; 2] = [
        raw[0].iter().map(|r| r.user.as_str()).collect(),
        raw[1].iter().map(|r| r.user.as_str()).collect(),
    ];
    let only_a = users_in[0].difference(&users_in[1]).count();
    let only_b = users_in[1].difference(&users_in[0]).count();
    if only_a + only_b > 0 {
        return Err(Error::Validation(format!(
            "users must be shared across domains: {only_a} users appear only in domain a, \
             {only_b} only in domain b"
        )));
    }

    let mut user_ids: HashMap<String, u32> = HashMap::new();
    let mut user_names: Vec<String> = Vec::new();
    let mut item_ids: [HashMap<String, u32>; 2] = [HashMap::new(), HashMap::new()];
    let mut item_names: [Vec<String>; 2] = [Vec::new(), Vec::new()];

    let mut per_user: [BTreeMap<u32, Vec<(u32, Option<i64>, usize)>>; 2] =
        [BTreeMap::new(), BTreeMap::new()];

    for d in 0..2 {
        let mut seen: HashSet<(u32, u32)> = HashSet::new();
        for (order, row) in raw[d].iter().enumerate() {
            let uid = *user_ids.entry(row.user.clone()).or_insert_with(|| {
                user_names.push(row.user.clone());
                (user_names.len() - 1) as u32
            });
            let iid = *item_ids[d].entry(row.item.clone()).or_insert_with(|| {
                item_names[d].push(row.item.clone());
                (item_names[d].len() - 1) as u32
            });
            if seen.insert((uid, iid)) {
                per_user[d]
                    .entry(uid)
                    .or_default()
                    .push((iid, row.timestamp, order));
            }
        }
    }

    let user_count = user_names.len();
    let item_counts = [item_names[0].len(), item_names[1].len()];

    let [per_user_a, per_user_b] = per_user;
    let (train, test) = match explicit_test {
        None => {
            let (train_a, test_a) = leave_one_out(per_user_a);
            let (train_b, test_b) = leave_one_out(per_user_b);
            ([train_a, train_b], [test_a, test_b])
        }
        Some(test_paths) => {
            let mut train: [Vec<(u32, u32)>; 2] = [Vec::new(), Vec::new()];
            let mut test: [Vec<(u32, u32)>; 2] = [Vec::new(), Vec::new()];
            let all = [per_user_a, per_user_b];
            for d in 0..2 {
                let rows = parse_file(test_paths[d], format)?;
                let mut held: HashSet<(u32, u32)> = HashSet::new();
                for row in &rows {
                    let u = *user_ids.get(&row.user).ok_or_else(|| {
                        Error::Validation(format!("test split names unknown user '{}'", row.user))
                    })?;
                    let i = *item_ids[d].get(&row.item).ok_or_else(|| {
                        Error::Validation(format!("test split names unknown item '{}'", row.item))
                    })?;
                    held.insert((u, i));
                }
                for (user, items) in &all[d] {
                    for (item, _, _) in items {
                        if held.contains(&(*user, *item)) {
                            test[d].push((*user, *item));
                        } else {
                            train[d].push((*user, *item));
                        }
                    }
                }
                train[d].sort_unstable();
                test[d].sort_unstable();
            }
            (train, test)
        }
    };

    let user_item_sets = build_user_item_sets(user_count, &train, &test);
    let dataset = DomainDataset {
        user_count,
        item_counts,
        train,
        test,
        user_item_sets,
        vocab: Some(Vocab {
            users: user_names,
            items: item_names,
        }),
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Generate a cross-domain dataset from latent user preferences with a
/// shared component, a source-exclusive component, and domain-private
/// remainders. Deterministic for a fixed spec.
pub fn synthesize_dataset(spec: &SyntheticSpec) -> Result<DomainDataset> {
    synthesize_with_truth(spec).map(|(d, _)| d)
}

/// As [`synthesize_dataset`], also returning the ground-truth latents.
pub fn synthesize_with_truth(spec: &SyntheticSpec) -> Result<(DomainDataset, SyntheticTruth)> {
    if !(0.0..=1.0).contains(&spec.shared_strength) {
        return Err(Error::Validation(format!(
            "shared_strength {} outside [0, 1]",
            spec.shared_strength
        )));
    }
    if !(0.0..=1.0).contains(&spec.exclusive_strength) {
        return Err(Error::Validation(format!(
            "exclusive_strength {} outside [0, 1]",
            spec.exclusive_strength
        )));
    }
    if spec.user_count == 0 || spec.latent_dim == 0 {
        return Err(Error::Validation(
            "user_count and latent_dim must be positive".into(),
        ));
    }
    for d in 0..2 {
        if spec.interactions_per_user + 1 > spec.item_counts[d] {
            return Err(Error::Validation(format!(
                "domain {d} has {} items, too few for {} interactions per user",
                spec.item_counts[d], spec.interactions_per_user
            )));
        }
    }

    let k = spec.latent_dim;
    let s = spec.shared_strength;
    let e = spec.exclusive_strength;
    let priv_a = (1.0 - s * s - e * e).max(0.0).sqrt();
    let priv_b = (1.0 - s * s).max(0.0).sqrt();

    let mut rng = rng_from_seed(derive_seed(spec.seed, "synth/latents"));
    let normal = |rng: &mut SeededRng, n: usize, m: usize| -> Array2<f64> {
        Array2::from_shape_fn((n, m), |_| standard_normal(rng))
    };

    let z_shared = normal(&mut rng, spec.user_count, k);
    let z_excl = normal(&mut rng, spec.user_count, k);
    let z_priv_a = normal(&mut rng, spec.user_count, k);
    let z_priv_b = normal(&mut rng, spec.user_count, k);
    let y_a = &z_shared * s + &z_excl * e + &z_priv_a * priv_a;
    let y_b = &z_shared * s + &z_priv_b * priv_b;

    let item_latents = [
        normal(&mut rng, spec.item_counts[0], k),
        normal(&mut rng, spec.item_counts[1], k),
    ];
    let user_latents = [y_a, y_b];

    let mut train: [Vec<(u32, u32)>; 2] = [Vec::new(), Vec::new()];
    let mut test: [Vec<(u32, u32)>; 2] = [Vec::new(), Vec::new()];
    let mut noise_rng = rng_from_seed(derive_seed(spec.seed, "synth/noise"));
    let scale = 1.0 / (k as f64).sqrt();
    for d in 0..2 {
        let scores_items = &item_latents[d];
        for u in 0..spec.user_count {
            let yu = user_latents[d].row(u);
            let mut scored: Vec<(f64, u32)> = (0..spec.item_counts[d])
                .map(|i| {
                    let dot: f64 = yu
                        .iter()
                        .zip(scores_items.row(i).iter())
                        .map(|(a, b)| a * b)
                        .sum();
                    (dot * scale + spec.noise * standard_normal(&mut noise_rng), i as u32)
                })
                .collect();
            // Take the top-m items over the noisy affinity threshold.
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut chosen: Vec<u32> = scored
                .into_iter()
                .take(spec.interactions_per_user)
                .map(|(_, i)| i)
                .collect();
            chosen.shuffle(&mut noise_rng);
            let held = chosen.pop();
            for i in chosen {
                train[d].push((u as u32, i));
            }
            if spec.interactions_per_user >= 2 {
                if let Some(i) = held {
                    test[d].push((u as u32, i));
                }
            } else if let Some(i) = held {
                train[d].push((u as u32, i));
            }
        }
        train[d].sort_unstable();
        test[d].sort_unstable();
    }

    let user_item_sets = build_user_item_sets(spec.user_count, &train, &test);
    let dataset = DomainDataset {
        user_count: spec.user_count,
        item_counts: spec.item_counts,
        train,
        test,
        user_item_sets,
        vocab: None,
    };
    dataset.validate()?;
    Ok((
        dataset,
        SyntheticTruth {
            latents: [user_latents[0].clone(), user_latents[1].clone()],
        },
    ))
}

fn standard_normal(rng: &mut SeededRng) -> f64 {
    // Box-Muller on open-interval uniforms.
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Uniformly sample `ratio` non-interacted items per positive, labeling
/// positives 1 and negatives 0.
pub fn sample_training_negatives(
    dataset: &DomainDataset,
    domain: Domain,
    batch_positives: &[(u32, u32)],
    ratio: usize,
    rng: &mut SeededRng,
) -> Result<Vec<(u32, u32, f64)>> {
    if ratio == 0 {
        return Err(Error::Validation("negative ratio must be >= 1".into()));
    }
    let item_count = dataset.item_count(domain);
    let mut out = Vec::with_capacity(batch_positives.len() * (1 + ratio));
    for &(user, item) in batch_positives {
        out.push((user, item, 1.0));
        let owned = dataset.user_items(domain, user);
        let eligible = item_count - owned.len();
        if eligible == 0 {
            return Err(Error::Validation(format!(
                "user {user} has interacted with every item in domain {domain}; \
                 cannot sample a negative"
            )));
        }
        if owned.len() * 2 > item_count {
            // Dense user: draw directly from the materialized complement.
            let complement: Vec<u32> = (0..item_count as u32)
                .filter(|i| !owned.contains(i))
                .collect();
            for _ in 0..ratio {
                let neg = complement[rng.random_range(0..complement.len())];
                out.push((user, neg, 0.0));
            }
        } else {
            for _ in 0..ratio {
                loop {
                    let cand = rng.random_range(0..item_count as u32);
                    if !owned.contains(&cand) {
                        out.push((user, cand, 0.0));
                        break;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Outcome of building candidate sets: the sets plus the number of test
/// users skipped for lacking enough non-interacted items.
#[derive(Debug, Clone)]
pub struct CandidateBuild {
    pub sets: Vec<CandidateSet>,
    pub skipped_users: usize,
}

/// Build one candidate set per test positive: the positive plus
/// `negatives_per_set` items sampled uniformly without replacement from the
/// user's non-interacted items. Users short of candidates are skipped and
/// counted.
pub fn build_candidate_sets(
    dataset: &DomainDataset,
    domain: Domain,
    seed: u64,
    negatives_per_set: usize,
) -> CandidateBuild {
    let item_count = dataset.item_count(domain);
    let mut sets = Vec::new();
    let mut skipped = 0usize;
    for &(user, positive) in dataset.test_interactions(domain) {
        let owned = dataset.user_items(domain, user);
        // The held-out positive is in the user's interaction set, so the
        // complement never contains it.
        let eligible = item_count - owned.len();
        if eligible < negatives_per_set {
            skipped += 1;
            continue;
        }
        let mut rng = rng_from_seed(derive_seed(
            seed,
            &format!("candidates/{domain}/{user}/{positive}"),
        ));
        let mut complement: Vec<u32> = (0..item_count as u32)
            .filter(|i| !owned.contains(i))
            .collect();
        // Partial Fisher-Yates: the first `negatives_per_set` entries become
        // a uniform sample without replacement.
        for pos in 0..negatives_per_set {
            let swap = rng.random_range(pos..complement.len());
            complement.swap(pos, swap);
        }
        complement.truncate(negatives_per_set);
        sets.push(CandidateSet {
            user,
            domain,
            positive,
            negatives: complement,
            seed,
        });
    }
    CandidateBuild {
        sets,
        skipped_users: skipped,
    }
}

/// Summary counts written alongside persisted datasets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub user_count: usize,
    pub item_counts: [usize; 2],
    pub train_sizes: [usize; 2],
    pub test_sizes: [usize; 2],
    pub has_vocab: bool,
    pub fingerprint: String,
}

fn write_pairs(path: &Path, pairs: &[(u32, u32)]) -> Result<()> {
    let mut out = String::new();
    for &(u, i) in pairs {
        out.push_str(&format!("{u}\t{i}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_pairs(path: &Path) -> Result<Vec<(u32, u32)>> {
    let file = fs::File::open(path)?;
    let mut pairs = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let parse = |v: Option<&str>| -> Result<u32> {
            v.and_then(|x| x.parse().ok()).ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message: "expected two integer columns".into(),
            })
        };
        pairs.push((parse(cols.next())?, parse(cols.next())?));
    }
    Ok(pairs)
}

/// Hex digest over the dataset's canonical row encoding.
pub fn dataset_fingerprint(dataset: &DomainDataset) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(dataset.user_count.to_le_bytes());
    for d in 0..2 {
        hasher.update(dataset.item_counts[d].to_le_bytes());
        for &(u, i) in &dataset.train[d] {
            hasher.update(u.to_le_bytes());
            hasher.update(i.to_le_bytes());
        }
        hasher.update(b"|");
        for &(u, i) in &dataset.test[d] {
            hasher.update(u.to_le_bytes());
            hasher.update(i.to_le_bytes());
        }
        hasher.update(b"|");
    }
    let digest = hasher.finalize();
    digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
}

/// Persist a dataset as a manifest plus tab-separated row files.
pub fn save_dataset(dataset: &DomainDataset, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    write_pairs(&dir.join("train_a.tsv"), &dataset.train[0])?;
    write_pairs(&dir.join("train_b.tsv"), &dataset.train[1])?;
    write_pairs(&dir.join("test_a.tsv"), &dataset.test[0])?;
    write_pairs(&dir.join("test_b.tsv"), &dataset.test[1])?;
    if let Some(vocab) = &dataset.vocab {
        fs::write(dir.join("users.tsv"), vocab.users.join("\n") + "\n")?;
        fs::write(dir.join("items_a.tsv"), vocab.items[0].join("\n") + "\n")?;
        fs::write(dir.join("items_b.tsv"), vocab.items[1].join("\n") + "\n")?;
    }
    let manifest = DatasetManifest {
        user_count: dataset.user_count,
        item_counts: dataset.item_counts,
        train_sizes: [dataset.train[0].len(), dataset.train[1].len()],
        test_sizes: [dataset.test[0].len(), dataset.test[1].len()],
        has_vocab: dataset.vocab.is_some(),
        fingerprint: dataset_fingerprint(dataset),
    };
    let mut f = fs::File::create(dir.join("manifest.json"))?;
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(manifest)
}

/// Load a dataset previously written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<DomainDataset> {
    let manifest: DatasetManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let train = [
        read_pairs(&dir.join("train_a.tsv"))?,
        read_pairs(&dir.join("train_b.tsv"))?,
    ];
    let test = [
        read_pairs(&dir.join("test_a.tsv"))?,
        read_pairs(&dir.join("test_b.tsv"))?,
    ];
    let vocab = if manifest.has_vocab {
        let read_lines = |name: &str| -> Result<Vec<String>> {
            Ok(fs::read_to_string(dir.join(name))?
                .lines()
                .map(str::to_string)
                .collect())
        };
        Some(Vocab {
            users: read_lines("users.tsv")?,
            items: [read_lines("items_a.tsv")?, read_lines("items_b.tsv")?],
        })
    } else {
        None
    };
    let user_item_sets = build_user_item_sets(manifest.user_count, &train, &test);
    let dataset = DomainDataset {
        user_count: manifest.user_count,
        item_counts: manifest.item_counts,
        train,
        test,
        user_item_sets,
        vocab,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Persist candidate sets as tab-separated rows (user, positive,
/// comma-joined negatives) with the seed in a header line.
pub fn save_candidate_sets(sets: &[CandidateSet], path: &Path) -> Result<()> {
    let mut out = String::new();
    let seed = sets.first().map(|s| s.seed).unwrap_or(0);
    let domain = sets.first().map(|s| s.domain).unwrap_or(Domain::A);
    out.push_str(&format!("# domain={domain} seed={seed}\n"));
    for set in sets {
        let negs: Vec<String> = set.negatives.iter().map(|n| n.to_string()).collect();
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            set.user,
            set.positive,
            negs.join(",")
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_candidate_sets(path: &Path) -> Result<Vec<CandidateSet>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse {
        path: path.display().to_string(),
        line: 1,
        message: "missing header".into(),
    })?;
    let mut domain = Domain::A;
    let mut seed = 0u64;
    for token in header.trim_start_matches('#').split_whitespace() {
        if let Some(v) = token.strip_prefix("domain=") {
            domain = v.parse()?;
        } else if let Some(v) = token.strip_prefix("seed=") {
            seed = v.parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: 1,
                message: format!("bad seed '{v}'"),
            })?;
        }
    }
    let mut sets = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let bad = |msg: &str| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 2,
            message: msg.into(),
        };
        let user: u32 = cols
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("bad user"))?;
        let positive: u32 = cols
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("bad positive"))?;
        let negatives: Vec<u32> = cols
            .next()
            .ok_or_else(|| bad("missing negatives"))?
            .split(',')
            .map(|v| v.parse().map_err(|_| bad("bad negative id")))
            .collect::<Result<_>>()?;
        sets.push(CandidateSet {
            user,
            domain,
            positive,
            negatives,
            seed,
        });
    }
    Ok(sets)
}

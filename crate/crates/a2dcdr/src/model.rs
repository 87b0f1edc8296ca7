//! Model parameters: the six embedding tables, projector / variational /
//! reconstructor network weights, encoding through the propagation graphs,
//! and checkpoint persistence.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::graph::{self, PropagationGraph};
use crate::optim::OptimizerState;
use crate::rng::{derive_seed, rng_from_seed, SeededRng};
use crate::training::TrainingConfig;

/// The six embedding tables: per-domain domain-encompassing and
/// domain-specific user matrices plus one item matrix per domain, all of
/// width `dim`.
#[derive(Debug, Clone)]
pub struct EmbeddingTables {
    pub u_t: [Array2<f64>; 2],
    pub u_s: [Array2<f64>; 2],
    pub v: [Array2<f64>; 2],
    pub dim: usize,
}

/// Weights of a feedforward block with one hidden layer and a rectified
/// hidden activation (projector heads and reconstructors).
#[derive(Debug, Clone)]
pub struct MlpWeights {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

/// Weights of the variational conditional q(h_t | h_s): a two-hidden-layer
/// trunk of width 2d with separate mean and log-variance heads.
#[derive(Debug, Clone)]
pub struct VariationalWeights {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
    pub w_mean: Array2<f64>,
    pub b_mean: Array2<f64>,
    pub w_logvar: Array2<f64>,
    pub b_logvar: Array2<f64>,
}

/// All learnable state plus optimizer moments.
#[derive(Debug, Clone)]
pub struct ModelParameters {
    pub tables: EmbeddingTables,
    pub projector: [MlpWeights; 2],
    pub variational: [VariationalWeights; 2],
    pub reconstructor: [MlpWeights; 2],
    pub optimizer: OptimizerState,
    pub layers: usize,
}

/// Hidden width of the projector heads.
pub const PROJECTOR_HIDDEN: usize = 64;
/// Hidden width of the reconstructors.
pub const RECONSTRUCTOR_HIDDEN: usize = 256;
/// Log-variance clamp bounds for the variational nets.
pub const LOGVAR_CLAMP: (f64, f64) = (-10.0, 10.0);

fn xavier(rng: &mut SeededRng, rows: usize, cols: usize) -> Array2<f64> {
    use rand::Rng;
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

fn gaussian(rng: &mut SeededRng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    use rand::Rng;
    Array2::from_shape_fn((rows, cols), |_| {
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

fn init_mlp(rng: &mut SeededRng, input: usize, hidden: usize, output: usize) -> MlpWeights {
    MlpWeights {
        w1: xavier(rng, input, hidden),
        b1: Array2::zeros((1, hidden)),
        w2: xavier(rng, hidden, output),
        b2: Array2::zeros((1, output)),
    }
}

fn init_variational(rng: &mut SeededRng, d: usize) -> VariationalWeights {
    let h = 2 * d;
    VariationalWeights {
        w1: xavier(rng, d, h),
        b1: Array2::zeros((1, h)),
        w2: xavier(rng, h, h),
        b2: Array2::zeros((1, h)),
        w_mean: xavier(rng, h, d),
        b_mean: Array2::zeros((1, d)),
        w_logvar: xavier(rng, h, d),
        b_logvar: Array2::zeros((1, d)),
    }
}

/// Initialize all parameters: embedding entries are i.i.d. normal with
/// standard deviation 1/sqrt(d), auxiliary networks use fan-based uniform
/// initialization with zero biases. Deterministic for a fixed seed.
pub fn init_parameters(
    dataset: &DomainDataset,
    config: &TrainingConfig,
    seed: u64,
) -> Result<ModelParameters> {
    let d = config.dim;
    if d == 0 {
        return Err(Error::Validation("embedding dimension must be >= 1".into()));
    }
    let std = 1.0 / (d as f64).sqrt();
    let mut table_rng = rng_from_seed(derive_seed(seed, "init/embeddings"));
    let tables = EmbeddingTables {
        u_t: [
            gaussian(&mut table_rng, dataset.user_count, d, std),
            gaussian(&mut table_rng, dataset.user_count, d, std),
        ],
        u_s: [
            gaussian(&mut table_rng, dataset.user_count, d, std),
            gaussian(&mut table_rng, dataset.user_count, d, std),
        ],
        v: [
            gaussian(&mut table_rng, dataset.item_counts[0], d, std),
            gaussian(&mut table_rng, dataset.item_counts[1], d, std),
        ],
        dim: d,
    };
    let mut aux_rng = rng_from_seed(derive_seed(seed, "init/aux"));
    let projector = [
        init_mlp(&mut aux_rng, d, PROJECTOR_HIDDEN, d),
        init_mlp(&mut aux_rng, d, PROJECTOR_HIDDEN, d),
    ];
    let variational = [
        init_variational(&mut aux_rng, d),
        init_variational(&mut aux_rng, d),
    ];
    let reconstructor = [
        init_mlp(&mut aux_rng, 2 * d, RECONSTRUCTOR_HIDDEN, 2 * d),
        init_mlp(&mut aux_rng, 2 * d, RECONSTRUCTOR_HIDDEN, 2 * d),
    ];
    Ok(ModelParameters {
        tables,
        projector,
        variational,
        reconstructor,
        optimizer: OptimizerState::default(),
        layers: config.layers,
    })
}

const DOMAIN_SUFFIX: [&str; 2] = ["a", "b"];

impl ModelParameters {
    pub fn dim(&self) -> usize {
        self.tables.dim
    }

    /// Visit every learnable array in a fixed order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        for d in 0..2 {
            let s = DOMAIN_SUFFIX[d];
            f(&format!("emb/u_t_{s}"), &self.tables.u_t[d]);
            f(&format!("emb/u_s_{s}"), &self.tables.u_s[d]);
            f(&format!("emb/v_{s}"), &self.tables.v[d]);
        }
        for d in 0..2 {
            let s = DOMAIN_SUFFIX[d];
            let p = &self.projector[d];
            f(&format!("proj_{s}/w1"), &p.w1);
            f(&format!("proj_{s}/b1"), &p.b1);
            f(&format!("proj_{s}/w2"), &p.w2);
            f(&format!("proj_{s}/b2"), &p.b2);
        }
        for d in 0..2 {
            let s = DOMAIN_SUFFIX[d];
            let v = &self.variational[d];
            f(&format!("var_{s}/w1"), &v.w1);
            f(&format!("var_{s}/b1"), &v.b1);
            f(&format!("var_{s}/w2"), &v.w2);
            f(&format!("var_{s}/b2"), &v.b2);
            f(&format!("var_{s}/w_mean"), &v.w_mean);
            f(&format!("var_{s}/b_mean"), &v.b_mean);
            f(&format!("var_{s}/w_logvar"), &v.w_logvar);
            f(&format!("var_{s}/b_logvar"), &v.b_logvar);
        }
        for d in 0..2 {
            let s = DOMAIN_SUFFIX[d];
            let r = &self.reconstructor[d];
            f(&format!("recon_{s}/w1"), &r.w1);
            f(&format!("recon_{s}/b1"), &r.b1);
            f(&format!("recon_{s}/w2"), &r.w2);
            f(&format!("recon_{s}/b2"), &r.b2);
        }
    }

    /// Visit every learnable array mutably, in the same order as [`visit`].
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        for d in 0..2 {
            let s = DOMAIN_SUFFIX[d];
            f(&format!("emb/u_t_{s}"), &mut self.tables.u_t[d]);
            f(&format!("emb/u_s_{s}"), &mut self.tables.u_s[d]);
            f(&format!("emb/v_{s}"), &mut self.tables.v[d]);
        }
        for d in 0..2 {
            let s = DOMAIN_SUFFIX[d];
            let p = &mut self.projector[d];
            f(&format!("proj_{s}/w1"), &mut p.w1);
            f(&format!("proj_{s}/b1"), &mut p.b1);
            f(&format!("proj_{s}/w2"), &mut p.w2);
            f(&format!("proj_{s}/b2"), &mut p.b2);
        }
        for d in 0..2 {
            let s = DOMAIN_SUFFIX[d];
            let v = &mut self.variational[d];
            f(&format!("var_{s}/w1"), &mut v.w1);
            f(&format!("var_{s}/b1"), &mut v.b1);
            f(&format!("var_{s}/w2"), &mut v.w2);
            f(&format!("var_{s}/b2"), &mut v.b2);
            f(&format!("var_{s}/w_mean"), &mut v.w_mean);
            f(&format!("var_{s}/b_mean"), &mut v.b_mean);
            f(&format!("var_{s}/w_logvar"), &mut v.w_logvar);
            f(&format!("var_{s}/b_logvar"), &mut v.b_logvar);
        }
        for d in 0..2 {
            let s = DOMAIN_SUFFIX[d];
            let r = &mut self.reconstructor[d];
            f(&format!("recon_{s}/w1"), &mut r.w1);
            f(&format!("recon_{s}/b1"), &mut r.b1);
            f(&format!("recon_{s}/w2"), &mut r.w2);
            f(&format!("recon_{s}/b2"), &mut r.b2);
        }
    }

    /// SHA-256 fingerprint over the named arrays matching `filter`.
    pub fn fingerprint(&self, filter: &dyn Fn(&str) -> bool) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        self.visit(&mut |name, arr| {
            if filter(name) {
                hasher.update(name.as_bytes());
                for v in arr.iter() {
                    hasher.update(v.to_le_bytes());
                }
            }
        });
        hasher
            .finalize()
            .iter()
            .take(16)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn assert_finite(&self) -> Result<()> {
        let mut bad: Option<String> = None;
        self.visit(&mut |name, arr| {
            if bad.is_none() && arr.iter().any(|v| !v.is_finite()) {
                bad = Some(name.to_string());
            }
        });
        match bad {
            Some(name) => Err(Error::Numerical(format!(
                "non-finite entries in parameter {name}"
            ))),
            None => Ok(()),
        }
    }
}

/// True for parameters updated by the main optimizer; the complement (the
/// variational nets) is updated only in the inner fitting loop.
pub fn is_main_parameter(name: &str) -> bool {
    !name.starts_with("var_")
}

/// Parameters staged onto a tape as leaves, mirroring [`ModelParameters`].
pub struct StagedMlp {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub struct StagedVariational {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w_mean: Var,
    pub b_mean: Var,
    pub w_logvar: Var,
    pub b_logvar: Var,
}

pub struct StagedParams {
    pub u_t: [Var; 2],
    pub u_s: [Var; 2],
    pub v: [Var; 2],
    pub projector: [StagedMlp; 2],
    pub variational: [StagedVariational; 2],
    pub reconstructor: [StagedMlp; 2],
    /// (name, var, shape) in the canonical visit order, for gradient
    /// collection.
    pub by_name: Vec<(String, Var, (usize, usize))>,
}

/// (name, tape var, shape) triples for staged parameters, in visit order.
pub type ParamIndex = Vec<(String, Var, (usize, usize))>;

type NameIndex = ParamIndex;

fn stage_leaf(tape: &mut Tape, index: &mut NameIndex, name: String, arr: &Array2<f64>) -> Var {
    let var = tape.leaf(arr.clone());
    index.push((name, var, arr.dim()));
    var
}

fn stage_mlp(tape: &mut Tape, index: &mut NameIndex, prefix: &str, m: &MlpWeights) -> StagedMlp {
    StagedMlp {
        w1: stage_leaf(tape, index, format!("{prefix}/w1"), &m.w1),
        b1: stage_leaf(tape, index, format!("{prefix}/b1"), &m.b1),
        w2: stage_leaf(tape, index, format!("{prefix}/w2"), &m.w2),
        b2: stage_leaf(tape, index, format!("{prefix}/b2"), &m.b2),
    }
}

fn stage_variational(
    tape: &mut Tape,
    index: &mut NameIndex,
    prefix: &str,
    w: &VariationalWeights,
) -> StagedVariational {
    StagedVariational {
        w1: stage_leaf(tape, index, format!("{prefix}/w1"), &w.w1),
        b1: stage_leaf(tape, index, format!("{prefix}/b1"), &w.b1),
        w2: stage_leaf(tape, index, format!("{prefix}/w2"), &w.w2),
        b2: stage_leaf(tape, index, format!("{prefix}/b2"), &w.b2),
        w_mean: stage_leaf(tape, index, format!("{prefix}/w_mean"), &w.w_mean),
        b_mean: stage_leaf(tape, index, format!("{prefix}/b_mean"), &w.b_mean),
        w_logvar: stage_leaf(tape, index, format!("{prefix}/w_logvar"), &w.w_logvar),
        b_logvar: stage_leaf(tape, index, format!("{prefix}/b_logvar"), &w.b_logvar),
    }
}

/// Copy every parameter onto the tape as a leaf.
pub fn stage_parameters(tape: &mut Tape, params: &ModelParameters) -> StagedParams {
    let mut index = NameIndex::new();
    let u_t = [
        stage_leaf(tape, &mut index, "emb/u_t_a".into(), &params.tables.u_t[0]),
        stage_leaf(tape, &mut index, "emb/u_t_b".into(), &params.tables.u_t[1]),
    ];
    let u_s = [
        stage_leaf(tape, &mut index, "emb/u_s_a".into(), &params.tables.u_s[0]),
        stage_leaf(tape, &mut index, "emb/u_s_b".into(), &params.tables.u_s[1]),
    ];
    let v = [
        stage_leaf(tape, &mut index, "emb/v_a".into(), &params.tables.v[0]),
        stage_leaf(tape, &mut index, "emb/v_b".into(), &params.tables.v[1]),
    ];
    let projector = [
        stage_mlp(tape, &mut index, "proj_a", &params.projector[0]),
        stage_mlp(tape, &mut index, "proj_b", &params.projector[1]),
    ];
    let variational = [
        stage_variational(tape, &mut index, "var_a", &params.variational[0]),
        stage_variational(tape, &mut index, "var_b", &params.variational[1]),
    ];
    let reconstructor = [
        stage_mlp(tape, &mut index, "recon_a", &params.reconstructor[0]),
        stage_mlp(tape, &mut index, "recon_b", &params.reconstructor[1]),
    ];

    StagedParams {
        u_t,
        u_s,
        v,
        projector,
        variational,
        reconstructor,
        by_name: index,
    }
}

/// Stage only the variational nets (for the inner fitting loop, where the
/// encoder outputs enter as constants).
pub fn stage_variational_pair(
    tape: &mut Tape,
    params: &ModelParameters,
) -> ([StagedVariational; 2], ParamIndex) {
    let mut index = ParamIndex::new();
    let staged = [
        stage_variational(tape, &mut index, "var_a", &params.variational[0]),
        stage_variational(tape, &mut index, "var_b", &params.variational[1]),
    ];
    (staged, index)
}

/// Stage a standalone variational net.
pub fn stage_variational_net(tape: &mut Tape, net: &VariationalWeights) -> StagedVariational {
    let mut index = ParamIndex::new();
    stage_variational(tape, &mut index, "q", net)
}

impl VariationalWeights {
    /// Fresh fan-based initialization for a given representation width.
    pub fn init(d: usize, rng: &mut SeededRng) -> Self {
        init_variational(rng, d)
    }

    /// The weight arrays in staging order.
    pub fn arrays_mut(&mut self) -> [&mut Array2<f64>; 8] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w_mean,
            &mut self.b_mean,
            &mut self.w_logvar,
            &mut self.b_logvar,
        ]
    }
}

/// Layer-averaged propagation on the tape: mean of layer 0..=layers of the
/// stacked (users; items) embedding under the normalized adjacency.
pub fn propagate_tape(
    tape: &mut Tape,
    users: Var,
    items: Var,
    graph: &Rc<PropagationGraph>,
    layers: usize,
) -> (Var, Var) {
    let n_users = graph.n_users;
    let x0 = tape.concat_rows(users, items);
    let mut acc = x0;
    let mut xk = x0;
    for _ in 0..layers {
        xk = tape.spmm(Rc::clone(graph), xk);
        acc = tape.add(acc, xk);
    }
    let out = tape.scale(acc, 1.0 / (layers + 1) as f64);
    let h_users = tape.slice_rows(out, 0..n_users);
    let h_items = tape.slice_rows(out, n_users..graph.node_count());
    (h_users, h_items)
}

/// Full-graph encodings of all six representation blocks on the tape: the
/// domain-encompassing pass (U_t, V) yields h_t and the item-side h_v; the
/// domain-specific pass (U_s, V) yields h_s with the item side discarded.
pub struct FullReps {
    pub h_t: [Var; 2],
    pub h_s: [Var; 2],
    pub h_v: [Var; 2],
}

pub fn encode_full_tape(
    tape: &mut Tape,
    staged: &StagedParams,
    graphs: &[Rc<PropagationGraph>; 2],
    layers: usize,
) -> FullReps {
    let mut h_t = [None, None];
    let mut h_s = [None, None];
    let mut h_v = [None, None];
    for d in 0..2 {
        let (ht, hv) = propagate_tape(tape, staged.u_t[d], staged.v[d], &graphs[d], layers);
        let (hs, _) = propagate_tape(tape, staged.u_s[d], staged.v[d], &graphs[d], layers);
        h_t[d] = Some(ht);
        h_s[d] = Some(hs);
        h_v[d] = Some(hv);
    }
    FullReps {
        h_t: [h_t[0].unwrap(), h_t[1].unwrap()],
        h_s: [h_s[0].unwrap(), h_s[1].unwrap()],
        h_v: [h_v[0].unwrap(), h_v[1].unwrap()],
    }
}

/// Plain (no-gradient) full-graph encodings, for evaluation and export.
#[derive(Debug, Clone)]
pub struct FullRepsPlain {
    pub h_t: [Array2<f64>; 2],
    pub h_s: [Array2<f64>; 2],
    pub h_v: [Array2<f64>; 2],
}

pub fn encode_full_plain(
    params: &ModelParameters,
    graphs: [&PropagationGraph; 2],
) -> Result<FullRepsPlain> {
    let mut h_t = Vec::with_capacity(2);
    let mut h_s = Vec::with_capacity(2);
    let mut h_v = Vec::with_capacity(2);
    for d in 0..2 {
        let (ht, hv) = graph::propagate(
            &params.tables.u_t[d],
            &params.tables.v[d],
            graphs[d],
            params.layers,
        )?;
        let (hs, _) = graph::propagate(
            &params.tables.u_s[d],
            &params.tables.v[d],
            graphs[d],
            params.layers,
        )?;
        h_t.push(ht);
        h_s.push(hs);
        h_v.push(hv);
    }
    Ok(FullRepsPlain {
        h_t: [h_t.remove(0), h_t.remove(0)],
        h_s: [h_s.remove(0), h_s.remove(0)],
        h_v: [h_v.remove(0), h_v.remove(0)],
    })
}

/// Per-batch representations gathered from the full encodings: user rows
/// for all four user blocks, item rows per domain.
#[derive(Debug, Clone)]
pub struct DisentangledBatch {
    pub h_t: [Array2<f64>; 2],
    pub h_s: [Array2<f64>; 2],
    pub h_v: [Array2<f64>; 2],
}

/// Encode and gather the given user and per-domain item batches.
pub fn encode_all(
    params: &ModelParameters,
    graphs: &[PropagationGraph; 2],
    user_batch: &[u32],
    item_batches: [&[u32]; 2],
) -> Result<DisentangledBatch> {
    let full = encode_full_plain(params, [&graphs[0], &graphs[1]])?;
    let gather = |src: &Array2<f64>, idx: &[u32], what: &str| -> Result<Array2<f64>> {
        let mut out = Array2::zeros((idx.len(), src.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            if i as usize >= src.nrows() {
                return Err(Error::Index(format!(
                    "{what} index {i} out of range ({} rows)",
                    src.nrows()
                )));
            }
            out.row_mut(r).assign(&src.row(i as usize));
        }
        Ok(out)
    };
    Ok(DisentangledBatch {
        h_t: [
            gather(&full.h_t[0], user_batch, "user")?,
            gather(&full.h_t[1], user_batch, "user")?,
        ],
        h_s: [
            gather(&full.h_s[0], user_batch, "user")?,
            gather(&full.h_s[1], user_batch, "user")?,
        ],
        h_v: [
            gather(&full.h_v[0], item_batches[0], "item")?,
            gather(&full.h_v[1], item_batches[1], "item")?,
        ],
    })
}

/// Build both train-interaction propagation graphs.
pub fn build_graphs(dataset: &DomainDataset) -> [PropagationGraph; 2] {
    [
        PropagationGraph::from_interactions(
            dataset.user_count,
            dataset.item_counts[0],
            &dataset.train[0],
        ),
        PropagationGraph::from_interactions(
            dataset.user_count,
            dataset.item_counts[1],
            &dataset.train[1],
        ),
    ]
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    dim: usize,
    layers: usize,
    config_hash: String,
    adam_steps: [u64; 2],
    arrays: Vec<ArrayEntry>,
}

/// Write parameters and optimizer moments as a named-array directory:
/// `manifest.json` plus little-endian f64 data in `params.bin`.
pub fn save_checkpoint(params: &ModelParameters, dir: &Path, config_hash: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut arrays = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    let mut push = |name: String, arr: &Array2<f64>| {
        arrays.push(ArrayEntry {
            name,
            rows: arr.nrows(),
            cols: arr.ncols(),
            offset: data.len(),
        });
        for v in arr.iter() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    };
    params.visit(&mut |name, arr| push(name.to_string(), arr));
    for (group, state) in [
        ("main", &params.optimizer.main),
        ("variational", &params.optimizer.variational),
    ] {
        for (name, (m, v)) in &state.moments {
            push(format!("opt/{group}/m/{name}"), m);
            push(format!("opt/{group}/v/{name}"), v);
        }
    }
    let manifest = CheckpointManifest {
        dim: params.dim(),
        layers: params.layers,
        config_hash: config_hash.to_string(),
        adam_steps: [params.optimizer.main.step, params.optimizer.variational.step],
        arrays,
    };
    let mut f = fs::File::create(dir.join("manifest.json"))?;
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    f.write_all(b"\n")?;
    fs::File::create(dir.join("params.bin"))?.write_all(&data)?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`]. Shapes must match the
/// dataset-derived layout of `template`.
pub fn load_checkpoint(dir: &Path, template: &ModelParameters) -> Result<ModelParameters> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut data = Vec::new();
    fs::File::open(dir.join("params.bin"))?.read_to_end(&mut data)?;

    let read_array = |entry: &ArrayEntry| -> Result<Array2<f64>> {
        let count = entry.rows * entry.cols;
        let end = entry.offset + count * 8;
        if end > data.len() {
            return Err(Error::Validation(format!(
                "checkpoint truncated at array {}",
                entry.name
            )));
        }
        let mut values = Vec::with_capacity(count);
        for chunk in data[entry.offset..end].chunks_exact(8) {
            values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        Array2::from_shape_vec((entry.rows, entry.cols), values)
            .map_err(|e| Error::Validation(format!("bad array shape: {e}")))
    };

    let mut by_name = std::collections::BTreeMap::new();
    for entry in &manifest.arrays {
        by_name.insert(entry.name.clone(), read_array(entry)?);
    }

    let mut params = template.clone();
    params.layers = manifest.layers;
    let mut missing = Vec::new();
    params.visit_mut(&mut |name, arr| match by_name.get(name) {
        Some(loaded) if loaded.dim() == arr.dim() => *arr = loaded.clone(),
        Some(loaded) => missing.push(format!(
            "{name}: shape {:?} vs expected {:?}",
            loaded.dim(),
            arr.dim()
        )),
        None => missing.push(format!("{name}: absent")),
    });
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "checkpoint does not match dataset/config: {}",
            missing.join("; ")
        )));
    }
    params.optimizer = OptimizerState::default();
    params.optimizer.main.step = manifest.adam_steps[0];
    params.optimizer.variational.step = manifest.adam_steps[1];
    for (key, arr) in by_name {
        if let Some(rest) = key.strip_prefix("opt/") {
            let (group, rest) = rest.split_once('/').unwrap_or(("", ""));
            let (kind, name) = rest.split_once('/').unwrap_or(("", ""));
            let state = match group {
                "main" => &mut params.optimizer.main,
                "variational" => &mut params.optimizer.variational,
                _ => continue,
            };
            let entry = state
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Array2::zeros(arr.dim()), Array2::zeros(arr.dim())));
            match kind {
                "m" => entry.0 = arr,
                "v" => entry.1 = arr,
                _ => {}
            }
        }
    }
    Ok(params)
}

/// Config hash recorded in checkpoints and run directories.
pub fn config_hash(config: &TrainingConfig) -> String {
    use sha2::{Digest, Sha256};
    let canonical = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_dataset, SyntheticSpec};

    fn toy_dataset() -> DomainDataset {
        synthesize_dataset(&SyntheticSpec {
            user_count: 12,
            item_counts: [15, 10],
            interactions_per_user: 3,
            ..Default::default()
        })
        .unwrap()
    }

    fn toy_config(dim: usize, layers: usize) -> TrainingConfig {
        TrainingConfig {
            dim,
            layers,
            ..Default::default()
        }
    }

    #[test]
    fn init_shapes_match_dataset_and_dim() {
        let ds = toy_dataset();
        let params = init_parameters(&ds, &toy_config(128, 2), 1).unwrap();
        for d in 0..2 {
            assert_eq!(params.tables.u_t[d].dim(), (12, 128));
            assert_eq!(params.tables.u_s[d].dim(), (12, 128));
            assert_eq!(params.tables.v[d].dim(), (ds.item_counts[d], 128));
            assert_eq!(params.projector[d].w1.dim(), (128, 64));
            assert_eq!(params.projector[d].w2.dim(), (64, 128));
            assert_eq!(params.variational[d].w1.dim(), (128, 256));
            assert_eq!(params.reconstructor[d].w1.dim(), (256, 256));
            assert_eq!(params.reconstructor[d].w2.dim(), (256, 256));
        }
    }

    #[test]
    fn init_is_deterministic() {
        let ds = toy_dataset();
        let a = init_parameters(&ds, &toy_config(16, 2), 7).unwrap();
        let b = init_parameters(&ds, &toy_config(16, 2), 7).unwrap();
        assert_eq!(a.fingerprint(&|_| true), b.fingerprint(&|_| true));
        let c = init_parameters(&ds, &toy_config(16, 2), 8).unwrap();
        assert_ne!(a.fingerprint(&|_| true), c.fingerprint(&|_| true));
    }

    #[test]
    fn embedding_sample_mean_is_near_zero() {
        // 10k entries with std 1/sqrt(d): the sample mean should fall
        // within 4 standard errors of zero.
        let ds = synthesize_dataset(&SyntheticSpec {
            user_count: 100,
            item_counts: [30, 30],
            interactions_per_user: 3,
            ..Default::default()
        })
        .unwrap();
        let params = init_parameters(&ds, &toy_config(100, 2), 3).unwrap();
        let table = &params.tables.u_t[0]; // 100 x 100 = 10k entries
        let n = table.len() as f64;
        let mean = table.sum() / n;
        let std = 1.0 / (100.0f64).sqrt();
        let bound = 4.0 * std / n.sqrt();
        assert!(mean.abs() < bound, "mean {mean}, bound {bound}");
    }

    #[test]
    fn zero_layers_encoding_equals_raw_embeddings() {
        let ds = toy_dataset();
        let mut params = init_parameters(&ds, &toy_config(8, 0), 2).unwrap();
        params.layers = 0;
        let graphs = build_graphs(&ds);
        let batch: Vec<u32> = vec![0, 3, 7];
        let enc = encode_all(&params, &graphs, &batch, [&[0, 1], &[2]]).unwrap();
        for (r, &u) in batch.iter().enumerate() {
            for c in 0..8 {
                assert_eq!(enc.h_t[0][[r, c]], params.tables.u_t[0][[u as usize, c]]);
                assert_eq!(enc.h_s[1][[r, c]], params.tables.u_s[1][[u as usize, c]]);
            }
        }
        assert_eq!(enc.h_v[1].row(0), params.tables.v[1].row(2));
    }

    #[test]
    fn encoding_is_a_pure_function() {
        let ds = toy_dataset();
        let params = init_parameters(&ds, &toy_config(8, 2), 5).unwrap();
        let graphs = build_graphs(&ds);
        let e1 = encode_all(&params, &graphs, &[1, 2], [&[0], &[0]]).unwrap();
        let e2 = encode_all(&params, &graphs, &[1, 2], [&[0], &[0]]).unwrap();
        assert_eq!(e1.h_t[0], e2.h_t[0]);
        assert_eq!(e1.h_s[1], e2.h_s[1]);
        assert_eq!(e1.h_v[0], e2.h_v[0]);
    }

    #[test]
    fn out_of_range_batch_index_is_an_error() {
        let ds = toy_dataset();
        let params = init_parameters(&ds, &toy_config(4, 1), 5).unwrap();
        let graphs = build_graphs(&ds);
        assert!(encode_all(&params, &graphs, &[999], [&[0], &[0]]).is_err());
    }

    #[test]
    fn tiny_graph_encoding_matches_hand_computation() {
        // 2 users, 2 items, edges (0,0) and (1,1); every degree is 1 so all
        // weights are 1. One layer: h_t[u] = (u_t[u] + v[item(u)]) / 2.
        let train = [vec![(0, 0), (1, 1)], vec![(0, 0), (1, 1)]];
        let test: [Vec<(u32, u32)>; 2] = [vec![], vec![]];
        let mut sets = [vec![HashSetOf::new(); 2], vec![HashSetOf::new(); 2]];
        for d in 0..2 {
            for &(u, i) in &train[d] {
                sets[d][u as usize].insert(i);
            }
        }
        let ds = DomainDataset {
            user_count: 2,
            item_counts: [2, 2],
            train,
            test,
            user_item_sets: sets,
            vocab: None,
        };
        let mut params = init_parameters(&ds, &toy_config(3, 1), 6).unwrap();
        params.layers = 1;
        let graphs = build_graphs(&ds);
        let enc = encode_all(&params, &graphs, &[0, 1], [&[0, 1], &[0, 1]]).unwrap();
        for u in 0..2usize {
            for c in 0..3 {
                let expect =
                    (params.tables.u_t[0][[u, c]] + params.tables.v[0][[u, c]]) / 2.0;
                assert!((enc.h_t[0][[u, c]] - expect).abs() < 1e-12);
                let expect_v =
                    (params.tables.v[0][[u, c]] + params.tables.u_t[0][[u, c]]) / 2.0;
                assert!((enc.h_v[0][[u, c]] - expect_v).abs() < 1e-12);
            }
        }
    }

    type HashSetOf = std::collections::HashSet<u32>;

    #[test]
    fn tape_and_plain_encodings_agree() {
        let ds = toy_dataset();
        let params = init_parameters(&ds, &toy_config(6, 2), 9).unwrap();
        let graphs = build_graphs(&ds);
        let plain = encode_full_plain(&params, [&graphs[0], &graphs[1]]).unwrap();

        let mut tape = Tape::new();
        let staged = stage_parameters(&mut tape, &params);
        let graphs_rc = [Rc::new(graphs[0].clone()), Rc::new(graphs[1].clone())];
        let reps = encode_full_tape(&mut tape, &staged, &graphs_rc, 2);
        for d in 0..2 {
            assert_eq!(tape.value(reps.h_t[d]), &plain.h_t[d]);
            assert_eq!(tape.value(reps.h_s[d]), &plain.h_s[d]);
            assert_eq!(tape.value(reps.h_v[d]), &plain.h_v[d]);
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_parameters() {
        let ds = toy_dataset();
        let mut params = init_parameters(&ds, &toy_config(5, 2), 4).unwrap();
        // Seed some optimizer state so it round-trips too.
        params.optimizer.main.step = 3;
        params
            .optimizer
            .main
            .moments
            .insert("emb/u_t_a".into(), (Array2::ones((12, 5)), Array2::zeros((12, 5))));
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&params, dir.path(), "cafebabe").unwrap();
        let template = init_parameters(&ds, &toy_config(5, 2), 99).unwrap();
        let loaded = load_checkpoint(dir.path(), &template).unwrap();
        assert_eq!(
            loaded.fingerprint(&|_| true),
            params.fingerprint(&|_| true)
        );
        assert_eq!(loaded.optimizer.main.step, 3);
        let (m, _) = &loaded.optimizer.main.moments["emb/u_t_a"];
        assert_eq!(m, &Array2::<f64>::ones((12, 5)));
    }

    #[test]
    fn checkpoint_shape_mismatch_is_rejected() {
        let ds = toy_dataset();
        let params = init_parameters(&ds, &toy_config(5, 2), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&params, dir.path(), "x").unwrap();
        let template = init_parameters(&ds, &toy_config(6, 2), 4).unwrap();
        assert!(load_checkpoint(dir.path(), &template).is_err());
    }
}

//! Bipartite user-item propagation graphs with symmetric degree
//! normalization, and the layer-averaged neighbor propagation used by the
//! embedding encoders.

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

/// Symmetric degree-normalized bipartite adjacency over users and items.
///
/// Nodes 0..n_users are users, n_users..n_users+n_items are items. The edge
/// weight between user u and item i is 1/sqrt(deg(u) * deg(i)); zero-degree
/// nodes carry no edges.
#[derive(Debug, Clone)]
pub struct PropagationGraph {
    pub n_users: usize,
    pub n_items: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    weights: Vec<f64>,
}

impl PropagationGraph {
    /// Build from train interactions, deduplicating (user, item) pairs.
    pub fn from_interactions(
        n_users: usize,
        n_items: usize,
        interactions: &[(u32, u32)],
    ) -> Self {
        let mut edges: Vec<(u32, u32)> = interactions.to_vec();
        edges.sort_unstable();
        edges.dedup();

        let n = n_users + n_items;
        let mut degree = vec![0usize; n];
        for &(u, i) in &edges {
            degree[u as usize] += 1;
            degree[n_users + i as usize] += 1;
        }

        let mut row_ptr = vec![0usize; n + 1];
        for v in 0..n {
            row_ptr[v + 1] = row_ptr[v] + degree[v];
        }
        let nnz = row_ptr[n];
        let mut col_idx = vec![0u32; nnz];
        let mut weights = vec![0.0f64; nnz];
        let mut cursor = row_ptr.clone();
        for &(u, i) in &edges {
            let (un, inode) = (u as usize, n_users + i as usize);
            let w = 1.0 / ((degree[un] * degree[inode]) as f64).sqrt();
            col_idx[cursor[un]] = inode as u32;
            weights[cursor[un]] = w;
            cursor[un] += 1;
            col_idx[cursor[inode]] = un as u32;
            weights[cursor[inode]] = w;
            cursor[inode] += 1;
        }

        Self {
            n_users,
            n_items,
            row_ptr,
            col_idx,
            weights,
        }
    }

    pub fn node_count(&self) -> usize {
        self.n_users + self.n_items
    }

    pub fn edge_weight(&self, user: u32, item: u32) -> Option<f64> {
        let target = (self.n_users + item as usize) as u32;
        let range = self.row_ptr[user as usize]..self.row_ptr[user as usize + 1];
        self.col_idx[range.clone()]
            .iter()
            .position(|&c| c == target)
            .map(|off| self.weights[range.start + off])
    }

    /// y = A_hat * x where x is (n_users + n_items, d).
    pub fn spmm(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(
            x.nrows(),
            self.node_count(),
            "spmm: node count mismatch ({} rows vs {} nodes)",
            x.nrows(),
            self.node_count()
        );
        let mut y = Array2::zeros(x.dim());
        for r in 0..self.node_count() {
            let mut row = y.row_mut(r);
            for e in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col_idx[e] as usize;
                let w = self.weights[e];
                row.scaled_add(w, &x.row(c));
            }
        }
        y
    }
}

/// Layer-averaged propagation over stacked user and item embeddings.
///
/// The output is the arithmetic mean of the layer-0 input and each of the
/// `layers` successive neighbor-averaging passes. Returns the user-side and
/// item-side blocks.
pub fn propagate(
    user_emb: &Array2<f64>,
    item_emb: &Array2<f64>,
    graph: &PropagationGraph,
    layers: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if user_emb.nrows() != graph.n_users || item_emb.nrows() != graph.n_items {
        return Err(Error::Dimension(format!(
            "propagate: graph has {} users / {} items but tables have {} / {} rows",
            graph.n_users,
            graph.n_items,
            user_emb.nrows(),
            item_emb.nrows()
        )));
    }
    if user_emb.ncols() != item_emb.ncols() {
        return Err(Error::Dimension(format!(
            "propagate: embedding dims differ ({} vs {})",
            user_emb.ncols(),
            item_emb.ncols()
        )));
    }
    let x0 = ndarray::concatenate(Axis(0), &[user_emb.view(), item_emb.view()]).unwrap();
    let mut acc = x0.clone();
    let mut xk = x0;
    for _ in 0..layers {
        xk = graph.spmm(&xk);
        acc += &xk;
    }
    let inv = 1.0 / (layers + 1) as f64;
    acc.mapv_inplace(|v| v * inv);
    let users = acc.slice(s![..graph.n_users, ..]).to_owned();
    let items = acc.slice(s![graph.n_users.., ..]).to_owned();
    Ok((users, items))
}

//! Desk-scale training and evaluation toolkit for a cross-domain
//! recommender that learns disentangled domain-encompassing and
//! domain-specific user representations.
//!
//! The model propagates six embedding tables through per-domain LightGCN
//! encoders, aligns the domain-encompassing representations across domains
//! with an adversarial multi-kernel MMD objective (gradient reversal on the
//! domain-specific side), minimizes a contrastive log-ratio upper bound on
//! the mutual information between the encompassing and specific
//! representations within each domain, reconstructs the raw embeddings to
//! preserve information, and scores user-item pairs by fusing the three
//! user representations with target-aware dot-product attention.
//!
//! Modules follow the pipeline: [`data`] builds or loads paired implicit
//! feedback domains, [`model`] owns parameters and encoding, [`alignment`],
//! [`disentangle`] and [`fusion`] provide the loss terms, [`training`] runs
//! the composite objective, and [`eval`] produces ranked-retrieval reports.

pub mod alignment;
pub mod autodiff;
pub mod data;
pub mod disentangle;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub mod rng;
pub mod training;

pub use error::{Error, Result};

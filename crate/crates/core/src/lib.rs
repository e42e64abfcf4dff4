//! Ornstein–Uhlenbeck Gaussian models on phylogenetic trees.
//!
//! Covariance construction and simulation ([`ou`]), likelihood fitting
//! ([`inference`]), closed forms on symmetric trees ([`symtree`]),
//! independent contrasts ([`contrasts`]), distances between models
//! ([`micro`]) and the simulation studies built on them ([`experiments`]).

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod contrasts;
pub mod error;
pub mod experiments;
pub mod inference;
pub mod linalg;
pub mod micro;
pub mod optimize;
pub mod ou;
pub mod symtree;
pub mod tree;

pub use error::{Error, NewickError, Result};
pub use ou::{OUParams, RootMode};
pub use symtree::{DenseTipSpec, SymmetricTreeSpec};
pub use tree::{parse_newick, write_newick, Tree, TreeMetrics};

//! Decentralized maximal coding rate reduction (MCR²) over a simulated network.
//!
//! Nodes learn unit-sphere representations of their local data while only ever
//! exchanging second-order feature statistics (per-class Gram matrices). Two
//! training schemes are provided: a primal–dual scheme for i.i.d. partitions
//! ([`iid`]) and a cluster/block-coordinate scheme with virtual-node
//! replication for label-skewed partitions ([`clustering`], [`noniid`]).

pub mod error;
pub mod iid;
pub mod clustering;
pub mod data;
pub mod dsgd;
pub mod encoder;
pub mod eval;
pub mod linalg;
pub mod network;
pub mod noniid;
pub mod objective;
pub mod seed;

pub use error::{Error, Result};
pub use linalg::{Spectrum, SymMatrix};
pub use objective::{ClassPartition, FeatureMatrix, LossBreakdown, RateParams};

//! Context prior segmentation: ideal affinity maps, the affinity loss, the
//! aggregation module and context prior layer, a toy dilated segmentation
//! network around them, and the data, metrics and training machinery needed
//! to train it end to end on synthetic scenes.

pub mod affinity;
pub mod checkpoint;
pub mod config;
pub mod context_prior;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod labels;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use labels::{LabelMap, IGNORE_INDEX};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::{DType, Element, Real, Tensor};

//! Forward and backward kernels. Everything here is a pure function of its
//! inputs; the graph in [`crate::graph`] records which kernels ran and calls
//! the matching backward.

pub mod activation;
pub mod conv;
pub mod linalg;
pub mod loss;
pub mod norm;
pub mod resize;
pub mod shape;

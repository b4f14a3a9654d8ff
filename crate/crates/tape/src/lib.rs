//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a `1 x 1` result walks the record in reverse and
//! returns the sensitivity of that scalar with respect to every node that
//! requires a gradient.
//!
//! Everything is two-dimensional: vectors are `1 x n` rows or `m x 1`
//! columns. Sequence models lay data out time-major, so time step `t` of a
//! batch of `B` items occupies rows `t * B .. (t + 1) * B`.
//!
//! [`ParamStore`] holds named parameters and [`Session`] binds them into a
//! graph, optionally freezing names by prefix.

mod graph;
mod params;

pub use graph::{Gradients, Graph, Var};
pub use params::{ParamStore, Session};

/// Dense row-major matrix used for all values and gradients.
pub type Matrix = ndarray::Array2<f64>;

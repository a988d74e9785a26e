//! Federated learning with semantic anchors over heterogeneous clients.
//!
//! The crate is a self-contained laboratory: a small reverse-mode
//! differentiation engine ([`autodiff`]), a zoo of heterogeneous feature
//! extractors ([`models`]), synthetic and Dirichlet-partitioned data
//! ([`data`]), the prototype and anchor mathematics ([`proto`]) and the
//! round-synchronous client/server protocol with its algorithm variants
//! ([`fed`]).

pub mod autodiff;
pub mod data;
pub mod fed;
pub mod gradcheck;
pub mod models;
pub mod proto;
pub mod rng;

pub use autodiff::{Graph, Tensor, Var};

//! Lorentz-model clinical sequence modeling.
//!
//! The crate provides, bottom to top:
//!
//! - exact hyperboloid geometry with a drop-in Euclidean mode ([`manifold`]),
//! - a tape-based reverse-mode autodiff engine whose geometry ops carry
//!   custom backwards ([`tape`]), plus a finite-difference audit ([`gradcheck`]),
//! - a Riemannian Adam optimizer that keeps manifold parameters on the
//!   hyperboloid ([`optim`]),
//! - medical-code hierarchies, their tree metric, Gromov hyperbolicity, and
//!   a constructive low-distortion plane embedding ([`hierarchy`], [`sarkar`]),
//! - a hierarchy-regularized patient encoder ([`encoder`]) and four
//!   type-specific question-answering heads ([`qa`]),
//! - a deterministic synthetic-EHR benchmark ([`synthdata`]) and the
//!   training/evaluation harness behind the `lorehr` CLI ([`train`],
//!   [`report`], [`config`]).

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod hierarchy;
pub mod manifold;
pub mod optim;
pub mod qa;
pub mod report;
pub mod sarkar;
pub mod synthdata;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use manifold::{GeomMode, Geometry};
pub use tensor::Tensor;

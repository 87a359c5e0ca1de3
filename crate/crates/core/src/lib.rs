//! Continual domain adaptation laboratory.
//!
//! A small second-order autodiff engine, desk-scale classifiers, an image
//! transformation engine for domain randomization, dataset and protocol
//! handling, the continual-learning trainers (including the meta-learned
//! domain randomization objective) and evaluation/reporting.

pub mod gradcore;
pub mod par;
pub mod models;
pub mod rng;
pub mod xforms;
pub mod domains;
pub mod evalx;
pub mod continual;

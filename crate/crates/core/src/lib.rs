//! Visual relationship detection with box attention.
//!
//! A single detection network answers two kinds of queries. Fed an empty
//! attention map it detects subjects; fed a map marking one subject box it
//! detects the objects related to that subject, each with an object label and
//! a predicate label. Relationship scores follow the chain rule
//! `s = s_subject * s_object * s_predicate`.
//!
//! Modules, bottom-up:
//!
//! * [`geometry`]: boxes, IoU, NMS.
//! * [`numerics`]: a small reverse-mode autodiff engine.
//! * [`attention`]: attention-map encoding and additive conditioning.
//! * [`model`]: the toy conditioned detector and its box coder.
//! * [`training`]: sample generation, target assignment, the SGD loop.
//! * [`inference`]: two-stage relationship prediction.
//! * [`baselines`]: frequency-prior baselines.
//! * [`metrics`]: AP, AP_role, Recall@K, the weighted OID-style score.
//! * [`data`]: annotation files, image files, synthetic scenes.
//! * [`diagnostics`]: finite-difference checks of every differentiable op.

pub mod attention;
pub mod baselines;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{BBox, Detection, Label};

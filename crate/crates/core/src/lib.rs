//! Open-vocabulary detection and visual grounding unified as
//! attribute-level alignment between queries and detected objects.

#![allow(clippy::needless_range_loop)]

pub mod align_head;
pub mod attr_decomp;
pub mod data;
pub mod geometry;
pub mod gradcheck;
pub mod inference;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod rng;
pub mod supervision;
pub mod toy;

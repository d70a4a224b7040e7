//! Language-partitioned decoder self-attention for code-switched sequence
//! transduction, with everything needed to compare it against a plain
//! transformer on synthetic bilingual data.

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod decode;
pub mod experiment;
pub mod kv;
pub mod lang_mask;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod train;
pub mod vocab;

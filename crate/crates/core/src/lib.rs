//! Learned cardinality estimation on dynamic select-project-join workloads.

pub mod pipeline;
pub mod relstore;
pub mod synth;
pub mod bench;
pub mod dbstate;
pub mod model;
pub mod queryfeat;
pub mod trainer;
pub mod workloadgen;

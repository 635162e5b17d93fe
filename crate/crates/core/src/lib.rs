pub mod error;
pub mod findings;
pub mod harmonize;
pub mod instrument;
pub mod taxonomy;
pub mod mapping;
pub mod scoring;
pub mod evalcore;
pub mod rng;
pub mod ecv;
pub mod proposer;
pub mod synth;
pub mod diagnostics;
pub mod refine;
pub mod placebo;

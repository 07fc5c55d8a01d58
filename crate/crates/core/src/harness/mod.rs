//! Configuration, dataset I/O, synthetic data and the command-line front end.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod pipeline;
pub mod synth;

pub use config::RunConfig;
pub use dataset::{load_dataset, Frames, SampleRecord};
pub use synth::{synth_dataset, write_synth, SynthOutput, SynthSpec};

//! EEG decoding library: a compact multi-dimensional-attention network with
//! its own f64 autodiff core, deterministic signal preprocessing, synthetic
//! paradigm generators, a training harness and class-activation
//! interpretability tooling.

pub mod dataio;
pub mod interpret;
pub mod model;
pub mod sigproc;
pub mod tensor;
pub mod train;
pub mod util;

//! Cross-enhanced two-stream 3D ConvNets for action recognition.
//!
//! Two homologous 3D convolutional streams, one over RGB clips and one over
//! TV-L1 optical flow, are trained in three phases: the stronger stream alone,
//! then the weaker stream against the frozen stronger one through feature
//! mimicry bridges, and finally a fusion layer over both. The crate also
//! carries the tensor engine, the flow estimator and a synthetic benchmark
//! whose knobs decide which stream is stronger.

pub mod checkpoint;
pub mod dataset;
pub mod distill;
pub mod flow;
pub mod harness;
pub mod stream;
pub mod synth;
pub mod tensor;

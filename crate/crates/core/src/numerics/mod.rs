//! Dense tensors, a reverse-mode tape, AdamW and a finite-difference checker.

pub mod attention;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scan;
pub mod tensor;

pub use attention::{attention, multi_head_attention, AttentionVars, AttentionWeights, Attended};
pub use gradcheck::{grad_check, relative_error, GradCheckEntry, GradCheckReport};
pub use graph::{Gradients, Graph, ScanMode, Var};
pub use kernels::{
    activation, depthwise_causal_conv1d, layer_norm, linear, masked_softmax, sigmoid, silu, Activation,
};
pub use optim::{AdamWConfig, OptimizerState};
pub use params::{accumulate_grads, zero_grads, GradMap, ParamStore};
pub use rng::Rng;
pub use scan::{selective_scan, selective_scan_backward, selective_scan_chunked, ScanInputs, ScanOutput};
pub use tensor::Tensor;

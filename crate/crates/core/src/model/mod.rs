//! The cross-image reasoning network.

pub mod check;
pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod params;
pub mod trace;

pub use check::{check_model_gradients, gradient_fixture, shifted_loss, GradCheckOptions, GRAD_CHECK_MAX_D, GRAD_CHECK_MAX_LEN};
pub use checkpoint::{checkpoint_to_string, load_checkpoint, parse_checkpoint, save_checkpoint};
pub use config::{ablation_variant, balanced_class_weights, Ablation, ModelConfig, Toggles};
pub use forward::{
    forward, forward_graph, loss_and_grads, loss_and_grads_parallel, masked_mean, predict, sample_forward,
    ForwardOutput, ParamVars, SampleOutput,
};
pub use params::{init_parameters, parameter_count, parameter_specs, Init, ParamSpec};
pub use trace::{BridgeTrace, ForwardTrace, GateStats, RelevanceTrace};

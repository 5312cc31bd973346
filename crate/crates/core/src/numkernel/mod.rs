//! Differentiable numerical kernels, parameter management, optimizer and
//! learning-rate schedule.

pub mod encoder;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod schedule;
pub mod store;

pub use encoder::{
    attention_node, build_encoder_stack, conv1d_forward, conv1d_node, encoder_forward,
    encoder_layer_node, layer_norm_node, linear_node, register_conv1d, register_layer_norm,
    register_linear, stack_layers_node, EncoderStack, EncoderStackConfig, INIT_STD, LN_EPS,
};
pub use gradcheck::{grad_check, GradReport};
pub use graph::{Graph, NodeId, SoftmaxMask};
pub use optim::{adamw_step, AdamState};
pub use schedule::{lr_at_step, ScheduleConfig};
pub use store::{ParamEntry, ParamStore};

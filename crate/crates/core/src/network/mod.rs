//! Layer graphs, parameters, channel groups and graph execution.

mod exec;
mod groups;
mod mask;
mod model;
mod spec;

pub use exec::{backward, batch_moments, forward, predict, BatchMoments, update_running_stats, ForwardOutput, Gradients, Tape};
pub use groups::{build_groups, ChannelGroups, GroupInfo};
pub use mask::{absorb_group_masks, apply_mask, effective_spec, materialize, rescale_tau, spec_with_widths, PruneMask};
pub use model::{ChannelGroup, Model, ModelParts, ParamKey, Trainable, DEFAULT_EPS};
pub use spec::{builtin, convnet6, resnet8, Graph, LayerId, LayerKind, LayerSpec, NetworkSpec, OutShape, SpecBuilder};

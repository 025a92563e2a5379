//! AACLiteNet assembly: configuration, layer plan, parameters and the
//! checkpoint byte format.

mod checkpoint;
mod config;
mod net;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{
    same_padding, BlockSpec, ConvSpec, ModelConfig, Plan, StageSpec, GROUP_ORDER, NUM_CLASSES,
    NUM_GROUPS, NUM_OUTPUTS,
};
pub use net::{dwbconv_forward, AacLiteNet, DwbConvBlockParams, ForwardVars, ModelOutput};

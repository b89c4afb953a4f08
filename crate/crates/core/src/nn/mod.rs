//! The dense transformer skeleton, its configuration and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod model;

pub use checkpoint::{load_model, load_params, save_model, save_params};
pub use config::{ModelConfig, MoeConfig, Placement};
pub use model::{
    attention_block_forward, block_prefix, expert_prefix, ffn_forward, ffn_names, is_moe_param, param_group, router_name,
    BlockFfn, BlockParams, FfnParams, ForwardOptions, ForwardOutput, Model, ModalitySequence, ParamGroup, INIT_STD,
    NORM_EPS,
};

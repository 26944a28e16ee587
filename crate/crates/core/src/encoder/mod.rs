//! Dual-path vision transformer.
//!
//! The main path is a standard pre-LN transformer. Alongside it, a second
//! path accumulates value-value attention computed from the main path's
//! layer inputs, without the second layer norm and FFN; its output is what
//! the rest of the system consumes. The category pass additionally swaps
//! the queries of selected layers for a projected category text token.

mod config;
mod forward;
mod params;

pub use config::EncoderConfig;
pub use forward::{
    assemble_tokens, encode, forward_category, forward_category_at, forward_dual_path,
    patches_from_field, project_joint, vv_attention, vv_attention_weights, CategoryOutput,
    DualPathOutput, EncoderOutput, TokenBatch, LN_EPS,
};
pub use params::{init_params, layer_name, BoundParams, Param, ParamStore, TAU};

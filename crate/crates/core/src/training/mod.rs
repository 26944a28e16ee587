//! The two-level objective, fine-tuning policy and optimizer loop.

mod config;
mod losses;
mod objective;
mod optimizer;
mod step;

pub use config::{NegativeMining, TrainingConfig};
pub use losses::{
    category_similarity_maps, disentangle, disentangle_tape, hinge, triplet_loss_category,
    triplet_loss_category_tape, triplet_loss_global, triplet_loss_global_tape, upscale_map,
};
pub use objective::{
    build_item_graph, caption_groups, objective, objective_and_gradient, prepare_items,
    ItemGraph, LossBreakdown, PreparedItem,
};
pub use optimizer::{AdamW, TAU_MAX, TAU_MIN};
pub use step::{epoch_batches, epoch_order, train_step, StepRecord, TrainState};

//! Late fusion of expert outputs through a stacking function and an Ω-way
//! softmax, plus the early-fusion baseline on concatenated encodings.

mod early;
mod head;
mod mixture;
mod stacking;

pub use early::{concatenated_dim, concatenated_encoding, early_fusion_train, EarlyFusionModel};
pub use head::{feature_scale, rank, train_softmax_head, HeadConfig, HeadGradient, HeadOptimizer, SoftmaxHead};
pub use mixture::{refine_end_to_end, stacked_matrix, train_stacking_head, ExpertHeadGradient, MixtureModel};
pub use stacking::{
    check_experts_match, expert_scores, scaled_factor, stack_features, stack_scores, ExpertScores, StackVariant,
    StackedFeature, PHI_EPSILON,
};

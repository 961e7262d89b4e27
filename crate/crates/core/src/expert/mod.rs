//! Per-group experts: a feed-forward encoder with an (M+1)-way multi-task
//! softmax head, trained with ridge and Laplacian coupling between class
//! weights.

mod checkpoint;
mod model;
mod objective;
mod train;

pub use checkpoint::ExpertCheckpoint;
pub use model::{Backbone, Dense, ExpertModel};
pub use objective::{
    gradient, loss, manifold_penalty, similarity_matrix, ExpertGradient, LabeledInput, SimilarityState,
};
pub use train::{
    expert_config, sample_not_in_group, train_expert, train_experts, within_group_accuracy, LabeledIndex, TrainConfig,
};

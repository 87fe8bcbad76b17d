//! Stage 1: contrastive localisation and self-labelling.

pub mod losses;
pub mod sinkhorn;
pub mod train;

pub use losses::{
    clustering_loss, contrastive_loss, joint_loss_and_grad, loss_clust, loss_nc, score_matrix,
    LossBreakdown, ScoreMatrix,
};
pub use sinkhorn::{sinkhorn_labels, uniform_marginals, Assignment, SinkhornConfig};
pub use train::{train, EpochRecord, LabelRecord, SslConfig, TrainOutput};

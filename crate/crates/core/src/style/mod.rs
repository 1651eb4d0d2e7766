//! Style encoder: backbone, hybrid objective, embeddings and projection.

mod backbone;
mod embedding;
mod encoder;
mod loss;

pub use backbone::{build_backbone, Backbone, MobileNetLite, PlainConvNet};
pub use embedding::{aggregate_exemplars, check_same_dim, Projector, Provenance, StyleEmbedding};
pub use encoder::{
    style_learning_rate, train_style_encoder, EpochLoss, StyleEncoder, StyleTrainReport,
    CHECKPOINT_KIND,
};
pub use loss::{
    batch_p_distance, batch_triplet_loss, hybrid_loss_from_parts, p_distance, triplet_loss,
    HybridLoss, HybridParams,
};

//! Contrastive objectives over L2-normalized embeddings and the two-view
//! signal augmentation used by the uni-modal baseline.

mod augment;
mod loss;

pub use augment::{augment_pair, AugmentationConfig, AugmentedPair};
pub use loss::{cross_modal_loss, ssl_loss, ContrastiveConfig, Direction, SimilarityMatrix, NORM_TOLERANCE};

#[cfg(test)]
mod tests;

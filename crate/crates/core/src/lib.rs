//! Weakly-supervised multiple-instance learning for white-blood-cell screening.
//!
//! Sample-level diagnostic labels train a bag classifier over segmented cell
//! patches: a small convolutional backbone embeds each patch, an elementwise
//! max fuses the bag, and a fully connected head predicts the diagnosis.
//! Scoring a single cell as a bag of one turns the same model into a
//! cell-level disease-indicator detector.

pub mod imaging;
pub mod tensor;
pub mod augment;
pub mod model;
pub mod training;
pub mod dataio;
pub mod metrics;
pub mod pipeline;

//! Online unsupervised video object segmentation by clustering optical flow.
//!
//! Each flow frame is color-coded, embedded by a small convolutional autoencoder,
//! and grouped by optimal-transport assignment to a bank of unit prototypes. A
//! boundary-motion prior decides which prototypes are background.

pub mod cluster;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gradcheck;
pub mod losses;
pub mod mask;
pub mod net;
pub mod pipeline;
pub mod saliency;
pub mod synth;

pub use cluster::{InitStrategy, PrototypeBank};
pub use error::{Error, Result};
pub use flow::{flow_to_image, read_flo, write_flo, FlowField, FlowImage};
pub use losses::LossWeights;
pub use mask::Mask;
pub use net::{NetConfig, NetParams};
pub use pipeline::{SegmenterConfig, SequenceState};

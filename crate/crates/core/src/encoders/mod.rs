//! Image and text encoders built on [`clim_tensor`].
//!
//! The image encoder runs its last residual attention block twice from the
//! same input: once as usual, giving the `[CLS]` embedding, and once with the
//! attention mixing removed, giving a per-patch feature map whose cells only
//! depend on their own token. Both variants use the same weights.

mod block;
mod text;
mod vision;

pub use block::{LayerNorm, Linear, ResAttnBlock};
pub use text::{TextConfig, TextEncoder, TextOutput};
pub use vision::{DenseFeatureMap, VisionConfig, VisionEncoder, VisionOutput, VisionPaths, PIXEL_MEAN, PIXEL_STD};

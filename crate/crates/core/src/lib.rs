//! Region-text alignment by contrasting mosaicked image-text pairs.
//!
//! Several captioned images are cropped into the cells of one canvas. Each
//! cell becomes a pseudo region whose text is the caption of its source
//! image, so a model trained only on image-caption pairs also learns to
//! align region features, pooled from a dense feature map, with text.
//!
//! The crate holds the whole pipeline: a procedural shapes dataset
//! ([`synth`]), mosaic construction ([`mosaic`]), the encoders
//! ([`encoders`]), region pooling ([`region`]), the objectives ([`losses`]),
//! training ([`train`]) and evaluation ([`eval`]).

pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod image;
pub mod losses;
pub mod mosaic;
pub mod params;
pub mod region;
pub mod synth;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/mosaics.md")]
    mod mosaics {}
    #[doc = include_str!("../../../book/src/encoders.md")]
    mod encoders {}
    #[doc = include_str!("../../../book/src/regions.md")]
    mod regions {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

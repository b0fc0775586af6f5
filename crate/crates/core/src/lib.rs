//! One-step flow-matching video face enhancement at desk scale.
//!
//! The pipeline: synthesize or ingest clips ([`media_io`]), degrade them
//! ([`degrade`]), project to a fixed latent space ([`codec`]), transport facial
//! masks into latent geometry ([`mask_align`]), train the one-step velocity
//! network ([`flow`], [`train`]), restore and evaluate ([`restore`],
//! [`metrics`]), and curate training clips from MLLM assessments ([`curate`]).

pub mod codec;
pub mod curate;
pub mod degrade;
pub mod error;
pub mod flow;
pub mod mask_align;
pub mod media_io;
pub mod metrics;
pub mod par;
pub mod restore;
pub mod train;

pub use error::{Error, Result};
pub use media_io::{MaskStack, Video};

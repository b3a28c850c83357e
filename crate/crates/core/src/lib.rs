//! Joint speaker diarization and source separation of multichannel meeting
//! recordings with an integrated vMF / cACG mixture model.

pub mod cacg;
pub mod error;
pub mod frontend;
pub mod integrated;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod synth;
pub mod vmf;

pub use error::{Error, Result};

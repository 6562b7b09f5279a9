//! Latent thought-routing sequence translation.
//!
//! Frame features are encoded into evidence `E`, softly segmented into `M`
//! segment tokens, and read by `K` ordered latent thoughts whose binding to
//! segments is a Sinkhorn-normalized transport plan. A decoder first attends
//! to the thoughts, then to the frames under a log-prior derived from that
//! binding.
//!
//! Everything runs on the reverse-mode engine in `thoughtroute-autodiff`.

pub mod batch;
pub mod config;
pub mod dataset;
pub mod decode;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod report;
pub mod routing;
pub mod run_config;
pub mod segmentation;
pub mod selfcheck;
pub mod synth;
pub mod thinking;
pub mod train;

pub use batch::{ClipBatch, TokenBatch, BOS, EOS, PAD, UNK};
pub use config::{DecoderConfig, EncoderConfig, LossConfig, ModelConfig, PriorLayer, RoutingConfig, SegmentationConfig, ThinkConfig};
pub use error::{Error, Result};
pub use run_config::RunConfig;
pub use thoughtroute_autodiff as autodiff;

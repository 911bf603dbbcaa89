//! Unsupervised domain adaptation of semantic segmentation across imaging
//! domains whose channel counts differ.
//!
//! The crate is organised by stage:
//!
//! - [`data`]: domain specs, the portable sample format, patient folds and the
//!   synthetic heterogeneous task generator.
//! - [`nn`]: parameter storage, checkpoints, layers and optimizers on top of
//!   `candle`.
//! - [`translation`]: content/style encoders, AdaIN decoders and patch
//!   discriminators for stochastic cross-domain translation.
//! - [`objectives`]: every loss used in training and the two composite
//!   objectives.
//! - [`segmentation`]: the residual encoder-decoder segmenters.
//! - [`pseudo`]: confident pseudo-labels through target-to-source translation.
//! - [`pipelines`]: the three training stages and the baseline matrix.
//! - [`evaluation`]: pixel metrics, average precision, aggregation and reports.
//! - [`config`]: the layered run configuration used by the command-line tool.

pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod objectives;
pub mod pipelines;
pub mod pseudo;
pub mod segmentation;
pub mod translation;

pub use data::{Dataset, DomainSpec, FoldPlan, Sample, SyntheticTaskConfig, Tensor3};
pub use error::{Error, ErrorCategory, Result};
pub use evaluation::{MetricsRecord, MetricsReport};
pub use objectives::LossWeights;
pub use pseudo::PseudoInfo;
pub use segmentation::{Segmenter, SegmenterConfig};
pub use translation::{Direction, NetConfig, TranslationModel};

//! Utility-aware load shedding for live video analytics.
//!
//! Frames are scored by how likely they are to contain the queried color
//! content; under overload the lowest-utility frames are dropped first so
//! the backend stays within its latency bound.

// `!(x > 0.0)` is used deliberately so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod color;
pub mod control;
pub mod error;
pub mod reference;
pub mod shedder;
pub mod sim;
pub mod threshold;
pub mod utility;

pub use color::{extract_features, BinGrid, FrameFeatures, HsvHistogram, HueRange, Palette, Quantization};
pub use control::{ControlConfig, ControlLoop, ControlOutput, FixedLatencies};
pub use error::{Error, Result};
pub use shedder::{FrameMeta, ShedDecision, Shedder, ShedderConfig};
pub use threshold::{threshold_for_drop_rate, Threshold, UtilityCdf, UtilityHistory};
pub use utility::{train_color_model, ColorModel, LabeledFrame, QueryExpr, UtilityModel};

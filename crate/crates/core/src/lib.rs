//! Object-centric image-to-video adaptation head.
//!
//! Frame features from a frozen encoder are distilled into per-frame object
//! tokens with slot attention, object state changes are modelled across a
//! fixed time interval, and the attention weights double as zero-shot object
//! masks.

pub mod backbone;
pub mod checks;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod losses;
pub mod model;
pub mod object_time;
pub mod params;
pub mod segmentation;
pub mod slot_attention;
pub mod stf;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::Tensor;

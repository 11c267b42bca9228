//! Preference engine for garment co-design.
//!
//! Designers frame a design space, users react to generated garments with brush
//! strokes and votes, and the engine turns those reactions into per-user
//! preference networks, group consensus scores, attributions and curated
//! fine-tuning manifests. Every generative step sits behind a backend trait
//! with a deterministic mock.

pub mod attribution;
pub mod backend;
pub mod catalog;
pub mod consensus;
pub mod design_space;
pub mod elicitation;
pub mod error;
pub mod framing;
pub mod imaging;
pub mod palette;
pub mod preference;
pub mod prompt;

pub use design_space::{encode_one_hot, AttributeId, DesignSpace, DesignVector, OneHot51, DIMENSION_COUNT, ONE_HOT_LEN};
pub use error::{Error, Result};

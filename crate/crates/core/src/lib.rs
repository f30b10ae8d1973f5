//! Three-modality (audio, video, language) embedding trainer built around a
//! pairwise InfoNCE alignment stage followed by an intra-sample consensus
//! refinement stage, together with the evaluation protocols used to judge the
//! resulting embedding: sounding-action discovery, cross-modal retrieval,
//! agglomerative clustering and linear-probe classification.

mod binio;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod losses;
pub mod math;
pub mod modality;
pub mod trainer;

pub use binio::write_atomic;
pub use error::{Mc3Error, Result};
pub use modality::{ModalityId, PerModality};

//! Text-only consistent prompt tuning for multi-modality zero-shot
//! classification.
//!
//! Each modality owns a pool of learnable class prompts covering every label
//! of every modality. Pools are trained against frozen text embeddings with a
//! ranking loss, and weaker modalities are pulled toward stronger ones with a
//! masked, uni-directional contrastive loss. Test items are classified by
//! cosine similarity against the learned prompts.

pub mod bench;
pub mod datagen;
pub mod embedding;
pub mod error;
pub mod eval;
mod io;
pub mod label_space;
pub mod matrix;
pub mod objectives;
pub mod prompt_pool;
pub mod rng;
pub mod trainer;

pub use error::{CptError, Result};
pub use label_space::{LabelSpace, ModalityId};

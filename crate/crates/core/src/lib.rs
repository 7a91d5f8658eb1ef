pub mod diffcore;
pub mod error;
pub mod rng;

pub use error::{Error, Result};
pub mod labeler;
pub mod nets;
pub mod randmix;

use serde::{Deserialize, Serialize};

/// Whether a training stage has ground-truth labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Source,
    Target,
}
pub mod gradcheck;
pub mod objective;
pub mod memory;
pub mod synthdata;
pub mod protocol;
pub mod cli;

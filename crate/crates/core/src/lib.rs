//! Decision-boundary knowledge distillation at desk scale.
//!
//! The crate transfers a teacher classifier's decision boundary to a
//! smaller student by
//!
//! 1. generating *boundary supporting samples* (BSSs) with a modified
//!    gradient attack that stops just across the teacher's boundary
//!    ([`attack`]),
//! 2. training the student with a three-term loss — hard-label
//!    cross-entropy, temperature-softened distillation, and a boundary
//!    supporting term over stochastically targeted BSSs ([`distill`]), and
//! 3. quantifying how much boundary geometry transferred with two
//!    perturbation-based similarity metrics, MagSim and AngSim
//!    ([`metrics`]).
//!
//! Everything runs on a small reverse-mode autodiff engine ([`autodiff`])
//! that differentiates scalar losses with respect to parameters *and*
//! network inputs, which the attack requires. [`data`] provides synthetic
//! 2-D datasets and IDX image ingestion; [`experiments`] wraps the whole
//! pipeline into seeded, replayable experiment recipes.

pub mod altgen;
pub mod attack;
pub mod autodiff;
pub mod data;
pub mod distill;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod stats;
pub mod tensor;

pub use autodiff::{GradientMap, NodeId, Tape};
pub use error::{Error, Result};
pub use model::{Activation, ClassifierModel, ClassifierSpec, LayerSpec};
pub use tensor::Tensor;

use std::path::Path;

/// Writes a file atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = match dir {
        Some(d) => d.join(format!(
            ".{}.tmp-{}",
            path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default(),
            std::process::id()
        )),
        None => Path::new(&format!(".tmp-{}", std::process::id())).to_path_buf(),
    };
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

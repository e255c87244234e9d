//! Episodes of per-frame feature grids: synthetic generation, the `FGR1`
//! record format and train/validation/test splits.

mod records;
mod split;
mod synth;

pub use records::{
    read_records, read_records_dir, read_records_file, read_records_path, write_records, write_records_file, RecordHeader,
};
pub use split::{split, Split};
pub use synth::{generate_dataset, generate_dataset_jobs, synth_episode, SynthConfig, SynthWorld, TamperMode};

use serde::{Deserialize, Serialize};

use crate::memory::FeatureGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// Classifier index: 0 for real, 1 for fake.
    pub fn class(self) -> usize {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }

    pub fn is_fake(self) -> bool {
        self == Label::Fake
    }
}

/// One video: frames in order, each paired with the grid `Δ` frames later.
///
/// The label applies to every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode<T> {
    pub id: u32,
    pub label: Label,
    pub frames: Vec<FeatureGrid<T>>,
    pub futures: Vec<FeatureGrid<T>>,
    pub source: String,
}

impl<T> Episode<T> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        vec![self.label; self.frames.len()]
    }
}

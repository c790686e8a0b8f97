//! Feature sequences, phase annotations, dataset files and synthetic data.

mod io;
mod synth;

pub use io::{load_dataset, read_frames, save_dataset, write_frames, ManifestRecord, FRAMES_MAGIC, FRAMES_VERSION};
pub use synth::{generate_synthetic, generate_synthetic_detailed, SyntheticConfig, SyntheticDataset};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Result, TccError};
use crate::tensor::Tensor;

/// Key events and per-frame phase labels of one sequence.
///
/// `key_events` always starts at frame 0 and ends at frame `N − 1`; phase `e`
/// covers frames `key_events[e]..key_events[e + 1]`, with the final frame
/// belonging to the last phase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseAnnotation {
    pub key_events: Vec<usize>,
    pub phase_labels: Vec<usize>,
}

impl PhaseAnnotation {
    /// Derive key events from a non-decreasing label sequence `0, 0, 1, 1, 2, …`.
    pub fn from_phase_labels(labels: Vec<usize>) -> Result<Self> {
        ensure!(labels.len() >= 2, Contract, "annotation needs at least two frames");
        let mut key_events = vec![0];
        for t in 1..labels.len() {
            if labels[t] != labels[t - 1] {
                key_events.push(t);
            }
        }
        key_events.push(labels.len() - 1);
        let ann = Self {
            key_events,
            phase_labels: labels,
        };
        ann.validate(ann.phase_labels.len())?;
        Ok(ann)
    }

    pub fn num_phases(&self) -> usize {
        self.key_events.len().saturating_sub(1)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        ensure!(
            self.phase_labels.len() == n,
            Contract,
            "{} phase labels for {} frames",
            self.phase_labels.len(),
            n
        );
        let ke = &self.key_events;
        ensure!(ke.len() >= 2, Contract, "need at least start and end key events");
        ensure!(
            ke[0] == 0 && *ke.last().unwrap() == n - 1,
            Contract,
            "key events must start at 0 and end at {}",
            n - 1
        );
        ensure!(
            ke.windows(2).all(|w| w[0] < w[1]),
            Contract,
            "key events must be strictly increasing: {:?}",
            ke
        );
        let last = ke.len() - 2;
        for e in 0..=last {
            let end = if e == last { n } else { ke[e + 1] };
            for t in ke[e]..end {
                ensure!(
                    self.phase_labels[t] == e,
                    Contract,
                    "frame {t} has phase {} but lies in phase {e}",
                    self.phase_labels[t]
                );
            }
        }
        Ok(())
    }
}

/// One video as an ordered list of per-frame feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub id: String,
    /// `N × d`, one row per frame.
    pub frames: Tensor,
    pub fps: f64,
    pub annotation: Option<PhaseAnnotation>,
}

impl FeatureSequence {
    pub fn new(id: impl Into<String>, frames: Tensor, fps: f64, annotation: Option<PhaseAnnotation>) -> Result<Self> {
        let seq = Self {
            id: id.into(),
            frames,
            fps,
            annotation,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.frames.shape().len() == 2,
            Shape,
            "frames of {} must be a matrix, got {:?}",
            self.id,
            self.frames.shape()
        );
        ensure!(!self.is_empty(), Contract, "sequence {} is empty", self.id);
        ensure!(
            self.frames.all_finite(),
            Contract,
            "sequence {} has non-finite features",
            self.id
        );
        ensure!(
            self.fps > 0.0 && self.fps.is_finite(),
            Contract,
            "sequence {} has invalid fps {}",
            self.id,
            self.fps
        );
        if let Some(a) = &self.annotation {
            a.validate(self.len())?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn annotation(&self) -> Result<&PhaseAnnotation> {
        self.annotation
            .as_ref()
            .ok_or_else(|| TccError::MissingAnnotation(self.id.clone()))
    }
}

/// Add i.i.d. Gaussian noise with standard deviation `std` to every feature.
pub fn jitter_augment(seq: &FeatureSequence, std: f64, seed: u64) -> Result<FeatureSequence> {
    ensure!(
        std >= 0.0 && std.is_finite(),
        Contract,
        "jitter std must be >= 0, got {std}"
    );
    if std == 0.0 {
        return Ok(seq.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("std validated above");
    let mut out = seq.clone();
    for x in out.frames.data_mut() {
        *x += normal.sample(&mut rng);
    }
    Ok(out)
}

/// Which part of a dataset a sequence belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl std::str::FromStr for Split {
    type Err = TccError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(TccError::Contract(format!("unknown split {s:?}"))),
        }
    }
}

/// Assign ids to train/val by ranking a seeded SHA-256 of each id.
///
/// The first `round(train_fraction · n)` ids in hash order go to training, so
/// counts are exact and membership does not depend on input order.
pub fn split_by_hash(ids: &[&str], seed: u64, train_fraction: f64) -> Vec<Split> {
    let mut ranked: Vec<(Vec<u8>, usize)> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let mut h = Sha256::new();
            h.update(seed.to_le_bytes());
            h.update(id.as_bytes());
            (h.finalize().to_vec(), i)
        })
        .collect();
    ranked.sort();
    let n_train = (train_fraction * ids.len() as f64).round() as usize;
    let mut out = vec![Split::Val; ids.len()];
    for (_, i) in ranked.into_iter().take(n_train) {
        out[i] = Split::Train;
    }
    out
}

/// A loaded dataset: sequences plus an optional split per sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<FeatureSequence>,
    pub splits: Vec<Option<Split>>,
}

impl Dataset {
    pub fn new(sequences: Vec<FeatureSequence>) -> Self {
        let splits = vec![None; sequences.len()];
        Self { sequences, splits }
    }

    pub fn with_splits(sequences: Vec<FeatureSequence>, splits: Vec<Split>) -> Self {
        Self {
            sequences,
            splits: splits.into_iter().map(Some).collect(),
        }
    }

    /// Sequences in `split`. Sequences without a recorded split are assigned
    /// by [`split_by_hash`] with seed 0 and an 80/20 ratio.
    pub fn split(&self, split: Split) -> Vec<&FeatureSequence> {
        let fallback = if self.splits.iter().any(Option::is_none) {
            let ids: Vec<&str> = self.sequences.iter().map(|s| s.id.as_str()).collect();
            split_by_hash(&ids, 0, 0.8)
        } else {
            vec![]
        };
        self.sequences
            .iter()
            .enumerate()
            .filter(|(i, _)| self.splits[*i].unwrap_or_else(|| fallback[*i]) == split)
            .map(|(_, s)| s)
            .collect()
    }

    pub fn get(&self, id: &str) -> Result<&FeatureSequence> {
        self.sequences
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| TccError::UnknownSequence(id.to_string()))
    }
}

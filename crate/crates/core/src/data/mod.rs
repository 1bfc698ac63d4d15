//! Samples, datasets, identity-balanced batch sampling and dataset I/O.

mod manifest;
mod synth;

pub use manifest::{export_directory, ingest_directory, ingest_with_manifest, MANIFEST_FILE};
pub use synth::{generate_synthetic, SynthConfig, SynthDataset};

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::modality::Modality;

/// One labeled image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub identity: u32,
    pub camera: u32,
    pub modality: Modality,
}

impl Sample {
    pub fn new(image: Image, identity: u32, camera: u32, modality: Modality) -> Result<Self> {
        if modality == Modality::Intermediate {
            return Err(Error::InvalidArgument(
                "datasets hold only visible and infrared samples".into(),
            ));
        }
        if image.channels() != modality.channels() {
            return Err(Error::ChannelMismatch {
                expected: modality.channels(),
                found: image.channels(),
            });
        }
        Ok(Sample {
            image,
            identity,
            camera,
            modality,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Immutable collection of samples with a per-identity, per-modality index.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    split: Split,
    /// identity -> (visible indices, infrared indices)
    id_index: BTreeMap<u32, (Vec<usize>, Vec<usize>)>,
}

impl Dataset {
    /// Validates channel/modality agreement and, for training splits, that
    /// every identity appears in both modalities.
    pub fn new(samples: Vec<Sample>, split: Split) -> Result<Self> {
        let mut id_index: BTreeMap<u32, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if s.image.channels() != s.modality.channels() {
                return Err(Error::ChannelMismatch {
                    expected: s.modality.channels(),
                    found: s.image.channels(),
                });
            }
            let entry = id_index.entry(s.identity).or_default();
            match s.modality {
                Modality::Visible => entry.0.push(i),
                Modality::Infrared => entry.1.push(i),
                Modality::Intermediate => {
                    return Err(Error::InvalidArgument("intermediate sample in dataset".into()))
                }
            }
        }
        if split == Split::Train {
            if let Some((id, _)) = id_index.iter().find(|(_, (v, t))| v.is_empty() || t.is_empty()) {
                return Err(Error::InvalidArgument(format!(
                    "training identity {id} lacks one modality"
                )));
            }
        }
        Ok(Dataset {
            samples,
            split,
            id_index,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Identities in ascending order.
    pub fn identities(&self) -> Vec<u32> {
        self.id_index.keys().copied().collect()
    }

    pub fn num_identities(&self) -> usize {
        self.id_index.len()
    }

    /// Contiguous classifier index of an identity (its rank among identities).
    pub fn class_of(&self, identity: u32) -> Option<usize> {
        self.id_index.keys().position(|&id| id == identity)
    }

    pub fn indices(&self, identity: u32, modality: Modality) -> &[usize] {
        match (self.id_index.get(&identity), modality) {
            (Some((v, _)), Modality::Visible) => v,
            (Some((_, t)), Modality::Infrared) => t,
            _ => &[],
        }
    }

    pub fn of_modality(&self, modality: Modality) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.modality == modality)
    }
}

/// Identity-balanced batch: row `i` of the visible and infrared halves share one identity.
#[derive(Clone, Debug, PartialEq)]
pub struct PkBatch {
    pub visible: Vec<usize>,
    pub infrared: Vec<usize>,
    pub identities: Vec<u32>,
    /// Classifier indices aligned with `identities`.
    pub labels: Vec<usize>,
}

impl PkBatch {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }
}

/// Draws `persons` identities without replacement and `per_person` images of
/// each in each modality (with replacement only when an identity has fewer).
pub fn pk_sample(ds: &Dataset, persons: usize, per_person: usize, rng: &mut impl Rng) -> Result<PkBatch> {
    if persons < 2 || per_person < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch needs at least 2 persons with 2 images each, got {persons}x{per_person}"
        )));
    }
    let ids = ds.identities();
    if ids.len() < persons {
        return Err(Error::InvalidArgument(format!(
            "{} identities available, {persons} requested",
            ids.len()
        )));
    }
    let mut batch = PkBatch {
        visible: Vec::with_capacity(persons * per_person),
        infrared: Vec::with_capacity(persons * per_person),
        identities: Vec::with_capacity(persons * per_person),
        labels: Vec::with_capacity(persons * per_person),
    };
    for pick in index::sample(rng, ids.len(), persons) {
        let id = ids[pick];
        let v = draw(ds.indices(id, Modality::Visible), per_person, rng)?;
        let t = draw(ds.indices(id, Modality::Infrared), per_person, rng)?;
        batch.visible.extend(v);
        batch.infrared.extend(t);
        batch.identities.extend(std::iter::repeat_n(id, per_person));
        batch.labels.extend(std::iter::repeat_n(pick, per_person));
    }
    Ok(batch)
}

fn draw(pool: &[usize], n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if pool.is_empty() {
        return Err(Error::InvalidArgument("identity without images".into()));
    }
    if pool.len() >= n {
        Ok(index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect())
    } else {
        Ok((0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect())
    }
}

//! N-way K-shot Q-query episode construction.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GgiuError, Result};
use crate::seeds;
use crate::store::EmbeddingDataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub groups: usize,
    pub episodes_per_group: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec {
            n_way: 5,
            k_shot: 1,
            q_query: 15,
            groups: 5,
            episodes_per_group: 2000,
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_way", self.n_way),
            ("k_shot", self.k_shot),
            ("q_query", self.q_query),
            ("groups", self.groups),
            ("episodes_per_group", self.episodes_per_group),
        ];
        for (name, value) in fields {
            if value == 0 {
                return Err(GgiuError::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn total_episodes(&self) -> usize {
        self.groups * self.episodes_per_group
    }
}

/// One task. Entries are positions into `EmbeddingDataset::records`;
/// `support[j]` and `query[j]` belong to class `classes[j]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub classes: Vec<u32>,
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
}

impl Episode {
    /// Content hash over classes and record positions.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        self.feed(&mut h);
        h.finalize().into()
    }

    fn feed(&self, h: &mut Sha256) {
        h.update((self.classes.len() as u64).to_le_bytes());
        for (j, c) in self.classes.iter().enumerate() {
            h.update(c.to_le_bytes());
            for side in [&self.support[j], &self.query[j]] {
                h.update((side.len() as u64).to_le_bytes());
                for &r in side {
                    h.update((r as u64).to_le_bytes());
                }
            }
        }
    }
}

/// Hex digest of an ordered sequence of episode digests.
pub fn combine_digests<'a>(digests: impl IntoIterator<Item = &'a [u8; 32]>) -> String {
    let mut h = Sha256::new();
    for d in digests {
        h.update(d);
    }
    let bytes: [u8; 32] = h.finalize().into();
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Reusable sampler holding the per-class record index of one dataset.
#[derive(Debug, Clone)]
pub struct EpisodeSampler {
    spec: EpisodeSpec,
    by_class: Vec<Vec<usize>>,
}

impl EpisodeSampler {
    pub fn new(dataset: &EmbeddingDataset, spec: EpisodeSpec) -> Result<Self> {
        spec.validate()?;
        let by_class = dataset.records_by_class();
        if by_class.len() < spec.n_way {
            return Err(GgiuError::Capacity(format!(
                "{}-way episodes need {} classes, dataset has {}",
                spec.n_way,
                spec.n_way,
                by_class.len()
            )));
        }
        let need = spec.k_shot + spec.q_query;
        if let Some((c, recs)) = by_class.iter().enumerate().find(|(_, r)| r.len() < need) {
            return Err(GgiuError::Capacity(format!(
                "class {c} ({:?}) has {} record(s), episodes need {need} (K={} + Q={})",
                dataset.class_names[c],
                recs.len(),
                spec.k_shot,
                spec.q_query
            )));
        }
        Ok(EpisodeSampler { spec, by_class })
    }

    pub fn spec(&self) -> &EpisodeSpec {
        &self.spec
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Episode {
        let n = self.spec.n_way;
        let k = self.spec.k_shot;
        let need = k + self.spec.q_query;
        let mut class_order: Vec<u32> = (0..self.by_class.len() as u32).collect();
        let (picked, _) = class_order.partial_shuffle(rng, n);
        let classes = picked.to_vec();

        let mut support = Vec::with_capacity(n);
        let mut query = Vec::with_capacity(n);
        for &c in &classes {
            let mut pool = self.by_class[c as usize].clone();
            let (drawn, _) = pool.partial_shuffle(rng, need);
            support.push(drawn[..k].to_vec());
            query.push(drawn[k..].to_vec());
        }
        Episode {
            classes,
            support,
            query,
        }
    }

    /// Episode `index` of group `group` under `master_seed`.
    pub fn episode_at(&self, master_seed: u64, group: usize, index: usize) -> Episode {
        self.sample(&mut episode_rng(master_seed, group, index))
    }

    pub fn group(&self, master_seed: u64, group: usize) -> Vec<Episode> {
        (0..self.spec.episodes_per_group)
            .into_par_iter()
            .map(|i| self.episode_at(master_seed, group, i))
            .collect()
    }
}

pub fn episode_rng(master_seed: u64, group: usize, index: usize) -> seeds::StreamRng {
    seeds::stream(master_seed, "episode", &[group as u64, index as u64])
}

pub fn sample_episode<R: Rng + ?Sized>(
    dataset: &EmbeddingDataset,
    spec: &EpisodeSpec,
    rng: &mut R,
) -> Result<Episode> {
    Ok(EpisodeSampler::new(dataset, *spec)?.sample(rng))
}

pub fn sample_groups(
    dataset: &EmbeddingDataset,
    spec: &EpisodeSpec,
    master_seed: u64,
) -> Result<Vec<Vec<Episode>>> {
    let sampler = EpisodeSampler::new(dataset, *spec)?;
    Ok((0..spec.groups).map(|g| sampler.group(master_seed, g)).collect())
}

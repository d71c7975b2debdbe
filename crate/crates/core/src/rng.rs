//! Counter-based random streams addressed by sample coordinates.
//!
//! Every random decision in the pipeline draws from a stream derived from
//! `(seed, dataset_id, epoch, index, stage)`. Streams never depend on
//! execution order, so results are identical for any worker count.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Pipeline stage tags. Distinct tags give independent streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Select,
    Pair,
    Crop,
    GdaJoint,
    GdaTemplate,
    GdaSearch,
    Distractor,
    Mix,
    Subset,
    Synthetic,
    Projection,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Select => "select",
            Stage::Pair => "pair",
            Stage::Crop => "crop",
            Stage::GdaJoint => "gda-joint",
            Stage::GdaTemplate => "gda-template",
            Stage::GdaSearch => "gda-search",
            Stage::Distractor => "distractor",
            Stage::Mix => "mix",
            Stage::Subset => "subset",
            Stage::Synthetic => "synthetic",
            Stage::Projection => "projection",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngPath {
    pub dataset_id: u64,
    pub epoch: u64,
    pub index: u64,
    pub stage: Stage,
}

impl std::fmt::Display for RngPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}",
            self.dataset_id,
            self.epoch,
            self.index,
            self.stage.tag()
        )
    }
}

/// A deterministic random stream. Implements [`RngCore`], so it can be
/// passed anywhere an `Rng` is expected.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    path: RngPath,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> RngPath {
        self.path
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

pub fn rng_for(seed: u64, dataset_id: u64, epoch: u64, index: u64, stage: Stage) -> RngStream {
    let mut hasher = Sha256::new();
    hasher.update(b"trackaug-rng-v1");
    hasher.update(seed.to_le_bytes());
    hasher.update(dataset_id.to_le_bytes());
    hasher.update(epoch.to_le_bytes());
    hasher.update(index.to_le_bytes());
    hasher.update(stage.tag().as_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    RngStream {
        seed,
        path: RngPath {
            dataset_id,
            epoch,
            index,
            stage,
        },
        inner: ChaCha8Rng::from_seed(key),
    }
}

/// Uniform draw on `[lo, hi)`. Consumes exactly one `f64` draw, also when
/// `lo == hi`, in which case `lo` is returned.
pub fn uniform<R: rand::Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.random();
    if hi <= lo {
        return lo;
    }
    lo + (hi - lo) * u
}

//! Explainable anomaly detection on imbalanced tabular data.
//!
//! The pipeline stages live in their own modules: [`data`] (CSV ingest, scaling,
//! splits), [`resample`] (RUS / SMOTE / Tomek links), [`tsne`] and [`vae`]
//! (representations), [`learners`] and [`ensemble`] (classifiers), [`metrics`],
//! [`explain`] (Shapley values, permutation importance, ICE) and
//! [`experiment`], the config-driven grid runner behind the `svead` binary.

pub mod container;
pub mod data;
pub mod ensemble;
mod error;
pub mod experiment;
pub mod explain;
pub mod learners;
mod matrix;
pub mod metrics;
pub mod resample;
pub mod synth;
pub mod tsne;
pub mod vae;
mod warnings;

pub use data::{Dataset, FoldPlan, ScalerKind, ScalerParams};
pub use ensemble::{StackedEnsemble, VotingEnsemble, VoteMode};
pub use error::{Error, Result};
pub use explain::{Attribution, Background, IceResult, ImportanceRanking};
pub use learners::{Classifier, LearnerSpec};
pub use matrix::Matrix;
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use resample::{ResampleMethod, ResampleSpec};
pub use tsne::{Embedding, TsneConfig};
pub use vae::{TrainedVae, VaeArchitecture};
pub use warnings::Warnings;

/// Stable 64-bit FNV-1a hash, used wherever a seed is derived from a name.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Mixes a base seed with a salt (splitmix64 finalizer).
pub(crate) fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

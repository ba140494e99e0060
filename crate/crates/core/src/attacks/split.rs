use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Four disjoint index sets: the target half and the shadow half, each split
/// evenly into members (train) and non-members (test).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipSplit {
    pub target_train: Vec<usize>,
    pub target_test: Vec<usize>,
    pub shadow_train: Vec<usize>,
    pub shadow_test: Vec<usize>,
    /// Samples left out so that the quarters are equal.
    pub dropped: usize,
}

/// Shuffles `0..n` with `seed` and cuts it into quarters. When `n` is not a
/// multiple of 4 the trailing remainder of the shuffle is dropped.
pub fn make_split(n: usize, seed: u64) -> Result<MembershipSplit> {
    if n < 4 {
        return Err(LabError::Input(format!("need at least 4 samples to split, got {n}")));
    }
    let used = n - n % 4;
    let dropped = n - used;
    if dropped > 0 {
        log::warn!("dataset size {n} is not a multiple of 4; dropping {dropped} samples");
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.truncate(used);
    let q = used / 4;
    let mut quarters = order.chunks(q).map(<[usize]>::to_vec);
    let mut next = || quarters.next().expect("four quarters");
    Ok(MembershipSplit {
        target_train: next(),
        target_test: next(),
        shadow_train: next(),
        shadow_test: next(),
        dropped,
    })
}

//! Membership-inference attacks evaluated under the adaptive shadow-model
//! protocol: the attacker replicates the target's recipe on its own data half
//! and fits everything it needs there.

mod auc;
mod metrics;
mod nn_attacker;
mod split;
mod suite;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use auc::{auc, auc_of};
pub use metrics::{entropy_score, gradx_l2_score, gradx_l2_scores, mentropy_score, LOG_EPS};
pub use nn_attacker::{attack_features, train_nn_attacker, AttackerConfig, AttackerNet, MAX_FEATURES};
pub use split::{make_split, MembershipSplit};
pub use suite::{run_attack_suite, AttackOptions, AttackReport, Recipe, TrainedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Nn,
    Entropy,
    MEntropy,
    GradX,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [
        AttackKind::Nn,
        AttackKind::Entropy,
        AttackKind::MEntropy,
        AttackKind::GradX,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AttackKind::Nn => "nn",
            AttackKind::Entropy => "entropy",
            AttackKind::MEntropy => "mentropy",
            AttackKind::GradX => "gradx",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One value per attack.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PerAttack<T> {
    pub nn: T,
    pub entropy: T,
    pub mentropy: T,
    pub gradx: T,
}

impl<T> PerAttack<T> {
    pub fn get(&self, kind: AttackKind) -> &T {
        match kind {
            AttackKind::Nn => &self.nn,
            AttackKind::Entropy => &self.entropy,
            AttackKind::MEntropy => &self.mentropy,
            AttackKind::GradX => &self.gradx,
        }
    }

    pub fn get_mut(&mut self, kind: AttackKind) -> &mut T {
        match kind {
            AttackKind::Nn => &mut self.nn,
            AttackKind::Entropy => &mut self.entropy,
            AttackKind::MEntropy => &mut self.mentropy,
            AttackKind::GradX => &mut self.gradx,
        }
    }

    pub fn try_from_fn<E>(mut f: impl FnMut(AttackKind) -> Result<T, E>) -> Result<Self, E> {
        Ok(PerAttack {
            nn: f(AttackKind::Nn)?,
            entropy: f(AttackKind::Entropy)?,
            mentropy: f(AttackKind::MEntropy)?,
            gradx: f(AttackKind::GradX)?,
        })
    }

    pub fn from_fn(mut f: impl FnMut(AttackKind) -> T) -> Self {
        PerAttack {
            nn: f(AttackKind::Nn),
            entropy: f(AttackKind::Entropy),
            mentropy: f(AttackKind::MEntropy),
            gradx: f(AttackKind::GradX),
        }
    }
}

/// Membership score of one sample; higher means more member-like.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackScore {
    pub sample_id: usize,
    pub score: f64,
    pub is_member: bool,
}

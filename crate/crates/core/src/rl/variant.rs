//! Ablation variants of the training setup.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::PriorKind;
use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// The actor gets no foothold prior; the estimator still regresses it.
    NoPrior,
    /// Yaw-only prior `(psi_t, psi_next)`.
    NoDistance,
    /// Base-frame foothold coordinates regressed and fed to the actor.
    ExplicitCartesian,
    /// Base-frame foothold coordinates regressed as an auxiliary target only.
    ImplicitCartesian,
    /// The actor sees the estimate from the first iteration.
    NoPas,
    /// One critic on the group-weighted reward sum.
    SingleCritic,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoPrior,
        Variant::NoDistance,
        Variant::ExplicitCartesian,
        Variant::ImplicitCartesian,
        Variant::NoPas,
        Variant::SingleCritic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPrior => "no_prior",
            Variant::NoDistance => "no_distance",
            Variant::ExplicitCartesian => "explicit_cartesian",
            Variant::ImplicitCartesian => "implicit_cartesian",
            Variant::NoPas => "no_pas",
            Variant::SingleCritic => "single_critic",
        }
    }

    pub fn prior_kind(self) -> PriorKind {
        match self {
            Variant::NoDistance => PriorKind::YawOnly,
            Variant::ExplicitCartesian | Variant::ImplicitCartesian => PriorKind::Cartesian,
            _ => PriorKind::Polar,
        }
    }

    pub fn prior_to_policy(self) -> bool {
        !matches!(self, Variant::NoPrior | Variant::ImplicitCartesian)
    }

    pub fn anneals(self) -> bool {
        self != Variant::NoPas
    }

    pub fn critics(self) -> usize {
        if self == Variant::SingleCritic {
            1
        } else {
            3
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected one of {})", Variant::ALL.map(|v| v.name()).join(", "))))
    }
}

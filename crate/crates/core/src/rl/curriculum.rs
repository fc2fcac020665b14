//! Per-environment terrain level updates.

use serde::{Deserialize, Serialize};

use crate::sim::Outcome;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    pub enabled: bool,
    pub start_level: usize,
    /// Consecutive falls at one level before demotion.
    pub demote_after: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            start_level: 0,
            demote_after: 2,
        }
    }
}

/// Level and consecutive-fall count after an episode ends with `outcome`.
/// Collisions count as falls; a timeout breaks a fall streak.
pub fn curriculum_step(level: usize, falls: usize, outcome: Outcome, levels: usize, demote_after: usize) -> (usize, usize) {
    let top = levels.saturating_sub(1);
    match outcome {
        Outcome::Finished => ((level + 1).min(top), 0),
        Outcome::Fell | Outcome::Collided => {
            if falls + 1 >= demote_after {
                (level.saturating_sub(1), 0)
            } else {
                (level, falls + 1)
            }
        }
        Outcome::Timeout => (level, 0),
        Outcome::Running => (level, falls),
    }
}

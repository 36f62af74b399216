//! Deterministic 2-D tabletop kitchen: twelve atomic tasks, scripted
//! experts, three 16x16 camera views and demonstration datasets.

pub mod catalog;
pub mod dataset;
pub mod expert;
pub mod render;
pub mod split;
pub mod world;

pub use catalog::{Catalog, Predicate, TaskDef, TaskFamily, TaskSpec, Variant, Zone, OBJECT_NAMES};
pub use dataset::{generate_dataset, read_dataset, DatasetManifest, Trajectory};
pub use expert::Expert;
pub use render::render;
pub use split::{split_eval_variants, EvalSplit, Variation};
pub use world::{reset, step, StepResult, WorldState, EPISODE_CAP};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("unknown object id {0}")]
    UnknownObject(usize),
    #[error("infeasible state: {0}")]
    Infeasible(String),
    #[error("expert failure rate too high on {task}: {failures}/{attempts}")]
    ExpertFailure {
        task: String,
        failures: usize,
        attempts: usize,
    },
    #[error("split error: {0}")]
    Split(String),
    #[error("dataset format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const VIEW_SIDE: usize = 16;
pub const VIEW_PIXELS: usize = VIEW_SIDE * VIEW_SIDE;
pub const NUM_VIEWS: usize = 3;
pub const VIEW_NAMES: [&str; NUM_VIEWS] = ["view_left", "view_right", "view_hand"];
pub const STATE_DIM: usize = 10;
pub const ACTION_DIM: usize = 7;

/// A 16x16 grayscale image stored as 8-bit levels; pixel value is `level / 255`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct View(pub [u8; VIEW_PIXELS]);

impl View {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.0[row * VIEW_SIDE + col] as f64 / 255.0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&l| l as f64 / 255.0).collect()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&l| l as f32 / 255.0).collect()
    }
}

impl std::fmt::Debug for View {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mean = self.0.iter().map(|&l| l as f64).sum::<f64>() / (255.0 * VIEW_PIXELS as f64);
        write!(f, "View(mean={mean:.4})")
    }
}

/// Effector pose, gripper opening, base pose and effector velocity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotState(pub [f64; STATE_DIM]);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub views: [View; NUM_VIEWS],
    pub state: RobotState,
}

impl Observation {
    pub fn view_left(&self) -> &View {
        &self.views[0]
    }
}

/// `[dx, dy, dyaw, 0, 0, 0, gripper]`, every component in [-1, 1].
/// Gripper below -0.5 closes, above 0 opens.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action(pub [f64; ACTION_DIM]);

impl Action {
    pub fn zero() -> Self {
        Self([0.0; ACTION_DIM])
    }

    pub fn delta(&self) -> &[f64] {
        &self.0[..6]
    }

    pub fn gripper(&self) -> f64 {
        self.0[6]
    }

    /// Clamps to [-1, 1] and maps non-finite components to 0.
    pub fn sanitized(&self) -> Self {
        let mut out = *self;
        for (i, v) in out.0.iter_mut().enumerate() {
            if !v.is_finite() {
                log::debug!("action component {i} is not finite, using 0");
                *v = 0.0;
            } else if v.abs() > 1.0 {
                log::trace!("action component {i} = {v} clamped");
                *v = v.clamp(-1.0, 1.0);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sanitize_clamps_and_zeroes_nan() {
        let a = Action([2.0, -3.0, f64::NAN, 0.0, 0.0, 0.0, 0.5]).sanitized();
        assert_eq!(a.0, [1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.5]);
    }
}

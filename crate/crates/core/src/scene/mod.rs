//! Forecasting scenes: loading, validation, normalization, augmentation and
//! synthetic generation.

mod augment;
mod io;
mod normalize;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment, AugConfig};
pub use io::{load_scene, load_scene_str, save_scene, scene_to_csv, scene_to_json, SceneFormat};
pub use normalize::{normalize, Frame, RANGE_LIMIT};
pub use synth::{gen_synthetic, synth_scene, Motion, Profile, SynthParams, SynthSpec};

/// Observed history steps (2 s at 10 Hz).
pub const HISTORY_STEPS: u32 = 20;
/// Future steps to forecast (3 s at 10 Hz).
pub const FUTURE_STEPS: usize = 30;
/// Sampling period in seconds.
pub const STEP_SECONDS: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: u32,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub id: u32,
    pub observations: Vec<Observation>,
}

impl Agent {
    pub fn last(&self) -> Option<&Observation> {
        self.observations.last()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapElement {
    pub id: u32,
    pub points: Vec<[f64; 2]>,
}

/// One forecasting sample as read from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RawScene {
    pub agents: Vec<Agent>,
    pub map: Vec<MapElement>,
    pub target_id: u32,
    pub future: Option<Vec<[f64; 2]>>,
    pub city: String,
}

impl RawScene {
    pub fn target(&self) -> Option<&Agent> {
        self.agents.iter().find(|a| a.id == self.target_id)
    }

    pub fn n_points(&self) -> usize {
        self.agents.iter().map(|a| a.observations.len()).sum::<usize>()
            + self.map.iter().map(|m| m.points.len()).sum::<usize>()
    }

    /// Checks the scene invariants against a history length of `history` steps.
    pub fn validate(&self, history: u32) -> Result<()> {
        let mut ids = std::collections::HashSet::new();
        for agent in &self.agents {
            if !ids.insert(agent.id) {
                return Err(Error::validation(format!("duplicate agent id {}", agent.id)));
            }
            if agent.observations.is_empty() {
                return Err(Error::validation(format!("agent {} has no observations", agent.id)));
            }
            for pair in agent.observations.windows(2) {
                if pair[1].t <= pair[0].t {
                    return Err(Error::validation(format!(
                        "agent {} timestamps not strictly increasing ({} then {})",
                        agent.id, pair[0].t, pair[1].t
                    )));
                }
            }
            if let Some(bad) = agent.observations.iter().find(|o| o.t >= history) {
                return Err(Error::validation(format!(
                    "agent {} has history step {} outside [0, {history})",
                    agent.id, bad.t
                )));
            }
            if agent.observations.iter().any(|o| !(o.x.is_finite() && o.y.is_finite())) {
                return Err(Error::validation(format!(
                    "agent {} has a non-finite coordinate",
                    agent.id
                )));
            }
        }
        let target = self
            .target()
            .ok_or_else(|| Error::validation(format!("no agent carries target id {}", self.target_id)))?;
        if target.last().map(|o| o.t) != Some(history - 1) {
            return Err(Error::validation(format!(
                "target agent {} is not observed at the last history step {}",
                target.id,
                history - 1
            )));
        }
        for element in &self.map {
            if element.points.is_empty() {
                return Err(Error::validation(format!("map element {} is empty", element.id)));
            }
            if element.points.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
                return Err(Error::validation(format!(
                    "map element {} has a non-finite coordinate",
                    element.id
                )));
            }
        }
        if let Some(future) = &self.future {
            if future.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
                return Err(Error::validation("future has a non-finite coordinate"));
            }
        }
        Ok(())
    }

    /// Applies `f` to every coordinate: agent points, map points and the future.
    pub(crate) fn map_points(&mut self, mut f: impl FnMut([f64; 2]) -> [f64; 2]) {
        for agent in &mut self.agents {
            for o in &mut agent.observations {
                let [x, y] = f([o.x, o.y]);
                o.x = x;
                o.y = y;
            }
        }
        for element in &mut self.map {
            for p in &mut element.points {
                *p = f(*p);
            }
        }
        if let Some(future) = &mut self.future {
            for p in future.iter_mut() {
                *p = f(*p);
            }
        }
    }
}

/// A scene expressed in the target-centric frame, with the transform that
/// produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedScene {
    pub scene: RawScene,
    pub frame: Frame,
}

impl NormalizedScene {
    pub fn target(&self) -> Option<&Agent> {
        self.scene.target()
    }
}

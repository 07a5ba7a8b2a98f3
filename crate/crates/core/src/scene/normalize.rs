use serde::{Deserialize, Serialize};

use super::{NormalizedScene, RawScene};
use crate::error::{Error, Result};

/// Half-width of the square crop window around the target, in meters.
pub const RANGE_LIMIT: f64 = 48.0;

/// Rigid transform from world coordinates into the target-centric frame:
/// translate by `-origin`, then rotate by `-rotation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub origin: [f64; 2],
    pub rotation: f64,
}

impl Frame {
    pub fn identity() -> Self {
        Self {
            origin: [0.0, 0.0],
            rotation: 0.0,
        }
    }

    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        let dx = p[0] - self.origin[0];
        let dy = p[1] - self.origin[1];
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn to_world(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation.sin_cos();
        [
            c * p[0] - s * p[1] + self.origin[0],
            s * p[0] + c * p[1] + self.origin[1],
        ]
    }
}

fn in_range(p: [f64; 2]) -> bool {
    p[0].abs() <= RANGE_LIMIT && p[1].abs() <= RANGE_LIMIT
}

/// Centers the scene on the target's last observation, aligns the target's
/// final heading with +x and crops everything outside the range window.
///
/// The future is transformed but never cropped. Agents and map elements that
/// lose every point are removed.
pub fn normalize(scene: &RawScene) -> Result<NormalizedScene> {
    let target = scene
        .target()
        .ok_or_else(|| Error::validation(format!("no agent carries target id {}", scene.target_id)))?;
    let obs = &target.observations;
    let last = *obs
        .last()
        .ok_or_else(|| Error::validation("target agent has no observations"))?;
    let origin = [last.x, last.y];
    let rotation = match obs.len() {
        0 | 1 => 0.0,
        n => {
            let prev = obs[n - 2];
            let (dx, dy) = (last.x - prev.x, last.y - prev.y);
            if dx == 0.0 && dy == 0.0 {
                0.0
            } else {
                dy.atan2(dx)
            }
        }
    };
    let frame = Frame { origin, rotation };

    let mut out = scene.clone();
    out.map_points(|p| frame.to_local(p));
    let target_id = out.target_id;
    for agent in &mut out.agents {
        if agent.id == target_id {
            // the last point is the origin by construction; pin it exactly
            if let Some(l) = agent.observations.last_mut() {
                l.x = 0.0;
                l.y = 0.0;
            }
        }
        agent.observations.retain(|o| in_range([o.x, o.y]));
    }
    out.agents.retain(|a| !a.observations.is_empty());
    for element in &mut out.map {
        element.points.retain(|&p| in_range(p));
    }
    out.map.retain(|m| !m.points.is_empty());
    Ok(NormalizedScene { scene: out, frame })
}

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::NormalizedScene;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugConfig {
    /// Global scale factor range, drawn uniformly.
    pub scale_range: [f64; 2],
    /// Probability that a droppable point survives.
    pub keep_prob: f64,
    /// Standard deviation of the per-coordinate perturbation, meters.
    pub noise_sigma: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            scale_range: [0.8, 1.25],
            keep_prob: 0.9,
            noise_sigma: 0.2,
        }
    }
}

impl AugConfig {
    /// Configuration that leaves scenes untouched.
    pub fn identity() -> Self {
        Self {
            scale_range: [1.0, 1.0],
            keep_prob: 1.0,
            noise_sigma: 0.0,
        }
    }
}

/// Random global scaling, point dropout and coordinate noise.
///
/// The target agent is never dropped or perturbed, and every other agent
/// keeps its last observation. Scaling applies to the future as well.
pub fn augment(scene: &NormalizedScene, seed: u64, config: &AugConfig) -> NormalizedScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [lo, hi] = config.scale_range;
    let s = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let noise = (config.noise_sigma > 0.0).then(|| Normal::new(0.0, config.noise_sigma).expect("sigma is positive"));

    let mut out = scene.clone();
    let raw = &mut out.scene;
    raw.map_points(|p| [p[0] * s, p[1] * s]);

    let target_id = raw.target_id;
    let keep = |rng: &mut ChaCha8Rng| config.keep_prob >= 1.0 || rng.gen_bool(config.keep_prob.max(0.0));
    let perturb = |rng: &mut ChaCha8Rng, p: &mut [f64; 2]| {
        if let Some(n) = &noise {
            p[0] += n.sample(rng);
            p[1] += n.sample(rng);
        }
    };

    for agent in &mut raw.agents {
        if agent.id == target_id {
            continue;
        }
        let last = agent.observations.len() - 1;
        let mut kept = Vec::with_capacity(agent.observations.len());
        for (i, o) in agent.observations.iter().enumerate() {
            if i == last || keep(&mut rng) {
                let mut p = [o.x, o.y];
                perturb(&mut rng, &mut p);
                kept.push(super::Observation {
                    t: o.t,
                    x: p[0],
                    y: p[1],
                });
            }
        }
        agent.observations = kept;
    }
    for element in &mut raw.map {
        let mut kept = Vec::with_capacity(element.points.len());
        for p in &element.points {
            if keep(&mut rng) {
                let mut q = *p;
                perturb(&mut rng, &mut q);
                kept.push(q);
            }
        }
        element.points = kept;
    }
    raw.map.retain(|m| !m.points.is_empty());
    out
}

//! Synthetic scenes with kinematically consistent futures.
//!
//! The target's path is generated in a local frame where its last history
//! observation sits at time zero, then the whole scene is placed in the
//! world by a rigid pose. Lanes follow the same road geometry as the target
//! (a straight road, or an arc for turning targets).

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Agent, Frame, MapElement, Observation, RawScene, FUTURE_STEPS, HISTORY_STEPS, STEP_SECONDS};

const LANE_WIDTH: f64 = 3.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Straight,
    Turn,
    LaneChange,
    Mixed,
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "straight" => Ok(Self::Straight),
            "turn" => Ok(Self::Turn),
            "lane-change" => Ok(Self::LaneChange),
            "mixed" => Ok(Self::Mixed),
            other => Err(format!("unknown profile `{other}`")),
        }
    }
}

/// Target kinematics, expressed relative to the last history step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Motion {
    Straight {
        speed: f64,
    },
    /// Constant speed and yaw rate (rad/s, nonzero).
    Turn {
        speed: f64,
        yaw_rate: f64,
    },
    /// Smooth lateral shift of `offset` meters starting `start` seconds
    /// after the last history step and lasting `duration` seconds.
    LaneChange {
        speed: f64,
        offset: f64,
        start: f64,
        duration: f64,
    },
}

impl Motion {
    pub fn speed(&self) -> f64 {
        match *self {
            Motion::Straight { speed } | Motion::Turn { speed, .. } | Motion::LaneChange { speed, .. } => speed,
        }
    }

    /// Local position at `tau` seconds after the last history step.
    pub fn position(&self, tau: f64) -> [f64; 2] {
        match *self {
            Motion::Straight { speed } => [speed * tau, 0.0],
            Motion::Turn { speed, yaw_rate } => {
                let r = speed / yaw_rate;
                let th = yaw_rate * tau;
                [r * th.sin(), r * (1.0 - th.cos())]
            }
            Motion::LaneChange {
                speed,
                offset,
                start,
                duration,
            } => {
                let u = ((tau - start) / duration).clamp(0.0, 1.0);
                [speed * tau, offset * u * u * (3.0 - 2.0 * u)]
            }
        }
    }

    fn curvature(&self) -> f64 {
        match *self {
            Motion::Turn { speed, yaw_rate } => yaw_rate / speed,
            _ => 0.0,
        }
    }
}

/// Generator knobs that are not part of the target's kinematics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    /// Gaussian noise on observed history points, meters.
    pub history_noise: f64,
    /// Spacing between consecutive map polyline points, meters.
    pub map_spacing: f64,
    /// Arc-length window covered by map polylines, meters along the road.
    pub map_extent: [f64; 2],
    pub speed_range: [f64; 2],
    /// Range of |yaw rate| for turning targets, rad/s.
    pub yaw_rate_range: [f64; 2],
    /// Place each scene at a random world pose.
    pub random_pose: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            history_noise: 0.05,
            map_spacing: 2.0,
            map_extent: [-35.0, 50.0],
            speed_range: [5.0, 14.0],
            yaw_rate_range: [0.15, 0.35],
            random_pose: true,
        }
    }
}

/// Everything needed to realize one scene deterministically.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub motion: Motion,
    pub pose: Frame,
    pub n_other_agents: usize,
    pub n_map_lines: usize,
}

fn road_point(curvature: f64, s: f64, d: f64) -> [f64; 2] {
    if curvature.abs() < 1e-12 {
        return [s, d];
    }
    let th = curvature * s;
    [
        th.sin() / curvature - d * th.sin(),
        (1.0 - th.cos()) / curvature + d * th.cos(),
    ]
}

fn step_tau(step: i64) -> f64 {
    (step - (HISTORY_STEPS as i64 - 1)) as f64 * STEP_SECONDS
}

/// Realizes one scene. Observation noise and the other agents and lanes are
/// drawn from `rng`; the target's future is noise-free.
pub fn synth_scene<R: Rng>(params: &SynthParams, spec: &SynthSpec, rng: &mut R) -> RawScene {
    let motion = params.motion;
    let noise = (spec.history_noise > 0.0).then(|| Normal::new(0.0, spec.history_noise).expect("positive sigma"));
    let jitter = |rng: &mut R| noise.as_ref().map_or(0.0, |n| n.sample(rng));
    let place = |p: [f64; 2]| params.pose.to_world(p);
    let kappa = motion.curvature();

    let target_id = 1000;
    let mut agents = vec![Agent {
        id: target_id,
        observations: (0..HISTORY_STEPS)
            .map(|t| {
                let p = motion.position(step_tau(t as i64));
                let [x, y] = place([p[0] + jitter(rng), p[1] + jitter(rng)]);
                Observation { t, x, y }
            })
            .collect(),
    }];
    let future: Vec<[f64; 2]> = (0..FUTURE_STEPS as i64)
        .map(|i| place(motion.position(step_tau(HISTORY_STEPS as i64 + i))))
        .collect();

    let mut lanes = vec![0.0];
    if let Motion::LaneChange { offset, .. } = motion {
        lanes.push(offset);
    }
    let candidates = [
        LANE_WIDTH,
        -LANE_WIDTH,
        2.0 * LANE_WIDTH,
        -2.0 * LANE_WIDTH,
        3.0 * LANE_WIDTH,
    ];
    let mut pool: Vec<f64> = candidates.iter().copied().filter(|c| !lanes.contains(c)).collect();
    while lanes.len() < params.n_map_lines.max(1) && !pool.is_empty() {
        let i = rng.gen_range(0..pool.len());
        lanes.push(pool.swap_remove(i));
    }
    lanes.truncate(params.n_map_lines.max(1));

    let map = lanes
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let n = ((spec.map_extent[1] - spec.map_extent[0]) / spec.map_spacing).floor() as usize + 1;
            MapElement {
                id: 500 + i as u32,
                points: (0..n)
                    .map(|k| place(road_point(kappa, spec.map_extent[0] + k as f64 * spec.map_spacing, d)))
                    .collect(),
            }
        })
        .collect();

    for a in 0..params.n_other_agents {
        let d = lanes[rng.gen_range(0..lanes.len())];
        let speed = rng.gen_range(spec.speed_range[0]..=spec.speed_range[1]);
        let mut s0 = rng.gen_range(-25.0..30.0);
        if d == 0.0 && f64::abs(s0) < 8.0 {
            s0 += 16.0_f64.copysign(s0);
        }
        let first = if rng.gen_bool(0.5) {
            0
        } else {
            rng.gen_range(1..HISTORY_STEPS)
        };
        agents.push(Agent {
            id: 2000 + a as u32,
            observations: (first..HISTORY_STEPS)
                .map(|t| {
                    let s = s0 + speed * step_tau(t as i64);
                    let p = road_point(kappa, s, d);
                    let [x, y] = place([p[0] + jitter(rng), p[1] + jitter(rng)]);
                    Observation { t, x, y }
                })
                .collect(),
        });
    }

    RawScene {
        agents,
        map,
        target_id,
        future: Some(future),
        city: if rng.gen_bool(0.5) { "PIT".into() } else { "MIA".into() },
    }
}

fn draw_params<R: Rng>(profile: Profile, spec: &SynthSpec, rng: &mut R) -> SynthParams {
    let profile = match profile {
        Profile::Mixed => [Profile::Straight, Profile::Turn, Profile::LaneChange][rng.gen_range(0..3)],
        p => p,
    };
    let speed = rng.gen_range(spec.speed_range[0]..=spec.speed_range[1]);
    let motion = match profile {
        Profile::Straight | Profile::Mixed => Motion::Straight { speed },
        Profile::Turn => {
            let w = rng.gen_range(spec.yaw_rate_range[0]..=spec.yaw_rate_range[1]);
            Motion::Turn {
                speed,
                yaw_rate: if rng.gen_bool(0.5) { w } else { -w },
            }
        }
        Profile::LaneChange => Motion::LaneChange {
            speed,
            offset: if rng.gen_bool(0.5) { LANE_WIDTH } else { -LANE_WIDTH },
            start: rng.gen_range(-1.5..0.5),
            duration: rng.gen_range(3.0..4.0),
        },
    };
    let pose = if spec.random_pose {
        Frame {
            origin: [rng.gen_range(-1000.0..1000.0), rng.gen_range(-1000.0..1000.0)],
            rotation: rng.gen_range(-PI..PI),
        }
    } else {
        Frame::identity()
    };
    SynthParams {
        motion,
        pose,
        n_other_agents: rng.gen_range(1..=4),
        n_map_lines: rng.gen_range(2..=6),
    }
}

/// `n_scenes` scenes drawn from `profile`, bit-identical for a given seed.
pub fn gen_synthetic(n_scenes: usize, seed: u64, profile: Profile, spec: &SynthSpec) -> Vec<RawScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_scenes)
        .map(|_| {
            let params = draw_params(profile, spec, &mut rng);
            synth_scene(&params, spec, &mut rng)
        })
        .collect()
}

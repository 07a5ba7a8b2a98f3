//! Displacement metrics over ranked multi-modal predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{rank_trajectories, PredictionSet};
use crate::scene::NormalizedScene;

/// Endpoint error above which a prediction counts as a miss, meters.
pub const MISS_THRESHOLD: f64 = 2.0;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn check_lengths(traj: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<()> {
    if traj.len() != gt.len() || gt.is_empty() {
        return Err(Error::shape(format!(
            "trajectory has {} steps, ground truth {}",
            traj.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Mean Euclidean distance over all steps.
pub fn ade(traj: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64> {
    check_lengths(traj, gt)?;
    Ok(traj.iter().zip(gt).map(|(a, b)| dist(*a, *b)).sum::<f64>() / gt.len() as f64)
}

/// Euclidean distance at the last step.
pub fn fde(traj: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64> {
    check_lengths(traj, gt)?;
    Ok(dist(traj[traj.len() - 1], gt[gt.len() - 1]))
}

/// Best-of-top-K errors for one scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneScore {
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss: bool,
}

/// Scores the `k` lowest-displacement trajectories of `pred` against `gt`.
pub fn score_scene(pred: &PredictionSet, gt: &[[f64; 2]], k: usize, miss_threshold: f64) -> Result<SceneScore> {
    if k == 0 || k > pred.trajectories.len() {
        return Err(Error::validation(format!(
            "cannot take top {k} of {} trajectories",
            pred.trajectories.len()
        )));
    }
    let mut min_ade = f64::INFINITY;
    let mut min_fde = f64::INFINITY;
    for &i in rank_trajectories(&pred.displacements).iter().take(k) {
        min_ade = min_ade.min(ade(&pred.trajectories[i], gt)?);
        min_fde = min_fde.min(fde(&pred.trajectories[i], gt)?);
    }
    Ok(SceneScore {
        min_ade,
        min_fde,
        miss: min_fde > miss_threshold,
    })
}

/// Scene-averaged metrics for one K.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopKMetrics {
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
}

pub fn evaluate(preds: &[PredictionSet], gts: &[Vec<[f64; 2]>], k: usize, miss_threshold: f64) -> Result<TopKMetrics> {
    if preds.is_empty() {
        return Err(Error::validation("no scenes to evaluate"));
    }
    if preds.len() != gts.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let scores = preds
        .iter()
        .zip(gts)
        .map(|(p, gt)| score_scene(p, gt, k, miss_threshold))
        .collect::<Result<Vec<_>>>()?;
    Ok(average(&scores))
}

fn average(scores: &[SceneScore]) -> TopKMetrics {
    let n = scores.len() as f64;
    TopKMetrics {
        min_ade: scores.iter().map(|s| s.min_ade).sum::<f64>() / n,
        min_fde: scores.iter().map(|s| s.min_fde).sum::<f64>() / n,
        miss_rate: scores.iter().filter(|s| s.miss).count() as f64 / n,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "minADE_1")]
    pub min_ade_1: f64,
    #[serde(rename = "minFDE_1")]
    pub min_fde_1: f64,
    #[serde(rename = "MR_1")]
    pub mr_1: f64,
    #[serde(rename = "minADE_6")]
    pub min_ade_6: f64,
    #[serde(rename = "minFDE_6")]
    pub min_fde_6: f64,
    #[serde(rename = "MR_6")]
    pub mr_6: f64,
    pub n_scenes: usize,
}

/// Top-1 and top-6 metrics. With fewer than six modes the top-6 columns
/// use every available trajectory.
pub fn evaluate_report(preds: &[PredictionSet], gts: &[Vec<[f64; 2]>]) -> Result<EvalReport> {
    let modes = preds.iter().map(|p| p.trajectories.len()).min().unwrap_or(0);
    let one = evaluate(preds, gts, 1, MISS_THRESHOLD)?;
    let six = evaluate(preds, gts, modes.min(6), MISS_THRESHOLD)?;
    Ok(EvalReport {
        min_ade_1: one.min_ade,
        min_fde_1: one.min_fde,
        mr_1: one.miss_rate,
        min_ade_6: six.min_ade,
        min_fde_6: six.min_fde,
        mr_6: six.miss_rate,
        n_scenes: preds.len(),
    })
}

/// One CSV row per scene with top-1 and top-6 scores.
pub fn per_scene_csv(names: &[String], preds: &[PredictionSet], gts: &[Vec<[f64; 2]>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record([
        "scene", "minADE_1", "minFDE_1", "miss_1", "minADE_6", "minFDE_6", "miss_6",
    ])
    .map_err(io)?;
    for ((name, p), gt) in names.iter().zip(preds).zip(gts) {
        let one = score_scene(p, gt, 1, MISS_THRESHOLD)?;
        let six = score_scene(p, gt, p.trajectories.len().min(6), MISS_THRESHOLD)?;
        w.write_record([
            name.clone(),
            one.min_ade.to_string(),
            one.min_fde.to_string(),
            u8::from(one.miss).to_string(),
            six.min_ade.to_string(),
            six.min_fde.to_string(),
            u8::from(six.miss).to_string(),
        ])
        .map_err(io)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Extrapolates the target's last observed velocity over `horizon` steps.
pub fn constant_velocity(scene: &NormalizedScene, horizon: usize) -> Result<Vec<[f64; 2]>> {
    let target = scene
        .target()
        .ok_or_else(|| Error::validation("scene has no target agent"))?;
    let obs = &target.observations;
    let last = obs[obs.len() - 1];
    let velocity = match obs.len() {
        1 => [0.0, 0.0],
        n => {
            let prev = obs[n - 2];
            let dt = (last.t - prev.t) as f64;
            [(last.x - prev.x) / dt, (last.y - prev.y) / dt]
        }
    };
    Ok((1..=horizon)
        .map(|s| [last.x + velocity[0] * s as f64, last.y + velocity[1] * s as f64])
        .collect())
}

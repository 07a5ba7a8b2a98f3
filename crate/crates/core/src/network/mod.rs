//! Full forecasting model: point embedding, alternating spatial and temporal
//! stages, target pooling, and the trajectory and displacement heads.

mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, ParamStore, Var};
use crate::error::{Error, Result};
use crate::indexing::{GroupTable, IndexedPointSet, PointKind};
use crate::nn::Mlp;
use crate::scene::{NormalizedScene, HISTORY_STEPS};
use crate::spatial::{SpatialBlock, SpatialContext, SpatialWidths};
use crate::temporal::{TemporalBlock, TemporalContext, TemporalWidths};

pub use train::{lr_at_epoch, train, EpochLog, TrainConfig, TrainState, TrainingScene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_stages: usize,
    pub intervals: Vec<u32>,
    pub radii: Vec<f64>,
    pub grid_size: f64,
    /// Number of predicted trajectories.
    pub modes: usize,
    /// Predicted future steps.
    pub horizon: usize,
    pub embed_width: usize,
    pub spatial: SpatialWidths,
    pub temporal: TemporalWidths,
    pub head_hidden: usize,
    pub loss_weight_disp: f64,
    pub smooth_l1_beta: f64,
    /// Meters per unit of network activation, applied to input coordinates
    /// and to both heads' outputs.
    pub coord_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_stages: 4,
            intervals: vec![2, 4, 6, 8, 16],
            radii: vec![0.2, 0.4, 0.8, 1.6],
            grid_size: 0.2,
            modes: 6,
            horizon: 30,
            embed_width: 32,
            spatial: SpatialWidths::default(),
            temporal: TemporalWidths::default(),
            head_hidden: 128,
            loss_weight_disp: 1.0,
            smooth_l1_beta: 1.0,
            coord_scale: 10.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.modes == 0 || self.horizon == 0 || self.n_stages == 0 {
            return bad(format!(
                "modes ({}), horizon ({}) and n_stages ({}) must be positive",
                self.modes, self.horizon, self.n_stages
            ));
        }
        if !(self.grid_size > 0.0 && self.grid_size.is_finite()) {
            return bad(format!("grid_size must be positive, got {}", self.grid_size));
        }
        if self.intervals.is_empty() || self.intervals.contains(&0) {
            return bad(format!(
                "intervals must be nonempty and positive, got {:?}",
                self.intervals
            ));
        }
        if self.radii.is_empty() || self.radii.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return bad(format!("radii must be nonempty and positive, got {:?}", self.radii));
        }
        if self.radii.windows(2).any(|w| w[1] < w[0]) {
            return bad(format!("radii must be ascending, got {:?}", self.radii));
        }
        if !(self.coord_scale > 0.0 && self.coord_scale.is_finite()) {
            return bad(format!("coord_scale must be positive, got {}", self.coord_scale));
        }
        if self.smooth_l1_beta.is_nan()
            || self.smooth_l1_beta <= 0.0
            || self.loss_weight_disp.is_nan()
            || self.loss_weight_disp < 0.0
        {
            return bad("smooth_l1_beta must be positive and loss_weight_disp non-negative".into());
        }
        let widths = [
            self.embed_width,
            self.head_hidden,
            self.spatial.radius_mlp,
            self.spatial.point_out,
            self.spatial.voxel,
            self.spatial.bottleneck_mid,
            self.spatial.bottleneck_blocks,
            self.spatial.interp_hidden,
            self.spatial.out,
            self.temporal.interval_mlp,
            self.temporal.pool_mlp,
            self.temporal.pool_out,
            self.temporal.out,
        ];
        if widths.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        Ok(())
    }
}

/// `K` trajectories of `T` points each, plus each one's predicted endpoint error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub trajectories: Vec<Vec<[f64; 2]>>,
    pub displacements: Vec<f64>,
}

impl PredictionSet {
    /// Unpacks flat head outputs laid out as `[k][t][x, y]`.
    pub fn from_flat(reg: &[f64], disp: &[f64], horizon: usize) -> Result<Self> {
        if reg.len() != disp.len() * horizon * 2 {
            return Err(Error::shape(format!(
                "{} regression values for {} modes of {horizon} steps",
                reg.len(),
                disp.len()
            )));
        }
        Ok(Self {
            trajectories: reg
                .chunks(horizon * 2)
                .map(|t| t.chunks(2).map(|p| [p[0], p[1]]).collect())
                .collect(),
            displacements: disp.to_vec(),
        })
    }

    pub fn modes(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_finite(&self) -> bool {
        self.displacements.iter().all(|d| d.is_finite())
            && self
                .trajectories
                .iter()
                .flatten()
                .all(|p| p[0].is_finite() && p[1].is_finite())
    }
}

/// Graph handles for one scene's head outputs, in meters.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// `1 × (K·T·2)`, laid out as `[k][t][x, y]`.
    pub reg: Var,
    /// `1 × K`.
    pub disp: Var,
}

/// Per-scene geometry needed by a forward pass.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub points: IndexedPointSet,
    pub spatial: SpatialContext,
    pub temporal: TemporalContext,
    pub target_rows: Vec<usize>,
    pub inputs: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: Mlp,
    pub stages: Vec<(SpatialBlock, TemporalBlock)>,
    pub reg_head: Mlp,
    pub disp_head: Mlp,
}

/// Per-point input features: position, one-hot kind, and time as a
/// fraction of the history.
pub const INPUT_WIDTH: usize = 6;

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let embed = Mlp::new("embed", &[INPUT_WIDTH, config.embed_width, config.embed_width], true);
        let mut stages = Vec::with_capacity(config.n_stages);
        let mut width = config.embed_width;
        for s in 0..config.n_stages {
            let spatial = SpatialBlock::new(&format!("stage{s}.spatial"), width, config.radii.len(), &config.spatial);
            let temporal = TemporalBlock::new(
                &format!("stage{s}.temporal"),
                spatial.out_dim(),
                config.intervals.len(),
                &config.temporal,
            );
            width = temporal.out_dim();
            stages.push((spatial, temporal));
        }
        let reg_head = Mlp::new(
            "head.reg",
            &[width, config.head_hidden, config.modes * config.horizon * 2],
            false,
        );
        let disp_head = Mlp::new("head.disp", &[width, config.head_hidden, config.modes], false);
        Ok(Self {
            config,
            embed,
            stages,
            reg_head,
            disp_head,
        })
    }

    /// Freshly initialized parameters, identical for identical seeds.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.embed.init(&mut store, &mut rng);
        for (s, t) in &self.stages {
            s.init(&mut store, &mut rng);
            t.init(&mut store, &mut rng);
        }
        self.reg_head.init(&mut store, &mut rng);
        self.disp_head.init(&mut store, &mut rng);
        store
    }

    pub fn prepare(&self, scene: &NormalizedScene) -> Result<PreparedScene> {
        let points = IndexedPointSet::from_scene(scene, self.config.grid_size)?;
        self.prepare_points(points)
    }

    pub fn prepare_points(&self, points: IndexedPointSet) -> Result<PreparedScene> {
        let target_rows: Vec<usize> = (0..points.len())
            .filter(|&i| points.kind[i] == PointKind::TargetAgent)
            .collect();
        if target_rows.is_empty() {
            return Err(Error::validation("scene has no target agent points"));
        }
        let cs = self.config.coord_scale;
        let mut data = Vec::with_capacity(points.len() * INPUT_WIDTH);
        for i in 0..points.len() {
            let p = points.points[i];
            data.extend_from_slice(&[p[0] / cs, p[1] / cs]);
            data.extend_from_slice(&points.kind[i].one_hot());
            data.push(points.itx[i].time as f64 / HISTORY_STEPS as f64);
        }
        let inputs = Matrix::new(points.len(), INPUT_WIDTH, data)?;
        Ok(PreparedScene {
            spatial: SpatialContext::new(&points, &self.config.radii)?,
            temporal: TemporalContext::new(&points, &self.config.intervals)?,
            points,
            target_rows,
            inputs,
        })
    }

    /// Final per-point features, before pooling.
    pub fn point_features(&self, g: &mut Graph, store: &ParamStore, prep: &PreparedScene) -> Result<Var> {
        let x = g.constant(prep.inputs.clone());
        let mut h = self.embed.forward(g, store, x)?;
        for (spatial, temporal) in &self.stages {
            h = spatial.forward(g, store, &prep.spatial, h)?;
            h = temporal.forward(g, store, &prep.temporal, h)?;
        }
        Ok(h)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, prep: &PreparedScene) -> Result<HeadOutputs> {
        let h = self.point_features(g, store, prep)?;
        let target = g.gather_rows(h, &prep.target_rows)?;
        let pooled = g.scatter_mean(target, &GroupTable::single(prep.target_rows.len()))?;
        let reg = self.reg_head.forward(g, store, pooled)?;
        let disp = self.disp_head.forward(g, store, pooled)?;
        Ok(HeadOutputs {
            reg: g.scale(reg, self.config.coord_scale),
            disp: g.scale(disp, self.config.coord_scale),
        })
    }

    pub fn predictions(&self, g: &Graph, out: HeadOutputs) -> Result<PredictionSet> {
        PredictionSet::from_flat(g.value(out.reg).data(), g.value(out.disp).data(), self.config.horizon)
    }

    /// Forward pass without gradients.
    pub fn predict(&self, store: &ParamStore, scene: &NormalizedScene) -> Result<PredictionSet> {
        let prep = self.prepare(scene)?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, &prep)?;
        self.predictions(&g, out)
    }

    /// Total loss for one scene with ground truth `gt`.
    pub fn loss(&self, g: &mut Graph, out: HeadOutputs, gt: &[[f64; 2]]) -> Result<LossTerms> {
        let pred = self.predictions(g, out)?;
        let best = select_best(&pred, gt)?;
        let beta = self.config.smooth_l1_beta;
        let reg = loss_reg(g, out.reg, gt, best, beta)?;
        let disp = loss_disp(g, out.disp, &pred, gt, beta)?;
        let total = total_loss(g, reg, disp, self.config.loss_weight_disp)?;
        Ok(LossTerms {
            reg,
            disp,
            total,
            best,
            prediction: pred,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LossTerms {
    pub reg: Var,
    pub disp: Var,
    pub total: Var,
    pub best: usize,
    /// Head outputs the loss was computed from.
    pub prediction: PredictionSet,
}

fn endpoint_errors(pred: &PredictionSet, gt: &[[f64; 2]]) -> Result<Vec<f64>> {
    let end = *gt.last().ok_or_else(|| Error::shape("empty ground truth"))?;
    pred.trajectories
        .iter()
        .map(|t| {
            if t.len() != gt.len() {
                return Err(Error::shape(format!(
                    "trajectory of {} steps vs ground truth {}",
                    t.len(),
                    gt.len()
                )));
            }
            let p = t[t.len() - 1];
            Ok(((p[0] - end[0]).powi(2) + (p[1] - end[1]).powi(2)).sqrt())
        })
        .collect()
}

/// Index of the trajectory whose endpoint is closest to the ground truth's;
/// ties go to the lowest index.
pub fn select_best(pred: &PredictionSet, gt: &[[f64; 2]]) -> Result<usize> {
    let errors = endpoint_errors(pred, gt)?;
    let mut best = 0;
    for (k, e) in errors.iter().enumerate() {
        if *e < errors[best] {
            best = k;
        }
    }
    Ok(best)
}

/// `(1/T) Σ_t ρ(x − x_gt) + ρ(y − y_gt)` over trajectory `best` only.
pub fn loss_reg(g: &mut Graph, reg: Var, gt: &[[f64; 2]], best: usize, beta: f64) -> Result<Var> {
    let width = gt.len() * 2;
    let slice = g.slice_cols(reg, best * width, (best + 1) * width)?;
    let target = Matrix::new(1, width, gt.iter().flatten().copied().collect())?;
    let mean = g.smooth_l1(slice, &target, beta)?;
    Ok(g.scale(mean, 2.0))
}

/// Mean smooth-L1 between predicted displacements and the actual endpoint
/// errors of `pred`, which enter as constants.
pub fn loss_disp(g: &mut Graph, disp: Var, pred: &PredictionSet, gt: &[[f64; 2]], beta: f64) -> Result<Var> {
    let errors = endpoint_errors(pred, gt)?;
    let target = Matrix::new(1, errors.len(), errors)?;
    g.smooth_l1(disp, &target, beta)
}

pub fn total_loss(g: &mut Graph, reg: Var, disp: Var, disp_weight: f64) -> Result<Var> {
    let weighted = g.scale(disp, disp_weight);
    g.add(reg, weighted)
}

/// Trajectory indices ordered by ascending predicted displacement; equal
/// values keep their original order.
pub fn rank_trajectories(displacements: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..displacements.len()).collect();
    order.sort_by(|&a, &b| displacements[a].total_cmp(&displacements[b]));
    order
}

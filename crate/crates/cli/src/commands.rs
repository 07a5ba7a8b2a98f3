use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tpcn_core::autodiff::ParamStore;
use tpcn_core::checkpoint::{self, Checkpoint};
use tpcn_core::metrics::{evaluate_report, per_scene_csv, EvalReport};
use tpcn_core::network::{rank_trajectories, train, Model, ModelConfig, PredictionSet, TrainState, TrainingScene};
use tpcn_core::scene::{
    gen_synthetic, load_scene, normalize, save_scene, Frame, Profile, RawScene, SceneFormat, SynthSpec,
};

use crate::config::{resolve_seed, RunConfig};
use crate::error::{CliError, CliResult};
use crate::plot::render_svg;

/// Name of the listing written next to generated scenes; never read as a scene.
pub const DATASET_MANIFEST: &str = "manifest.json";
/// Checkpoint subdirectory that always holds the most recent epoch.
pub const LATEST: &str = "latest";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub profile: Profile,
    pub seed: u64,
    pub scenes: Vec<String>,
}

pub fn cmd_gen_synthetic(out: &Path, n: usize, seed: Option<u64>, profile: Profile) -> CliResult<DatasetManifest> {
    let seed = resolve_seed(seed, None)?;
    fs::create_dir_all(out)?;
    let width = n.saturating_sub(1).to_string().len().max(4);
    let mut names = Vec::with_capacity(n);
    for (i, scene) in gen_synthetic(n, seed, profile, &SynthSpec::default())
        .iter()
        .enumerate()
    {
        let name = format!("scene_{i:0width$}.json");
        save_scene(&out.join(&name), scene, SceneFormat::Json)?;
        names.push(name);
    }
    let manifest = DatasetManifest {
        profile,
        seed,
        scenes: names,
    };
    write_json(&out.join(DATASET_MANIFEST), &manifest)?;
    Ok(manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_scene_file(path: &Path) -> CliResult<RawScene> {
    let format = SceneFormat::from_path(path)
        .ok_or_else(|| CliError::Input(format!("{}: expected a .json or .csv scene", path.display())))?;
    Ok(load_scene(path, format)?)
}

/// Every scene file in `dir`, sorted by file name.
pub fn load_dataset(dir: &Path) -> CliResult<Vec<(String, RawScene)>> {
    if !dir.is_dir() {
        return Err(CliError::Input(format!(
            "data directory {} does not exist",
            dir.display()
        )));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    paths.retain(|p| {
        p.is_file() && SceneFormat::from_path(p).is_some() && p.file_name().is_some_and(|n| n != DATASET_MANIFEST)
    });
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Input(format!("no scene files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let name = p.file_name().expect("filtered above").to_string_lossy().into_owned();
            let scene = load_scene_file(p).map_err(|e| CliError::Input(format!("{name}: {e}")))?;
            Ok((name, scene))
        })
        .collect()
}

/// Parameters of `model` filled from `source`; any missing or misshapen
/// parameter is a checkpoint error naming it.
pub fn restore_params(model: &Model, source: &ParamStore) -> CliResult<ParamStore> {
    let mut params = model.init_params(0);
    params.load_from(source)?;
    Ok(params)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOverrides {
    pub data_dir: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<u32>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
}

impl TrainOverrides {
    pub fn apply(&self, config: &mut RunConfig) {
        if let Some(d) = &self.data_dir {
            config.data_dir = Some(d.clone());
        }
        if let Some(d) = &self.checkpoint_dir {
            config.checkpoint_dir = Some(d.clone());
        }
        if let Some(p) = &self.log_path {
            config.log_path = Some(p.clone());
        }
        if let Some(s) = self.seed {
            config.seed = Some(s);
        }
        if let Some(e) = self.epochs {
            config.train.epochs = e;
        }
        if let Some(lr) = self.lr {
            config.train.lr = lr;
        }
        if let Some(b) = self.batch_size {
            config.train.batch_size = b;
        }
    }
}

/// Trains from scratch or from `resume`. After every epoch the state goes to
/// `<checkpoint_dir>/latest`, and to `<checkpoint_dir>/epoch-NNNN` when the
/// epoch falls on the snapshot schedule.
pub fn cmd_train(config_path: &Path, resume: Option<&Path>, overrides: &TrainOverrides) -> CliResult<TrainState> {
    let mut config = RunConfig::load(config_path)?;
    overrides.apply(&mut config);
    config.train.validate()?;
    let seed = resolve_seed(None, config.seed)?;
    let data_dir = config
        .data_dir
        .clone()
        .ok_or_else(|| CliError::Config("data_dir is not set".into()))?;
    let ckpt_dir = config
        .checkpoint_dir
        .clone()
        .ok_or_else(|| CliError::Config("checkpoint_dir is not set".into()))?;

    let data = load_dataset(&data_dir)?
        .into_iter()
        .map(|(name, raw)| {
            let scene = normalize(&raw).map_err(|e| CliError::Input(format!("{name}: {e}")))?;
            Ok(TrainingScene { name, scene })
        })
        .collect::<CliResult<Vec<_>>>()?;

    let model = Model::new(config.model.clone())?;
    let mut state = match resume {
        Some(dir) => {
            let ckpt = checkpoint::load(dir)?;
            let params = restore_params(&model, &ckpt.state.params)?;
            if ckpt.model != config.model {
                return Err(tpcn_core::Error::Checkpoint {
                    param: "model".into(),
                    message: "model config differs from the one the checkpoint was trained with".into(),
                }
                .into());
            }
            TrainState { params, ..ckpt.state }
        }
        None => TrainState::new(model.init_params(seed)),
    };

    let mut log = match &config.log_path {
        Some(p) => {
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent)?;
            }
            let mut opts = OpenOptions::new();
            opts.create(true);
            if resume.is_some() {
                opts.append(true);
            } else {
                opts.write(true).truncate(true);
            }
            Some(opts.open(p)?)
        }
        None => None,
    };

    train(&model, &mut state, &data, &config.train, seed, |line, state| {
        let ckpt = Checkpoint {
            model: config.model.clone(),
            state: state.clone(),
        };
        let keep = config
            .checkpoint_every
            .is_none_or(|k| state.epoch % k == 0 || state.epoch == config.train.epochs);
        if keep {
            checkpoint::save(&ckpt_dir.join(format!("epoch-{:04}", state.epoch)), &ckpt)?;
        }
        checkpoint::save(&ckpt_dir.join(LATEST), &ckpt)?;
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", serde_json::to_string(line)?)?;
        }
        eprintln!(
            "epoch {:>3}  lr {:.2e}  loss {:.4}  minADE6 {:.3}  minFDE6 {:.3}  MR6 {:.3}  ({:.1}s)",
            line.epoch, line.lr, line.train_loss, line.min_ade6, line.min_fde6, line.mr6, line.wall_seconds
        );
        Ok(())
    })?;
    Ok(state)
}

/// Model config and parameters for inference: from `config` if given,
/// otherwise from the checkpoint's own manifest.
fn inference_model(ckpt_dir: &Path, config: Option<&ModelConfig>) -> CliResult<(Model, ParamStore)> {
    let ckpt = checkpoint::load(ckpt_dir)?;
    let model = Model::new(config.cloned().unwrap_or(ckpt.model))?;
    let params = restore_params(&model, &ckpt.state.params)?;
    Ok((model, params))
}

pub fn cmd_eval(
    config_path: Option<&Path>,
    ckpt_dir: &Path,
    data_dir: &Path,
    per_scene: Option<&Path>,
) -> CliResult<EvalReport> {
    let config = config_path.map(RunConfig::load).transpose()?;
    let (model, params) = inference_model(ckpt_dir, config.as_ref().map(|c| &c.model))?;
    let data = load_dataset(data_dir)?;
    let mut names = Vec::with_capacity(data.len());
    let mut preds = Vec::with_capacity(data.len());
    let mut gts = Vec::with_capacity(data.len());
    for (name, raw) in data {
        let scene = normalize(&raw).map_err(|e| CliError::Input(format!("{name}: {e}")))?;
        let gt = match &scene.scene.future {
            Some(f) if f.len() == model.config.horizon => f.clone(),
            Some(f) => {
                return Err(CliError::Input(format!(
                    "{name}: {} future steps, model predicts {}",
                    f.len(),
                    model.config.horizon
                )))
            }
            None => return Err(CliError::Input(format!("{name}: no ground-truth future"))),
        };
        preds.push(model.predict(&params, &scene)?);
        gts.push(gt);
        names.push(name);
    }
    if let Some(path) = per_scene {
        fs::write(path, per_scene_csv(&names, &preds, &gts)?)?;
    }
    Ok(evaluate_report(&preds, &gts)?)
}

/// Ranked forecasts for one scene in world coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionFile {
    pub target_id: u32,
    /// Transform from world into the target-centric frame the model saw.
    pub frame: Frame,
    pub horizon: usize,
    /// Best first, by ascending predicted endpoint error.
    pub trajectories: Vec<Vec<[f64; 2]>>,
    pub displacements: Vec<f64>,
    /// Output slot of the model that produced each ranked trajectory.
    pub model_index: Vec<usize>,
}

impl PredictionFile {
    pub fn from_prediction(target_id: u32, frame: Frame, pred: &PredictionSet) -> Self {
        let order = rank_trajectories(&pred.displacements);
        Self {
            target_id,
            frame,
            horizon: pred.trajectories.first().map_or(0, Vec::len),
            trajectories: order
                .iter()
                .map(|&k| pred.trajectories[k].iter().map(|&p| frame.to_world(p)).collect())
                .collect(),
            displacements: order.iter().map(|&k| pred.displacements[k]).collect(),
            model_index: order,
        }
    }
}

pub fn cmd_predict(ckpt_dir: &Path, scene_path: &Path, out: &Path) -> CliResult<PredictionFile> {
    let (model, params) = inference_model(ckpt_dir, None)?;
    let raw = load_scene_file(scene_path)?;
    let scene = normalize(&raw)?;
    let pred = model.predict(&params, &scene)?;
    let file = PredictionFile::from_prediction(raw.target_id, scene.frame, &pred);
    write_json(out, &file)?;
    Ok(file)
}

pub fn cmd_plot(scene_path: &Path, pred_path: &Path, out: &Path) -> CliResult<()> {
    let scene = load_scene_file(scene_path)?;
    let text = fs::read_to_string(pred_path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", pred_path.display())))?;
    let pred: PredictionFile = serde_json::from_str(&text)?;
    fs::write(out, render_svg(&scene, Some(&pred)))?;
    Ok(())
}

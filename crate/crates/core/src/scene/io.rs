//! Scene files.
//!
//! JSON layout:
//! `{"agents": [{"id": 3, "observations": [[t, x, y], ...]}], "map": [{"id": 7,
//! "points": [[x, y], ...]}], "target_id": 3, "future": [[x, y], ...] | null,
//! "city": "PIT"}` with `t` an integer step index.
//!
//! CSV layout: `TIMESTAMP,TRACK_ID,OBJECT_TYPE,X,Y,CITY_NAME`, one row per
//! observation. `AGENT` marks the target. Timestamps are seconds; step indices
//! are counted at 10 Hz from the earliest non-map row. Rows typed `MAP` carry
//! map polyline points, ordered by their TIMESTAMP column.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Agent, MapElement, Observation, RawScene, FUTURE_STEPS, HISTORY_STEPS, STEP_SECONDS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneFormat {
    Csv,
    Json,
}

impl SceneFormat {
    /// Picks the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(Self::Csv),
            "json" => Some(Self::Json),
            _ => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentFile {
    id: u32,
    observations: Vec<(u32, f64, f64)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    agents: Vec<AgentFile>,
    map: Vec<MapElement>,
    target_id: u32,
    future: Option<Vec<[f64; 2]>>,
    city: String,
}

pub fn load_scene(path: &Path, format: SceneFormat) -> Result<RawScene> {
    let text = std::fs::read_to_string(path)?;
    load_scene_str(&text, format)
}

pub fn load_scene_str(text: &str, format: SceneFormat) -> Result<RawScene> {
    let scene = match format {
        SceneFormat::Json => from_json(text)?,
        SceneFormat::Csv => from_csv(text)?,
    };
    scene.validate(HISTORY_STEPS)?;
    if let Some(f) = &scene.future {
        if f.len() != FUTURE_STEPS {
            return Err(Error::validation(format!(
                "future has {} points, expected {FUTURE_STEPS}",
                f.len()
            )));
        }
    }
    Ok(scene)
}

pub fn save_scene(path: &Path, scene: &RawScene, format: SceneFormat) -> Result<()> {
    let text = match format {
        SceneFormat::Json => scene_to_json(scene)?,
        SceneFormat::Csv => scene_to_csv(scene),
    };
    std::fs::write(path, text)?;
    Ok(())
}

fn from_json(text: &str) -> Result<RawScene> {
    let file: SceneFile = serde_json::from_str(text).map_err(|e| Error::Format {
        row: e.line(),
        message: e.to_string(),
    })?;
    Ok(RawScene {
        agents: file
            .agents
            .into_iter()
            .map(|a| Agent {
                id: a.id,
                observations: a
                    .observations
                    .into_iter()
                    .map(|(t, x, y)| Observation { t, x, y })
                    .collect(),
            })
            .collect(),
        map: file.map,
        target_id: file.target_id,
        future: file.future,
        city: file.city,
    })
}

pub fn scene_to_json(scene: &RawScene) -> Result<String> {
    let file = SceneFile {
        agents: scene
            .agents
            .iter()
            .map(|a| AgentFile {
                id: a.id,
                observations: a.observations.iter().map(|o| (o.t, o.x, o.y)).collect(),
            })
            .collect(),
        map: scene.map.clone(),
        target_id: scene.target_id,
        future: scene.future.clone(),
        city: scene.city.clone(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    #[serde(rename = "TIMESTAMP")]
    timestamp: f64,
    #[serde(rename = "TRACK_ID")]
    track_id: String,
    #[serde(rename = "OBJECT_TYPE")]
    object_type: String,
    #[serde(rename = "X")]
    x: f64,
    #[serde(rename = "Y")]
    y: f64,
    #[serde(rename = "CITY_NAME")]
    city: String,
}

struct Track {
    key: String,
    rows: Vec<(usize, f64, f64, f64)>,
}

fn from_csv(text: &str) -> Result<RawScene> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut agent_tracks: Vec<Track> = Vec::new();
    let mut map_tracks: Vec<Track> = Vec::new();
    let mut agent_lookup: HashMap<String, usize> = HashMap::new();
    let mut map_lookup: HashMap<String, usize> = HashMap::new();
    let mut target_key: Option<String> = None;
    let mut city = String::new();

    for (i, rec) in reader.deserialize::<CsvRow>().enumerate() {
        let row_no = i + 2;
        let row = rec.map_err(|e| Error::Format {
            row: e.position().map_or(row_no, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        if !(row.timestamp.is_finite() && row.x.is_finite() && row.y.is_finite()) {
            return Err(Error::Format {
                row: row_no,
                message: "non-finite number".into(),
            });
        }
        if city.is_empty() {
            city = row.city.clone();
        }
        let is_map = row.object_type == "MAP";
        let (tracks, lookup) = if is_map {
            (&mut map_tracks, &mut map_lookup)
        } else {
            (&mut agent_tracks, &mut agent_lookup)
        };
        if row.object_type == "AGENT" {
            match &target_key {
                Some(k) if *k != row.track_id => {
                    return Err(Error::validation(format!(
                        "row {row_no}: second AGENT track `{}` (target is `{k}`)",
                        row.track_id
                    )))
                }
                _ => target_key = Some(row.track_id.clone()),
            }
        }
        let idx = *lookup.entry(row.track_id.clone()).or_insert_with(|| {
            tracks.push(Track {
                key: row.track_id.clone(),
                rows: Vec::new(),
            });
            tracks.len() - 1
        });
        let track = &mut tracks[idx];
        if let Some(&(_, prev, _, _)) = track.rows.last() {
            if row.timestamp <= prev {
                return Err(Error::validation(format!(
                    "row {row_no}: track `{}` timestamps not strictly increasing ({prev} then {})",
                    row.track_id, row.timestamp
                )));
            }
        }
        track.rows.push((row_no, row.timestamp, row.x, row.y));
    }

    let target_key = target_key.ok_or_else(|| Error::validation("no AGENT (target) track"))?;
    let t0 = agent_tracks
        .iter()
        .flat_map(|t| t.rows.iter().map(|r| r.1))
        .fold(f64::INFINITY, f64::min);

    let ids = assign_ids(agent_tracks.iter().chain(&map_tracks).map(|t| t.key.as_str()));
    let (agent_ids, map_ids) = ids.split_at(agent_tracks.len());

    let mut agents = Vec::new();
    let mut future = Vec::new();
    let mut target_id = 0;
    for (track, &id) in agent_tracks.iter().zip(agent_ids) {
        let is_target = track.key == target_key;
        if is_target {
            target_id = id;
        }
        let mut observations = Vec::new();
        let mut last_step: Option<u32> = None;
        for &(row_no, ts, x, y) in &track.rows {
            let step = ((ts - t0) / STEP_SECONDS).round() as u32;
            if last_step == Some(step) {
                return Err(Error::validation(format!(
                    "row {row_no}: track `{}` repeats step {step}",
                    track.key
                )));
            }
            last_step = Some(step);
            if step < HISTORY_STEPS {
                observations.push(Observation { t: step, x, y });
            } else if is_target {
                let expected = HISTORY_STEPS as usize + future.len();
                if step as usize != expected {
                    return Err(Error::validation(format!(
                        "row {row_no}: target future step {step} where {expected} was expected"
                    )));
                }
                future.push([x, y]);
            }
        }
        if !observations.is_empty() {
            agents.push(Agent { id, observations });
        }
    }
    let map = map_tracks
        .iter()
        .zip(map_ids)
        .map(|(t, &id)| MapElement {
            id,
            points: t.rows.iter().map(|r| [r.2, r.3]).collect(),
        })
        .collect();
    Ok(RawScene {
        agents,
        map,
        target_id,
        future: (!future.is_empty()).then_some(future),
        city,
    })
}

/// Keeps numeric track ids when every id is a distinct `u32`; otherwise
/// numbers tracks in first-appearance order.
fn assign_ids<'a>(keys: impl Iterator<Item = &'a str> + Clone) -> Vec<u32> {
    let parsed: Option<Vec<u32>> = keys.clone().map(|k| k.parse().ok()).collect();
    if let Some(p) = parsed {
        let distinct: std::collections::HashSet<_> = p.iter().collect();
        if distinct.len() == p.len() {
            return p;
        }
    }
    (0..keys.count() as u32).collect()
}

pub fn scene_to_csv(scene: &RawScene) -> String {
    let mut out = String::from("TIMESTAMP,TRACK_ID,OBJECT_TYPE,X,Y,CITY_NAME\n");
    let ts = |step: usize| step as f64 * STEP_SECONDS;
    for agent in &scene.agents {
        let kind = if agent.id == scene.target_id { "AGENT" } else { "OTHERS" };
        for o in &agent.observations {
            let _ = writeln!(
                out,
                "{},{},{kind},{},{},{}",
                ts(o.t as usize),
                agent.id,
                o.x,
                o.y,
                scene.city
            );
        }
        if agent.id == scene.target_id {
            if let Some(future) = &scene.future {
                for (i, p) in future.iter().enumerate() {
                    let step = HISTORY_STEPS as usize + i;
                    let _ = writeln!(out, "{},{},AGENT,{},{},{}", ts(step), agent.id, p[0], p[1], scene.city);
                }
            }
        }
    }
    for element in &scene.map {
        for (i, p) in element.points.iter().enumerate() {
            let _ = writeln!(out, "{i},{},MAP,{},{},{}", element.id, p[0], p[1], scene.city);
        }
    }
    out
}

//! Static SVG rendering of a scene and its forecasts.

use std::fmt::Write;

use tpcn_core::scene::RawScene;

use crate::commands::PredictionFile;

pub const HISTORY_COLOR: &str = "yellow";
pub const PREDICTION_COLOR: &str = "green";
pub const GROUND_TRUTH_COLOR: &str = "red";
pub const MAP_COLOR: &str = "grey";
pub const AGENT_COLOR: &str = "steelblue";
const BACKGROUND: &str = "#1b1b1b";
const PIXELS: f64 = 800.0;

struct Bounds {
    min: [f64; 2],
    max: [f64; 2],
}

impl Bounds {
    fn new() -> Self {
        Self {
            min: [f64::INFINITY; 2],
            max: [f64::NEG_INFINITY; 2],
        }
    }

    fn extend(&mut self, p: [f64; 2]) {
        if p[0].is_finite() && p[1].is_finite() {
            for (i, v) in p.into_iter().enumerate() {
                self.min[i] = self.min[i].min(v);
                self.max[i] = self.max[i].max(v);
            }
        }
    }
}

/// `M x y L x y ...` with y flipped so north points up.
fn path_data(points: &[[f64; 2]]) -> String {
    let mut d = String::new();
    for (i, p) in points.iter().enumerate() {
        let cmd = if i == 0 { 'M' } else { 'L' };
        let _ = write!(d, "{}{cmd}{:.3} {:.3}", if i == 0 { "" } else { " " }, p[0], -p[1]);
    }
    d
}

fn path(out: &mut String, class: &str, color: &str, width: f64, points: &[[f64; 2]]) {
    if points.is_empty() {
        return;
    }
    let _ = writeln!(
        out,
        r#"  <path class="{class}" d="{}" fill="none" stroke="{color}" stroke-width="{width:.3}" stroke-linecap="round" stroke-linejoin="round"/>"#,
        path_data(points)
    );
}

/// Renders the map in grey, other agents in blue, the target's history in
/// yellow, each forecast in green and the ground-truth future in red when the
/// scene has one.
pub fn render_svg(scene: &RawScene, pred: Option<&PredictionFile>) -> String {
    let target = scene.target();
    let history: Vec<[f64; 2]> = target.map_or(Vec::new(), |a| a.observations.iter().map(|o| [o.x, o.y]).collect());
    let others: Vec<Vec<[f64; 2]>> = scene
        .agents
        .iter()
        .filter(|a| a.id != scene.target_id)
        .map(|a| a.observations.iter().map(|o| [o.x, o.y]).collect())
        .collect();
    let forecasts: &[Vec<[f64; 2]>] = pred.map_or(&[], |p| &p.trajectories);

    let mut b = Bounds::new();
    scene.map.iter().flat_map(|m| &m.points).for_each(|&p| b.extend(p));
    others.iter().flatten().for_each(|&p| b.extend(p));
    history.iter().for_each(|&p| b.extend(p));
    forecasts.iter().flatten().for_each(|&p| b.extend(p));
    scene.future.iter().flatten().for_each(|&p| b.extend(p));
    if !b.min[0].is_finite() {
        b.min = [-1.0, -1.0];
        b.max = [1.0, 1.0];
    }
    let span = (b.max[0] - b.min[0]).max(b.max[1] - b.min[1]).max(1.0);
    let margin = 0.05 * span;
    let (x0, y0) = (b.min[0] - margin, -b.max[1] - margin);
    let (w, h) = (b.max[0] - b.min[0] + 2.0 * margin, b.max[1] - b.min[1] + 2.0 * margin);
    let stroke = span / 300.0;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="{x0:.3} {y0:.3} {w:.3} {h:.3}" width="{:.0}" height="{:.0}">"#,
        PIXELS,
        PIXELS * h / w
    );
    let _ = writeln!(
        out,
        r#"  <rect x="{x0:.3}" y="{y0:.3}" width="{w:.3}" height="{h:.3}" fill="{BACKGROUND}"/>"#
    );
    for m in &scene.map {
        path(&mut out, "map", MAP_COLOR, stroke, &m.points);
    }
    for a in &others {
        path(&mut out, "agent", AGENT_COLOR, 1.5 * stroke, a);
    }
    for f in forecasts {
        path(&mut out, "prediction", PREDICTION_COLOR, 1.5 * stroke, f);
    }
    if let Some(f) = &scene.future {
        path(&mut out, "ground-truth", GROUND_TRUTH_COLOR, 1.5 * stroke, f);
    }
    path(&mut out, "history", HISTORY_COLOR, 2.0 * stroke, &history);
    if let Some(last) = history.last() {
        let _ = writeln!(
            out,
            r#"  <circle class="target" cx="{:.3}" cy="{:.3}" r="{:.3}" fill="{HISTORY_COLOR}"/>"#,
            last[0],
            -last[1],
            3.0 * stroke
        );
    }
    out.push_str("</svg>\n");
    out
}

//! Space mappings between point coordinates, voxel cells and instance-time keys.
//!
//! Every grouping used by the network is materialized as a [`GroupTable`]:
//! a dense partition of point indices, numbered in first-appearance order so
//! that the same input always yields the same group ids.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scene::NormalizedScene;

/// Integer cell coordinate of a point on a square grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelIndex {
    pub vx: i32,
    pub vy: i32,
}

impl VoxelIndex {
    pub fn new(vx: i32, vy: i32) -> Self {
        Self { vx, vy }
    }

    /// Packs both signed components into one collision-free 64-bit key.
    pub fn key(self) -> u64 {
        pack(self.vx as u32, self.vy as u32)
    }

    pub fn offset(self, dx: i32, dy: i32) -> Self {
        Self::new(self.vx + dx, self.vy + dy)
    }

    /// Center of the cell in meters.
    pub fn center(self, grid_size: f64) -> [f64; 2] {
        [(self.vx as f64 + 0.5) * grid_size, (self.vy as f64 + 0.5) * grid_size]
    }
}

/// `(instance, time)` key of a single point. Map points always carry time 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct InstanceTimeIndex {
    pub instance: u32,
    pub time: u32,
}

impl InstanceTimeIndex {
    pub fn key(self) -> u64 {
        pack(self.instance, self.time)
    }
}

fn pack(hi: u32, lo: u32) -> u64 {
    ((hi as u64) << 32) | lo as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PointKind {
    TargetAgent,
    OtherAgent,
    Map,
}

impl PointKind {
    pub fn is_agent(self) -> bool {
        !matches!(self, PointKind::Map)
    }

    pub fn one_hot(self) -> [f64; 3] {
        match self {
            PointKind::TargetAgent => [1.0, 0.0, 0.0],
            PointKind::OtherAgent => [0.0, 1.0, 0.0],
            PointKind::Map => [0.0, 0.0, 1.0],
        }
    }
}

/// Flat point table: coordinates plus the two index spaces every point lives in.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexedPointSet {
    pub points: Vec<[f64; 2]>,
    pub itx: Vec<InstanceTimeIndex>,
    pub voxels: Vec<VoxelIndex>,
    pub kind: Vec<PointKind>,
    pub grid_size: f64,
}

impl IndexedPointSet {
    /// Builds the table from parallel arrays, voxelizing with `grid_size`.
    pub fn new(
        points: Vec<[f64; 2]>,
        itx: Vec<InstanceTimeIndex>,
        kind: Vec<PointKind>,
        grid_size: f64,
    ) -> Result<Self> {
        if points.len() != itx.len() || points.len() != kind.len() {
            return Err(Error::shape(format!(
                "point arrays disagree: {} points, {} indices, {} kinds",
                points.len(),
                itx.len(),
                kind.len()
            )));
        }
        let voxels = voxelize(&points, grid_size)?;
        Ok(Self {
            points,
            itx,
            voxels,
            kind,
            grid_size,
        })
    }

    /// Flattens a normalized scene. Agents come first (in scene order, each in
    /// time order), then map elements; instance ids are dense in that order.
    pub fn from_scene(scene: &NormalizedScene, grid_size: f64) -> Result<Self> {
        let raw = &scene.scene;
        let mut points = Vec::new();
        let mut itx = Vec::new();
        let mut kind = Vec::new();
        let mut instance = 0u32;
        for agent in &raw.agents {
            let k = if agent.id == raw.target_id {
                PointKind::TargetAgent
            } else {
                PointKind::OtherAgent
            };
            for obs in &agent.observations {
                points.push([obs.x, obs.y]);
                itx.push(InstanceTimeIndex { instance, time: obs.t });
                kind.push(k);
            }
            instance += 1;
        }
        for element in &raw.map {
            for p in &element.points {
                points.push(*p);
                itx.push(InstanceTimeIndex { instance, time: 0 });
                kind.push(PointKind::Map);
            }
            instance += 1;
        }
        Self::new(points, itx, kind, grid_size)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Returns a reordered copy with `out[i] = self[perm[i]]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            points: perm.iter().map(|&i| self.points[i]).collect(),
            itx: perm.iter().map(|&i| self.itx[i]).collect(),
            voxels: perm.iter().map(|&i| self.voxels[i]).collect(),
            kind: perm.iter().map(|&i| self.kind[i]).collect(),
            grid_size: self.grid_size,
        }
    }
}

/// Dense partition of `[0, N)` into groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupTable {
    group_of: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl GroupTable {
    /// Groups points with equal keys. Group ids follow first appearance.
    pub fn from_keys<I>(keys: I) -> Self
    where
        I: IntoIterator<Item = u64>,
    {
        let mut lookup: HashMap<u64, usize> = HashMap::new();
        let mut group_of = Vec::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        for (i, key) in keys.into_iter().enumerate() {
            let g = *lookup.entry(key).or_insert_with(|| {
                members.push(Vec::new());
                members.len() - 1
            });
            members[g].push(i);
            group_of.push(g);
        }
        Self { group_of, members }
    }

    /// One group holding every index.
    pub fn single(n: usize) -> Self {
        Self::from_keys(std::iter::repeat_n(0, n))
    }

    pub fn n_groups(&self) -> usize {
        self.members.len()
    }

    pub fn n_items(&self) -> usize {
        self.group_of.len()
    }

    pub fn group_of(&self) -> &[usize] {
        &self.group_of
    }

    pub fn members(&self, group: usize) -> &[usize] {
        &self.members[group]
    }

    pub fn iter_groups(&self) -> impl Iterator<Item = &[usize]> {
        self.members.iter().map(Vec::as_slice)
    }
}

/// Maps each point to `(floor(x / s), floor(y / s))`.
pub fn voxelize(points: &[[f64; 2]], grid_size: f64) -> Result<Vec<VoxelIndex>> {
    if !(grid_size > 0.0 && grid_size.is_finite()) {
        return Err(Error::validation(format!(
            "grid size must be positive, got {grid_size}"
        )));
    }
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if !(p[0].is_finite() && p[1].is_finite()) {
                return Err(Error::validation(format!("point {i} has a non-finite coordinate")));
            }
            let vx = (p[0] / grid_size).floor();
            let vy = (p[1] / grid_size).floor();
            if vx.abs() > i32::MAX as f64 || vy.abs() > i32::MAX as f64 {
                return Err(Error::validation(format!(
                    "point {i} is outside the representable voxel range"
                )));
            }
            Ok(VoxelIndex::new(vx as i32, vy as i32))
        })
        .collect()
}

pub fn build_groups_by_voxel(ps: &IndexedPointSet) -> GroupTable {
    GroupTable::from_keys(ps.voxels.iter().map(|v| v.key()))
}

pub fn build_groups_by_instance(ps: &IndexedPointSet) -> GroupTable {
    GroupTable::from_keys(ps.itx.iter().map(|m| m.instance as u64))
}

/// Groups points of the same instance whose times fall in the same
/// `interval`-wide bucket: key `(instance, floor(time / interval))`.
pub fn regroup_by_interval(ps: &IndexedPointSet, interval: u32) -> Result<GroupTable> {
    if interval == 0 {
        return Err(Error::validation("interval must be at least 1"));
    }
    Ok(GroupTable::from_keys(ps.itx.iter().map(|m| {
        InstanceTimeIndex {
            instance: m.instance,
            time: m.time / interval,
        }
        .key()
    })))
}

/// Signed-integer front end for callers holding untrusted config values.
pub fn regroup_by_interval_checked(ps: &IndexedPointSet, interval: i64) -> Result<GroupTable> {
    if interval <= 0 || interval > u32::MAX as i64 {
        return Err(Error::validation(format!("invalid interval {interval}")));
    }
    regroup_by_interval(ps, interval as u32)
}

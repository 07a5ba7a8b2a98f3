//! Dual-representation spatial learning: a pointwise neighborhood branch and
//! a sparse voxel branch, fused per point.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, ParamStore, Rulebook, Var, KERNEL_TAPS};
use crate::error::{Error, Result};
use crate::indexing::{build_groups_by_voxel, GroupTable, IndexedPointSet, VoxelIndex};
use crate::nn::Mlp;

/// Indices of all points within `radius` of each point (inclusive, self
/// included), sorted ascending. Uses a hash of square buckets of side
/// `radius`, so only the 3×3 surrounding buckets are scanned.
pub fn radius_neighbors(points: &[[f64; 2]], radius: f64) -> Vec<Vec<usize>> {
    let cell = radius * (1.0 + 1e-9);
    let bucket = |p: &[f64; 2]| ((p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64);
    let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        buckets.entry(bucket(p)).or_default().push(i);
    }
    let r2 = radius * radius;
    points
        .iter()
        .map(|p| {
            let (bx, by) = bucket(p);
            let mut found = Vec::new();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let Some(members) = buckets.get(&(bx + dx, by + dy)) else {
                        continue;
                    };
                    found.extend(members.iter().copied().filter(|&j| {
                        let q = &points[j];
                        let (ex, ey) = (q[0] - p[0], q[1] - p[1]);
                        ex * ex + ey * ey <= r2
                    }));
                }
            }
            found.sort_unstable();
            found
        })
        .collect()
}

/// Flattened (center, neighbor) pairs for one radius.
#[derive(Clone, Debug)]
pub struct NeighborTable {
    /// Neighbor index per pair.
    pub sources: Vec<usize>,
    /// Pairs grouped by center point; group `i` is point `i`.
    pub centers: GroupTable,
    /// `neighbor − center` per pair, meters.
    pub offsets: Matrix,
}

impl NeighborTable {
    pub fn build(points: &[[f64; 2]], radius: f64) -> Self {
        let lists = radius_neighbors(points, radius);
        let mut sources = Vec::new();
        let mut center_keys = Vec::new();
        let mut offsets = Vec::new();
        for (i, list) in lists.iter().enumerate() {
            for &j in list {
                sources.push(j);
                center_keys.push(i as u64);
                offsets.push(points[j][0] - points[i][0]);
                offsets.push(points[j][1] - points[i][1]);
            }
        }
        let m = sources.len();
        Self {
            sources,
            centers: GroupTable::from_keys(center_keys),
            offsets: Matrix::new(m, 2, offsets).expect("two columns per pair"),
        }
    }

    pub fn n_pairs(&self) -> usize {
        self.sources.len()
    }
}

/// Active voxel set with per-voxel features.
#[derive(Clone, Debug)]
pub struct SparseGrid {
    pub coords: Vec<VoxelIndex>,
    pub feats: Var,
    lookup: HashMap<VoxelIndex, usize>,
    rulebook: Arc<Rulebook>,
}

impl SparseGrid {
    /// Fails on duplicate coordinates.
    pub fn new(coords: Vec<VoxelIndex>, feats: Var) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(coords.len());
        for (row, &c) in coords.iter().enumerate() {
            if lookup.insert(c, row).is_some() {
                return Err(Error::validation(format!("voxel ({}, {}) appears twice", c.vx, c.vy)));
            }
        }
        let rulebook = coords
            .iter()
            .map(|c| {
                let mut taps = [None; KERNEL_TAPS];
                for (k, tap) in taps.iter_mut().enumerate() {
                    let n = c.offset(k as i32 / 3 - 1, k as i32 % 3 - 1);
                    *tap = lookup.get(&n).copied();
                }
                taps
            })
            .collect();
        Ok(Self {
            coords,
            feats,
            lookup,
            rulebook: Arc::new(rulebook),
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn row_of(&self, v: VoxelIndex) -> Option<usize> {
        self.lookup.get(&v).copied()
    }

    pub fn rulebook(&self) -> &Arc<Rulebook> {
        &self.rulebook
    }

    /// Same active set carrying different features.
    pub fn with_feats(&self, feats: Var) -> Self {
        Self { feats, ..self.clone() }
    }
}

/// Pools point features into their voxels by mean.
pub fn ftp_point_to_voxel(g: &mut Graph, feats: Var, voxels: &[VoxelIndex], groups: &GroupTable) -> Result<SparseGrid> {
    if voxels.len() != groups.n_items() {
        return Err(Error::shape(format!(
            "{} voxel indices for {} grouped points",
            voxels.len(),
            groups.n_items()
        )));
    }
    let pooled = g.scatter_mean(feats, groups)?;
    let coords = groups.iter_groups().map(|m| voxels[m[0]]).collect();
    SparseGrid::new(coords, pooled)
}

/// Candidate voxels for each point: the occupied cells of the 2×2 block
/// whose centers surround the point, always including the point's own cell.
#[derive(Clone, Debug)]
pub struct InterpTable {
    /// Grid row per candidate.
    pub voxel_rows: Vec<usize>,
    /// Candidates grouped by point; group `i` is point `i`.
    pub points: GroupTable,
    /// `voxel center − point` per candidate, meters.
    pub offsets: Matrix,
}

impl InterpTable {
    /// `row_of` maps an occupied voxel to its grid row.
    pub fn build(ps: &IndexedPointSet, row_of: impl Fn(VoxelIndex) -> Option<usize>) -> Result<Self> {
        let s = ps.grid_size;
        let mut voxel_rows = Vec::new();
        let mut keys = Vec::new();
        let mut offsets = Vec::new();
        for (i, (p, own)) in ps.points.iter().zip(&ps.voxels).enumerate() {
            let base = VoxelIndex::new((p[0] / s - 0.5).floor() as i32, (p[1] / s - 0.5).floor() as i32);
            let mut cells: Vec<VoxelIndex> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .map(|&(dx, dy)| base.offset(dx, dy))
                .collect();
            if !cells.contains(own) {
                cells.push(*own);
            }
            let before = voxel_rows.len();
            for cell in cells {
                let Some(row) = row_of(cell) else { continue };
                let c = cell.center(s);
                voxel_rows.push(row);
                keys.push(i as u64);
                offsets.push(c[0] - p[0]);
                offsets.push(c[1] - p[1]);
            }
            if voxel_rows.len() == before {
                return Err(Error::Index(format!("point {i} has no occupied voxel")));
            }
        }
        let m = voxel_rows.len();
        Ok(Self {
            voxel_rows,
            points: GroupTable::from_keys(keys),
            offsets: Matrix::new(m, 2, offsets)?,
        })
    }
}

/// Geometry shared by every spatial block applied to one point set.
#[derive(Clone, Debug)]
pub struct SpatialContext {
    pub neighbors: Vec<NeighborTable>,
    pub voxel_groups: GroupTable,
    pub voxels: Vec<VoxelIndex>,
    pub interp: InterpTable,
}

impl SpatialContext {
    pub fn new(ps: &IndexedPointSet, radii: &[f64]) -> Result<Self> {
        if radii.is_empty() {
            return Err(Error::validation("at least one neighborhood radius is required"));
        }
        if let Some(r) = radii.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
            return Err(Error::validation(format!("invalid neighborhood radius {r}")));
        }
        if ps.is_empty() {
            return Err(Error::validation("point set is empty"));
        }
        let voxel_groups = build_groups_by_voxel(ps);
        let rows: HashMap<VoxelIndex, usize> = voxel_groups
            .iter_groups()
            .enumerate()
            .map(|(row, m)| (ps.voxels[m[0]], row))
            .collect();
        Ok(Self {
            neighbors: radii.iter().map(|&r| NeighborTable::build(&ps.points, r)).collect(),
            interp: InterpTable::build(ps, |v| rows.get(&v).copied())?,
            voxel_groups,
            voxels: ps.voxels.clone(),
        })
    }
}

/// Multi-radius neighborhood learning without any sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct PointwiseLearning {
    pub radius_mlps: Vec<Mlp>,
    pub out_mlp: Mlp,
}

impl PointwiseLearning {
    pub fn new(prefix: &str, in_dim: usize, n_radii: usize, radius_width: usize, out_width: usize) -> Self {
        Self {
            radius_mlps: (0..n_radii)
                .map(|r| Mlp::new(format!("{prefix}.radius{r}"), &[in_dim + 2, radius_width], true))
                .collect(),
            out_mlp: Mlp::new(format!("{prefix}.out"), &[n_radii * radius_width, out_width], true),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for m in &self.radius_mlps {
            m.init(store, rng);
        }
        self.out_mlp.init(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ctx: &SpatialContext, feats: Var) -> Result<Var> {
        if ctx.neighbors.len() != self.radius_mlps.len() {
            return Err(Error::shape(format!(
                "{} neighbor tables for {} radius MLPs",
                ctx.neighbors.len(),
                self.radius_mlps.len()
            )));
        }
        let mut pooled: Option<Var> = None;
        for (table, mlp) in ctx.neighbors.iter().zip(&self.radius_mlps) {
            let gathered = g.gather_rows(feats, &table.sources)?;
            let offsets = g.constant(table.offsets.clone());
            let pair = g.concat_cols(gathered, offsets)?;
            let h = mlp.forward(g, store, pair)?;
            let m = g.scatter_max(h, &table.centers)?;
            pooled = Some(match pooled {
                None => m,
                Some(acc) => g.concat_cols(acc, m)?,
            });
        }
        let pooled = pooled.ok_or_else(|| Error::validation("at least one neighborhood radius is required"))?;
        self.out_mlp.forward(g, store, pooled)
    }
}

/// One residual bottleneck: 1×1 reduce, 3×3 submanifold conv, 1×1 expand.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckBlock {
    pub prefix: String,
    pub cin: usize,
    pub mid: usize,
    pub cout: usize,
}

impl BottleneckBlock {
    pub fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn has_projection(&self) -> bool {
        self.cin != self.cout
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        store.init_kaiming(&self.name("reduce.w"), self.cin, self.cin, self.mid, rng);
        store.insert(self.name("reduce.b"), Matrix::zeros(1, self.mid));
        store.init_kaiming(
            &self.name("conv.w"),
            KERNEL_TAPS * self.mid,
            KERNEL_TAPS * self.mid,
            self.mid,
            rng,
        );
        store.insert(self.name("conv.b"), Matrix::zeros(1, self.mid));
        store.init_kaiming(&self.name("expand.w"), self.mid, self.mid, self.cout, rng);
        store.insert(self.name("expand.b"), Matrix::zeros(1, self.cout));
        if self.has_projection() {
            store.init_kaiming(&self.name("skip.w"), self.cin, self.cin, self.cout, rng);
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, grid: &SparseGrid) -> Result<SparseGrid> {
        let x = grid.feats;
        let w = g.param(store, &self.name("reduce.w"))?;
        let b = g.param(store, &self.name("reduce.b"))?;
        let h = g.linear(x, w, b)?;
        let h = g.relu(h);
        let w = g.param(store, &self.name("conv.w"))?;
        let b = g.param(store, &self.name("conv.b"))?;
        let h = g.subm_conv(h, w, grid.rulebook())?;
        let h = g.add_bias(h, b)?;
        let h = g.relu(h);
        let w = g.param(store, &self.name("expand.w"))?;
        let b = g.param(store, &self.name("expand.b"))?;
        let h = g.linear(h, w, b)?;
        let skip = if self.has_projection() {
            let w = g.param(store, &self.name("skip.w"))?;
            let zero = g.constant(Matrix::zeros(1, self.cout));
            g.linear(x, w, zero)?
        } else {
            x
        };
        let sum = g.add(h, skip)?;
        let out = g.relu(sum);
        Ok(grid.with_feats(out))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseBottleneck {
    pub blocks: Vec<BottleneckBlock>,
}

impl SparseBottleneck {
    pub fn new(prefix: &str, cin: usize, mid: usize, cout: usize, n_blocks: usize) -> Self {
        Self {
            blocks: (0..n_blocks)
                .map(|b| BottleneckBlock {
                    prefix: format!("{prefix}.{b}"),
                    cin: if b == 0 { cin } else { cout },
                    mid,
                    cout,
                })
                .collect(),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for b in &self.blocks {
            b.init(store, rng);
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, grid: &SparseGrid) -> Result<SparseGrid> {
        if grid.is_empty() {
            return Err(Error::validation("sparse grid is empty"));
        }
        let mut grid = grid.clone();
        for b in &self.blocks {
            grid = b.forward(g, store, &grid)?;
        }
        Ok(grid)
    }
}

/// Voxel-to-point interpolation with weights predicted from the offset to
/// each candidate voxel center and that voxel's feature.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelInterpolation {
    pub mlp: Mlp,
}

impl VoxelInterpolation {
    pub fn new(prefix: &str, channels: usize, hidden: usize) -> Self {
        Self {
            mlp: Mlp::new(prefix, &[2 + channels, hidden, 1], false),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.mlp.init(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, grid: &SparseGrid, table: &InterpTable) -> Result<Var> {
        let feats = g.gather_rows(grid.feats, &table.voxel_rows)?;
        let offsets = g.constant(table.offsets.clone());
        let input = g.concat_cols(offsets, feats)?;
        let logits = self.mlp.forward(g, store, input)?;
        let weights = g.segment_softmax(logits, &table.points)?;
        let weighted = g.mul_rows(feats, weights)?;
        g.scatter_sum(weighted, &table.points)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpatialWidths {
    pub radius_mlp: usize,
    pub point_out: usize,
    pub voxel: usize,
    pub bottleneck_mid: usize,
    pub bottleneck_blocks: usize,
    pub interp_hidden: usize,
    pub out: usize,
}

impl Default for SpatialWidths {
    fn default() -> Self {
        Self {
            radius_mlp: 32,
            point_out: 64,
            voxel: 64,
            bottleneck_mid: 16,
            bottleneck_blocks: 2,
            interp_hidden: 16,
            out: 128,
        }
    }
}

/// Pointwise and voxel branches over the same input, fused by concatenation.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialBlock {
    pub pointwise: PointwiseLearning,
    pub bottleneck: SparseBottleneck,
    pub interp: VoxelInterpolation,
    pub fuse: Mlp,
}

impl SpatialBlock {
    pub fn new(prefix: &str, in_dim: usize, n_radii: usize, w: &SpatialWidths) -> Self {
        Self {
            pointwise: PointwiseLearning::new(&format!("{prefix}.point"), in_dim, n_radii, w.radius_mlp, w.point_out),
            bottleneck: SparseBottleneck::new(
                &format!("{prefix}.voxel"),
                in_dim,
                w.bottleneck_mid,
                w.voxel,
                w.bottleneck_blocks,
            ),
            interp: VoxelInterpolation::new(&format!("{prefix}.interp"), w.voxel, w.interp_hidden),
            fuse: Mlp::new(format!("{prefix}.fuse"), &[w.point_out + w.voxel, w.out], true),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.fuse.out_dim()
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.pointwise.init(store, rng);
        self.bottleneck.init(store, rng);
        self.interp.init(store, rng);
        self.fuse.init(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ctx: &SpatialContext, feats: Var) -> Result<Var> {
        let p = self.pointwise.forward(g, store, ctx, feats)?;
        let grid = ftp_point_to_voxel(g, feats, &ctx.voxels, &ctx.voxel_groups)?;
        let grid = self.bottleneck.forward(g, store, &grid)?;
        let v = self.interp.forward(g, store, &grid, &ctx.interp)?;
        let both = g.concat_cols(p, v)?;
        self.fuse.forward(g, store, both)
    }
}

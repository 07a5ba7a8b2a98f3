//! Dynamic temporal learning over instance-time keys, with no padding of
//! variable-length histories.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::indexing::{build_groups_by_instance, regroup_by_interval, GroupTable, IndexedPointSet};
use crate::nn::Mlp;

/// Groupings shared by every temporal block applied to one point set.
#[derive(Clone, Debug)]
pub struct TemporalContext {
    pub intervals: Vec<GroupTable>,
    pub instances: GroupTable,
}

impl TemporalContext {
    pub fn new(ps: &IndexedPointSet, intervals: &[u32]) -> Result<Self> {
        if intervals.is_empty() {
            return Err(Error::validation("at least one time interval is required"));
        }
        Ok(Self {
            intervals: intervals
                .iter()
                .map(|&t| regroup_by_interval(ps, t))
                .collect::<Result<_>>()?,
            instances: build_groups_by_instance(ps),
        })
    }
}

/// For each interval: transform, average within (instance, time bucket),
/// broadcast back, and concatenate with the transformed features.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiInterval {
    pub mlps: Vec<Mlp>,
}

impl MultiInterval {
    pub fn new(prefix: &str, in_dim: usize, n_intervals: usize, width: usize) -> Self {
        Self {
            mlps: (0..n_intervals)
                .map(|i| {
                    let input = if i == 0 { in_dim } else { 2 * width };
                    Mlp::new(format!("{prefix}.{i}"), &[input, width], true)
                })
                .collect(),
        }
    }

    pub fn out_dim(&self) -> usize {
        2 * self.mlps.last().map_or(0, Mlp::out_dim)
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for m in &self.mlps {
            m.init(store, rng);
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, groups: &[GroupTable], feats: Var) -> Result<Var> {
        if groups.len() != self.mlps.len() {
            return Err(Error::shape(format!(
                "{} interval groupings for {} interval MLPs",
                groups.len(),
                self.mlps.len()
            )));
        }
        let mut current = feats;
        for (table, mlp) in groups.iter().zip(&self.mlps) {
            let transformed = mlp.forward(g, store, current)?;
            let pooled = g.scatter_mean(transformed, table)?;
            let sliced = g.gather_rows(pooled, table.group_of())?;
            current = g.concat_cols(sliced, transformed)?;
        }
        Ok(current)
    }
}

/// Max-pools transformed features over each instance and appends the
/// instance feature to every member point.
#[derive(Clone, Debug, PartialEq)]
pub struct InstancePool {
    pub mlp: Mlp,
    pub proj: Mlp,
}

impl InstancePool {
    pub fn new(prefix: &str, in_dim: usize, pool_width: usize, out_width: usize) -> Self {
        Self {
            mlp: Mlp::new(format!("{prefix}.mlp"), &[in_dim, pool_width], true),
            proj: Mlp::new(format!("{prefix}.proj"), &[in_dim + pool_width, out_width], true),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.mlp.init(store, rng);
        self.proj.init(store, rng);
    }

    /// Per-instance pooled features, one row per instance group.
    pub fn pooled(&self, g: &mut Graph, store: &ParamStore, instances: &GroupTable, feats: Var) -> Result<Var> {
        let h = self.mlp.forward(g, store, feats)?;
        g.scatter_max(h, instances)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, instances: &GroupTable, feats: Var) -> Result<Var> {
        let pooled = self.pooled(g, store, instances, feats)?;
        let spread = g.gather_rows(pooled, instances.group_of())?;
        let both = g.concat_cols(feats, spread)?;
        self.proj.forward(g, store, both)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemporalWidths {
    pub interval_mlp: usize,
    pub pool_mlp: usize,
    pub pool_out: usize,
    pub out: usize,
}

impl Default for TemporalWidths {
    fn default() -> Self {
        Self {
            interval_mlp: 64,
            pool_mlp: 64,
            pool_out: 128,
            out: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalBlock {
    pub intervals: MultiInterval,
    pub pool: InstancePool,
    pub out: Mlp,
}

impl TemporalBlock {
    pub fn new(prefix: &str, in_dim: usize, n_intervals: usize, w: &TemporalWidths) -> Self {
        let intervals = MultiInterval::new(&format!("{prefix}.mil"), in_dim, n_intervals, w.interval_mlp);
        let pool = InstancePool::new(&format!("{prefix}.pool"), intervals.out_dim(), w.pool_mlp, w.pool_out);
        Self {
            intervals,
            pool,
            out: Mlp::new(format!("{prefix}.out"), &[w.pool_out, w.out], true),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out.out_dim()
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.intervals.init(store, rng);
        self.pool.init(store, rng);
        self.out.init(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ctx: &TemporalContext, feats: Var) -> Result<Var> {
        let h = self.intervals.forward(g, store, &ctx.intervals, feats)?;
        let h = self.pool.forward(g, store, &ctx.instances, h)?;
        self.out.forward(g, store, h)
    }
}

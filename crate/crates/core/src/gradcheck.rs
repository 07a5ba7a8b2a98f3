//! Central finite-difference gradient checking.
//!
//! The oracle only evaluates forward passes; it never reads the gradients it
//! is checking. A coordinate that fails at the primary step is re-probed with
//! steps ten and a hundred times smaller. A ReLU or max switch within one
//! step of the evaluation point, or a layer-norm row of near-zero variance,
//! corrupts the coarse difference and not the analytic gradient. Re-probes
//! are counted in the report.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Matrix, ParamStore, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rtol: 1e-4,
            atol: 1e-6,
        }
    }
}

impl Tolerance {
    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        (analytic - numeric).abs() <= self.atol + self.rtol * numeric.abs()
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub reprobed: usize,
    pub failures: Vec<Mismatch>,
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub leaf: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.reprobed += other.reprobed;
        self.failures.extend(other.failures);
    }
}

/// Copy of `store` with uniform noise of half-width `scale` added to every
/// entry. Zero-initialized biases put ReLU inputs exactly on the kink,
/// where finite differences are meaningless; noise moves them off it.
pub fn jittered(store: &ParamStore, scale: f64, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = store.clone();
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        for v in out.get_mut(&name).expect("present").data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
    out
}

/// Reduces `x` to the scalar `Σ_ij v_i x_ij w_j` with fixed random `v`, `w`
/// drawn from `seed`, so that every entry of `x` gets a distinct gradient.
pub fn random_projection(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let (rows, cols) = g.shape(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let w = g.constant(Matrix::new(cols, 1, draw(cols))?);
    let v = g.constant(Matrix::new(rows, 1, draw(rows))?);
    let zero = g.constant(Matrix::zeros(1, 1));
    let y = g.linear(x, w, zero)?;
    let z = g.mul_rows(y, v)?;
    Ok(g.sum_all(z))
}

/// Checks `d loss / d leaves` where `build` constructs the scalar loss from
/// leaf handles. `max_coords` caps the coordinates probed per leaf (chosen
/// by `seed`); `None` probes all of them.
pub fn check_leaves<F>(
    leaves: &[Matrix],
    build: F,
    tol: Tolerance,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Matrix]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|m| g.constant(m.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|m| g.leaf(m.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Matrix> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    let mut values = leaves.to_vec();
    for li in 0..leaves.len() {
        for idx in pick(leaves[li].len(), max_coords, &mut rng) {
            let a = analytic[li].data()[idx];
            let numeric = |h: f64, values: &mut Vec<Matrix>| -> Result<f64> {
                let orig = values[li].data()[idx];
                values[li].data_mut()[idx] = orig + h;
                let up = eval(values)?;
                values[li].data_mut()[idx] = orig - h;
                let down = eval(values)?;
                values[li].data_mut()[idx] = orig;
                Ok((up - down) / (2.0 * h))
            };
            record(&mut report, format!("leaf{li}"), idx, a, tol, |h| {
                numeric(h, &mut values)
            })?;
        }
    }
    Ok(report)
}

/// Same check over the entries of a parameter store.
pub fn check_params<F>(
    store: &ParamStore,
    build: F,
    tol: Tolerance,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let grads = g.backward(loss)?;
    let analytic = g.param_grads(&grads, store);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    let mut work = store.clone();
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let len = store.get(&name).map_or(0, Matrix::len);
        for idx in pick(len, max_coords, &mut rng) {
            let a = analytic[&name].data()[idx];
            let mut numeric = |h: f64| -> Result<f64> {
                let orig = work.get(&name).expect("present").data()[idx];
                work.get_mut(&name).expect("present").data_mut()[idx] = orig + h;
                let up = eval_store(&build, &work)?;
                work.get_mut(&name).expect("present").data_mut()[idx] = orig - h;
                let down = eval_store(&build, &work)?;
                work.get_mut(&name).expect("present").data_mut()[idx] = orig;
                Ok((up - down) / (2.0 * h))
            };
            record(&mut report, name.clone(), idx, a, tol, &mut numeric)?;
        }
    }
    Ok(report)
}

fn eval_store<F>(build: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    Ok(g.value(loss).data()[0])
}

fn record<N>(
    report: &mut GradReport,
    leaf: String,
    index: usize,
    analytic: f64,
    tol: Tolerance,
    mut numeric: N,
) -> Result<()>
where
    N: FnMut(f64) -> Result<f64>,
{
    report.checked += 1;
    let n = numeric(tol.step)?;
    if tol.accepts(analytic, n) {
        return Ok(());
    }
    report.reprobed += 1;
    for shrink in [0.1, 0.01] {
        if tol.accepts(analytic, numeric(tol.step * shrink)?) {
            return Ok(());
        }
    }
    report.failures.push(Mismatch {
        leaf,
        index,
        analytic,
        numeric: n,
    });
    Ok(())
}

fn pick(len: usize, max: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if let Some(m) = max {
        if m < len {
            idx.shuffle(rng);
            idx.truncate(m);
            idx.sort_unstable();
        }
    }
    idx
}

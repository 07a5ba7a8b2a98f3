//! Shared layer building blocks.

use rand::Rng;

use crate::autodiff::{Graph, Matrix, ParamStore, Var};
use crate::error::Result;

/// Stack of linear layers. Every layer but the last is followed by layer
/// normalization and ReLU; the last one is too when `act_last` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    prefix: String,
    dims: Vec<usize>,
    act_last: bool,
}

impl Mlp {
    /// `dims` lists the input width followed by each layer's output width.
    pub fn new(prefix: impl Into<String>, dims: &[usize], act_last: bool) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        Self {
            prefix: prefix.into(),
            dims: dims.to_vec(),
            act_last,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().expect("non-empty")
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    fn activated(&self, layer: usize) -> bool {
        layer + 1 < self.n_layers() || self.act_last
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.{layer}.w", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.{layer}.b", self.prefix)
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for l in 0..self.n_layers() {
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            store.init_kaiming(&self.weight_name(l), i, i, o, rng);
            store.insert(self.bias_name(l), Matrix::zeros(1, o));
            if self.activated(l) {
                store.insert(format!("{}.{l}.ln.g", self.prefix), Matrix::filled(1, o, 1.0));
                store.insert(format!("{}.{l}.ln.b", self.prefix), Matrix::zeros(1, o));
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for l in 0..self.n_layers() {
            let w = g.param(store, &self.weight_name(l))?;
            let b = g.param(store, &self.bias_name(l))?;
            h = g.linear(h, w, b)?;
            if self.activated(l) {
                let gain = g.param(store, &format!("{}.{l}.ln.g", self.prefix))?;
                let bias = g.param(store, &format!("{}.{l}.ln.b", self.prefix))?;
                h = g.layer_norm(h, gain, bias)?;
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn registers_expected_parameters() {
        let mlp = Mlp::new("m", &[3, 5, 2], false);
        let mut store = ParamStore::new();
        mlp.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let names: Vec<&String> = store.names().collect();
        assert_eq!(names, ["m.0.b", "m.0.ln.b", "m.0.ln.g", "m.0.w", "m.1.b", "m.1.w"]);
        assert_eq!(store.get("m.1.w").unwrap().shape(), (5, 2));
    }

    #[test]
    fn output_shape() {
        let mlp = Mlp::new("m", &[3, 5, 2], true);
        let mut store = ParamStore::new();
        mlp.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let x = g.constant(Matrix::filled(4, 3, 0.5));
        let y = mlp.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), (4, 2));
        assert!(g.value(y).data().iter().all(|v| *v >= 0.0));
    }
}

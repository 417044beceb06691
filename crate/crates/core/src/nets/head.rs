use rand::Rng as _;

use crate::autodiff::{Graph, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};
use crate::rng::Rng;

/// Weight `[fan_in, fan_out]` and bias `[fan_out]`, both uniform in
/// `±1/sqrt(fan_in)`.
#[derive(Clone, Debug)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Affine {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let w = draw(fan_in * fan_out);
        let b = draw(fan_out);
        Self {
            weight: store.add_weight(format!("{name}.weight"), Tensor::from_f64(vec![fan_in, fan_out], &w).expect("shape")),
            bias: store.add_weight(format!("{name}.bias"), Tensor::from_f64(vec![fan_out], &b).expect("shape")),
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, TensorError> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.fan_in {
            return Err(TensorError::Dimension(format!(
                "affine layer expects [B, {}], got {shape:?}",
                self.fan_in
            )));
        }
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// Maps encoder features into the shared embedding space. A single affine
/// layer by default; with `hidden` set it becomes affine-relu-affine.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    layers: Vec<Affine>,
    pub feature_dim: usize,
    pub dim: usize,
}

impl ProjectionHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        feature_dim: usize,
        dim: usize,
        hidden: Option<usize>,
    ) -> Self {
        let layers = match hidden {
            None => vec![Affine::new(store, rng, name, feature_dim, dim)],
            Some(h) => vec![
                Affine::new(store, rng, &format!("{name}.0"), feature_dim, h),
                Affine::new(store, rng, &format!("{name}.1"), h, dim),
            ],
        };
        Self {
            layers,
            feature_dim,
            dim,
        }
    }

    /// `[B, feature_dim] -> [B, dim]`, not normalized.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, store: &ParamStore<T>, features: Var) -> Result<Var, TensorError> {
        let mut h = features;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.relu(h);
            }
            h = layer.forward(g, store, h)?;
        }
        Ok(h)
    }

    pub fn layers(&self) -> &[Affine] {
        &self.layers
    }
}

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, Tensor, TensorError, Var};

/// Allowed deviation of an input row norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub tau_cross: f64,
    pub tau_ssl: f64,
    pub batch_size: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau_cross: 0.07,
            tau_ssl: 0.07,
            batch_size: 32,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        for (name, t) in [("tau_cross", self.tau_cross), ("tau_ssl", self.tau_ssl)] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(TensorError::Contract(format!("{name} must lie in (0, 1], got {t}")));
            }
        }
        if self.batch_size < 2 {
            return Err(TensorError::Contract(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    E2t,
    T2e,
    E2eView,
}

/// Cosine similarities `values[i][j] = <a_i, b_j>` of row-normalized inputs.
#[derive(Clone, Debug)]
pub struct SimilarityMatrix<T> {
    pub values: Tensor<T>,
    pub direction: Direction,
}

impl<T: Scalar> SimilarityMatrix<T> {
    pub fn between(a: &Tensor<T>, b: &Tensor<T>, direction: Direction) -> Result<Self, TensorError> {
        check_rows(a, "a")?;
        check_rows(b, "b")?;
        if a.shape()[1] != b.shape()[1] {
            return Err(TensorError::Dimension(format!(
                "embedding widths differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let s = g.matmul(va, g.transpose(vb)?)?;
        let values = g.value(s).clone();
        Ok(Self { values, direction })
    }
}

fn check_rows<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(), TensorError> {
    if t.rank() != 2 {
        return Err(TensorError::Dimension(format!("{what}: expected [B, d], got {:?}", t.shape())));
    }
    let d = t.shape()[1];
    for (i, row) in t.data().chunks(d).enumerate() {
        let norm = row.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
            return Err(TensorError::Contract(format!(
                "{what}: row {i} has norm {norm}, expected unit length"
            )));
        }
    }
    Ok(())
}

fn check_pair<T: Scalar>(g: &Graph<T>, a: Var, b: Var) -> Result<usize, TensorError> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb || sa.len() != 2 {
        return Err(TensorError::Dimension(format!("embedding shapes differ: {sa:?} vs {sb:?}")));
    }
    if sa[0] < 2 {
        return Err(TensorError::Contract(format!(
            "contrastive loss needs a batch of at least 2, got {}",
            sa[0]
        )));
    }
    check_rows(&g.value(a), "first input")?;
    check_rows(&g.value(b), "second input")?;
    Ok(sa[0])
}

/// Mean over rows of `-log softmax(a b^T / tau)[i][i]`.
fn info_nce<T: Scalar>(g: &Graph<T>, a: Var, b: Var, tau: f64, batch: usize) -> Result<Var, TensorError> {
    let logits = g.scale(g.matmul(a, g.transpose(b)?)?, T::from_f64(1.0 / tau));
    let lp = g.log_softmax(logits)?;
    let diag: Vec<usize> = (0..batch).collect();
    let picked = g.pick(lp, &diag)?;
    Ok(g.scale(g.sum_all(picked), T::from_f64(-1.0 / batch as f64)))
}

/// Symmetric InfoNCE between paired ECG and text embeddings.
pub fn cross_modal_loss<T: Scalar>(g: &Graph<T>, e_hat: Var, t_hat: Var, cfg: &ContrastiveConfig) -> Result<Var, TensorError> {
    let b = check_pair(g, e_hat, t_hat)?;
    let e2t = info_nce(g, e_hat, t_hat, cfg.tau_cross, b)?;
    let t2e = info_nce(g, t_hat, e_hat, cfg.tau_cross, b)?;
    Ok(g.scale(g.add(e2t, t2e)?, T::from_f64(0.5)))
}

/// One-directional InfoNCE from view `e_hat` to view `e_hat_prime`.
pub fn ssl_loss<T: Scalar>(g: &Graph<T>, e_hat: Var, e_hat_prime: Var, cfg: &ContrastiveConfig) -> Result<Var, TensorError> {
    let b = check_pair(g, e_hat, e_hat_prime)?;
    info_nce(g, e_hat, e_hat_prime, cfg.tau_ssl, b)
}

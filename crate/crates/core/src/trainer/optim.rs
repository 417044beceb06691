use crate::autodiff::{ParamKind, ParamStore, Scalar, Tensor};

use super::TrainError;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    /// L2 penalty folded into the gradient (not decoupled).
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// First and second moments per parameter slot, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub moments: Vec<Option<Moments<T>>>,
}

impl<T> Default for AdamState<T> {
    fn default() -> Self {
        Self {
            step: 0,
            moments: Vec::new(),
        }
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One Adam update over every trainable weight that holds a gradient.
/// Nothing is modified when any such gradient is non-finite.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamState<T>, cfg: &AdamConfig) -> Result<(), TrainError> {
    for (_, p) in store.iter() {
        if let Some(g) = &p.grad {
            if p.requires_grad && !g.all_finite() {
                return Err(TrainError::Diverged(format!("non-finite gradient for {}", p.name)));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let (lr, wd, eps) = (T::from_f64(cfg.lr), T::from_f64(cfg.weight_decay), T::from_f64(cfg.eps));

    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    if state.moments.len() < ids.len() {
        state.moments.resize(ids.len(), None);
    }
    for id in ids {
        let p = store.get_mut(id);
        if !p.requires_grad || p.kind != ParamKind::Weight {
            continue;
        }
        let Some(grad) = p.grad.as_ref() else { continue };
        let mo = state.moments[id.index()].get_or_insert_with(|| Moments {
            m: Tensor::zeros(p.value.shape()),
            v: Tensor::zeros(p.value.shape()),
        });
        let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
        for (i, (w, &g)) in p.value.data_mut().iter_mut().zip(grad.data()).enumerate() {
            let g = g + wd * *w;
            m[i] = b1 * m[i] + c1 * g;
            v[i] = b2 * v[i] + c2 * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

//! Central finite-difference oracle for verifying analytic gradients.
//!
//! The oracle only ever evaluates forward passes, so it stays independent of
//! the backward rules it checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use super::{Graph, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum coordinates probed per input (all when the input is smaller).
    pub max_coords: usize,
    /// Magnitude below which errors are measured absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: 64,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Worst coordinate as (input index, flat index, analytic, numeric).
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of scalar `f(inputs)` against central
/// differences for a sample of coordinates of every input.
pub fn check<F>(inputs: &[Tensor<f64>], cfg: GradCheckConfig, f: F) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |ins: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?;
        let v = g.value(out).item()?;
        Ok(v)
    };

    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&g, &vars)?;
    let grads = g.backward(out)?;

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: None,
    };
    let mut probe = inputs.to_vec();
    for (k, &var) in vars.iter().enumerate() {
        let n = inputs[k].numel();
        let analytic = grads
            .wrt(var)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + cfg.step;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - cfg.step;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let err = relative_error(analytic[i], numeric, cfg.floor);
            report.coords_checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((k, i, analytic[i], numeric));
            }
        }
    }
    Ok(report)
}

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::TensorError;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Jitter standard deviation as a fraction of each lead's std.
    pub jitter_sigma: f64,
    pub scale_range: (f64, f64),
    pub num_segments: usize,
    pub invert_prob: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            jitter_sigma: 0.05,
            scale_range: (0.8, 1.2),
            num_segments: 8,
            invert_prob: 0.5,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(TensorError::Contract(format!("scale_range must satisfy 0 < lo <= hi, got ({lo}, {hi})")));
        }
        if self.num_segments < 2 {
            return Err(TensorError::Contract(format!(
                "num_segments must be at least 2, got {}",
                self.num_segments
            )));
        }
        if !(0.0..=1.0).contains(&self.invert_prob) {
            return Err(TensorError::Contract(format!("invert_prob {} outside [0, 1]", self.invert_prob)));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(TensorError::Contract(format!("jitter_sigma {} must be non-negative", self.jitter_sigma)));
        }
        Ok(())
    }
}

/// Two views of one record plus the draws that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPair {
    pub weak: Vec<Vec<f32>>,
    pub strong: Vec<Vec<f32>>,
    pub scale: f64,
    /// Source segment order of the strong view.
    pub permutation: Vec<usize>,
    pub inverted: bool,
}

/// Segment `i` of `n` covers `[i*len/n, (i+1)*len/n)`.
fn segment_bounds(len: usize, n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|i| (i * len / n, (i + 1) * len / n)).collect()
}

fn lead_std(lead: &[f32]) -> f64 {
    let n = lead.len() as f64;
    let mean = lead.iter().map(|&v| v as f64).sum::<f64>() / n;
    (lead.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn jitter(lead: &[f64], sigma: f64, rng: &mut Rng) -> Vec<f64> {
    if sigma == 0.0 {
        return lead.to_vec();
    }
    lead.iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            v + sigma * z
        })
        .collect()
}

/// Weak view: jitter then amplitude scaling. Strong view: segment
/// permutation, jitter, then optional sign inversion. The scale,
/// permutation and inversion draws are shared by all leads.
pub fn augment_pair(signal: &[Vec<f32>], cfg: &AugmentationConfig, rng: &mut Rng) -> Result<AugmentedPair, TensorError> {
    cfg.validate()?;
    let len = signal.first().map_or(0, Vec::len);
    if len == 0 || signal.iter().any(|l| l.len() != len) {
        return Err(TensorError::Dimension("signal leads must be non-empty and of equal length".into()));
    }
    if cfg.num_segments > len {
        return Err(TensorError::Contract(format!(
            "num_segments {} exceeds signal length {len}",
            cfg.num_segments
        )));
    }

    let (lo, hi) = cfg.scale_range;
    let scale = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let mut permutation: Vec<usize> = (0..cfg.num_segments).collect();
    permutation.shuffle(rng);
    let inverted = rng.random_bool(cfg.invert_prob);
    let bounds = segment_bounds(len, cfg.num_segments);

    let mut weak = Vec::with_capacity(signal.len());
    let mut strong = Vec::with_capacity(signal.len());
    for lead in signal {
        let sigma = cfg.jitter_sigma * lead_std(lead);
        let x: Vec<f64> = lead.iter().map(|&v| v as f64).collect();
        weak.push(jitter(&x, sigma, rng).into_iter().map(|v| (v * scale) as f32).collect());

        let mut permuted = Vec::with_capacity(len);
        for &s in &permutation {
            let (a, b) = bounds[s];
            permuted.extend_from_slice(&x[a..b]);
        }
        let sign = if inverted { -1.0 } else { 1.0 };
        strong.push(jitter(&permuted, sigma, rng).into_iter().map(|v| (sign * v) as f32).collect());
    }
    Ok(AugmentedPair {
        weak,
        strong,
        scale,
        permutation,
        inverted,
    })
}

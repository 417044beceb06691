//! Deterministic pseudo-ECG corpus with class-dependent signal motifs and
//! matching free-text reports.
//!
//! Each lead mixes three parts with fixed lead weights:
//! * a periodic pseudo-ECG built from the first heart-rate harmonics, with a
//!   per-record rate, phase and gain, plus slow baseline wander;
//! * the class motif: a sinusoid in a class-specific frequency band with a
//!   class-locked phase, and a Gaussian bump repeating every beat at a
//!   class-specific offset and width;
//! * white Gaussian noise at 0.1 of the motif amplitude.
//!
//! Reports embed the class display name in one of several phrasings and add
//! one to three distractor clauses shared by all classes.

use std::f64::consts::PI;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{DataError, EcgRecord, LabelTaxonomy, DEFAULT_FS, NUM_LEADS};
use crate::rng::{self, Rng};

pub const MIN_LENGTH: usize = 256;

const MOTIF_AMPLITUDE: f64 = 0.3;
const NOISE_FRACTION: f64 = 0.1;
const BASELINE_AMPLITUDE: f64 = 1.0;
const HARMONICS: [f64; 4] = [1.0, 0.55, 0.3, 0.15];

const PHRASINGS: [&str; 4] = [
    "{}",
    "findings consistent with {}",
    "impression: {}",
    "tracing demonstrates {}",
];

const DISTRACTORS: [&str; 8] = [
    "sinus rhythm",
    "rate within limits",
    "axis unremarkable",
    "no prior tracing for comparison",
    "baseline wander present",
    "borderline intervals",
    "technically adequate recording",
    "lead placement verified",
];

/// Fixed per-lead weights of (rhythm, motif).
fn lead_weights(lead: usize) -> (f64, f64) {
    let l = lead as f64;
    let rhythm = 0.6 + 0.4 * (0.7 * l).cos();
    let rhythm = if lead == 3 { -rhythm } else { rhythm };
    let motif = 0.7 + 0.3 * (1.3 * l).sin();
    (rhythm, motif)
}

struct ClassMotif {
    band_hz: f64,
    band_phase: f64,
    bump_offset: f64,
    bump_width_s: f64,
    bump_sign: f64,
}

fn class_motif(class: usize, num_classes: usize) -> ClassMotif {
    let c = class as f64;
    ClassMotif {
        band_hz: 4.0 + 3.0 * c,
        band_phase: 0.9 * c,
        bump_offset: 0.1 + 0.6 * c / num_classes as f64,
        bump_width_s: 0.01 + 0.015 * (class % 3) as f64,
        bump_sign: if class % 2 == 0 { 1.0 } else { -1.0 },
    }
}

fn synth_signal(class: usize, num_classes: usize, len: usize, rng: &mut Rng) -> Vec<Vec<f32>> {
    let fs = DEFAULT_FS as f64;
    let motif = class_motif(class, num_classes);
    let rate_hz = rng.random_range(55.0..95.0) / 60.0;
    let period = 1.0 / rate_hz;
    let beat_phase = rng.random_range(0.0..period);
    let gain = rng.random_range(0.6..1.4);
    let harmonic_phase: Vec<f64> = HARMONICS.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let wander_hz = rng.random_range(0.1..0.5);
    let wander_phase = rng.random_range(0.0..2.0 * PI);
    let motif_gain = rng.random_range(0.8..1.2) * MOTIF_AMPLITUDE;
    let band_jitter = rng.random_range(-0.3..0.3);

    let mut rhythm = vec![0.0; len];
    let mut class_part = vec![0.0; len];
    for i in 0..len {
        let t = i as f64 / fs;
        let mut r = 0.2 * (2.0 * PI * wander_hz * t + wander_phase).sin();
        for (h, (&amp, &ph)) in HARMONICS.iter().zip(&harmonic_phase).enumerate() {
            r += amp * (2.0 * PI * (h + 1) as f64 * rate_hz * t + ph).sin();
        }
        rhythm[i] = gain * BASELINE_AMPLITUDE * r;

        let band = 0.5 * (2.0 * PI * motif.band_hz * t + motif.band_phase + band_jitter).sin();
        // distance to the nearest bump centre
        let cycle = (t - beat_phase).rem_euclid(period);
        let centre = motif.bump_offset * period;
        let d = (cycle - centre).abs().min(period - (cycle - centre).abs());
        let bump = motif.bump_sign * (-0.5 * (d / motif.bump_width_s).powi(2)).exp();
        class_part[i] = motif_gain * (band + bump);
    }

    let noise = Normal::new(0.0, NOISE_FRACTION * MOTIF_AMPLITUDE).expect("positive sigma");
    (0..NUM_LEADS)
        .map(|lead| {
            let (wr, wm) = lead_weights(lead);
            (0..len)
                .map(|i| (wr * rhythm[i] + wm * class_part[i] + noise.sample(rng)) as f32)
                .collect()
        })
        .collect()
}

fn synth_report(display_name: &str, rng: &mut Rng) -> String {
    let phrasing = PHRASINGS.choose(rng).expect("non-empty");
    let count = rng.random_range(1..=3);
    let mut clauses: Vec<String> = DISTRACTORS
        .choose_multiple(rng, count)
        .map(|s| s.to_string())
        .collect();
    let at = rng.random_range(0..=clauses.len());
    clauses.insert(at, phrasing.replace("{}", display_name));
    clauses.join(". ") + "."
}

/// Generates `n` records, classes assigned round-robin then shuffled. The
/// output depends only on the arguments.
pub fn generate_synthetic(n: usize, taxonomy: &LabelTaxonomy, length_samples: usize, seed: u64) -> Result<Vec<EcgRecord>, DataError> {
    let k = taxonomy.len();
    if n < k {
        return Err(DataError::Config(format!("need at least {k} records for {k} classes, got {n}")));
    }
    if length_samples < MIN_LENGTH {
        return Err(DataError::Config(format!(
            "length {length_samples} is below the minimum of {MIN_LENGTH} samples"
        )));
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(&mut rng::stream(seed, &[0]));
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(i, class)| {
            let mut r = rng::stream(seed, &[1, i as u64]);
            let signal = synth_signal(class, k, length_samples, &mut r);
            let report = synth_report(&taxonomy.classes[class].display_name, &mut r);
            EcgRecord {
                id: format!("syn-{i:06}"),
                signal,
                sampling_rate_hz: DEFAULT_FS,
                report,
                label: Some(class),
            }
        })
        .collect())
}

use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::autodiff::gradcheck::{self, GradCheckConfig};
use crate::autodiff::{Graph, Tensor, TensorError};
use crate::rng;

const TAU: f64 = 0.07;

fn cfg() -> ContrastiveConfig {
    ContrastiveConfig {
        tau_cross: TAU,
        tau_ssl: TAU,
        batch_size: 4,
    }
}

fn unit_rows(b: usize, d: usize, seed: u64) -> Tensor<f64> {
    let mut r = rng::seeded(seed);
    let mut data = Vec::with_capacity(b * d);
    for _ in 0..b {
        let row: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(row.iter().map(|x| x / n));
    }
    Tensor::new(vec![b, d], data).unwrap()
}

fn eval(f: impl Fn(&Graph<f64>, crate::autodiff::Var, crate::autodiff::Var) -> Result<crate::autodiff::Var, TensorError>, a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let l = f(&g, va, vb).unwrap();
    let out = g.value(l).item().unwrap();
    out
}

fn cross(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    eval(|g, x, y| cross_modal_loss(g, x, y, &cfg()), a, b)
}

fn ssl(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    eval(|g, x, y| ssl_loss(g, x, y, &cfg()), a, b)
}

/// Direct evaluation of the per-row cross-entropy from dot products.
fn naive_direction(a: &Tensor<f64>, b: &Tensor<f64>, tau: f64) -> f64 {
    let (n, d) = (a.shape()[0], a.shape()[1]);
    let dot = |i: usize, j: usize| (0..d).map(|k| a.data()[i * d + k] * b.data()[j * d + k]).sum::<f64>();
    let mut total = 0.0;
    for i in 0..n {
        let denom: f64 = (0..n).map(|j| (dot(i, j) / tau).exp()).sum();
        total += -((dot(i, i) / tau).exp() / denom).ln();
    }
    total / n as f64
}

#[test]
fn orthogonal_pair_closed_form() {
    let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let want = (1.0 + (-1.0 / TAU).exp()).ln();
    assert!((cross(&eye, &eye) - want).abs() < 1e-9);
    assert!((ssl(&eye, &eye) - want).abs() < 1e-9);
    assert!((want - 6.2e-7).abs() < 1e-8);
}

#[test]
fn orthogonal_batch_ssl_closed_form() {
    for b in 2..6 {
        let mut data = vec![0.0; b * b];
        for i in 0..b {
            data[i * b + i] = 1.0;
        }
        let eye = Tensor::new(vec![b, b], data).unwrap();
        let want = (1.0 + (b as f64 - 1.0) * (-1.0 / TAU).exp()).ln();
        assert!((ssl(&eye, &eye) - want).abs() < 1e-9);
    }
}

#[test]
fn uniform_similarities_give_ln_b() {
    for b in [2usize, 3, 7, 32] {
        let same = Tensor::new(vec![b, 3], [0.6, 0.0, 0.8].repeat(b)).unwrap();
        let want = (b as f64).ln();
        assert!((cross(&same, &same) - want).abs() < 1e-9, "B={b}");
        assert!((ssl(&same, &same) - want).abs() < 1e-9, "B={b}");
    }
}

#[test]
fn matches_direct_evaluation() {
    for seed in 0..5 {
        let e = unit_rows(6, 5, seed);
        let t = unit_rows(6, 5, seed + 100);
        let want = 0.5 * (naive_direction(&e, &t, TAU) + naive_direction(&t, &e, TAU));
        assert!((cross(&e, &t) - want).abs() <= 1e-12 * want.max(1.0));
        let want_ssl = naive_direction(&e, &t, TAU);
        assert!((ssl(&e, &t) - want_ssl).abs() <= 1e-12 * want_ssl.max(1.0));
    }
}

#[test]
fn ssl_is_one_directional() {
    let e = unit_rows(4, 8, 1);
    let t = unit_rows(4, 8, 2);
    assert_ne!(ssl(&e, &t), ssl(&t, &e));
}

#[test]
fn contract_errors() {
    let one = unit_rows(1, 4, 0);
    let g = Graph::new();
    let (a, b) = (g.constant(one.clone()), g.constant(one.clone()));
    assert!(matches!(cross_modal_loss(&g, a, b, &cfg()), Err(TensorError::Contract(_))));
    assert!(matches!(ssl_loss(&g, a, b, &cfg()), Err(TensorError::Contract(_))));

    let raw = g.constant(Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, 1.0]).unwrap());
    let ok = g.constant(unit_rows(2, 2, 0));
    assert!(matches!(cross_modal_loss(&g, raw, ok, &cfg()), Err(TensorError::Contract(_))));
    let wide = g.constant(unit_rows(2, 3, 0));
    assert!(matches!(cross_modal_loss(&g, ok, wide, &cfg()), Err(TensorError::Dimension(_))));
}

#[test]
fn config_validation() {
    assert!(ContrastiveConfig::default().validate().is_ok());
    assert_eq!(ContrastiveConfig::default().tau_cross, 0.07);
    assert!(ContrastiveConfig { tau_cross: 0.0, ..Default::default() }.validate().is_err());
    assert!(ContrastiveConfig { tau_ssl: 1.5, ..Default::default() }.validate().is_err());
    assert!(ContrastiveConfig { batch_size: 1, ..Default::default() }.validate().is_err());
}

fn normalized_loss_check(which: fn(&Graph<f64>, crate::autodiff::Var, crate::autodiff::Var, &ContrastiveConfig) -> Result<crate::autodiff::Var, TensorError>, seed: u64) -> f64 {
    let mut r = rng::seeded(seed);
    let mut raw = |n| Tensor::new(vec![4, 8], (0..n).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap();
    let inputs = [raw(32), raw(32)];
    let report = gradcheck::check(&inputs, GradCheckConfig { seed, ..Default::default() }, |g, v| {
        let a = g.l2_normalize(v[0])?;
        let b = g.l2_normalize(v[1])?;
        which(g, a, b, &cfg())
    })
    .unwrap();
    report.max_rel_err
}

#[test]
fn cross_modal_gradient_ten_seeds() {
    for seed in 0..10 {
        let err = normalized_loss_check(cross_modal_loss, seed);
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn ssl_gradient() {
    for seed in 0..3 {
        let err = normalized_loss_check(ssl_loss, seed);
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn similarity_matrix_transposes() {
    let e = unit_rows(3, 4, 0);
    let t = unit_rows(3, 4, 1);
    let e2t = SimilarityMatrix::between(&e, &t, Direction::E2t).unwrap();
    let t2e = SimilarityMatrix::between(&t, &e, Direction::T2e).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let v = e2t.values.data()[i * 3 + j];
            assert_eq!(v, t2e.values.data()[j * 3 + i]);
            assert!(v.abs() <= 1.0 + 1e-6);
        }
    }
    assert!(SimilarityMatrix::between(&Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap(), &e, Direction::E2t).is_err());
}

/// Embeddings whose pairwise similarities are exactly `s[i][j]` against
/// the basis vectors used for the other side.
fn with_similarities(s: &[Vec<f64>]) -> (Tensor<f64>, Tensor<f64>) {
    let b = s.len();
    let d = b + 1;
    let mut e = vec![0.0; b * d];
    let mut t = vec![0.0; b * d];
    for i in 0..b {
        let mut sq = 0.0;
        for j in 0..b {
            e[i * d + j] = s[i][j];
            sq += s[i][j] * s[i][j];
        }
        e[i * d + b] = (1.0 - sq).sqrt();
        t[i * d + i] = 1.0;
    }
    (Tensor::new(vec![b, d], e).unwrap(), Tensor::new(vec![b, d], t).unwrap())
}

fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let d = t.shape()[1];
    let data = perm.iter().flat_map(|&p| t.data()[p * d..(p + 1) * d].to_vec()).collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn modality_swap_is_exact(seed in any::<u64>(), b in 2usize..9, d in 1usize..9) {
        let e = unit_rows(b, d, seed);
        let t = unit_rows(b, d, seed ^ 0xabc);
        prop_assert_eq!(cross(&e, &t).to_bits(), cross(&t, &e).to_bits());
    }

    #[test]
    fn batch_permutation_is_exact(seed in any::<u64>(), b in 2usize..9, perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let e = unit_rows(b, 5, seed);
        let t = unit_rows(b, 5, seed.wrapping_add(1));
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(&mut rng::seeded(perm_seed));
        let (pe, pt) = (permute_rows(&e, &perm), permute_rows(&t, &perm));
        prop_assert_eq!(cross(&e, &t).to_bits(), cross(&pe, &pt).to_bits());
        prop_assert_eq!(ssl(&e, &t).to_bits(), ssl(&pe, &pt).to_bits());
    }

    #[test]
    fn raising_a_diagonal_similarity_lowers_loss(
        s in prop::collection::vec(prop::collection::vec(-0.3f64..0.3, 4), 4),
        row in 0usize..4,
        bump in 0.01f64..0.2,
    ) {
        let (e, t) = with_similarities(&s);
        let mut s2 = s.clone();
        s2[row][row] += bump;
        let (e2, t2) = with_similarities(&s2);
        prop_assert!(cross(&e2, &t2) < cross(&e, &t));
        prop_assert!(ssl(&e2, &t2) < ssl(&e, &t));
    }

    #[test]
    fn loss_bounds(seed in any::<u64>(), b in 2usize..9) {
        let e = unit_rows(b, 6, seed);
        let t = unit_rows(b, 6, seed.wrapping_mul(3));
        let sim = SimilarityMatrix::between(&e, &t, Direction::E2t).unwrap();
        let min_sim = sim.values.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let upper = (b as f64).ln() + (1.0 - min_sim) / TAU;
        for l in [cross(&e, &t), ssl(&e, &t)] {
            prop_assert!(l > 0.0 && l < upper, "{} not in (0, {})", l, upper);
        }
    }
}

fn ramp(leads: usize, len: usize) -> Vec<Vec<f32>> {
    (0..leads)
        .map(|l| (0..len).map(|i| (i as f32 * 0.37 + l as f32).sin() + l as f32 * 0.01).collect())
        .collect()
}

fn quiet() -> AugmentationConfig {
    AugmentationConfig {
        jitter_sigma: 0.0,
        scale_range: (1.0, 1.0),
        num_segments: 2,
        invert_prob: 0.0,
        seed: 0,
    }
}

fn identity_draw(cfg: &AugmentationConfig, x: &[Vec<f32>]) -> AugmentedPair {
    (0..64u64)
        .map(|s| augment_pair(x, cfg, &mut rng::seeded(s)).unwrap())
        .find(|p| p.permutation.windows(2).all(|w| w[0] < w[1]))
        .expect("an identity permutation within 64 draws")
}

#[test]
fn degenerate_config_returns_input() {
    let x = ramp(12, 101);
    let p = identity_draw(&quiet(), &x);
    assert_eq!(p.weak, x);
    assert_eq!(p.strong, x);
    assert!(!p.inverted);
}

#[test]
fn forced_inversion_negates_strong_view() {
    let x = ramp(12, 64);
    let p = identity_draw(&AugmentationConfig { invert_prob: 1.0, ..quiet() }, &x);
    assert!(p.inverted);
    let neg: Vec<Vec<f32>> = x.iter().map(|l| l.iter().map(|v| -v).collect()).collect();
    assert_eq!(p.strong, neg);
    assert_eq!(p.weak, x);
}

#[test]
fn permutation_preserves_lead_multisets() {
    let x = ramp(12, 203);
    let cfg = AugmentationConfig { num_segments: 8, ..quiet() };
    for seed in 0..10 {
        let p = augment_pair(&x, &cfg, &mut rng::seeded(seed)).unwrap();
        for (a, b) in x.iter().zip(&p.strong) {
            let mut a = a.clone();
            let mut b = b.clone();
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            assert_eq!(a, b);
        }
    }
}

#[test]
fn leads_share_one_permutation() {
    let len = 80;
    let x: Vec<Vec<f32>> = (0..12).map(|l| (0..len).map(|i| (i * 100 + l) as f32).collect()).collect();
    let cfg = AugmentationConfig { num_segments: 8, ..quiet() };
    let p = augment_pair(&x, &cfg, &mut rng::seeded(3)).unwrap();
    for lead in &p.strong {
        let order: Vec<usize> = lead.iter().map(|&v| v as usize / 100).collect();
        assert_eq!(order, p.strong[0].iter().map(|&v| v as usize / 100).collect::<Vec<_>>());
    }
    let seg_starts: Vec<usize> = p.permutation.iter().map(|&s| s * len / 8).collect();
    let got: Vec<usize> = (0..8).map(|k| p.strong[0][k * len / 8] as usize / 100).collect();
    assert_eq!(got, seg_starts);
}

#[test]
fn weak_scale_within_range_and_jitter_scales_with_lead_std() {
    let x = ramp(12, 2000);
    let cfg = AugmentationConfig { jitter_sigma: 0.05, scale_range: (1.0, 1.0), ..quiet() };
    let p = augment_pair(&x, &cfg, &mut rng::seeded(1)).unwrap();
    for (a, b) in x.iter().zip(&p.weak) {
        let n = a.len() as f64;
        let mean = a.iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (a.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        let resid = (a.iter().zip(b).map(|(&u, &v)| (v as f64 - u as f64).powi(2)).sum::<f64>() / n).sqrt();
        assert!((resid / std - 0.05).abs() < 0.01, "{}", resid / std);
    }
    let scaled = AugmentationConfig { scale_range: (0.8, 1.2), ..quiet() };
    for s in 0..20 {
        let p = augment_pair(&x, &scaled, &mut rng::seeded(s)).unwrap();
        assert!((0.8..=1.2).contains(&p.scale));
        assert_eq!(p.weak[3][7], (x[3][7] as f64 * p.scale) as f32);
    }
}

#[test]
fn augmentation_is_seed_deterministic() {
    let x = ramp(12, 300);
    let cfg = AugmentationConfig::default();
    let a = augment_pair(&x, &cfg, &mut rng::seeded(9)).unwrap();
    let b = augment_pair(&x, &cfg, &mut rng::seeded(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn augmentation_errors() {
    let x = ramp(12, 5);
    let too_many = AugmentationConfig { num_segments: 6, ..quiet() };
    assert!(matches!(augment_pair(&x, &too_many, &mut rng::seeded(0)), Err(TensorError::Contract(_))));
    for bad in [
        AugmentationConfig { num_segments: 1, ..quiet() },
        AugmentationConfig { scale_range: (0.0, 1.0), ..quiet() },
        AugmentationConfig { scale_range: (1.2, 0.8), ..quiet() },
        AugmentationConfig { invert_prob: 1.5, ..quiet() },
    ] {
        assert!(bad.validate().is_err());
    }
}

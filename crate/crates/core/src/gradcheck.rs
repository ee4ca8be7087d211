//! Central-difference verification of every analytic gradient.
//!
//! Each `check_*` function builds a seeded random instance, computes the
//! analytic gradient, and compares it coordinate-by-coordinate against
//! `(f(x + h e_k) - f(x - h e_k)) / 2h`. The returned figure is the worst
//! relative error over the sampled coordinates, where the denominator is
//! `max(|analytic_k|, |fd_k|, max_k |analytic|, 1e-12)`: errors in small
//! components are judged against the gradient's overall scale, so
//! finite-difference roundoff on a near-zero coordinate does not masquerade
//! as an analytic bug.
//!
//! The value functions used here are the *unvalidated* loss cores: a
//! perturbed input is no longer exactly unit-norm, which is precisely the
//! point of differentiating through it.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::geom::{GridCell, GridPartition};
use crate::losses::{
    fusion_features_raw, kl_distill_raw, semantic_infonce_raw, stcr_loss_raw, LossConfig,
};
use crate::model::{backward, forward, EncoderParams};

/// Worst relative error between the analytic gradient and central
/// differences over the given coordinates of a flat parameter vector.
pub fn max_rel_error_flat(
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
    f: &mut dyn FnMut(&[f64]) -> f64,
) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let scale = analytic
        .iter()
        .fold(0.0f64, |acc, g| acc.max(g.abs()))
        .max(1e-12);
    let mut buf = x.to_vec();
    let mut worst = 0.0f64;
    for &k in coords {
        let orig = buf[k];
        buf[k] = orig + h;
        let f_plus = f(&buf);
        buf[k] = orig - h;
        let f_minus = f(&buf);
        buf[k] = orig;
        let fd = (f_plus - f_minus) / (2.0 * h);
        let an = analytic[k];
        let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(scale);
        worst = worst.max(rel);
    }
    worst
}

/// Up to `max_coords` distinct indices out of `0..total`, seeded.
pub fn sample_coords(total: usize, max_coords: usize, seed: u64) -> Vec<usize> {
    let mut all: Vec<usize> = (0..total).collect();
    if total <= max_coords {
        return all;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    all.truncate(max_coords);
    all.sort_unstable();
    all
}

/// Random rows normalized to unit length.
pub fn random_unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut m = Array2::zeros((n, d));
    for i in 0..n {
        loop {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for (k, x) in v.iter().enumerate() {
                    m[[i, k]] = x / norm;
                }
                break;
            }
        }
    }
    m
}

/// Random labels in `-1..c` with at least two distinct classes present.
pub fn random_labels(rng: &mut ChaCha8Rng, m: usize, c: usize, unlabeled_frac: f64) -> Vec<i32> {
    assert!(m >= 2 && c >= 2);
    loop {
        let labels: Vec<i32> = (0..m)
            .map(|_| {
                if rng.random_range(0.0..1.0) < unlabeled_frac {
                    -1
                } else {
                    rng.random_range(0..c) as i32
                }
            })
            .collect();
        let mut seen = std::collections::BTreeSet::new();
        for &l in &labels {
            if l >= 0 {
                seen.insert(l);
            }
        }
        if seen.len() >= 2 {
            return labels;
        }
    }
}

fn random_grid(rng: &mut ChaCha8Rng, m: usize, max_cells: usize) -> GridPartition {
    let cell_count = rng.random_range(1..=max_cells.min(m));
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); cell_count];
    for e in 0..m {
        let c = rng.random_range(0..cell_count);
        members[c].push(e);
    }
    GridPartition {
        cell_size: 1.0,
        cells: members
            .into_iter()
            .enumerate()
            .filter(|(_, m)| !m.is_empty())
            .map(|(i, m)| GridCell {
                index: [i as i64, 0, 0],
                members: m,
            })
            .collect(),
    }
}

fn rebuild(rows: usize, cols: usize, flat: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), flat.to_vec()).expect("shape matches flat length")
}

/// Gradient check for the class-partitioned contrastive loss.
pub fn check_semantic_infonce(seed: u64, h: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(4..16);
    let c = rng.random_range(2..5);
    let d = rng.random_range(3..8);
    let feats = random_unit_rows(&mut rng, m, d);
    let bank = random_unit_rows(&mut rng, c, d);
    let labels = random_labels(&mut rng, m, c, 0.15);
    let cfg = LossConfig {
        tau: rng.random_range(0.3..1.5),
        include_positives_in_denominator: seed % 2 == 0,
        ..LossConfig::default()
    };
    let report = semantic_infonce_raw(&feats.view(), &bank.view(), &labels, &cfg);
    let coords = sample_coords(m * d, 40, seed.wrapping_add(0x5eed));
    let flat = feats.as_slice().expect("standard layout").to_vec();
    let analytic = report
        .grad_points
        .as_slice()
        .expect("standard layout")
        .to_vec();
    max_rel_error_flat(&flat, &analytic, &coords, h, &mut |x| {
        let p = rebuild(m, d, x);
        semantic_infonce_raw(&p.view(), &bank.view(), &labels, &cfg).value
    })
}

/// Gradient check for the fused consistency loss.
///
/// With `stop_gradient` the objective holds the fused vectors fixed at
/// their base-point values; otherwise the fusion (attention weights
/// included) is recomputed inside the differentiated function.
pub fn check_stcr(seed: u64, h: f64, stop_gradient: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(4..14);
    let c = rng.random_range(2..5);
    let d = rng.random_range(3..8);
    let pixel = random_unit_rows(&mut rng, m, d);
    let point = random_unit_rows(&mut rng, m, d);
    let bank = random_unit_rows(&mut rng, c, d);
    let labels = random_labels(&mut rng, m, c, 0.1);
    let grid = random_grid(&mut rng, m, 4);
    let cfg = LossConfig {
        lambda: rng.random_range(0.4..1.6),
        stop_gradient_through_fusion: stop_gradient,
        ..LossConfig::default()
    };
    let base_fusion = fusion_features_raw(&grid, &pixel.view(), &point.view(), &labels, &bank.view(), &cfg);
    let report = stcr_loss_raw(&base_fusion, &point.view(), &bank.view(), &cfg);
    let coords = sample_coords(m * d, 40, seed.wrapping_add(0x57c2));
    let flat = point.as_slice().expect("standard layout").to_vec();
    let analytic = report
        .grad_points
        .as_slice()
        .expect("standard layout")
        .to_vec();
    max_rel_error_flat(&flat, &analytic, &coords, h, &mut |x| {
        let p = rebuild(m, d, x);
        let fusion = if stop_gradient {
            base_fusion.clone()
        } else {
            fusion_features_raw(&grid, &pixel.view(), &p.view(), &labels, &bank.view(), &cfg)
        };
        stcr_loss_raw(&fusion, &p.view(), &bank.view(), &cfg).value
    })
}

/// Gradient check for the pointwise distillation baseline.
pub fn check_kl(seed: u64, h: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(2..10);
    let c = rng.random_range(2..6);
    let d = rng.random_range(3..8);
    let point = random_unit_rows(&mut rng, m, d);
    let pixel = random_unit_rows(&mut rng, m, d);
    let bank = random_unit_rows(&mut rng, c, d);
    let tau = rng.random_range(0.3..1.5);
    let report = kl_distill_raw(&point.view(), &pixel.view(), &bank.view(), tau);
    let coords = sample_coords(m * d, 40, seed.wrapping_add(0x6b1));
    let flat = point.as_slice().expect("standard layout").to_vec();
    let analytic = report
        .grad_points
        .as_slice()
        .expect("standard layout")
        .to_vec();
    max_rel_error_flat(&flat, &analytic, &coords, h, &mut |x| {
        let p = rebuild(m, d, x);
        kl_distill_raw(&p.view(), &pixel.view(), &bank.view(), tau).value
    })
}

/// Gradient check for the encoder backward pass.
///
/// The differentiated scalar is `sum(G_s . feats_s) + sum(G_t . feats_t)`
/// for fixed random `G_s`, `G_t`; by linearity its parameter gradient is
/// exactly what `backward` produces. Coordinates are sampled from every
/// parameter block so weight matrices and biases of both heads all get
/// exercised.
pub fn check_model_backward(seed: u64, h: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden = 10;
    let dim = 6;
    let n = 20;
    let params = EncoderParams::init(seed.wrapping_add(0xe8c), hidden, dim);
    let mut points = Array2::zeros((n, 3));
    for v in points.iter_mut() {
        *v = rng.sample::<f64, _>(StandardNormal) * 2.0;
    }
    let mut g_s = Array2::zeros((n, dim));
    let mut g_t = Array2::zeros((n, dim));
    for v in g_s.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    for v in g_t.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    let fwd = forward(&params, &points.view());
    let grads = backward(&params, &fwd.cache, &g_s.view(), &g_t.view())
        .expect("matching shapes by construction");

    let mut coords = Vec::new();
    for (i, (_, span)) in params.block_spans().iter().enumerate() {
        let within = sample_coords(span.len(), 6, seed.wrapping_add(0xb10c + i as u64));
        coords.extend(within.into_iter().map(|k| span.start + k));
    }
    max_rel_error_flat(&params.data, &grads.data, &coords, h, &mut |x| {
        let p = EncoderParams {
            hidden,
            dim,
            data: x.to_vec(),
        };
        let out = forward(&p, &points.view());
        let mut j = 0.0;
        for (a, b) in out.feats_s.iter().zip(g_s.iter()) {
            j += a * b;
        }
        for (a, b) in out.feats_t.iter().zip(g_t.iter()) {
            j += a * b;
        }
        j
    })
}

// --- brute-force oracle audits -------------------------------------------------
//
// Each `oracle_gap_*` function builds a seeded random instance within the
// documented size bounds, evaluates both the stabilized implementation and
// the deliberately naive double-loop reference, and returns
// `|fast - slow| / max(|slow|, 1)`. `fusion_convexity` audits the fusion
// weights of one instance instead of a loss value.

/// Oracle gap for the class-partitioned contrastive loss on one random
/// instance with at most 30 entries and 5 classes. Even seeds use the
/// conventional denominator (positives included), odd seeds exclude them.
pub fn oracle_gap_infonce(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(2..=30);
    let c = rng.random_range(2..=5);
    let d = rng.random_range(2..10);
    let feats = random_unit_rows(&mut rng, m, d);
    let bank = random_unit_rows(&mut rng, c, d);
    let labels = random_labels(&mut rng, m, c, 0.15);
    let cfg = LossConfig {
        tau: rng.random_range(0.2..2.0),
        include_positives_in_denominator: seed % 2 == 0,
        ..LossConfig::default()
    };
    let fast = semantic_infonce_raw(&feats.view(), &bank.view(), &labels, &cfg).value;
    let slow = crate::losses::naive::semantic_infonce_value(&feats.view(), &bank.view(), &labels, &cfg);
    (fast - slow).abs() / slow.abs().max(1.0)
}

/// Oracle gap for the fused consistency loss on one random instance with at
/// most 30 entries, 5 classes, and 8 grid cells.
pub fn oracle_gap_stcr(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(2..=30);
    let c = rng.random_range(2..=5);
    let d = rng.random_range(2..10);
    let pixel = random_unit_rows(&mut rng, m, d);
    let point = random_unit_rows(&mut rng, m, d);
    let bank = random_unit_rows(&mut rng, c, d);
    let labels = random_labels(&mut rng, m, c, 0.1);
    let grid = random_grid(&mut rng, m, 8);
    let cfg = LossConfig {
        lambda: rng.random_range(0.4..1.6),
        ..LossConfig::default()
    };
    let fusion = fusion_features_raw(&grid, &pixel.view(), &point.view(), &labels, &bank.view(), &cfg);
    let fast = stcr_loss_raw(&fusion, &point.view(), &bank.view(), &cfg).value;
    let slow =
        crate::losses::naive::stcr_value(&grid, &pixel.view(), &point.view(), &labels, &bank.view(), &cfg);
    (fast - slow).abs() / slow.abs().max(1.0)
}

/// Oracle gap for the pointwise distillation loss on one random instance
/// with at most 30 pairs and 5 classes.
pub fn oracle_gap_kl(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(1..=30);
    let c = rng.random_range(2..=5);
    let d = rng.random_range(2..10);
    let point = random_unit_rows(&mut rng, m, d);
    let pixel = random_unit_rows(&mut rng, m, d);
    let bank = random_unit_rows(&mut rng, c, d);
    let tau = rng.random_range(0.2..2.0);
    let fast = kl_distill_raw(&point.view(), &pixel.view(), &bank.view(), tau).value;
    let slow = crate::losses::naive::kl_value(&point.view(), &pixel.view(), &bank.view(), tau);
    (fast - slow).abs() / slow.abs().max(1.0)
}

/// Audits the fusion weights of one random instance. Returns the worst
/// `|Σ(weights) - 1|` over cells and the smallest individual weight, so a
/// caller can assert both convexity and strict positivity.
pub fn fusion_convexity(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(2..=30);
    let c = rng.random_range(2..=5);
    let d = rng.random_range(2..10);
    let pixel = random_unit_rows(&mut rng, m, d);
    let point = random_unit_rows(&mut rng, m, d);
    let bank = random_unit_rows(&mut rng, c, d);
    let labels = random_labels(&mut rng, m, c, 0.1);
    let grid = random_grid(&mut rng, m, 8);
    let cfg = LossConfig {
        lambda: rng.random_range(0.4..1.6),
        ..LossConfig::default()
    };
    let fusion = fusion_features_raw(&grid, &pixel.view(), &point.view(), &labels, &bank.view(), &cfg);
    let mut worst_sum = 0.0f64;
    let mut min_weight = f64::INFINITY;
    for cell in &fusion.cells {
        let total: f64 = cell
            .weight_pixel
            .iter()
            .chain(cell.weight_point.iter())
            .sum();
        worst_sum = worst_sum.max((total - 1.0).abs());
        for &w in cell.weight_pixel.iter().chain(cell.weight_point.iter()) {
            min_weight = min_weight.min(w);
        }
    }
    (worst_sum, min_weight)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harness_agrees_with_a_closed_form_gradient() {
        // f(x) = sum_k (k + 1) x_k^2, grad_k = 2 (k + 1) x_k.
        let x: Vec<f64> = (0..8).map(|k| 0.3 + 0.1 * k as f64).collect();
        let analytic: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(k, v)| 2.0 * (k as f64 + 1.0) * v)
            .collect();
        let coords: Vec<usize> = (0..8).collect();
        let err = max_rel_error_flat(&x, &analytic, &coords, 1e-6, &mut |v| {
            v.iter()
                .enumerate()
                .map(|(k, x)| (k as f64 + 1.0) * x * x)
                .sum()
        });
        assert!(err < 1e-8, "harness self-check error {err}");
    }

    #[test]
    fn harness_flags_a_wrong_gradient() {
        let x = vec![0.5, -0.25, 1.0];
        let wrong = vec![1.0, 1.0, 1.0];
        let coords = vec![0, 1, 2];
        let err = max_rel_error_flat(&x, &wrong, &coords, 1e-6, &mut |v| {
            v.iter().map(|x| x * x).sum()
        });
        assert!(err > 0.1);
    }

    #[test]
    fn coordinate_sampling_is_distinct_and_in_range() {
        let coords = sample_coords(100, 30, 7);
        assert_eq!(coords.len(), 30);
        let set: std::collections::BTreeSet<_> = coords.iter().collect();
        assert_eq!(set.len(), 30);
        assert!(coords.iter().all(|&k| k < 100));
        assert_eq!(sample_coords(10, 30, 7), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn contrastive_gradient_passes() {
        for seed in 0..8 {
            let err = check_semantic_infonce(seed, 1e-6);
            assert!(err <= 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn consistency_gradient_passes_in_both_modes() {
        for seed in 0..8 {
            let full = check_stcr(seed, 1e-6, false);
            assert!(full <= 1e-6, "full mode seed {seed}: {full}");
            let stop = check_stcr(seed, 1e-6, true);
            assert!(stop <= 1e-6, "stop mode seed {seed}: {stop}");
        }
    }

    #[test]
    fn distillation_gradient_passes() {
        for seed in 0..8 {
            let err = check_kl(seed, 1e-6);
            assert!(err <= 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn encoder_backward_passes() {
        for seed in 0..4 {
            let err = check_model_backward(seed, 1e-6);
            assert!(err <= 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn stop_gradient_mode_checks_a_genuinely_different_objective() {
        // The two modes disagree on the analytic gradient, so swapping
        // reports between them must fail the check.
        let seed = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.random_range(4..14);
        let c = rng.random_range(2..5);
        let d = rng.random_range(3..8);
        let pixel = random_unit_rows(&mut rng, m, d);
        let point = random_unit_rows(&mut rng, m, d);
        let bank = random_unit_rows(&mut rng, c, d);
        let labels = random_labels(&mut rng, m, c, 0.1);
        let grid = random_grid(&mut rng, m, 4);
        let full_cfg = LossConfig::default();
        let stop_cfg = LossConfig {
            stop_gradient_through_fusion: true,
            ..LossConfig::default()
        };
        let fusion =
            fusion_features_raw(&grid, &pixel.view(), &point.view(), &labels, &bank.view(), &full_cfg);
        let full = stcr_loss_raw(&fusion, &point.view(), &bank.view(), &full_cfg);
        let stop = stcr_loss_raw(&fusion, &point.view(), &bank.view(), &stop_cfg);
        let coords = sample_coords(m * d, 40, 99);
        let flat = point.as_slice().unwrap().to_vec();
        // Full objective against the stop-gradient analytic gradient.
        let mismatched = max_rel_error_flat(
            &flat,
            stop.grad_points.as_slice().unwrap(),
            &coords,
            1e-6,
            &mut |x| {
                let p = rebuild(m, d, x);
                let fusion =
                    fusion_features_raw(&grid, &pixel.view(), &p.view(), &labels, &bank.view(), &full_cfg);
                stcr_loss_raw(&fusion, &p.view(), &bank.view(), &full_cfg).value
            },
        );
        assert!(
            mismatched > 1e-4,
            "stop-gradient gradient unexpectedly matches the full objective: {mismatched}"
        );
        assert!(full.grad_points != stop.grad_points);
    }

    #[test]
    fn oracle_gaps_stay_tiny_on_sample_seeds() {
        for seed in 0..20 {
            let a = oracle_gap_infonce(seed);
            let b = oracle_gap_stcr(seed);
            let c = oracle_gap_kl(seed);
            assert!(a <= 1e-10, "contrastive seed {seed}: {a}");
            assert!(b <= 1e-10, "consistency seed {seed}: {b}");
            assert!(c <= 1e-10, "distillation seed {seed}: {c}");
        }
    }

    #[test]
    fn fusion_convexity_holds_on_sample_seeds() {
        for seed in 0..20 {
            let (gap, min_w) = fusion_convexity(seed);
            assert!(gap <= 1e-12, "seed {seed}: weight sum off by {gap}");
            assert!(min_w > 0.0, "seed {seed}: non-positive weight {min_w}");
        }
    }
}

mod common;

use common::*;
use glip_core::loss::ot1d::{dual_value_1d, w1_oracle_1d, DualOptions};
use glip_core::loss::{evaluate, glip_loss, grid_lipschitz_penalty, ot_loss, with_grid_penalty, BatchTensor};
use glip_core::{LossKind, LossSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_target(rng: &mut ChaCha8Rng, shape: [usize; 5]) -> BatchTensor {
    let n = shape.iter().product();
    BatchTensor::new(shape, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn random_pred(rng: &mut ChaCha8Rng, shape: [usize; 5], lo: f64, hi: f64) -> BatchTensor {
    let n = shape.iter().product();
    BatchTensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn analytic_gradients_match_central_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in loss_specs() {
            let (pred, target) = random_loss_inputs(&mut rng, &spec);
            let err = fd_gradient_error(&spec, &pred, &target);
            prop_assert!(err <= FD_RTOL, "{}: relative gradient error {err:e}", spec.tag());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ot_is_shift_invariant(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = random_target(&mut rng, GRAD_SHAPE);
        let pred = random_pred(&mut rng, GRAD_SHAPE, -3.0, 3.0);
        let mut moved = pred.clone();
        moved.values.iter_mut().for_each(|v| *v += shift);
        let a = ot_loss(&pred, &target).unwrap();
        let b = ot_loss(&moved, &target).unwrap();
        prop_assert!((a.value - b.value).abs() <= 1e-9 * (1.0 + a.value.abs()), "{} vs {}", a.value, b.value);
        prop_assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn ot_of_constant_prediction_is_zero(seed in any::<u64>(), c in -1e3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = random_target(&mut rng, GRAD_SHAPE);
        prop_assert_eq!(ot_loss(&BatchTensor::filled(GRAD_SHAPE, c), &target).unwrap().value, 0.0);
    }

    /// Raising the prediction where `h > P / (P + N)` lowers the loss, elsewhere raises it.
    #[test]
    fn ot_rewards_mass_where_heatmap_dominates(seed in any::<u64>(), k in 0usize..240, step in 0.01f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = random_target(&mut rng, GRAD_SHAPE);
        let pred = random_pred(&mut rng, GRAD_SHAPE, -1.0, 1.0);
        let nv: usize = GRAD_SHAPE[2..].iter().product();
        let (nl, c) = (GRAD_SHAPE[1], (k / nv) % GRAD_SHAPE[1]);
        let p: f64 = (0..GRAD_SHAPE[0]).flat_map(|b| target.channel(b, c).to_vec()).sum();
        let n = (GRAD_SHAPE[0] * nv) as f64 - p;
        let h = target.values[k];
        let threshold = p / (p + n);
        prop_assume!((h - threshold).abs() > 1e-6);
        let before = ot_loss(&pred, &target).unwrap().value;
        let mut up = pred.clone();
        up.values[k] += step;
        let after = ot_loss(&up, &target).unwrap().value;
        let expected = step / (GRAD_SHAPE[0] * nl) as f64 * (-h / p + (1.0 - h) / n);
        if h > threshold {
            prop_assert!(after < before);
        } else {
            prop_assert!(after > before);
        }
        prop_assert!((after - before - expected).abs() <= 1e-9);
    }

    #[test]
    fn penalty_matches_edge_sum(seed in any::<u64>(), one_sided in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = random_pred(&mut rng, GRAD_SHAPE, -3.0, 3.0);
        let dims = [GRAD_SHAPE[2], GRAD_SHAPE[3], GRAD_SHAPE[4]];
        let mut oracle = 0.0;
        for b in 0..GRAD_SHAPE[0] {
            for c in 0..GRAD_SHAPE[1] {
                let f = pred.channel(b, c);
                oracle += if one_sided { one_sided_oracle(f, dims) } else { penalty_oracle(f, dims) };
            }
        }
        oracle /= GRAD_SHAPE[0] as f64;
        let v = grid_lipschitz_penalty(&pred, one_sided).unwrap().value;
        prop_assert!((v - oracle).abs() <= 1e-9 * oracle.max(1.0), "{v} vs {oracle}");
    }

    /// `f = sx x + sy y + sz z + c` with unit slopes has zero penalty and zero gradient.
    #[test]
    fn unit_slope_fields_have_zero_penalty(
        signs in prop::array::uniform3(prop::bool::ANY),
        c in -1000i32..1000,
        d in prop::array::uniform3(2usize..6),
    ) {
        let shape = [1, 1, d[0], d[1], d[2]];
        let s = signs.map(|b| if b { 1.0 } else { -1.0 });
        let mut values = Vec::new();
        for z in 0..d[0] {
            for y in 0..d[1] {
                for x in 0..d[2] {
                    values.push(s[0] * z as f64 + s[1] * y as f64 + s[2] * x as f64 + c as f64);
                }
            }
        }
        let pen = grid_lipschitz_penalty(&BatchTensor::new(shape, values).unwrap(), false).unwrap();
        prop_assert_eq!(pen.value, 0.0);
        prop_assert!(pen.grad.iter().all(|g| *g == 0.0));
    }

    /// Any edge whose slope is not unit makes the penalty positive.
    #[test]
    fn off_unit_slope_is_penalized(k in 0usize..24, bump in prop_oneof![-0.9f64..-1e-3, 1e-3f64..0.9]) {
        let shape = [1, 1, 2, 3, 4];
        let mut values: Vec<f64> = (0..24).map(|i| {
            let (z, y, x) = (i / 12, (i / 4) % 3, i % 4);
            (z + y + x) as f64
        }).collect();
        values[k] += bump;
        let pen = grid_lipschitz_penalty(&BatchTensor::new(shape, values).unwrap(), false).unwrap();
        prop_assert!(pen.value > 0.0);
    }

    #[test]
    fn zero_lambda_reduces_to_base_bitwise(seed in any::<u64>(), kind_index in 0usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = random_target(&mut rng, GRAD_SHAPE);
        let kind = LossKind::ALL[kind_index];
        let pred = if kind.is_probabilistic() {
            random_pred(&mut rng, GRAD_SHAPE, 0.01, 0.99)
        } else {
            random_pred(&mut rng, GRAD_SHAPE, -2.0, 2.0)
        };
        if kind == LossKind::Glip {
            let a = glip_loss(&pred, &target, 0.0, false).unwrap();
            let b = ot_loss(&pred, &target).unwrap();
            prop_assert_eq!(a.value.to_bits(), b.value.to_bits());
            prop_assert_eq!(a.grad, b.grad);
            prop_assert!(with_grid_penalty(&LossSpec::new(kind), 0.0).is_err());
        } else if kind != LossKind::OtOnly {
            let base = LossSpec::new(kind);
            let a = evaluate(&with_grid_penalty(&base, 0.0).unwrap(), &pred, &target).unwrap();
            let b = evaluate(&base, &pred, &target).unwrap();
            prop_assert_eq!(a.value.to_bits(), b.value.to_bits());
            prop_assert_eq!(a.grad, b.grad);
        }
    }
}

fn one_sided_oracle(f: &[f64], dims: [usize; 3]) -> f64 {
    let [a, b, c] = dims;
    let at = |z: usize, y: usize, x: usize| f[(z * b + y) * c + x];
    let mut s = 0.0;
    let mut edge = |u: f64, v: f64| {
        let e = ((u - v).abs() - 1.0).max(0.0);
        s += e * e;
    };
    for z in 0..a {
        for y in 0..b {
            for x in 0..c {
                if z + 1 < a {
                    edge(at(z, y, x), at(z + 1, y, x));
                }
                if y + 1 < b {
                    edge(at(z, y, x), at(z, y + 1, x));
                }
                if x + 1 < c {
                    edge(at(z, y, x), at(z, y, x + 1));
                }
            }
        }
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dual_ascent_approaches_w1(seed in any::<u64>(), bins in 2usize..=32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu: Vec<f64> = (0..bins).map(|_| rng.random::<f64>()).collect();
        let nu: Vec<f64> = (0..bins).map(|_| rng.random::<f64>()).collect();
        let spacing = rng.random_range(0.5..2.0);
        let w1 = w1_oracle_1d(&mu, &nu, spacing).unwrap();
        prop_assume!(w1 > 1e-6);
        let dual = dual_value_1d(&mu, &nu, spacing, DualOptions::default()).unwrap();
        prop_assert!((dual.value - w1).abs() <= 0.05 * w1, "dual {} vs W1 {w1}", dual.value);
    }

    #[test]
    fn w1_matches_exhaustive_coupling(seed in any::<u64>(), bins in 1usize..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu = random_units(&mut rng, bins, 8);
        let nu = random_units(&mut rng, bins, 8);
        let spacing = [0.5, 1.0, 2.0][rng.random_range(0..3)];
        let as_f = |m: &[usize]| m.iter().map(|&v| v as f64).collect::<Vec<_>>();
        let w1 = w1_oracle_1d(&as_f(&mu), &as_f(&nu), spacing).unwrap();
        prop_assert_eq!(w1, exhaustive_w1(&mu, &nu, spacing));
    }
}

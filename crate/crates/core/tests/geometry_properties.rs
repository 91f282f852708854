mod common;

use common::*;
use glip_core::metrics::{avg_projection_distance, plane_angle, plane_from_points, sdr, Plane};
use glip_core::vec3::{add, scale, Vec3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn perturbed(rng: &mut ChaCha8Rng, t: &[Vec3; 3], amount: f64) -> [Vec3; 3] {
    t.map(|p| std::array::from_fn(|a| p[a] + rng.random_range(-amount..amount)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn dpp_is_symmetric_and_matches_hessian_form(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_triple(&mut rng);
        let pred = perturbed(&mut rng, &gt, 5.0);
        prop_assume!(plane_from_points(pred[0], pred[1], pred[2]).is_ok());
        let ab = avg_projection_distance(&gt, &pred).unwrap();
        let ba = avg_projection_distance(&pred, &gt).unwrap();
        prop_assert_eq!(ab.to_bits(), ba.to_bits());
        let oracle = dpp_oracle(&gt, &pred);
        prop_assert!((ab - oracle).abs() <= 1e-9 * oracle.max(1e-12), "{ab} vs {oracle}");
    }

    #[test]
    fn dpp_is_rigid_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_triple(&mut rng);
        let pred = perturbed(&mut rng, &gt, 5.0);
        prop_assume!(plane_from_points(pred[0], pred[1], pred[2]).is_ok());
        let before = avg_projection_distance(&gt, &pred).unwrap();
        prop_assume!(before > 1e-3);
        let m = Rigid::random(&mut rng);
        let after = avg_projection_distance(&gt.map(|p| m.apply(p)), &pred.map(|p| m.apply(p))).unwrap();
        prop_assert!((before - after).abs() <= 1e-9 * before, "{before} vs {after}");
    }

    /// Shifting the whole triple by `t` along its normal gives `d^PP = t`.
    #[test]
    fn normal_offset_is_recovered(seed in any::<u64>(), t in 0.0f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_triple(&mut rng);
        let n = plane_from_points(gt[0], gt[1], gt[2]).unwrap().normal;
        let pred = gt.map(|p| add(p, scale(n, t)));
        let d = avg_projection_distance(&gt, &pred).unwrap();
        prop_assert!((d - t).abs() <= 1e-9 * t.max(1.0), "{d} vs {t}");
    }

    #[test]
    fn plane_angle_is_in_range_and_ignores_orientation(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_triple(&mut rng);
        let b = random_triple(&mut rng);
        let pa = plane_from_points(a[0], a[1], a[2]).unwrap();
        let pb = plane_from_points(b[0], b[1], b[2]).unwrap();
        let angle = plane_angle(&pa, &pb);
        prop_assert!((0.0..=90.0).contains(&angle));
        let flipped = Plane { normal: pb.normal.map(|v| -v), ..pb };
        prop_assert_eq!(plane_angle(&pa, &flipped).to_bits(), angle.to_bits());
        prop_assert_eq!(plane_angle(&pb, &pa).to_bits(), angle.to_bits());
        let reordered = plane_from_points(b[1], b[0], b[2]).unwrap();
        prop_assert!((plane_angle(&pa, &reordered) - angle).abs() <= 1e-9 * angle.max(1.0));
    }

    #[test]
    fn sdr_is_monotone_and_reaches_one(
        errors in prop::collection::vec(0.0f64..100.0, 1..50),
        mut thresholds in prop::collection::vec(0.0f64..120.0, 1..20),
    ) {
        thresholds.sort_by(f64::total_cmp);
        thresholds.push(f64::INFINITY);
        let rates = sdr(&errors, &thresholds).unwrap();
        prop_assert!(rates.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(rates.iter().all(|r| (0.0..=1.0).contains(r)));
        prop_assert_eq!(*rates.last().unwrap(), 1.0);
        let max = errors.iter().copied().fold(0.0, f64::max);
        let above: Vec<f64> = thresholds.iter().copied().filter(|t| *t > max).collect();
        prop_assert!(sdr(&errors, &above).unwrap().iter().all(|r| *r == 1.0));
    }
}

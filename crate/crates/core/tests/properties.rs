use std::f64::consts::{FRAC_PI_2, PI, TAU};

use contranerf_core::discriminator::normalize_embedding;
use contranerf_core::geometry::{
    canonical_yaw, generate_rays, pose_to_matrix, pose_to_vector, sample_pose, vector_to_pose,
    CameraPose, PoseDistribution, PosePreset,
};
use contranerf_core::image::Image;
use contranerf_core::metrics::{frechet_distance, sweep_yaws, FeatureSet};
use contranerf_core::objectives::{
    cosine_similarity, info_nce, pose_regression_loss, softplus_gan_f, PoseNorm,
};
use contranerf_core::render::composite;
use contranerf_core::rng::{stream_rng, Stream};
use proptest::prelude::*;

fn unit(v: Vec<f64>) -> Vec<f64> {
    normalize_embedding(&v)
}

fn vec_m(m: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, m)
        .prop_filter("non-zero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
}

fn pose_strategy() -> impl Strategy<Value = CameraPose> {
    (
        0.05f64..PI - 0.05,
        -10.0f64..10.0,
        0.5f64..5.0,
        0.05f64..2.5,
    )
        .prop_map(|(p, y, r, f)| CameraPose::new(p, y, r, f).unwrap())
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn yaw_is_canonical(yaw in -1e3f64..1e3) {
        let y = canonical_yaw(yaw);
        prop_assert!((0.0..TAU).contains(&y));
        let d = (y - yaw) / TAU;
        prop_assert!((d - d.round()).abs() < 1e-9);
    }

    #[test]
    fn rotation_block_is_orthonormal(pose in pose_strategy()) {
        let m = pose_to_matrix(&pose).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[i][k] * m[j][k]).sum();
                prop_assert!((dot - f64::from(u8::from(i == j))).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rays_are_unit_and_centre_hits_origin(pose in pose_strategy(), half in 0usize..4) {
        let res = 2 * half + 1;
        let rays = generate_rays(&pose, res, 0.1, 10.0).unwrap();
        for d in &rays.directions {
            prop_assert!((norm(*d) - 1.0).abs() < 1e-6);
        }
        let c = res * half + half;
        let (o, d) = (rays.origins[c], rays.directions[c]);
        let t = -(o[0] * d[0] + o[1] * d[1] + o[2] * d[2]);
        let closest = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
        prop_assert!(norm(closest) < 1e-6);
    }

    #[test]
    fn rays_rotate_with_yaw(pose in pose_strategy(), delta in -3.0f64..3.0) {
        let turned = CameraPose::new(pose.pitch, pose.yaw + delta, pose.radius, pose.fov).unwrap();
        let a = generate_rays(&pose, 3, 0.1, 10.0).unwrap();
        let b = generate_rays(&turned, 3, 0.1, 10.0).unwrap();
        let (s, c) = delta.sin_cos();
        for (da, db) in a.directions.iter().zip(&b.directions) {
            let r = [c * da[0] - s * da[1], s * da[0] + c * da[1], da[2]];
            for k in 0..3 {
                prop_assert!((r[k] - db[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pose_vector_round_trip(pose in pose_strategy()) {
        let back = vector_to_pose(pose_to_vector(&pose), pose.radius, pose.fov).unwrap();
        prop_assert_eq!(back, pose);
    }

    #[test]
    fn sampling_is_deterministic(seed in any::<u64>(), preset in 0usize..4) {
        let dist = PoseDistribution::preset(PosePreset::ALL[preset]);
        let mut a = stream_rng(seed, 0, Stream::Poses);
        let mut b = stream_rng(seed, 0, Stream::Poses);
        for _ in 0..8 {
            let p = sample_pose(&dist, &mut a).unwrap();
            prop_assert_eq!(p, sample_pose(&dist, &mut b).unwrap());
            prop_assert!(p.pitch > 0.0 && p.pitch < PI && (0.0..TAU).contains(&p.yaw));
        }
    }

    #[test]
    fn compositing_weights_bound_opacity(
        dens in prop::collection::vec(0.0f64..20.0, 1..8),
        bump in 0usize..8,
        extra in 0.0f64..5.0,
    ) {
        let s = dens.len();
        let t: Vec<f64> = (0..s).map(|i| 1.0 + 0.25 * i as f64).collect();
        let vals = vec![1.0; s];
        let out = composite(&dens, &vals, &t, 0.25, &[0.0]).unwrap();
        prop_assert!((0.0..=1.0).contains(&out.opacity));
        // With unit values over a black background the output is the weight sum.
        prop_assert!((out.value[0] - out.opacity).abs() < 1e-12);
        let mut more = dens.clone();
        more[bump % s] += extra;
        let out2 = composite(&more, &vals, &t, 0.25, &[0.0]).unwrap();
        prop_assert!(out2.opacity >= out.opacity - 1e-15);
    }

    #[test]
    fn embedding_direction_is_scale_invariant(u in vec_m(6), k in 1e-3f64..1e3) {
        let a = normalize_embedding(&u);
        let scaled: Vec<f64> = u.iter().map(|x| k * x).collect();
        let b = normalize_embedding(&scaled);
        let n: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((n - 1.0).abs() < 1e-6);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_in_range(u in vec_m(5), v in vec_m(5)) {
        let c = cosine_similarity(&u, &v);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
    }

    #[test]
    fn info_nce_positive_and_rescaling_invariant(
        a in vec_m(8),
        p in vec_m(8),
        negs in prop::collection::vec(vec_m(8), 1..6),
        k in 0.01f64..100.0,
        tau in prop::sample::select(vec![0.1, 0.25, 1.0]),
    ) {
        let (ua, up) = (unit(a.clone()), unit(p.clone()));
        let un: Vec<Vec<f64>> = negs.iter().cloned().map(unit).collect();
        let refs: Vec<&[f64]> = un.iter().map(|v| v.as_slice()).collect();
        let l = info_nce(&ua, &up, &refs, tau).unwrap();
        prop_assert!(l > 0.0);
        let scale = |v: &Vec<f64>| unit(v.iter().map(|x| k * x).collect());
        let sn: Vec<Vec<f64>> = negs.iter().map(scale).collect();
        let srefs: Vec<&[f64]> = sn.iter().map(|v| v.as_slice()).collect();
        let l2 = info_nce(&scale(&a), &scale(&p), &srefs, tau).unwrap();
        prop_assert!((l - l2).abs() < 1e-9 * l.max(1.0));
    }

    #[test]
    fn info_nce_decreases_as_positive_aligns(steps in 3usize..12, neg_angle in 0.3f64..3.0) {
        // Anchor e0; positive rotated towards e0; one negative fixed.
        let anchor = [1.0, 0.0, 0.0];
        let neg = [neg_angle.cos(), neg_angle.sin(), 0.0];
        let mut prev = f64::INFINITY;
        for i in 0..steps {
            let theta = PI * (1.0 - i as f64 / (steps - 1) as f64);
            let pos = [theta.cos(), 0.0, theta.sin()];
            let l = info_nce(&anchor, &pos, &[&neg], 0.25).unwrap();
            prop_assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn gan_f_identity(u in -30.0f64..30.0) {
        prop_assert!((softplus_gan_f(u) - softplus_gan_f(-u) - u).abs() < 1e-12);
        prop_assert!(softplus_gan_f(u) <= 0.0);
    }

    #[test]
    fn pose_loss_zero_only_at_target(e in prop::array::uniform2(-3.0f64..3.0), c in prop::array::uniform2(-3.0f64..3.0)) {
        for norm in [PoseNorm::L1, PoseNorm::L2] {
            prop_assert_eq!(pose_regression_loss(c, c, norm), 0.0);
            prop_assert!(pose_regression_loss(e, c, norm) >= 0.0);
        }
        prop_assert!(pose_regression_loss(e, c, PoseNorm::L2) <= pose_regression_loss(e, c, PoseNorm::L1) + 1e-12);
    }

    #[test]
    fn frechet_nonnegative_and_symmetric(seed_a in 0u64..1000, seed_b in 0u64..1000, shift in -2.0f64..2.0) {
        let set = |seed: u64, s: f64| {
            let mut rng = stream_rng(seed, 0, Stream::Eval);
            let rows = (0..30)
                .map(|_| (0..3).map(|_| s + contranerf_core::rng::normal(&mut rng)).collect())
                .collect();
            FeatureSet::new(rows, "prop").unwrap()
        };
        let a = set(seed_a, 0.0);
        let b = set(seed_b, shift);
        let ab = frechet_distance(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - frechet_distance(&b, &a).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn sweep_endpoints_exact(lo in -3.0f64..0.0, hi in 0.0f64..3.0, steps in 2usize..40) {
        let y = sweep_yaws(lo, hi, steps).unwrap();
        prop_assert_eq!(y.len(), steps);
        prop_assert_eq!(y[0], lo);
        prop_assert_eq!(y[steps - 1], hi);
        prop_assert!(y.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn flip_is_involution(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 0, Stream::RealAugment);
        let img = Image::from_vec(h, w, 3, contranerf_core::rng::normal_vec(&mut rng, h * w * 3));
        prop_assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }
}

#[test]
fn bedroom_prior_mean_maps_to_equator() {
    let pose = PoseDistribution::preset(PosePreset::Bedroom).mean_pose();
    assert_eq!(pose_to_vector(&pose), [FRAC_PI_2, FRAC_PI_2]);
}

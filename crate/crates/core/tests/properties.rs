use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;

use reflectdepth::camera::{Intrinsics, Pose};
use reflectdepth::distill::{distill_loss, fuse_pseudo_depth};
use reflectdepth::geometry::{project_pixel, warp};
use reflectdepth::image::{BinaryMask, DepthMap, ImageBuffer};
use reflectdepth::intrinsic::{compose, pseudo_diffuse, recon_loss, IntrinsicPair};
use reflectdepth::metrics::depth_metrics;
use reflectdepth::photometric::{photometric_error, ErrorMap};
use reflectdepth::reflection::{mahalanobis_map, masked_depth_loss, reflection_mask};

const H: usize = 6;
const W: usize = 7;

fn image(vals: &[f64], channels: usize) -> ImageBuffer {
    ImageBuffer::from_fn(H, W, channels, |y, x, c| vals[(y * W + x) * channels + c])
}

fn unit_interval(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n)
}

fn bits(n: usize) -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn compose_inverts_pseudo_diffuse(i in unit_interval(H * W * 3), t in prop::collection::vec(0.0f64..1.0, H * W)) {
        // R between max(I) and 2 keeps I / R inside (0, 1]
        let img = image(&i, 3);
        let r = ImageBuffer::from_fn(H, W, 1, |y, x, _| {
            let p = img.pixel(y, x);
            let hi = p.iter().copied().fold(0.0, f64::max);
            hi + t[y * W + x] * (2.0 - hi)
        });
        let l = pseudo_diffuse(&img, &r).unwrap();
        let back = compose(&IntrinsicPair::new(l, r).unwrap());
        for (a, b) in back.data().iter().zip(img.data()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn exact_decomposition_has_zero_recon(l in unit_interval(H * W * 3), r in prop::collection::vec(0.5f64..1.0, H * W)) {
        let pair = IntrinsicPair::new(image(&l, 3), image(&r, 1)).unwrap();
        let img = compose(&pair);
        prop_assert!(recon_loss(&img, &pair).unwrap() <= 1e-9);
    }

    #[test]
    fn log_roundtrip(v in unit_interval(H * W)) {
        let img = image(&v, 1);
        let back = img.to_log().unwrap().image.from_log().unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn photometric_error_is_bounded_and_zero_on_self(a in unit_interval(H * W * 3), b in unit_interval(H * W * 3), alpha in 0.0f64..=1.0) {
        let (a, b) = (image(&a, 3), image(&b, 3));
        let all = BinaryMask::filled(H, W, true);
        let e = photometric_error(&a, &b, &all, alpha).unwrap();
        prop_assert!(e.values().iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        let s = photometric_error(&a, &a, &all, alpha).unwrap();
        prop_assert!(s.values().iter().all(|&v| v.abs() <= 1e-12));
    }

    #[test]
    fn mahalanobis_is_positive_affine_invariant(e in prop::collection::vec(0.0f64..1.0, H * W), scale in 0.1f64..10.0, shift in -1.0f64..1.0) {
        let all = BinaryMask::filled(H, W, true);
        let z = mahalanobis_map(&ErrorMap::new(e.clone(), all.clone()).unwrap()).unwrap();
        prop_assume!(!z.degenerate);
        let moved: Vec<f64> = e.iter().map(|v| scale * v + shift).collect();
        let z2 = mahalanobis_map(&ErrorMap::new(moved, all).unwrap()).unwrap();
        for (a, b) in z.z.iter().zip(&z2.z) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn identical_maps_flag_nothing_without_margin(e in prop::collection::vec(0.0f64..1.0, H * W), v in bits(H * W)) {
        let m = ErrorMap::new(e, BinaryMask::new(H, W, v).unwrap()).unwrap();
        prop_assume!(m.valid_count() >= 2);
        let r = reflection_mask(&m, &m, 0.0).unwrap();
        prop_assert!(r.data().iter().all(|&b| b));
    }

    #[test]
    fn masking_never_raises_depth_loss(e in prop::collection::vec(0.0f64..1.0, H * W), m in bits(H * W), n in bits(H * W)) {
        let all = BinaryMask::filled(H, W, true);
        let e = ErrorMap::new(e, all.clone()).unwrap();
        let m = BinaryMask::new(H, W, m).unwrap();
        let n = BinaryMask::new(H, W, n).unwrap();
        let full = masked_depth_loss(&e, &all, &all).unwrap();
        let one = masked_depth_loss(&e, &m, &all).unwrap();
        let both = masked_depth_loss(&e, &m, &n).unwrap();
        prop_assert!(both <= one + 1e-15 && one <= full + 1e-15);
    }

    #[test]
    fn fusion_selects_per_pixel(a in prop::collection::vec(0.5f64..5.0, H * W), b in prop::collection::vec(0.5f64..5.0, H * W), m in bits(H * W)) {
        let da = DepthMap::new(H, W, a.clone()).unwrap();
        let db = DepthMap::new(H, W, b.clone()).unwrap();
        let fused = fuse_pseudo_depth(&da, &db, &BinaryMask::new(H, W, m.clone()).unwrap()).unwrap();
        for i in 0..H * W {
            prop_assert_eq!(fused.data()[i], if m[i] { a[i] } else { b[i] });
        }
    }

    #[test]
    fn distill_loss_is_scale_gap(d in prop::collection::vec(0.5f64..5.0, H * W), s in 0.2f64..5.0) {
        let a = DepthMap::new(H, W, d.clone()).unwrap();
        let b = DepthMap::new(H, W, d.iter().map(|v| v * s).collect()).unwrap();
        prop_assert!((distill_loss(&a, &b).unwrap() - s.ln().abs()).abs() <= 1e-9);
    }

    #[test]
    fn metrics_of_scaled_prediction(g in prop::collection::vec(0.5f64..5.0, H * W), s in 1.0f64..1.2) {
        let gt = DepthMap::new(H, W, g.clone()).unwrap();
        let pred = DepthMap::new(H, W, g.iter().map(|v| v * s).collect()).unwrap();
        let m = depth_metrics(&pred, &gt, 0.1, 10.0).unwrap();
        prop_assert!((m.abs_rel - (s - 1.0)).abs() <= 1e-12);
        prop_assert!((m.rmse_log - s.ln()).abs() <= 1e-12);
        prop_assert_eq!(m.a1, 1.0);
    }

    #[test]
    fn se3_roundtrip(u in 0.0f64..127.0, v in 0.0f64..95.0, depth in 0.5f64..8.0,
                     r in prop::array::uniform3(-0.3f64..0.3), t in prop::array::uniform3(-0.3f64..0.3)) {
        let k = Intrinsics::new(100.0, 100.0, 63.5, 47.5).unwrap();
        let pose = Pose::new(
            *Rotation3::from_euler_angles(r[0], r[1], r[2]).matrix(),
            Vector3::new(t[0], t[1], t[2]),
        ).unwrap();
        let p = project_pixel(u, v, depth, &k, &pose);
        prop_assume!(!p.is_degenerate());
        let back = project_pixel(p.u, p.v, p.z, &k, &pose.inverse());
        prop_assert!((back.u - u).abs() <= 1e-6 && (back.v - v).abs() <= 1e-6);
        prop_assert!((back.z - depth).abs() <= 1e-6 * depth);
    }

    #[test]
    fn identity_warp_is_bit_exact(v in unit_interval(H * W * 3), d in prop::collection::vec(0.5f64..5.0, H * W)) {
        let img = image(&v, 3);
        let depth = DepthMap::new(H, W, d).unwrap();
        let k = Intrinsics::new(10.0, 10.0, 3.0, 2.5).unwrap();
        let (out, valid) = warp(&img, &depth, &k, &Pose::identity()).unwrap();
        prop_assert_eq!(out.data(), img.data());
        prop_assert!(valid.data().iter().all(|&b| b));
    }
}

#[test]
fn translation_warp_shifts_by_disparity() {
    // fronto-parallel plane at z, source camera moved by tx: column u lands
    // on u + f tx / z, so a linear ramp shifts by a constant
    let (h, w) = (20, 40);
    let (f, z, tx) = (50.0, 4.0, 0.3);
    let k = Intrinsics::new(f, f, 19.5, 9.5).unwrap();
    let src = ImageBuffer::from_fn(h, w, 1, |y, x, _| 0.1 + 0.02 * x as f64 + 0.001 * y as f64);
    let depth = DepthMap::filled(h, w, z);
    let pose = Pose::new(nalgebra::Matrix3::identity(), Vector3::new(tx, 0.0, 0.0)).unwrap();
    let (out, valid) = warp(&src, &depth, &k, &pose).unwrap();
    let shift = f * tx / z;
    for y in 0..h {
        for x in 0..w {
            let u = x as f64 + shift;
            if u > w as f64 - 1.0 {
                assert!(!valid.data()[y * w + x]);
                continue;
            }
            let expect = 0.1 + 0.02 * u + 0.001 * y as f64;
            assert!((out.get(y, x, 0) - expect).abs() <= 1e-5, "({y}, {x})");
        }
    }
}

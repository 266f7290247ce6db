mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{cross, literal_splat, random_hits, random_lens, unit};
use difflens::geom::Vec3;
use difflens::imaging::{convolve_patch, psnr, ImagePatch, Kernel};
use difflens::io::{lens_from_str, lens_to_string};
use difflens::optimize::{adamw_step, default_param_groups, AdamState};
use difflens::psf::{splat_psf, GridSpec};
use difflens::raytrace::{refract, Ray, SensorHit};

fn direction() -> impl Strategy<Value = Vec3<f64>> {
    (-0.9f64..0.9, -0.9f64..0.9).prop_map(|(x, y)| unit(x, y, 1.0))
}

fn ray(d: Vec3<f64>) -> Ray<f64> {
    Ray::new(Vec3::new(0.0, 0.0, 0.0), d, 0.5893)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn refraction_keeps_unit_norm_and_tangential_component(
        d in direction(), n in direction(), n1 in 1.0f64..2.0, n2 in 1.0f64..2.0, flip in any::<bool>()
    ) {
        let n = if flip { -n } else { n };
        let out = refract(&ray(d), n, n1, n2);
        prop_assume!(out.valid);
        let t = out.direction;
        prop_assert!((t.norm() - 1.0).abs() <= 1e-12);
        let (a, b) = (cross(d, n).scale(n1), cross(t, n).scale(n2));
        prop_assert!((a.x - b.x).abs() <= 1e-10 && (a.y - b.y).abs() <= 1e-10 && (a.z - b.z).abs() <= 1e-10);
    }

    #[test]
    fn refraction_is_reversible(d in direction(), n in direction(), n1 in 1.0f64..2.0, n2 in 1.0f64..2.0) {
        let fwd = refract(&ray(d), n, n1, n2);
        prop_assume!(fwd.valid);
        let back = refract(&fwd, -n, n2, n1);
        prop_assert!(back.valid);
        let e = back.direction - d;
        prop_assert!(e.x.abs() <= 1e-10 && e.y.abs() <= 1e-10 && e.z.abs() <= 1e-10);
    }

    #[test]
    fn total_internal_reflection_matches_critical_angle(d in direction(), n in direction(), n1 in 1.0f64..2.0, n2 in 1.0f64..2.0) {
        let cos_i = d.dot(n).abs();
        let sin_t = n1 / n2 * (1.0 - cos_i * cos_i).max(0.0).sqrt();
        prop_assume!((sin_t - 1.0).abs() > 1e-9);
        prop_assert_eq!(refract(&ray(d), n, n1, n2).valid, sin_t < 1.0);
    }

    #[test]
    fn splat_matches_literal_double_loop(seed in any::<u64>(), size in prop::sample::select(vec![1usize, 3, 7, 11]), count in 1usize..80) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = GridSpec::new(size, 0.01, [0.3, -0.2]).unwrap();
        let hits = random_hits(&mut rng, &spec, count);
        let grid = splat_psf(&hits, spec, 0.5893);
        let oracle = literal_splat(&hits, &spec);
        for (a, b) in grid.cells.iter().zip(&oracle) {
            prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
        prop_assert_eq!(grid.valid_count, hits.iter().filter(|h| h.valid).count());
    }

    #[test]
    fn splat_is_translation_equivariant(seed in any::<u64>(), sx in -3i32..3, sy in -3i32..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = GridSpec::new(9, 0.125, [0.0, 0.0]).unwrap();
        let hits = random_hits(&mut rng, &spec, 40);
        // shifts by dyadic multiples keep the arithmetic exact
        let shift = [sx as f64 * 0.375, sy as f64 * 0.25];
        let moved: Vec<SensorHit<f64>> = hits.iter().map(|h| SensorHit { x: h.x + shift[0], y: h.y + shift[1], valid: h.valid }).collect();
        let a = splat_psf(&hits, spec, 0.5893);
        let b = splat_psf(&moved, GridSpec { center: shift, ..spec }, 0.5893);
        for (x, y) in a.cells.iter().zip(&b.cells) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn interior_ray_deposits_unit_weight(x in -0.03f64..0.03, y in -0.03f64..0.03) {
        let spec = GridSpec::new(9, 0.01, [0.0, 0.0]).unwrap();
        let grid = splat_psf(&[SensorHit { x, y, valid: true }], spec, 0.5893);
        prop_assert!((grid.total() - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn delta_kernel_is_identity(seed in any::<u64>(), h in 3usize..12, w in 3usize..12) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels: Vec<f64> = (0..3 * h * w).map(|_| rng.gen::<f64>()).collect();
        let img = ImagePatch::new(h, w, pixels, None).unwrap();
        let out = convolve_patch(&img, &Kernel::delta(5)).unwrap();
        prop_assert_eq!(out.pixels, img.pixels);
    }

    #[test]
    fn psnr_is_symmetric(seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = || ImagePatch::new(6, 5, (0..90).map(|_| rng.gen::<f64>()).collect(), None).unwrap();
        let (a, b) = (img(), img());
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lens_text_round_trips(seed in any::<u64>()) {
        let sys = random_lens(seed);
        let text = lens_to_string(&sys);
        let back = lens_from_str(&text, "memory").unwrap();
        prop_assert_eq!(&back, &sys);
        prop_assert_eq!(lens_to_string(&back), text);
    }

    #[test]
    fn projection_restores_invariants_after_any_update(seed in any::<u64>(), scale in 1e-3f64..10.0) {
        use rand::Rng;
        let mut sys = random_lens(seed);
        let groups = default_param_groups(&sys, scale, true);
        let mut state = AdamState::for_groups(&groups);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for _ in 0..3 {
            // Adam steps are ~lr per parameter, so large lr scrambles the ordering
            let grads: Vec<_> = state.handles.iter().map(|&id| (id, rng.gen_range(-1.0..1.0))).collect();
            adamw_step(&mut sys, &mut state, &groups, &grads, 1.0).unwrap();
            prop_assert!(sys.validate().is_ok());
        }
    }
}

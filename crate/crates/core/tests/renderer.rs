use nalgebra::Matrix4;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unigs::camera::Camera;
use unigs::gaussian::{activate_params, normalize_quat, GaussianSet, RawGaussian, SH_COEFFS};
use unigs::renderer::{compositing_weights, rasterize, rasterize_backward, render, visibility_signature};

fn random_raw(rng: &mut ChaCha8Rng, n: usize) -> Vec<RawGaussian> {
    (0..n)
        .map(|_| RawGaussian {
            center: [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(2.0..3.0)],
            opacity_logit: rng.random_range(-1.0..1.5),
            log_scale: std::array::from_fn(|_| rng.random_range(-2.5..-1.2)),
            rotation: normalize_quat(std::array::from_fn(|_| rng.random_range(-1.0..1.0))),
            sh: std::array::from_fn(|_| rng.random_range(-0.5..0.5)),
        })
        .collect()
}

fn cam16() -> Camera {
    Camera::new(20.0, 20.0, 7.5, 7.5, 16, 16, Matrix4::identity()).unwrap()
}

#[test]
fn compositing_weights_telescope() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let set = activate_params(&random_raw(&mut rng, 30));
    let (_, st) = render(&set, &cam16(), [0.0; 3]);
    for y in 0..16 {
        for x in 0..16 {
            let s: f64 = compositing_weights(&st, x, y).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "pixel ({x},{y}): {s}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn order_invariance(seed in 0u64..1000, n in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = activate_params(&random_raw(&mut rng, n));
        let mut shuffled = set.gaussians.clone();
        for i in (1..n).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let a = rasterize(&set, &cam16(), [0.1, 0.2, 0.3]);
        let b = rasterize(&GaussianSet { gaussians: shuffled }, &cam16(), [0.1, 0.2, 0.3]);
        let diff = a.rgb.iter().zip(&b.rgb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(diff <= 1e-12);
        prop_assert!(a.rgb.iter().all(|v| v.is_finite() && *v >= 0.0 && *v <= 1.0 + 1e-9));
    }
}

fn loss(raw: &[RawGaussian], probe: &[f64]) -> (f64, u64) {
    let (img, st) = render(&activate_params(raw), &cam16(), [0.1; 3]);
    (img.rgb.iter().zip(probe).map(|(a, b)| a * b).sum(), visibility_signature(&st))
}

fn param_mut(g: &mut RawGaussian, k: usize) -> &mut f64 {
    match k {
        0..=2 => &mut g.center[k],
        3 => &mut g.opacity_logit,
        4..=6 => &mut g.log_scale[k - 4],
        7..=10 => &mut g.rotation[k - 7],
        _ => &mut g.sh[k - 11],
    }
}

fn grad_of(g: &unigs::renderer::GaussianGrads, i: usize, k: usize) -> f64 {
    match k {
        0..=2 => g.center[i][k],
        3 => g.opacity[i],
        4..=6 => g.scale[i][k - 4],
        7..=10 => g.rotation[i][k - 7],
        _ => g.sh[i][k - 11],
    }
}

#[test]
fn raw_gradients_match_finite_differences() {
    let h = 1e-6;
    let (mut pass, mut total, mut skipped) = (0, 0, 0);
    let mut worst = Vec::new();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let raw = random_raw(&mut rng, 5);
        let probe: Vec<f64> = (0..3 * 256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, st) = render(&activate_params(&raw), &cam16(), [0.1; 3]);
        let sig0 = visibility_signature(&st);
        let grads = rasterize_backward(&st, &probe).to_raw(&raw);
        for i in 0..5 {
            for k in 0..11 + SH_COEFFS {
                let mut p = raw.clone();
                let x0 = *param_mut(&mut p[i], k);
                *param_mut(&mut p[i], k) = x0 + h;
                let (fp, sp) = loss(&p, &probe);
                *param_mut(&mut p[i], k) = x0 - h;
                let (fm, sm) = loss(&p, &probe);
                if sp != sig0 || sm != sig0 {
                    skipped += 1;
                    continue;
                }
                let num = (fp - fm) / (2.0 * h);
                let a = grad_of(&grads, i, k);
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-3);
                total += 1;
                if rel <= 1e-2 {
                    pass += 1;
                } else {
                    worst.push((seed, i, k, a, num));
                }
            }
        }
    }
    assert!(total > 0);
    assert!(pass as f64 >= 0.95 * total as f64, "{pass}/{total} (skipped {skipped}) {worst:?}");
    assert!(worst.is_empty(), "{worst:?}");
}

//! Invariant suite behind `unigs check`: gradient checks, geometry oracles,
//! FPS brute force, attention contracts, rasterizer identities and the
//! view-count invariants. Each check returns a one-line detail string.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::Matrix4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{camera_embedding_input, normalize_to_reference, project_point, project_points_var, Camera};
use crate::decoder::{DecoderConfig, UniGs, ViewBatch};
use crate::gaussian::{activate_params, build_covariance, normalize_quat, GaussianSet, RawGaussian, SH_COEFFS};
use crate::loss::{mse, psnr_from_mse, ssim};
use crate::mvdfa::{view_sum, Mvdfa};
use crate::nn::{Bound, ParamStore};
use crate::renderer::{compositing_weights, rasterize, rasterize_backward, render, visibility_signature};
use crate::sesa::{fps, Sesa};
use crate::tensor::fault::{with_fault, Fault};
use crate::tensor::{grad_check, Scalar, Tape, Tensor, Var};

pub type Outcome = std::result::Result<String, String>;

pub struct Check {
    pub name: &'static str,
    pub run: fn() -> Outcome,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub secs: f64,
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- kernels

type KernelFn = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> crate::Result<Var<'t>>>;

/// Gradient-check outcome for one op over many random instances.
#[derive(Clone, Debug)]
pub struct OpGradReport {
    pub op: &'static str,
    pub instances: usize,
    pub checked: usize,
    pub max_rel: f64,
    pub failures: usize,
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi) as Scalar)
}

/// Values bounded away from zero by `gap`, with random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(gap..1.0);
        (if rng.random_bool(0.5) { m } else { -m }) as Scalar
    })
}

/// Contracts an op's output with fixed random weights to get a scalar.
fn readout(out: Var<'_>, seed: u64) -> crate::Result<Var<'_>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_t(&mut rng, &out.shape(), -1.0, 1.0);
    out.mul(out.tape().constant(w))?.sum()
}

fn kernel_instance(op: &str, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, KernelFn) {
    let s: u64 = rng.random();
    let r = |f: fn(Var<'_>) -> crate::Result<Var<'_>>| -> KernelFn {
        Box::new(move |_t: &Tape, v: &[Var<'_>]| readout(f(v[0])?, s))
    };
    match op {
        "add" => (
            vec![rand_t(rng, &[2, 3], -1.0, 1.0), rand_t(rng, &[3], -1.0, 1.0)],
            Box::new(move |_t, v| readout(v[0].add(v[1])?, s)),
        ),
        "sub" => (
            vec![rand_t(rng, &[3, 1, 2], -1.0, 1.0), rand_t(rng, &[4, 1], -1.0, 1.0)],
            Box::new(move |_t, v| readout(v[0].sub(v[1])?, s)),
        ),
        "mul" => (
            vec![rand_t(rng, &[2, 3], -1.0, 1.0), rand_t(rng, &[2, 1], -1.0, 1.0)],
            Box::new(move |_t, v| readout(v[0].mul(v[1])?, s)),
        ),
        "div" => (
            vec![rand_t(rng, &[2, 3], -1.0, 1.0), rand_t(rng, &[3], 0.5, 2.0)],
            Box::new(move |_t, v| readout(v[0].div(v[1])?, s)),
        ),
        "scale" => (vec![rand_t(rng, &[5], -1.0, 1.0)], r(|x| x.scale(-1.7))),
        "add_scalar" => (vec![rand_t(rng, &[5], -1.0, 1.0)], r(|x| x.add_scalar(0.3)?.square())),
        "neg" => (vec![rand_t(rng, &[5], -1.0, 1.0)], r(|x| x.neg())),
        "relu" => (vec![away_from_zero(rng, &[2, 4], 0.05)], r(|x| x.relu())),
        "sigmoid" => (vec![rand_t(rng, &[6], -3.0, 3.0)], r(|x| x.sigmoid())),
        "exp" => (vec![rand_t(rng, &[6], -2.0, 2.0)], r(|x| x.exp())),
        "log" => (vec![rand_t(rng, &[6], 0.3, 3.0)], r(|x| x.log())),
        "sqrt" => (vec![rand_t(rng, &[6], 0.3, 3.0)], r(|x| x.sqrt())),
        "square" => (vec![rand_t(rng, &[6], -2.0, 2.0)], r(|x| x.square())),
        "clamp" => {
            let t = Tensor::from_fn(&[8], |_| {
                let v: f64 = rng.random_range(-1.0..1.0);
                (if (v.abs() - 0.5).abs() < 0.02 { v * 0.5 } else { v }) as Scalar
            });
            (vec![t], r(|x| x.clamp(-0.5, 0.5)))
        }
        "matmul" => (
            vec![rand_t(rng, &[3, 4], -1.0, 1.0), rand_t(rng, &[4, 2], -1.0, 1.0)],
            Box::new(move |_t, v| readout(v[0].matmul(v[1])?, s)),
        ),
        "matmul_batched" => (
            vec![rand_t(rng, &[2, 3, 4], -1.0, 1.0), rand_t(rng, &[2, 4, 2], -1.0, 1.0)],
            Box::new(move |_t, v| readout(v[0].matmul(v[1])?, s)),
        ),
        "permute" => (vec![rand_t(rng, &[2, 3, 4], -1.0, 1.0)], r(|x| x.permute(&[2, 0, 1]))),
        "transpose" => (vec![rand_t(rng, &[2, 3, 4], -1.0, 1.0)], r(|x| x.transpose())),
        "reshape" => (vec![rand_t(rng, &[2, 6], -1.0, 1.0)], r(|x| x.reshape(&[3, 2, 2]))),
        "sum" => (vec![rand_t(rng, &[3, 4], -1.0, 1.0)], r(|x| x.sum())),
        "mean" => (vec![rand_t(rng, &[3, 4], -1.0, 1.0)], r(|x| x.mean())),
        "sum_axis" => (vec![rand_t(rng, &[3, 4, 2], -1.0, 1.0)], r(|x| x.sum_axis(1))),
        "softmax" => (vec![rand_t(rng, &[3, 5], -2.0, 2.0)], r(|x| x.softmax(1))),
        "softmax_axis0" => (vec![rand_t(rng, &[4, 3], -2.0, 2.0)], r(|x| x.softmax(0))),
        "layer_norm" => (
            vec![
                rand_t(rng, &[3, 6], -2.0, 2.0),
                rand_t(rng, &[6], 0.5, 1.5),
                rand_t(rng, &[6], -0.5, 0.5),
            ],
            Box::new(move |_t, v| readout(v[0].layer_norm(Some(v[1]), Some(v[2]), 1e-5)?, s)),
        ),
        "layer_norm_plain" => (vec![rand_t(rng, &[2, 5], -2.0, 2.0)], r(|x| x.layer_norm(None, None, 1e-5))),
        "normalize_last" => (vec![rand_t(rng, &[3, 4], -1.0, 1.0)], r(|x| x.normalize_last(1e-12))),
        "narrow" => (vec![rand_t(rng, &[3, 5], -1.0, 1.0)], r(|x| x.narrow(1, 1, 3))),
        "index_select" => (vec![rand_t(rng, &[4, 3], -1.0, 1.0)], r(|x| x.index_select(&[2, 0, 2, 3]))),
        "concat" => (
            vec![rand_t(rng, &[2, 3], -1.0, 1.0), rand_t(rng, &[2, 2], -1.0, 1.0)],
            Box::new(move |_t, v| readout(Var::concat(&[v[0], v[1]], 1)?, s)),
        ),
        "grid_sample" => {
            let (h, w) = (4usize, 5usize);
            let map = rand_t(rng, &[2, h, w, 3], -1.0, 1.0);
            // Sample positions strictly between pixel centers so the
            // piecewise-bilinear surface is smooth around each point.
            let pts = Tensor::from_fn(&[2, 6, 2], |i| {
                let extent = if i % 2 == 0 { w } else { h } as f64;
                let cell = rng.random_range(0..extent as usize - 1) as f64;
                let px = cell + rng.random_range(0.1..0.9);
                (2.0 * px / (extent - 1.0) - 1.0) as Scalar
            });
            (vec![map, pts], Box::new(move |_t, v| readout(v[0].grid_sample(v[1])?, s)))
        }
        "conv2d" => (
            vec![
                rand_t(rng, &[1, 2, 5, 5], -1.0, 1.0),
                rand_t(rng, &[3, 2, 3, 3], -1.0, 1.0),
                rand_t(rng, &[3], -1.0, 1.0),
            ],
            Box::new(move |_t, v| readout(v[0].conv2d(v[1], Some(v[2]), 1, 1)?, s)),
        ),
        "conv2d_stride2" => (
            vec![rand_t(rng, &[2, 1, 6, 6], -1.0, 1.0), rand_t(rng, &[2, 1, 3, 3], -1.0, 1.0)],
            Box::new(move |_t, v| readout(v[0].conv2d(v[1], None, 2, 1)?, s)),
        ),
        "upsample2x" => (vec![rand_t(rng, &[1, 2, 2, 3], -1.0, 1.0)], r(|x| x.upsample2x())),
        "view_sum" => (vec![rand_t(rng, &[3, 2, 4], -1.0, 1.0)], r(view_sum)),
        "project_points" => {
            let cams = vec![
                Camera::look_at([0.3, -0.2, -2.5], [0.0; 3], [0.0, 1.0, 0.0], 0.9, 32, 24).unwrap(),
                Camera::look_at([2.4, 0.5, 0.4], [0.0; 3], [0.0, 0.0, 1.0], 1.1, 20, 20).unwrap(),
            ];
            let pts = rand_t(rng, &[4, 3], -0.5, 0.5);
            (
                vec![pts],
                Box::new(move |_t, v| readout(project_points_var(v[0], &cams)?.0, s)),
            )
        }
        _ => unreachable!("unknown kernel {op}"),
    }
}

pub const KERNEL_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_scalar",
    "neg",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "sqrt",
    "square",
    "clamp",
    "matmul",
    "matmul_batched",
    "permute",
    "transpose",
    "reshape",
    "sum",
    "mean",
    "sum_axis",
    "softmax",
    "softmax_axis0",
    "layer_norm",
    "layer_norm_plain",
    "normalize_last",
    "narrow",
    "index_select",
    "concat",
    "grid_sample",
    "conv2d",
    "conv2d_stride2",
    "upsample2x",
    "view_sum",
    "project_points",
];

/// Finite-difference check of every differentiable op on `instances` random inputs each.
pub fn kernel_gradient_suite(instances: usize, h: f64, tol: f64, seed: u64) -> crate::Result<Vec<OpGradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(KERNEL_OPS.len());
    for &op in KERNEL_OPS {
        let mut rep = OpGradReport {
            op,
            instances,
            checked: 0,
            max_rel: 0.0,
            failures: 0,
        };
        for _ in 0..instances {
            let (inputs, f) = kernel_instance(op, &mut rng);
            let r = grad_check(|t, v| f(t, v), &inputs, h as Scalar, tol as Scalar)?;
            rep.checked += r.checked;
            rep.max_rel = rep.max_rel.max(r.max_rel_err as f64);
            rep.failures += r.failures.len();
        }
        out.push(rep);
    }
    Ok(out)
}

fn check_kernel_gradients() -> Outcome {
    let reports = kernel_gradient_suite(100, 1e-6, 1e-5, 11).map_err(|e| e.to_string())?;
    let bad: Vec<String> = reports
        .iter()
        .filter(|r| r.failures > 0 || r.checked == 0)
        .map(|r| format!("{} ({} failures, max rel {:.2e})", r.op, r.failures, r.max_rel))
        .collect();
    let worst = reports.iter().map(|r| r.max_rel).fold(0.0, f64::max);
    ensure(
        bad.is_empty(),
        if bad.is_empty() {
            format!("{} ops x 100 instances, max rel {worst:.2e}", reports.len())
        } else {
            format!("failing ops: {}", bad.join(", "))
        },
    )
}

// ---------------------------------------------------------------- geometry

fn quat_to_rot(q: [f64; 4]) -> [[f64; 3]; 3] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    [
        [w * w + x * x - y * y - z * z, 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), w * w - x * x + y * y - z * z, 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ]
}

struct OracleCam {
    r: [[f64; 3]; 3],
    t: [f64; 3],
    f: [f64; 2],
    c: [f64; 2],
    size: [usize; 2],
}

impl OracleCam {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let size = [rng.random_range(8..200), rng.random_range(8..200)];
        Self {
            r: quat_to_rot(q),
            t: std::array::from_fn(|_| rng.random_range(-2.0..2.0)),
            f: [rng.random_range(10.0..300.0), rng.random_range(10.0..300.0)],
            c: [size[0] as f64 * rng.random_range(0.3..0.7), size[1] as f64 * rng.random_range(0.3..0.7)],
            size,
        }
    }

    fn w2c(&self) -> [[f64; 4]; 4] {
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&self.r[i]);
            m[i][3] = self.t[i];
        }
        m[3][3] = 1.0;
        m
    }

    fn camera(&self) -> Camera {
        let m = self.w2c();
        Camera::new(
            self.f[0],
            self.f[1],
            self.c[0],
            self.c[1],
            self.size[0],
            self.size[1],
            Matrix4::from_fn(|i, j| m[i][j]),
        )
        .unwrap()
    }

    fn to_cam(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| self.r[i][0] * p[0] + self.r[i][1] * p[1] + self.r[i][2] * p[2] + self.t[i])
    }
}

fn mat4_mul(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
    let mut m = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            for k in 0..4 {
                m[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    m
}

/// Largest absolute deviation of each geometry primitive from a
/// from-scratch oracle over `draws` random cases.
pub fn geometry_oracles(draws: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut proj, mut embed, mut inverse, mut cov) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..draws {
        let oc = OracleCam::random(&mut rng);
        let cam = oc.camera();

        let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
        let x = oc.to_cam(p);
        let got = project_point(p, &cam);
        if x[2] > 1e-6 {
            let px = [oc.f[0] * x[0] / x[2] + oc.c[0], oc.f[1] * x[1] / x[2] + oc.c[1]];
            let uv = [
                2.0 * px[0] / (oc.size[0] - 1) as f64 - 1.0,
                2.0 * px[1] / (oc.size[1] - 1) as f64 - 1.0,
            ];
            let scale = 1.0 + px[0].abs().max(px[1].abs());
            for k in 0..2 {
                proj = proj.max((got.pixel[k] - px[k]).abs() / scale);
                proj = proj.max((got.uv[k] - uv[k]).abs() / scale);
            }
            proj = proj.max((got.depth - x[2]).abs());
            if got.valid != uv.iter().all(|c| c.abs() <= 1.0) {
                proj = f64::INFINITY;
            }
        } else if got.valid {
            proj = f64::INFINITY;
        }

        let (w1, h1) = ((oc.size[0] - 1) as f64, (oc.size[1] - 1) as f64);
        let kn = [
            [2.0 * oc.f[0] / w1, 0.0, 2.0 * oc.c[0] / w1 - 1.0, 0.0],
            [0.0, 2.0 * oc.f[1] / h1, 2.0 * oc.c[1] / h1 - 1.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let e = mat4_mul(&kn, &oc.w2c());
        let got = camera_embedding_input(&cam);
        for i in 0..16 {
            embed = embed.max((got[i] - e[i / 4][i % 4]).abs());
        }

        let oc1 = OracleCam::random(&mut rng);
        let mut c2w = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                c2w[i][j] = oc.r[j][i];
            }
            c2w[i][3] = -(0..3).map(|k| oc.r[k][i] * oc.t[k]).sum::<f64>();
        }
        c2w[3][3] = 1.0;
        let rel = mat4_mul(&oc1.w2c(), &c2w);
        let norm = normalize_to_reference(&[cam.clone(), oc1.camera()]).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let id = if i == j { 1.0 } else { 0.0 };
                inverse = inverse.max((norm[0].w2c[(i, j)] - id).abs());
                inverse = inverse.max((norm[1].w2c[(i, j)] - rel[i][j]).abs());
            }
        }

        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let s: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.01..2.0));
        let r = quat_to_rot(q);
        let got = build_covariance(normalize_quat(q), s).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want: f64 = (0..3).map(|k| r[i][k] * s[k] * s[k] * r[j][k]).sum();
                cov = cov.max((got[i][j] - want).abs());
            }
        }
    }
    vec![
        ("pinhole_projection", proj),
        ("camera_embedding", embed),
        ("rigid_inverse", inverse),
        ("covariance", cov),
    ]
}

fn check_geometry() -> Outcome {
    let r = geometry_oracles(1000, 5);
    let detail = r.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    ensure(r.iter().all(|(_, e)| *e <= 1e-9), detail)
}

// ---------------------------------------------------------------- fps

/// Greedy max-min selection recomputing every distance from scratch.
pub fn fps_exhaustive(points: &[[f64; 3]], k: usize, start: usize) -> Vec<usize> {
    let mut chosen = vec![start];
    while chosen.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..points.len() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&j| {
                    let (a, b) = (points[i], points[j]);
                    (a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2])
                })
                .fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        chosen.push(best.unwrap().0);
    }
    chosen
}

/// Compares [`fps`] against [`fps_exhaustive`] on `sets` random point sets
/// with sizes cycling through `1..=max_n`. Half the sets sit on a coarse
/// integer grid so distance ties are common.
pub fn fps_equivalence(sets: usize, max_n: usize, seed: u64) -> std::result::Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut compared = 0;
    for s in 0..sets {
        let n = s % max_n + 1;
        let grid = s % 2 == 1;
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                std::array::from_fn(|_| {
                    if grid {
                        rng.random_range(0..4) as f64
                    } else {
                        rng.random_range(-1.0..1.0)
                    }
                })
            })
            .collect();
        let start = rng.random_range(0..n);
        for k in [1, rng.random_range(1..=n), n] {
            let got = fps(&pts, k, start).map_err(|e| e.to_string())?.indices;
            let want = fps_exhaustive(&pts, k, start);
            if got != want {
                return Err(format!("set {s} (N={n}, K={k}): got {got:?}, want {want:?}"));
            }
            compared += 1;
        }
    }
    Ok(compared)
}

fn check_fps() -> Outcome {
    fps_equivalence(200, 64, 17).map(|n| format!("{n} selections over 200 sets, N <= 64"))
}

// ---------------------------------------------------------------- sesa

fn lin_rows(x: &[Vec<f64>], store: &ParamStore, l: &crate::nn::Linear) -> Vec<Vec<f64>> {
    let w = store.get(l.w);
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..cout)
                .map(|o| {
                    let b = l.b.map_or(0.0, |b| store.get(b).data()[o] as f64);
                    b + (0..cin).map(|i| row[i] * w.data()[i * cout + o] as f64).sum::<f64>()
                })
                .collect()
        })
        .collect()
}

/// SESA at rate 1 against a loop implementation of full attention:
/// returns (max output difference, max deviation of attention row sums from 1).
pub fn sesa_full_attention(seed: u64) -> crate::Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c) = (24, 8);
    let mut store = ParamStore::default();
    let sesa = Sesa::new(&mut store, "s", c, &mut rng);
    for id in [sesa.norm.gamma, sesa.norm.beta] {
        *store.get_mut(id) = rand_t(&mut rng, &[c], 0.5, 1.5);
    }
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let centers: Vec<[f64; 3]> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();

    let tape = Tape::new();
    let p = store.bind_constant(&tape);
    let q = tape.constant(Tensor::new(&[n, c], x.iter().flatten().map(|&v| v as Scalar).collect())?);
    let out = sesa.forward(&p, q, &centers, 1.0)?;
    let att = out.attention.value();
    let k = att.shape()[1];
    let row_err = (0..n)
        .map(|i| ((0..k).map(|j| att.data()[i * k + j] as f64).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);

    let qq = lin_rows(&x, &store, &sesa.wq);
    let kk = lin_rows(&x, &store, &sesa.wk);
    let vv = lin_rows(&x, &store, &sesa.wv);
    let mut mixed = vec![vec![0.0; c]; n];
    for i in 0..n {
        let scores: Vec<f64> = (0..n)
            .map(|j| (0..c).map(|d| qq[i][d] * kk[j][d]).sum::<f64>() / (c as f64).sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..n {
            for d in 0..c {
                mixed[i][d] += e[j] / z * vv[j][d];
            }
        }
    }
    let proj = lin_rows(&mixed, &store, &sesa.wo);
    let (g, b) = (store.get(sesa.norm.gamma), store.get(sesa.norm.beta));
    let got = out.out.value();
    let mut diff = 0.0f64;
    for i in 0..n {
        let y: Vec<f64> = (0..c).map(|d| x[i][d] + proj[i][d]).collect();
        let mean = y.iter().sum::<f64>() / c as f64;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        for d in 0..c {
            let want = (y[d] - mean) / (var + crate::nn::LN_EPS as f64).sqrt() * g.data()[d] as f64 + b.data()[d] as f64;
            diff = diff.max((got.data()[i * c + d] as f64 - want).abs());
        }
    }
    Ok((diff, row_err))
}

fn check_sesa() -> Outcome {
    let (diff, rows) = sesa_full_attention(23).map_err(|e| e.to_string())?;
    ensure(diff <= 1e-10 && rows <= 1e-9, format!("full-attention diff {diff:.1e}, row-sum err {rows:.1e}"))
}

// ---------------------------------------------------------------- mvdfa

#[derive(Clone, Debug)]
pub struct MvdfaReport {
    pub alpha_row_err: f64,
    pub fuse_permutation_exact: bool,
    pub zero_feature_max: f64,
    pub ns1_passthrough_err: f64,
    pub grad_max_rel: f64,
    pub grad_checked: usize,
    pub grad_skipped: usize,
}

fn ring_cams(views: usize, size: usize) -> Vec<Camera> {
    (0..views)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / views as f64 + 0.3;
            let eye = [2.5 * a.cos(), 2.5 * a.sin(), 0.4 * (i as f64 - 1.0)];
            Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], 0.9, size, size).unwrap()
        })
        .collect()
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, amp: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = rand_t(rng, &shape, -amp, amp);
    }
}

/// Bilinear sample of channel-last `map [H, W, C]` at normalized `uv`,
/// reading zero outside the map.
fn bilinear_oracle(map: &[f64], h: usize, w: usize, c: usize, uv: [f64; 2]) -> Vec<f64> {
    let x = (uv[0] + 1.0) / 2.0 * (w - 1) as f64;
    let y = (uv[1] + 1.0) / 2.0 * (h - 1) as f64;
    let (x0, y0) = (x.floor(), y.floor());
    let mut out = vec![0.0; c];
    for (dy, wy) in [(0.0, 1.0 - (y - y0)), (1.0, y - y0)] {
        for (dx, wx) in [(0.0, 1.0 - (x - x0)), (1.0, x - x0)] {
            let (xi, yi) = (x0 + dx, y0 + dy);
            if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
                continue;
            }
            let base = ((yi as usize) * w + xi as usize) * c;
            for k in 0..c {
                out[k] += wx * wy * map[base + k];
            }
        }
    }
    out
}

/// The attention contracts of the multi-view deformable sampler.
pub fn mvdfa_contracts(seed: u64) -> crate::Result<MvdfaReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (views, n, c, fh) = (3, 10, 8, 6);
    let cams = ring_cams(views, fh * 4);
    let feats = rand_t(&mut rng, &[views, fh, fh, c], -1.0, 1.0);
    let q = rand_t(&mut rng, &[n, c], -1.0, 1.0);
    let centers = rand_t(&mut rng, &[n, 3], -0.4, 0.4);

    let mut store = ParamStore::default();
    let m = Mvdfa::new(&mut store, "m", c, 4, 2, 0.1, &mut rng)?;
    randomize(&mut store, &mut rng, 0.3);

    let tape = Tape::new();
    let p = store.bind_constant(&tape);
    let (_, trace) = m.forward(&p, tape.constant(feats.clone()), &cams, tape.constant(q.clone()), tape.constant(centers.clone()))?;
    let a = trace.attention.value();
    let ns = 4;
    let alpha_row_err = a
        .data()
        .chunks(ns)
        .map(|r| (r.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);

    let upd = trace.updated.value();
    let (fused, _) = m.fuse_views(&p, tape.constant((*upd).clone()))?;
    let stride = n * c;
    let perm = [2, 0, 1];
    let permuted: Vec<Scalar> = perm.iter().flat_map(|&v| upd.data()[v * stride..(v + 1) * stride].to_vec()).collect();
    let (fused_p, _) = m.fuse_views(&p, tape.constant(Tensor::new(&[views, n, c], permuted)?))?;
    let fuse_permutation_exact = fused.value().data() == fused_p.value().data();

    let (zero_out, _) = m.forward(
        &p,
        tape.constant(Tensor::zeros(&[views, fh, fh, c])),
        &cams,
        tape.constant(q.clone()),
        tape.constant(centers.clone()),
    )?;
    let zero_feature_max = zero_out.value().data().iter().map(|v| (*v as f64).abs()).fold(0.0, f64::max);

    // One sample per head, no learned offsets: each view query is the value
    // map read at the projected center.
    let mut s1 = ParamStore::default();
    let m1 = Mvdfa::new(&mut s1, "m", c, 1, 1, 0.1, &mut rng)?;
    let p1 = s1.bind_constant(&tape);
    let (_, t1) = m1.forward(&p1, tape.constant(feats.clone()), &cams, tape.constant(q.clone()), tape.constant(centers.clone()))?;
    let wv = s1.get(m1.value.w);
    let mut ns1_err = 0.0f64;
    let refs = t1.reference.value();
    let sp = t1.sample_points.value();
    let upd1 = t1.updated.value();
    if t1.attention.value().data().iter().any(|&v| v != 1.0) || sp.data() != refs.data() {
        ns1_err = f64::INFINITY;
    }
    for v in 0..views {
        let map: Vec<f64> = (0..fh * fh)
            .flat_map(|pix| {
                let row = &feats.data()[(v * fh * fh + pix) * c..(v * fh * fh + pix + 1) * c];
                (0..c)
                    .map(|o| (0..c).map(|i| row[i] as f64 * wv.data()[i * c + o] as f64).sum::<f64>())
                    .collect::<Vec<_>>()
            })
            .collect();
        for i in 0..n {
            let uv = [refs.data()[(v * n + i) * 2] as f64, refs.data()[(v * n + i) * 2 + 1] as f64];
            let want = bilinear_oracle(&map, fh, fh, c, uv);
            for k in 0..c {
                ns1_err = ns1_err.max((upd1.data()[(v * n + i) * c + k] as f64 - want[k]).abs());
            }
        }
    }

    // Gradient of a fused-query readout with respect to the centers.
    let h = 1e-6;
    let readout_w = rand_t(&mut rng, &[n, c], -1.0, 1.0);
    let eval = |ctr: &Tensor| -> crate::Result<f64> {
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        let (f, _) = m.forward(&p, tape.constant(feats.clone()), &cams, tape.constant(q.clone()), tape.constant(ctr.clone()))?;
        Ok(f.mul(tape.constant(readout_w.clone()))?.sum()?.value().item() as f64)
    };
    let lattice_margin = |ctr: &Tensor| -> crate::Result<bool> {
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        let (_, t) = m.forward(&p, tape.constant(feats.clone()), &cams, tape.constant(q.clone()), tape.constant(ctr.clone()))?;
        let near = t.sample_points.value().data().iter().any(|&u| {
            let px = (u as f64 + 1.0) / 2.0 * (fh - 1) as f64;
            let frac = px - px.floor();
            frac.min(1.0 - frac) < 1e-4
        });
        Ok(near)
    };
    let gtape = Tape::new();
    let gp = store.bind_constant(&gtape);
    let cvar = gtape.leaf(centers.clone());
    let (f, _) = m.forward(&gp, gtape.constant(feats.clone()), &cams, gtape.constant(q.clone()), cvar)?;
    let loss = f.mul(gtape.constant(readout_w.clone()))?.sum()?;
    let grad = gtape.backward(loss)?.wrt(cvar);
    let (mut grad_max_rel, mut checked, mut skipped) = (0.0f64, 0, 0);
    for idx in 0..n * 3 {
        let mut plus = centers.clone();
        plus.data_mut()[idx] += h as Scalar;
        let mut minus = centers.clone();
        minus.data_mut()[idx] -= h as Scalar;
        if lattice_margin(&plus)? || lattice_margin(&minus)? {
            skipped += 1;
            continue;
        }
        let num = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        let a = grad.data()[idx] as f64;
        grad_max_rel = grad_max_rel.max((a - num).abs() / a.abs().max(num.abs()).max(1e-3));
        checked += 1;
    }
    Ok(MvdfaReport {
        alpha_row_err,
        fuse_permutation_exact,
        zero_feature_max,
        ns1_passthrough_err: ns1_err,
        grad_max_rel,
        grad_checked: checked,
        grad_skipped: skipped,
    })
}

fn check_mvdfa() -> Outcome {
    let r = mvdfa_contracts(29).map_err(|e| e.to_string())?;
    ensure(
        r.alpha_row_err <= 1e-9
            && r.fuse_permutation_exact
            && r.zero_feature_max == 0.0
            && r.ns1_passthrough_err <= 1e-12
            && r.grad_checked > 0
            && r.grad_max_rel <= 1e-4,
        format!(
            "alpha rows {:.1e}, permutation exact {}, zero features {:.1e}, Ns=1 {:.1e}, mu grad rel {:.1e} ({} checked, {} near lattice)",
            r.alpha_row_err,
            r.fuse_permutation_exact,
            r.zero_feature_max,
            r.ns1_passthrough_err,
            r.grad_max_rel,
            r.grad_checked,
            r.grad_skipped
        ),
    )
}

// ---------------------------------------------------------------- rasterizer

#[derive(Clone, Debug)]
pub struct RasterReport {
    pub telescoping_max_err: f64,
    pub order_max_diff: f64,
    pub grad_pass: usize,
    pub grad_total: usize,
    pub grad_skipped: usize,
}

impl RasterReport {
    pub fn grad_fraction(&self) -> f64 {
        self.grad_pass as f64 / self.grad_total.max(1) as f64
    }
}

pub fn random_raw_gaussians(rng: &mut ChaCha8Rng, n: usize) -> Vec<RawGaussian> {
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

fn raw_param(g: &mut RawGaussian, k: usize) -> &mut f64 {
    match k {
        0..=2 => &mut g.center[k],
        3 => &mut g.opacity_logit,
        4..=6 => &mut g.log_scale[k - 4],
        7..=10 => &mut g.rotation[k - 7],
        _ => &mut g.sh[k - 11],
    }
}

fn raw_grad(g: &crate::renderer::GaussianGrads, i: usize, k: usize) -> f64 {
    match k {
        0..=2 => g.center[i][k],
        3 => g.opacity[i],
        4..=6 => g.scale[i][k - 4],
        7..=10 => g.rotation[i][k - 7],
        _ => g.sh[i][k - 11],
    }
}

/// Compositing identity, order invariance and finite-difference gradients on
/// 16x16 images with 5 Gaussians per scene.
pub fn rasterizer_checks(scenes: usize, seed: u64) -> RasterReport {
    let cam = Camera::new(20.0, 20.0, 7.5, 7.5, 16, 16, Matrix4::identity()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = RasterReport {
        telescoping_max_err: 0.0,
        order_max_diff: 0.0,
        grad_pass: 0,
        grad_total: 0,
        grad_skipped: 0,
    };
    for _ in 0..scenes {
        let raw = random_raw_gaussians(&mut rng, 5);
        let set = activate_params(&raw);
        let (_, st) = render(&set, &cam, [0.0; 3]);
        for y in 0..16 {
            for x in 0..16 {
                let s: f64 = compositing_weights(&st, x, y).iter().sum();
                rep.telescoping_max_err = rep.telescoping_max_err.max((s - 1.0).abs());
            }
        }
        let mut shuffled = set.gaussians.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let a = rasterize(&set, &cam, [0.1, 0.2, 0.3]);
        let b = rasterize(&GaussianSet { gaussians: shuffled }, &cam, [0.1, 0.2, 0.3]);
        let d = a.rgb.iter().zip(&b.rgb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        rep.order_max_diff = rep.order_max_diff.max(d);

        let probe: Vec<f64> = (0..3 * 256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eval = |raw: &[RawGaussian]| {
            let (img, st) = render(&activate_params(raw), &cam, [0.1; 3]);
            (img.rgb.iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>(), visibility_signature(&st))
        };
        let (_, st) = render(&set, &cam, [0.1; 3]);
        let sig0 = visibility_signature(&st);
        let grads = rasterize_backward(&st, &probe).to_raw(&raw);
        let h = 1e-6;
        for i in 0..raw.len() {
            for k in 0..11 + SH_COEFFS {
                let mut p = raw.clone();
                let x0 = *raw_param(&mut p[i], k);
                *raw_param(&mut p[i], k) = x0 + h;
                let (fp, sp) = eval(&p);
                *raw_param(&mut p[i], k) = x0 - h;
                let (fm, sm) = eval(&p);
                if sp != sig0 || sm != sig0 {
                    rep.grad_skipped += 1;
                    continue;
                }
                let num = (fp - fm) / (2.0 * h);
                let a = raw_grad(&grads, i, k);
                rep.grad_total += 1;
                if (a - num).abs() / a.abs().max(num.abs()).max(1e-3) <= 1e-2 {
                    rep.grad_pass += 1;
                }
            }
        }
    }
    rep
}

fn check_rasterizer() -> Outcome {
    let r = rasterizer_checks(10, 31);
    ensure(
        r.telescoping_max_err <= 1e-12 && r.order_max_diff <= 1e-12 && r.grad_total > 0 && r.grad_fraction() >= 0.95,
        format!(
            "telescoping {:.1e}, order {:.1e}, grads {}/{} within 1e-2 ({} near boundaries skipped)",
            r.telescoping_max_err, r.order_max_diff, r.grad_pass, r.grad_total, r.grad_skipped
        ),
    )
}

// ---------------------------------------------------------------- model

fn small_batch(views: usize, size: usize, seed: u64) -> crate::Result<ViewBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cams = normalize_to_reference(&ring_cams(views, size))?;
    let images = rand_t(&mut rng, &[views, 3, size, size], 0.0, 1.0);
    ViewBatch::new(images, cams, None)
}

fn tiny_config() -> DecoderConfig {
    DecoderConfig {
        n_gaussians: 48,
        hidden: 16,
        ffn_width: 32,
        layers: 1,
        sesa_rate: 0.25,
        ..Default::default()
    }
}

fn check_view_counts() -> Outcome {
    let model = UniGs::new(tiny_config(), 3).map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    let mut bytes = Vec::new();
    for views in [1, 2, 4] {
        let batch = small_batch(views, 16, 9).map_err(|e| e.to_string())?;
        let (set, stats) = model.reconstruct(&batch).map_err(|e| e.to_string())?;
        rows.push(set.len());
        bytes.push(stats.query_bytes);
    }
    ensure(
        rows.iter().all(|&r| r == 48) && bytes.windows(2).all(|w| w[0] == w[1]),
        format!("gaussians {rows:?}, query bytes {bytes:?}"),
    )
}

fn check_encoder_permutation() -> Outcome {
    let model = UniGs::new(tiny_config(), 4).map_err(|e| e.to_string())?;
    let batch = small_batch(3, 32, 10).map_err(|e| e.to_string())?;
    let perm = [2, 0, 1];
    let feats = |b: &ViewBatch| -> crate::Result<Tensor> {
        let tape = Tape::new();
        let p: Bound = model.params.bind_constant(&tape);
        Ok((*model.encoder.extract_features(&p, tape.constant(b.images.clone()))?.value()).clone())
    };
    let base = feats(&batch).map_err(|e| e.to_string())?;
    let moved = feats(&batch.select(&perm).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let per = base.numel() / 3;
    let diff = perm
        .iter()
        .enumerate()
        .flat_map(|(dst, &src)| {
            let (b, m) = (&base, &moved);
            (0..per).map(move |k| (b.data()[src * per + k] - m.data()[dst * per + k]).abs() as f64)
        })
        .fold(0.0, f64::max);
    ensure(diff <= 1e-12, format!("max deviation {diff:.1e}"))
}

fn check_losses() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let a: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.random_range(0.0..1.0)).collect();
    let b: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.random_range(0.0..1.0)).collect();
    let oracle = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    let m = mse(&a, &b);
    let s1 = ssim(&a, &b, [3, 16, 16]).map_err(|e| e.to_string())?;
    let s2 = ssim(&b, &a, [3, 16, 16]).map_err(|e| e.to_string())?;
    let mono = (1..100).all(|i| psnr_from_mse(i as f64 * 0.01) < psnr_from_mse((i - 1) as f64 * 0.01 + 1e-9));
    ensure(
        (m - oracle).abs() <= 1e-12 && (s1 - s2).abs() <= 1e-12 && mono,
        format!("mse {:.1e}, ssim symmetry {:.1e}, psnr monotone {mono}", (m - oracle).abs(), (s1 - s2).abs()),
    )
}

// ---------------------------------------------------------------- runner

pub fn registry() -> Vec<Check> {
    vec![
        Check {
            name: "kernel_gradients",
            run: check_kernel_gradients,
        },
        Check {
            name: "geometry_oracles",
            run: check_geometry,
        },
        Check {
            name: "fps_exhaustive",
            run: check_fps,
        },
        Check {
            name: "sesa_full_attention",
            run: check_sesa,
        },
        Check {
            name: "mvdfa_contracts",
            run: check_mvdfa,
        },
        Check {
            name: "rasterizer",
            run: check_rasterizer,
        },
        Check {
            name: "view_count_invariance",
            run: check_view_counts,
        },
        Check {
            name: "encoder_view_permutation",
            run: check_encoder_permutation,
        },
        Check {
            name: "losses_metrics",
            run: check_losses,
        },
    ]
}

/// Runs every registered check whose name contains `filter`, with an
/// optional kernel fault active. Panics inside a check count as failures.
pub fn run_checks(filter: Option<&str>, fault: Option<Fault>) -> Vec<CheckResult> {
    registry()
        .into_iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .map(|c| {
            let t = Instant::now();
            let run = || catch_unwind(AssertUnwindSafe(c.run));
            let res = match fault {
                Some(f) => with_fault(f, run),
                None => run(),
            };
            let (passed, detail) = match res {
                Ok(Ok(d)) => (true, d),
                Ok(Err(d)) => (false, d),
                Err(p) => (
                    false,
                    format!(
                        "panicked: {}",
                        p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
                    ),
                ),
            };
            CheckResult {
                name: c.name,
                passed,
                detail,
                secs: t.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

/// True when at least one check ran and all passed.
pub fn all_passed(results: &[CheckResult]) -> bool {
    !results.is_empty() && results.iter().all(|r| r.passed)
}

pub fn format_report(results: &[CheckResult]) -> String {
    let mut s = String::new();
    for r in results {
        s.push_str(&format!(
            "{} {:<26} {:>8.2}s  {}\n",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.secs,
            r.detail
        ));
    }
    if results.is_empty() {
        s.push_str("FAIL no checks selected\n");
    }
    s
}

//! 3D Gaussian parameters, activations, covariance and degree-1 SH color.
//!
//! Quaternions are stored `(w, x, y, z)`. Color is three channels of four
//! real SH coefficients each (`sh[c * 4 + k]`), with a +0.5 DC offset applied
//! at evaluation time.

use crate::error::{contract, Result};
use crate::tensor::{Scalar, Tensor, Var};

/// Real SH normalization for degree 0, `1 / (2 sqrt(pi))`.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
/// Real SH normalization for degree 1, `sqrt(3 / (4 pi))`.
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

pub const SH_COEFFS: usize = 12;
/// Width of a flattened raw parameter row: center, opacity, scale, rotation, sh.
pub const RAW_PARAM_WIDTH: usize = 3 + 1 + 3 + 4 + SH_COEFFS;

pub const LOG_SCALE_MIN: f64 = -10.0;
pub const LOG_SCALE_MAX: f64 = 3.0;
const QUAT_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    pub center: [f64; 3],
    pub opacity: f64,
    pub rotation: [f64; 4],
    pub scale: [f64; 3],
    pub sh: [f64; SH_COEFFS],
}

/// Activated Gaussians: opacity in (0,1), positive scales, unit quaternions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianSet {
    pub gaussians: Vec<Gaussian>,
}

/// Unconstrained parameters; see [`activate_params`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawGaussian {
    pub center: [f64; 3],
    pub opacity_logit: f64,
    pub log_scale: [f64; 3],
    pub rotation: [f64; 4],
    pub sh: [f64; SH_COEFFS],
}

impl RawGaussian {
    /// Identity element of [`apply_update`] when used as a delta.
    pub const IDENTITY_DELTA: RawGaussian = RawGaussian {
        center: [0.0; 3],
        opacity_logit: 0.0,
        log_scale: [0.0; 3],
        rotation: [1.0, 0.0, 0.0, 0.0],
        sh: [0.0; SH_COEFFS],
    };

    pub fn is_finite(&self) -> bool {
        self.center
            .iter()
            .chain(&self.log_scale)
            .chain(&self.rotation)
            .chain(&self.sh)
            .chain(std::iter::once(&self.opacity_logit))
            .all(|v| v.is_finite())
    }

    /// Inverse of activation for a valid activated Gaussian.
    pub fn from_activated(g: &Gaussian) -> Self {
        Self {
            center: g.center,
            opacity_logit: (g.opacity / (1.0 - g.opacity)).ln(),
            log_scale: g.scale.map(f64::ln),
            rotation: g.rotation,
            sh: g.sh,
        }
    }
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, g) in self.gaussians.iter().enumerate() {
            let qn = norm4(&g.rotation);
            if (qn - 1.0).abs() > 1e-6 {
                return contract(format!("gaussian {i}: quaternion norm {qn}"));
            }
            if !(g.opacity > 0.0 && g.opacity < 1.0) {
                return contract(format!("gaussian {i}: opacity {} outside (0,1)", g.opacity));
            }
            if g.scale.iter().any(|&s| !(s > 0.0)) {
                return contract(format!("gaussian {i}: non-positive scale {:?}", g.scale));
            }
            let finite = g.center.iter().chain(&g.sh).chain(&g.scale).all(|v| v.is_finite());
            if !finite {
                return contract(format!("gaussian {i}: non-finite parameters"));
            }
        }
        Ok(())
    }

    pub fn to_raw(&self) -> Vec<RawGaussian> {
        self.gaussians.iter().map(RawGaussian::from_activated).collect()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn norm4(q: &[f64; 4]) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Unit quaternion, or the identity when `q` is (numerically) zero.
pub fn normalize_quat(q: [f64; 4]) -> [f64; 4] {
    let n = norm4(&q);
    if n < QUAT_EPS {
        [1.0, 0.0, 0.0, 0.0]
    } else {
        q.map(|v| v / n)
    }
}

pub fn activate(raw: &RawGaussian) -> Gaussian {
    Gaussian {
        center: raw.center,
        opacity: sigmoid(raw.opacity_logit),
        rotation: normalize_quat(raw.rotation),
        scale: raw.log_scale.map(|s| s.clamp(LOG_SCALE_MIN, LOG_SCALE_MAX).exp()),
        sh: raw.sh,
    }
}

pub fn activate_params(raw: &[RawGaussian]) -> GaussianSet {
    GaussianSet {
        gaussians: raw.iter().map(activate).collect(),
    }
}

/// Hamilton product `a ⊗ b`.
pub fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [w1, x1, y1, z1] = a;
    let [w2, x2, y2, z2] = b;
    [
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ]
}

/// Additive update for every field except rotation, which composes as
/// `normalize(normalize(Δq) ⊗ q)`.
pub fn apply_update(g: &RawGaussian, delta: &RawGaussian) -> RawGaussian {
    let add3 = |a: [f64; 3], b: [f64; 3]| [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
    let mut sh = g.sh;
    for (s, d) in sh.iter_mut().zip(&delta.sh) {
        *s += d;
    }
    RawGaussian {
        center: add3(g.center, delta.center),
        opacity_logit: g.opacity_logit + delta.opacity_logit,
        log_scale: add3(g.log_scale, delta.log_scale),
        rotation: normalize_quat(quat_mul(normalize_quat(delta.rotation), g.rotation)),
        sh,
    }
}

/// Rotation matrix of a unit quaternion.
pub fn rotation_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// `Σ = R S Sᵀ Rᵀ`.
pub fn build_covariance(rotation: [f64; 4], scale: [f64; 3]) -> Result<[[f64; 3]; 3]> {
    let n = norm4(&rotation);
    if (n - 1.0).abs() > 1e-3 {
        return contract(format!("build_covariance: quaternion norm {n} is not 1"));
    }
    let r = rotation_matrix(rotation);
    let mut cov = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let v: f64 = (0..3).map(|k| r[i][k] * r[j][k] * scale[k] * scale[k]).sum();
            cov[i][j] = v;
            cov[j][i] = v;
        }
    }
    Ok(cov)
}

/// Degree-1 basis values `(-y, z, -x)` for a unit direction.
fn sh_basis(dir: [f64; 3]) -> [f64; 3] {
    [-dir[1], dir[2], -dir[0]]
}

/// Color before the `[0, 1]` clamp.
pub fn eval_sh_unclamped(sh: &[f64; SH_COEFFS], dir: [f64; 3]) -> [f64; 3] {
    let b = sh_basis(dir);
    let mut rgb = [0.0; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        let k = &sh[c * 4..c * 4 + 4];
        *out = 0.5 + SH_C0 * k[0] + SH_C1 * (k[1] * b[0] + k[2] * b[1] + k[3] * b[2]);
    }
    rgb
}

pub fn eval_sh(sh: &[f64; SH_COEFFS], view_dir: [f64; 3]) -> Result<[f64; 3]> {
    let n = (view_dir.iter().map(|v| v * v).sum::<f64>()).sqrt();
    if !(n > 0.0) {
        return contract("eval_sh: zero-length view direction");
    }
    Ok(eval_sh_unclamped(sh, view_dir).map(|v| v.clamp(0.0, 1.0)))
}

/// Raw Gaussian parameters as tape variables, one row per Gaussian.
#[derive(Clone, Copy, Debug)]
pub struct RawGaussianVars<'t> {
    pub centers: Var<'t>,
    /// `[N, 1]` opacity logits.
    pub opacity: Var<'t>,
    /// `[N, 3]` log scales.
    pub scale: Var<'t>,
    /// `[N, 4]` quaternions, not necessarily unit.
    pub rotation: Var<'t>,
    pub sh: Var<'t>,
}

/// Activated parameters as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars<'t> {
    pub centers: Var<'t>,
    pub opacity: Var<'t>,
    pub scale: Var<'t>,
    pub rotation: Var<'t>,
    pub sh: Var<'t>,
}

impl<'t> RawGaussianVars<'t> {
    /// Splits `[N, RAW_PARAM_WIDTH]` rows into fields.
    pub fn from_rows(rows: Var<'t>) -> Result<Self> {
        Ok(Self {
            centers: rows.narrow(1, 0, 3)?,
            opacity: rows.narrow(1, 3, 1)?,
            scale: rows.narrow(1, 4, 3)?,
            rotation: rows.narrow(1, 7, 4)?,
            sh: rows.narrow(1, 11, SH_COEFFS)?,
        })
    }

    pub fn constant(tape: &'t crate::tensor::Tape, raw: &[RawGaussian]) -> Result<Self> {
        Self::from_rows(tape.constant(raw_rows(raw)?))
    }

    pub fn len(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn activate(&self) -> Result<GaussianVars<'t>> {
        Ok(GaussianVars {
            centers: self.centers,
            opacity: self.opacity.sigmoid()?,
            scale: self
                .scale
                .clamp(LOG_SCALE_MIN as Scalar, LOG_SCALE_MAX as Scalar)?
                .exp()?,
            rotation: self.rotation.normalize_last(QUAT_EPS as Scalar)?,
            sh: self.sh,
        })
    }

    /// Tape version of [`apply_update`]. `delta_rotation` is used as given,
    /// so callers producing it from a zero-initialized head add the identity
    /// quaternion first.
    pub fn apply_update(&self, delta: &RawGaussianVars<'t>) -> Result<RawGaussianVars<'t>> {
        let dq = delta.rotation.normalize_last(QUAT_EPS as Scalar)?;
        let rotation = quat_mul_vars(dq, self.rotation)?.normalize_last(QUAT_EPS as Scalar)?;
        Ok(Self {
            centers: self.centers.add(delta.centers)?,
            opacity: self.opacity.add(delta.opacity)?,
            scale: self.scale.add(delta.scale)?,
            rotation,
            sh: self.sh.add(delta.sh)?,
        })
    }

    /// Reads the current values back out.
    pub fn to_raw(&self) -> Vec<RawGaussian> {
        let (c, o, s, r, sh) = (
            self.centers.value(),
            self.opacity.value(),
            self.scale.value(),
            self.rotation.value(),
            self.sh.value(),
        );
        (0..self.len())
            .map(|i| RawGaussian {
                center: std::array::from_fn(|k| c.data()[i * 3 + k] as f64),
                opacity_logit: o.data()[i] as f64,
                log_scale: std::array::from_fn(|k| s.data()[i * 3 + k] as f64),
                rotation: std::array::from_fn(|k| r.data()[i * 4 + k] as f64),
                sh: std::array::from_fn(|k| sh.data()[i * SH_COEFFS + k] as f64),
            })
            .collect()
    }
}

impl GaussianVars<'_> {
    pub fn to_set(&self) -> GaussianSet {
        let (c, o, s, r, sh) = (
            self.centers.value(),
            self.opacity.value(),
            self.scale.value(),
            self.rotation.value(),
            self.sh.value(),
        );
        let n = c.shape()[0];
        GaussianSet {
            gaussians: (0..n)
                .map(|i| Gaussian {
                    center: std::array::from_fn(|k| c.data()[i * 3 + k] as f64),
                    opacity: o.data()[i] as f64,
                    rotation: std::array::from_fn(|k| r.data()[i * 4 + k] as f64),
                    scale: std::array::from_fn(|k| s.data()[i * 3 + k] as f64),
                    sh: std::array::from_fn(|k| sh.data()[i * SH_COEFFS + k] as f64),
                })
                .collect(),
        }
    }
}

/// `[N, RAW_PARAM_WIDTH]` tensor of raw parameters.
pub fn raw_rows(raw: &[RawGaussian]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(raw.len() * RAW_PARAM_WIDTH);
    for g in raw {
        data.extend(g.center.iter().map(|&v| v as Scalar));
        data.push(g.opacity_logit as Scalar);
        data.extend(g.log_scale.iter().map(|&v| v as Scalar));
        data.extend(g.rotation.iter().map(|&v| v as Scalar));
        data.extend(g.sh.iter().map(|&v| v as Scalar));
    }
    Tensor::new(&[raw.len(), RAW_PARAM_WIDTH], data)
}

/// Row-wise Hamilton product of `[N, 4]` quaternion tensors.
pub fn quat_mul_vars<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let comp = |q: Var<'t>, k: usize| q.narrow(1, k, 1);
    let (w1, x1, y1, z1) = (comp(a, 0)?, comp(a, 1)?, comp(a, 2)?, comp(a, 3)?);
    let (w2, x2, y2, z2) = (comp(b, 0)?, comp(b, 1)?, comp(b, 2)?, comp(b, 3)?);
    let w = w1.mul(w2)?.sub(x1.mul(x2)?)?.sub(y1.mul(y2)?)?.sub(z1.mul(z2)?)?;
    let x = w1.mul(x2)?.add(x1.mul(w2)?)?.add(y1.mul(z2)?)?.sub(z1.mul(y2)?)?;
    let y = w1.mul(y2)?.sub(x1.mul(z2)?)?.add(y1.mul(w2)?)?.add(z1.mul(x2)?)?;
    let z = w1.mul(z2)?.add(x1.mul(y2)?)?.sub(y1.mul(x2)?)?.add(z1.mul(w2)?)?;
    Var::concat(&[w, x, y, z], 1)
}

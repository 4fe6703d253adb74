//! CPU Gaussian splatting: EWA projection, tiled front-to-back compositing and
//! the matching analytic backward pass.
//!
//! Pixel `(x, y)` samples the image plane at its integer center, the same
//! convention [`Camera`] uses for `cx`, `cy`.

use std::path::Path;

use crate::camera::Camera;
use crate::error::{dim_err, Result};
use crate::gaussian::{rotation_matrix, Gaussian, GaussianSet, GaussianVars, RawGaussian, SH_C0, SH_C1, SH_COEFFS};
use crate::tensor::{CustomOp, Scalar, Tensor, Var};

pub const NEAR_PLANE: f64 = 0.01;
pub const BLUR: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
pub const T_MIN: f64 = 1e-4;
pub const TILE: usize = 16;
/// Squared Mahalanobis radius of the splat footprint (3 sigma).
pub const CUTOFF_POWER: f64 = 9.0;

#[derive(Clone, Debug)]
pub struct Splat2D {
    pub index: usize,
    pub mean2d: [f64; 2],
    pub cov2d: [[f64; 2]; 2],
    /// Inverse of `cov2d` as `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub alpha_base: f64,
    color_live: [bool; 3],
    cam_point: [f64; 3],
    view_dir: [f64; 3],
    view_len: f64,
}

#[derive(Clone, Debug)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    /// Channel-first `[3, H, W]`.
    pub rgb: Vec<f64>,
    /// Accumulated opacity `1 - T_final` per pixel.
    pub alpha: Vec<f64>,
}

impl RenderedImage {
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.rgb[(c * self.height + y) * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[3, self.height, self.width], self.rgb.iter().map(|&v| v as Scalar).collect())
            .expect("image dims are non-zero")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return dim_err("image", format!("expected [3, H, W], got {s:?}"));
        }
        Ok(Self {
            width: s[2],
            height: s[1],
            rgb: t.data().iter().map(|&v| v as f64).collect(),
            alpha: vec![1.0; s[1] * s[2]],
        })
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Rgb(std::array::from_fn(|c| {
                (self.at(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8
            }))
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }
}

/// Gradients with respect to activated parameters (or raw ones after [`GaussianGrads::to_raw`]).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrads {
    pub center: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
    pub scale: Vec<[f64; 3]>,
    pub rotation: Vec<[f64; 4]>,
    pub sh: Vec<[f64; SH_COEFFS]>,
}

impl GaussianGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            center: vec![[0.0; 3]; n],
            opacity: vec![0.0; n],
            scale: vec![[0.0; 3]; n],
            rotation: vec![[0.0; 4]; n],
            sh: vec![[0.0; SH_COEFFS]; n],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.center.iter().flatten()
            .chain(&self.opacity)
            .chain(self.scale.iter().flatten())
            .chain(self.rotation.iter().flatten())
            .chain(self.sh.iter().flatten())
            .all(|&v| v == 0.0)
    }

    /// Chains through the activations: sigmoid opacity, exp scale, quaternion normalization.
    pub fn to_raw(&self, raw: &[RawGaussian]) -> Self {
        let mut out = self.clone();
        for (i, r) in raw.iter().enumerate() {
            let s = crate::gaussian::sigmoid(r.opacity_logit);
            out.opacity[i] = self.opacity[i] * s * (1.0 - s);
            for k in 0..3 {
                let l = r.log_scale[k];
                let live = (crate::gaussian::LOG_SCALE_MIN..=crate::gaussian::LOG_SCALE_MAX).contains(&l);
                out.scale[i][k] = if live { self.scale[i][k] * l.exp() } else { 0.0 };
            }
            let q = r.rotation;
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            let u = q.map(|v| v / n);
            let g = self.rotation[i];
            let dot: f64 = (0..4).map(|k| g[k] * u[k]).sum();
            out.rotation[i] = std::array::from_fn(|k| (g[k] - dot * u[k]) / n);
        }
        out
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn center_hash(c: &[f64; 3]) -> u64 {
    c.iter().fold(0x9e37_79b9_7f4a_7c15, |h, v| mix64(h ^ v.to_bits()))
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

fn camera_rotation(cam: &Camera) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| cam.w2c[(i, j)]))
}

/// Splat for one Gaussian, or `None` when it is behind the near plane.
fn splat(index: usize, g: &Gaussian, cam: &Camera, w: &[[f64; 3]; 3], cam_center: [f64; 3]) -> Option<Splat2D> {
    let t: [f64; 3] = std::array::from_fn(|i| (0..3).map(|k| w[i][k] * g.center[k]).sum::<f64>() + cam.w2c[(i, 3)]);
    let z = t[2];
    if !(z > NEAR_PLANE) {
        return None;
    }
    let jac = [
        [cam.fx / z, 0.0, -cam.fx * t[0] / (z * z)],
        [0.0, cam.fy / z, -cam.fy * t[1] / (z * z)],
    ];
    // T = J W (2x3), M = R S.
    let tm: [[f64; 3]; 2] = std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| jac[i][k] * w[k][j]).sum()));
    let r = rotation_matrix(g.rotation);
    let m: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| r[i][j] * g.scale[j]));
    // T M (2x3), then cov2d = (TM)(TM)^T.
    let tmm: [[f64; 3]; 2] = std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| tm[i][k] * m[k][j]).sum()));
    let dot = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let a = dot(&tmm[0], &tmm[0]) + BLUR;
    let b = dot(&tmm[0], &tmm[1]);
    let c = dot(&tmm[1], &tmm[1]) + BLUR;
    let det = a * c - b * b;
    if !(det > 0.0) {
        return None;
    }
    let v: [f64; 3] = std::array::from_fn(|k| g.center[k] - cam_center[k]);
    let view_len = dot(&v, &v).sqrt();
    let d = v.map(|x| x / view_len);
    let basis = [-d[1], d[2], -d[0]];
    let mut color = [0.0; 3];
    let mut live = [false; 3];
    for ch in 0..3 {
        let k = &g.sh[ch * 4..ch * 4 + 4];
        let raw = 0.5 + SH_C0 * k[0] + SH_C1 * (k[1] * basis[0] + k[2] * basis[1] + k[3] * basis[2]);
        live[ch] = raw > 0.0 && raw < 1.0;
        color[ch] = raw.clamp(0.0, 1.0);
    }
    Some(Splat2D {
        index,
        mean2d: [cam.fx * t[0] / z + cam.cx, cam.fy * t[1] / z + cam.cy],
        cov2d: [[a, b], [b, c]],
        conic: [c / det, -b / det, a / det],
        depth: z,
        color,
        alpha_base: g.opacity,
        color_live: live,
        cam_point: t,
        view_dir: d,
        view_len,
    })
}

pub fn project_gaussian_2d(set: &GaussianSet, cam: &Camera) -> Vec<Option<Splat2D>> {
    let w = camera_rotation(cam);
    let cc = cam.center();
    let cc = [cc.x, cc.y, cc.z];
    set.gaussians.iter().enumerate().map(|(i, g)| splat(i, g, cam, &w, cc)).collect()
}

/// Forward-pass record needed by [`rasterize_backward`].
pub struct RenderState {
    set: GaussianSet,
    cam: Camera,
    background: [f64; 3],
    splats: Vec<Splat2D>,
    /// Per tile, indices into `splats` in compositing order.
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
}

impl RenderState {
    pub fn splats(&self) -> &[Splat2D] {
        &self.splats
    }
}

struct Hit {
    splat: usize,
    alpha: f64,
    gauss: f64,
    clamped: bool,
    d: [f64; 2],
    t_before: f64,
}

impl RenderState {
    /// Walks the compositing list for one pixel, calling `f` for every
    /// contributing splat. Returns the final transmittance.
    fn composite(&self, x: usize, y: usize, mut f: impl FnMut(&Hit)) -> f64 {
        let tile = (y / TILE) * self.tiles_x + x / TILE;
        let (px, py) = (x as f64, y as f64);
        let mut t = 1.0;
        for &si in &self.tiles[tile] {
            let s = &self.splats[si as usize];
            let d = [px - s.mean2d[0], py - s.mean2d[1]];
            let power = s.conic[0] * d[0] * d[0] + 2.0 * s.conic[1] * d[0] * d[1] + s.conic[2] * d[1] * d[1];
            if !(power <= CUTOFF_POWER) {
                continue;
            }
            let gauss = (-0.5 * power).exp();
            let raw = s.alpha_base * gauss;
            let clamped = raw > ALPHA_MAX;
            let alpha = if clamped { ALPHA_MAX } else { raw };
            f(&Hit {
                splat: si as usize,
                alpha,
                gauss,
                clamped,
                d,
                t_before: t,
            });
            t *= 1.0 - alpha;
            if t < T_MIN {
                break;
            }
        }
        t
    }
}

/// Renders and keeps the state for a backward pass.
pub fn render(set: &GaussianSet, cam: &Camera, background: [f64; 3]) -> (RenderedImage, RenderState) {
    let (w, h) = (cam.width, cam.height);
    let mut splats: Vec<Splat2D> = project_gaussian_2d(set, cam).into_iter().flatten().collect();
    splats.sort_by(|a, b| {
        a.depth
            .total_cmp(&b.depth)
            .then_with(|| center_hash(&set.gaussians[a.index].center).cmp(&center_hash(&set.gaussians[b.index].center)))
            .then(a.index.cmp(&b.index))
    });
    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        let ex = (CUTOFF_POWER * s.cov2d[0][0]).sqrt();
        let ey = (CUTOFF_POWER * s.cov2d[1][1]).sqrt();
        let (x0, x1) = (s.mean2d[0] - ex, s.mean2d[0] + ex);
        let (y0, y1) = (s.mean2d[1] - ey, s.mean2d[1] + ey);
        if x1 < 0.0 || y1 < 0.0 || x0 > (w - 1) as f64 || y0 > (h - 1) as f64 {
            continue;
        }
        let tx0 = (x0.max(0.0).floor() as usize / TILE).min(tiles_x - 1);
        let tx1 = (x1.min((w - 1) as f64).ceil() as usize / TILE).min(tiles_x - 1);
        let ty0 = (y0.max(0.0).floor() as usize / TILE).min(tiles_y - 1);
        let ty1 = (y1.min((h - 1) as f64).ceil() as usize / TILE).min(tiles_y - 1);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tiles[ty * tiles_x + tx].push(si as u32);
            }
        }
    }
    let state = RenderState {
        set: set.clone(),
        cam: cam.clone(),
        background,
        splats,
        tiles,
        tiles_x,
    };
    let mut rgb = vec![0.0; 3 * h * w];
    let mut alpha = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut c = [0.0; 3];
            let t = state.composite(x, y, |hit| {
                let s = &state.splats[hit.splat];
                let wgt = hit.alpha * hit.t_before;
                for k in 0..3 {
                    c[k] += s.color[k] * wgt;
                }
            });
            for k in 0..3 {
                rgb[(k * h + y) * w + x] = c[k] + background[k] * t;
            }
            alpha[y * w + x] = 1.0 - t;
        }
    }
    (
        RenderedImage {
            width: w,
            height: h,
            rgb,
            alpha,
        },
        state,
    )
}

pub fn rasterize(set: &GaussianSet, cam: &Camera, background: [f64; 3]) -> RenderedImage {
    render(set, cam, background).0
}

/// Per-pixel compositing weights `α_i T_i` followed by the background weight `T_final`.
pub fn compositing_weights(state: &RenderState, x: usize, y: usize) -> Vec<f64> {
    let mut w = Vec::new();
    let t = state.composite(x, y, |hit| w.push(hit.alpha * hit.t_before));
    w.push(t);
    w
}

/// Fingerprint of every discrete decision in a render: which splats are
/// culled, which pass the footprint cutoff, where compositing stops, and which
/// alpha and color clamps are active. Finite differences are only meaningful
/// between renders with equal signatures.
pub fn visibility_signature(state: &RenderState) -> u64 {
    let mut h = 0x51_7cc1_b727_220a_u64;
    for s in &state.splats {
        h = mix64(h ^ s.index as u64);
        for live in s.color_live {
            h = mix64(h ^ live as u64);
        }
    }
    for y in 0..state.cam.height {
        for x in 0..state.cam.width {
            state.composite(x, y, |hit| {
                h = mix64(h ^ ((hit.splat as u64) << 1) ^ hit.clamped as u64);
            });
            h = mix64(h ^ 0xff);
        }
    }
    h
}

/// Gradients of `Σ grad_rgb · rgb` with respect to the activated parameters.
/// `grad_rgb` is channel-first `[3, H, W]`.
pub fn rasterize_backward(state: &RenderState, grad_rgb: &[f64]) -> GaussianGrads {
    let cam = &state.cam;
    let (w, h) = (cam.width, cam.height);
    assert_eq!(grad_rgb.len(), 3 * w * h, "grad_rgb must be [3, H, W]");
    let ns = state.splats.len();
    let mut g_mean = vec![[0.0; 2]; ns];
    let mut g_conic = vec![[0.0; 3]; ns];
    let mut g_color = vec![[0.0; 3]; ns];
    let mut g_opacity = vec![0.0; ns];
    let mut hits: Vec<(usize, f64, f64, bool, [f64; 2], f64)> = Vec::new();

    for y in 0..h {
        for x in 0..w {
            let gp: [f64; 3] = std::array::from_fn(|k| grad_rgb[(k * h + y) * w + x]);
            if gp == [0.0; 3] {
                continue;
            }
            hits.clear();
            state.composite(x, y, |hit| {
                hits.push((hit.splat, hit.alpha, hit.gauss, hit.clamped, hit.d, hit.t_before));
            });
            // Color of everything behind the current splat, background included.
            let mut behind = state.background;
            for &(si, alpha, gauss, clamped, d, t) in hits.iter().rev() {
                let s = &state.splats[si];
                for k in 0..3 {
                    g_color[si][k] += gp[k] * alpha * t;
                }
                let g_alpha: f64 = (0..3).map(|k| gp[k] * t * (s.color[k] - behind[k])).sum();
                for k in 0..3 {
                    behind[k] = alpha * s.color[k] + (1.0 - alpha) * behind[k];
                }
                if clamped {
                    continue;
                }
                g_opacity[si] += g_alpha * gauss;
                let g_power = -0.5 * alpha * g_alpha;
                let [a, b, c] = s.conic;
                g_mean[si][0] -= g_power * 2.0 * (a * d[0] + b * d[1]);
                g_mean[si][1] -= g_power * 2.0 * (b * d[0] + c * d[1]);
                g_conic[si][0] += g_power * d[0] * d[0];
                g_conic[si][1] += g_power * 2.0 * d[0] * d[1];
                g_conic[si][2] += g_power * d[1] * d[1];
            }
        }
    }

    let mut out = GaussianGrads::zeros(state.set.len());
    let wr = camera_rotation(cam);
    for (si, s) in state.splats.iter().enumerate() {
        let g = &state.set.gaussians[s.index];
        let i = s.index;
        out.opacity[i] += g_opacity[si];

        // Color through SH and the view direction.
        let dvec = s.view_dir;
        let mut g_dir = [0.0; 3];
        for ch in 0..3 {
            if !s.color_live[ch] {
                continue;
            }
            let gc = g_color[si][ch];
            let k = &g.sh[ch * 4..ch * 4 + 4];
            out.sh[i][ch * 4] += gc * SH_C0;
            out.sh[i][ch * 4 + 1] += gc * SH_C1 * -dvec[1];
            out.sh[i][ch * 4 + 2] += gc * SH_C1 * dvec[2];
            out.sh[i][ch * 4 + 3] += gc * SH_C1 * -dvec[0];
            g_dir[0] -= gc * SH_C1 * k[3];
            g_dir[1] -= gc * SH_C1 * k[1];
            g_dir[2] += gc * SH_C1 * k[2];
        }
        let gd_dot: f64 = (0..3).map(|k| g_dir[k] * dvec[k]).sum();
        for k in 0..3 {
            out.center[i][k] += (g_dir[k] - gd_dot * dvec[k]) / s.view_len;
        }

        // Conic -> cov2d: dL/dΣ2 = -K G K.
        let [a, b, c] = s.conic;
        let kk = [[a, b], [b, c]];
        let gk = [[g_conic[si][0], 0.5 * g_conic[si][1]], [0.5 * g_conic[si][1], g_conic[si][2]]];
        let kg: [[f64; 2]; 2] = std::array::from_fn(|p| std::array::from_fn(|q| kk[p][0] * gk[0][q] + kk[p][1] * gk[1][q]));
        let g2: [[f64; 2]; 2] = std::array::from_fn(|p| std::array::from_fn(|q| -(kg[p][0] * kk[0][q] + kg[p][1] * kk[1][q])));

        let [tx, ty, z] = s.cam_point;
        let (fx, fy) = (cam.fx, cam.fy);
        let jac = [[fx / z, 0.0, -fx * tx / (z * z)], [0.0, fy / z, -fy * ty / (z * z)]];
        let tm: [[f64; 3]; 2] = std::array::from_fn(|p| std::array::from_fn(|q| (0..3).map(|k| jac[p][k] * wr[k][q]).sum()));
        let r = rotation_matrix(g.rotation);
        let m: [[f64; 3]; 3] = std::array::from_fn(|p| std::array::from_fn(|q| r[p][q] * g.scale[q]));
        let sigma = {
            let mt: [[f64; 3]; 3] = std::array::from_fn(|p| std::array::from_fn(|q| m[q][p]));
            mat3_mul(&m, &mt)
        };
        // dL/dT = 2 G2 T Σ (2x3).
        let ts: [[f64; 3]; 2] = std::array::from_fn(|p| std::array::from_fn(|q| (0..3).map(|k| tm[p][k] * sigma[k][q]).sum()));
        let g_t: [[f64; 3]; 2] = std::array::from_fn(|p| std::array::from_fn(|q| 2.0 * (g2[p][0] * ts[0][q] + g2[p][1] * ts[1][q])));
        // dL/dΣ = Tᵀ G2 T.
        let g_sigma: [[f64; 3]; 3] = std::array::from_fn(|p| {
            std::array::from_fn(|q| {
                (0..2)
                    .flat_map(|u| (0..2).map(move |v| (u, v)))
                    .map(|(u, v)| tm[u][p] * g2[u][v] * tm[v][q])
                    .sum()
            })
        });
        // dL/dJ = dL/dT Wᵀ.
        let g_j: [[f64; 3]; 2] = std::array::from_fn(|p| std::array::from_fn(|q| (0..3).map(|k| g_t[p][k] * wr[q][k]).sum()));
        let gm = g_mean[si];
        let z2 = z * z;
        let z3 = z2 * z;
        let g_cam = [
            g_j[0][2] * (-fx / z2) + gm[0] * fx / z,
            g_j[1][2] * (-fy / z2) + gm[1] * fy / z,
            g_j[0][0] * (-fx / z2)
                + g_j[0][2] * (2.0 * fx * tx / z3)
                + g_j[1][1] * (-fy / z2)
                + g_j[1][2] * (2.0 * fy * ty / z3)
                - gm[0] * fx * tx / z2
                - gm[1] * fy * ty / z2,
        ];
        for k in 0..3 {
            out.center[i][k] += (0..3).map(|p| wr[p][k] * g_cam[p]).sum::<f64>();
        }

        // Σ = M Mᵀ: dL/dM = 2 GΣ M.
        let g_m: [[f64; 3]; 3] = std::array::from_fn(|p| std::array::from_fn(|q| 2.0 * (0..3).map(|k| g_sigma[p][k] * m[k][q]).sum::<f64>()));
        for q in 0..3 {
            out.scale[i][q] += (0..3).map(|p| g_m[p][q] * r[p][q]).sum::<f64>();
        }
        let g_r: [[f64; 3]; 3] = std::array::from_fn(|p| std::array::from_fn(|q| g_m[p][q] * g.scale[q]));
        let gq = rotation_grad(g.rotation, &g_r);
        for k in 0..4 {
            out.rotation[i][k] += gq[k];
        }
    }
    out
}

/// Pulls `dL/dR` back to the quaternion entries of the rotation formula.
fn rotation_grad(q: [f64; 4], g: &[[f64; 3]; 3]) -> [f64; 4] {
    let [w, x, y, z] = q;
    let gw = 2.0 * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]);
    let gx = 2.0 * (y * g[0][1] + z * g[0][2] + y * g[1][0] - 2.0 * x * g[1][1] - w * g[1][2] + z * g[2][0] + w * g[2][1] - 2.0 * x * g[2][2]);
    let gy = 2.0 * (-2.0 * y * g[0][0] + x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2] - w * g[2][0] + z * g[2][1] - 2.0 * y * g[2][2]);
    let gz = 2.0 * (-2.0 * z * g[0][0] - w * g[0][1] + x * g[0][2] + w * g[1][0] - 2.0 * z * g[1][1] + y * g[1][2] + x * g[2][0] + y * g[2][1]);
    [gw, gx, gy, gz]
}

struct RenderOp {
    state: RenderState,
}

impl CustomOp for RenderOp {
    fn name(&self) -> &'static str {
        "rasterize"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let grad: Vec<f64> = g.data().iter().map(|&v| v as f64).collect();
        let gr = rasterize_backward(&self.state, &grad);
        let n = gr.opacity.len();
        let pack = |w: usize, data: Vec<f64>| Tensor::new(&[n, w], data.into_iter().map(|v| v as Scalar).collect());
        Ok(vec![
            Some(pack(3, gr.center.concat())?),
            Some(pack(1, gr.opacity)?),
            Some(pack(3, gr.scale.concat())?),
            Some(pack(4, gr.rotation.concat())?),
            Some(pack(SH_COEFFS, gr.sh.concat())?),
        ])
    }
}

/// Renders activated tape parameters into a `[3, H, W]` image variable.
pub fn render_var<'t>(g: &GaussianVars<'t>, cam: &Camera, background: [f64; 3]) -> Result<Var<'t>> {
    let set = g.to_set();
    let (img, state) = render(&set, cam, background);
    let inputs = [g.centers, g.opacity, g.scale, g.rotation, g.sh];
    Ok(g.centers.tape().custom(&inputs, img.to_tensor(), Box::new(RenderOp { state })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;

    fn cam(w: usize, h: usize, f: f64) -> Camera {
        Camera::new(f, f, (w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0, w, h, Matrix4::identity()).unwrap()
    }

    fn gauss(center: [f64; 3], scale: f64, opacity: f64, rgb: [f64; 3]) -> Gaussian {
        let mut sh = [0.0; SH_COEFFS];
        for c in 0..3 {
            sh[c * 4] = (rgb[c] - 0.5) / SH_C0;
        }
        Gaussian {
            center,
            opacity,
            rotation: [1.0, 0.0, 0.0, 0.0],
            scale: [scale; 3],
            sh,
        }
    }

    #[test]
    fn isotropic_on_axis_cov() {
        let c = Camera::new(50.0, 40.0, 8.0, 8.0, 17, 17, Matrix4::identity()).unwrap();
        let (s, z) = (0.1, 2.0);
        let set = GaussianSet { gaussians: vec![gauss([0.0, 0.0, z], s, 0.5, [0.5; 3])] };
        let sp = project_gaussian_2d(&set, &c)[0].clone().unwrap();
        assert!((sp.cov2d[0][0] - ((50.0 * s / z).powi(2) + BLUR)).abs() < 1e-12);
        assert!((sp.cov2d[1][1] - ((40.0 * s / z).powi(2) + BLUR)).abs() < 1e-12);
        assert!(sp.cov2d[0][1].abs() < 1e-15);

        let far = GaussianSet { gaussians: vec![gauss([0.0, 0.0, 2.0 * z], s, 0.5, [0.5; 3])] };
        let sf = project_gaussian_2d(&far, &c)[0].clone().unwrap();
        let ratio = ((sf.cov2d[0][0] - BLUR) / (sp.cov2d[0][0] - BLUR)).sqrt();
        assert!((ratio - 0.5).abs() < 1e-12);

        let behind = GaussianSet { gaussians: vec![gauss([0.0, 0.0, -1.0], s, 0.5, [0.5; 3]), gauss([0.0, 0.0, 0.0], s, 0.5, [0.5; 3])] };
        assert!(project_gaussian_2d(&behind, &c).iter().all(Option::is_none));
    }

    #[test]
    fn empty_set_is_background() {
        let img = rasterize(&GaussianSet::default(), &cam(5, 4, 3.0), [0.2, 0.4, 0.6]);
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!([img.at(0, y, x), img.at(1, y, x), img.at(2, y, x)], [0.2, 0.4, 0.6]);
            }
        }
    }

    #[test]
    fn single_opaque_gaussian_hits_alpha_clamp() {
        let set = GaussianSet { gaussians: vec![gauss([0.0, 0.0, 2.0], 0.2, 1.0 - 1e-9, [0.8, 0.4, 0.2])] };
        let img = rasterize(&set, &cam(9, 9, 10.0), [0.0; 3]);
        for (k, want) in [0.8, 0.4, 0.2].into_iter().enumerate() {
            assert!((img.at(k, 4, 4) - 0.99 * want).abs() < 1e-12);
        }
    }

    #[test]
    fn two_layer_compositing() {
        // Peak alpha is exactly the opacity at the center pixel.
        let set = GaussianSet {
            gaussians: vec![
                gauss([0.0, 0.0, 3.0], 0.3, 0.5, [0.0, 1.0, 0.0]),
                gauss([0.0, 0.0, 2.0], 0.3, 0.5, [1.0, 0.0, 0.0]),
            ],
        };
        let img = rasterize(&set, &cam(9, 9, 10.0), [0.0; 3]);
        assert!((img.at(0, 4, 4) - 0.5).abs() < 1e-12);
        assert!((img.at(1, 4, 4) - 0.25).abs() < 1e-12);
        assert_eq!(img.at(2, 4, 4), 0.0);
    }

    #[test]
    fn background_only_has_zero_grads() {
        let set = GaussianSet { gaussians: vec![gauss([0.0, 0.0, -2.0], 0.2, 0.5, [0.5; 3]), gauss([50.0, 0.0, 2.0], 0.01, 0.5, [0.5; 3])] };
        let c = cam(8, 8, 8.0);
        let (_, st) = render(&set, &c, [0.3; 3]);
        let g = rasterize_backward(&st, &vec![1.0; 3 * 64]);
        assert!(g.is_zero());
    }

    #[test]
    fn rotation_grad_matches_fd() {
        let q = [0.7, -0.3, 0.5, 0.2];
        let g = [[0.3, -1.2, 0.5], [0.8, 0.1, -0.4], [-0.6, 0.9, 1.1]];
        let f = |q: [f64; 4]| -> f64 {
            let r = rotation_matrix(q);
            (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| r[i][j] * g[i][j]).sum()
        };
        let a = rotation_grad(q, &g);
        for k in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[k] += 1e-6;
            qm[k] -= 1e-6;
            let n = (f(qp) - f(qm)) / 2e-6;
            assert!((a[k] - n).abs() < 1e-8, "{k}: {} vs {n}", a[k]);
        }
    }
}

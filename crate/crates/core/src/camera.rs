//! Pinhole cameras and projection of Gaussian centers.
//!
//! Camera space follows the usual computer-vision convention: +x right,
//! +y down, +z forward. Pixel coordinates place pixel centers on integers,
//! and normalized coordinates map pixel 0 to -1 and pixel `W-1` to +1, the
//! same convention [`grid_sample_bilinear`](crate::tensor::grid_sample_bilinear) uses.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::error::{contract, Result};
use crate::tensor::{CustomOp, Scalar, Tensor, Var};

/// Points at or closer than this depth are behind the camera.
pub const NEAR_EPS: f64 = 1e-6;

/// Normalized coordinate given to points behind a camera, far enough outside
/// `[-1, 1]` that sampling offsets cannot bring them back onto the map.
pub const BEHIND_CAMERA_UV: f64 = -10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rigid transform.
    pub w2c: Matrix4<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedPoint {
    pub pixel: [f64; 2],
    pub uv: [f64; 2],
    pub depth: f64,
    pub valid: bool,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize, w2c: Matrix4<f64>) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            w2c,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], fov_x: f64, width: usize, height: usize) -> Result<Self> {
        let eye = Vector3::from(eye);
        let forward = (Vector3::from(target) - eye).normalize();
        let right = forward.cross(&Vector3::from(up));
        if right.norm() < 1e-9 {
            return contract("look_at: up is parallel to the viewing direction");
        }
        let right = right.normalize();
        // Image y points down, i.e. against world up.
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye);
        let mut w2c = Matrix4::identity();
        w2c.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        w2c.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        let f = (width as f64 - 1.0) * 0.5 / (fov_x * 0.5).tan();
        Self::new(
            f,
            f,
            (width as f64 - 1.0) * 0.5,
            (height as f64 - 1.0) * 0.5,
            width,
            height,
            w2c,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return contract(format!("camera focal lengths must be positive, got ({}, {})", self.fx, self.fy));
        }
        if self.width == 0 || self.height == 0 {
            return contract("camera resolution must be non-zero");
        }
        let det = self.rotation().determinant();
        if (det - 1.0).abs() > 1e-6 {
            return contract(format!("camera rotation has determinant {det}"));
        }
        let bottom = self.w2c.row(3);
        if bottom[0] != 0.0 || bottom[1] != 0.0 || bottom[2] != 0.0 || bottom[3] != 1.0 {
            return contract(format!("extrinsic bottom row must be (0,0,0,1), got {bottom}"));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.w2c.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.w2c.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Intrinsics that map camera coordinates straight to normalized `[-1, 1]` coordinates.
    pub fn normalized_intrinsics(&self) -> Matrix3<f64> {
        let sx = 2.0 / (self.width as f64 - 1.0).max(1.0);
        let sy = 2.0 / (self.height as f64 - 1.0).max(1.0);
        Matrix3::new(
            self.fx * sx,
            0.0,
            self.cx * sx - 1.0,
            0.0,
            self.fy * sy,
            self.cy * sy - 1.0,
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn to_camera(&self, p: [f64; 3]) -> Vector3<f64> {
        self.rotation() * Vector3::from(p) + self.translation()
    }

    fn uv_scale(&self) -> (f64, f64) {
        (
            2.0 / (self.width as f64 - 1.0).max(1.0),
            2.0 / (self.height as f64 - 1.0).max(1.0),
        )
    }

    pub fn pixel_to_uv(&self, pixel: [f64; 2]) -> [f64; 2] {
        let (sx, sy) = self.uv_scale();
        [pixel[0] * sx - 1.0, pixel[1] * sy - 1.0]
    }
}

/// Projection that accepts points up to `margin` normalized units outside the image.
pub fn project_with_margin(p: [f64; 3], cam: &Camera, margin: f64) -> ProjectedPoint {
    let pc = cam.to_camera(p);
    let z = pc.z;
    let pixel = [cam.fx * pc.x / z + cam.cx, cam.fy * pc.y / z + cam.cy];
    let uv = cam.pixel_to_uv(pixel);
    let lim = 1.0 + margin;
    let valid = z > NEAR_EPS && uv.iter().all(|c| c.abs() <= lim);
    ProjectedPoint {
        pixel,
        uv,
        depth: z,
        valid,
    }
}

pub fn project_point(p: [f64; 3], cam: &Camera) -> ProjectedPoint {
    project_with_margin(p, cam, 0.0)
}

pub fn project_pinhole(points: &[[f64; 3]], cam: &Camera) -> Vec<ProjectedPoint> {
    points.iter().map(|&p| project_point(p, cam)).collect()
}

/// True when `p` projects inside at least one camera.
pub fn in_cone_of_vision(p: [f64; 3], cams: &[Camera]) -> bool {
    cams.iter().any(|c| project_point(p, c).valid)
}

/// Re-expresses every extrinsic relative to the first camera, which becomes the identity.
pub fn normalize_to_reference(cams: &[Camera]) -> Result<Vec<Camera>> {
    let first = cams.first().ok_or_else(|| crate::Error::Contract("normalize_to_reference: no cameras".into()))?;
    let Some(inv) = first.w2c.try_inverse() else {
        return contract("normalize_to_reference: reference extrinsic is singular");
    };
    cams.iter()
        .enumerate()
        .map(|(i, c)| {
            let mut w2c = if i == 0 { Matrix4::identity() } else { c.w2c * inv };
            // Re-pin the homogeneous row so rounding cannot break validation.
            w2c.set_row(3, &Vector4::new(0.0, 0.0, 0.0, 1.0).transpose());
            let cam = Camera { w2c, ..c.clone() };
            cam.validate()?;
            Ok(cam)
        })
        .collect()
}

/// Row-major flatten of `homog(K_norm) · w2c`, the 16-value camera descriptor
/// that conditions query modulation.
pub fn camera_embedding_input(cam: &Camera) -> [f64; 16] {
    let mut k = Matrix4::identity();
    k.fixed_view_mut::<3, 3>(0, 0).copy_from(&cam.normalized_intrinsics());
    let m = k * cam.w2c;
    std::array::from_fn(|i| m[(i / 4, i % 4)])
}

struct ProjectOp {
    /// Per view: `du/dp_cam` and `dv/dp_cam` rows already rotated back to world space, per point.
    jacobians: Vec<[[f64; 3]; 2]>,
}

impl CustomOp for ProjectOp {
    fn name(&self) -> &'static str {
        "project_points"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let views = g.shape()[0];
        let npts = g.shape()[1];
        let mut out = vec![0.0 as Scalar; npts * 3];
        for v in 0..views {
            for p in 0..npts {
                let j = &self.jacobians[v * npts + p];
                let gu = g.data()[(v * npts + p) * 2] as f64;
                let gv = g.data()[(v * npts + p) * 2 + 1] as f64;
                for k in 0..3 {
                    out[p * 3 + k] += (gu * j[0][k] + gv * j[1][k]) as Scalar;
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(vec![npts, 3], out))])
    }
}

/// Projects centers `[N, 3]` into every camera, giving normalized coordinates
/// `[I, N, 2]` and validity flags `[I][N]`. Points behind a camera get
/// [`BEHIND_CAMERA_UV`] and no gradient.
pub fn project_points_var<'t>(centers: Var<'t>, cams: &[Camera]) -> Result<(Var<'t>, Vec<Vec<bool>>)> {
    let c = centers.value();
    if c.rank() != 2 || c.shape()[1] != 3 {
        return crate::error::dim_err("project_points", format!("centers must be [N, 3], got {:?}", c.shape()));
    }
    let n = c.shape()[0];
    let mut out = Vec::with_capacity(cams.len() * n * 2);
    let mut jac = Vec::with_capacity(cams.len() * n);
    let mut valid = Vec::with_capacity(cams.len());
    for cam in cams {
        let r = cam.rotation();
        let (sx, sy) = cam.uv_scale();
        let mut vflags = Vec::with_capacity(n);
        for i in 0..n {
            let p = [c.data()[i * 3] as f64, c.data()[i * 3 + 1] as f64, c.data()[i * 3 + 2] as f64];
            let proj = project_point(p, cam);
            vflags.push(proj.valid);
            if proj.depth <= NEAR_EPS {
                out.extend([BEHIND_CAMERA_UV as Scalar; 2]);
                jac.push([[0.0; 3]; 2]);
                continue;
            }
            out.push(proj.uv[0] as Scalar);
            out.push(proj.uv[1] as Scalar);
            let pc = cam.to_camera(p);
            let z = pc.z;
            let du = Vector3::new(sx * cam.fx / z, 0.0, -sx * cam.fx * pc.x / (z * z));
            let dv = Vector3::new(0.0, sy * cam.fy / z, -sy * cam.fy * pc.y / (z * z));
            let du_w = r.transpose() * du;
            let dv_w = r.transpose() * dv;
            jac.push([[du_w.x, du_w.y, du_w.z], [dv_w.x, dv_w.y, dv_w.z]]);
        }
        valid.push(vflags);
    }
    let out = Tensor::new(&[cams.len(), n, 2], out)?;
    let op = ProjectOp { jacobians: jac };
    Ok((centers.tape().custom(&[centers], out, Box::new(op)), valid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_cam() -> Camera {
        Camera::new(1.0, 1.0, 1.0, 1.0, 3, 3, Matrix4::identity()).unwrap()
    }

    pub(crate) fn random_rotation<R: Rng>(rng: &mut R) -> Matrix3<f64> {
        let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ));
        q.to_rotation_matrix().into_inner()
    }

    fn random_camera<R: Rng>(rng: &mut R) -> Camera {
        let r = random_rotation(rng);
        let t = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mut w2c = Matrix4::identity();
        w2c.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        w2c.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Camera::new(
            rng.random_range(20.0..80.0),
            rng.random_range(20.0..80.0),
            rng.random_range(10.0..20.0),
            rng.random_range(10.0..20.0),
            32,
            24,
            w2c,
        )
        .unwrap()
    }

    #[test]
    fn optical_axis_projects_to_center() {
        let p = project_point([0.0, 0.0, 2.0], &unit_cam());
        assert_eq!(p.pixel, [1.0, 1.0]);
        assert_eq!(p.uv, [0.0, 0.0]);
        assert_eq!(p.depth, 2.0);
        assert!(p.valid);
        let p = project_point([2.0, 0.0, 2.0], &unit_cam());
        assert_eq!(p.pixel, [2.0, 1.0]);
        assert_eq!(p.uv, [1.0, 0.0]);
    }

    #[test]
    fn behind_camera_is_invalid() {
        let p = project_point([0.0, 0.0, -1.0], &unit_cam());
        assert!(!p.valid);
        assert!(!in_cone_of_vision([0.0, 0.0, -1.0], &[unit_cam()]));
        assert!(in_cone_of_vision([0.0, 0.0, 2.0], &[unit_cam()]));
    }

    #[test]
    fn projection_matches_homogeneous_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let cam = random_camera(&mut rng);
            let p = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            // Oracle: explicit 3x4 product K [R|t] then dehomogenize.
            let k = [[cam.fx, 0.0, cam.cx], [0.0, cam.fy, cam.cy], [0.0, 0.0, 1.0]];
            let mut h = [0.0; 3];
            for i in 0..3 {
                for j in 0..3 {
                    let mut rt = 0.0;
                    for m in 0..3 {
                        rt += cam.w2c[(j, m)] * p[m];
                    }
                    rt += cam.w2c[(j, 3)];
                    h[i] += k[i][j] * rt;
                }
            }
            let pr = project_point(p, &cam);
            if h[2].abs() < 1e-3 {
                continue;
            }
            assert!((pr.pixel[0] - h[0] / h[2]).abs() < 1e-9);
            assert!((pr.pixel[1] - h[1] / h[2]).abs() < 1e-9);
        }
    }

    #[test]
    fn reference_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_camera(&mut rng);
        let b = random_camera(&mut rng);
        let single = normalize_to_reference(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single[0].w2c, Matrix4::identity());
        let same = normalize_to_reference(&[a.clone(), a.clone()]).unwrap();
        assert!((same[1].w2c - Matrix4::identity()).abs().max() < 1e-10);

        let pair = normalize_to_reference(&[a.clone(), b.clone()]).unwrap();
        let (ra, ta) = (a.rotation(), a.translation());
        let mut inv = Matrix4::identity();
        inv.fixed_view_mut::<3, 3>(0, 0).copy_from(&ra.transpose());
        inv.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-(ra.transpose() * ta)));
        let expect = b.w2c * inv;
        assert!((pair[1].w2c - expect).abs().max() < 1e-10);
        assert!(normalize_to_reference(&[]).is_err());
    }

    #[test]
    fn embedding_of_identity_camera() {
        // fx = (W-1)/2 and cx = (W-1)/2 make the normalized intrinsics the identity.
        let cam = Camera::new(1.0, 1.0, 1.0, 1.0, 3, 3, Matrix4::identity()).unwrap();
        let e = camera_embedding_input(&cam);
        let ident: [f64; 16] = std::array::from_fn(|i| if i % 5 == 0 { 1.0 } else { 0.0 });
        assert_eq!(e, ident);

        let mut w2c = Matrix4::identity();
        w2c[(0, 3)] = 0.5;
        w2c[(1, 3)] = -2.0;
        w2c[(2, 3)] = 3.0;
        let e = camera_embedding_input(&Camera { w2c, ..cam });
        assert_eq!(&e[..4], &[1.0, 0.0, 0.0, 0.5]);
        assert_eq!(&e[4..8], &[0.0, 1.0, 0.0, -2.0]);
        assert_eq!(&e[8..12], &[0.0, 0.0, 1.0, 3.0]);
        assert_eq!(&e[12..], &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn validity_is_monotone_in_margin() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cam = random_camera(&mut rng);
        for _ in 0..500 {
            let p = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let margins = [0.5, 0.2, 0.0, -0.2, -0.5];
            let flags: Vec<bool> = margins.iter().map(|&m| project_with_margin(p, &cam, m).valid).collect();
            for w in flags.windows(2) {
                assert!(w[0] || !w[1], "shrinking the margin made a point valid");
            }
        }
    }

    #[test]
    fn projection_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cams: Vec<Camera> = (0..2).map(|_| random_camera(&mut rng)).collect();
        let mut pts = Vec::new();
        while pts.len() < 8 * 3 {
            let p = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            if cams.iter().all(|c| c.to_camera(p).z > 0.1) {
                pts.extend(p.map(|v| v as Scalar));
            }
        }
        let probe = Tensor::randn(&[2, 8, 2], 1.0, &mut rng);
        let r = grad_check(
            |tape, v| {
                let (uv, _) = project_points_var(v[0], &cams)?;
                uv.mul(tape.constant(probe.clone()))?.sum()
            },
            &[Tensor::new(&[8, 3], pts).unwrap()],
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn projection_var_marks_behind_points() {
        let tape = Tape::new();
        let c = tape.leaf(Tensor::new(&[2, 3], vec![0.0, 0.0, 2.0, 0.0, 0.0, -2.0]).unwrap());
        let (uv, valid) = project_points_var(c, &[unit_cam()]).unwrap();
        assert_eq!(valid, vec![vec![true, false]]);
        let uv = uv.value();
        assert_eq!(&uv.data()[..2], &[0.0, 0.0]);
        assert_eq!(&uv.data()[2..], &[BEHIND_CAMERA_UV as Scalar; 2]);
    }
}

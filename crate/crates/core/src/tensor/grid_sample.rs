//! Bilinear feature sampling at continuous coordinates.
//!
//! Coordinates are normalized so that (-1, -1) is the center of the top-left
//! pixel and (+1, +1) the center of the bottom-right pixel. Taps that fall
//! outside the map read zeros.

use super::tape::Var;
use super::{Scalar, Tensor};
use crate::error::{dim_err, Result};

struct Taps {
    x0: isize,
    y0: isize,
    wx: Scalar,
    wy: Scalar,
    /// d(pixel coordinate)/d(normalized coordinate) along x and y.
    sx: Scalar,
    sy: Scalar,
}

fn taps(u: Scalar, v: Scalar, h: usize, w: usize) -> Taps {
    let sx = (w as Scalar - 1.0) * 0.5;
    let sy = (h as Scalar - 1.0) * 0.5;
    let px = (u + 1.0) * sx;
    let py = (v + 1.0) * sy;
    let fx = px.floor();
    let fy = py.floor();
    Taps {
        x0: fx as isize,
        y0: fy as isize,
        wx: px - fx,
        wy: py - fy,
        sx,
        sy,
    }
}

#[inline]
fn pixel(values: &[Scalar], h: usize, w: usize, c: usize, y: isize, x: isize) -> Option<&[Scalar]> {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        return None;
    }
    Some(&values[(y as usize * w + x as usize) * c..][..c])
}

fn dims(values: &Tensor, pts: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let vs = values.shape();
    let ps = pts.shape();
    if vs.len() != 4 {
        return dim_err("grid_sample", format!("values must be [B, H, W, C], got {vs:?}"));
    }
    if ps.len() < 2 || *ps.last().unwrap() != 2 {
        return dim_err("grid_sample", format!("last axis of points must have size 2, got {ps:?}"));
    }
    if ps[0] != vs[0] {
        return dim_err("grid_sample", format!("axis 0 (batch) differs: values {} vs points {}", vs[0], ps[0]));
    }
    let npts = pts.numel() / (2 * vs[0]);
    Ok((vs[0], vs[1], vs[2], vs[3], npts))
}

pub(crate) fn forward(values: &Tensor, pts: &Tensor) -> Result<Tensor> {
    let (b, h, w, c, npts) = dims(values, pts)?;
    let mut out = vec![0.0; b * npts * c];
    for bi in 0..b {
        let map = &values.data()[bi * h * w * c..][..h * w * c];
        for p in 0..npts {
            let q = &pts.data()[(bi * npts + p) * 2..][..2];
            let t = taps(q[0], q[1], h, w);
            let dst = &mut out[(bi * npts + p) * c..][..c];
            for (dy, wy) in [(0, 1.0 - t.wy), (1, t.wy)] {
                for (dx, wx) in [(0, 1.0 - t.wx), (1, t.wx)] {
                    if let Some(src) = pixel(map, h, w, c, t.y0 + dy, t.x0 + dx) {
                        let wgt = wy * wx;
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wgt * s;
                        }
                    }
                }
            }
        }
    }
    let mut shape = pts.shape()[..pts.rank() - 1].to_vec();
    shape.push(c);
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn backward(values: &Tensor, pts: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (b, h, w, c, npts) = dims(values, pts).expect("validated in forward");
    let mut gv = vec![0.0; values.numel()];
    let mut gp = vec![0.0; pts.numel()];
    for bi in 0..b {
        let base = bi * h * w * c;
        let map = &values.data()[base..][..h * w * c];
        for p in 0..npts {
            let q = &pts.data()[(bi * npts + p) * 2..][..2];
            let t = taps(q[0], q[1], h, w);
            let go = &g.data()[(bi * npts + p) * c..][..c];
            let (mut dwx, mut dwy) = (0.0, 0.0);
            for (dy, wy, sy) in [(0, 1.0 - t.wy, -1.0), (1, t.wy, 1.0)] {
                for (dx, wx, sx) in [(0, 1.0 - t.wx, -1.0), (1, t.wx, 1.0)] {
                    let (y, x) = (t.y0 + dy, t.x0 + dx);
                    let Some(src) = pixel(map, h, w, c, y, x) else { continue };
                    let dot: Scalar = src.iter().zip(go).map(|(a, b)| a * b).sum();
                    dwx += sx * wy * dot;
                    dwy += sy * wx * dot;
                    let off = base + (y as usize * w + x as usize) * c;
                    let wgt = wy * wx;
                    for (d, gg) in gv[off..][..c].iter_mut().zip(go) {
                        *d += wgt * gg;
                    }
                }
            }
            gp[(bi * npts + p) * 2] = dwx * t.sx;
            gp[(bi * npts + p) * 2 + 1] = dwy * t.sy;
        }
    }
    (
        Tensor::from_parts(values.shape().to_vec(), gv),
        Tensor::from_parts(pts.shape().to_vec(), gp),
    )
}

impl<'t> Var<'t> {
    /// Batched sampling: `self` is a channel-last map `[B, H, W, C]`, `pts` is
    /// `[B, ..., 2]`; the result is `[B, ..., C]`.
    pub fn grid_sample(self, pts: Var<'t>) -> Result<Var<'t>> {
        let out = forward(&self.value(), &pts.value())?;
        Ok(Var::record_grid_sample(self, pts, out))
    }
}

/// Samples a channel-first feature map `[C, H, W]` at `pts: [..., 2]`,
/// returning `[..., C]`. Differentiable with respect to both arguments.
pub fn grid_sample_bilinear<'t>(features: Var<'t>, pts: Var<'t>) -> Result<Var<'t>> {
    let fs = features.shape();
    if fs.len() != 3 {
        return dim_err("grid_sample", format!("features must be [C, H, W], got {fs:?}"));
    }
    let ps = pts.shape();
    if *ps.last().unwrap() != 2 {
        return dim_err("grid_sample", format!("last axis of points must have size 2, got {ps:?}"));
    }
    let npts = pts.value().numel() / 2;
    let map = features.permute(&[1, 2, 0])?.reshape(&[1, fs[1], fs[2], fs[0]])?;
    let out = map.grid_sample(pts.reshape(&[1, npts, 2])?)?;
    let mut shape = ps[..ps.len() - 1].to_vec();
    shape.push(fs[0]);
    out.reshape(&shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn feature_map() -> Tensor {
        // C=2, H=3, W=4
        Tensor::from_fn(&[2, 3, 4], |i| (i as Scalar) * 0.5 + 1.0)
    }

    fn to_norm(px: Scalar, size: usize) -> Scalar {
        2.0 * px / (size as Scalar - 1.0) - 1.0
    }

    #[test]
    fn pixel_center_returns_pixel() {
        let f = feature_map();
        let tape = Tape::new();
        let pts = Tensor::new(&[1, 2], vec![to_norm(2.0, 4), to_norm(1.0, 3)]).unwrap();
        let out = grid_sample_bilinear(tape.constant(f.clone()), tape.constant(pts)).unwrap();
        let out = out.value();
        assert_eq!(out.shape(), &[1, 2]);
        for c in 0..2 {
            assert!((out.at(&[0, c]) - f.at(&[c, 1, 2])).abs() < 1e-12);
        }
    }

    #[test]
    fn horizontal_midpoint_averages() {
        let f = feature_map();
        let tape = Tape::new();
        let pts = Tensor::new(&[2], vec![to_norm(0.5, 4), to_norm(2.0, 3)]).unwrap();
        let out = grid_sample_bilinear(tape.constant(f.clone()), tape.constant(pts)).unwrap();
        let out = out.value();
        assert_eq!(out.shape(), &[2]);
        for c in 0..2 {
            let avg = 0.5 * (f.at(&[c, 2, 0]) + f.at(&[c, 2, 1]));
            assert!((out.data()[c] - avg).abs() < 1e-12);
        }
    }

    #[test]
    fn far_outside_is_zero() {
        let tape = Tape::new();
        let pts = Tensor::new(&[3, 2], vec![5.0, 0.0, -3.0, -3.0, 0.0, 7.5]).unwrap();
        let out = grid_sample_bilinear(tape.constant(feature_map()), tape.constant(pts)).unwrap();
        assert!(out.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bottom_right_corner_is_exact() {
        let f = feature_map();
        let tape = Tape::new();
        let pts = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        let out = grid_sample_bilinear(tape.constant(f.clone()), tape.constant(pts)).unwrap();
        assert_eq!(out.value().data(), &[f.at(&[0, 2, 3]), f.at(&[1, 2, 3])]);
    }
}

//! 2D convolution (im2col + gemm) and nearest-neighbour upsampling.

use super::gemm::{gemm, MatRef};
use super::tape::Var;
use super::{Scalar, Tensor};
use crate::error::{dim_err, Result};

#[derive(Clone, Copy)]
struct Geom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return dim_err("conv2d", format!("expected input [B,C,H,W] and weight [O,C,k,k], got {x:?} and {w:?}"));
        }
        if x[1] != w[1] {
            return dim_err("conv2d", format!("axis 1 of input ({}) != axis 1 of weight ({})", x[1], w[1]));
        }
        if w[2] != w[3] {
            return dim_err("conv2d", format!("only square kernels are supported, got {}x{}", w[2], w[3]));
        }
        if stride == 0 || x[2] + 2 * pad < w[2] || x[3] + 2 * pad < w[3] {
            return dim_err("conv2d", format!("kernel {} with padding {pad} does not fit input {:?}", w[2], &x[2..]));
        }
        let k = w[2];
        Ok(Self {
            batch: x[0],
            cin: x[1],
            h: x[2],
            w: x[3],
            cout: w[0],
            k,
            stride,
            pad,
            ho: (x[2] + 2 * pad - k) / stride + 1,
            wo: (x[3] + 2 * pad - k) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn spatial(&self) -> usize {
        self.ho * self.wo
    }

    /// Calls `f(col_index, input_index)` for every in-bounds tap of one image.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let n = self.spatial();
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(row * n + oy * self.wo + ox, (c * self.h + iy as usize) * self.w + ix as usize);
                        }
                    }
                }
            }
        }
    }
}

fn im2col(img: &[Scalar], g: &Geom, cols: &mut [Scalar]) {
    cols.fill(0.0);
    g.for_each_tap(|ci, ii| cols[ci] = img[ii]);
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let g = Geom::new(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = b {
        if b.shape() != [g.cout] {
            return dim_err("conv2d", format!("bias shape {:?} != [{}]", b.shape(), g.cout));
        }
    }
    let (patch, n) = (g.patch(), g.spatial());
    let mut cols = vec![0.0; patch * n];
    let mut out = vec![0.0; g.batch * g.cout * n];
    let img_len = g.cin * g.h * g.w;
    for bi in 0..g.batch {
        im2col(&x.data()[bi * img_len..][..img_len], &g, &mut cols);
        let dst = &mut out[bi * g.cout * n..][..g.cout * n];
        if let Some(b) = b {
            for (o, chunk) in dst.chunks_mut(n).enumerate() {
                chunk.fill(b.data()[o]);
            }
        }
        gemm(
            MatRef::row_major(w.data(), g.cout, patch),
            MatRef::row_major(&cols, patch, n),
            dst,
            if b.is_some() { 1.0 } else { 0.0 },
        );
    }
    Ok(Tensor::from_parts(vec![g.batch, g.cout, g.ho, g.wo], out))
}

pub(crate) fn conv2d_backward(x: &Tensor, w: &Tensor, grad: &Tensor, stride: usize, pad: usize) -> (Tensor, Tensor, Tensor) {
    let g = Geom::new(x.shape(), w.shape(), stride, pad).expect("validated in forward");
    let (patch, n) = (g.patch(), g.spatial());
    let img_len = g.cin * g.h * g.w;
    let mut cols = vec![0.0; patch * n];
    let mut gcols = vec![0.0; patch * n];
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    let mut gb = vec![0.0; g.cout];
    for bi in 0..g.batch {
        let go = &grad.data()[bi * g.cout * n..][..g.cout * n];
        for (o, chunk) in go.chunks(n).enumerate() {
            gb[o] += chunk.iter().sum::<Scalar>();
        }
        im2col(&x.data()[bi * img_len..][..img_len], &g, &mut cols);
        let gom = MatRef::row_major(go, g.cout, n);
        gemm(gom, MatRef::row_major(&cols, patch, n).t(), &mut gw, 1.0);
        gemm(MatRef::row_major(w.data(), g.cout, patch).t(), gom, &mut gcols, 0.0);
        let gimg = &mut gx[bi * img_len..][..img_len];
        g.for_each_tap(|ci, ii| gimg[ii] += gcols[ci]);
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(w.shape().to_vec(), gw),
        Tensor::from_parts(vec![g.cout], gb),
    )
}

pub(crate) fn upsample2x_backward(grad: &Tensor) -> Tensor {
    let s = grad.shape();
    let (planes, h2, w2) = (s[0] * s[1], s[2], s[3]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..h2 {
            for x in 0..w2 {
                out[(p * h + y / 2) * w + x / 2] += grad.data()[(p * h2 + y) * w2 + x];
            }
        }
    }
    Tensor::from_parts(vec![s[0], s[1], h, w], out)
}

impl<'t> Var<'t> {
    /// `[B, Cin, H, W]` convolved with `[Cout, Cin, k, k]`.
    pub fn conv2d(self, w: Var<'t>, b: Option<Var<'t>>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let bv = b.map(|b| b.value());
        let out = conv2d_forward(&self.value(), &w.value(), bv.as_deref(), stride, pad)?;
        Ok(Var::record_conv2d(self, w, b, stride, pad, out))
    }

    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub fn upsample2x(self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 {
            return dim_err("upsample2x", format!("expected [B,C,H,W], got {s:?}"));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = Vec::with_capacity(planes * 4 * h * w);
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out.push(x.data()[(p * h + y / 2) * w + xx / 2]);
                }
            }
        }
        let out = Tensor::from_parts(vec![s[0], s[1], 2 * h, 2 * w], out);
        Ok(Var::record_upsample(self, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (bn, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[bn, cout, ho, wo]);
        for n in 0..bn {
            for o in 0..cout {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut acc = b.at(&[o]);
                        for c in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.at(&[n, c, iy as usize, ix as usize]) * w.at(&[o, c, ky, kx]);
                                    }
                                }
                            }
                        }
                        out.set(&[n, o, y, xx], acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (stride, pad, h) in [(1, 1, 5), (2, 1, 6), (2, 1, 7), (1, 0, 4)] {
            let x = Tensor::randn(&[2, 3, h, h + 1], 1.0, &mut rng);
            let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng);
            let b = Tensor::randn(&[4], 1.0, &mut rng);
            let tape = Tape::new();
            let y = tape
                .constant(x.clone())
                .conv2d(tape.constant(w.clone()), Some(tape.constant(b.clone())), stride, pad)
                .unwrap();
            let expect = naive_conv(&x, &w, &b, stride, pad);
            assert_eq!(y.shape(), expect.shape());
            assert!(y.value().max_abs_diff(&expect) < 1e-12);
        }
    }

    #[test]
    fn upsample_repeats_pixels() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 1, 2, 2], |i| i as Scalar));
        let y = x.upsample2x().unwrap();
        assert_eq!(y.value().at(&[0, 0, 3, 1]), 2.0);
        let g = tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(g.wrt(x).data(), &[4.0; 4]);
    }
}

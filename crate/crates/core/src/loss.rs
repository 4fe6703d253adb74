//! Photometric training loss and image-quality metrics.
//!
//! Images are channel-first `[C, H, W]` with values in `[0, 1]`.

use crate::error::{contract, dim_err, Result};
use crate::tensor::{Scalar, Tensor, Var};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Differentiable image distance added to the MSE term, e.g. a learned perceptual metric.
pub trait PerceptualLoss {
    fn distance<'t>(&self, pred: Var<'t>, gt: &Tensor) -> Result<Var<'t>>;
}

pub struct LossConfig {
    pub lambda: f64,
    pub perceptual: Option<Box<dyn PerceptualLoss>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            perceptual: None,
        }
    }
}

impl LossConfig {
    pub fn with_hook(hook: Box<dyn PerceptualLoss>, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) {
            return contract(format!("perceptual weight must be >= 0, got {lambda}"));
        }
        Ok(Self {
            lambda,
            perceptual: Some(hook),
        })
    }
}

/// Mean squared error as a hook, handy for testing the weighting.
pub struct MseHook;

impl PerceptualLoss for MseHook {
    fn distance<'t>(&self, pred: Var<'t>, gt: &Tensor) -> Result<Var<'t>> {
        mse_loss(pred, gt)
    }
}

pub fn mse_loss<'t>(pred: Var<'t>, gt: &Tensor) -> Result<Var<'t>> {
    if pred.shape() != gt.shape() {
        return dim_err("mse_loss", format!("prediction {:?} vs target {:?}", pred.shape(), gt.shape()));
    }
    pred.sub(pred.tape().constant(gt.clone()))?.square()?.mean()
}

pub fn total_loss<'t>(pred: Var<'t>, gt: &Tensor, cfg: &LossConfig) -> Result<Var<'t>> {
    let mse = mse_loss(pred, gt)?;
    match &cfg.perceptual {
        Some(hook) if cfg.lambda != 0.0 => mse.add(hook.distance(pred, gt)?.scale(cfg.lambda as Scalar)?),
        _ => Ok(mse),
    }
}

pub fn mse(pred: &[f64], gt: &[f64]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "mse: length mismatch");
    pred.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn psnr(pred: &[f64], gt: &[f64]) -> f64 {
    psnr_from_mse(mse(pred, gt))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of one `h x w` plane.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..n).map(|i| k[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Mean SSIM over channels and valid window positions. `shape` is `[C, H, W]`.
pub fn ssim(pred: &[f64], gt: &[f64], shape: [usize; 3]) -> Result<f64> {
    let [c, h, w] = shape;
    if pred.len() != c * h * w || gt.len() != c * h * w {
        return dim_err("ssim", format!("buffers do not match shape {shape:?}"));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return contract(format!("ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"));
    }
    let k = gaussian_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let a = &pred[ch * h * w..][..h * w];
        let b = &gt[ch * h * w..][..h * w];
        let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
        let (ma, mb) = (filter(a, h, w, &k), filter(b, h, w, &k));
        let (saa, sbb, sab) = (filter(&aa, h, w, &k), filter(&bb, h, w, &k), filter(&ab, h, w, &k));
        for i in 0..ma.len() {
            let (mx, my) = (ma[i], mb[i]);
            let vx = saa[i] - mx * mx;
            let vy = sbb[i] - my * my;
            let cov = sab[i] - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tape};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mse_examples() {
        let tape = Tape::new();
        let gt = Tensor::from_fn(&[3, 4, 4], |i| (i % 7) as Scalar / 7.0);
        let same = mse_loss(tape.constant(gt.clone()), &gt).unwrap();
        assert_eq!(same.value().item(), 0.0);
        let shifted = mse_loss(tape.constant(gt.map(|v| v + 0.1)), &gt).unwrap();
        assert!((shifted.value().item() - 0.01).abs() < 1e-12);
        assert!(mse_loss(tape.constant(Tensor::zeros(&[3, 4, 5])), &gt).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::uniform(&[3, 5, 6], 0.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[3, 5, 6], 0.0, 1.0, &mut rng);
        let mut acc = 0.0;
        for i in 0..a.numel() {
            let d = a.data()[i] - b.data()[i];
            acc += d * d;
        }
        let got = mse_loss(tape.constant(a), &b).unwrap().value().item();
        assert!((got - acc / 90.0).abs() < 1e-12);
    }

    #[test]
    fn mse_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = Tensor::uniform(&[3, 4, 4], 0.0, 1.0, &mut rng);
        let x = Tensor::uniform(&[3, 4, 4], 0.0, 1.0, &mut rng);
        // The loss is quadratic, so a wide central difference is exact up to rounding.
        let r = grad_check(|_, v| mse_loss(v[0], &gt), &[x], 1e-3, 1e-8).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    struct ConstOne;
    impl PerceptualLoss for ConstOne {
        fn distance<'t>(&self, pred: Var<'t>, _gt: &Tensor) -> Result<Var<'t>> {
            Ok(pred.tape().constant(Tensor::scalar(1.0)))
        }
    }

    #[test]
    fn total_loss_weighting() {
        let tape = Tape::new();
        let gt = Tensor::from_fn(&[3, 2, 2], |i| i as Scalar / 12.0);
        let pred = tape.constant(gt.map(|v| v * 0.5));
        let m = mse_loss(pred, &gt).unwrap().value().item();
        let zero = LossConfig::with_hook(Box::new(MseHook), 0.0).unwrap();
        assert_eq!(total_loss(pred, &gt, &zero).unwrap().value().item(), m);
        let twice = LossConfig::with_hook(Box::new(MseHook), 1.0).unwrap();
        assert_eq!(total_loss(pred, &gt, &twice).unwrap().value().item(), 2.0 * m);
        let plus = LossConfig::with_hook(Box::new(ConstOne), 0.5).unwrap();
        assert!((total_loss(pred, &gt, &plus).unwrap().value().item() - (m + 0.5)).abs() < 1e-15);
        assert_eq!(total_loss(pred, &gt, &LossConfig::default()).unwrap().value().item(), m);
        assert!(LossConfig::with_hook(Box::new(MseHook), -1.0).is_err());
    }

    #[test]
    fn psnr_examples() {
        let a = vec![0.3; 12];
        assert_eq!(psnr(&a, &a), 99.0);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert_eq!(psnr_from_mse(1.0), 0.0);
    }

    proptest! {
        #[test]
        fn psnr_monotone(m in 1e-9f64..10.0, f in 1.0001f64..10.0) {
            prop_assert!(psnr_from_mse(m * f) < psnr_from_mse(m));
        }
    }

    #[test]
    fn ssim_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let shape = [3, 16, 16];
        let a: Vec<f64> = (0..768).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..768).map(|_| rng.random_range(0.0..1.0)).collect();
        assert!((ssim(&a, &a, shape).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&a, &b, shape).unwrap() - ssim(&b, &a, shape).unwrap()).abs() < 1e-12);

        let bin: Vec<f64> = (0..768).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let inv: Vec<f64> = bin.iter().map(|v| 1.0 - v).collect();
        assert!(ssim(&bin, &inv, shape).unwrap() < 0.0);

        let (p, q) = (0.2, 0.7);
        let c1 = 0.01f64.powi(2);
        let closed = (2.0 * p * q + c1) / (p * p + q * q + c1);
        let got = ssim(&vec![p; 768], &vec![q; 768], shape).unwrap();
        assert!((got - closed).abs() < 1e-12);

        assert!(ssim(&vec![0.0; 300], &vec![0.0; 300], [3, 10, 10]).is_err());
    }
}

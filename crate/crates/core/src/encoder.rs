//! Per-view UNet feature extractor plus cross-view attention.

use rand::Rng;

use crate::error::{contract, dim_err, Result};
use crate::nn::{Bound, Conv2d, Linear, ParamStore};
use crate::tensor::{Scalar, Var};

/// Token count at or below which attention runs over the whole map.
pub const FULL_MAP_TOKENS: usize = 64;

#[derive(Clone, Copy, Debug)]
pub struct Encoder {
    pub down1: Conv2d,
    pub down2: Conv2d,
    pub down3: Conv2d,
    pub up: Conv2d,
    pub cross: CrossViewAttention,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct CrossViewAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub window: usize,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, c: usize, window: usize, rng: &mut R) -> Self {
        Self {
            down1: Conv2d::new(store, "encoder.down1", 3, 32, 3, 2, rng),
            down2: Conv2d::new(store, "encoder.down2", 32, 64, 3, 2, rng),
            down3: Conv2d::new(store, "encoder.down3", 64, c, 3, 2, rng),
            up: Conv2d::new(store, "encoder.up", c + 64, c, 3, 1, rng),
            cross: CrossViewAttention {
                q: Linear::new(store, "encoder.cross.q", c, c, true, rng),
                k: Linear::new(store, "encoder.cross.k", c, c, true, rng),
                v: Linear::new(store, "encoder.cross.v", c, c, true, rng),
                o: Linear::new(store, "encoder.cross.o", c, c, true, rng),
                window,
            },
            channels: c,
        }
    }

    /// `[I, 3, H, W]` images to `[I, C, H/4, W/4]` features, each view independently.
    pub fn unet<'t>(&self, p: &Bound<'t>, images: Var<'t>) -> Result<Var<'t>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 {
            return dim_err("encoder", format!("images must be [I, 3, H, W], got {s:?}"));
        }
        if s[2] % 4 != 0 || s[3] % 4 != 0 || s[2] == 0 || s[3] == 0 {
            return contract(format!("encoder: H and W must be divisible by 4, got {}x{}", s[2], s[3]));
        }
        let (h4, w4) = (s[2] / 4, s[3] / 4);
        let e1 = self.down1.forward(p, images)?.relu()?;
        let e2 = self.down2.forward(p, e1)?.relu()?;
        let e3 = self.down3.forward(p, e2)?.relu()?;
        let up = e3.upsample2x()?.narrow(2, 0, h4)?.narrow(3, 0, w4)?;
        self.up.forward(p, Var::concat(&[up, e2], 1)?)
    }

    /// UNet followed by cross-view attention.
    pub fn extract_features<'t>(&self, p: &Bound<'t>, images: Var<'t>) -> Result<Var<'t>> {
        let f = self.unet(p, images)?;
        self.cross.forward(p, f)
    }
}

/// Window partitions of an `h x w` map: plain tiles, plus a cyclically shifted
/// tiling when the map exceeds [`FULL_MAP_TOKENS`].
pub fn window_partitions(h: usize, w: usize, window: usize) -> Vec<Vec<Vec<usize>>> {
    if h * w <= FULL_MAP_TOKENS || window == 0 || (window >= h && window >= w) {
        return vec![vec![(0..h * w).collect()]];
    }
    let tiles = |shift: usize| -> Vec<Vec<usize>> {
        let (ty, tx) = (h.div_ceil(window), w.div_ceil(window));
        let mut groups = vec![Vec::new(); ty * tx];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = ((y + shift) % h, (x + shift) % w);
                groups[(sy / window) * tx + sx / window].push(y * w + x);
            }
        }
        groups.retain(|g| !g.is_empty());
        groups
    };
    vec![tiles(0), tiles(window / 2)]
}

impl CrossViewAttention {
    /// Each view's tokens attend to the other views' tokens at the same window
    /// positions; the result is added back through the output projection.
    pub fn forward<'t>(&self, p: &Bound<'t>, f: Var<'t>) -> Result<Var<'t>> {
        let s = f.shape();
        let (views, c, h, w) = (s[0], s[1], s[2], s[3]);
        if views == 1 {
            return Ok(f);
        }
        let hw = h * w;
        let mut x = f.permute(&[0, 2, 3, 1])?.reshape(&[views * hw, c])?;
        let inv_sqrt = 1.0 / (c as Scalar).sqrt();
        for partition in window_partitions(h, w, self.window) {
            let q = self.q.forward(p, x)?;
            let k = self.k.forward(p, x)?;
            let v = self.v.forward(p, x)?;
            let mut outs = Vec::with_capacity(partition.len());
            let mut order = Vec::with_capacity(views * hw);
            for win in &partition {
                let m = win.len();
                let q_idx: Vec<usize> = (0..views).flat_map(|i| win.iter().map(move |&pos| i * hw + pos)).collect();
                let kv_idx: Vec<usize> = (0..views)
                    .flat_map(|i| (0..views).filter(move |&j| j != i))
                    .flat_map(|j| win.iter().map(move |&pos| j * hw + pos))
                    .collect();
                let qw = q.index_select(&q_idx)?.reshape(&[views, m, c])?;
                let kw = k.index_select(&kv_idx)?.reshape(&[views, (views - 1) * m, c])?;
                let vw = v.index_select(&kv_idx)?.reshape(&[views, (views - 1) * m, c])?;
                let att = qw.matmul(kw.transpose()?)?.scale(inv_sqrt)?.softmax(2)?;
                outs.push(att.matmul(vw)?.reshape(&[views * m, c])?);
                order.extend(q_idx);
            }
            let mut inverse = vec![0; views * hw];
            for (row, &tok) in order.iter().enumerate() {
                inverse[tok] = row;
            }
            let mixed = Var::concat(&outs, 0)?.index_select(&inverse)?;
            x = x.add(self.o.forward(p, mixed)?)?;
        }
        x.reshape(&[views, h, w, c])?.permute(&[0, 3, 1, 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partitions_cover_each_position_once() {
        for (h, w) in [(8, 8), (16, 16), (12, 20)] {
            for part in window_partitions(h, w, 8) {
                let mut seen = vec![0; h * w];
                for win in &part {
                    for &p in win {
                        seen[p] += 1;
                    }
                }
                assert!(seen.iter().all(|&s| s == 1));
            }
        }
        assert_eq!(window_partitions(8, 8, 8).len(), 1);
        let p = window_partitions(16, 16, 8);
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].len(), 4);
    }
}

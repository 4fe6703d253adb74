//! Self-attention over Gaussian queries with a farthest-point-sampled key set.

use rand::Rng;

use crate::error::{contract, Result};
use crate::nn::{Bound, LayerNorm, Linear, ParamStore};
use crate::tensor::{Scalar, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FpsSelection {
    /// Selected indices in selection order.
    pub indices: Vec<usize>,
    pub n: usize,
}

impl FpsSelection {
    pub fn rate(&self) -> f64 {
        self.indices.len() as f64 / self.n as f64
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Greedy farthest-point sampling: starting from `start`, repeatedly adds the
/// point with the largest distance to the selected set, lowest index on ties.
pub fn fps(centers: &[[f64; 3]], k: usize, start: usize) -> Result<FpsSelection> {
    let n = centers.len();
    if k == 0 || k > n {
        return contract(format!("fps: need 1 <= K <= N, got K={k}, N={n}"));
    }
    if start >= n {
        return contract(format!("fps: start index {start} out of range for N={n}"));
    }
    let mut indices = Vec::with_capacity(k);
    let mut best = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut cur = start;
    for _ in 0..k {
        indices.push(cur);
        taken[cur] = true;
        let mut next = usize::MAX;
        let mut far = f64::NEG_INFINITY;
        for (i, c) in centers.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = dist2(c, &centers[cur]);
            if d < best[i] {
                best[i] = d;
            }
            if best[i] > far {
                far = best[i];
                next = i;
            }
        }
        cur = next;
    }
    Ok(FpsSelection { indices, n })
}

pub fn num_keys(n: usize, rate: f64) -> Result<usize> {
    if !(rate > 0.0 && rate <= 1.0) {
        return contract(format!("sesa rate must be in (0, 1], got {rate}"));
    }
    Ok(((rate * n as f64).round() as usize).clamp(1, n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SesaStats {
    pub n_queries: usize,
    pub n_keys: usize,
    /// Bytes held by the key and value buffers.
    pub kv_bytes: usize,
}

pub struct SesaOutput<'t> {
    pub out: Var<'t>,
    /// `[N, K]` attention weights.
    pub attention: Var<'t>,
    pub selection: FpsSelection,
    pub stats: SesaStats,
}

#[derive(Clone, Copy, Debug)]
pub struct Sesa {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub norm: LayerNorm,
}

impl Sesa {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, c: usize, rng: &mut R) -> Self {
        Self {
            wq: Linear::new(store, &format!("{name}.q"), c, c, true, rng),
            wk: Linear::new(store, &format!("{name}.k"), c, c, true, rng),
            wv: Linear::new(store, &format!("{name}.v"), c, c, true, rng),
            wo: Linear::new(store, &format!("{name}.o"), c, c, true, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), c),
        }
    }

    /// `LN(Q + Wo·softmax(q kᵀ/√C) v)` where keys and values come from the
    /// FPS subset of queries. Selection is recomputed from `centers` each call.
    pub fn forward<'t>(&self, p: &Bound<'t>, q: Var<'t>, centers: &[[f64; 3]], rate: f64) -> Result<SesaOutput<'t>> {
        let shape = q.shape();
        if shape.len() != 2 || shape[0] != centers.len() {
            return crate::error::dim_err("sesa", format!("queries {shape:?} vs {} centers", centers.len()));
        }
        let (n, c) = (shape[0], shape[1]);
        let k = num_keys(n, rate)?;
        let selection = fps(centers, k, 0)?;
        let sub = q.index_select(&selection.indices)?;
        let qq = self.wq.forward(p, q)?;
        let kk = self.wk.forward(p, sub)?;
        let vv = self.wv.forward(p, sub)?;
        let scores = qq.matmul(kk.transpose()?)?.scale(1.0 / (c as Scalar).sqrt())?;
        let attention = scores.softmax(1)?;
        let mixed = self.wo.forward(p, attention.matmul(vv)?)?;
        let out = self.norm.forward(p, q.add(mixed)?)?;
        let stats = SesaStats {
            n_queries: n,
            n_keys: k,
            kv_bytes: 2 * k * c * std::mem::size_of::<Scalar>(),
        };
        Ok(SesaOutput {
            out,
            attention,
            selection,
            stats,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_corners() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]];
        assert_eq!(fps(&pts, 2, 0).unwrap().indices, vec![0, 3]);
        // Remaining corners tie at distance 1 from the selected pair: lowest index wins.
        assert_eq!(fps(&pts, 4, 0).unwrap().indices, vec![0, 3, 1, 2]);
        assert_eq!(fps(&pts, 1, 2).unwrap().indices, vec![2]);
        assert!(fps(&pts, 5, 0).is_err());
        assert!(fps(&pts, 0, 0).is_err());
    }

    #[test]
    fn key_counts() {
        assert_eq!(num_keys(19600, 0.01).unwrap(), 196);
        assert_eq!(num_keys(10, 0.01).unwrap(), 1);
        assert_eq!(num_keys(10, 1.0).unwrap(), 10);
        assert!(num_keys(10, 0.0).is_err());
        assert!(num_keys(10, 1.5).is_err());
    }
}

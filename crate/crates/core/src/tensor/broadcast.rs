//! Numpy-style broadcasting for binary elementwise ops.

use super::{strides, Scalar, Tensor};
use crate::error::{dim_err, Result};

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return dim_err(
                    op,
                    format!("axis {i} (from the right: {}): {da} vs {db} for shapes {a:?} and {b:?}", rank - i),
                )
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast `out` shape; broadcast axes get stride 0.
fn view_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of the broadcast shape.
fn for_each_pair(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let numel: usize = out.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..numel {
        f(o, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(Scalar, Scalar) -> Scalar,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out = broadcast_shape(op, a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    // b repeats along the leading axes of a (bias-style broadcast).
    if out == a.shape() && a.shape().ends_with(b.shape()) {
        let n = bd.len();
        let data = ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % n])).collect();
        return Ok(Tensor::from_parts(out, data));
    }
    let sa = view_strides(a.shape(), &out);
    let sb = view_strides(b.shape(), &out);
    let mut data = vec![0.0; out.iter().product()];
    for_each_pair(&out, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    Ok(Tensor::from_parts(out, data))
}

/// Sums `grad` (shaped like the broadcast output) back down to `shape`.
pub(crate) fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let out = grad.shape();
    let numel: usize = shape.iter().product();
    let mut data = vec![0.0; numel];
    let g = grad.data();
    if out.ends_with(shape) {
        for (i, &v) in g.iter().enumerate() {
            data[i % numel] += v;
        }
    } else {
        let s = view_strides(shape, out);
        let zeros = vec![0; out.len()];
        for_each_pair(out, &s, &zeros, |o, i, _| data[i] += g[o]);
    }
    Tensor::from_parts(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape("t", &[4, 1, 3], &[5, 1]).unwrap(), vec![4, 5, 3]);
        assert_eq!(broadcast_shape("t", &[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert!(broadcast_shape("t", &[2, 3], &[4]).is_err());
    }

    #[test]
    fn general_broadcast_matches_loops() {
        let a = Tensor::from_fn(&[2, 1, 3], |i| i as Scalar);
        let b = Tensor::from_fn(&[4, 1], |i| 10.0 * i as Scalar);
        let c = binary("add", &a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.shape(), &[2, 4, 3]);
        for i in 0..2 {
            for j in 0..4 {
                for k in 0..3 {
                    assert_eq!(c.at(&[i, j, k]), a.at(&[i, 0, k]) + b.at(&[j, 0]));
                }
            }
        }
        let r = reduce_to(&c, &[4, 1]);
        for j in 0..4 {
            let expect: Scalar = (0..2)
                .flat_map(|i| (0..3).map(move |k| (i, k)))
                .map(|(i, k)| c.at(&[i, j, k]))
                .sum();
            assert_eq!(r.at(&[j, 0]), expect);
        }
    }
}

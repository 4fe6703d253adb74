//! Multi-view deformable cross-attention: one shared query set is modulated per
//! camera, samples that view's features around the projected Gaussian center,
//! and the per-view results are fused back into a single query set.

use rand::Rng;

use crate::camera::{camera_embedding_input, project_points_var, Camera};
use crate::error::{dim_err, Result};
use crate::nn::{Bound, Linear, Mlp, ParamKind, ParamStore};
use crate::tensor::{CustomOp, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct Mvdfa {
    pub camera_mlp: Mlp,
    pub modulation: Linear,
    pub offsets: Linear,
    pub scores: Linear,
    pub value: Linear,
    pub fusion: Linear,
    pub n_samples: usize,
    pub heads: usize,
}

/// Intermediate tensors of one forward pass.
pub struct MvdfaTrace<'t> {
    /// `[I, N, C]` camera-modulated queries.
    pub view_queries: Var<'t>,
    /// `[I, N, 2]` projected centers.
    pub reference: Var<'t>,
    pub valid: Vec<Vec<bool>>,
    /// `[I, N, heads, Ns, 2]`.
    pub offsets: Var<'t>,
    /// `[I, N, heads, Ns, 2]`, equal to `reference + offsets`.
    pub sample_points: Var<'t>,
    /// `[I, N, heads, Ns]`, softmax over the last axis.
    pub attention: Var<'t>,
    /// `[I, N, C]` updated view queries before fusion.
    pub updated: Var<'t>,
    /// `[I, N, C]` sigmoid fusion weights.
    pub fusion_weights: Var<'t>,
}

/// Initial sampling pattern: a ring of radius `delta` around the reference point.
pub fn offset_pattern(n_samples: usize, delta: f64) -> Vec<[f64; 2]> {
    if n_samples == 1 {
        return vec![[0.0, 0.0]];
    }
    (0..n_samples)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / n_samples as f64;
            [delta * a.cos(), delta * a.sin()]
        })
        .collect()
}

struct ViewSum;

impl CustomOp for ViewSum {
    fn name(&self) -> &'static str {
        "view_sum"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let views = inputs[0].shape()[0];
        let data: Vec<Scalar> = (0..views).flat_map(|_| g.data().iter().copied()).collect();
        Ok(vec![Some(Tensor::new(inputs[0].shape(), data)?)])
    }
}

/// Sum over the leading axis, adding each element's terms in ascending order
/// so the result does not depend on the order of the views.
pub fn view_sum<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    if s.is_empty() || s[0] == 0 {
        return crate::error::contract("view_sum needs a non-empty leading axis");
    }
    let v = x.value();
    let stride = v.numel() / s[0];
    let mut terms = vec![0.0 as Scalar; s[0]];
    let out: Vec<Scalar> = (0..stride)
        .map(|j| {
            for (i, t) in terms.iter_mut().enumerate() {
                *t = v.data()[i * stride + j];
            }
            terms.sort_by(|a, b| a.total_cmp(b));
            terms.iter().sum()
        })
        .collect();
    let out = Tensor::new(&s[1..], out)?;
    Ok(x.tape().custom(&[x], out, Box::new(ViewSum)))
}

impl Mvdfa {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c: usize,
        n_samples: usize,
        heads: usize,
        offset_init: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || c % heads != 0 || n_samples == 0 {
            return crate::error::contract(format!(
                "mvdfa: need heads dividing C and Ns >= 1, got C={c}, heads={heads}, Ns={n_samples}"
            ));
        }
        let camera_mlp = Mlp {
            fc1: Linear::new(store, &format!("{name}.cam.0"), 16, c, true, rng),
            fc2: Linear::new(store, &format!("{name}.cam.1"), c, c, true, rng),
        };
        let modulation = Linear::zeros(store, &format!("{name}.modulation"), c, 2 * c, true);
        let w = store.add(format!("{name}.offsets.weight"), ParamKind::Weight, Tensor::zeros(&[c, heads * n_samples * 2]));
        let pattern = offset_pattern(n_samples, offset_init);
        let bias: Vec<Scalar> = (0..heads).flat_map(|_| pattern.iter().flatten().map(|&v| v as Scalar)).collect();
        let b = store.add(format!("{name}.offsets.bias"), ParamKind::Bias, Tensor::new(&[heads * n_samples * 2], bias)?);
        Ok(Self {
            camera_mlp,
            modulation,
            offsets: Linear { w, b: Some(b) },
            scores: Linear::new(store, &format!("{name}.scores"), c, heads * n_samples, true, rng),
            value: Linear::new(store, &format!("{name}.value"), c, c, false, rng),
            fusion: Linear::new(store, &format!("{name}.fusion"), c, c, true, rng),
            n_samples,
            heads,
        })
    }

    /// `[I, C]` embedding of each camera.
    pub fn camera_embedding<'t>(&self, p: &Bound<'t>, cams: &[Camera]) -> Result<Var<'t>> {
        let raw: Vec<Scalar> = cams.iter().flat_map(camera_embedding_input).map(|v| v as Scalar).collect();
        let x = p.get(self.modulation.w).tape().constant(Tensor::new(&[cams.len(), 16], raw)?);
        self.camera_mlp.forward(p, x)
    }

    /// `LN(Q)·(1 + scale_i) + shift_i` with `(shift, scale)` from the camera embedding.
    pub fn modulate_queries<'t>(&self, p: &Bound<'t>, q: Var<'t>, cam_embed: Var<'t>) -> Result<Var<'t>> {
        let (n, c) = (q.shape()[0], q.shape()[1]);
        let views = cam_embed.shape()[0];
        let m = self.modulation.forward(p, cam_embed.relu()?)?;
        let shift = m.narrow(1, 0, c)?.reshape(&[views, 1, c])?;
        let scale = m.narrow(1, c, c)?.reshape(&[views, 1, c])?;
        let ln = q.layer_norm(None, None, crate::nn::LN_EPS)?.reshape(&[1, n, c])?;
        ln.mul(scale.add_scalar(1.0)?)?.add(shift)
    }

    /// `Σ_i sigmoid(Linear(q'_i)) ⊙ q'_i` over the view axis.
    pub fn fuse_views<'t>(&self, p: &Bound<'t>, updated: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let w = self.fusion.forward(p, updated)?.sigmoid()?;
        Ok((view_sum(w.mul(updated)?)?, w))
    }

    /// `features`: channel-last `[I, H', W', C]`; `q`: `[N, C]`; `centers`: `[N, 3]`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        features: Var<'t>,
        cams: &[Camera],
        q: Var<'t>,
        centers: Var<'t>,
    ) -> Result<(Var<'t>, MvdfaTrace<'t>)> {
        let fs = features.shape();
        let qs = q.shape();
        if fs.len() != 4 || fs[0] != cams.len() {
            return dim_err("mvdfa", format!("features {fs:?} do not match {} cameras", cams.len()));
        }
        if qs.len() != 2 || qs[1] != fs[3] || centers.shape() != [qs[0], 3] {
            return dim_err("mvdfa", format!("queries {qs:?}, centers {:?}, features {fs:?}", centers.shape()));
        }
        let (views, fh, fw, c) = (fs[0], fs[1], fs[2], fs[3]);
        let (n, heads, ns) = (qs[0], self.heads, self.n_samples);
        let ch = c / heads;

        let embed = self.camera_embedding(p, cams)?;
        let view_queries = self.modulate_queries(p, q, embed)?;
        let (reference, valid) = project_points_var(centers, cams)?;
        let offsets = self.offsets.forward(p, view_queries)?.reshape(&[views, n, heads, ns, 2])?;
        let sample_points = reference.reshape(&[views, n, 1, 1, 2])?.add(offsets)?;
        let attention = self
            .scores
            .forward(p, view_queries)?
            .reshape(&[views, n, heads, ns])?
            .softmax(3)?;

        let values = self.value.forward(p, features)?;
        let updated = if heads == 1 {
            let v = values.grid_sample(sample_points.reshape(&[views, n * ns, 2])?)?;
            let v = v.reshape(&[views * n, ns, c])?;
            attention.reshape(&[views * n, 1, ns])?.matmul(v)?.reshape(&[views, n, c])?
        } else {
            let v = values
                .reshape(&[views, fh, fw, heads, ch])?
                .permute(&[0, 3, 1, 2, 4])?
                .reshape(&[views * heads, fh, fw, ch])?;
            let pts = sample_points
                .permute(&[0, 2, 1, 3, 4])?
                .reshape(&[views * heads, n * ns, 2])?;
            let sampled = v.grid_sample(pts)?.reshape(&[views * heads * n, ns, ch])?;
            let a = attention.permute(&[0, 2, 1, 3])?.reshape(&[views * heads * n, 1, ns])?;
            a.matmul(sampled)?
                .reshape(&[views, heads, n, ch])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[views, n, c])?
        };
        let (fused, fusion_weights) = self.fuse_views(p, updated)?;
        Ok((
            fused,
            MvdfaTrace {
                view_queries,
                reference,
                valid,
                offsets,
                sample_points,
                attention,
                updated,
                fusion_weights,
            },
        ))
    }
}

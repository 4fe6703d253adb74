//! The feed-forward reconstruction model: encoder, Gaussian/query
//! initialization, and the stack of query-refinement layers.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{in_cone_of_vision, Camera};
use crate::encoder::Encoder;
use crate::error::{contract, dim_err, Result};
use crate::gaussian::{GaussianSet, GaussianVars, RawGaussian, RawGaussianVars, RAW_PARAM_WIDTH, SH_COEFFS};
use crate::mvdfa::Mvdfa;
use crate::nn::{Bound, LayerNorm, Linear, Mlp, ParamId, ParamKind, ParamStore};
use crate::sesa::{fps, Sesa};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Log-scale given to randomly initialized Gaussians.
pub const RANDOM_INIT_SCALE: f64 = 0.05;
const COARSE_CHANNELS: usize = 4 + RAW_PARAM_WIDTH - 3;
const FEATURE_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    RandomInCov,
    CoarsePerPixel,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub n_gaussians: usize,
    pub hidden: usize,
    pub layers: usize,
    pub n_samples: usize,
    pub sesa_rate: f64,
    pub ffn_width: usize,
    pub heads: usize,
    /// Cross-view attention window, in feature pixels.
    pub window: usize,
    pub init: InitStrategy,
    /// Typical camera-to-object distance; scales predicted depths.
    pub depth_prior: f64,
    pub init_scale: f64,
    /// Box that random initialization samples from, in reference-camera coordinates.
    pub cov_center: [f64; 3],
    pub cov_half_extent: f64,
    pub query_std: f64,
    pub offset_init: f64,
    pub use_mvdfa: bool,
    pub use_sesa: bool,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_gaussians: 512,
            hidden: 64,
            layers: 2,
            n_samples: 4,
            sesa_rate: 0.05,
            ffn_width: 128,
            heads: 1,
            window: 8,
            init: InitStrategy::CoarsePerPixel,
            depth_prior: 2.5,
            init_scale: 0.08,
            cov_center: [0.0, 0.0, 2.5],
            cov_half_extent: 1.0,
            query_std: 0.02,
            offset_init: 0.05,
            use_mvdfa: true,
            use_sesa: true,
            seed: 0,
        }
    }
}

impl DecoderConfig {
    /// Full-size settings.
    pub fn paper() -> Self {
        Self {
            n_gaussians: 19600,
            hidden: 256,
            layers: 4,
            sesa_rate: 0.01,
            ffn_width: 1024,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [self.n_gaussians, self.hidden, self.layers, self.n_samples, self.ffn_width, self.heads];
        if sizes.contains(&0) {
            return contract(format!("decoder config sizes must be positive: {self:?}"));
        }
        if self.hidden % self.heads != 0 {
            return contract(format!("hidden width {} is not divisible by {} heads", self.hidden, self.heads));
        }
        if !(self.sesa_rate > 0.0 && self.sesa_rate <= 1.0) {
            return contract(format!("sesa_rate must be in (0, 1], got {}", self.sesa_rate));
        }
        if !(self.depth_prior > 0.0 && self.init_scale > 0.0 && self.cov_half_extent > 0.0) {
            return contract("depth_prior, init_scale and cov_half_extent must be positive");
        }
        Ok(())
    }
}

/// Posed input views in reference-camera coordinates.
#[derive(Clone, Debug)]
pub struct ViewBatch {
    /// `[I, 3, H, W]` in `[0, 1]`.
    pub images: Tensor,
    pub cams: Vec<Camera>,
    /// Per view, row-major `H*W` foreground flags.
    pub masks: Option<Vec<Vec<bool>>>,
}

impl ViewBatch {
    pub fn new(images: Tensor, cams: Vec<Camera>, masks: Option<Vec<Vec<bool>>>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[0] != cams.len() {
            return dim_err("views", format!("images {s:?} vs {} cameras", cams.len()));
        }
        for c in &cams {
            if c.width != s[3] || c.height != s[2] {
                return dim_err("views", format!("camera is {}x{}, images are {}x{}", c.width, c.height, s[3], s[2]));
            }
        }
        if let Some(m) = &masks {
            if m.len() != s[0] || m.iter().any(|v| v.len() != s[2] * s[3]) {
                return dim_err("views", "mask count or size does not match the images");
            }
        }
        Ok(Self { images, cams, masks })
    }

    pub fn len(&self) -> usize {
        self.cams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cams.is_empty()
    }

    pub fn height(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[3]
    }

    /// Sub-batch of the given views, in the given order.
    pub fn select(&self, views: &[usize]) -> Result<Self> {
        let per = 3 * self.height() * self.width();
        let mut data = Vec::with_capacity(views.len() * per);
        for &v in views {
            data.extend_from_slice(&self.images.data()[v * per..][..per]);
        }
        Self::new(
            Tensor::new(&[views.len(), 3, self.height(), self.width()], data)?,
            views.iter().map(|&v| self.cams[v].clone()).collect(),
            self.masks.as_ref().map(|m| views.iter().map(|&v| m[v].clone()).collect()),
        )
    }
}

/// Rejection-samples `n` centers uniformly from the box `center ± half` that
/// fall inside at least one camera frustum. Other parameters start neutral.
pub fn init_random_in_cov(cams: &[Camera], n: usize, center: [f64; 3], half: f64, seed: u64) -> Result<Vec<RawGaussian>> {
    if cams.is_empty() {
        return contract("random initialization needs at least one camera");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut trials = 0u64;
    while out.len() < n {
        trials += 1;
        let p: [f64; 3] = std::array::from_fn(|k| center[k] + rng.random_range(-half..half));
        if in_cone_of_vision(p, cams) {
            out.push(RawGaussian {
                center: p,
                opacity_logit: 0.0,
                log_scale: [RANDOM_INIT_SCALE.ln(); 3],
                rotation: [1.0, 0.0, 0.0, 0.0],
                sh: [0.0; SH_COEFFS],
            });
        }
        if trials >= 1_000_000 && (out.len() as f64) < 1e-3 * trials as f64 {
            return contract(format!(
                "random initialization accepted {} of {trials} proposals; cameras do not see the sampling box",
                out.len()
            ));
        }
    }
    Ok(out)
}

/// Camera-space center from a pixel ray `(u1, u2)`, depth and offset.
pub fn camera_space_center(ray: [f64; 2], depth: f64, offset: [f64; 3]) -> [f64; 3] {
    [ray[0] * depth + offset[0], ray[1] * depth + offset[1], depth + offset[2]]
}

/// Downsamples image-resolution masks to the feature grid: a feature pixel is
/// foreground when any image pixel in its block is.
pub fn feature_masks(masks: &[Vec<bool>], h: usize, w: usize) -> Vec<Vec<bool>> {
    let (fh, fw) = (h / FEATURE_STRIDE, w / FEATURE_STRIDE);
    masks
        .iter()
        .map(|m| {
            let mut out = vec![false; fh * fw];
            for y in 0..fh * FEATURE_STRIDE {
                for x in 0..fw * FEATURE_STRIDE {
                    if m[y * w + x] {
                        out[(y / FEATURE_STRIDE) * fw + x / FEATURE_STRIDE] = true;
                    }
                }
            }
            out
        })
        .collect()
}

/// Indices that turn `count` candidates into exactly `n`: FPS over `centers`
/// when there are too many, round-robin copies when there are too few.
pub fn fit_count(centers: &[[f64; 3]], n: usize) -> Result<Vec<usize>> {
    let count = centers.len();
    if count == 0 {
        return contract("no candidate Gaussians");
    }
    if count > n {
        Ok(fps(centers, n, 0)?.indices)
    } else {
        Ok((0..n).map(|i| i % count).collect())
    }
}

#[derive(Clone, Debug, Default)]
pub struct CoarseInitOutput {
    pub depth: Vec<f64>,
    pub offsets: Vec<[f64; 3]>,
    pub camera_centers: Vec<[f64; 3]>,
    pub world_centers: Vec<[f64; 3]>,
    pub foreground: usize,
    /// Candidate index of each of the `N` output Gaussians.
    pub selected: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct CoarseHead {
    pub mlp: Mlp,
    pub query: Linear,
    /// `[N, C]` learned per-slot query offsets.
    pub slots: ParamId,
}

/// Offset direction for the `k`-th repeat of a candidate; the first use sits
/// on the candidate itself.
fn copy_direction(k: usize) -> [f64; 3] {
    if k == 0 {
        return [0.0; 3];
    }
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let y = 1.0 - 2.0 * ((k * 7) % 16) as f64 / 15.0;
    let r = (1.0 - y * y).max(0.0).sqrt();
    let a = golden * k as f64;
    [r * a.cos(), y, r * a.sin()]
}

impl CoarseHead {
    fn new<R: Rng>(store: &mut ParamStore, cfg: &DecoderConfig, rng: &mut R) -> Result<Self> {
        let c = cfg.hidden;
        let fc1 = Linear::new(store, "coarse.0", c, c, true, rng);
        let bound = 0.01 / (c as Scalar).sqrt();
        let w = store.add("coarse.1.weight", ParamKind::Weight, Tensor::uniform(&[c, COARSE_CHANNELS], -bound, bound, rng));
        let mut bias = vec![0.0; COARSE_CHANNELS];
        // depth 0..1, offsets 1..4, opacity 4, log-scale 5..8, rotation 8..12, sh 12..
        for b in &mut bias[5..8] {
            *b = cfg.init_scale.ln() as Scalar;
        }
        bias[8] = 1.0;
        let b = store.add("coarse.1.bias", ParamKind::Bias, Tensor::new(&[COARSE_CHANNELS], bias)?);
        Ok(Self {
            mlp: Mlp {
                fc1,
                fc2: Linear { w, b: Some(b) },
            },
            query: Linear::new(store, "coarse.query", c, c, true, rng),
            slots: store.add(
                "coarse.slots",
                ParamKind::Embedding,
                Tensor::randn(&[cfg.n_gaussians, c], cfg.query_std as Scalar, rng),
            ),
        })
    }

    /// Per-pixel Gaussians from channel-last features `[I, H', W', C]`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        cfg: &DecoderConfig,
        features: Var<'t>,
        cams: &[Camera],
        masks: &[Vec<bool>],
    ) -> Result<(RawGaussianVars<'t>, Var<'t>, CoarseInitOutput)> {
        let tape = features.tape();
        let s = features.shape();
        let (views, fh, fw, c) = (s[0], s[1], s[2], s[3]);
        let tokens = features.reshape(&[views * fh * fw, c])?;
        let mut fg = Vec::new();
        let mut rays = Vec::new();
        let mut counts = vec![0usize; views];
        for (v, cam) in cams.iter().enumerate() {
            for y in 0..fh {
                for x in 0..fw {
                    if !masks[v][y * fw + x] {
                        continue;
                    }
                    let px = (x * FEATURE_STRIDE) as f64 + 0.5 * (FEATURE_STRIDE - 1) as f64;
                    let py = (y * FEATURE_STRIDE) as f64 + 0.5 * (FEATURE_STRIDE - 1) as f64;
                    fg.push((v * fh + y) * fw + x);
                    rays.extend([(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, 1.0].map(|r| r as Scalar));
                    counts[v] += 1;
                }
            }
        }
        if fg.is_empty() {
            return contract("coarse initialization found no foreground pixels");
        }
        let nf = fg.len();
        let feats = tokens.index_select(&fg)?;
        let head = self.mlp.forward(p, feats)?;
        let depth = head.narrow(1, 0, 1)?.clamp(-3.0, 3.0)?.exp()?.scale(cfg.depth_prior as Scalar)?;
        let offsets = head.narrow(1, 1, 3)?;
        let mu_cam = tape.constant(Tensor::new(&[nf, 3], rays)?).mul(depth)?.add(offsets)?;
        let mut parts = Vec::new();
        let mut start = 0;
        for (v, cam) in cams.iter().enumerate() {
            if counts[v] == 0 {
                continue;
            }
            let r = cam.rotation();
            let t = cam.translation();
            let rt = Tensor::new(&[3, 3], (0..9).map(|i| r[(i / 3, i % 3)] as Scalar).collect())?;
            let tt = Tensor::new(&[3], vec![t.x as Scalar, t.y as Scalar, t.z as Scalar])?;
            // Row-vector form of R^T (x - t).
            let world = mu_cam.narrow(0, start, counts[v])?.sub(tape.constant(tt))?.matmul(tape.constant(rt))?;
            parts.push(world);
            start += counts[v];
        }
        let centers = Var::concat(&parts, 0)?;
        let rows = Var::concat(&[centers, head.narrow(1, 4, COARSE_CHANNELS - 4)?], 1)?;

        let cv = centers.value();
        let world: Vec<[f64; 3]> = (0..nf).map(|i| std::array::from_fn(|k| cv.data()[i * 3 + k] as f64)).collect();
        let selected = fit_count(&world, cfg.n_gaussians)?;
        let mut seen = vec![0usize; nf];
        let jitter: Vec<Scalar> = selected
            .iter()
            .flat_map(|&i| {
                seen[i] += 1;
                copy_direction(seen[i] - 1).map(|d| (d * cfg.init_scale) as Scalar)
            })
            .collect();
        let n = selected.len();
        let mut picked = RawGaussianVars::from_rows(rows.index_select(&selected)?)?;
        picked.centers = picked.centers.add(tape.constant(Tensor::new(&[n, 3], jitter)?))?;
        let raw = picked;
        let q0 = self.query.forward(p, feats.index_select(&selected)?)?.add(p.get(self.slots))?;

        let (dv, ov, mv) = (depth.value(), offsets.value(), mu_cam.value());
        let info = CoarseInitOutput {
            depth: dv.data().iter().map(|&d| d as f64).collect(),
            offsets: (0..nf).map(|i| std::array::from_fn(|k| ov.data()[i * 3 + k] as f64)).collect(),
            camera_centers: (0..nf).map(|i| std::array::from_fn(|k| mv.data()[i * 3 + k] as f64)).collect(),
            world_centers: world,
            foreground: nf,
            selected,
        };
        Ok((raw, q0, info))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LayerStats {
    pub query_bytes: usize,
    pub gaussian_bytes: usize,
    pub kv_bytes: usize,
    pub n_keys: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    pub mvdfa: Mvdfa,
    pub norm1: LayerNorm,
    pub sesa: Sesa,
    pub ffn: Mlp,
    pub norm3: LayerNorm,
    pub head: Mlp,
}

impl DecoderLayer {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &DecoderConfig, rng: &mut R) -> Result<Self> {
        let c = cfg.hidden;
        Ok(Self {
            mvdfa: Mvdfa::new(store, &format!("{name}.mvdfa"), c, cfg.n_samples, cfg.heads, cfg.offset_init, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c),
            sesa: Sesa::new(store, &format!("{name}.sesa"), c, rng),
            ffn: Mlp {
                fc1: Linear::new(store, &format!("{name}.ffn.0"), c, cfg.ffn_width, true, rng),
                fc2: Linear::new(store, &format!("{name}.ffn.1"), cfg.ffn_width, c, true, rng),
            },
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), c),
            head: Mlp {
                fc1: Linear::new(store, &format!("{name}.head.0"), c, c, true, rng),
                fc2: Linear::zeros(store, &format!("{name}.head.1"), c, RAW_PARAM_WIDTH, true),
            },
        })
    }

    /// One refinement step: queries through MVDFA, SESA and the FFN, then a
    /// Gaussian update predicted from the new queries.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        cfg: &DecoderConfig,
        q: Var<'t>,
        raw: &RawGaussianVars<'t>,
        features: Var<'t>,
        cams: &[Camera],
    ) -> Result<(Var<'t>, RawGaussianVars<'t>, LayerStats)> {
        let tape = q.tape();
        let q1 = if cfg.use_mvdfa {
            let (m, _) = self.mvdfa.forward(p, features, cams, q, raw.centers)?;
            self.norm1.forward(p, q.add(m)?)?
        } else {
            q
        };
        let mut stats = LayerStats::default();
        let q2 = if cfg.use_sesa {
            let cv = raw.centers.value();
            let centers: Vec<[f64; 3]> = (0..raw.len())
                .map(|i| std::array::from_fn(|k| cv.data()[i * 3 + k] as f64))
                .collect();
            let out = self.sesa.forward(p, q1, &centers, cfg.sesa_rate)?;
            stats.kv_bytes = out.stats.kv_bytes;
            stats.n_keys = out.stats.n_keys;
            out.out
        } else {
            q1
        };
        let q3 = self.norm3.forward(p, q2.add(self.ffn.forward(p, q2)?)?)?;
        let mut delta = RawGaussianVars::from_rows(self.head.forward(p, q3)?)?;
        let identity = tape.constant(Tensor::new(&[4], vec![1.0, 0.0, 0.0, 0.0])?);
        delta.rotation = delta.rotation.add(identity)?;
        let next = raw.apply_update(&delta)?;
        stats.query_bytes = q3.value().numel() * std::mem::size_of::<Scalar>();
        stats.gaussian_bytes = raw.len() * RAW_PARAM_WIDTH * std::mem::size_of::<Scalar>();
        Ok((q3, next, stats))
    }
}

#[derive(Clone, Debug, Default)]
pub struct DecoderStats {
    pub n_gaussians: usize,
    /// Largest query buffer held by any layer.
    pub query_bytes: usize,
    pub gaussian_bytes: usize,
    pub kv_bytes: usize,
    pub encoder_secs: f64,
    pub decoder_secs: f64,
    pub coarse: Option<CoarseInitOutput>,
}

pub struct ForwardOutput<'t> {
    pub initial: RawGaussianVars<'t>,
    pub raw: RawGaussianVars<'t>,
    pub gaussians: GaussianVars<'t>,
    pub stats: DecoderStats,
}

pub struct UniGs {
    pub cfg: DecoderConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub coarse: Option<CoarseHead>,
    pub query_embed: Option<ParamId>,
    pub layers: Vec<DecoderLayer>,
}

impl UniGs {
    pub fn new(cfg: DecoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let encoder = Encoder::new(&mut params, cfg.hidden, cfg.window, &mut rng);
        let (coarse, query_embed) = match cfg.init {
            InitStrategy::CoarsePerPixel => (Some(CoarseHead::new(&mut params, &cfg, &mut rng)?), None),
            InitStrategy::RandomInCov => {
                let q = Tensor::randn(&[cfg.n_gaussians, cfg.hidden], cfg.query_std as Scalar, &mut rng);
                (None, Some(params.add("queries", ParamKind::Embedding, q)))
            }
        };
        let layers = (0..cfg.layers)
            .map(|l| DecoderLayer::new(&mut params, &format!("layer{l}"), &cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            params,
            encoder,
            coarse,
            query_embed,
            layers,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, batch: &ViewBatch) -> Result<ForwardOutput<'t>> {
        let tape = p.get(self.encoder.down1.w).tape();
        let t0 = Instant::now();
        let images = tape.constant(batch.images.clone());
        let features = self.encoder.extract_features(p, images)?.permute(&[0, 2, 3, 1])?;
        let encoder_secs = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let mut stats = DecoderStats::default();
        let (initial, q0) = match (self.coarse, self.query_embed) {
            (Some(head), _) => {
                let fmasks = match &batch.masks {
                    Some(m) => feature_masks(m, batch.height(), batch.width()),
                    None => vec![vec![true; (batch.height() / 4) * (batch.width() / 4)]; batch.len()],
                };
                let (raw, q, info) = head.forward(p, &self.cfg, features, &batch.cams, &fmasks)?;
                stats.coarse = Some(info);
                (raw, q)
            }
            (None, Some(qid)) => {
                let init = init_random_in_cov(
                    &batch.cams,
                    self.cfg.n_gaussians,
                    self.cfg.cov_center,
                    self.cfg.cov_half_extent,
                    self.cfg.seed,
                )?;
                (RawGaussianVars::constant(tape, &init)?, p.get(qid))
            }
            _ => unreachable!("model has exactly one initialization head"),
        };
        let mut q = q0;
        let mut raw = initial;
        for layer in &self.layers {
            let (nq, nraw, ls) = layer.forward(p, &self.cfg, q, &raw, features, &batch.cams)?;
            q = nq;
            raw = nraw;
            stats.query_bytes = stats.query_bytes.max(ls.query_bytes);
            stats.gaussian_bytes = stats.gaussian_bytes.max(ls.gaussian_bytes);
            stats.kv_bytes = stats.kv_bytes.max(ls.kv_bytes);
        }
        let gaussians = raw.activate()?;
        stats.n_gaussians = raw.len();
        stats.encoder_secs = encoder_secs;
        stats.decoder_secs = t1.elapsed().as_secs_f64();
        Ok(ForwardOutput {
            initial,
            raw,
            gaussians,
            stats,
        })
    }

    /// Inference without gradient tracking.
    pub fn reconstruct(&self, batch: &ViewBatch) -> Result<(GaussianSet, DecoderStats)> {
        let tape = Tape::new();
        let p = self.params.bind_constant(&tape);
        let out = self.forward(&p, batch)?;
        Ok((out.gaussians.to_set(), out.stats))
    }
}

//! Per-scene Gaussian fitting and small end-to-end training of the network.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{round_to_f32, Checkpoint};
use crate::decoder::{init_random_in_cov, DecoderConfig, UniGs};
use crate::error::{contract, Error, Result};
use crate::gaussian::{activate_params, raw_rows, GaussianSet, RawGaussian, RawGaussianVars, SH_COEFFS};
use crate::loss::{mse_loss, psnr_from_mse, ssim, total_loss, LossConfig};
use crate::nn::{ParamId, ParamKind, ParamStore};
use crate::renderer::{render, render_var};
use crate::scene::{Scene, Split};
use crate::tensor::{Gradients, Scalar, Tape, Tensor, Var};

pub const BACKGROUND: [f64; 3] = [0.0; 3];

/// Adam with per-parameter learning rates. Parameters and moments are kept at
/// f32 precision so a checkpoint captures the optimizer state exactly.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. `grads[i]` is `None` for parameters the loss does not reach.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: impl Fn(ParamId) -> f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let rate = lr(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(id);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gv = gv as f64;
                let mn = self.beta1 * *mv as f64 + (1.0 - self.beta1) * gv;
                let vn = self.beta2 * *vv as f64 + (1.0 - self.beta2) * gv * gv;
                let update = rate * (mn / bc1) / ((vn / bc2).sqrt() + self.eps);
                *pv = (*pv as f64 - update) as f32 as Scalar;
                *mv = mn as f32 as Scalar;
                *vv = vn as f32 as Scalar;
            }
        }
    }
}

fn gather_grads(store_vars: &[Var<'_>], grads: &Gradients) -> Vec<Option<Tensor>> {
    store_vars.iter().map(|&v| grads.get(v).cloned()).collect()
}

fn check_finite(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            detail: format!("loss is {loss}"),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: String,
    pub split: Split,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
}

pub fn mean_psnr(m: &[ViewMetrics]) -> f64 {
    m.iter().map(|v| v.psnr).sum::<f64>() / m.len().max(1) as f64
}

pub fn mean_ssim(m: &[ViewMetrics]) -> f64 {
    m.iter().map(|v| v.ssim).sum::<f64>() / m.len().max(1) as f64
}

/// Renders `set` at every view of `split` and scores it against the images.
pub fn evaluate(set: &GaussianSet, scene: &Scene, split: Split) -> Result<Vec<ViewMetrics>> {
    scene
        .split(split)
        .into_iter()
        .map(|v| {
            let (img, _) = render(set, &v.camera, BACKGROUND);
            let gt: Vec<f64> = v.image.data().iter().map(|&x| x as f64).collect();
            let mse = crate::loss::mse(&img.rgb, &gt);
            Ok(ViewMetrics {
                view: v.name.clone(),
                split,
                psnr: psnr_from_mse(mse),
                ssim: ssim(&img.rgb, &gt, [3, img.height, img.width])?,
                mse,
            })
        })
        .collect()
}

pub fn metrics_csv(scene: &str, rows: &[ViewMetrics]) -> String {
    let mut s = String::from("scene,view,split,psnr,ssim,mse\n");
    for r in rows {
        let split = match r.split {
            Split::Input => "input",
            Split::Heldout => "heldout",
        };
        s.push_str(&format!("{scene},{},{split},{:.4},{:.5},{:.6e}\n", r.view, r.psnr, r.ssim, r.mse));
    }
    s
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub n_gaussians: usize,
    pub iters: usize,
    /// Base learning rate; each parameter group scales it.
    pub lr: f64,
    pub seed: u64,
    /// Use only the first this many input views.
    pub views: Option<usize>,
    pub cov_center: [f64; 3],
    pub cov_half_extent: f64,
    pub log_every: usize,
    pub group_lr: GroupLr,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_gaussians: 2000,
            iters: 1500,
            lr: 0.01,
            seed: 0,
            views: None,
            cov_center: [0.0, 0.0, 2.5],
            cov_half_extent: 1.0,
            log_every: 100,
            group_lr: GroupLr::default(),
        }
    }
}

/// Learning-rate multipliers per parameter group, relative to the base rate.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GroupLr {
    pub centers: f64,
    pub opacity: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
}

impl Default for GroupLr {
    fn default() -> Self {
        Self {
            centers: 0.1,
            opacity: 5.0,
            log_scale: 0.5,
            rotation: 0.5,
            sh_dc: 2.0,
            sh_rest: 0.1,
        }
    }
}

impl GroupLr {
    fn as_array(&self) -> [f64; 6] {
        [self.centers, self.opacity, self.log_scale, self.rotation, self.sh_dc, self.sh_rest]
    }
}

pub struct FitResult {
    pub raw: Vec<RawGaussian>,
    pub gaussians: GaussianSet,
    /// Loss before each step, plus the final loss.
    pub losses: Vec<f64>,
    pub train: Vec<ViewMetrics>,
    pub heldout: Vec<ViewMetrics>,
}

fn raw_store(raw: &[RawGaussian]) -> Result<ParamStore> {
    let rows = raw_rows(raw)?;
    let n = raw.len();
    let col = |a: usize, w: usize| Tensor::from_fn(&[n, w], |i| rows.data()[(i / w) * rows.shape()[1] + a + i % w]);
    let mut store = ParamStore::default();
    store.add("centers", ParamKind::Embedding, col(0, 3));
    store.add("opacity", ParamKind::Embedding, col(3, 1));
    store.add("log_scale", ParamKind::Embedding, col(4, 3));
    store.add("rotation", ParamKind::Embedding, col(7, 4));
    let sh = col(11, SH_COEFFS);
    let dc = Tensor::from_fn(&[n, 3], |i| sh.data()[(i / 3) * SH_COEFFS + (i % 3) * 4]);
    let rest = Tensor::from_fn(&[n, 9], |i| sh.data()[(i / 9) * SH_COEFFS + (i % 9 / 3) * 4 + 1 + i % 3]);
    store.add("sh_dc", ParamKind::Embedding, dc);
    store.add("sh_rest", ParamKind::Embedding, rest);
    for id in store.ids().collect::<Vec<_>>() {
        round_to_f32(store.get_mut(id));
    }
    Ok(store)
}

fn raw_vars<'t>(store: &ParamStore, tape: &'t Tape) -> Result<(crate::nn::Bound<'t>, RawGaussianVars<'t>)> {
    let b = store.bind(tape);
    let v = b.vars();
    let n = v[0].shape()[0];
    let sh = Var::concat(&[v[4].reshape(&[n, 3, 1])?, v[5].reshape(&[n, 3, 3])?], 2)?.reshape(&[n, SH_COEFFS])?;
    let raw = RawGaussianVars {
        centers: v[0],
        opacity: v[1],
        scale: v[2],
        rotation: v[3],
        sh,
    };
    Ok((b, raw))
}

/// Optimizes Gaussians directly against the input views, starting from a
/// random fill of the sampling box, then scores held-out views.
pub fn fit_scene(scene: &Scene, cfg: &FitConfig, loss_cfg: &LossConfig, mut log: impl FnMut(usize, f64)) -> Result<FitResult> {
    if cfg.n_gaussians == 0 || !(cfg.lr > 0.0) {
        return contract("fit needs a positive Gaussian count and learning rate");
    }
    let mut inputs = scene.split(Split::Input);
    if let Some(k) = cfg.views {
        inputs.truncate(k.max(1));
    }
    let cams: Vec<_> = inputs.iter().map(|v| v.camera.clone()).collect();
    let init = init_random_in_cov(&cams, cfg.n_gaussians, cfg.cov_center, cfg.cov_half_extent, cfg.seed)?;
    let mut store = raw_store(&init)?;
    let mut adam = Adam::new(&store);
    let lrs = cfg.group_lr.as_array().map(|s| s * cfg.lr);
    let mut losses = Vec::with_capacity(cfg.iters + 1);

    for step in 0..=cfg.iters {
        let tape = Tape::new();
        let (bound, raw) = raw_vars(&store, &tape)?;
        let g = raw.activate()?;
        let mut total: Option<Var> = None;
        for v in &inputs {
            let img = render_var(&g, &v.camera, BACKGROUND)?;
            let l = total_loss(img, &v.image, loss_cfg)?;
            total = Some(match total {
                Some(t) => t.add(l)?,
                None => l,
            });
        }
        let loss = total.expect("at least one input view").scale(1.0 / inputs.len() as Scalar)?;
        let value = loss.value().item() as f64;
        check_finite(step, value)?;
        losses.push(value);
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log(step, value);
        }
        if step == cfg.iters {
            break;
        }
        let grads = tape.backward(loss)?;
        let gs = gather_grads(bound.vars(), &grads);
        adam.step(&mut store, &gs, |id| lrs[id.index()]);
    }

    let tape = Tape::new();
    let (_, raw) = raw_vars(&store, &tape)?;
    let raw = raw.to_raw();
    let gaussians = activate_params(&raw);
    let train = evaluate(&gaussians, scene, Split::Input)?;
    let heldout = evaluate(&gaussians, scene, Split::Heldout)?;
    Ok(FitResult {
        raw,
        gaussians,
        losses,
        train,
        heldout,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub decoder: DecoderConfig,
    pub iters: usize,
    pub lr: f64,
    pub seed: u64,
    /// Input views per scene fed to the model.
    pub views: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            decoder: DecoderConfig::default(),
            iters: 3000,
            lr: 1e-4,
            seed: 0,
            views: 4,
            log_every: 0,
        }
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: UniGs,
    pub adam: Adam,
    pub step: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub train_psnr: f64,
    pub loss: f64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        if !(cfg.lr > 0.0) || cfg.views == 0 {
            return contract("training needs a positive learning rate and view count");
        }
        let mut model = UniGs::new(cfg.decoder.clone(), cfg.seed)?;
        for id in model.params.ids().collect::<Vec<_>>() {
            round_to_f32(model.params.get_mut(id));
        }
        let adam = Adam::new(&model.params);
        Ok(Self { cfg, model, adam, step: 0 })
    }

    /// Mean loss and mean per-view MSE of the model on one scene, with gradients.
    fn scene_loss<'t>(&self, tape: &'t Tape, scene: &Scene, loss_cfg: &LossConfig) -> Result<(crate::nn::Bound<'t>, Var<'t>, f64)> {
        let batch = scene.input_batch(Some(self.cfg.views))?;
        let p = self.model.params.bind(tape);
        let out = self.model.forward(&p, &batch)?;
        let g = &out.gaussians;
        if ![g.centers, g.opacity, g.scale, g.rotation, g.sh].iter().all(|v| v.value().is_finite()) {
            return Err(Error::Divergence {
                step: self.step,
                detail: "predicted Gaussians are not finite".into(),
            });
        }
        let views = scene.split(Split::Input);
        let mut total: Option<Var> = None;
        let mut mse_sum = 0.0;
        for v in views.iter().take(self.cfg.views) {
            let img = render_var(&out.gaussians, &v.camera, BACKGROUND)?;
            mse_sum += mse_loss(img, &v.image)?.value().item() as f64;
            let l = total_loss(img, &v.image, loss_cfg)?;
            total = Some(match total {
                Some(t) => t.add(l)?,
                None => l,
            });
        }
        let n = views.len().min(self.cfg.views) as f64;
        let loss = total.expect("scene has input views").scale((1.0 / n) as Scalar)?;
        Ok((p, loss, mse_sum / n))
    }

    /// One optimizer step on scene `step % scenes.len()`. Returns (loss, mse)
    /// measured before the update.
    pub fn train_step(&mut self, scenes: &[Scene], loss_cfg: &LossConfig) -> Result<(f64, f64)> {
        let scene = &scenes[self.step % scenes.len()];
        let tape = Tape::new();
        let (p, loss, mse) = self.scene_loss(&tape, scene, loss_cfg)?;
        let value = loss.value().item() as f64;
        check_finite(self.step, value)?;
        let grads = tape.backward(loss)?;
        let gs = gather_grads(p.vars(), &grads);
        if let Some((i, _)) = gs.iter().enumerate().find(|(_, g)| g.as_ref().is_some_and(|g| !g.is_finite())) {
            return Err(Error::Divergence {
                step: self.step,
                detail: format!("non-finite gradient for {}", self.model.params.iter().nth(i).unwrap().0),
            });
        }
        let lr = self.cfg.lr;
        self.adam.step(&mut self.model.params, &gs, |_| lr);
        self.step += 1;
        Ok((value, mse))
    }

    /// Mean train PSNR over all scenes without updating.
    pub fn train_psnr(&self, scenes: &[Scene]) -> Result<f64> {
        let mut acc = 0.0;
        for s in scenes {
            let (set, _) = self.model.reconstruct(&s.input_batch(Some(self.cfg.views))?)?;
            let m = evaluate(&set, s, Split::Input)?;
            acc += m.iter().take(self.cfg.views).map(|v| v.psnr).sum::<f64>() / m.len().min(self.cfg.views) as f64;
        }
        Ok(acc / scenes.len() as f64)
    }

    /// Mean held-out PSNR over all scenes.
    pub fn heldout_psnr(&self, scenes: &[Scene]) -> Result<f64> {
        let mut acc = 0.0;
        for s in scenes {
            let (set, _) = self.model.reconstruct(&s.input_batch(Some(self.cfg.views))?)?;
            acc += mean_psnr(&evaluate(&set, s, Split::Heldout)?);
        }
        Ok(acc / scenes.len() as f64)
    }

    /// Runs until `cfg.iters` steps have been taken, logging once per epoch.
    pub fn run(&mut self, scenes: &[Scene], loss_cfg: &LossConfig, mut log: impl FnMut(&EpochLog)) -> Result<Vec<EpochLog>> {
        if scenes.is_empty() {
            return contract("training needs at least one scene");
        }
        let mut logs = Vec::new();
        let (mut mse_acc, mut loss_acc, mut count) = (0.0, 0.0, 0usize);
        while self.step < self.cfg.iters {
            let (loss, mse) = self.train_step(scenes, loss_cfg)?;
            mse_acc += mse;
            loss_acc += loss;
            count += 1;
            if self.step % scenes.len() == 0 {
                let entry = EpochLog {
                    epoch: self.step / scenes.len(),
                    step: self.step,
                    train_psnr: psnr_from_mse(mse_acc / count as f64),
                    loss: loss_acc / count as f64,
                };
                if self.cfg.log_every > 0 && entry.epoch % self.cfg.log_every == 0 {
                    log(&entry);
                }
                logs.push(entry);
                (mse_acc, loss_acc, count) = (0.0, 0.0, 0);
            }
        }
        Ok(logs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::with_capacity(3 * self.model.params.len());
        for (i, (name, t)) in self.model.params.iter().enumerate() {
            tensors.push((format!("param/{name}"), t.clone()));
            tensors.push((format!("adam.m/{name}"), self.adam.m[i].clone()));
            tensors.push((format!("adam.v/{name}"), self.adam.v[i].clone()));
        }
        Checkpoint {
            meta: serde_json::json!({
                "config": self.cfg,
                "step": self.step,
                "adam_t": self.adam.t,
            }),
            tensors,
        }
        .save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let cfg: TrainConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let mut t = Self::new(cfg)?;
        t.step = ck.meta["step"].as_u64().unwrap_or(0) as usize;
        t.adam.t = ck.meta["adam_t"].as_u64().unwrap_or(0);
        let names: Vec<String> = t.model.params.iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            let fetch = |key: String| -> Result<Tensor> {
                ck.get(&key)
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))
            };
            let p = fetch(format!("param/{name}"))?;
            if p.shape() != t.model.params.iter().nth(i).unwrap().1.shape() {
                return Err(Error::Checkpoint(format!("tensor {name} has the wrong shape")));
            }
            t.model.params.set(name, p)?;
            t.adam.m[i] = fetch(format!("adam.m/{name}"))?;
            t.adam.v[i] = fetch(format!("adam.v/{name}"))?;
        }
        Ok(t)
    }
}

/// Loads only model weights from a training checkpoint.
pub fn load_model(path: &Path) -> Result<UniGs> {
    Ok(Trainer::load(path)?.model)
}

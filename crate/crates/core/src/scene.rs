//! Posed multi-view scenes on disk and procedural test scenes.
//!
//! A scene directory holds `cameras.json` plus the PNGs it references:
//!
//! ```json
//! {"views": [{"image": "000.png", "K": [[fx,0,cx],[0,fy,cy],[0,0,1]],
//!             "w2c": [[...],[...],[...],[0,0,0,1]], "mask": "000_mask.png",
//!             "split": "input"}]}
//! ```
//!
//! `w2c` may also be a flat list of 16 row-major values. `mask` and `split`
//! are optional; views default to `input`.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix4, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{normalize_to_reference, Camera};
use crate::decoder::ViewBatch;
use crate::error::{Error, Result};
use crate::gaussian::{normalize_quat, quat_mul, Gaussian, GaussianSet, SH_C0, SH_COEFFS};
use crate::renderer::{render, RenderedImage};
use crate::tensor::{Scalar, Tensor};

pub const RING_RADIUS: f64 = 2.5;
pub const FOV_X_DEG: f64 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Input,
    Heldout,
}

#[derive(Clone, Debug)]
pub struct SceneView {
    pub name: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub camera: Camera,
    pub mask: Option<Vec<bool>>,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub views: Vec<SceneView>,
    pub height: usize,
    pub width: usize,
}

fn scene_err(msg: impl Into<String>) -> Error {
    Error::Scene(msg.into())
}

impl Scene {
    pub fn new(views: Vec<SceneView>) -> Result<Self> {
        let first = views.first().ok_or_else(|| scene_err("scene has no views"))?;
        let (h, w) = (first.image.shape()[1], first.image.shape()[2]);
        for v in &views {
            if v.image.shape() != [3, h, w] {
                return Err(scene_err(format!("view {} is {:?}, expected [3, {h}, {w}]", v.name, v.image.shape())));
            }
            if v.camera.width != w || v.camera.height != h {
                return Err(scene_err(format!("view {}: camera resolution does not match its image", v.name)));
            }
        }
        if !views.iter().any(|v| v.split == Split::Input) {
            return Err(scene_err("scene has no input views"));
        }
        Ok(Self { views, height: h, width: w })
    }

    pub fn split(&self, split: Split) -> Vec<&SceneView> {
        self.views.iter().filter(|v| v.split == split).collect()
    }

    /// Input views as a model batch, optionally only the first `max`.
    pub fn input_batch(&self, max: Option<usize>) -> Result<ViewBatch> {
        let mut views = self.split(Split::Input);
        if let Some(m) = max {
            views.truncate(m.max(1));
        }
        let mut data = Vec::with_capacity(views.len() * 3 * self.height * self.width);
        for v in &views {
            data.extend_from_slice(v.image.data());
        }
        let masks = if views.iter().all(|v| v.mask.is_some()) {
            Some(views.iter().map(|v| v.mask.clone().unwrap()).collect())
        } else {
            None
        };
        ViewBatch::new(
            Tensor::new(&[views.len(), 3, self.height, self.width], data)?,
            views.iter().map(|v| v.camera.clone()).collect(),
            masks,
        )
    }

    /// Re-expresses all cameras relative to the first view.
    pub fn normalized(&self) -> Result<Self> {
        let cams: Vec<Camera> = self.views.iter().map(|v| v.camera.clone()).collect();
        let cams = normalize_to_reference(&cams)?;
        let views = self
            .views
            .iter()
            .zip(cams)
            .map(|(v, camera)| SceneView { camera, ..v.clone() })
            .collect();
        Scene::new(views)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum MatrixJson {
    Nested(Vec<Vec<f64>>),
    Flat(Vec<f64>),
}

impl MatrixJson {
    fn to_w2c(&self) -> Result<Matrix4<f64>> {
        let flat: Vec<f64> = match self {
            MatrixJson::Flat(v) => v.clone(),
            MatrixJson::Nested(rows) => rows.iter().flatten().copied().collect(),
        };
        if flat.len() != 16 {
            return Err(scene_err(format!("w2c must have 16 values, got {}", flat.len())));
        }
        Ok(Matrix4::from_row_slice(&flat))
    }
}

#[derive(Serialize, Deserialize)]
struct ViewJson {
    image: String,
    #[serde(rename = "K")]
    k: [[f64; 3]; 3],
    w2c: MatrixJson,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<String>,
    #[serde(default)]
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct CamerasJson {
    views: Vec<ViewJson>,
}

pub fn read_image(path: &Path) -> Result<(Tensor, Option<Vec<bool>>)> {
    let img = image::open(path).map_err(|e| scene_err(format!("cannot read image {}: {e}", path.display())))?;
    let has_alpha = img.color().has_alpha();
    let rgba = img.to_rgba8();
    let (w, h) = (rgba.width() as usize, rgba.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    let mut mask = Vec::with_capacity(h * w);
    for (x, y, p) in rgba.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c] as Scalar / 255.0;
        }
        mask.push(p[3] >= 128);
    }
    Ok((Tensor::new(&[3, h, w], data)?, has_alpha.then_some(mask)))
}

fn read_mask(path: &Path) -> Result<Vec<bool>> {
    let img = image::open(path).map_err(|e| scene_err(format!("cannot read mask {}: {e}", path.display())))?;
    Ok(img.to_luma8().pixels().map(|p| p[0] >= 128).collect())
}

/// Loads a scene and normalizes its cameras to the first view.
pub fn load_scene(dir: &Path) -> Result<Scene> {
    load_scene_raw(dir)?.normalized()
}

/// Loads a scene with cameras exactly as stored.
pub fn load_scene_raw(dir: &Path) -> Result<Scene> {
    let path = dir.join("cameras.json");
    let text = fs::read_to_string(&path).map_err(|e| scene_err(format!("cannot read {}: {e}", path.display())))?;
    let parsed: CamerasJson = serde_json::from_str(&text).map_err(|e| scene_err(format!("malformed {}: {e}", path.display())))?;
    let mut views = Vec::with_capacity(parsed.views.len());
    for (i, v) in parsed.views.iter().enumerate() {
        let (image, alpha) = read_image(&dir.join(&v.image))?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let k = v.k;
        if k[0][1] != 0.0 || k[1][0] != 0.0 || k[2] != [0.0, 0.0, 1.0] {
            return Err(scene_err(format!("view {i}: K must be [[fx,0,cx],[0,fy,cy],[0,0,1]]")));
        }
        let camera = Camera::new(k[0][0], k[1][1], k[0][2], k[1][2], w, h, v.w2c.to_w2c()?)
            .map_err(|e| scene_err(format!("view {i} ({}): {e}", v.image)))?;
        let companion = dir.join(format!(
            "{}_mask.png",
            Path::new(&v.image).file_stem().and_then(|s| s.to_str()).unwrap_or_default()
        ));
        let mask = match (&v.mask, alpha) {
            (Some(m), _) => Some(read_mask(&dir.join(m))?),
            (None, Some(a)) => Some(a),
            (None, None) if companion.exists() => Some(read_mask(&companion)?),
            _ => None,
        };
        if let Some(m) = &mask {
            if m.len() != h * w {
                return Err(scene_err(format!("view {i}: mask resolution differs from the image")));
            }
        }
        views.push(SceneView {
            name: v.image.clone(),
            image,
            camera,
            mask,
            split: v.split,
        });
    }
    Scene::new(views)
}

pub fn tensor_to_rgb8(t: &Tensor) -> image::RgbImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|c| {
            ((t.data()[(c * h + y as usize) * w + x as usize] as f64).clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    })
}

pub fn save_scene(scene: &Scene, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::with_capacity(scene.views.len());
    for v in &scene.views {
        let stem = Path::new(&v.name).file_stem().and_then(|s| s.to_str()).unwrap_or("view").to_string();
        let image = format!("{stem}.png");
        tensor_to_rgb8(&v.image).save(dir.join(&image))?;
        let mask = match &v.mask {
            Some(m) => {
                let name = format!("{stem}_mask.png");
                let img = image::GrayImage::from_fn(scene.width as u32, scene.height as u32, |x, y| {
                    image::Luma([if m[y as usize * scene.width + x as usize] { 255 } else { 0 }])
                });
                img.save(dir.join(&name))?;
                Some(name)
            }
            None => None,
        };
        let c = &v.camera;
        out.push(ViewJson {
            image,
            k: [[c.fx, 0.0, c.cx], [0.0, c.fy, c.cy], [0.0, 0.0, 1.0]],
            w2c: MatrixJson::Nested((0..4).map(|r| (0..4).map(|k| c.w2c[(r, k)]).collect()).collect()),
            mask,
            split: v.split,
        });
    }
    let json = serde_json::to_string_pretty(&CamerasJson { views: out })?;
    fs::write(dir.join("cameras.json"), json)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    Spheres3,
    Cube,
    RandomGaussians,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spheres3" => Ok(Self::Spheres3),
            "cube" => Ok(Self::Cube),
            "random_gaussians" => Ok(Self::RandomGaussians),
            _ => Err(scene_err(format!("unknown scene kind {s:?} (spheres3, cube, random_gaussians)"))),
        }
    }
}

fn dc_for(rgb: [f64; 3]) -> [f64; SH_COEFFS] {
    let mut sh = [0.0; SH_COEFFS];
    for c in 0..3 {
        sh[c * 4] = (rgb[c] - 0.5) / SH_C0;
    }
    sh
}

fn random_unit_quat<R: Rng>(rng: &mut R) -> [f64; 4] {
    normalize_quat(std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
}

/// Ground-truth Gaussians of a procedural scene, centered on the origin.
pub fn synth_gaussians(kind: SynthKind, seed: u64) -> GaussianSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussians = Vec::new();
    match kind {
        SynthKind::Spheres3 => {
            let spheres = [
                ([-0.45, -0.3, 0.0], 0.33, [0.9, 0.15, 0.1]),
                ([0.45, -0.2, 0.1], 0.28, [0.15, 0.8, 0.2]),
                ([0.0, 0.4, -0.1], 0.3, [0.2, 0.3, 0.95]),
            ];
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            for (center, radius, color) in spheres {
                let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
                let n = 160;
                for i in 0..n {
                    let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                    let r = (1.0 - y * y).sqrt();
                    let t = golden * i as f64;
                    let dir = [r * t.cos(), y, r * t.sin()];
                    let shade = 0.75 + 0.25 * dir[2];
                    gaussians.push(Gaussian {
                        center: std::array::from_fn(|k| center[k] + jitter[k] + radius * 0.85 * dir[k]),
                        opacity: 0.95,
                        rotation: random_unit_quat(&mut rng),
                        scale: [radius * 0.2; 3],
                        sh: dc_for(color.map(|c| (c * shade).clamp(0.0, 1.0))),
                    });
                }
            }
        }
        SynthKind::Cube => {
            let half = 0.45;
            let grid = 7;
            let faces: [([f64; 3], [f64; 3]); 6] = [
                ([1.0, 0.0, 0.0], [0.9, 0.2, 0.2]),
                ([-1.0, 0.0, 0.0], [0.2, 0.9, 0.2]),
                ([0.0, 1.0, 0.0], [0.2, 0.2, 0.9]),
                ([0.0, -1.0, 0.0], [0.9, 0.9, 0.2]),
                ([0.0, 0.0, 1.0], [0.9, 0.2, 0.9]),
                ([0.0, 0.0, -1.0], [0.2, 0.9, 0.9]),
            ];
            let spin = rng.random_range(0.0..std::f64::consts::FRAC_PI_2);
            let body = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), spin);
            for (normal, color) in faces {
                let n = Vector3::from(normal);
                let face_rot = UnitQuaternion::rotation_between(&Vector3::z(), &n)
                    .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI));
                let rot = body * face_rot;
                for a in 0..grid {
                    for b in 0..grid {
                        let u = (a as f64 + 0.5) / grid as f64 * 2.0 - 1.0;
                        let v = (b as f64 + 0.5) / grid as f64 * 2.0 - 1.0;
                        let local = face_rot * Vector3::new(u * half, v * half, 0.0) + n * half;
                        let p = body * local;
                        let q = rot.quaternion();
                        gaussians.push(Gaussian {
                            center: [p.x, p.y, p.z],
                            opacity: 0.95,
                            rotation: [q.w, q.i, q.j, q.k],
                            scale: [half / grid as f64 * 1.1, half / grid as f64 * 1.1, 0.01],
                            sh: dc_for(color),
                        });
                    }
                }
            }
        }
        SynthKind::RandomGaussians => {
            while gaussians.len() < 200 {
                let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.7..0.7));
                if p.iter().map(|v| v * v).sum::<f64>() > 0.49 {
                    continue;
                }
                let rgb: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.95));
                let mut sh = dc_for(rgb);
                for c in 0..3 {
                    for k in 1..4 {
                        sh[c * 4 + k] = rng.random_range(-0.2..0.2);
                    }
                }
                gaussians.push(Gaussian {
                    center: p,
                    opacity: rng.random_range(0.5..0.95),
                    rotation: random_unit_quat(&mut rng),
                    scale: std::array::from_fn(|_| rng.random_range(0.04..0.14)),
                    sh,
                });
            }
        }
    }
    GaussianSet { gaussians }
}

/// Cameras on a ring of radius [`RING_RADIUS`] around the origin, world up = +z,
/// elevations between 0 and 30 degrees.
pub fn ring_cameras(n: usize, h: usize, w: usize, azimuth_offset: f64, rng: &mut impl Rng) -> Result<Vec<Camera>> {
    let fov = FOV_X_DEG.to_radians();
    (0..n)
        .map(|i| {
            let az = azimuth_offset + std::f64::consts::TAU * i as f64 / n as f64 + rng.random_range(-0.1..0.1);
            let el = rng.random_range(0.0..30f64.to_radians());
            let eye = [
                RING_RADIUS * el.cos() * az.cos(),
                RING_RADIUS * el.cos() * az.sin(),
                RING_RADIUS * el.sin(),
            ];
            Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], fov, w, h)
        })
        .collect()
}

fn quantize(img: &RenderedImage) -> Tensor {
    let t = img.to_tensor();
    t.map(|v| ((v as f64).clamp(0.0, 1.0) * 255.0).round() as Scalar / 255.0)
}

/// Procedural scene in world coordinates: `n_views` input views, `n_heldout`
/// held-out views at azimuths between them, black background, masks from the
/// rendered coverage. Images are quantized to 8 bits so they survive a PNG
/// round trip unchanged.
pub fn synth_scene(kind: SynthKind, n_views: usize, n_heldout: usize, h: usize, w: usize, seed: u64) -> Result<(Scene, GaussianSet)> {
    if n_views == 0 || h == 0 || w == 0 {
        return Err(scene_err("synthetic scene needs at least one view and a non-empty resolution"));
    }
    let gt = synth_gaussians(kind, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut cams: Vec<(Camera, Split)> = ring_cameras(n_views, h, w, 0.0, &mut rng)?
        .into_iter()
        .map(|c| (c, Split::Input))
        .collect();
    if n_heldout > 0 {
        let offset = std::f64::consts::PI / n_views as f64;
        cams.extend(ring_cameras(n_heldout, h, w, offset, &mut rng)?.into_iter().map(|c| (c, Split::Heldout)));
    }
    let views = cams
        .into_iter()
        .enumerate()
        .map(|(i, (camera, split))| {
            let img = render(&gt, &camera, [0.0; 3]).0;
            SceneView {
                name: format!("{i:03}.png"),
                image: quantize(&img),
                mask: Some(img.alpha.iter().map(|&a| a >= 0.5).collect()),
                camera,
                split,
            }
        })
        .collect();
    Ok((Scene::new(views)?, gt))
}

/// Applies a rigid world transform to a Gaussian set, rotating centers,
/// orientations and the view-dependent color terms.
pub fn transform_gaussians(set: &GaussianSet, m: &Matrix4<f64>) -> GaussianSet {
    let r = m.fixed_view::<3, 3>(0, 0).into_owned();
    let t = m.fixed_view::<3, 1>(0, 3).into_owned();
    let rq = UnitQuaternion::from_matrix(&r);
    let rq = [rq.w, rq.i, rq.j, rq.k];
    // Degree-1 coefficients multiply (-y, z, -x); express them as a vector
    // c with color = c · d, rotate, then map back.
    let gaussians = set
        .gaussians
        .iter()
        .map(|g| {
            let p = r * Vector3::from(g.center) + t;
            let mut sh = g.sh;
            for ch in 0..3 {
                let k = &g.sh[ch * 4..ch * 4 + 4];
                let c = Vector3::new(-k[3], -k[1], k[2]);
                let c2 = r * c;
                sh[ch * 4 + 1] = -c2.y;
                sh[ch * 4 + 2] = c2.z;
                sh[ch * 4 + 3] = -c2.x;
            }
            Gaussian {
                center: [p.x, p.y, p.z],
                rotation: normalize_quat(quat_mul(rq, g.rotation)),
                sh,
                ..*g
            }
        })
        .collect();
    GaussianSet { gaussians }
}

use proptest::prelude::*;
use unigs::checkpoint::{round_to_f32, Checkpoint};
use unigs::gaussian::{normalize_quat, RawGaussian};
use unigs::ply::{read_ply, read_ply_raw, write_ply, write_ply_raw};
use unigs::renderer::render;
use unigs::scene::{load_scene, load_scene_raw, save_scene, synth_scene, Split, SynthKind};
use unigs::tensor::Tensor;

#[test]
fn scene_survives_save_and_load() {
    let (scene, gt) = synth_scene(SynthKind::Spheres3, 5, 2, 24, 32, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_scene(&scene, dir.path()).unwrap();
    let back = load_scene_raw(dir.path()).unwrap();
    assert_eq!((back.height, back.width, back.views.len()), (24, 32, 7));
    for (a, b) in scene.views.iter().zip(&back.views) {
        assert_eq!(a.split, b.split);
        assert_eq!(a.mask, b.mask);
        assert!(a.image.max_abs_diff(&b.image) <= 1e-10);
        let cam = (a.camera.w2c - b.camera.w2c).abs().max();
        assert!(cam <= 1e-10 && (a.camera.fx - b.camera.fx).abs() <= 1e-10 && (a.camera.cy - b.camera.cy).abs() <= 1e-10);
        let (ra, rb) = (render(&gt, &a.camera, [0.0; 3]).0, render(&gt, &b.camera, [0.0; 3]).0);
        let diff = ra.rgb.iter().zip(&rb.rgb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-12, "re-render differs by {diff:e}");
    }
    assert_eq!(back.split(Split::Heldout).len(), 2);
    let norm = load_scene(dir.path()).unwrap();
    assert_eq!(norm.views[0].camera.w2c, nalgebra::Matrix4::identity());
}

#[test]
fn flat_extrinsics_and_alpha_masks_load() {
    let dir = tempfile::tempdir().unwrap();
    let img = image::RgbaImage::from_fn(8, 8, |x, _| image::Rgba([200, 10, 10, if x < 4 { 255 } else { 0 }]));
    img.save(dir.path().join("a.png")).unwrap();
    let json = r#"{"views":[{"image":"a.png","K":[[8,0,3.5],[0,8,3.5],[0,0,1]],
        "w2c":[1,0,0,0, 0,1,0,0, 0,0,1,2, 0,0,0,1]}]}"#;
    std::fs::write(dir.path().join("cameras.json"), json).unwrap();
    let s = load_scene_raw(dir.path()).unwrap();
    let mask = s.views[0].mask.as_ref().unwrap();
    assert_eq!(mask.iter().filter(|&&m| m).count(), 32);
    assert_eq!(s.views[0].split, Split::Input);
    assert!((s.views[0].camera.w2c[(2, 3)] - 2.0).abs() < 1e-15);
}

#[test]
fn malformed_scenes_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    image::RgbImage::new(8, 8).save(dir.path().join("a.png")).unwrap();
    let bad_k = r#"{"views":[{"image":"a.png","K":[[8,1,3.5],[0,8,3.5],[0,0,1]],"w2c":[1,0,0,0,0,1,0,0,0,0,1,2,0,0,0,1]}]}"#;
    std::fs::write(dir.path().join("cameras.json"), bad_k).unwrap();
    assert!(load_scene_raw(dir.path()).is_err());
    let bad_r = r#"{"views":[{"image":"a.png","K":[[8,0,3.5],[0,8,3.5],[0,0,1]],"w2c":[2,0,0,0,0,1,0,0,0,0,1,2,0,0,0,1]}]}"#;
    std::fs::write(dir.path().join("cameras.json"), bad_r).unwrap();
    assert!(load_scene_raw(dir.path()).is_err());
    let missing = r#"{"views":[{"image":"b.png","K":[[8,0,3.5],[0,8,3.5],[0,0,1]],"w2c":[1,0,0,0,0,1,0,0,0,0,1,2,0,0,0,1]}]}"#;
    std::fs::write(dir.path().join("cameras.json"), missing).unwrap();
    assert!(load_scene_raw(dir.path()).is_err());
}

#[test]
fn activated_ply_roundtrip_renders_the_same() {
    let (scene, gt) = synth_scene(SynthKind::Cube, 2, 0, 16, 16, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.ply");
    write_ply(&p, &gt).unwrap();
    let back = read_ply(&p).unwrap();
    assert_eq!(back.len(), gt.len());
    let cam = &scene.views[0].camera;
    let (a, b) = (render(&gt, cam, [0.0; 3]).0, render(&back, cam, [0.0; 3]).0);
    let diff = a.rgb.iter().zip(&b.rgb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-5, "{diff:e}");
}

fn raw_strategy() -> impl Strategy<Value = RawGaussian> {
    (
        prop::array::uniform3(-3.0f64..3.0),
        -6.0f64..6.0,
        prop::array::uniform3(-6.0f64..1.0),
        prop::array::uniform4(0.1f64..1.0),
        prop::array::uniform12(-2.0f64..2.0),
    )
        .prop_map(|(center, opacity_logit, log_scale, q, sh)| RawGaussian {
            center,
            opacity_logit,
            log_scale,
            rotation: normalize_quat(q),
            sh,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn raw_ply_roundtrip_is_f32_exact(gs in prop::collection::vec(raw_strategy(), 0..20)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.ply");
        write_ply_raw(&p, &gs).unwrap();
        let back = read_ply_raw(&p).unwrap();
        prop_assert_eq!(back.len(), gs.len());
        for (a, b) in gs.iter().zip(&back) {
            prop_assert_eq!(b.center[1], a.center[1] as f32 as f64);
            prop_assert_eq!(b.opacity_logit, a.opacity_logit as f32 as f64);
            prop_assert_eq!(b.sh[7], a.sh[7] as f32 as f64);
            prop_assert_eq!(b.rotation[3], a.rotation[3] as f32 as f64);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact(vals in prop::collection::vec(-1e3f64..1e3, 1..64), meta in 0u64..1000) {
        let mut t = Tensor::new(&[vals.len()], vals).unwrap();
        round_to_f32(&mut t);
        let ck = Checkpoint { meta: serde_json::json!({ "m": meta }), tensors: vec![("t".into(), t.clone())] };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        prop_assert_eq!(back.get("t").unwrap().data(), t.data());
        prop_assert_eq!(&back.meta["m"], &serde_json::json!(meta));
    }
}

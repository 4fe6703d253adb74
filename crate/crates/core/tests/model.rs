use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unigs::checks::fps_exhaustive;
use unigs::decoder::{DecoderConfig, InitStrategy, UniGs, ViewBatch};
use unigs::loss::{total_loss, LossConfig};
use unigs::renderer::render_var;
use unigs::scene::{synth_scene, Scene, Split, SynthKind};
use unigs::sesa::{fps, num_keys};
use unigs::tensor::{Tape, Tensor};

fn tiny(n: usize) -> DecoderConfig {
    DecoderConfig {
        n_gaussians: n,
        hidden: 16,
        ffn_width: 32,
        layers: 2,
        sesa_rate: 0.25,
        ..DecoderConfig::default()
    }
}

fn scene(views: usize) -> Scene {
    synth_scene(SynthKind::Cube, views, 1, 32, 32, 3).unwrap().0.normalized().unwrap()
}

fn features(model: &UniGs, batch: &ViewBatch, cross: bool) -> Tensor {
    let tape = Tape::new();
    let p = model.params.bind_constant(&tape);
    let img = tape.constant(batch.images.clone());
    let f = if cross {
        model.encoder.extract_features(&p, img)
    } else {
        model.encoder.unet(&p, img)
    };
    (*f.unwrap().value()).clone()
}

/// Update heads start at zero; give them small weights so the layers move the Gaussians.
fn perturb_heads(model: &mut UniGs) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for id in model.params.ids().collect::<Vec<_>>() {
        if model.params.name(id).contains("head.1") {
            for v in model.params.get_mut(id).data_mut() {
                *v = rng.random_range(-0.05..0.05);
            }
        }
    }
}

#[test]
fn single_view_skips_cross_attention() {
    let model = UniGs::new(tiny(32), 1).unwrap();
    let batch = scene(1).input_batch(None).unwrap();
    assert_eq!(features(&model, &batch, true).data(), features(&model, &batch, false).data());
}

#[test]
fn encoder_is_view_permutation_equivariant() {
    let model = UniGs::new(tiny(32), 2).unwrap();
    let batch = scene(4).input_batch(None).unwrap();
    let base = features(&model, &batch, true);
    let per = base.numel() / 4;
    for perm in [[1, 0, 2, 3], [3, 2, 1, 0], [2, 3, 0, 1]] {
        let moved = features(&model, &batch.select(&perm).unwrap(), true);
        for (dst, &src) in perm.iter().enumerate() {
            for k in 0..per {
                assert!((base.data()[src * per + k] - moved.data()[dst * per + k]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn fresh_update_heads_leave_gaussians_in_place() {
    for init in [InitStrategy::CoarsePerPixel, InitStrategy::RandomInCov] {
        let model = UniGs::new(DecoderConfig { init, ..tiny(40) }, 5).unwrap();
        let tape = Tape::new();
        let p = model.params.bind_constant(&tape);
        let out = model.forward(&p, &scene(3).input_batch(None).unwrap()).unwrap();
        assert_eq!(out.raw.centers.value().data(), out.initial.centers.value().data());
        assert_eq!(out.raw.scale.value().data(), out.initial.scale.value().data());
    }
}

#[test]
fn gaussian_count_and_query_buffer_ignore_view_count() {
    let s = scene(6);
    for cfg in [
        tiny(64),
        DecoderConfig { init: InitStrategy::RandomInCov, ..tiny(64) },
        DecoderConfig { use_mvdfa: false, ..tiny(64) },
        DecoderConfig { use_sesa: false, ..tiny(64) },
    ] {
        let model = UniGs::new(cfg, 0).unwrap();
        let mut bytes = Vec::new();
        for views in 1..=6 {
            let (set, stats) = model.reconstruct(&s.input_batch(Some(views)).unwrap()).unwrap();
            assert_eq!(set.len(), 64);
            assert_eq!(stats.n_gaussians, 64);
            set.validate().unwrap();
            bytes.push((stats.query_bytes, stats.gaussian_bytes, stats.kv_bytes));
        }
        assert!(bytes.windows(2).all(|w| w[0] == w[1]), "{bytes:?}");
    }
}

#[test]
fn ablation_switches_change_the_output() {
    let batch = scene(3).input_batch(None).unwrap();
    let run = |cfg: DecoderConfig| {
        let mut model = UniGs::new(cfg, 9).unwrap();
        perturb_heads(&mut model);
        model.reconstruct(&batch).unwrap()
    };
    let (full, fs) = run(tiny(48));
    let (no_mvdfa, _) = run(DecoderConfig { use_mvdfa: false, ..tiny(48) });
    let (no_sesa, ns) = run(DecoderConfig { use_sesa: false, ..tiny(48) });
    assert_eq!(ns.kv_bytes, 0);
    assert!(fs.kv_bytes > 0);
    let centers = |s: &unigs::gaussian::GaussianSet| s.gaussians.iter().map(|g| g.center).collect::<Vec<_>>();
    assert_ne!(centers(&full), centers(&no_mvdfa));
    assert_ne!(centers(&full), centers(&no_sesa));
}

#[test]
fn sesa_key_count_follows_rate() {
    let model = |rate| UniGs::new(DecoderConfig { sesa_rate: rate, ..tiny(80) }, 0).unwrap();
    let batch = scene(2).input_batch(None).unwrap();
    let (_, a) = model(0.05).reconstruct(&batch).unwrap();
    let (_, b) = model(0.5).reconstruct(&batch).unwrap();
    assert_eq!(b.kv_bytes, a.kv_bytes * num_keys(80, 0.5).unwrap() / num_keys(80, 0.05).unwrap());
    assert!(num_keys(80, 0.0).is_err());
}

#[test]
fn gradients_reach_every_stage_and_are_finite() {
    let s = scene(2);
    let mut model = UniGs::new(tiny(48), 4).unwrap();
    perturb_heads(&mut model);
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let out = model.forward(&p, &s.input_batch(None).unwrap()).unwrap();
    let v = s.split(Split::Input)[0];
    let img = render_var(&out.gaussians, &v.camera, [0.0; 3]).unwrap();
    let loss = total_loss(img, &v.image, &LossConfig::default()).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut touched = Vec::new();
    for (id, &var) in model.params.ids().zip(p.vars()) {
        if let Some(g) = grads.get(var) {
            assert!(g.is_finite(), "{}", model.params.name(id));
            if g.data().iter().any(|&x| x != 0.0) {
                touched.push(model.params.name(id).to_string());
            }
        }
    }
    for prefix in ["encoder.down1", "encoder.cross", "coarse.", "layer0.mvdfa", "layer0.sesa", "layer1.head"] {
        assert!(touched.iter().any(|n| n.starts_with(prefix)), "no gradient reaches {prefix}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fps_matches_exhaustive_greedy(
        pts in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..40),
        k_frac in 0.0f64..1.0,
        start_frac in 0.0f64..1.0,
    ) {
        let n = pts.len();
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let start = ((n - 1) as f64 * start_frac) as usize;
        let sel = fps(&pts, k, start).unwrap();
        prop_assert_eq!(sel.indices, fps_exhaustive(&pts, k, start));
    }

    #[test]
    fn key_count_is_monotone_in_rate(n in 1usize..2000, a in 0.001f64..1.0, b in 0.001f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (kl, kh) = (num_keys(n, lo).unwrap(), num_keys(n, hi).unwrap());
        prop_assert!(1 <= kl && kl <= kh && kh <= n);
    }
}

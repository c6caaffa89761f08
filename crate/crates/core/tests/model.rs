#![allow(clippy::field_reassign_with_default)]

use stitchlab_core::config::RunConfig;
use stitchlab_core::encoder::FeatureBundle;
use stitchlab_core::model::{GenerationRequest, Model};
use stitchlab_core::modulation::ModulationTape;
use stitchlab_core::nn::{gaussian_vec, uniform_tensor};
use stitchlab_core::pipeline::{self, LoadedDataset};
use stitchlab_core::synth::ShapeId;
use stitchlab_core::{Error, ModulationConfig, ModulationNet, Seed, TokenSequence};

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 21;
    cfg.dataset.train = 12;
    cfg.dataset.test = 6;
    cfg.diffusion.steps = 20;
    cfg.loss.ocr_gate_t = 4;
    cfg.prior.high_noise_t = 16;
    cfg.train.steps = 4;
    cfg.train.batch_size = 2;
    cfg.eval.pairings = 2;
    cfg.eval.samples_per_pairing = 1;
    cfg
}

fn trained() -> (tempfile::TempDir, LoadedDataset, Model) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    pipeline::make_dataset(&cfg, dir.path()).unwrap();
    let data = LoadedDataset::load(dir.path()).unwrap();
    let (model, summary) = pipeline::train_model(&cfg, &data, None).unwrap();
    assert_eq!(summary.steps, 4);
    (dir, data, model)
}

fn request(data: &LoadedDataset, seed: u64) -> GenerationRequest {
    let s = data
        .test
        .iter()
        .find(|s| !s.mask.is_empty())
        .expect("a visible test scene");
    GenerationRequest {
        background: s.image.clone(),
        mask: s.mask.clone(),
        seed,
        prior: tiny_config().prior,
    }
}

#[test]
fn modulation_gradients_match_finite_differences() {
    let cfg = ModulationConfig {
        time_dim: 8,
        embed_hidden: 7,
        ssvm_hidden: 6,
        fwvm_hidden: 5,
        favm_hidden: 4,
        token_dim: 3,
        mod_alpha: 0.7,
        mod_beta: 1.2,
    };
    let mut net = ModulationNet::new(&cfg, Seed(5)).unwrap();
    let mut rng = Seed(6).rng();
    let ids: Vec<_> = net.params().ids().collect();
    for &id in &ids {
        let shape = net.params().get(id).shape().to_vec();
        let noise = uniform_tensor(&shape, 0.4, &mut rng);
        net.params_mut().get_mut(id).add_assign(&noise);
    }
    let mut mk = || TokenSequence::new(4, 3, gaussian_vec(12, &mut rng)).unwrap();
    let bundle = FeatureBundle {
        rgb: mk(),
        hf: mk(),
        texture: mk(),
    };
    let upstream = mk();
    let objective = |net: &ModulationNet| -> f64 {
        let out = net.modulate(&bundle, &net.embed_timestep(321)).unwrap();
        out.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum()
    };
    let mut tape = ModulationTape::new(&net);
    tape.forward(&bundle, 321).unwrap();
    let grads = tape.gradients(&upstream).unwrap();
    let h = 1e-3;
    for (k, &id) in ids.iter().enumerate() {
        let g = grads.params[k].as_ref().expect("every parameter feeds the output");
        for idx in 0..net.params().get(id).len() {
            let orig = net.params().get(id).data()[idx];
            net.params_mut().get_mut(id).data_mut()[idx] = orig + h;
            let up = objective(&net);
            net.params_mut().get_mut(id).data_mut()[idx] = orig - h;
            let down = objective(&net);
            net.params_mut().get_mut(id).data_mut()[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = g.data()[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel <= 1e-4, "{}[{idx}]: fd {fd} analytic {an}", net.params().name(id));
        }
    }
}

#[test]
fn sampling_needs_training_and_keeps_the_background() {
    let (_dir, data, model) = trained();
    let fresh = Model::new(&model.cfg).unwrap();
    let req = request(&data, 1);
    let bundles = data.bundles(&model).unwrap();
    let cond = &bundles[&ShapeId::ALL[0]];
    assert!(matches!(
        fresh.sample(std::slice::from_ref(&req), &[cond]),
        Err(Error::State(_))
    ));

    let out = model.sample(std::slice::from_ref(&req), &[cond]).unwrap();
    assert_eq!(pipeline::background_max_diff(&out[0], &req.background, &req.mask), 0.0);
    assert!(out[0].data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn swapping_the_condition_changes_the_composite() {
    let (_dir, data, model) = trained();
    let bundles = data.bundles(&model).unwrap();
    let req = request(&data, 2);
    let a = model
        .sample(std::slice::from_ref(&req), &[&bundles[&ShapeId::ALL[0]]])
        .unwrap();
    let b = model
        .sample(std::slice::from_ref(&req), &[&bundles[&ShapeId::ALL[3]]])
        .unwrap();
    let mut changed = 0usize;
    for y in 0..req.mask.height() {
        for x in 0..req.mask.width() {
            if req.mask.get(y, x) && (0..3).any(|c| a[0].get(y, x, c) != b[0].get(y, x, c)) {
                changed += 1;
            }
        }
    }
    assert!(changed > 0, "condition had no effect on the foreground");
}

#[test]
fn checkpoints_reload_to_the_same_sampler() {
    let (dir, data, model) = trained();
    let ckpt = dir.path().join("ckpt");
    model.save(&ckpt).unwrap();
    let back = Model::load(&ckpt).unwrap();
    assert_eq!(back.trained_steps, model.trained_steps);
    assert_eq!(back.cfg, model.cfg);
    let req = request(&data, 3);
    let b1 = data.bundles(&model).unwrap();
    let b2 = data.bundles(&back).unwrap();
    let shape = ShapeId::ALL[2];
    assert_eq!(b1[&shape], b2[&shape]);
    let x = model.sample(std::slice::from_ref(&req), &[&b1[&shape]]).unwrap();
    let y = back.sample(std::slice::from_ref(&req), &[&b2[&shape]]).unwrap();
    assert_eq!(x, y);
}

#[test]
fn invalid_configs_report_every_problem() {
    let mut cfg = tiny_config();
    cfg.train.batch_size = 0;
    cfg.loss.ocr_gate_t = 500;
    cfg.modulation.token_dim = 10;
    match cfg.validate() {
        Err(Error::Config(list)) => assert_eq!(list.len(), 3, "{list:?}"),
        other => panic!("expected config error, got {other:?}"),
    }
}

//! The full composition model: frozen condition encoder, modulation network,
//! denoiser and schedule, with training, sampling and checkpoints.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::diffusion::{denoiser_input, Denoiser, NoiseSchedule, INPUT_CHANNELS};
use crate::encoder::{encode_reference_set, ConditionEncoder, FeatureBundle, TokenSequence};
use crate::error::{Error, Result};
use crate::image::{Image, Mask, ReferenceSet};
use crate::losses::{batch_loss, LossBatch, LossReport, OcrSurrogate};
use crate::modulation::ModulationNet;
use crate::nn::{gaussian_vec, Adam, Bound, Graph, Tensor, Var};
use crate::prior::{fuse_inference, fuse_training, PriorConfig};
use crate::seed::{Rng, Seed};
use crate::tensorfile;

pub const WEIGHTS: &str = "weights.bin";
pub const MANIFEST: &str = "manifest.json";
/// Approximate pixel standard deviation of the toy scenes.
pub const SIGMA_DATA: f64 = 0.2;

/// One training example: the ground-truth composite, its foreground mask,
/// the condition of its component and the text flag.
#[derive(Clone, Debug)]
pub struct TrainItem<'a> {
    pub scene: &'a Image,
    pub mask: &'a Mask,
    pub cond: &'a FeatureBundle,
    pub has_text: bool,
}

/// Noised inputs and targets for one step, fixed so the objective can be
/// re-evaluated (finite differences).
#[derive(Clone, Debug)]
pub struct PreparedBatch<'a> {
    pub items: Vec<TrainItem<'a>>,
    pub ts: Vec<usize>,
    pub inputs: Tensor,
    pub eps: Tensor,
    pub x_t: Tensor,
    pub x0: Tensor,
}

pub struct Objective {
    pub graph: Graph,
    pub total: Var,
    pub denoiser: Bound,
    pub modulation: Option<Bound>,
    pub reports: Vec<LossReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRequest {
    pub background: Image,
    pub mask: Mask,
    pub seed: u64,
    pub prior: PriorConfig,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: RunConfig,
    pub schedule: NoiseSchedule,
    pub encoder: ConditionEncoder,
    pub modulation: ModulationNet,
    pub denoiser: Denoiser,
    pub surrogate: OcrSurrogate,
    pub trained_steps: u64,
    /// Condition standardization fitted on the training reference sets.
    pub cond_norm: Option<CondNorm>,
}

/// Per-stream centring on the mean over reference sets, then scaling to unit
/// RMS. Without it the class-specific part of the encoder tokens is a small
/// fraction of a shared component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondNorm {
    pub mean: [Vec<f64>; 3],
    pub scale: [f64; 3],
}

impl CondNorm {
    /// `None` when fewer than two distinct bundles are given.
    pub fn fit(bundles: &[&FeatureBundle]) -> Result<Option<CondNorm>> {
        let Some(first) = bundles.first() else {
            return Ok(None);
        };
        let (n, d) = first.check()?;
        let len = n * d;
        let mut mean: [Vec<f64>; 3] = Default::default();
        let mut scale = [1.0; 3];
        for k in 0..3 {
            let mut m = vec![0.0; len];
            for b in bundles {
                if b.check()? != (n, d) {
                    return Err(Error::Shape("bundles differ in token shape".into()));
                }
                for (acc, v) in m.iter_mut().zip(b.streams()[k].data()) {
                    *acc += v / bundles.len() as f64;
                }
            }
            let ss: f64 = bundles
                .iter()
                .flat_map(|b| b.streams()[k].data().iter().zip(&m).map(|(v, mu)| (v - mu) * (v - mu)))
                .sum();
            let rms = (ss / (bundles.len() * len) as f64).sqrt();
            if rms < 1e-9 {
                return Ok(None);
            }
            scale[k] = 1.0 / rms;
            mean[k] = m;
        }
        Ok(Some(CondNorm { mean, scale }))
    }

    pub fn apply(&self, bundle: &FeatureBundle) -> Result<FeatureBundle> {
        let (n, d) = bundle.check()?;
        if self.mean[0].len() != n * d {
            return Err(Error::Shape(format!(
                "condition normalizer fitted for {} values, got {}",
                self.mean[0].len(),
                n * d
            )));
        }
        let norm = |k: usize, t: &TokenSequence| {
            let data = t
                .data()
                .iter()
                .zip(&self.mean[k])
                .map(|(v, m)| (v - m) * self.scale[k])
                .collect();
            TokenSequence::new(n, d, data)
        };
        Ok(FeatureBundle {
            rgb: norm(0, &bundle.rgb)?,
            hf: norm(1, &bundle.hf)?,
            texture: norm(2, &bundle.texture)?,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: RunConfig,
    trained_steps: u64,
    cond_norm: Option<CondNorm>,
}

fn stack(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Input("empty batch".into()))?;
    let (h, w, c) = (first.height(), first.width(), first.channels());
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if img.height() != h || img.width() != w || img.channels() != c {
            return Err(Error::Shape("batch images differ in shape".into()));
        }
        data.extend(img.to_planar());
    }
    Tensor::new(&[images.len(), c, h, w], data)
}

pub fn gaussian_image(h: usize, w: usize, c: usize, rng: &mut Rng) -> Image {
    Image::from_vec(h, w, c, gaussian_vec(h * w * c, rng)).expect("sized")
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let root = Seed(cfg.seed).child("model");
        let encoder = ConditionEncoder::new(&cfg.encoder)?;
        Ok(Model {
            schedule: NoiseSchedule::new(&cfg.diffusion)?,
            modulation: ModulationNet::new(&cfg.modulation, root)?,
            denoiser: Denoiser::new(&cfg.denoiser, encoder.dim(), root)?,
            surrogate: OcrSurrogate::new(Seed(cfg.loss.ocr_seed)),
            encoder,
            cfg: cfg.clone(),
            trained_steps: 0,
            cond_norm: None,
        })
    }

    /// Encoded reference set, standardized once a normalizer is fitted.
    pub fn bundle(&self, refs: &ReferenceSet) -> Result<FeatureBundle> {
        let raw = encode_reference_set(refs, &self.encoder, &self.cfg.features, self.cfg.components.decouple)?;
        match &self.cond_norm {
            Some(n) => n.apply(&raw),
            None => Ok(raw),
        }
    }

    /// Fits the condition normalizer on the reference sets of every class.
    pub fn fit_condition(&mut self, sets: &[&ReferenceSet]) -> Result<()> {
        self.cond_norm = None;
        let raw = sets.iter().map(|r| self.bundle(r)).collect::<Result<Vec<_>>>()?;
        self.cond_norm = CondNorm::fit(&raw.iter().collect::<Vec<_>>())?;
        Ok(())
    }

    /// Noisy channels are rescaled to roughly unit variance at every timestep.
    fn input_for(&self, x_t: &Image, bg: &Image, mask: &Mask, t: usize) -> Result<Vec<f64>> {
        let mut v = denoiser_input(x_t, bg, mask)?;
        let (a, s) = self.schedule.coefs(t);
        let c = SIGMA_DATA / (s * s + SIGMA_DATA * SIGMA_DATA * a * a).sqrt();
        let hw = x_t.height() * x_t.width();
        for x in &mut v[..3 * hw] {
            *x *= c;
        }
        Ok(v)
    }

    /// `[B, N, D]` condition tokens for the given timesteps.
    pub fn condition(
        &self,
        g: &mut Graph,
        modp: Option<&Bound>,
        conds: &[&FeatureBundle],
        ts: &[usize],
    ) -> Result<Var> {
        let (n, d) = conds
            .first()
            .ok_or_else(|| Error::Input("empty batch".into()))?
            .check()?;
        let b = conds.len();
        if self.cfg.components.time_modulation {
            let p = modp.ok_or_else(|| Error::State("modulation parameters not bound".into()))?;
            let mut streams = Vec::with_capacity(3);
            for k in 0..3 {
                let mut data = Vec::with_capacity(b * n * d);
                for c in conds {
                    if c.check()? != (n, d) {
                        return Err(Error::Shape("conditions differ in token shape".into()));
                    }
                    data.extend_from_slice(c.streams()[k].data());
                }
                streams.push(g.constant(Tensor::new(&[b, n, d], data)?));
            }
            let v = self
                .modulation
                .forward(g, p, [streams[0], streams[1], streams[2]], ts)?;
            Ok(v.out)
        } else {
            let mut data = Vec::with_capacity(b * n * d);
            for c in conds {
                data.extend_from_slice(c.mean().data());
            }
            Ok(g.constant(Tensor::new(&[b, n, d], data)?))
        }
    }

    /// Draws timesteps and noise for `items`, applying the training-time prior.
    pub fn prepare_batch<'a>(&self, items: Vec<TrainItem<'a>>, rng: &mut Rng) -> Result<PreparedBatch<'a>> {
        if items.is_empty() {
            return Err(Error::Input("training batch is empty".into()));
        }
        let steps = self.schedule.steps();
        let mut ts = Vec::with_capacity(items.len());
        let mut eps = Vec::with_capacity(items.len());
        let mut xts = Vec::with_capacity(items.len());
        let mut inputs = Vec::new();
        for it in &items {
            let t = rng.random_range(0..steps);
            let (h, w) = (it.scene.height(), it.scene.width());
            let noise = gaussian_image(h, w, 3, rng);
            let e = fuse_training(&noise, it.scene, it.mask, &self.cfg.prior, t, &self.cfg.features)?;
            let x_t = self.schedule.q_sample(it.scene, t, &e)?;
            inputs.extend(self.input_for(&x_t, it.scene, it.mask, t)?);
            ts.push(t);
            eps.push(e);
            xts.push(x_t);
        }
        let first = items[0].scene;
        let (h, w) = (first.height(), first.width());
        let x0 = stack(&items.iter().map(|i| i.scene).collect::<Vec<_>>())?;
        Ok(PreparedBatch {
            inputs: Tensor::new(&[items.len(), INPUT_CHANNELS, h, w], inputs)?,
            eps: stack(&eps.iter().collect::<Vec<_>>())?,
            x_t: stack(&xts.iter().collect::<Vec<_>>())?,
            x0,
            ts,
            items,
        })
    }

    pub fn objective(&self, batch: &PreparedBatch, trainable: bool) -> Result<Objective> {
        let mut g = Graph::new();
        let den = self.denoiser.params().bind(&mut g, trainable);
        let modp = self
            .cfg
            .components
            .time_modulation
            .then(|| self.modulation.params().bind(&mut g, trainable));
        let conds: Vec<&FeatureBundle> = batch.items.iter().map(|i| i.cond).collect();
        let cond = self.condition(&mut g, modp.as_ref(), &conds, &batch.ts)?;
        let x = g.constant(batch.inputs.clone());
        let eps_hat = self.denoiser.forward(&mut g, &den, x, &batch.ts, cond)?;
        let masks: Vec<Mask> = batch.items.iter().map(|i| i.mask.clone()).collect();
        let has_text: Vec<bool> = batch.items.iter().map(|i| i.has_text).collect();
        let lb = LossBatch {
            eps: &batch.eps,
            x_t: &batch.x_t,
            x0: &batch.x0,
            masks: &masks,
            ts: &batch.ts,
            has_text: &has_text,
        };
        let (total, reports) = batch_loss(&mut g, eps_hat, &lb, &self.cfg.loss, &self.schedule, &self.surrogate)?;
        Ok(Objective {
            graph: g,
            total,
            denoiser: den,
            modulation: modp,
            reports,
        })
    }

    pub fn trainer(&self) -> Trainer {
        Trainer {
            denoiser: Adam::new(self.denoiser.params(), self.cfg.train.lr),
            modulation: Adam::new(self.modulation.params(), self.cfg.train.lr),
            rng: Seed(self.cfg.seed).child("train").rng(),
        }
    }

    /// One optimizer step on `items`; returns per-item loss reports.
    pub fn train_step(&mut self, items: Vec<TrainItem>, trainer: &mut Trainer) -> Result<Vec<LossReport>> {
        let batch = self.prepare_batch(items, &mut trainer.rng)?;
        let obj = self.objective(&batch, true)?;
        let mut grads = obj.graph.backward(obj.total);
        let dg = obj.denoiser.collect(&mut grads);
        trainer.denoiser.update(self.denoiser.params_mut(), &dg);
        if let Some(mp) = &obj.modulation {
            let mg = mp.collect(&mut grads);
            trainer.modulation.update(self.modulation.params_mut(), &mg);
        }
        self.trained_steps += 1;
        Ok(obj.reports)
    }

    /// Ancestral sampling for a batch of requests sharing the loop.
    pub fn sample(&self, reqs: &[GenerationRequest], conds: &[&FeatureBundle]) -> Result<Vec<Image>> {
        if self.trained_steps == 0 {
            return Err(Error::State("model has not been trained".into()));
        }
        if reqs.is_empty() || reqs.len() != conds.len() {
            return Err(Error::Input("one condition per request is required".into()));
        }
        let (h, w) = (reqs[0].background.height(), reqs[0].background.width());
        let hw = h * w;
        let per = 3 * hw;
        let steps = self.schedule.steps();
        let mut rngs = Vec::with_capacity(reqs.len());
        let mut xs = Vec::with_capacity(reqs.len());
        let mut bgs = Vec::with_capacity(reqs.len());
        for r in reqs {
            if r.background.height() != h || r.background.width() != w || r.background.channels() != 3 {
                return Err(Error::Shape("requests must share one RGB frame size".into()));
            }
            if !r.mask.matches(&r.background) {
                return Err(Error::Shape("mask does not match background".into()));
            }
            r.prior.validate(steps)?;
            let mut rng = Seed(r.seed).child("sample").rng();
            let noise = gaussian_image(h, w, 3, &mut rng);
            let init = fuse_inference(&noise, &r.background, &r.mask, &r.prior, &self.cfg.features)?;
            let x = self.schedule.q_sample(&r.background, steps - 1, &init)?;
            xs.push(x.to_planar());
            bgs.push(r.background.to_planar());
            rngs.push(rng);
        }
        let b = reqs.len();
        let (n, d) = conds[0].check()?;
        for t in (0..steps).rev() {
            let ts = vec![t; b];
            let mut g = Graph::new();
            let modp = self
                .cfg
                .components
                .time_modulation
                .then(|| self.modulation.params().bind(&mut g, false));
            let cond = self.condition(&mut g, modp.as_ref(), conds, &ts)?;
            let cond = g.value(cond).clone();
            debug_assert_eq!(cond.shape(), &[b, n, d]);
            let mut input = Vec::with_capacity(b * INPUT_CHANNELS * hw);
            for (i, r) in reqs.iter().enumerate() {
                let x = Image::from_planar(h, w, 3, &xs[i])?;
                input.extend(self.input_for(&x, &r.background, &r.mask, t)?);
            }
            let eps = self
                .denoiser
                .predict(Tensor::new(&[b, INPUT_CHANNELS, h, w], input)?, &ts, cond)?;
            let (a, s) = self.schedule.coefs(t);
            let (c0, ct, var) = self.schedule.posterior(t);
            let sd = var.sqrt();
            let (na, ns) = if t > 0 { self.schedule.coefs(t - 1) } else { (1.0, 0.0) };
            for i in 0..b {
                let z = gaussian_vec(per, &mut rngs[i]);
                let zb = gaussian_vec(per, &mut rngs[i]);
                let e = &eps.data()[i * per..(i + 1) * per];
                let mask = reqs[i].mask.data();
                for k in 0..per {
                    let x0 = ((xs[i][k] - s * e[k]) / a).clamp(0.0, 1.0);
                    let mean = c0 * x0 + ct * xs[i][k];
                    xs[i][k] = if mask[k % hw] == 1 {
                        if t > 0 {
                            mean + sd * z[k]
                        } else {
                            mean
                        }
                    } else if t > 0 {
                        na * bgs[i][k] + ns * zb[k]
                    } else {
                        bgs[i][k]
                    };
                }
            }
        }
        xs.iter()
            .map(|x| Ok(Image::from_planar(h, w, 3, x)?.clamp01()))
            .collect()
    }

    /// Rounds trainable weights to the stored precision, so in-memory and
    /// reloaded models agree exactly.
    pub fn round_weights(&mut self) {
        tensorfile::round_to_f32(self.modulation.params_mut());
        tensorfile::round_to_f32(self.denoiser.params_mut());
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (bytes, mut manifest) =
            tensorfile::encode(self.modulation.params().iter().chain(self.denoiser.params().iter()));
        manifest.meta = serde_json::to_value(CheckpointMeta {
            config: self.cfg.clone(),
            trained_steps: self.trained_steps,
            cond_norm: self.cond_norm.clone(),
        })?;
        let bin = dir.join(WEIGHTS);
        fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let mpath = dir.join(MANIFEST);
        fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (tensors, manifest) = tensorfile::read(&dir.join(WEIGHTS), &dir.join(MANIFEST))?;
        let meta: CheckpointMeta =
            serde_json::from_value(manifest.meta).map_err(|e| Error::format(dir.join(MANIFEST), e.to_string()))?;
        let mut model = Model::new(&meta.config)?;
        let nm = model.modulation.params().len();
        if tensors.len() < nm {
            return Err(Error::format(dir.join(WEIGHTS), "too few tensors"));
        }
        let mut tensors = tensors;
        let den = tensors.split_off(nm);
        model.modulation.params_mut().load_from(tensors)?;
        model.denoiser.params_mut().load_from(den)?;
        model.trained_steps = meta.trained_steps;
        model.cond_norm = meta.cond_norm;
        Ok(model)
    }
}

pub struct Trainer {
    pub denoiser: Adam,
    pub modulation: Adam,
    pub rng: Rng,
}

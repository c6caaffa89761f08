//! End-to-end commands: dataset generation, training, generation,
//! evaluation and the component ablation.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::encoder::FeatureBundle;
use crate::error::{Error, Result};
use crate::eval::{self, ClassifyReport};
use crate::image::{Image, Mask};
use crate::losses::LossLogLine;
use crate::model::{GenerationRequest, Model, TrainItem};
use crate::seed::Seed;
use crate::synth::{self, DatasetManifest, Sample, ShapeId, Split};

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const TRAIN_SUMMARY: &str = "train_summary.json";
pub const ABLATION_HEADER: [&str; 4] = ["config", "identity_sim", "masked_ssim", "masked_perceptual"];

pub fn make_dataset(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let m = synth::build_dataset(out, &cfg.dataset, cfg.seed)?;
    info!("wrote {} scenes to {}", m.items.len(), out.display());
    Ok(out.join(synth::MANIFEST))
}

/// Dataset with decoded images and per-component conditions.
pub struct LoadedDataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl LoadedDataset {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(root)?;
        Ok(LoadedDataset {
            train: synth::load_split(root, &manifest, Split::Train)?,
            test: synth::load_split(root, &manifest, Split::Test)?,
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn bundles(&self, model: &Model) -> Result<BTreeMap<ShapeId, FeatureBundle>> {
        let mut out = BTreeMap::new();
        for shape in ShapeId::ALL {
            let refs = self.manifest.reference_set(&self.root, shape)?;
            out.insert(shape, model.bundle(&refs)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub window: usize,
    pub first_window_loss: f64,
    pub last_window_loss: f64,
    pub final_loss: f64,
    /// Mean step loss per step.
    pub curve: Vec<f64>,
}

impl TrainSummary {
    pub fn reduction(&self) -> f64 {
        1.0 - self.last_window_loss / self.first_window_loss
    }
}

/// Trains a fresh model on the foreground-bearing training scenes. Log lines
/// go to `log` when given.
pub fn train_model(
    cfg: &RunConfig,
    data: &LoadedDataset,
    mut log: Option<&mut dyn std::io::Write>,
) -> Result<(Model, TrainSummary)> {
    let mut model = Model::new(cfg)?;
    let refs = ShapeId::ALL
        .iter()
        .map(|&s| data.manifest.reference_set(&data.root, s))
        .collect::<Result<Vec<_>>>()?;
    model.fit_condition(&refs.iter().collect::<Vec<_>>())?;
    let bundles = data.bundles(&model)?;
    let pool: Vec<&Sample> = data.train.iter().filter(|s| !s.mask.is_empty()).collect();
    if pool.is_empty() {
        return Err(Error::Input("no training scenes with a foreground".into()));
    }
    let mut trainer = model.trainer();
    let mut pick = Seed(cfg.seed).child("batches").rng();
    let mut curve = Vec::with_capacity(cfg.train.steps);
    for step in 0..cfg.train.steps {
        let items: Vec<TrainItem> = (0..cfg.train.batch_size)
            .map(|_| {
                let s = pool[pick.random_range(0..pool.len())];
                TrainItem {
                    scene: &s.image,
                    mask: &s.mask,
                    cond: &bundles[&s.shape()],
                    has_text: s.record.has_text,
                }
            })
            .collect();
        let reports = model.train_step(items, &mut trainer)?;
        let mean = reports.iter().map(|r| r.l_total).sum::<f64>() / reports.len() as f64;
        curve.push(mean);
        if let Some(w) = log.as_deref_mut() {
            for r in &reports {
                let line = serde_json::to_string(&LossLogLine::new(step, r))?;
                writeln!(w, "{line}").map_err(|e| Error::io(TRAIN_LOG, e))?;
            }
        }
        if step % 50 == 0 || step + 1 == cfg.train.steps {
            info!("step {step} loss {mean:.5}");
        }
    }
    model.round_weights();
    let window = curve.len().clamp(1, 50);
    let avg = |s: &[f64]| {
        if s.is_empty() {
            f64::NAN
        } else {
            s.iter().sum::<f64>() / s.len() as f64
        }
    };
    let summary = TrainSummary {
        steps: curve.len(),
        window,
        first_window_loss: avg(&curve[..window.min(curve.len())]),
        last_window_loss: avg(&curve[curve.len().saturating_sub(window)..]),
        final_loss: curve.last().copied().unwrap_or(f64::NAN),
        curve,
    };
    Ok((model, summary))
}

/// Trains and writes the checkpoint, log and summary into `out`.
pub fn train(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<TrainSummary> {
    let data = LoadedDataset::load(dataset)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(TRAIN_LOG);
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let (model, summary) = train_model(cfg, &data, Some(&mut w))?;
    w.flush().map_err(|e| Error::io(&log_path, e))?;
    model.save(out)?;
    let spath = out.join(TRAIN_SUMMARY);
    fs::write(&spath, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&spath, e))?;
    Ok(summary)
}

/// Composites the referenced component into `background` inside `mask`.
pub fn generate(
    checkpoint: &Path,
    background: &Path,
    mask: &Path,
    refs: &Path,
    seed: u64,
    out: &Path,
) -> Result<PathBuf> {
    let model = Model::load(checkpoint)?;
    let bg = Image::load_png(background)?.to_rgb();
    let mask = Mask::load_png(mask)?;
    let refs = synth::load_reference_views(refs)?;
    let cond = model.bundle(&refs)?;
    let req = crate::model::GenerationRequest {
        background: bg,
        mask,
        seed,
        prior: model.cfg.prior.clone(),
    };
    let img = model.sample(&[req], &[&cond])?.remove(0);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_png(out)?;
    Ok(out.to_path_buf())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub seed: u64,
    pub identity_sim: f64,
    pub identity_sim_tokenwise: f64,
    pub masked_ssim: f64,
    pub masked_perceptual: f64,
    /// Largest change of any background pixel.
    pub background_max_diff: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub identity_sim: f64,
    pub identity_sim_tokenwise: f64,
    pub masked_ssim: f64,
    pub masked_perceptual: f64,
}

impl Scores {
    fn mean<'a>(items: impl IntoIterator<Item = &'a Scores>) -> Scores {
        let mut acc = Scores::default();
        let mut n = 0.0;
        for s in items {
            acc.identity_sim += s.identity_sim;
            acc.identity_sim_tokenwise += s.identity_sim_tokenwise;
            acc.masked_ssim += s.masked_ssim;
            acc.masked_perceptual += s.masked_perceptual;
            n += 1.0;
        }
        Scores {
            identity_sim: acc.identity_sim / n,
            identity_sim_tokenwise: acc.identity_sim_tokenwise / n,
            masked_ssim: acc.masked_ssim / n,
            masked_perceptual: acc.masked_perceptual / n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairingReport {
    pub scene: usize,
    pub shape: ShapeId,
    pub samples: Vec<SampleScores>,
    pub mean: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownstreamReport {
    /// Training accuracy of the closed-form ridge fit on the real test features.
    pub separability: f64,
    pub classifier: ClassifyReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub samples_per_pairing: usize,
    pub pairings: Vec<PairingReport>,
    pub aggregate: Scores,
    pub downstream: Option<DownstreamReport>,
}

/// Test scenes with a visible part, interleaved across classes.
pub fn select_pairings(test: &[Sample], count: usize) -> Vec<&Sample> {
    let mut by_class: Vec<Vec<&Sample>> = ShapeId::ALL
        .iter()
        .map(|&c| test.iter().filter(|s| s.shape() == c && !s.mask.is_empty()).collect())
        .collect();
    for v in &mut by_class {
        v.reverse();
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let before = out.len();
        for v in &mut by_class {
            if out.len() < count {
                if let Some(s) = v.pop() {
                    out.push(s);
                }
            }
        }
        if out.len() == before {
            break;
        }
    }
    out
}

pub fn sample_seed(run_seed: u64, pairing: usize, k: usize, per: usize) -> u64 {
    Seed(run_seed).child("eval").index((pairing * per + k) as u64).0
}

/// Generates `samples_per_pairing` composites per pairing and scores them.
/// With `downstream`, a classifier is trained on the composites and tested
/// on the remaining visible test scenes.
const SAMPLE_CHUNK: usize = 8;

pub fn evaluate_model(model: &Model, data: &LoadedDataset, downstream: bool) -> Result<EvalReport> {
    let ec = &model.cfg.eval;
    let pairings = select_pairings(&data.test, ec.pairings);
    if pairings.is_empty() {
        return Err(Error::Input("no test scenes with a visible part".into()));
    }
    let bundles = data.bundles(model)?;
    let mut refs = BTreeMap::new();
    for shape in ShapeId::ALL {
        refs.insert(shape, data.manifest.reference_set(&data.root, shape)?);
    }
    let per = ec.samples_per_pairing;
    let mut reqs = Vec::with_capacity(pairings.len() * per);
    let mut conds = Vec::with_capacity(reqs.capacity());
    for (p, s) in pairings.iter().enumerate() {
        for k in 0..per {
            reqs.push(GenerationRequest {
                background: s.image.clone(),
                mask: s.mask.clone(),
                seed: sample_seed(model.cfg.seed, p, k, per),
                prior: model.cfg.prior.clone(),
            });
            conds.push(&bundles[&s.shape()]);
        }
    }
    info!("sampling {} composites", reqs.len());
    let mut images = Vec::with_capacity(reqs.len());
    for (r, c) in reqs.chunks(SAMPLE_CHUNK).zip(conds.chunks(SAMPLE_CHUNK)) {
        images.extend(model.sample(r, c)?);
    }
    let mut reports = Vec::with_capacity(pairings.len());
    let mut train_feats = Vec::with_capacity(images.len());
    for (p, s) in pairings.iter().enumerate() {
        let mut samples = Vec::with_capacity(per);
        for k in 0..per {
            let i = p * per + k;
            let img = &images[i];
            let ids = eval::identity_scores(img, &s.mask, &refs[&s.shape()], &model.encoder)?;
            let (ssim, perceptual) = eval::masked_background_metrics(img, &s.image, &s.mask, &model.encoder)?;
            samples.push(SampleScores {
                seed: reqs[i].seed,
                identity_sim: ids.iter().map(|v| v.0).sum::<f64>() / ids.len() as f64,
                identity_sim_tokenwise: ids.iter().map(|v| v.1).sum::<f64>() / ids.len() as f64,
                masked_ssim: ssim,
                masked_perceptual: perceptual,
                background_max_diff: background_max_diff(img, &s.image, &s.mask),
            });
            if downstream {
                train_feats.push((
                    eval::classifier_features(img, &s.mask, &model.encoder)?,
                    s.shape().label(),
                ));
            }
        }
        let scores: Vec<Scores> = samples.iter().map(SampleScores::scores).collect();
        reports.push(PairingReport {
            scene: s.record.id,
            shape: s.shape(),
            mean: Scores::mean(&scores),
            samples,
        });
    }
    let aggregate = Scores::mean(reports.iter().map(|r| &r.mean));
    let downstream = if downstream {
        let used: Vec<usize> = pairings.iter().map(|s| s.record.id).collect();
        let test: Vec<(Vec<f64>, usize)> = data
            .test
            .iter()
            .filter(|s| !s.mask.is_empty() && !used.contains(&s.record.id))
            .map(|s| {
                Ok((
                    eval::classifier_features(&s.image, &s.mask, &model.encoder)?,
                    s.shape().label(),
                ))
            })
            .collect::<Result<_>>()?;
        let classes = ShapeId::ALL.len();
        let separability = eval::separability_accuracy(&test, classes, 1e-6)?;
        let classifier =
            eval::downstream_classify(&train_feats, &test, classes, ec.classifier_epochs, ec.classifier_lr)?;
        info!(
            "downstream accuracy {:.3} (separability {:.3})",
            classifier.accuracy, separability
        );
        Some(DownstreamReport {
            separability,
            classifier,
        })
    } else {
        None
    };
    Ok(EvalReport {
        seed: model.cfg.seed,
        samples_per_pairing: per,
        pairings: reports,
        aggregate,
        downstream,
    })
}

impl SampleScores {
    fn scores(&self) -> Scores {
        Scores {
            identity_sim: self.identity_sim,
            identity_sim_tokenwise: self.identity_sim_tokenwise,
            masked_ssim: self.masked_ssim,
            masked_perceptual: self.masked_perceptual,
        }
    }
}

pub fn background_max_diff(generated: &Image, background: &Image, mask: &Mask) -> f64 {
    let mut worst: f64 = 0.0;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if !mask.get(y, x) {
                for c in 0..background.channels() {
                    worst = worst.max((generated.get(y, x, c) - background.get(y, x, c)).abs());
                }
            }
        }
    }
    worst
}

/// Loads the checkpoint, evaluates it on `dataset` and writes the report.
pub fn evaluate(checkpoint: &Path, dataset: &Path, out: &Path) -> Result<EvalReport> {
    let model = Model::load(checkpoint)?;
    let data = LoadedDataset::load(dataset)?;
    let report = evaluate_model(&model, &data, true)?;
    write_file(out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(report)
}

fn write_file(out: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(out, bytes).map_err(|e| Error::io(out, e))
}

/// The five cumulative component settings, starting from plain diffusion.
pub fn ablation_configs(base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let mut c = base.clone();
    c.components.decouple = false;
    c.components.time_modulation = false;
    c.prior.enabled = false;
    c.loss.ocr_enabled = false;
    let mut rows = vec![("none", c.clone())];
    c.components.decouple = true;
    rows.push(("+TFD", c.clone()));
    c.components.time_modulation = true;
    rows.push(("+TM", c.clone()));
    c.prior.enabled = true;
    rows.push(("+POP", c.clone()));
    c.loss.ocr_enabled = true;
    rows.push(("+OAL", c));
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub identity_sim: f64,
    pub masked_ssim: f64,
    pub masked_perceptual: f64,
}

pub fn run_ablation(base: &RunConfig, data: &LoadedDataset) -> Result<Vec<AblationRow>> {
    ablation_configs(base)
        .into_iter()
        .map(|(name, cfg)| {
            info!("ablation row {name}");
            let (model, _) = train_model(&cfg, data, None)?;
            let r = evaluate_model(&model, data, false)?;
            Ok(AblationRow {
                config: name.to_string(),
                identity_sim: r.aggregate.identity_sim,
                masked_ssim: r.aggregate.masked_ssim,
                masked_perceptual: r.aggregate.masked_perceptual,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::format("ablation.csv", e.to_string());
    w.write_record(ABLATION_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.config.clone(),
            format!("{:.6}", r.identity_sim),
            format!("{:.6}", r.masked_ssim),
            format!("{:.6}", r.masked_perceptual),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::format("ablation.csv", e.to_string()))
}

pub fn ablate(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let data = LoadedDataset::load(dataset)?;
    let rows = run_ablation(cfg, &data)?;
    write_file(out, &ablation_csv(&rows)?)?;
    Ok(rows)
}

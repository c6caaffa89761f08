//! Pose and orientation prior: the foreground's high-frequency map,
//! standardized over the mask, blended into the diffusion noise.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{high_frequency, HfConfig};
use crate::image::{Image, Mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub enabled: bool,
    pub lambda: f64,
    /// Training steps with `t >= high_noise_t` receive the prior.
    pub high_noise_t: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            enabled: true,
            lambda: 0.1,
            high_noise_t: 800,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        let mut errs = Vec::new();
        if !(0.0..=1.0).contains(&self.lambda) {
            errs.push(format!("prior.lambda must lie in [0, 1], got {}", self.lambda));
        }
        if self.high_noise_t == 0 || self.high_noise_t >= steps {
            errs.push(format!(
                "prior.high_noise_t must lie in (0, {steps}), got {}",
                self.high_noise_t
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// `Z(HF)` over the mask pixels (zero elsewhere), or `None` when the map is
/// constant on the mask or the mask is empty.
pub fn standardized_hf(image: &Image, mask: &Mask, hf: &HfConfig) -> Result<Option<Image>> {
    if !mask.matches(image) {
        return Err(Error::Shape(format!(
            "mask {}x{} vs image {}x{}",
            mask.height(),
            mask.width(),
            image.height(),
            image.width()
        )));
    }
    let n = mask.count();
    if n == 0 {
        return Ok(None);
    }
    let map = high_frequency(image, hf)?;
    let (h, w) = (image.height(), image.width());
    let on = |i: usize| mask.data()[i] == 1;
    let vals: Vec<f64> = (0..h * w).filter(|&i| on(i)).map(|i| map.data()[3 * i]).collect();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    if var <= 1e-24 {
        return Ok(None);
    }
    let sd = var.sqrt();
    Ok(Some(Image::from_fn(h, w, 1, |y, x, _| {
        if mask.get(y, x) {
            (map.get(y, x, 0) - mean) / sd
        } else {
            0.0
        }
    })))
}

/// `sqrt(1-lambda) * eps + sqrt(lambda) * Z(HF)` inside the mask; `eps`
/// untouched outside it.
pub fn blend(eps: &Image, z: &Image, mask: &Mask, lambda: f64) -> Image {
    let (a, b) = ((1.0 - lambda).sqrt(), lambda.sqrt());
    let mut out = eps.clone();
    let c = eps.channels();
    for y in 0..eps.height() {
        for x in 0..eps.width() {
            if mask.get(y, x) {
                let zv = z.get(y, x, 0);
                for ch in 0..c {
                    out.set(y, x, ch, a * eps.get(y, x, ch) + b * zv);
                }
            }
        }
    }
    out
}

fn fuse(eps: &Image, source: &Image, mask: &Mask, cfg: &PriorConfig, hf: &HfConfig) -> Result<Image> {
    if !eps.same_shape(source) {
        return Err(Error::Shape("noise and source image differ in shape".into()));
    }
    if !cfg.enabled || cfg.lambda == 0.0 {
        return Ok(eps.clone());
    }
    match standardized_hf(source, mask, hf)? {
        Some(z) => Ok(blend(eps, &z, mask, cfg.lambda)),
        None => {
            if !mask.is_empty() {
                warn!("high-frequency map is constant over the mask; prior skipped");
            }
            Ok(eps.clone())
        }
    }
}

/// Training-time prior; identity unless enabled and `t >= high_noise_t`.
/// `scene` is the ground-truth composite whose masked region is the target.
pub fn fuse_training(
    eps: &Image,
    scene: &Image,
    mask: &Mask,
    cfg: &PriorConfig,
    t: usize,
    hf: &HfConfig,
) -> Result<Image> {
    if t < cfg.high_noise_t {
        return Ok(eps.clone());
    }
    fuse(eps, scene, mask, cfg, hf)
}

/// Inference initialization; the HF map comes from the object being replaced
/// in `background`.
pub fn fuse_inference(eps: &Image, background: &Image, mask: &Mask, cfg: &PriorConfig, hf: &HfConfig) -> Result<Image> {
    fuse(eps, background, mask, cfg, hf)
}

/// Pearson correlation of two single-channel-compatible images over the mask,
/// using channel 0.
pub fn masked_correlation(a: &Image, b: &Image, mask: &Mask) -> f64 {
    let pairs: Vec<(f64, f64)> = (0..a.height())
        .flat_map(|y| (0..a.width()).map(move |x| (y, x)))
        .filter(|&(y, x)| mask.get(y, x))
        .map(|(y, x)| (a.get(y, x, 0), b.get(y, x, 0)))
        .collect();
    let n = pairs.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let (ma, mb) = (
        pairs.iter().map(|p| p.0).sum::<f64>() / n,
        pairs.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

//! Conditional training objective: noise-prediction loss, pixel MSE on the
//! reconstructed image, and a text-gated feature-consistency loss computed
//! with a frozen convolutional extractor.

use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::nn::{Bcast, Conv2d, Graph, Init, ParamStore, Tensor, Var};
use crate::seed::Seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// The OCR term is active for text-bearing items with `t < ocr_gate_t`.
    pub ocr_gate_t: usize,
    pub weight_vlb: f64,
    pub weight_mse: f64,
    pub weight_ocr: f64,
    /// Turns the OCR term off entirely.
    pub ocr_enabled: bool,
    /// Restricts the pixel MSE to the foreground mask.
    pub mse_masked: bool,
    pub ocr_seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            ocr_gate_t: 200,
            weight_vlb: 1.0,
            weight_mse: 1.0,
            weight_ocr: 1.0,
            ocr_enabled: true,
            mse_masked: false,
            ocr_seed: 4242,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        let mut errs = Vec::new();
        if self.ocr_gate_t == 0 || self.ocr_gate_t > steps {
            errs.push(format!(
                "loss.ocr_gate_t must lie in (0, {steps}], got {}",
                self.ocr_gate_t
            ));
        }
        for (name, w) in [
            ("loss.weight_vlb", self.weight_vlb),
            ("loss.weight_mse", self.weight_mse),
            ("loss.weight_ocr", self.weight_ocr),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                errs.push(format!("{name} must be finite and non-negative, got {w}"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn ocr_active(&self, t: usize, has_text: bool) -> bool {
        self.ocr_enabled && has_text && t < self.ocr_gate_t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub t: usize,
    pub l_vlb: f64,
    pub l_mse: f64,
    pub l_ocr: f64,
    pub l_total: f64,
    pub ocr_active: bool,
    pub has_text: bool,
}

impl LossReport {
    /// Builds a report whose gate and total follow from the components.
    pub fn assemble(cfg: &LossConfig, t: usize, has_text: bool, l_vlb: f64, l_mse: f64, l_ocr: f64) -> Self {
        let ocr_active = cfg.ocr_active(t, has_text);
        let l_ocr = if ocr_active { l_ocr } else { 0.0 };
        let mut l_total = cfg.weight_vlb * l_vlb + cfg.weight_mse * l_mse;
        if ocr_active {
            l_total += cfg.weight_ocr * l_ocr;
        }
        LossReport {
            t,
            l_vlb,
            l_mse,
            l_ocr,
            l_total,
            ocr_active,
            has_text,
        }
    }

    pub fn is_consistent(&self, cfg: &LossConfig) -> bool {
        let again = LossReport::assemble(cfg, self.t, self.has_text, self.l_vlb, self.l_mse, self.l_ocr);
        again.ocr_active == self.ocr_active
            && (again.l_total - self.l_total).abs() <= 1e-12 * (1.0 + self.l_total.abs())
    }
}

/// One JSON-lines training log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossLogLine {
    pub step: usize,
    pub t: usize,
    pub l_vlb: f64,
    pub l_mse: f64,
    pub l_ocr: f64,
    pub l_total: f64,
    pub ocr_active: bool,
    pub has_text: bool,
}

impl LossLogLine {
    pub fn new(step: usize, r: &LossReport) -> Self {
        LossLogLine {
            step,
            t: r.t,
            l_vlb: r.l_vlb,
            l_mse: r.l_mse,
            l_ocr: r.l_ocr,
            l_total: r.l_total,
            ocr_active: r.ocr_active,
            has_text: r.has_text,
        }
    }
}

fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )))
    }
}

pub fn vlb_loss(eps_true: &Image, eps_hat: &Image) -> Result<f64> {
    check_shapes(eps_true, eps_hat)?;
    Ok(mean_sq_diff(eps_true.data(), eps_hat.data()))
}

pub fn mse_loss(x0_hat: &Image, x0: &Image) -> Result<f64> {
    check_shapes(x0_hat, x0)?;
    Ok(mean_sq_diff(x0_hat.data(), x0.data()))
}

/// Mean squared error over the channels of mask pixels; zero for an empty mask.
pub fn masked_mse_loss(x0_hat: &Image, x0: &Image, mask: &Mask) -> Result<f64> {
    check_shapes(x0_hat, x0)?;
    if !mask.matches(x0) {
        return Err(Error::Shape("mask does not match image".into()));
    }
    let c = x0.channels();
    let n = mask.count() * c;
    if n == 0 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (i, &m) in mask.data().iter().enumerate() {
        if m == 1 {
            for k in 0..c {
                let d = x0_hat.data()[i * c + k] - x0.data()[i * c + k];
                acc += d * d;
            }
        }
    }
    Ok(acc / n as f64)
}

/// Frozen three-layer conv stack on luminance (the first layer's kernels are
/// luminance-weighted copies across RGB, so chroma changes that keep
/// luminance fixed do not reach the features).
#[derive(Clone, Debug)]
pub struct OcrSurrogate {
    store: ParamStore,
    convs: [Conv2d; 3],
}

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
const OCR_CHANNELS: usize = 8;

impl OcrSurrogate {
    pub fn new(seed: Seed) -> Self {
        let mut rng = seed.child("ocr").rng();
        let mut store = ParamStore::new();
        let r = &mut rng;
        let c1 = Conv2d::new(&mut store, "ocr.conv1", 1, OCR_CHANNELS, 3, 1, Init::Default, r);
        let c2 = Conv2d::new(
            &mut store,
            "ocr.conv2",
            OCR_CHANNELS,
            OCR_CHANNELS,
            3,
            2,
            Init::Default,
            r,
        );
        let c3 = Conv2d::new(
            &mut store,
            "ocr.conv3",
            OCR_CHANNELS,
            OCR_CHANNELS,
            3,
            2,
            Init::Default,
            r,
        );
        let base = store.get(c1.w).clone();
        let mut w = Vec::with_capacity(OCR_CHANNELS * 27);
        for co in 0..OCR_CHANNELS {
            for l in LUMA {
                w.extend(base.data()[co * 9..co * 9 + 9].iter().map(|v| v * l));
            }
        }
        *store.get_mut(c1.w) = Tensor::new(&[OCR_CHANNELS, 3, 3, 3], w).expect("kernel shape");
        OcrSurrogate {
            store,
            convs: [c1, c2, c3],
        }
    }

    /// `x: [B, 3, H, W]` to features `[B, F]`; gradients flow to `x` only.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let p = self.store.bind(g, false);
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, &p, h);
            h = g.silu(h);
        }
        let s = g.shape(h).to_vec();
        g.reshape(h, &[s[0], s[1..].iter().product()])
    }

    pub fn features(&self, image: &Image) -> Vec<f64> {
        let rgb = image.to_rgb();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 3, rgb.height(), rgb.width()], rgb.to_planar()).expect("planar"));
        let f = self.forward(&mut g, x);
        g.value(f).data().to_vec()
    }
}

pub fn ocr_loss(x0_hat: &Image, x0_ref: &Image, surrogate: &OcrSurrogate) -> Result<f64> {
    if x0_hat.height() != x0_ref.height() || x0_hat.width() != x0_ref.width() {
        return Err(Error::Shape("OCR inputs differ in size".into()));
    }
    Ok(mean_sq_diff(&surrogate.features(x0_hat), &surrogate.features(x0_ref)))
}

/// Single-item objective. `x0` is the ground-truth composite; it is both the
/// pixel target and the OCR reference.
#[allow(clippy::too_many_arguments)]
pub fn conditional_loss(
    eps_true: &Image,
    eps_hat: &Image,
    x_t: &Image,
    t: usize,
    x0: &Image,
    mask: &Mask,
    has_text: bool,
    cfg: &LossConfig,
    schedule: &NoiseSchedule,
    surrogate: &OcrSurrogate,
) -> Result<LossReport> {
    let l_vlb = vlb_loss(eps_true, eps_hat)?;
    let x0_hat = schedule.reconstruct_x0(x_t, eps_hat, t)?;
    let l_mse = if cfg.mse_masked {
        masked_mse_loss(&x0_hat, x0, mask)?
    } else {
        mse_loss(&x0_hat, x0)?
    };
    let l_ocr = if cfg.ocr_active(t, has_text) {
        ocr_loss(&x0_hat, x0, surrogate)?
    } else {
        0.0
    };
    Ok(LossReport::assemble(cfg, t, has_text, l_vlb, l_mse, l_ocr))
}

/// Planar training batch shared by the loss graph.
pub struct LossBatch<'a> {
    /// `[B, 3, H, W]` noise targets (after any prior fusion).
    pub eps: &'a Tensor,
    pub x_t: &'a Tensor,
    pub x0: &'a Tensor,
    pub masks: &'a [Mask],
    pub ts: &'a [usize],
    pub has_text: &'a [bool],
}

/// Batched objective on tape. Returns the mean total over items and one
/// report per item; the mean of the report totals equals the returned value.
pub fn batch_loss(
    g: &mut Graph,
    eps_hat: Var,
    batch: &LossBatch,
    cfg: &LossConfig,
    schedule: &NoiseSchedule,
    surrogate: &OcrSurrogate,
) -> Result<(Var, Vec<LossReport>)> {
    let shape = g.shape(eps_hat).to_vec();
    let b = batch.ts.len();
    if shape.len() != 4 || shape[0] != b || shape[1] != 3 || batch.eps.shape() != shape.as_slice() {
        return Err(Error::Shape(format!("prediction {shape:?} vs batch of {b}")));
    }
    if batch.x_t.shape() != shape.as_slice() || batch.x0.shape() != shape.as_slice() {
        return Err(Error::Shape("x_t and x0 must match the prediction shape".into()));
    }
    if batch.masks.len() != b || batch.has_text.len() != b {
        return Err(Error::Shape("per-item masks and flags must match the batch".into()));
    }
    let per = shape[1..].iter().product::<usize>();
    let hw = shape[2] * shape[3];
    for &t in batch.ts {
        schedule.check(t)?;
    }

    let eps = g.constant(batch.eps.clone());
    let l_vlb = g.mse(eps_hat, eps);

    // x0_hat = clamp(x_t / a - eps_hat * s / a)
    let mut base = Vec::with_capacity(b * per);
    let mut coef = Vec::with_capacity(b);
    for (i, &t) in batch.ts.iter().enumerate() {
        let (a, s) = schedule.coefs(t);
        base.extend(batch.x_t.data()[i * per..(i + 1) * per].iter().map(|v| v / a));
        coef.push(-s / a);
    }
    let flat = g.reshape(eps_hat, &[b, 1, per]);
    let coef = g.constant(Tensor::new(&[b, 1], coef)?);
    let scaled = g.bmul(flat, coef, Bcast::Mid);
    let base = g.constant(Tensor::new(&[b, 1, per], base)?);
    let raw = g.add(scaled, base);
    let raw = g.reshape(raw, &shape);
    let x0_hat = g.clamp01(raw);
    let x0 = g.constant(batch.x0.clone());

    let l_mse = if cfg.mse_masked {
        let mut w = Vec::with_capacity(b * per);
        for m in batch.masks {
            let n = m.count() * 3;
            let scale = if n == 0 {
                0.0
            } else {
                (b * per) as f64 / (n as f64 * b as f64)
            };
            for _ in 0..3 {
                w.extend(m.data().iter().map(|&v| v as f64 * scale));
            }
        }
        debug_assert_eq!(w.len(), b * 3 * hw);
        let d = g.sub(x0_hat, x0);
        let sq = g.mul(d, d);
        let wv = g.constant(Tensor::new(&shape, w)?);
        let weighted = g.mul(sq, wv);
        g.mean(weighted)
    } else {
        g.mse(x0_hat, x0)
    };

    let gates: Vec<f64> = (0..b)
        .map(|i| f64::from(u8::from(cfg.ocr_active(batch.ts[i], batch.has_text[i]))))
        .collect();
    let any_ocr = gates.iter().any(|&v| v > 0.0);
    let mut ocr_values = vec![0.0; b];
    let mut total = {
        let a = g.scale(l_vlb, cfg.weight_vlb);
        let m = g.scale(l_mse, cfg.weight_mse);
        g.add(a, m)
    };
    if any_ocr {
        let fh = surrogate.forward(g, x0_hat);
        let fr = surrogate.forward(g, x0);
        let nf = g.shape(fh)[1];
        let d = g.sub(fh, fr);
        let sq = g.mul(d, d);
        for (i, v) in ocr_values.iter_mut().enumerate() {
            if gates[i] > 0.0 {
                *v = g.value(sq).data()[i * nf..(i + 1) * nf].iter().sum::<f64>() / nf as f64;
            }
        }
        let sq = g.reshape(sq, &[b, 1, nf]);
        let gate = g.constant(Tensor::new(&[b, 1], gates.clone())?);
        let gated = g.bmul(sq, gate, Bcast::Mid);
        let l_ocr = g.mean(gated);
        let o = g.scale(l_ocr, cfg.weight_ocr);
        total = g.add(total, o);
    }

    let eh = g.value(eps_hat).data();
    let xh = g.value(x0_hat).data();
    let mut reports = Vec::with_capacity(b);
    for i in 0..b {
        let r = i * per..(i + 1) * per;
        let vlb = mean_sq_diff(&eh[r.clone()], &batch.eps.data()[r.clone()]);
        let mse = if cfg.mse_masked {
            let m = &batch.masks[i];
            let n = m.count() * 3;
            let mut acc = 0.0;
            for c in 0..3 {
                for (p, &on) in m.data().iter().enumerate() {
                    if on == 1 {
                        let k = i * per + c * hw + p;
                        acc += (xh[k] - batch.x0.data()[k]).powi(2);
                    }
                }
            }
            if n == 0 {
                0.0
            } else {
                acc / n as f64
            }
        } else {
            mean_sq_diff(&xh[r.clone()], &batch.x0.data()[r])
        };
        reports.push(LossReport::assemble(
            cfg,
            batch.ts[i],
            batch.has_text[i],
            vlb,
            mse,
            ocr_values[i],
        ));
    }
    Ok((total, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleConfig;
    use crate::nn::gaussian_vec;

    fn noise(seed: u64) -> Image {
        Image::from_vec(8, 8, 3, gaussian_vec(192, &mut Seed(seed).rng())).unwrap()
    }

    #[test]
    fn gate_truth_table() {
        let cfg = LossConfig::default();
        assert!(cfg.ocr_active(150, true));
        assert!(!cfg.ocr_active(250, true));
        assert!(!cfg.ocr_active(150, false));
        assert!(!cfg.ocr_active(200, true));
        assert!(cfg.ocr_active(199, true));
        let off = LossConfig {
            ocr_enabled: false,
            ..cfg
        };
        assert!(!off.ocr_active(10, true));
    }

    #[test]
    fn elementary_losses() {
        let e = noise(1);
        assert_eq!(vlb_loss(&e, &e).unwrap(), 0.0);
        let z = Image::zeros(8, 8, 3);
        let direct = e.data().iter().map(|v| v * v).sum::<f64>() / 192.0;
        assert!((vlb_loss(&e, &z).unwrap() - direct).abs() < 1e-15);
        assert_eq!(vlb_loss(&e, &z).unwrap(), vlb_loss(&z, &e).unwrap());
        assert_eq!(mse_loss(&z, &Image::filled(8, 8, 3, 1.0)).unwrap(), 1.0);
        assert!(matches!(mse_loss(&z, &Image::zeros(8, 9, 3)), Err(Error::Shape(_))));
    }

    #[test]
    fn ocr_is_blind_to_luminance_preserving_chroma() {
        let s = OcrSurrogate::new(Seed(3));
        let a = Image::from_fn(16, 16, 3, |y, x, c| 0.3 + 0.02 * ((y * 3 + x * 5 + c) % 7) as f64);
        assert_eq!(ocr_loss(&a, &a, &s).unwrap(), 0.0);
        // direction orthogonal to the luminance weights
        let dir = [0.587, -0.299, 0.0];
        let mut b = a.clone();
        for y in 4..9 {
            for x in 2..12 {
                for c in 0..3 {
                    b.set(y, x, c, a.get(y, x, c) + 0.1 * dir[c]);
                }
            }
        }
        assert!(ocr_loss(&b, &a, &s).unwrap() < 1e-24);
        let mut c = a.clone();
        c.set(5, 5, 0, 0.9);
        assert!(ocr_loss(&c, &a, &s).unwrap() > 0.0);
    }

    #[test]
    fn report_assembly() {
        let cfg = LossConfig {
            weight_mse: 2.0,
            ..Default::default()
        };
        let r = LossReport::assemble(&cfg, 50, true, 0.5, 0.25, 0.125);
        assert!(r.ocr_active);
        assert_eq!(r.l_total, 0.5 + 0.5 + 0.125);
        let r = LossReport::assemble(&cfg, 500, true, 0.5, 0.25, 0.125);
        assert_eq!((r.l_total, r.l_ocr), (1.0, 0.0));
        assert!(r.is_consistent(&cfg));
    }

    #[test]
    fn batch_matches_single_item_path() {
        let schedule = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        let s = OcrSurrogate::new(Seed(4));
        for masked in [false, true] {
            let cfg = LossConfig {
                mse_masked: masked,
                ..Default::default()
            };
            let ts = [30, 600, 120];
            let has_text = [true, true, false];
            let masks: Vec<Mask> = (0..3).map(|i| Mask::from_fn(8, 8, |y, x| y + x > 4 + i)).collect();
            let x0s: Vec<Image> = (0..3)
                .map(|i| noise(10 + i).map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0)))
                .collect();
            let eps: Vec<Image> = (0..3).map(|i| noise(20 + i)).collect();
            let hats: Vec<Image> = (0..3).map(|i| noise(30 + i).map(|v| 0.9 * v)).collect();
            let xts: Vec<Image> = (0..3)
                .map(|i| schedule.q_sample(&x0s[i], ts[i], &eps[i]).unwrap())
                .collect();
            let stack =
                |v: &[Image]| Tensor::new(&[3, 3, 8, 8], v.iter().flat_map(|i| i.to_planar()).collect()).unwrap();
            let (e, xt, x0) = (stack(&eps), stack(&xts), stack(&x0s));
            let mut g = Graph::new();
            let hv = g.constant(stack(&hats));
            let batch = LossBatch {
                eps: &e,
                x_t: &xt,
                x0: &x0,
                masks: &masks,
                ts: &ts,
                has_text: &has_text,
            };
            let (total, reports) = batch_loss(&mut g, hv, &batch, &cfg, &schedule, &s).unwrap();
            for i in 0..3 {
                let single = conditional_loss(
                    &eps[i],
                    &hats[i],
                    &xts[i],
                    ts[i],
                    &x0s[i],
                    &masks[i],
                    has_text[i],
                    &cfg,
                    &schedule,
                    &s,
                )
                .unwrap();
                for (a, b) in [
                    (single.l_vlb, reports[i].l_vlb),
                    (single.l_mse, reports[i].l_mse),
                    (single.l_ocr, reports[i].l_ocr),
                ] {
                    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
                }
                assert_eq!(single.ocr_active, reports[i].ocr_active);
            }
            let mean = reports.iter().map(|r| r.l_total).sum::<f64>() / 3.0;
            assert!((g.value(total).item() - mean).abs() < 1e-12);
        }
    }
}

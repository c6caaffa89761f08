//! Evaluation metrics: SSIM, background-only comparisons, encoder-based
//! identity similarity, and a linear downstream classifier.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::encoder::{cosine, ConditionEncoder, TokenSequence};
use crate::error::{Error, Result};
use crate::features::crop_to_bbox;
use crate::image::{Image, Mask, ReferenceSet};

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Value written over foreground pixels before background comparisons.
pub const NEUTRAL: f64 = 0.5;

pub fn ssim_weights() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW as f64 - 1.0) / 2.0;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Valid-position separable filtering of one channel plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> (usize, usize, Vec<f64>) {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (oh, ow, out)
}

/// Mean local SSIM over every fully contained 8x8 Gaussian window, averaged
/// over channels; data range 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    let (h, w, ch) = (a.height(), a.width(), a.channels());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::TooSmall {
            height: h,
            width: w,
            cell: SSIM_WINDOW,
        });
    }
    let k = ssim_weights();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let pa = a.to_planar();
    let pb = b.to_planar();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..ch {
        let x = &pa[c * h * w..(c + 1) * h * w];
        let y = &pb[c * h * w..(c + 1) * h * w];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let (_, _, mx) = filter_valid(x, h, w, &k);
        let (_, _, my) = filter_valid(y, h, w, &k);
        let (_, _, sxx) = filter_valid(&xx, h, w, &k);
        let (_, _, syy) = filter_valid(&yy, h, w, &k);
        let (_, _, sxy) = filter_valid(&xy, h, w, &k);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn neutralize(image: &Image, mask: &Mask) -> Image {
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            if mask.get(y, x) {
                for c in 0..image.channels() {
                    out.set(y, x, c, NEUTRAL);
                }
            }
        }
    }
    out
}

/// Root-mean-square difference of encoder tokens.
pub fn perceptual_distance(a: &Image, b: &Image, encoder: &ConditionEncoder) -> f64 {
    let (ta, tb) = (encoder.encode(a), encoder.encode(b));
    let n = ta.data().len() as f64;
    (ta.data()
        .iter()
        .zip(tb.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
        .sqrt()
}

/// `(ssim, perceptual)` with the foreground set to [`NEUTRAL`] in both images.
pub fn masked_background_metrics(
    generated: &Image,
    background: &Image,
    mask: &Mask,
    encoder: &ConditionEncoder,
) -> Result<(f64, f64)> {
    if !mask.matches(generated) || !generated.same_shape(background) {
        return Err(Error::Shape("generated, background and mask must share a frame".into()));
    }
    let (a, b) = (neutralize(generated, mask), neutralize(background, mask));
    Ok((ssim(&a, &b)?, perceptual_distance(&a, &b, encoder)))
}

fn encode_crop(image: &Image, mask: &Mask, encoder: &ConditionEncoder) -> Result<TokenSequence> {
    let size = encoder.config().image_size;
    Ok(encoder.encode(&crop_to_bbox(image, mask)?.to_rgb().resize(size, size)))
}

/// Mean of per-token cosines, the tokenwise identity variant.
pub fn token_similarity(a: &TokenSequence, b: &TokenSequence) -> Result<f64> {
    if a.count() != b.count() || a.dim() != b.dim() {
        return Err(Error::Shape("token sequences differ in shape".into()));
    }
    Ok((0..a.count()).map(|i| cosine(a.token(i), b.token(i))).sum::<f64>() / a.count() as f64)
}

/// Per-view `(pooled cosine, tokenwise cosine)` of the generated foreground
/// against each segmented reference view.
pub fn identity_scores(
    generated: &Image,
    mask: &Mask,
    refs: &ReferenceSet,
    encoder: &ConditionEncoder,
) -> Result<Vec<(f64, f64)>> {
    let g = encode_crop(generated, mask, encoder)?;
    refs.views()
        .iter()
        .map(|(view, vmask)| {
            let r = encode_crop(view, vmask, encoder)?;
            Ok((crate::encoder::similarity(&g, &r)?, token_similarity(&g, &r)?))
        })
        .collect()
}

/// Average pooled-token cosine against all reference views.
pub fn identity_similarity(
    generated: &Image,
    mask: &Mask,
    refs: &ReferenceSet,
    encoder: &ConditionEncoder,
) -> Result<f64> {
    let s = identity_scores(generated, mask, refs, encoder)?;
    Ok(s.iter().map(|p| p.0).sum::<f64>() / s.len() as f64)
}

/// Classifier input: the encoded foreground crop on black.
pub fn classifier_features(image: &Image, mask: &Mask, encoder: &ConditionEncoder) -> Result<Vec<f64>> {
    Ok(encode_crop(image, mask, encoder)?.data().to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub accuracy: f64,
    /// Macro averages over classes.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub train_size: usize,
    pub test_size: usize,
}

pub fn class_metrics(truth: &[usize], pred: &[usize], classes: usize) -> ClassifyReport {
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let tp = truth.iter().zip(pred).filter(|(t, p)| **t == c && **p == c).count() as f64;
        let predicted = pred.iter().filter(|p| **p == c).count() as f64;
        let actual = truth.iter().filter(|t| **t == c).count();
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if actual > 0 { tp / actual as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support: actual,
        });
    }
    let k = classes as f64;
    let correct = truth.iter().zip(pred).filter(|(t, p)| t == p).count();
    ClassifyReport {
        accuracy: correct as f64 / truth.len().max(1) as f64,
        precision: per_class.iter().map(|m| m.precision).sum::<f64>() / k,
        recall: per_class.iter().map(|m| m.recall).sum::<f64>() / k,
        f1: per_class.iter().map(|m| m.f1).sum::<f64>() / k,
        per_class,
        train_size: 0,
        test_size: truth.len(),
    }
}

/// Per-feature standardization fitted on one set.
#[derive(Clone, Debug)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(xs: &[Vec<f64>]) -> Self {
        let d = xs[0].len();
        let n = xs.len() as f64;
        let mut mean = vec![0.0; d];
        for x in xs {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; d];
        for x in xs {
            for j in 0..d {
                scale[j] += (x[j] - mean[j]).powi(2) / n;
            }
        }
        let scale = scale
            .into_iter()
            .map(|v| if v > 1e-12 { 1.0 / v.sqrt() } else { 0.0 })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    for c in 0..classes {
        if !labels.contains(&c) {
            return Err(Error::Coverage(format!("class {c} has no training examples")));
        }
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Coverage(format!("label {bad} outside {classes} classes")));
    }
    Ok(())
}

/// Softmax-regression weights `[d + 1, classes]` (last row is the bias).
#[derive(Clone, Debug)]
pub struct LinearClassifier {
    std: Standardizer,
    w: Vec<f64>,
    d: usize,
    classes: usize,
}

impl LinearClassifier {
    /// Full-batch gradient descent on the mean cross-entropy with a small
    /// L2 penalty.
    pub fn fit(xs: &[Vec<f64>], labels: &[usize], classes: usize, epochs: usize, lr: f64) -> Result<Self> {
        if xs.len() != labels.len() || xs.is_empty() {
            return Err(Error::Input("features and labels must be non-empty and aligned".into()));
        }
        check_labels(labels, classes)?;
        let std = Standardizer::fit(xs);
        let z: Vec<Vec<f64>> = xs.iter().map(|x| std.apply(x)).collect();
        let d = z[0].len();
        let n = z.len() as f64;
        let mut w = vec![0.0; (d + 1) * classes];
        let l2 = 1e-4;
        let mut probs = vec![0.0; classes];
        for _ in 0..epochs {
            let mut grad = vec![0.0; w.len()];
            for (x, &y) in z.iter().zip(labels) {
                logits_into(&w, x, d, classes, &mut probs);
                softmax_in_place(&mut probs);
                probs[y] -= 1.0;
                for j in 0..d {
                    let xj = x[j];
                    if xj != 0.0 {
                        for c in 0..classes {
                            grad[j * classes + c] += xj * probs[c] / n;
                        }
                    }
                }
                for c in 0..classes {
                    grad[d * classes + c] += probs[c] / n;
                }
            }
            for (i, (wi, gi)) in w.iter_mut().zip(&grad).enumerate() {
                let reg = if i < d * classes { l2 * *wi } else { 0.0 };
                *wi -= lr * (gi + reg);
            }
        }
        Ok(LinearClassifier { std, w, d, classes })
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.std.apply(x);
        let mut logits = vec![0.0; self.classes];
        logits_into(&self.w, &z, self.d, self.classes, &mut logits);
        argmax(&logits)
    }
}

fn logits_into(w: &[f64], x: &[f64], d: usize, classes: usize, out: &mut [f64]) {
    out.copy_from_slice(&w[d * classes..(d + 1) * classes]);
    for j in 0..d {
        let xj = x[j];
        if xj != 0.0 {
            for c in 0..classes {
                out[c] += xj * w[j * classes + c];
            }
        }
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Trains on `train`, reports on `test`.
pub fn downstream_classify(
    train: &[(Vec<f64>, usize)],
    test: &[(Vec<f64>, usize)],
    classes: usize,
    epochs: usize,
    lr: f64,
) -> Result<ClassifyReport> {
    let xs: Vec<Vec<f64>> = train.iter().map(|p| p.0.clone()).collect();
    let ys: Vec<usize> = train.iter().map(|p| p.1).collect();
    let clf = LinearClassifier::fit(&xs, &ys, classes, epochs, lr)?;
    let truth: Vec<usize> = test.iter().map(|p| p.1).collect();
    let pred: Vec<usize> = test.iter().map(|p| clf.predict(&p.0)).collect();
    let mut r = class_metrics(&truth, &pred, classes);
    r.train_size = train.len();
    Ok(r)
}

/// Closed-form ridge least squares on one-hot targets (dual form), scored on
/// its own training set. Accuracy 1 certifies linear separability.
pub fn separability_accuracy(data: &[(Vec<f64>, usize)], classes: usize, ridge: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("no samples".into()));
    }
    let xs: Vec<Vec<f64>> = data.iter().map(|p| p.0.clone()).collect();
    let std = Standardizer::fit(&xs);
    let n = xs.len();
    let rows: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| {
            let mut z = std.apply(x);
            z.push(1.0);
            z
        })
        .collect();
    let d = rows[0].len();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let y = DMatrix::from_fn(n, classes, |i, c| if data[i].1 == c { 1.0 } else { 0.0 });
    let gram = &x * x.transpose() + DMatrix::identity(n, n) * ridge;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::State("Gram matrix is not positive definite".into()))?;
    let alpha = chol.solve(&y);
    let fitted = &x * (x.transpose() * alpha);
    let correct = (0..n)
        .filter(|&i| {
            let row: Vec<f64> = fitted.row(i).iter().cloned().collect();
            argmax(&row) == data[i].1
        })
        .count();
    Ok(correct as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(seed: usize) -> Image {
        Image::from_fn(16, 16, 3, |y, x, c| {
            ((y * 7 + x * 3 + c * 5 + seed * 11) % 23) as f64 / 22.0
        })
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = ramp(1);
        let b = ramp(2);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-15);
        assert!((-1.0..1.0).contains(&ab));
        assert!(matches!(ssim(&a, &Image::zeros(16, 15, 3)), Err(Error::Shape(_))));
    }

    #[test]
    fn weights_are_normalized_and_symmetric() {
        let w = ssim_weights();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..4 {
            assert_eq!(w[i], w[7 - i]);
        }
    }

    #[test]
    fn f1_identity_and_coverage() {
        let truth = [0, 0, 1, 1, 2, 2, 2];
        let pred = [0, 1, 1, 1, 2, 0, 2];
        let r = class_metrics(&truth, &pred, 3);
        for m in &r.per_class {
            if m.precision + m.recall > 0.0 {
                assert!((m.f1 - 2.0 * m.precision * m.recall / (m.precision + m.recall)).abs() < 1e-12);
            }
        }
        assert!((r.accuracy - 5.0 / 7.0).abs() < 1e-15);
        let one = vec![(vec![1.0, 2.0], 0usize), (vec![2.0, 1.0], 0)];
        assert!(matches!(
            downstream_classify(&one, &one, 2, 10, 0.1),
            Err(Error::Coverage(_))
        ));
    }

    #[test]
    fn separable_points_are_learned() {
        let data: Vec<(Vec<f64>, usize)> = (0..30)
            .map(|i| {
                let c = i % 3;
                let j = (i / 3) as f64 * 0.1;
                (vec![c as f64 * 2.0 + j, (c == 1) as u8 as f64 + 0.05 * j, j], c)
            })
            .collect();
        assert_eq!(separability_accuracy(&data, 3, 1e-6).unwrap(), 1.0);
        let r = downstream_classify(&data, &data, 3, 2000, 0.5).unwrap();
        assert_eq!(r.accuracy, 1.0);
    }
}

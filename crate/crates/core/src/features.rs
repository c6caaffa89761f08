//! Foreground isolation and the high-frequency / texture decomposition of a
//! foreground image.
//!
//! Every operator takes RGB or grayscale input (RGB is converted with
//! luminance weights) and returns maps bounded to `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

/// Largest Sobel gradient magnitude reachable by a 3x3 patch of values in
/// `[0, 1]`: `|Gx| = 4` together with `|Gy| = 2`.
pub const SOBEL_MAX: f64 = 4.472_135_954_999_58;
/// Largest absolute response of the 4-neighbour Laplacian on `[0, 1]` input.
pub const LAPLACIAN_MAX: f64 = 4.0;

/// Magnitudes closer than this count as equal during non-maximum suppression.
pub const NMS_TIE: f64 = 1e-12;

pub const HOG_CELL: usize = 8;
pub const HOG_BINS: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HfConfig {
    /// Sobel weight.
    pub alpha: f64,
    /// Laplacian weight.
    pub beta: f64,
    /// Canny weight.
    pub gamma: f64,
    pub canny_low: f64,
    pub canny_high: f64,
    pub canny_sigma: f64,
}

impl Default for HfConfig {
    fn default() -> Self {
        HfConfig {
            alpha: 1.0,
            beta: 0.5,
            gamma: 0.5,
            canny_low: 0.1,
            canny_high: 0.3,
            canny_sigma: 1.0,
        }
    }
}

impl HfConfig {
    pub fn with_weights(alpha: f64, beta: f64, gamma: f64) -> Self {
        HfConfig {
            alpha,
            beta,
            gamma,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("hf.alpha", self.alpha),
            ("hf.beta", self.beta),
            ("hf.gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.alpha + self.beta + self.gamma > 0.0) {
            errs.push("hf.alpha + hf.beta + hf.gamma must be > 0".into());
        }
        if !(0.0 <= self.canny_low && self.canny_low < self.canny_high && self.canny_high <= 1.0) {
            errs.push(format!(
                "need 0 <= hf.canny_low < hf.canny_high <= 1, got ({}, {})",
                self.canny_low, self.canny_high
            ));
        }
        if !(self.canny_sigma > 0.0) {
            errs.push("hf.canny_sigma must be > 0".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Cuts the minimal rectangle holding every mask pixel; pixels inside the
/// rectangle but outside the mask become black.
pub fn crop_to_bbox(image: &Image, mask: &Mask) -> Result<Image> {
    if !mask.matches(image) {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match image {}x{}",
            mask.height(),
            mask.width(),
            image.height(),
            image.width()
        )));
    }
    let (y0, x0, y1, x1) = mask.bbox().ok_or(Error::EmptyMask)?;
    Ok(Image::from_fn(y1 - y0 + 1, x1 - x0 + 1, image.channels(), |y, x, c| {
        if mask.get(y0 + y, x0 + x) {
            image.get(y0 + y, x0 + x, c)
        } else {
            0.0
        }
    }))
}

/// The mask restricted to its own bounding rectangle.
pub fn crop_mask(mask: &Mask) -> Result<Mask> {
    let (y0, x0, y1, x1) = mask.bbox().ok_or(Error::EmptyMask)?;
    Ok(Mask::from_fn(y1 - y0 + 1, x1 - x0 + 1, |y, x| mask.get(y0 + y, x0 + x)))
}

/// Raw Sobel responses with replicate padding. Each response is formed as
/// a difference of two weighted sums, so flat regions give exactly zero.
fn sobel_components(gray: &Image) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (gray.height(), gray.width());
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = |dy: isize, dx: isize| gray.get_clamped(y as isize + dy, x as isize + dx, 0);
            let right = p(-1, 1) + 2.0 * p(0, 1) + p(1, 1);
            let left = p(-1, -1) + 2.0 * p(0, -1) + p(1, -1);
            let bottom = p(1, -1) + 2.0 * p(1, 0) + p(1, 1);
            let top = p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1);
            gx[y * w + x] = right - left;
            gy[y * w + x] = bottom - top;
        }
    }
    (gx, gy)
}

/// Gradient magnitude `sqrt(Gx^2 + Gy^2)` scaled by [`SOBEL_MAX`].
pub fn sobel(image: &Image) -> Image {
    let gray = image.to_gray();
    let (gx, gy) = sobel_components(&gray);
    let data = gx
        .iter()
        .zip(&gy)
        .map(|(a, b)| ((a * a + b * b).sqrt() / SOBEL_MAX).min(1.0))
        .collect();
    Image::from_vec(gray.height(), gray.width(), 1, data).expect("shape preserved")
}

/// Absolute 4-neighbour Laplacian scaled by [`LAPLACIAN_MAX`].
pub fn laplacian(image: &Image) -> Image {
    let gray = image.to_gray();
    Image::from_fn(gray.height(), gray.width(), 1, |y, x, _| {
        let p = |dy: isize, dx: isize| gray.get_clamped(y as isize + dy, x as isize + dx, 0);
        let v = (p(-1, 0) + p(1, 0)) + (p(0, -1) + p(0, 1)) - 4.0 * p(0, 0);
        (v.abs() / LAPLACIAN_MAX).min(1.0)
    })
}

/// Normalized 5-tap Gaussian.
pub fn gaussian_kernel5(sigma: f64) -> [f64; 5] {
    let mut k = [0.0; 5];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - 2.0;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

fn blur5(gray: &Image, sigma: f64) -> Image {
    let k = gaussian_kernel5(sigma);
    let (h, w) = (gray.height(), gray.width());
    let horiz = Image::from_fn(h, w, 1, |y, x, _| {
        (0..5)
            .map(|i| k[i] * gray.get_clamped(y as isize, x as isize + i as isize - 2, 0))
            .sum()
    });
    Image::from_fn(h, w, 1, |y, x, _| {
        (0..5)
            .map(|i| k[i] * horiz.get_clamped(y as isize + i as isize - 2, x as isize, 0))
            .sum()
    })
}

/// Binary Canny edge map: Gaussian blur, Sobel gradients, non-maximum
/// suppression and double-threshold hysteresis with 8-connectivity.
/// Thresholds apply to the Sobel magnitude scaled by [`SOBEL_MAX`].
pub fn canny(image: &Image, cfg: &HfConfig) -> Image {
    let gray = image.to_gray();
    let (h, w) = (gray.height(), gray.width());
    let blurred = blur5(&gray, cfg.canny_sigma);
    let (gx, gy) = sobel_components(&blurred);
    let mag: Vec<f64> = gx
        .iter()
        .zip(&gy)
        .map(|(a, b)| (a * a + b * b).sqrt() / SOBEL_MAX)
        .collect();

    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };

    let mut thin = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = mag[i];
            if m <= 0.0 {
                continue;
            }
            let (dy, dx) = nms_direction(gx[i], gy[i]);
            let (yi, xi) = (y as isize, x as isize);
            // Ties keep the pixel on the negative side of the gradient, so a
            // symmetric two-pixel ridge thins to one pixel.
            if m - at(yi - dy, xi - dx) > NMS_TIE && m - at(yi + dy, xi + dx) >= -NMS_TIE {
                thin[i] = m;
            }
        }
    }

    let mut edges = vec![0u8; h * w];
    let mut stack: Vec<usize> = Vec::new();
    for (i, &m) in thin.iter().enumerate() {
        if m >= cfg.canny_high {
            edges[i] = 1;
            stack.push(i);
        }
    }
    while let Some(i) = stack.pop() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for ny in y - 1..=y + 1 {
            for nx in x - 1..=x + 1 {
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if edges[j] == 0 && thin[j] >= cfg.canny_low {
                    edges[j] = 1;
                    stack.push(j);
                }
            }
        }
    }
    let data = edges.into_iter().map(f64::from).collect();
    Image::from_vec(h, w, 1, data).expect("shape preserved")
}

/// Gradient direction quantized to one of four neighbour offsets `(dy, dx)`.
fn nms_direction(gx: f64, gy: f64) -> (isize, isize) {
    let mut angle = gy.atan2(gx).to_degrees();
    if angle < 0.0 {
        angle += 180.0;
    }
    if !(22.5..157.5).contains(&angle) {
        (0, 1)
    } else if angle < 67.5 {
        (1, 1)
    } else if angle < 112.5 {
        (1, 0)
    } else {
        (1, -1)
    }
}

/// Min-max normalization; a constant map becomes all zeros.
pub fn minmax_normalize(image: &Image) -> Image {
    let (lo, hi) = (image.min_value(), image.max_value());
    if !(hi > lo) {
        return Image::zeros(image.height(), image.width(), image.channels());
    }
    let span = hi - lo;
    image.map(|v| (v - lo) / span)
}

/// Weighted Sobel + Laplacian + Canny fusion, min-max normalized and
/// replicated to three channels.
pub fn high_frequency(image: &Image, cfg: &HfConfig) -> Result<Image> {
    cfg.validate()?;
    let s = sobel(image);
    let l = laplacian(image);
    let c = canny(image, cfg);
    let data = s
        .data()
        .iter()
        .zip(l.data())
        .zip(c.data())
        .map(|((s, l), c)| cfg.alpha * s + cfg.beta * l + cfg.gamma * c)
        .collect();
    let fused = Image::from_vec(s.height(), s.width(), 1, data)?;
    Ok(minmax_normalize(&fused).to_rgb())
}

/// Per-cell orientation histograms of an image.
#[derive(Clone, Debug, PartialEq)]
pub struct HogCells {
    pub cells_y: usize,
    pub cells_x: usize,
    /// Row-major cells, each `HOG_BINS` magnitudes.
    pub hist: Vec<[f64; HOG_BINS]>,
}

impl HogCells {
    pub fn cell(&self, cy: usize, cx: usize) -> &[f64; HOG_BINS] {
        &self.hist[cy * self.cells_x + cx]
    }
}

/// Unsigned orientation histograms over 8x8 cells with 9 bins centred at
/// 0, 20, ..., 160 degrees. Centred-difference gradients, replicate border,
/// magnitude votes split linearly between the two nearest bins.
pub fn hog_cells(image: &Image) -> Result<HogCells> {
    let gray = image.to_gray();
    let (h, w) = (gray.height(), gray.width());
    if h < HOG_CELL || w < HOG_CELL {
        return Err(Error::TooSmall {
            height: h,
            width: w,
            cell: HOG_CELL,
        });
    }
    let (cells_y, cells_x) = (h / HOG_CELL, w / HOG_CELL);
    let mut hist = vec![[0.0; HOG_BINS]; cells_y * cells_x];
    let bin_width = 180.0 / HOG_BINS as f64;
    for y in 0..cells_y * HOG_CELL {
        for x in 0..cells_x * HOG_CELL {
            let (yi, xi) = (y as isize, x as isize);
            let gx = gray.get_clamped(yi, xi + 1, 0) - gray.get_clamped(yi, xi - 1, 0);
            let gy = gray.get_clamped(yi + 1, xi, 0) - gray.get_clamped(yi - 1, xi, 0);
            let m = (gx * gx + gy * gy).sqrt();
            if m == 0.0 {
                continue;
            }
            let mut angle = gy.atan2(gx).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            if angle >= 180.0 {
                angle -= 180.0;
            }
            let pos = angle / bin_width;
            let lo = pos.floor();
            let frac = pos - lo;
            let b0 = lo as usize % HOG_BINS;
            let b1 = (b0 + 1) % HOG_BINS;
            let cell = &mut hist[(y / HOG_CELL) * cells_x + x / HOG_CELL];
            cell[b0] += m * (1.0 - frac);
            cell[b1] += m * frac;
        }
    }
    Ok(HogCells { cells_y, cells_x, hist })
}

/// Star-glyph rendering: each bin draws a line through its cell centre,
/// perpendicular to the bin's gradient direction, with the bin magnitude as
/// intensity. Pixels beyond the last full cell stay zero.
pub fn render_hog(cells: &HogCells, height: usize, width: usize) -> Image {
    let mut out = Image::zeros(height, width, 1);
    let half = HOG_CELL as f64 / 2.0;
    let bin_width = std::f64::consts::PI / HOG_BINS as f64;
    for cy in 0..cells.cells_y {
        for cx in 0..cells.cells_x {
            let hist = cells.cell(cy, cx);
            for (b, &v) in hist.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                let phi = b as f64 * bin_width + std::f64::consts::FRAC_PI_2;
                let (dirx, diry) = (phi.cos(), phi.sin());
                for py in 0..HOG_CELL {
                    for px in 0..HOG_CELL {
                        let dx = px as f64 + 0.5 - half;
                        let dy = py as f64 + 0.5 - half;
                        let along = dx * dirx + dy * diry;
                        let across = -dx * diry + dy * dirx;
                        if across.abs() <= 0.5 && along.abs() <= half {
                            let (y, x) = (cy * HOG_CELL + py, cx * HOG_CELL + px);
                            out.set(y, x, 0, out.get(y, x, 0) + v);
                        }
                    }
                }
            }
        }
    }
    out
}

/// HOG visualization rescaled so its maximum is 1 (zero stays zero),
/// replicated to three channels.
pub fn hog_texture(image: &Image) -> Result<Image> {
    let cells = hog_cells(image)?;
    let vis = render_hog(&cells, image.height(), image.width());
    let max = vis.max_value();
    let vis = if max > 0.0 { vis.map(|v| v / max) } else { vis };
    Ok(vis.to_rgb())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

    fn step(h: usize, w: usize, col: usize) -> Image {
        Image::from_fn(h, w, 1, |_, x, _| if x >= col { 1.0 } else { 0.0 })
    }

    #[test]
    fn sobel_max_is_the_brute_force_maximum() {
        let mut best: f64 = 0.0;
        for bits in 0u32..512 {
            let p = |i: usize| ((bits >> i) & 1) as f64;
            let mut gx = 0.0;
            let mut gy = 0.0;
            for r in 0..3 {
                for c in 0..3 {
                    gx += SOBEL_X[r][c] * p(r * 3 + c);
                    gy += SOBEL_Y[r][c] * p(r * 3 + c);
                }
            }
            best = best.max((gx * gx + gy * gy).sqrt());
        }
        assert!((best - SOBEL_MAX).abs() < 1e-12);
    }

    #[test]
    fn crop_identity_and_empty() {
        let img = Image::from_fn(4, 5, 3, |y, x, c| (y + x + c) as f64 / 12.0);
        assert_eq!(crop_to_bbox(&img, &Mask::ones(4, 5)).unwrap(), img);
        assert!(matches!(crop_to_bbox(&img, &Mask::zeros(4, 5)), Err(Error::EmptyMask)));
        assert!(matches!(crop_to_bbox(&img, &Mask::ones(3, 5)), Err(Error::Shape(_))));
    }

    #[test]
    fn crop_blackens_out_of_mask_pixels() {
        let img = Image::filled(8, 8, 3, 0.7);
        let mask = Mask::from_fn(8, 8, |y, x| {
            (y == 2 && x == 3) || (y == 5 && x == 6) || (y == 4 && x == 4)
        });
        let crop = crop_to_bbox(&img, &mask).unwrap();
        assert_eq!((crop.height(), crop.width()), (4, 4));
        assert_eq!(crop.get(0, 0, 0), 0.7);
        assert_eq!(crop.get(3, 3, 1), 0.7);
        assert_eq!(crop.get(2, 1, 2), 0.7);
        assert_eq!(crop.get(0, 3, 0), 0.0);
        assert_eq!(crop.data().iter().filter(|&&v| v > 0.0).count(), 9);
    }

    #[test]
    fn constant_images_have_no_high_frequency() {
        let img = Image::filled(16, 16, 3, 0.4);
        assert!(sobel(&img).data().iter().all(|&v| v == 0.0));
        assert!(laplacian(&img).data().iter().all(|&v| v == 0.0));
        assert!(canny(&img, &HfConfig::default()).data().iter().all(|&v| v == 0.0));
        let hf = high_frequency(&img, &HfConfig::default()).unwrap();
        assert_eq!(hf.channels(), 3);
        assert!(hf.data().iter().all(|&v| v == 0.0));
        assert!(hog_texture(&img).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ramp_has_zero_interior_laplacian() {
        let img = Image::from_fn(10, 10, 1, |_, x, _| x as f64 / 9.0);
        let l = laplacian(&img);
        for y in 1..9 {
            for x in 1..9 {
                assert!(l.get(y, x, 0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn step_edge_sobel_responds_on_two_columns() {
        let s = sobel(&step(8, 8, 4));
        for y in 0..8 {
            for x in 0..8 {
                let expected = if x == 3 || x == 4 { 4.0 / SOBEL_MAX } else { 0.0 };
                assert!((s.get(y, x, 0) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn canny_thins_step_to_one_column() {
        let e = canny(&step(12, 12, 6), &HfConfig::default());
        for y in 0..12 {
            let row: Vec<f64> = (0..12).map(|x| e.get(y, x, 0)).collect();
            assert_eq!(row.iter().sum::<f64>(), 1.0, "row {y}: {row:?}");
            assert_eq!(row[5], 1.0);
        }
    }

    #[test]
    fn canny_high_thresholds_reject_low_contrast() {
        let img = step(12, 12, 6).map(|v| 0.4 + 0.1 * v);
        let cfg = HfConfig {
            canny_low: 0.9,
            canny_high: 0.95,
            ..Default::default()
        };
        assert!(canny(&img, &cfg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hf_config_validation_lists_all_problems() {
        let cfg = HfConfig {
            alpha: -1.0,
            canny_low: 0.5,
            canny_high: 0.2,
            ..Default::default()
        };
        match cfg.validate() {
            Err(Error::Config(errs)) => assert_eq!(errs.len(), 3, "{errs:?}"),
            other => panic!("{other:?}"),
        }
        assert!(HfConfig::with_weights(0.0, 0.0, 0.0).validate().is_err());
    }

    #[test]
    fn hog_requires_a_full_cell() {
        assert!(matches!(
            hog_texture(&Image::zeros(7, 20, 1)),
            Err(Error::TooSmall { .. })
        ));
    }

    #[test]
    fn vertical_stripes_vote_into_the_horizontal_gradient_bin() {
        let img = Image::from_fn(16, 16, 1, |_, x, _| ((x / 2) % 2) as f64);
        let cells = hog_cells(&img).unwrap();
        for h in &cells.hist {
            let total: f64 = h.iter().sum();
            assert!(total > 0.0);
            assert!((h[0] - total).abs() < 1e-12);
        }
        let vis = hog_texture(&img).unwrap();
        // glyph for bin 0 is a vertical bar through the cell centre
        assert!(vis.get(1, 3, 0) > 0.0 && vis.get(6, 4, 0) > 0.0);
        assert_eq!(vis.get(3, 0, 0), 0.0);
        assert!((vis.max_value() - 1.0).abs() < 1e-12);
    }
}

//! Straightforward re-derivations of the image operators, written from their
//! definitions with explicit kernels and no shared helpers from the library.
#![allow(dead_code)]

use stitchlab_core::features::HfConfig;
use stitchlab_core::Image;

pub struct Map {
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    fn at(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.v[y * self.w + x]
    }

    fn at_or_zero(&self, y: isize, x: isize) -> f64 {
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            0.0
        } else {
            self.v[y as usize * self.w + x as usize]
        }
    }

    pub fn max_abs_diff(&self, img: &Image, channel: usize) -> f64 {
        assert_eq!((img.height(), img.width()), (self.h, self.w));
        let mut worst: f64 = 0.0;
        for y in 0..self.h {
            for x in 0..self.w {
                worst = worst.max((self.v[y * self.w + x] - img.get(y, x, channel)).abs());
            }
        }
        worst
    }
}

pub fn gray(img: &Image) -> Map {
    let (h, w) = (img.height(), img.width());
    let mut v = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            v[y * w + x] = if img.channels() == 1 {
                img.get(y, x, 0)
            } else {
                0.299 * img.get(y, x, 0) + 0.587 * img.get(y, x, 1) + 0.114 * img.get(y, x, 2)
            };
        }
    }
    Map { h, w, v }
}

const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const KY: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

fn correlate3(m: &Map, k: &[[f64; 3]; 3]) -> Vec<f64> {
    let mut out = vec![0.0; m.h * m.w];
    for y in 0..m.h {
        for x in 0..m.w {
            let mut acc = 0.0;
            for (i, row) in k.iter().enumerate() {
                for (j, &kv) in row.iter().enumerate() {
                    acc += kv * m.at(y as isize + i as isize - 1, x as isize + j as isize - 1);
                }
            }
            out[y * m.w + x] = acc;
        }
    }
    out
}

/// Largest gradient magnitude over every binary 3x3 patch.
pub fn sobel_bound() -> f64 {
    let mut best: f64 = 0.0;
    for bits in 0u32..512 {
        let p = |i: usize, j: usize| ((bits >> (3 * i + j)) & 1) as f64;
        let (mut gx, mut gy) = (0.0, 0.0);
        for i in 0..3 {
            for j in 0..3 {
                gx += KX[i][j] * p(i, j);
                gy += KY[i][j] * p(i, j);
            }
        }
        best = best.max((gx * gx + gy * gy).sqrt());
    }
    best
}

fn gradients(m: &Map) -> (Vec<f64>, Vec<f64>) {
    (correlate3(m, &KX), correlate3(m, &KY))
}

pub fn sobel(img: &Image) -> Map {
    let m = gray(img);
    let bound = sobel_bound();
    let (gx, gy) = gradients(&m);
    let v = gx
        .iter()
        .zip(&gy)
        .map(|(a, b)| (a.hypot(*b) / bound).min(1.0))
        .collect();
    Map { h: m.h, w: m.w, v }
}

pub fn laplacian(img: &Image) -> Map {
    let m = gray(img);
    let k = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];
    let v = correlate3(&m, &k)
        .into_iter()
        .map(|r| (r.abs() / 4.0).min(1.0))
        .collect();
    Map { h: m.h, w: m.w, v }
}

fn blur(m: &Map, sigma: f64) -> Map {
    let g1: Vec<f64> = (-2i32..=2)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = g1.iter().sum();
    let mut v = vec![0.0; m.h * m.w];
    for y in 0..m.h {
        for x in 0..m.w {
            let mut acc = 0.0;
            for i in 0..5 {
                for j in 0..5 {
                    let wgt = g1[i] * g1[j] / (total * total);
                    acc += wgt * m.at(y as isize + i as isize - 2, x as isize + j as isize - 2);
                }
            }
            v[y * m.w + x] = acc;
        }
    }
    Map { h: m.h, w: m.w, v }
}

pub fn canny(img: &Image, cfg: &HfConfig) -> Map {
    let b = blur(&gray(img), cfg.canny_sigma);
    let bound = sobel_bound();
    let (gx, gy) = gradients(&b);
    let mag = Map {
        h: b.h,
        w: b.w,
        v: gx.iter().zip(&gy).map(|(a, c)| a.hypot(*c) / bound).collect(),
    };
    let (h, w) = (b.h, b.w);
    let mut thin = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = mag.v[i];
            if m <= 0.0 {
                continue;
            }
            let mut deg = gy[i].atan2(gx[i]) * 180.0 / std::f64::consts::PI;
            if deg < 0.0 {
                deg += 180.0;
            }
            let (dy, dx) = if !(22.5..157.5).contains(&deg) {
                (0, 1)
            } else if deg < 67.5 {
                (1, 1)
            } else if deg < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let before = mag.at_or_zero(y as isize - dy, x as isize - dx);
            let after = mag.at_or_zero(y as isize + dy, x as isize + dx);
            if m - before > 1e-12 && m - after >= -1e-12 {
                thin[i] = m;
            }
        }
    }
    let mut edge: Vec<bool> = thin.iter().map(|&m| m >= cfg.canny_high).collect();
    loop {
        let mut grew = false;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if edge[i] || thin[i] < cfg.canny_low {
                    continue;
                }
                let touches = (-1isize..=1).any(|dy| {
                    (-1isize..=1).any(|dx| {
                        let (ny, nx) = (y as isize + dy, x as isize + dx);
                        ny >= 0 && nx >= 0 && ny < h as isize && nx < w as isize && edge[ny as usize * w + nx as usize]
                    })
                });
                if touches {
                    edge[i] = true;
                    grew = true;
                }
            }
        }
        if !grew {
            break;
        }
    }
    Map {
        h,
        w,
        v: edge.into_iter().map(|e| if e { 1.0 } else { 0.0 }).collect(),
    }
}

pub fn high_frequency(img: &Image, cfg: &HfConfig) -> Map {
    let (s, l, c) = (sobel(img), laplacian(img), canny(img, cfg));
    let fused: Vec<f64> = (0..s.v.len())
        .map(|i| cfg.alpha * s.v[i] + cfg.beta * l.v[i] + cfg.gamma * c.v[i])
        .collect();
    let lo = fused.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = fused.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let v = if hi > lo {
        fused.iter().map(|f| (f - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; fused.len()]
    };
    Map { h: s.h, w: s.w, v }
}

/// Per-cell 9-bin unsigned orientation histograms drawn as line glyphs and
/// scaled to a unit maximum.
pub fn hog_texture(img: &Image) -> Map {
    let m = gray(img);
    let (cy_n, cx_n) = (m.h / 8, m.w / 8);
    let mut vis = vec![0.0; m.h * m.w];
    for cy in 0..cy_n {
        for cx in 0..cx_n {
            let mut hist = [0.0f64; 9];
            for y in cy * 8..cy * 8 + 8 {
                for x in cx * 8..cx * 8 + 8 {
                    let (yi, xi) = (y as isize, x as isize);
                    let gx = m.at(yi, xi + 1) - m.at(yi, xi - 1);
                    let gy = m.at(yi + 1, xi) - m.at(yi - 1, xi);
                    let mag = (gx * gx + gy * gy).sqrt();
                    if mag == 0.0 {
                        continue;
                    }
                    let mut deg = gy.atan2(gx).to_degrees();
                    while deg < 0.0 {
                        deg += 180.0;
                    }
                    while deg >= 180.0 {
                        deg -= 180.0;
                    }
                    let lower = (deg / 20.0).floor();
                    let t = deg / 20.0 - lower;
                    let b = lower as usize % 9;
                    hist[b] += mag * (1.0 - t);
                    hist[(b + 1) % 9] += mag * t;
                }
            }
            for (b, &val) in hist.iter().enumerate() {
                if val == 0.0 {
                    continue;
                }
                let phi = (b as f64 * 20.0 + 90.0).to_radians();
                for py in 0..8 {
                    for px in 0..8 {
                        let (dx, dy) = (px as f64 + 0.5 - 4.0, py as f64 + 0.5 - 4.0);
                        let along = dx * phi.cos() + dy * phi.sin();
                        let across = dy * phi.cos() - dx * phi.sin();
                        if across.abs() <= 0.5 && along.abs() <= 4.0 {
                            vis[(cy * 8 + py) * m.w + cx * 8 + px] += val;
                        }
                    }
                }
            }
        }
    }
    let max = vis.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for v in &mut vis {
            *v /= max;
        }
    }
    Map { h: m.h, w: m.w, v: vis }
}

//! Procedural toy assembly scenes: textured backgrounds, one posed component
//! with an exact mask, optional stamped text, and multi-view reference sets.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::font;
use crate::image::{Image, Mask, ReferenceSet};
use crate::seed::{Rng, Seed};

pub const SIZE: usize = 32;
pub const BACKGROUND_STYLES: u8 = 4;
pub const GLYPH_VALUE: f64 = 0.02;
const BG_RANGE: (f64, f64) = (0.05, 0.5);
const FG_MIN: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ShapeId {
    #[serde(rename = "bolt-hexagon")]
    Hexagon,
    #[serde(rename = "washer-annulus")]
    Annulus,
    #[serde(rename = "bracket-L")]
    BracketL,
    #[serde(rename = "clip-T")]
    ClipT,
    #[serde(rename = "plate-rect")]
    Plate,
}

impl ShapeId {
    pub const ALL: [ShapeId; 5] = [
        ShapeId::Hexagon,
        ShapeId::Annulus,
        ShapeId::BracketL,
        ShapeId::ClipT,
        ShapeId::Plate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeId::Hexagon => "bolt-hexagon",
            ShapeId::Annulus => "washer-annulus",
            ShapeId::BracketL => "bracket-L",
            ShapeId::ClipT => "clip-T",
            ShapeId::Plate => "plate-rect",
        }
    }

    pub fn label(self) -> usize {
        ShapeId::ALL.iter().position(|&s| s == self).expect("catalog member")
    }

    pub fn from_label(label: usize) -> Option<ShapeId> {
        ShapeId::ALL.get(label).copied()
    }

    pub fn from_name(name: &str) -> Option<ShapeId> {
        ShapeId::ALL.iter().copied().find(|s| s.name() == name)
    }

    /// Whether text can be stamped on the part.
    pub fn carries_text(self) -> bool {
        matches!(self, ShapeId::Hexagon | ShapeId::Plate)
    }

    pub fn tint(self) -> [f64; 3] {
        match self {
            ShapeId::Hexagon => [0.78, 0.80, 0.85],
            ShapeId::Annulus => [0.92, 0.82, 0.62],
            ShapeId::BracketL => [0.66, 0.86, 0.70],
            ShapeId::ClipT => [0.90, 0.68, 0.66],
            ShapeId::Plate => [0.70, 0.76, 0.94],
        }
    }

    /// Membership in part-local coordinates (unit scale).
    pub fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeId::Hexagon => {
                let r = 7.0;
                let s3 = 3f64.sqrt();
                v.abs() <= r * s3 / 2.0 && s3 * u.abs() + v.abs() <= s3 * r
            }
            ShapeId::Annulus => {
                let r2 = u * u + v * v;
                (9.0..=49.0).contains(&r2)
            }
            ShapeId::BracketL => {
                ((-6.0..=-2.0).contains(&u) && (-6.0..=6.0).contains(&v))
                    || ((-6.0..=6.0).contains(&u) && (2.0..=6.0).contains(&v))
            }
            ShapeId::ClipT => {
                ((-6.0..=6.0).contains(&u) && (-6.0..=-2.0).contains(&v))
                    || ((-2.0..=2.0).contains(&u) && (-6.0..=6.0).contains(&v))
            }
            ShapeId::Plate => u.abs() <= 7.0 && v.abs() <= 4.0,
        }
    }
}

/// Largest distance of any part point from its origin at unit scale.
pub const PART_RADIUS: f64 = 8.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anomaly {
    Normal,
    Missing,
    /// Mirrored placement, a pose no rotation reaches.
    Misposed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation_deg: f64,
    /// Foreshortening of the part's local vertical axis, `cos(tilt)`.
    pub tilt_deg: f64,
    pub tx: f64,
    pub ty: f64,
    pub scale: f64,
}

impl Pose {
    pub fn centered(rotation_deg: f64, tilt_deg: f64, scale: f64) -> Self {
        Pose {
            rotation_deg,
            tilt_deg,
            tx: 0.0,
            ty: 0.0,
            scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(0.0..360.0).contains(&self.rotation_deg) {
            errs.push(format!("rotation {} outside [0, 360)", self.rotation_deg));
        }
        if !(0.5..=1.5).contains(&self.scale) {
            errs.push(format!("scale {} outside [0.5, 1.5]", self.scale));
        }
        if !(0.0..80.0).contains(&self.tilt_deg) {
            errs.push(format!("tilt {} outside [0, 80)", self.tilt_deg));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub background_style: u8,
    pub shape: ShapeId,
    pub pose: Pose,
    pub glyph: Option<String>,
    pub anomaly: Anomaly,
}

/// Part coverage on the pixel grid extended by `pad` on every side; index
/// `(y + pad) * (SIZE + 2 pad) + x + pad`.
fn coverage(shape: ShapeId, pose: &Pose, mirrored: bool, pad: usize) -> Vec<bool> {
    let n = SIZE + 2 * pad;
    let (cx, cy) = (SIZE as f64 / 2.0 + pose.tx, SIZE as f64 / 2.0 + pose.ty);
    let th = pose.rotation_deg.to_radians();
    let (s, c) = th.sin_cos();
    let squash = pose.tilt_deg.to_radians().cos();
    let mut out = vec![false; n * n];
    for gy in 0..n {
        for gx in 0..n {
            let dx = gx as f64 - pad as f64 + 0.5 - cx;
            let dy = gy as f64 - pad as f64 + 0.5 - cy;
            let mut u = (c * dx + s * dy) / pose.scale;
            let v = (-s * dx + c * dy) / (pose.scale * squash);
            if mirrored {
                u = -u;
            }
            out[gy * n + gx] = shape.contains(u, v);
        }
    }
    out
}

/// Exact part mask; `Placement` error if any part pixel leaves the frame.
pub fn part_mask(shape: ShapeId, pose: &Pose, mirrored: bool) -> Result<Mask> {
    let pad = SIZE;
    let n = SIZE + 2 * pad;
    let cov = coverage(shape, pose, mirrored, pad);
    let inside = |gy: usize, gx: usize| (pad..pad + SIZE).contains(&gy) && (pad..pad + SIZE).contains(&gx);
    let outside = (0..n * n).filter(|&i| cov[i] && !inside(i / n, i % n)).count();
    if outside > 0 {
        return Err(Error::Placement(format!(
            "{} at ({:.2}, {:.2}) scale {:.2} leaves {outside} pixels outside the frame",
            shape.name(),
            pose.tx,
            pose.ty,
            pose.scale
        )));
    }
    Ok(Mask::from_fn(SIZE, SIZE, |y, x| cov[(y + pad) * n + x + pad]))
}

pub fn render_background(style: u8, rng: &mut Rng) -> Image {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.12..0.38));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let period = rng.random_range(4.0..9.0);
    let noise: Vec<f64> = (0..SIZE * SIZE).map(|_| rng.random_range(-0.03..0.03)).collect();
    let (ga, gb) = angle.sin_cos();
    Image::from_fn(SIZE, SIZE, 3, |y, x, c| {
        let (fy, fx) = (y as f64 / SIZE as f64 - 0.5, x as f64 / SIZE as f64 - 0.5);
        let grad = 0.1 * (ga * fy + gb * fx);
        let pattern = match style % BACKGROUND_STYLES {
            0 => 0.0,
            1 => 0.04 * (std::f64::consts::TAU * y as f64 / period).sin(),
            2 => {
                let p = period as usize;
                if (y / p + x / p).is_multiple_of(2) {
                    0.04
                } else {
                    -0.04
                }
            }
            _ => 0.06 * (fy * fy + fx * fx).sqrt() - 0.02,
        };
        let tone = 1.0 - 0.15 * c as f64;
        (base[c] + grad + pattern * tone + noise[y * SIZE + x]).clamp(BG_RANGE.0, BG_RANGE.1)
    })
    .quantize8()
}

fn paint_part(canvas: &mut Image, mask: &Mask, tint: [f64; 3], cy: f64) {
    for y in 0..SIZE {
        for x in 0..SIZE {
            if mask.get(y, x) {
                let light = 1.0 - 0.1 * (y as f64 + 0.5 - cy) / SIZE as f64;
                for (c, t) in tint.iter().enumerate() {
                    canvas.set(y, x, c, (t * light).clamp(FG_MIN, 1.0));
                }
            }
        }
    }
}

/// Stamps `text` centred on `(cy, cx)`, clipped to the mask. Returns the
/// number of stamped pixels.
fn stamp_text(canvas: &mut Image, mask: &Mask, text: &str, cy: f64, cx: f64) -> usize {
    let (h, w, bits) = font::rasterize(text);
    let top = (cy - h as f64 / 2.0).round() as isize;
    let left = (cx - w as f64 / 2.0).round() as isize;
    let mut n = 0;
    for gy in 0..h {
        for gx in 0..w {
            if !bits[gy * w + gx] {
                continue;
            }
            let (y, x) = (top + gy as isize, left + gx as isize);
            if y < 0 || x < 0 || y >= SIZE as isize || x >= SIZE as isize {
                continue;
            }
            let (y, x) = (y as usize, x as usize);
            if mask.get(y, x) {
                for c in 0..3 {
                    canvas.set(y, x, c, GLYPH_VALUE);
                }
                n += 1;
            }
        }
    }
    n
}

/// 32x32 scene and the exact foreground mask (empty for missing parts).
pub fn render_scene(spec: &SceneSpec, seed: Seed) -> Result<(Image, Mask)> {
    spec.pose.validate()?;
    if let Some(g) = &spec.glyph {
        let n = g.chars().count();
        if !(1..=3).contains(&n) || g.chars().any(|c| font::glyph(c).is_none()) {
            return Err(Error::Input(format!(
                "glyph {g:?} must be 1-3 characters from {}",
                font::CHARSET
            )));
        }
    }
    let mut rng = seed.rng();
    let mut image = render_background(spec.background_style, &mut rng);
    let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.03..0.03));
    if spec.anomaly == Anomaly::Missing {
        return Ok((image, Mask::zeros(SIZE, SIZE)));
    }
    let mask = part_mask(spec.shape, &spec.pose, spec.anomaly == Anomaly::Misposed)?;
    let base = spec.shape.tint();
    let tint = std::array::from_fn(|c| base[c] + jitter[c]);
    let (cy, cx) = (SIZE as f64 / 2.0 + spec.pose.ty, SIZE as f64 / 2.0 + spec.pose.tx);
    paint_part(&mut image, &mask, tint, cy);
    if let Some(text) = &spec.glyph {
        stamp_text(&mut image, &mask, text, cy, cx);
    }
    Ok((image.quantize8(), mask))
}

pub const REFERENCE_VIEWS: usize = 5;
const VIEW_TILTS: [f64; REFERENCE_VIEWS] = [0.0, 25.0, 40.0, 15.0, 50.0];

/// Views on black at five distinct rotations and tilts, without text.
pub fn make_reference_set(shape: ShapeId, seed: Seed) -> Result<ReferenceSet> {
    let mut rng = seed.child(shape.name()).rng();
    let offset = rng.random_range(0.0..72.0);
    let mut views = Vec::with_capacity(REFERENCE_VIEWS);
    for (k, &tilt) in VIEW_TILTS.iter().enumerate() {
        let rot = (offset + 72.0 * k as f64 + rng.random_range(-10.0..10.0)).rem_euclid(360.0);
        let pose = Pose::centered(rot, tilt, 1.3);
        let mask = part_mask(shape, &pose, false)?;
        let mut img = Image::zeros(SIZE, SIZE, 3);
        paint_part(&mut img, &mask, shape.tint(), SIZE as f64 / 2.0);
        let img = img.quantize8();
        let derived = Mask::from_nonzero(&img);
        debug_assert_eq!(derived, mask);
        views.push((img, derived));
    }
    ReferenceSet::new(views)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub train: usize,
    pub test: usize,
    pub missing_rate: f64,
    pub misposed_rate: f64,
    /// Probability that a text-capable part carries a stamp.
    pub text_rate: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub tilt_max: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train: 512,
            test: 128,
            missing_rate: 0.05,
            misposed_rate: 0.10,
            text_rate: 0.5,
            scale_min: 0.8,
            scale_max: 1.3,
            tilt_max: 40.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.train == 0 || self.test == 0 {
            errs.push("dataset.train and dataset.test must be positive".into());
        }
        for (name, p) in [
            ("dataset.missing_rate", self.missing_rate),
            ("dataset.misposed_rate", self.misposed_rate),
            ("dataset.text_rate", self.text_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                errs.push(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.missing_rate + self.misposed_rate > 1.0 {
            errs.push("dataset.missing_rate + dataset.misposed_rate must not exceed 1".into());
        }
        if !(0.5 <= self.scale_min && self.scale_min <= self.scale_max && self.scale_max * PART_RADIUS < 15.0) {
            errs.push(format!(
                "dataset.scale_min/scale_max must satisfy 0.5 <= min <= max < {:.3}",
                15.0 / PART_RADIUS
            ));
        }
        if !(0.0..80.0).contains(&self.tilt_max) {
            errs.push("dataset.tilt_max must lie in [0, 80)".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

pub fn random_text(rng: &mut Rng) -> String {
    let chars: Vec<char> = font::CHARSET.chars().collect();
    let n = rng.random_range(1..=3);
    (0..n).map(|_| chars[rng.random_range(0..chars.len())]).collect()
}

/// Draws a scene of `shape` that fits in the frame.
pub fn sample_spec(shape: ShapeId, cfg: &DatasetConfig, rng: &mut Rng) -> SceneSpec {
    let u: f64 = rng.random();
    let anomaly = if u < cfg.missing_rate {
        Anomaly::Missing
    } else if u < cfg.missing_rate + cfg.misposed_rate {
        Anomaly::Misposed
    } else {
        Anomaly::Normal
    };
    let scale = rng.random_range(cfg.scale_min..=cfg.scale_max);
    let reach = (SIZE as f64 / 2.0 - 1.0 - PART_RADIUS * scale).max(0.0);
    let pose = Pose {
        rotation_deg: rng.random_range(0.0..360.0),
        tilt_deg: rng.random_range(0.0..=cfg.tilt_max),
        tx: rng.random_range(-reach..=reach),
        ty: rng.random_range(-reach..=reach),
        scale,
    };
    let wants_text = rng.random::<f64>() < cfg.text_rate;
    let text = random_text(rng);
    let glyph = (shape.carries_text() && wants_text && anomaly != Anomaly::Missing).then_some(text);
    SceneSpec {
        background_style: rng.random_range(0..BACKGROUND_STYLES),
        shape,
        pose,
        glyph,
        anomaly,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: usize,
    pub split: Split,
    pub spec: SceneSpec,
    pub image: String,
    pub mask: String,
    pub references: String,
    pub has_text: bool,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRecord {
    pub shape: ShapeId,
    pub views: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub config: DatasetConfig,
    pub items: Vec<ItemRecord>,
    pub references: Vec<ReferenceRecord>,
}

pub const MANIFEST: &str = "manifest.json";

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ItemRecord> {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn reference_set(&self, root: &Path, shape: ShapeId) -> Result<ReferenceSet> {
        let rec = self
            .references
            .iter()
            .find(|r| r.shape == shape)
            .ok_or_else(|| Error::Input(format!("no reference set for {}", shape.name())))?;
        load_reference_dir(&root.join("references").join(shape.name()), rec.views.len())
    }
}

/// Reads `0.png .. {n-1}.png`; masks are the non-black pixels.
pub fn load_reference_dir(dir: &Path, n: usize) -> Result<ReferenceSet> {
    let mut views = Vec::with_capacity(n);
    for k in 0..n {
        let img = Image::load_png(dir.join(format!("{k}.png")))?;
        let mask = Mask::from_nonzero(&img);
        views.push((img, mask));
    }
    ReferenceSet::new(views)
}

/// Reference directory with however many numbered views it holds.
pub fn load_reference_views(dir: &Path) -> Result<ReferenceSet> {
    let mut n = 0;
    while dir.join(format!("{n}.png")).exists() {
        n += 1;
    }
    if n == 0 {
        return Err(Error::Input(format!("no numbered views in {}", dir.display())));
    }
    load_reference_dir(dir, n)
}

pub fn scene_seed(seed: u64, id: usize) -> Seed {
    Seed(seed).child("scene").index(id as u64)
}

fn write_png(root: &Path, rel: &str, img: &Image) -> Result<()> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_png(&path)
}

/// Writes the full dataset under `root` and returns its manifest.
pub fn build_dataset(root: &Path, cfg: &DatasetConfig, seed: u64) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut references = Vec::new();
    for shape in ShapeId::ALL {
        let set = make_reference_set(shape, Seed(seed).child("references"))?;
        let mut views = Vec::new();
        for (k, (img, _)) in set.views().iter().enumerate() {
            let rel = format!("references/{}/{k}.png", shape.name());
            write_png(root, &rel, img)?;
            views.push(rel);
        }
        references.push(ReferenceRecord { shape, views });
    }

    let total = cfg.train + cfg.test;
    let mut shapes: Vec<ShapeId> = (0..total).map(|i| ShapeId::ALL[i % ShapeId::ALL.len()]).collect();
    let mut order_rng = Seed(seed).child("order").rng();
    shapes.shuffle(&mut order_rng);
    let mut items = Vec::with_capacity(total);
    for (id, &shape) in shapes.iter().enumerate() {
        let split = if id < cfg.train { Split::Train } else { Split::Test };
        let mut spec_rng = Seed(seed).child("spec").index(id as u64).rng();
        let spec = sample_spec(shape, cfg, &mut spec_rng);
        let (img, mask) = render_scene(&spec, scene_seed(seed, id))?;
        let image = format!("{}/images/{id:04}.png", split.dir());
        let mask_rel = format!("{}/masks/{id:04}.png", split.dir());
        write_png(root, &image, &img)?;
        let mask_path = root.join(&mask_rel);
        if let Some(parent) = mask_path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        mask.save_png(&mask_path)?;
        items.push(ItemRecord {
            id,
            split,
            has_text: spec.glyph.is_some(),
            label: shape.label(),
            references: format!("references/{}", shape.name()),
            spec,
            image,
            mask: mask_rel,
        });
    }
    let manifest = DatasetManifest {
        seed,
        config: cfg.clone(),
        items,
        references,
    };
    let path = root.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// One loaded dataset item.
#[derive(Clone, Debug)]
pub struct Sample {
    pub record: ItemRecord,
    pub image: Image,
    pub mask: Mask,
}

impl Sample {
    pub fn shape(&self) -> ShapeId {
        self.record.spec.shape
    }
}

pub fn load_split(root: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<Sample>> {
    manifest
        .split(split)
        .map(|r| {
            Ok(Sample {
                image: Image::load_png(root.join(&r.image))?,
                mask: Mask::load_png(root.join(&r.mask))?,
                record: r.clone(),
            })
        })
        .collect()
}

//! Frozen, seed-pinned image encoder turning each decoupled stream into a
//! token sequence, and the reference-set conditioning built on top of it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{crop_to_bbox, high_frequency, hog_texture, HfConfig};
use crate::image::{Image, ReferenceSet};
use crate::nn::{uniform_tensor, Init, Mlp2, ParamId, ParamStore, Tensor};
use crate::seed::Seed;
use crate::tensorfile;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 32,
            patch: 4,
            dim: 64,
            hidden: 64,
            seed: 1234,
        }
    }
}

impl EncoderConfig {
    pub fn tokens(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            errs.push(format!(
                "encoder.image_size {} must be a multiple of encoder.patch {}",
                self.image_size, self.patch
            ));
        }
        if self.dim == 0 || !self.dim.is_multiple_of(2) {
            errs.push("encoder.dim must be even and positive".into());
        }
        if self.hidden == 0 {
            errs.push("encoder.hidden must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Ordered embedding vectors of equal width.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    count: usize,
    dim: usize,
    data: Vec<f64>,
}

impl TokenSequence {
    pub fn new(count: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != count * dim {
            return Err(Error::Shape(format!(
                "{} values cannot form {count} tokens of dim {dim}",
                data.len()
            )));
        }
        Ok(TokenSequence { count, dim, data })
    }

    pub fn zeros(count: usize, dim: usize) -> Self {
        TokenSequence {
            count,
            dim,
            data: vec![0.0; count * dim],
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn mean_pool(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for tok in self.data.chunks_exact(self.dim) {
            for (o, v) in out.iter_mut().zip(tok) {
                *o += v;
            }
        }
        let n = self.count.max(1) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }

    /// Elementwise mean of several sequences of equal shape.
    pub fn average(seqs: &[TokenSequence]) -> Result<TokenSequence> {
        let first = seqs
            .first()
            .ok_or_else(|| Error::Input("no sequences to average".into()))?;
        let mut data = vec![0.0; first.data.len()];
        for s in seqs {
            if s.count != first.count || s.dim != first.dim {
                return Err(Error::Shape("token sequences differ in shape".into()));
            }
            for (d, v) in data.iter_mut().zip(&s.data) {
                *d += v;
            }
        }
        let n = seqs.len() as f64;
        data.iter_mut().for_each(|v| *v /= n);
        TokenSequence::new(first.count, first.dim, data)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.count, self.dim], self.data.clone()).expect("consistent shape")
    }
}

/// Cosine similarity of the mean-pooled tokens (0 when either is all zeros).
pub fn similarity(a: &TokenSequence, b: &TokenSequence) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::Shape(format!("token dims {} and {} differ", a.dim, b.dim)));
    }
    Ok(cosine(&a.mean_pool(), &b.mean_pool()))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Transformer-style sinusoidal table `[tokens, dim]`: even columns
/// `sin(p * w_i)`, odd columns `cos(p * w_i)`, `w_i = 10000^(-2i/dim)`.
pub fn sinusoidal_table(tokens: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; tokens * dim];
    for p in 0..tokens {
        for i in 0..dim / 2 {
            let w = 10000f64.powf(-2.0 * i as f64 / dim as f64);
            data[p * dim + 2 * i] = (p as f64 * w).sin();
            data[p * dim + 2 * i + 1] = (p as f64 * w).cos();
        }
    }
    Tensor::new(&[tokens, dim], data).expect("table shape")
}

/// Linear patch embedding plus fixed positions, followed by a tokenwise
/// two-layer MLP. Weights never change after construction.
#[derive(Clone, Debug)]
pub struct ConditionEncoder {
    cfg: EncoderConfig,
    store: ParamStore,
    patch_proj: ParamId,
    positions: ParamId,
    head: Mlp2,
}

impl ConditionEncoder {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Seed(cfg.seed).child("encoder").rng();
        let mut store = ParamStore::new();
        let patch_len = cfg.patch * cfg.patch * 3;
        let patch_proj = store.add(
            "encoder.patch_proj",
            uniform_tensor(&[patch_len, cfg.dim], 1.0 / (patch_len as f64).sqrt(), &mut rng),
        );
        let positions = store.add("encoder.positions", sinusoidal_table(cfg.tokens(), cfg.dim));
        let head = Mlp2::new(
            &mut store,
            "encoder.head",
            [cfg.dim, cfg.hidden, cfg.dim],
            Init::Default,
            &mut rng,
        );
        Ok(ConditionEncoder {
            cfg: cfg.clone(),
            store,
            patch_proj,
            positions,
            head,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn tokens(&self) -> usize {
        self.cfg.tokens()
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    /// Flattened patches `[tokens, patch*patch*3]` of the image resized to
    /// the encoder input size.
    pub fn patches(&self, image: &Image) -> Tensor {
        let n = self.cfg.image_size;
        let img = image.to_rgb().resize(n, n);
        let (p, side) = (self.cfg.patch, n / self.cfg.patch);
        let plen = p * p * 3;
        let mut data = vec![0.0; side * side * plen];
        for py in 0..side {
            for px in 0..side {
                let tok = py * side + px;
                for dy in 0..p {
                    for dx in 0..p {
                        for c in 0..3 {
                            data[tok * plen + (dy * p + dx) * 3 + c] = img.get(py * p + dy, px * p + dx, c);
                        }
                    }
                }
            }
        }
        Tensor::new(&[side * side, plen], data).expect("patch shape")
    }

    /// Token embeddings before the tokenwise head.
    pub fn embed_patches(&self, image: &Image) -> Tensor {
        let mut x = crate::nn::matmul(&self.patches(image), self.store.get(self.patch_proj)).expect("patch proj");
        x.add_assign(self.store.get(self.positions));
        x
    }

    pub fn encode(&self, image: &Image) -> TokenSequence {
        let y = self.head.apply(&self.store, &self.embed_patches(image));
        TokenSequence::new(self.tokens(), self.cfg.dim, y.into_data()).expect("head shape")
    }

    /// Writes the weights as a tensor file plus manifest.
    pub fn save(&self, bin: &Path, manifest: &Path) -> Result<()> {
        tensorfile::write(bin, manifest, &self.store, serde_json::to_value(&self.cfg)?)
    }

    pub fn load(bin: &Path, manifest: &Path) -> Result<Self> {
        let (tensors, m) = tensorfile::read(bin, manifest)?;
        let cfg: EncoderConfig = serde_json::from_value(m.meta)?;
        let mut enc = ConditionEncoder::new(&cfg)?;
        enc.store.load_from(tensors)?;
        Ok(enc)
    }
}

/// The three decoupled condition streams.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub rgb: TokenSequence,
    pub hf: TokenSequence,
    pub texture: TokenSequence,
}

impl FeatureBundle {
    pub fn streams(&self) -> [&TokenSequence; 3] {
        [&self.rgb, &self.hf, &self.texture]
    }

    pub fn check(&self) -> Result<(usize, usize)> {
        let (n, d) = (self.rgb.count, self.rgb.dim);
        for s in [&self.hf, &self.texture] {
            if s.count != n || s.dim != d {
                return Err(Error::Shape(format!(
                    "stream shapes differ: {n}x{d} vs {}x{}",
                    s.count, s.dim
                )));
            }
        }
        Ok((n, d))
    }

    /// Elementwise mean of the three streams.
    pub fn mean(&self) -> TokenSequence {
        TokenSequence::average(&[self.rgb.clone(), self.hf.clone(), self.texture.clone()]).expect("checked shapes")
    }
}

/// Per-view streams: the segmented crop (resized to the encoder input), its
/// high-frequency map and its HOG texture rendering.
pub fn decouple_view(view: &Image, mask: &crate::image::Mask, size: usize, hf: &HfConfig) -> Result<[Image; 3]> {
    let crop = crop_to_bbox(view, mask)?.to_rgb().resize(size, size);
    let hf_map = high_frequency(&crop, hf)?;
    let tex = hog_texture(&crop)?;
    Ok([crop, hf_map, tex])
}

/// Encodes a reference set into a [`FeatureBundle`], averaging tokens over
/// views. With `decouple` off, every stream carries the RGB tokens of the
/// unsegmented views.
pub fn encode_reference_set(
    refs: &ReferenceSet,
    encoder: &ConditionEncoder,
    hf: &HfConfig,
    decouple: bool,
) -> Result<FeatureBundle> {
    let size = encoder.config().image_size;
    let mut streams: [Vec<TokenSequence>; 3] = Default::default();
    for (view, mask) in refs.views() {
        if decouple {
            for (k, img) in decouple_view(view, mask, size, hf)?.iter().enumerate() {
                streams[k].push(encoder.encode(img));
            }
        } else {
            streams[0].push(encoder.encode(view));
        }
    }
    let rgb = TokenSequence::average(&streams[0])?;
    if !decouple {
        return Ok(FeatureBundle {
            hf: rgb.clone(),
            texture: rgb.clone(),
            rgb,
        });
    }
    Ok(FeatureBundle {
        rgb,
        hf: TokenSequence::average(&streams[1])?,
        texture: TokenSequence::average(&streams[2])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Mask;

    fn enc() -> ConditionEncoder {
        ConditionEncoder::new(&EncoderConfig::default()).unwrap()
    }

    #[test]
    fn default_shapes() {
        let e = enc();
        let t = e.encode(&Image::filled(32, 32, 3, 0.3));
        assert_eq!((t.count(), t.dim()), (64, 64));
    }

    #[test]
    fn same_seed_same_weights() {
        assert_eq!(enc().params(), enc().params());
        let other = ConditionEncoder::new(&EncoderConfig {
            seed: 99,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(enc().params(), other.params());
    }

    #[test]
    fn zero_image_is_positions_through_head() {
        let e = enc();
        let t = e.encode(&Image::zeros(32, 32, 3));
        let expect = e.head.apply(&e.store, e.store.get(e.positions));
        assert_eq!(t.data(), expect.data());
    }

    #[test]
    fn one_patch_change_moves_one_token() {
        let e = enc();
        let a = Image::from_fn(32, 32, 3, |y, x, c| ((y * 3 + x * 5 + c) % 7) as f64 / 7.0);
        let mut b = a.clone();
        b.set(9, 14, 1, 0.99); // patch (2, 3) -> token 19
        let (ta, tb) = (e.encode(&a), e.encode(&b));
        for i in 0..64 {
            let same = ta.token(i) == tb.token(i);
            assert_eq!(same, i != 19, "token {i}");
        }
    }

    #[test]
    fn similarity_properties() {
        let e = enc();
        let a = e.encode(&Image::from_fn(32, 32, 3, |y, _, _| y as f64 / 31.0));
        let b = e.encode(&Image::from_fn(32, 32, 3, |_, x, c| (x + c) as f64 / 34.0));
        assert!((similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(similarity(&a, &b).unwrap(), similarity(&b, &a).unwrap());
        let x = TokenSequence::new(1, 2, vec![1.0, 0.0]).unwrap();
        let y = TokenSequence::new(1, 2, vec![0.0, 3.0]).unwrap();
        assert_eq!(similarity(&x, &y).unwrap(), 0.0);
        let z = TokenSequence::new(1, 3, vec![0.0; 3]).unwrap();
        assert!(matches!(similarity(&x, &z), Err(Error::Shape(_))));
    }

    #[test]
    fn weights_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let e = enc();
        let (b, m) = (dir.path().join("enc.bin"), dir.path().join("enc.json"));
        e.save(&b, &m).unwrap();
        let bytes = std::fs::read(&b).unwrap();
        assert_eq!(bytes.len(), 16 + 4 * e.params().num_scalars());
        let back = ConditionEncoder::load(&b, &m).unwrap();
        for ((_, x), (_, y)) in back.params().iter().zip(e.params().iter()) {
            assert!(x.max_abs_diff(y) < 1e-6);
        }
    }

    #[test]
    fn reference_bundle_without_decoupling_repeats_rgb() {
        let e = enc();
        let view = Image::from_fn(32, 32, 3, |y, x, _| {
            if (8..24).contains(&y) && (8..20).contains(&x) {
                0.8
            } else {
                0.0
            }
        });
        let mask = Mask::from_nonzero(&view);
        let refs = ReferenceSet::new(vec![(view.clone(), mask.clone()); 3]).unwrap();
        let plain = encode_reference_set(&refs, &e, &HfConfig::default(), false).unwrap();
        assert_eq!(plain.rgb, plain.hf);
        let dec = encode_reference_set(&refs, &e, &HfConfig::default(), true).unwrap();
        assert_ne!(dec.rgb, dec.hf);
        assert_eq!(dec.check().unwrap(), (64, 64));
    }
}

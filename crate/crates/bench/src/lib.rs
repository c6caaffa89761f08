//! Shared fixtures for the benchmarks.

use stitchlab_core::synth::{self, Anomaly, DatasetConfig, ShapeId};
use stitchlab_core::{Image, Mask, Seed};

/// A rendered scene whose part is visible, plus its text flag.
pub fn scene(shape: ShapeId, seed: u64) -> (Image, Mask, bool) {
    let cfg = DatasetConfig::default();
    (0..)
        .find_map(|k| {
            let mut rng = Seed(seed).index(k).rng();
            let spec = synth::sample_spec(shape, &cfg, &mut rng);
            (spec.anomaly != Anomaly::Missing).then(|| {
                let (img, mask) =
                    synth::render_scene(&spec, Seed(seed).child("render").index(k)).expect("scene renders");
                (img, mask, spec.glyph.is_some())
            })
        })
        .expect("some visible scene")
}

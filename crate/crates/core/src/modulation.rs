//! Timestep-conditioned modulation of the three decoupled condition streams.
//!
//! A sinusoidal timestep code goes through an MLP to give `h_t`. Three heads
//! read `h_t`:
//!
//! * the scale/shift head emits a scale `s_k` and shift `b_k` per stream,
//!   applied as `F_k * (mod_alpha * s_k) + mod_beta * b_k` broadcast over tokens;
//! * the fusion head emits three logits whose softmax weights `w_k` form the
//!   convex combination `sum_k w_k F_k^mod`;
//! * the adjust head emits a vector added to every fused token.
//!
//! The scale head is offset by `+1` and all three output layers start at
//! zero, so a fresh network passes the plain stream mean through.

use serde::{Deserialize, Serialize};

use crate::encoder::{FeatureBundle, TokenSequence};
use crate::error::{Error, Result};
use crate::nn::{Bcast, Bound, Graph, Init, Mlp2, ParamStore, Tensor, Var};
use crate::seed::Seed;

pub const STREAMS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModulationConfig {
    pub time_dim: usize,
    pub embed_hidden: usize,
    pub ssvm_hidden: usize,
    pub fwvm_hidden: usize,
    pub favm_hidden: usize,
    pub token_dim: usize,
    pub mod_alpha: f64,
    pub mod_beta: f64,
}

impl Default for ModulationConfig {
    fn default() -> Self {
        ModulationConfig {
            time_dim: 320,
            embed_hidden: 320,
            ssvm_hidden: 256,
            fwvm_hidden: 64,
            favm_hidden: 128,
            token_dim: 64,
            mod_alpha: 1.0,
            mod_beta: 1.0,
        }
    }
}

impl ModulationConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            errs.push(format!(
                "modulation.time_dim must be even and positive, got {}",
                self.time_dim
            ));
        }
        for (name, v) in [
            ("modulation.embed_hidden", self.embed_hidden),
            ("modulation.ssvm_hidden", self.ssvm_hidden),
            ("modulation.fwvm_hidden", self.fwvm_hidden),
            ("modulation.favm_hidden", self.favm_hidden),
            ("modulation.token_dim", self.token_dim),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if !self.mod_alpha.is_finite() || !self.mod_beta.is_finite() {
            errs.push("modulation.mod_alpha and modulation.mod_beta must be finite".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// `dim/2` sines followed by `dim/2` cosines of `t * 10000^(-2i/dim)`.
pub fn sincos_encode(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(vec![format!(
            "sinusoidal dim must be even and positive, got {dim}"
        )]));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let w = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        let a = t as f64 * w;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimestepEmbedding {
    pub t: usize,
    pub h: Vec<f64>,
}

/// Modulation quantities derived from one timestep embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationParams {
    /// `mod_alpha * s_k` per stream.
    pub scale: [Vec<f64>; STREAMS],
    /// `mod_beta * b_k` per stream.
    pub shift: [Vec<f64>; STREAMS],
    pub weights: [f64; STREAMS],
    pub adjust: Vec<f64>,
}

/// Tape handles produced by [`ModulationNet::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ModulationVars {
    pub h: Var,
    pub scale: [Var; STREAMS],
    pub shift: [Var; STREAMS],
    pub logits: Var,
    pub weights: Var,
    pub adjust: Var,
    pub out: Var,
}

#[derive(Clone, Debug)]
pub struct ModulationNet {
    cfg: ModulationConfig,
    store: ParamStore,
    embed: Mlp2,
    ssvm: Mlp2,
    fwvm: Mlp2,
    favm: Mlp2,
}

impl ModulationNet {
    pub fn new(cfg: &ModulationConfig, seed: Seed) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed.child("modulation").rng();
        let mut store = ParamStore::new();
        let t = cfg.time_dim;
        let embed = Mlp2::new(
            &mut store,
            "modulation.embed",
            [t, cfg.embed_hidden, t],
            Init::Default,
            &mut rng,
        );
        let ssvm = Mlp2::new(
            &mut store,
            "modulation.ssvm",
            [t, cfg.ssvm_hidden, STREAMS * 2 * cfg.token_dim],
            Init::Zero,
            &mut rng,
        );
        let fwvm = Mlp2::new(
            &mut store,
            "modulation.fwvm",
            [t, cfg.fwvm_hidden, STREAMS],
            Init::Zero,
            &mut rng,
        );
        let favm = Mlp2::new(
            &mut store,
            "modulation.favm",
            [t, cfg.favm_hidden, cfg.token_dim],
            Init::Zero,
            &mut rng,
        );
        Ok(ModulationNet {
            cfg: cfg.clone(),
            store,
            embed,
            ssvm,
            fwvm,
            favm,
        })
    }

    pub fn config(&self) -> &ModulationConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Heads of the four perceptrons, for tests that rig specific outputs.
    pub fn heads(&self) -> [&Mlp2; 4] {
        [&self.embed, &self.ssvm, &self.fwvm, &self.favm]
    }

    /// Sinusoidal codes for a batch of timesteps, `[B, time_dim]`.
    pub fn time_codes(&self, ts: &[usize]) -> Tensor {
        let d = self.cfg.time_dim;
        let mut data = Vec::with_capacity(ts.len() * d);
        for &t in ts {
            data.extend(sincos_encode(t, d).expect("validated dim"));
        }
        Tensor::new(&[ts.len(), d], data).expect("code shape")
    }

    pub fn embed_graph(&self, g: &mut Graph, p: &Bound, ts: &[usize]) -> Var {
        let codes = g.constant(self.time_codes(ts));
        self.embed.forward(g, p, codes)
    }

    /// Modulates `[B, N, D]` streams given `h: [B, time_dim]`.
    pub fn forward_from_h(&self, g: &mut Graph, p: &Bound, streams: [Var; STREAMS], h: Var) -> Result<ModulationVars> {
        let d = self.cfg.token_dim;
        let batch = g.shape(h)[0];
        for &s in &streams {
            let shape = g.shape(s);
            if shape.len() != 3 || shape[0] != batch || shape[2] != d || shape != g.shape(streams[0]) {
                return Err(Error::Shape(format!(
                    "stream {shape:?} incompatible with batch {batch} and token dim {d}"
                )));
            }
        }
        let ss = self.ssvm.forward(g, p, h);
        let logits = self.fwvm.forward(g, p, h);
        let weights = g.softmax_last(logits);
        let adjust = self.favm.forward(g, p, h);

        let mut scale = [h; STREAMS];
        let mut shift = [h; STREAMS];
        let mut fused: Option<Var> = None;
        for k in 0..STREAMS {
            let s = g.slice_last(ss, 2 * k * d, d);
            let s = g.add_scalar(s, 1.0);
            scale[k] = g.scale(s, self.cfg.mod_alpha);
            let b = g.slice_last(ss, 2 * k * d + d, d);
            shift[k] = g.scale(b, self.cfg.mod_beta);
            let m = g.bmul(streams[k], scale[k], Bcast::Last);
            let m = g.badd(m, shift[k], Bcast::Last);
            let wk = g.slice_last(weights, k, 1);
            let term = g.bmul(m, wk, Bcast::Mid);
            fused = Some(match fused {
                None => term,
                Some(acc) => g.add(acc, term),
            });
        }
        let out = g.badd(fused.expect("three streams"), adjust, Bcast::Last);
        Ok(ModulationVars {
            h,
            scale,
            shift,
            logits,
            weights,
            adjust,
            out,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, streams: [Var; STREAMS], ts: &[usize]) -> Result<ModulationVars> {
        let h = self.embed_graph(g, p, ts);
        self.forward_from_h(g, p, streams, h)
    }

    pub fn embed_timestep(&self, t: usize) -> TimestepEmbedding {
        let code = self.time_codes(&[t]);
        TimestepEmbedding {
            t,
            h: self.embed.apply(&self.store, &code).into_data(),
        }
    }

    fn h_tensor(&self, h_t: &TimestepEmbedding) -> Result<Tensor> {
        Tensor::new(&[1, self.cfg.time_dim], h_t.h.clone())
    }

    pub fn params_for(&self, h_t: &TimestepEmbedding) -> Result<ModulationParams> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let h = g.constant(self.h_tensor(h_t)?);
        let d = self.cfg.token_dim;
        let zeros = Tensor::zeros(&[1, 1, d]);
        let streams = [(); STREAMS].map(|_| g.constant(zeros.clone()));
        let v = self.forward_from_h(&mut g, &p, streams, h)?;
        let w = g.value(v.weights).data();
        Ok(ModulationParams {
            scale: v.scale.map(|s| g.value(s).data().to_vec()),
            shift: v.shift.map(|s| g.value(s).data().to_vec()),
            weights: [w[0], w[1], w[2]],
            adjust: g.value(v.adjust).data().to_vec(),
        })
    }

    /// Applies scale/shift, softmax fusion and the final adjust to a bundle.
    pub fn modulate(&self, bundle: &FeatureBundle, h_t: &TimestepEmbedding) -> Result<TokenSequence> {
        let (n, d) = bundle.check()?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let h = g.constant(self.h_tensor(h_t)?);
        let streams = bundle
            .streams()
            .map(|s| g.constant(s.to_tensor().reshape(&[1, n, d]).expect("stream shape")));
        let v = self.forward_from_h(&mut g, &p, streams, h)?;
        TokenSequence::new(n, d, g.value(v.out).data().to_vec())
    }
}

/// Gradients of a scalar objective w.r.t. the modulation network, its input
/// streams and the fusion logits.
#[derive(Clone, Debug)]
pub struct ModulationGrads {
    /// Store order; `None` for parameters the output does not depend on.
    pub params: Vec<Option<Tensor>>,
    pub streams: [Tensor; STREAMS],
    pub logits: Tensor,
}

/// A forward pass kept on tape so gradients can be requested afterwards.
pub struct ModulationTape<'a> {
    net: &'a ModulationNet,
    cache: Option<(Graph, Bound, [Var; STREAMS], ModulationVars)>,
}

impl<'a> ModulationTape<'a> {
    pub fn new(net: &'a ModulationNet) -> Self {
        ModulationTape { net, cache: None }
    }

    pub fn forward(&mut self, bundle: &FeatureBundle, t: usize) -> Result<TokenSequence> {
        let (n, d) = bundle.check()?;
        let mut g = Graph::new();
        let p = self.net.store.bind(&mut g, true);
        let streams = bundle
            .streams()
            .map(|s| g.leaf(s.to_tensor().reshape(&[1, n, d]).expect("stream shape"), true));
        let v = self.net.forward(&mut g, &p, streams, &[t])?;
        let out = TokenSequence::new(n, d, g.value(v.out).data().to_vec())?;
        self.cache = Some((g, p, streams, v));
        Ok(out)
    }

    /// Backpropagates `upstream = dL/dF_out` through the cached pass.
    pub fn gradients(&self, upstream: &TokenSequence) -> Result<ModulationGrads> {
        let (g, p, streams, v) = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("modulation gradients requested before a forward pass".into()))?;
        if upstream.data().len() != g.value(v.out).len() {
            return Err(Error::Shape(
                "upstream gradient does not match the modulated output".into(),
            ));
        }
        let mut grads = g.backward_from(v.out, Tensor::new(&[upstream.data().len()], upstream.data().to_vec())?);
        let logits = grads
            .get(v.logits)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(g.shape(v.logits)));
        let stream_grads = streams.map(|s| grads.take(s).unwrap_or_else(|| Tensor::zeros(g.shape(s))));
        Ok(ModulationGrads {
            params: p.collect(&mut grads),
            streams: stream_grads,
            logits,
        })
    }
}

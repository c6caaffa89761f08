//! Minimal differentiable building blocks: tensors, a reverse-mode tape,
//! named parameter storage, dense/convolutional layers and Adam.

mod graph;
mod tensor;

pub use graph::{Bcast, Gradients, Graph, Var};
pub use tensor::{matmul, Tensor};

use rand::Rng as _;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::seed::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on the tape as a leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect(),
        }
    }

    /// Replaces all tensors from `(name, tensor)` pairs in store order,
    /// checking names and shapes.
    pub fn load_from(&mut self, items: Vec<(String, Tensor)>) -> Result<()> {
        if items.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                items.len()
            )));
        }
        for (i, (name, t)) in items.into_iter().enumerate() {
            if name != self.names[i] || t.shape() != self.tensors[i].shape() {
                return Err(Error::Shape(format!(
                    "tensor {i}: expected {} {:?}, got {name} {:?}",
                    self.names[i],
                    self.tensors[i].shape(),
                    t.shape()
                )));
            }
            self.tensors[i] = t;
        }
        Ok(())
    }
}

/// Tape handles for a bound [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Per-parameter gradients in store order (`None` where unused).
    pub fn collect(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

pub fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = if bound > 0.0 {
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        (0..n).map(|_| dist.sample(rng)).collect()
    } else {
        vec![0.0; n]
    };
    Tensor::new(shape, data).expect("shape product")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `+-1/sqrt(fan_in)`.
    Default,
    Zero,
}

/// Dense layer `x W + b` on `[N, in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, init: Init, rng: &mut Rng) -> Self {
        let bound = match init {
            Init::Default => 1.0 / (d_in as f64).sqrt(),
            Init::Zero => 0.0,
        };
        let w = store.add(format!("{name}.weight"), uniform_tensor(&[d_in, d_out], bound, rng));
        let b = store.add(format!("{name}.bias"), uniform_tensor(&[1, d_out], bound, rng));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p.var(self.w));
        g.badd(y, p.var(self.b), Bcast::Last)
    }

    /// Plain evaluation on a row-major `[n, d_in]` buffer.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut y = matmul(x, store.get(self.w)).expect("linear shapes");
        let b = store.get(self.b).data();
        for row in y.data_mut().chunks_exact_mut(self.d_out) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        y
    }
}

/// Two dense layers with a SiLU between them.
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp2 {
    pub fn new(store: &mut ParamStore, name: &str, dims: [usize; 3], out_init: Init, rng: &mut Rng) -> Self {
        let l1 = Linear::new(store, &format!("{name}.0"), dims[0], dims[1], Init::Default, rng);
        let l2 = Linear::new(store, &format!("{name}.1"), dims[1], dims[2], out_init, rng);
        Mlp2 { l1, l2 }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let h = self.l1.forward(g, p, x);
        let h = g.silu(h);
        self.l2.forward(g, p, h)
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let h = self.l1.apply(store, x).map(silu);
        self.l2.apply(store, &h)
    }
}

pub fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// Square-kernel convolution with bias on `[B, C, H, W]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        let bound = match init {
            Init::Default => 1.0 / ((c_in * k * k) as f64).sqrt(),
            Init::Zero => 0.0,
        };
        let w = store.add(
            format!("{name}.weight"),
            uniform_tensor(&[c_out, c_in, k, k], bound, rng),
        );
        let b = store.add(format!("{name}.bias"), uniform_tensor(&[c_out], bound, rng));
        Conv2d {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.var(self.w), p.var(self.b), self.stride, self.pad)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), store.len());
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(ParamId(i));
            for (((pv, mv), vv), gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= self.lr * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Standard normal samples.
pub fn gaussian_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect()
}

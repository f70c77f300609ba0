//! Small dense networks with hand-written backpropagation.
//!
//! All parameters of a model live in one flat [`Params`] buffer split into
//! named blocks, so optimizers, checkpoints and finite-difference checks
//! treat every model the same way.

use rand_distr::{Distribution, Normal};

use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    blocks: Vec<ParamBlock>,
    data: Vec<f64>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> BlockId {
        let offset = self.data.len();
        self.blocks.push(ParamBlock {
            name: name.into(),
            rows,
            cols,
            offset,
        });
        self.data.resize(offset + rows * cols, 0.0);
        BlockId(self.blocks.len() - 1)
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn block_info(&self, id: BlockId) -> &ParamBlock {
        &self.blocks[id.0]
    }

    pub fn find(&self, name: &str) -> Option<BlockId> {
        self.blocks.iter().position(|b| b.name == name).map(BlockId)
    }

    #[inline]
    pub fn block(&self, id: BlockId) -> &[f64] {
        &self.data[self.blocks[id.0].range()]
    }

    pub fn block_mut(&mut self, id: BlockId) -> &mut [f64] {
        let r = self.blocks[id.0].range();
        &mut self.data[r]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Replace values from another buffer with identical block layout.
    pub fn load_from(&mut self, other: &Params) -> bool {
        if self.blocks != other.blocks {
            return false;
        }
        self.data.copy_from_slice(&other.data);
        true
    }

    pub(crate) fn from_parts(blocks: Vec<ParamBlock>, data: Vec<f64>) -> Self {
        Params { blocks, data }
    }

    pub fn fill_normal(&mut self, id: BlockId, std: f64, rng: &mut Rng) {
        let dist = Normal::new(0.0, std).expect("finite std");
        for v in self.block_mut(id) {
            *v = dist.sample(rng);
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: BlockId,
    b: BlockId,
    inputs: usize,
    outputs: usize,
}

/// Dense network, tanh between layers, linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Activations saved by [`Mlp::forward`] for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct MlpCache {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Vec<f64>>,
}

impl Mlp {
    /// Layers `dims[0] -> dims[1] -> ... -> dims[last]`, Xavier-normal
    /// weights and zero biases.
    pub fn new(params: &mut Params, prefix: &str, dims: &[usize], rng: &mut Rng) -> Mlp {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let w = params.add(format!("{prefix}.l{i}.w"), d[1], d[0]);
                let b = params.add(format!("{prefix}.l{i}.b"), d[1], 1);
                params.fill_normal(w, (2.0 / (d[0] + d[1]) as f64).sqrt(), rng);
                Dense {
                    w,
                    b,
                    inputs: d[0],
                    outputs: d[1],
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").outputs
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.outputs));
        d
    }

    /// Weight and bias blocks of the output layer.
    pub fn last_layer(&self) -> (BlockId, BlockId) {
        let l = self.layers.last().expect("non-empty");
        (l.w, l.b)
    }

    pub fn forward(&self, params: &Params, input: &[f64], cache: &mut MlpCache) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.input_dim());
        cache.inputs.clear();
        let mut h = input.to_vec();
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            let w = params.block(l.w);
            let b = params.block(l.b);
            let mut out = b.to_vec();
            for (o, row) in out.iter_mut().zip(w.chunks_exact(l.inputs)) {
                *o += row.iter().zip(&h).map(|(a, x)| a * x).sum::<f64>();
            }
            if li != last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            cache.inputs.push(std::mem::replace(&mut h, out));
        }
        h
    }

    pub fn forward_eval(&self, params: &Params, input: &[f64]) -> Vec<f64> {
        self.forward(params, input, &mut MlpCache::default())
    }

    /// Accumulate parameter gradients into `grad` and, when requested,
    /// write the input gradient into `d_input`.
    pub fn backward(
        &self,
        params: &Params,
        cache: &MlpCache,
        d_output: &[f64],
        grad: &mut [f64],
        d_input: Option<&mut [f64]>,
    ) {
        let mut delta = d_output.to_vec();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[li];
            let w = params.block(l.w);
            let wo = params.block_info(l.w).offset;
            let bo = params.block_info(l.b).offset;
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                grad[bo + o] += d;
                let g = &mut grad[wo + o * l.inputs..wo + (o + 1) * l.inputs];
                for (gi, xi) in g.iter_mut().zip(x) {
                    *gi += d * xi;
                }
            }
            if li == 0 && d_input.is_none() {
                return;
            }
            let mut prev = vec![0.0; l.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (p, wi) in prev.iter_mut().zip(&w[o * l.inputs..(o + 1) * l.inputs]) {
                    *p += d * wi;
                }
            }
            if li > 0 {
                // x is tanh output of the previous layer.
                for (p, xi) in prev.iter_mut().zip(x) {
                    *p *= 1.0 - xi * xi;
                }
            }
            delta = prev;
        }
        if let Some(di) = d_input {
            di.copy_from_slice(&delta);
        }
    }

    /// Gradient of a scalar output with respect to the input only.
    pub fn input_gradient(&self, params: &Params, cache: &MlpCache, d_output: &[f64]) -> Vec<f64> {
        let mut delta = d_output.to_vec();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let w = params.block(l.w);
            let mut prev = vec![0.0; l.inputs];
            for (o, &d) in delta.iter().enumerate() {
                for (p, wi) in prev.iter_mut().zip(&w[o * l.inputs..(o + 1) * l.inputs]) {
                    *p += d * wi;
                }
            }
            if li > 0 {
                for (p, xi) in prev.iter_mut().zip(&cache.inputs[li]) {
                    *p *= 1.0 - xi * xi;
                }
            }
            delta = prev;
        }
        delta
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.learning_rate = lr;
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * grad[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= c.learning_rate * mh / (vh.sqrt() + c.eps);
        }
    }
}

/// Sinusoidal features of a scalar in [0, 1].
pub fn sinusoidal(x: f64, freqs: &[f64], out: &mut Vec<f64>) {
    for &f in freqs {
        let a = 2.0 * std::f64::consts::PI * f * x;
        out.push(a.sin());
        out.push(a.cos());
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean squared gradient norm guard for training loops.
pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

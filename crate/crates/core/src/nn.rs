//! Minimal sequential CNN engine: convolution, max pooling, global average
//! pooling, dense, dropout and activations with hand-written backward passes,
//! plus Adam.
//!
//! Activations are `Tensor`s in HWC layout; vectors are `1 × 1 × n`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shapecalc::{self, ChainShape, ConvSpec, LayerGeom, PoolSpec, VolumeShape};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * w * c, "tensor buffer does not match its shape");
        Self { h, w, c, data }
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self::new(h, w, c, vec![0.0; h * w * c])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(1, 1, n, data)
    }

    pub fn is_vector(&self) -> bool {
        self.h == 1 && self.w == 1
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    MaxPool,
    Relu,
    GlobalAvgPool,
    Flatten,
    Dense,
    Dropout,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub in_channels: usize,
    /// `[K][F][F][C_in]` weights followed by `K` biases.
    pub params: Vec<f64>,
    pub trainable: bool,
}

impl Conv2d {
    fn weight_len(&self) -> usize {
        self.spec.num_filters * self.spec.filter * self.spec.filter * self.in_channels
    }

    fn patch_len(&self) -> usize {
        self.spec.filter * self.spec.filter * self.in_channels
    }

    fn out_dims(&self, x: &Tensor) -> (usize, usize) {
        let s = &self.spec;
        (
            (x.h + 2 * s.padding - s.filter) / s.stride + 1,
            (x.w + 2 * s.padding - s.filter) / s.stride + 1,
        )
    }

    fn gather_patch(&self, x: &Tensor, oy: usize, ox: usize, patch: &mut [f64]) {
        let s = &self.spec;
        let c = self.in_channels;
        let y0 = (oy * s.stride) as isize - s.padding as isize;
        let x0 = (ox * s.stride) as isize - s.padding as isize;
        for fy in 0..s.filter {
            let yy = y0 + fy as isize;
            for fx in 0..s.filter {
                let xx = x0 + fx as isize;
                let dst = &mut patch[(fy * s.filter + fx) * c..(fy * s.filter + fx + 1) * c];
                if yy < 0 || xx < 0 || yy >= x.h as isize || xx >= x.w as isize {
                    dst.fill(0.0);
                } else {
                    let src = (yy as usize * x.w + xx as usize) * c;
                    dst.copy_from_slice(&x.data[src..src + c]);
                }
            }
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let (oh, ow) = self.out_dims(x);
        let k = self.spec.num_filters;
        let plen = self.patch_len();
        let (weights, bias) = self.params.split_at(self.weight_len());
        let mut out = vec![0.0; oh * ow * k];
        let mut patch = vec![0.0; plen];
        for oy in 0..oh {
            for ox in 0..ow {
                self.gather_patch(x, oy, ox, &mut patch);
                let o = &mut out[(oy * ow + ox) * k..(oy * ow + ox + 1) * k];
                for (f, (dst, b)) in o.iter_mut().zip(bias).enumerate() {
                    let w = &weights[f * plen..(f + 1) * plen];
                    *dst = b + dot(w, &patch);
                }
            }
        }
        Tensor::new(oh, ow, k, out)
    }

    fn backward(&self, x: &Tensor, grad_out: &Tensor, grad_params: &mut [f64], need_input: bool) -> Option<Tensor> {
        let (oh, ow) = (grad_out.h, grad_out.w);
        let k = self.spec.num_filters;
        let plen = self.patch_len();
        let s = self.spec;
        let c = self.in_channels;
        let (weights, _) = self.params.split_at(self.weight_len());
        let (gw, gb) = grad_params.split_at_mut(self.weight_len());
        let mut grad_in = if need_input { Some(Tensor::zeros(x.h, x.w, c)) } else { None };
        let mut patch = vec![0.0; plen];
        let mut dpatch = vec![0.0; plen];
        for oy in 0..oh {
            for ox in 0..ow {
                self.gather_patch(x, oy, ox, &mut patch);
                let g = &grad_out.data[(oy * ow + ox) * k..(oy * ow + ox + 1) * k];
                if need_input {
                    dpatch.fill(0.0);
                }
                for (f, &gv) in g.iter().enumerate() {
                    if gv == 0.0 {
                        continue;
                    }
                    gb[f] += gv;
                    axpy(gv, &patch, &mut gw[f * plen..(f + 1) * plen]);
                    if need_input {
                        axpy(gv, &weights[f * plen..(f + 1) * plen], &mut dpatch);
                    }
                }
                if let Some(gi) = grad_in.as_mut() {
                    let y0 = (oy * s.stride) as isize - s.padding as isize;
                    let x0 = (ox * s.stride) as isize - s.padding as isize;
                    for fy in 0..s.filter {
                        let yy = y0 + fy as isize;
                        if yy < 0 || yy >= x.h as isize {
                            continue;
                        }
                        for fx in 0..s.filter {
                            let xx = x0 + fx as isize;
                            if xx < 0 || xx >= x.w as isize {
                                continue;
                            }
                            let dst = (yy as usize * x.w + xx as usize) * c;
                            let src = (fy * s.filter + fx) * c;
                            for ch in 0..c {
                                gi.data[dst + ch] += dpatch[src + ch];
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `[out][in]` weights followed by `out` biases.
    pub params: Vec<f64>,
    /// Coefficient of the `l2 · Σ w²` penalty on the weights.
    pub l2: f64,
    pub trainable: bool,
}

impl Dense {
    fn forward(&self, x: &Tensor) -> Tensor {
        let (weights, bias) = self.params.split_at(self.inputs * self.outputs);
        let out = (0..self.outputs)
            .map(|o| bias[o] + dot(&weights[o * self.inputs..(o + 1) * self.inputs], &x.data))
            .collect();
        Tensor::vector(out)
    }

    fn backward(&self, x: &Tensor, grad_out: &Tensor, grad_params: &mut [f64], need_input: bool) -> Option<Tensor> {
        let n = self.inputs;
        let (weights, _) = self.params.split_at(n * self.outputs);
        let (gw, gb) = grad_params.split_at_mut(n * self.outputs);
        let mut grad_in = if need_input { Some(vec![0.0; n]) } else { None };
        for (o, &g) in grad_out.data.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            gb[o] += g;
            axpy(g, &x.data, &mut gw[o * n..(o + 1) * n]);
            if let Some(gi) = grad_in.as_mut() {
                axpy(g, &weights[o * n..(o + 1) * n], gi);
            }
        }
        grad_in.map(|g| Tensor::new(x.h, x.w, x.c, g))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    MaxPool(PoolSpec),
    Relu,
    GlobalAvgPool,
    Flatten,
    Dense(Dense),
    Dropout(f64),
    Sigmoid,
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d(_) => LayerKind::Conv,
            Layer::MaxPool(_) => LayerKind::MaxPool,
            Layer::Relu => LayerKind::Relu,
            Layer::GlobalAvgPool => LayerKind::GlobalAvgPool,
            Layer::Flatten => LayerKind::Flatten,
            Layer::Dense(_) => LayerKind::Dense,
            Layer::Dropout(_) => LayerKind::Dropout,
            Layer::Sigmoid => LayerKind::Sigmoid,
        }
    }

    pub fn geom(&self) -> LayerGeom {
        match self {
            Layer::Conv2d(c) => LayerGeom::Conv(c.spec),
            Layer::MaxPool(p) => LayerGeom::Pool(*p),
            Layer::GlobalAvgPool => LayerGeom::GlobalAvgPool,
            Layer::Flatten => LayerGeom::Flatten,
            Layer::Dense(d) => LayerGeom::Dense(d.outputs),
            Layer::Relu | Layer::Dropout(_) | Layer::Sigmoid => LayerGeom::Elementwise,
        }
    }

    pub fn params(&self) -> Option<&[f64]> {
        match self {
            Layer::Conv2d(c) => Some(&c.params),
            Layer::Dense(d) => Some(&d.params),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut Vec<f64>> {
        match self {
            Layer::Conv2d(c) => Some(&mut c.params),
            Layer::Dense(d) => Some(&mut d.params),
            _ => None,
        }
    }

    pub fn is_trainable(&self) -> bool {
        match self {
            Layer::Conv2d(c) => c.trainable,
            Layer::Dense(d) => d.trainable,
            _ => false,
        }
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        match self {
            Layer::Conv2d(c) => c.trainable = trainable,
            Layer::Dense(d) => d.trainable = trainable,
            _ => {}
        }
    }
}

/// Per-sample state recorded by a training forward pass.
#[derive(Debug, Clone)]
enum Aux {
    None,
    /// Flat input index chosen by each pooled output.
    Argmax(Vec<usize>),
    /// Inverted-dropout multipliers (0 or 1/(1-rate)).
    Mask(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct Trace {
    inputs: Vec<Tensor>,
    aux: Vec<Aux>,
    pub output: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub input: VolumeShape,
    pub layers: Vec<Layer>,
}

impl Network {
    /// Builds a network and checks its geometry.
    pub fn new(input: VolumeShape, layers: Vec<Layer>) -> Result<Self> {
        let net = Self { input, layers };
        net.output_shapes()?;
        Ok(net)
    }

    pub fn output_shapes(&self) -> Result<Vec<ChainShape>> {
        let geoms: Vec<LayerGeom> = self.layers.iter().map(Layer::geom).collect();
        shapecalc::validate_chain(self.input, &geoms)
    }

    pub fn kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(Layer::kind).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().filter_map(Layer::params).map(<[f64]>::len).sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.is_trainable())
            .filter_map(Layer::params)
            .map(<[f64]>::len)
            .sum()
    }

    /// All parameters concatenated in layer order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers.iter().filter_map(Layer::params).flatten().copied().collect()
    }

    pub fn load_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for p in self.layers.iter_mut().filter_map(Layer::params_mut) {
            let n = p.len();
            p.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let v = self.input;
        if (x.h, x.w, x.c) != (v.height, v.width, v.depth) {
            return Err(Error::ShapeMismatch(format!(
                "network expects {}x{}x{}, got {}x{}x{}",
                v.height, v.width, v.depth, x.h, x.w, x.c
            )));
        }
        Ok(())
    }

    /// Inference pass; dropout is the identity.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = match layer {
                Layer::Dropout(_) => cur,
                other => forward_layer(other, &cur, None::<&mut ChaCha8Rng>).0,
            };
        }
        Ok(cur)
    }

    /// Training pass that records what [`Network::backward`] needs. Dropout masks come from `rng`.
    pub fn forward_train<R: Rng + ?Sized>(&self, x: &Tensor, rng: &mut R) -> Result<Trace> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut aux = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (next, a) = forward_layer(layer, &cur, Some(&mut *rng));
            inputs.push(std::mem::replace(&mut cur, next));
            aux.push(a);
        }
        Ok(Trace {
            inputs,
            aux,
            output: cur,
        })
    }

    fn first_trainable(&self) -> Option<usize> {
        self.layers.iter().position(Layer::is_trainable)
    }

    /// Accumulates parameter gradients into `grads` (one buffer per layer,
    /// empty for parameter-free layers). Stops at the earliest trainable layer.
    pub fn backward(&self, trace: &Trace, grad_out: Tensor, grads: &mut [Vec<f64>]) {
        self.backward_prefix(trace, self.layers.len(), grad_out, grads);
    }

    /// Backward pass for a network ending in a sigmoid, starting from the
    /// gradient with respect to the sigmoid's input.
    pub fn backward_from_logits(&self, trace: &Trace, grad_logits: Tensor, grads: &mut [Vec<f64>]) {
        debug_assert!(matches!(self.layers.last(), Some(Layer::Sigmoid)));
        self.backward_prefix(trace, self.layers.len() - 1, grad_logits, grads);
    }

    /// Backward through `layers[..end]`, where `grad_out` is the gradient of the output of layer `end - 1`.
    fn backward_prefix(&self, trace: &Trace, end: usize, grad_out: Tensor, grads: &mut [Vec<f64>]) {
        let Some(stop) = self.first_trainable() else {
            return;
        };
        if stop >= end {
            return;
        }
        let mut g = grad_out;
        for idx in (stop..end).rev() {
            let x = &trace.inputs[idx];
            let need_input = idx > stop;
            let next = match (&self.layers[idx], &trace.aux[idx]) {
                (Layer::Conv2d(conv), _) => {
                    if conv.trainable {
                        conv.backward(x, &g, &mut grads[idx], need_input)
                    } else {
                        let mut scratch = vec![0.0; conv.params.len()];
                        conv.backward(x, &g, &mut scratch, need_input)
                    }
                }
                (Layer::Dense(dense), _) => {
                    if dense.trainable {
                        dense.backward(x, &g, &mut grads[idx], need_input)
                    } else {
                        let mut scratch = vec![0.0; dense.params.len()];
                        dense.backward(x, &g, &mut scratch, need_input)
                    }
                }
                (Layer::MaxPool(_), Aux::Argmax(arg)) => {
                    let mut gi = Tensor::zeros(x.h, x.w, x.c);
                    for (o, &src) in arg.iter().enumerate() {
                        gi.data[src] += g.data[o];
                    }
                    Some(gi)
                }
                (Layer::Relu, _) => Some(Tensor::new(
                    x.h,
                    x.w,
                    x.c,
                    x.data
                        .iter()
                        .zip(&g.data)
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                        .collect(),
                )),
                (Layer::GlobalAvgPool, _) => {
                    let area = (x.h * x.w) as f64;
                    let mut gi = Tensor::zeros(x.h, x.w, x.c);
                    for px in gi.data.chunks_mut(x.c) {
                        for (d, gv) in px.iter_mut().zip(&g.data) {
                            *d = gv / area;
                        }
                    }
                    Some(gi)
                }
                (Layer::Flatten, _) => Some(Tensor::new(x.h, x.w, x.c, g.data.clone())),
                (Layer::Dropout(_), Aux::Mask(mask)) => Some(Tensor::new(
                    x.h,
                    x.w,
                    x.c,
                    g.data.iter().zip(mask).map(|(a, m)| a * m).collect(),
                )),
                (Layer::Sigmoid, _) => {
                    let y = &trace.output_of(idx);
                    Some(Tensor::new(
                        x.h,
                        x.w,
                        x.c,
                        y.data.iter().zip(&g.data).map(|(s, gv)| gv * s * (1.0 - s)).collect(),
                    ))
                }
                (layer, aux) => unreachable!("trace mismatch for {:?} with {:?}", layer.kind(), aux),
            };
            match next {
                Some(t) if need_input => g = t,
                _ => break,
            }
        }
    }

    /// Zeroed gradient buffers shaped like the parameters.
    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .map(|l| l.params().map(|p| vec![0.0; p.len()]).unwrap_or_default())
            .collect()
    }

    /// Adds the gradient of `Σ l2 · w²` over dense weights and returns the penalty value.
    pub fn add_l2(&self, grads: &mut [Vec<f64>]) -> f64 {
        let mut penalty = 0.0;
        for (layer, g) in self.layers.iter().zip(grads.iter_mut()) {
            if let Layer::Dense(d) = layer {
                if d.l2 > 0.0 && d.trainable {
                    let n = d.inputs * d.outputs;
                    for (gv, w) in g[..n].iter_mut().zip(&d.params[..n]) {
                        *gv += 2.0 * d.l2 * w;
                        penalty += d.l2 * w * w;
                    }
                }
            }
        }
        penalty
    }
}

impl Trace {
    fn output_of(&self, idx: usize) -> &Tensor {
        self.inputs.get(idx + 1).unwrap_or(&self.output)
    }
}

fn forward_layer<R: Rng + ?Sized>(layer: &Layer, x: &Tensor, rng: Option<&mut R>) -> (Tensor, Aux) {
    match layer {
        Layer::Conv2d(conv) => (conv.forward(x), Aux::None),
        Layer::MaxPool(spec) => {
            let oh = (x.h - spec.window) / spec.stride + 1;
            let ow = (x.w - spec.window) / spec.stride + 1;
            let mut out = Vec::with_capacity(oh * ow * x.c);
            let mut arg = Vec::with_capacity(oh * ow * x.c);
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..x.c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for fy in 0..spec.window {
                            for fx in 0..spec.window {
                                let idx = ((oy * spec.stride + fy) * x.w + ox * spec.stride + fx) * x.c + ch;
                                if x.data[idx] > best {
                                    best = x.data[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out.push(best);
                        arg.push(best_idx);
                    }
                }
            }
            (Tensor::new(oh, ow, x.c, out), Aux::Argmax(arg))
        }
        Layer::Relu => (
            Tensor::new(x.h, x.w, x.c, x.data.iter().map(|v| v.max(0.0)).collect()),
            Aux::None,
        ),
        Layer::GlobalAvgPool => {
            let mut out = vec![0.0; x.c];
            for px in x.data.chunks(x.c) {
                for (o, v) in out.iter_mut().zip(px) {
                    *o += v;
                }
            }
            let area = (x.h * x.w) as f64;
            out.iter_mut().for_each(|v| *v /= area);
            (Tensor::vector(out), Aux::None)
        }
        Layer::Flatten => (Tensor::vector(x.data.clone()), Aux::None),
        Layer::Dense(d) => (d.forward(x), Aux::None),
        Layer::Dropout(rate) => match rng {
            Some(rng) if *rate > 0.0 => {
                let keep = 1.0 - rate;
                let mask: Vec<f64> = (0..x.len())
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let out = x.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
                (Tensor::new(x.h, x.w, x.c, out), Aux::Mask(mask))
            }
            _ => (x.clone(), Aux::Mask(vec![1.0; x.len()])),
        },
        Layer::Sigmoid => (
            Tensor::new(x.h, x.w, x.c, x.data.iter().map(|&v| sigmoid(v)).collect()),
            Aux::None,
        ),
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Glorot-uniform weights, zero biases.
pub fn conv_layer(spec: ConvSpec, in_channels: usize, rng: &mut ChaCha8Rng) -> Layer {
    let fan_in = spec.filter * spec.filter * in_channels;
    let fan_out = spec.filter * spec.filter * spec.num_filters;
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut params: Vec<f64> = (0..spec.num_filters * fan_in).map(|_| rng.gen_range(-limit..limit)).collect();
    params.extend(std::iter::repeat(0.0).take(spec.num_filters));
    Layer::Conv2d(Conv2d {
        spec,
        in_channels,
        params,
        trainable: true,
    })
}

/// Glorot-uniform weights, zero biases.
pub fn dense_layer(inputs: usize, outputs: usize, l2: f64, rng: &mut ChaCha8Rng) -> Layer {
    let limit = (6.0 / (inputs + outputs) as f64).sqrt();
    let mut params: Vec<f64> = (0..inputs * outputs).map(|_| rng.gen_range(-limit..limit)).collect();
    params.extend(std::iter::repeat(0.0).take(outputs));
    Layer::Dense(Dense {
        inputs,
        outputs,
        params,
        l2,
        trainable: true,
    })
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Adam with the usual defaults (β1 0.9, β2 0.999, ε 1e-7).
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(net: &Network, learning_rate: f64) -> Self {
        let zeros = net.zero_grads();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update to every trainable layer.
    pub fn step(&mut self, net: &mut Network, grads: &[Vec<f64>]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (idx, layer) in net.layers.iter_mut().enumerate() {
            if !layer.is_trainable() {
                continue;
            }
            let Some(params) = layer.params_mut() else { continue };
            let (m, v, g) = (&mut self.m[idx], &mut self.v[idx], &grads[idx]);
            for i in 0..params.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

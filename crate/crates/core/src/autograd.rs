//! Reverse-mode differentiation over a linear tape.
//!
//! Each forward pass records its operations on a fresh [`Tape`]; calling
//! [`Tape::backward`] walks the records in reverse and accumulates
//! gradients. The op set is exactly what the spiking networks, attention
//! gates and residual blocks need.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::snn_core::{self, LifParams, SurrogateParams};
use crate::tensor::{sigmoid, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Forward behaviour of the spike nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpikeMode {
    /// Heaviside forward, surrogate derivative backward.
    Surrogate(SurrogateParams),
    /// Surrogate antiderivative forward, so forward and backward agree.
    Relaxed(SurrogateParams),
}

impl SpikeMode {
    pub fn surrogate(&self) -> &SurrogateParams {
        match self {
            SpikeMode::Surrogate(s) | SpikeMode::Relaxed(s) => s,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    SliceOuter { x: Var, start: usize },
    ConcatOuter(Vec<Var>),
    Transpose(Var),
    Conv2d { x: Var, w: Var, geo: ConvGeometry },
    AvgPool { x: Var, window: usize },
    BatchNorm { x: Var, scale: Var, shift: Var, mean: Vec<f64>, var: Vec<f64>, batch_stats: bool },
    Linear { x: Var, w: Var },
    Relu(Var),
    Sigmoid(Var),
    Spike { u: Var, mode: SpikeMode, u_th: f64 },
    LifReset { u: Var, s: Var, lif: LifParams },
    /// `[N][C][H][W] * g[N]`
    GateImage { x: Var, g: Var },
    /// `[N][C][H][W] * g[N][C]`
    GateChannel { x: Var, g: Var },
    /// `[N][C][H][W] * g[N][1][H][W]`
    GatePixel { x: Var, g: Var },
    /// Pool each image to one scalar: `[N][C][H][W] -> [N]`.
    PoolImage { x: Var, kind: PoolKind, argmax: Vec<usize> },
    /// Pool each channel spatially: `[N][C][H][W] -> [N][C]`.
    PoolSpatial { x: Var, kind: PoolKind, argmax: Vec<usize> },
    /// Avg and max over channels: `[N][C][H][W] -> [N][2][H][W]`.
    PoolChannels { x: Var, argmax: Vec<usize> },
    Sum(Var),
    Dot { x: Var, weights: Tensor },
    /// Mean softmax cross-entropy of `[B][K]` logits.
    CrossEntropy { logits: Var, probs: Tensor, labels: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Accumulated gradients indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero-filled when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input (parameter or probed input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant: no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let ng = self.needs(a);
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    pub fn slice_outer(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let v = self.value(x).slice_outer(start, count)?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::SliceOuter { x, start }, ng))
    }

    pub fn concat_outer(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_outer(&vals)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(v, Op::ConcatOuter(parts.to_vec()), ng))
    }

    /// Transpose of a matrix `[R][C] -> [C][R]`.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = transpose(self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::Transpose(x), ng))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, geo: ConvGeometry) -> Result<Var> {
        let v = kernels::conv2d(self.value(x), self.value(w), geo)?;
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(v, Op::Conv2d { x, w, geo }, ng))
    }

    pub fn avg_pool(&mut self, x: Var, window: usize) -> Result<Var> {
        let v = kernels::avg_pool(self.value(x), window)?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::AvgPool { x, window }, ng))
    }

    /// Batch norm. With `stats == None` the batch statistics are computed
    /// (and differentiated through); otherwise the given running statistics
    /// are treated as constants. Returns the output and the statistics used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        stats: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (mean, var, batch_stats) = match stats {
            Some((m, v)) => (m.to_vec(), v.to_vec(), false),
            None => {
                let (m, v) = kernels::channel_stats(self.value(x))?;
                (m, v, true)
            }
        };
        let v = kernels::batch_norm_apply(
            self.value(x),
            &mean,
            &var,
            self.value(scale).data(),
            self.value(shift).data(),
        )?;
        let ng = self.needs(x) || self.needs(scale) || self.needs(shift);
        let out = self.push(
            v,
            Op::BatchNorm {
                x,
                scale,
                shift,
                mean: mean.clone(),
                var: var.clone(),
                batch_stats,
            },
            ng,
        );
        Ok((out, mean, var))
    }

    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let v = kernels::linear(self.value(x), self.value(w))?;
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(v, Op::Linear { x, w }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        let ng = self.needs(x);
        self.push(v, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let ng = self.needs(x);
        self.push(v, Op::Sigmoid(x), ng)
    }

    pub fn spike(&mut self, u: Var, u_th: f64, mode: SpikeMode) -> Var {
        let v = match mode {
            SpikeMode::Surrogate(_) => self.value(u).map(|x| snn_core::fire(x, u_th)),
            SpikeMode::Relaxed(sg) => self.value(u).map(|x| sg.integral(x - u_th)),
        };
        let ng = self.needs(u);
        self.push(v, Op::Spike { u, mode, u_th }, ng)
    }

    pub fn lif_reset(&mut self, u: Var, s: Var, lif: LifParams) -> Result<Var> {
        let v = self
            .value(u)
            .zip_map(self.value(s), |u, s| snn_core::reset(u, s, &lif))?;
        let ng = self.needs(u) || self.needs(s);
        Ok(self.push(v, Op::LifReset { u, s, lif }, ng))
    }

    pub fn gate_image(&mut self, x: Var, g: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(g).numel() != n {
            return Err(Error::shape(format!("image gate needs {} entries", n)));
        }
        let per = c * h * w;
        let gv = self.value(g).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, chunk) in v.data_mut().chunks_mut(per).enumerate() {
            chunk.iter_mut().for_each(|e| *e *= gv[i]);
        }
        let ng = self.needs(x) || self.needs(g);
        Ok(self.push(v, Op::GateImage { x, g }, ng))
    }

    pub fn gate_channel(&mut self, x: Var, g: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(g).numel() != n * c {
            return Err(Error::shape(format!("channel gate needs {}x{} entries", n, c)));
        }
        let hw = h * w;
        let gv = self.value(g).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, chunk) in v.data_mut().chunks_mut(hw).enumerate() {
            chunk.iter_mut().for_each(|e| *e *= gv[i]);
        }
        let ng = self.needs(x) || self.needs(g);
        Ok(self.push(v, Op::GateChannel { x, g }, ng))
    }

    pub fn gate_pixel(&mut self, x: Var, g: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(g).shape() != [n, 1, h, w] {
            return Err(Error::shape(format!(
                "pixel gate must be [{}][1][{}][{}], got {:?}",
                n,
                h,
                w,
                self.value(g).shape()
            )));
        }
        let hw = h * w;
        let gv = self.value(g).data().to_vec();
        let mut v = self.value(x).clone();
        let d = v.data_mut();
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in 0..hw {
                    d[base + i] *= gv[b * hw + i];
                }
            }
        }
        let ng = self.needs(x) || self.needs(g);
        Ok(self.push(v, Op::GatePixel { x, g }, ng))
    }

    pub fn pool_image(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let (n, ..) = self.value(x).dims4()?;
        let per = self.value(x).numel() / n.max(1);
        let (v, argmax) = reduce_groups(self.value(x).data(), per, kind);
        let v = Tensor::from_vec(&[n], v)?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::PoolImage { x, kind, argmax }, ng))
    }

    pub fn pool_spatial(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (v, argmax) = reduce_groups(self.value(x).data(), h * w, kind);
        let v = Tensor::from_vec(&[n, c], v)?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::PoolSpatial { x, kind, argmax }, ng))
    }

    pub fn pool_channels(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * 2 * hw];
        let mut argmax = vec![0; n * hw];
        for b in 0..n {
            for i in 0..hw {
                let mut acc = 0.0;
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for ch in 0..c {
                    let v = xd[(b * c + ch) * hw + i];
                    acc += v;
                    if v > best {
                        best = v;
                        arg = ch;
                    }
                }
                out[(b * 2) * hw + i] = acc / c as f64;
                out[(b * 2 + 1) * hw + i] = best;
                argmax[b * hw + i] = arg;
            }
        }
        let v = Tensor::from_vec(&[n, 2, h, w], out)?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::PoolChannels { x, argmax }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(v, Op::Sum(x), ng)
    }

    /// `Σ x ⊙ weights` with constant weights.
    pub fn dot(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        self.value(x).expect_same_shape(&weights)?;
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        let ng = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, weights }, ng))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.value(logits).dims2()?;
        if labels.len() != b || labels.iter().any(|&l| l >= k) {
            return Err(Error::shape(format!(
                "{} labels for {} rows of {} classes",
                labels.len(),
                b,
                k
            )));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &z[r * k..(r + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..k {
                probs[r * k + j] = (row[j] - m).exp() / denom;
            }
            loss += denom.ln() + m - row[labels[r]];
        }
        let probs = Tensor::from_vec(&[b, k], probs)?;
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss / b as f64),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    /// Backpropagate from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        let seed = Tensor::filled(self.value(root).shape(), 1.0);
        self.backward_with(root, seed)
    }

    /// Backpropagate a given cotangent (vector-Jacobian product).
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if want(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if want(*b) {
                    accumulate(&mut grads[b.0], g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y).expect("shape");
                    accumulate(&mut grads[a.0], ga);
                }
                if want(*b) {
                    let gb = g.zip_map(self.value(*a), |x, y| x * y).expect("shape");
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Scale(a, s) => accumulate(&mut grads[a.0], g.scale(*s)),
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                accumulate(&mut grads[a.0], g.clone().reshape(&shape).expect("reshape"));
            }
            Op::SliceOuter { x, start } => {
                let xs = self.value(*x).shape().to_vec();
                let inner: usize = xs[1..].iter().product();
                let mut full = Tensor::zeros(&xs);
                full.data_mut()[start * inner..start * inner + g.numel()].copy_from_slice(g.data());
                accumulate(&mut grads[x.0], full);
            }
            Op::ConcatOuter(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if want(*p) {
                        let shape = self.value(*p).shape().to_vec();
                        let part = Tensor::from_vec(&shape, g.data()[offset..offset + n].to_vec())
                            .expect("concat grad");
                        accumulate(&mut grads[p.0], part);
                    }
                    offset += n;
                }
            }
            Op::Transpose(x) => accumulate(&mut grads[x.0], transpose(g).expect("transpose")),
            Op::Conv2d { x, w, geo } => {
                let (gx, gw) =
                    kernels::conv2d_backward(self.value(*x), self.value(*w), g, *geo, want(*x));
                if want(*x) {
                    accumulate(&mut grads[x.0], gx);
                }
                if want(*w) {
                    accumulate(&mut grads[w.0], gw);
                }
            }
            Op::AvgPool { x, window } => {
                let gx = kernels::avg_pool_backward(self.value(*x).shape(), g, *window);
                accumulate(&mut grads[x.0], gx);
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                mean,
                var,
                batch_stats,
            } => {
                let (gx, gs, gb) = kernels::batch_norm_backward(
                    self.value(*x),
                    mean,
                    var,
                    self.value(*scale).data(),
                    g,
                    *batch_stats,
                );
                if want(*x) {
                    accumulate(&mut grads[x.0], gx);
                }
                if want(*scale) {
                    let shape = self.value(*scale).shape().to_vec();
                    accumulate(&mut grads[scale.0], Tensor::from_vec(&shape, gs).expect("bn"));
                }
                if want(*shift) {
                    let shape = self.value(*shift).shape().to_vec();
                    accumulate(&mut grads[shift.0], Tensor::from_vec(&shape, gb).expect("bn"));
                }
            }
            Op::Linear { x, w } => {
                let (gx, gw) = kernels::linear_backward(self.value(*x), self.value(*w), g);
                if want(*x) {
                    accumulate(&mut grads[x.0], gx);
                }
                if want(*w) {
                    accumulate(&mut grads[w.0], gw);
                }
            }
            Op::Relu(x) => {
                let gx = g
                    .zip_map(self.value(*x), |g, x| if x > 0.0 { g } else { 0.0 })
                    .expect("shape");
                accumulate(&mut grads[x.0], gx);
            }
            Op::Sigmoid(x) => {
                let gx = g
                    .zip_map(&node.value, |g, s| g * s * (1.0 - s))
                    .expect("shape");
                accumulate(&mut grads[x.0], gx);
            }
            Op::Spike { u, mode, u_th } => {
                let sg = *mode.surrogate();
                let gu = g
                    .zip_map(self.value(*u), |g, u| g * sg.derivative(u - u_th))
                    .expect("shape");
                accumulate(&mut grads[u.0], gu);
            }
            Op::LifReset { u, s, lif } => {
                if want(*u) {
                    let gu = g
                        .zip_map(self.value(*s), |g, s| g * lif.beta * (1.0 - s))
                        .expect("shape");
                    accumulate(&mut grads[u.0], gu);
                }
                if want(*s) {
                    let gs = g
                        .zip_map(self.value(*u), |g, u| g * (lif.v_reset - lif.beta * u))
                        .expect("shape");
                    accumulate(&mut grads[s.0], gs);
                }
            }
            Op::GateImage { x, g: gate } => {
                let xv = self.value(*x);
                let per = xv.numel() / self.value(*gate).numel();
                let gv = self.value(*gate).data();
                if want(*x) {
                    let mut gx = g.clone();
                    for (i, chunk) in gx.data_mut().chunks_mut(per).enumerate() {
                        chunk.iter_mut().for_each(|e| *e *= gv[i]);
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                if want(*gate) {
                    let gg: Vec<f64> = g
                        .data()
                        .chunks(per)
                        .zip(xv.data().chunks(per))
                        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum())
                        .collect();
                    let shape = self.value(*gate).shape().to_vec();
                    accumulate(&mut grads[gate.0], Tensor::from_vec(&shape, gg).expect("gate"));
                }
            }
            Op::GateChannel { x, g: gate } => {
                let xv = self.value(*x);
                let (_, _, h, w) = xv.dims4().expect("rank");
                let hw = h * w;
                let gv = self.value(*gate).data();
                if want(*x) {
                    let mut gx = g.clone();
                    for (i, chunk) in gx.data_mut().chunks_mut(hw).enumerate() {
                        chunk.iter_mut().for_each(|e| *e *= gv[i]);
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                if want(*gate) {
                    let gg: Vec<f64> = g
                        .data()
                        .chunks(hw)
                        .zip(xv.data().chunks(hw))
                        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum())
                        .collect();
                    let shape = self.value(*gate).shape().to_vec();
                    accumulate(&mut grads[gate.0], Tensor::from_vec(&shape, gg).expect("gate"));
                }
            }
            Op::GatePixel { x, g: gate } => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4().expect("rank");
                let hw = h * w;
                let gv = self.value(*gate).data();
                let (gd, xd) = (g.data(), xv.data());
                if want(*x) {
                    let mut gx = g.clone();
                    let d = gx.data_mut();
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for i in 0..hw {
                                d[base + i] *= gv[b * hw + i];
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                if want(*gate) {
                    let mut gg = Tensor::zeros(self.value(*gate).shape());
                    let d = gg.data_mut();
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for i in 0..hw {
                                d[b * hw + i] += gd[base + i] * xd[base + i];
                            }
                        }
                    }
                    accumulate(&mut grads[gate.0], gg);
                }
            }
            Op::PoolImage { x, kind, argmax } | Op::PoolSpatial { x, kind, argmax } => {
                let xv = self.value(*x);
                let groups = g.numel();
                let per = xv.numel() / groups;
                let mut gx = Tensor::zeros(xv.shape());
                let d = gx.data_mut();
                for (k, &gk) in g.data().iter().enumerate() {
                    match kind {
                        PoolKind::Avg => {
                            let v = gk / per as f64;
                            d[k * per..(k + 1) * per].iter_mut().for_each(|e| *e += v);
                        }
                        PoolKind::Max => d[k * per + argmax[k]] += gk,
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::PoolChannels { x, argmax } => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4().expect("rank");
                let hw = h * w;
                let gd = g.data();
                let mut gx = Tensor::zeros(xv.shape());
                let d = gx.data_mut();
                for b in 0..n {
                    for i in 0..hw {
                        let ga = gd[(b * 2) * hw + i] / c as f64;
                        for ch in 0..c {
                            d[(b * c + ch) * hw + i] += ga;
                        }
                        let gm = gd[(b * 2 + 1) * hw + i];
                        d[(b * c + argmax[b * hw + i]) * hw + i] += gm;
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(&mut grads[x.0], Tensor::filled(&shape, g.data()[0]));
            }
            Op::Dot { x, weights } => accumulate(&mut grads[x.0], weights.scale(g.data()[0])),
            Op::CrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let (b, k) = probs.dims2().expect("rank");
                let s = g.data()[0] / b as f64;
                let mut gl = probs.clone();
                let d = gl.data_mut();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= s);
                accumulate(&mut grads[logits.0], gl);
            }
        }
    }
}

fn transpose(t: &Tensor) -> Result<Tensor> {
    let (r, c) = t.dims2()?;
    let d = t.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::from_vec(&[c, r], out)
}

/// Reduce consecutive groups of `per` elements; ties in max keep the first.
fn reduce_groups(data: &[f64], per: usize, kind: PoolKind) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(data.len() / per.max(1));
    let mut argmax = Vec::new();
    for chunk in data.chunks(per) {
        match kind {
            PoolKind::Avg => out.push(chunk.iter().sum::<f64>() / per as f64),
            PoolKind::Max => {
                let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
                for (i, &v) in chunk.iter().enumerate() {
                    if v > best {
                        best = v;
                        arg = i;
                    }
                }
                out.push(best);
                argmax.push(arg);
            }
        }
    }
    (out, argmax)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of d(sum(out ⊙ r))/d(input) for a builder.
    fn check(
        inputs: Vec<Tensor>,
        build: impl Fn(&mut Tape, &[Var]) -> Var,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let proj = random(tape.value(out).shape(), &mut rng);
        let root = tape.dot(out, proj.clone()).unwrap();
        let grads = tape.backward(root);
        let eval = |ins: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone())).collect();
            let o = build(&mut t, &vs);
            t.value(o).data().iter().zip(proj.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[k], input.shape());
            for i in 0..input.numel() {
                let eps = 1e-6;
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += eps;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= eps;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = analytic.data()[i];
                assert!(
                    (fd - a).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {} elem {}: fd {} vs analytic {}",
                    k,
                    i,
                    fd,
                    a
                );
            }
        }
    }

    #[test]
    fn conv_pool_bn_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 2, 4, 4], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let s = random(&[3], &mut rng);
        let b = random(&[3], &mut rng);
        check(vec![x, w, s, b], |t, v| {
            let c = t.conv2d(v[0], v[1], ConvGeometry::same(3)).unwrap();
            let (n, _, _) = t.batch_norm(c, v[2], v[3], None).unwrap();
            t.avg_pool(n, 2).unwrap()
        });
    }

    #[test]
    fn strided_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[1, 2, 5, 5], &mut rng);
        let w = random(&[2, 2, 3, 3], &mut rng);
        check(vec![x, w], |t, v| {
            t.conv2d(v[0], v[1], ConvGeometry { stride: 2, padding: 1 }).unwrap()
        });
    }

    #[test]
    fn gate_and_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 3, 2, 2], &mut rng);
        let gi = random(&[2], &mut rng);
        let gc = random(&[2, 3], &mut rng);
        let gp = random(&[2, 1, 2, 2], &mut rng);
        check(vec![x, gi, gc, gp], |t, v| {
            let a = t.gate_image(v[0], v[1]).unwrap();
            let b = t.gate_channel(a, v[2]).unwrap();
            let c = t.gate_pixel(b, v[3]).unwrap();
            let pc = t.pool_channels(c).unwrap();
            let ps = t.pool_spatial(c, PoolKind::Max).unwrap();
            let pa = t.pool_spatial(c, PoolKind::Avg).unwrap();
            let pi = t.pool_image(c, PoolKind::Max).unwrap();
            let s1 = t.sum(pc);
            let s2 = t.mul(ps, pa).unwrap();
            let s2 = t.sum(s2);
            let s3 = t.sum(pi);
            let s = t.add(s1, s2).unwrap();
            t.add(s, s3).unwrap()
        });
    }

    #[test]
    fn mlp_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[3, 4], &mut rng);
        let w0 = random(&[2, 4], &mut rng);
        let w1 = random(&[4, 2], &mut rng);
        check(vec![x, w0, w1], |t, v| {
            let h = t.linear(v[0], v[1]).unwrap();
            let h = t.relu(h);
            let o = t.linear(h, v[2]).unwrap();
            let o = t.sigmoid(o);
            let o = t.transpose(o).unwrap();
            let o = t.reshape(o, &[12]).unwrap();
            let a = t.slice_outer(o, 0, 6).unwrap();
            let b = t.slice_outer(o, 6, 6).unwrap();
            let c = t.concat_outer(&[b, a]).unwrap();
            let d = t.sub(c, o).unwrap();
            t.scale(d, 0.7)
        });
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = random(&[3, 4], &mut rng);
        check(vec![z], |t, v| t.cross_entropy(v[0], &[0, 3, 1]).unwrap());
    }

    #[test]
    fn relaxed_lif_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[8], &mut rng);
        let h = random(&[8], &mut rng);
        let lif = LifParams::default();
        let sg = SurrogateParams {
            kind: crate::snn_core::SurrogateKind::Triangular,
            a: 0.6,
        };
        check(vec![x, h], move |t, v| {
            let u = t.add(v[1], v[0]).unwrap();
            let s = t.spike(u, lif.u_th, SpikeMode::Relaxed(sg));
            let hn = t.lif_reset(u, s, lif).unwrap();
            t.mul(hn, s).unwrap()
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::scalar(2.0));
        let b = t.leaf(Tensor::scalar(3.0));
        let c = t.mul(a, b).unwrap();
        let g = t.backward(c);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().data(), &[2.0]);
    }
}

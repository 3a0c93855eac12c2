//! Dynamic reverse-mode tape.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each operation evaluates
//! eagerly, stores its value and records how to propagate gradients to its
//! inputs; [`Graph::backward`] walks the tape in reverse.

mod params;

pub use params::{ParamEntry, ParamId, ParamStore};

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::filtering::{self, GridSpec, Lattice};
use crate::tensor::{self, BatchNormCache, BatchNormMode, ConvSpec, Scalar, Tensor};

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    index: usize,
    graph: u64,
}

/// Batch-norm behaviour for one call.
#[derive(Clone, Debug)]
pub enum BnMode<T> {
    Train,
    Eval { mean: Vec<T>, var: Vec<T> },
}

enum Op<T> {
    Leaf,
    Conv { input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec },
    BatchNorm { input: Var, scale: Var, shift: Var, cache: BatchNormCache<T> },
    Relu(Var),
    Sigmoid(Var),
    Mul(Var, Var),
    Add(Var, Var),
    Sum(Var),
    ChannelCenter(Var),
    ChannelL1Normalize(Var),
    RestrictOffsets { input: Var, grid: GridSpec },
    BilinearSample { image: Var, positions: Var },
    Deform { target: Var, kernels: Var, offsets: Var, grid: GridSpec, lattice: Lattice, residual: bool },
    PixelShuffle(Var, usize),
    PixelUnshuffle(Var, usize),
    Crop { input: Var, y0: usize, x0: usize },
    L1Loss { pred: Var, target: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Smallest L1 norm used as a divisor when normalising kernels.
const L1_FLOOR: f64 = 1e-12;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param });
        Var { index: self.nodes.len() - 1, graph: self.id }
    }

    fn check(&self, v: Var) -> Result<&Node<T>> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Contract("variable belongs to a different graph".into()));
        }
        Ok(&self.nodes[v.index])
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index].requires_grad)
    }

    /// Value of `v`. Panics if `v` was recorded on another graph.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.check(v).expect("foreign variable").value
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false, None)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true, None)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Leaf, true, Some(id))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        self.check(input)?;
        self.check(weight)?;
        let b = match bias {
            Some(b) => Some(self.check(b)?.value.data()),
            None => None,
        };
        let out = tensor::conv2d(self.value(input), self.value(weight), b, spec)?;
        let rg = self.grad_of(&[input, weight]) || bias.is_some_and(|b| self.grad_of(&[b]));
        Ok(self.push(out, Op::Conv { input, weight, bias, spec }, rg, None))
    }

    pub fn batch_norm(&mut self, input: Var, scale: Var, shift: Var, mode: &BnMode<T>, eps: T) -> Result<Var> {
        self.check(input)?;
        self.check(scale)?;
        self.check(shift)?;
        let m = match mode {
            BnMode::Train => BatchNormMode::Train,
            BnMode::Eval { mean, var } => BatchNormMode::Eval { running_mean: mean, running_var: var },
        };
        let (out, cache) = tensor::batch_norm_forward(
            self.value(input),
            self.value(scale).data(),
            self.value(shift).data(),
            m,
            eps,
        )?;
        let rg = self.grad_of(&[input, scale, shift]);
        Ok(self.push(out, Op::BatchNorm { input, scale, shift, cache }, rg, None))
    }

    /// Per-channel batch mean and unbiased variance of a training-mode batch norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        match &self.check(v).ok()?.op {
            Op::BatchNorm { cache, .. } if cache.training => Some((&cache.batch_mean, &cache.batch_var)),
            _ => None,
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.check(x)?.value.map(|v| v.max(T::zero()));
        let rg = self.grad_of(&[x]);
        Ok(self.push(out, Op::Relu(x), rg, None))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.check(x)?.value.map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.grad_of(&[x]);
        Ok(self.push(out, Op::Sigmoid(x), rg, None))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg, None))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg, None))
    }

    /// Sum of all elements as a 1×1×1×1 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.check(x)?.value.sum();
        let rg = self.grad_of(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg, None))
    }

    /// Subtract the per-pixel mean across channels.
    pub fn channel_center(&mut self, x: Var) -> Result<Var> {
        let t = &self.check(x)?.value;
        let out = channel_map(t, |vals, out| {
            let mean = vals.iter().fold(T::zero(), |a, &v| a + v) / T::from_usize(vals.len()).unwrap();
            for (o, &v) in out.iter_mut().zip(vals) {
                *o = v - mean;
            }
        });
        let rg = self.grad_of(&[x]);
        Ok(self.push(out, Op::ChannelCenter(x), rg, None))
    }

    /// Divide by the per-pixel L1 norm across channels.
    pub fn channel_l1_normalize(&mut self, x: Var) -> Result<Var> {
        let t = &self.check(x)?.value;
        let floor = T::from_f64_lossy(L1_FLOOR);
        let out = channel_map(t, |vals, out| {
            let norm = vals.iter().fold(T::zero(), |a, &v| a + v.abs()).max(floor);
            for (o, &v) in out.iter_mut().zip(vals) {
                *o = v / norm;
            }
        });
        let rg = self.grad_of(&[x]);
        Ok(self.push(out, Op::ChannelL1Normalize(x), rg, None))
    }

    pub fn restrict_offsets(&mut self, x: Var, grid: GridSpec) -> Result<Var> {
        let out = filtering::restrict_offsets(&self.check(x)?.value, grid)?;
        let rg = self.grad_of(&[x]);
        Ok(self.push(out, Op::RestrictOffsets { input: x, grid }, rg, None))
    }

    /// See [`filtering::bilinear_sample`]; positions are N×2×h×w `(x, y)`.
    pub fn bilinear_sample(&mut self, image: Var, positions: Var) -> Result<Var> {
        self.check(image)?;
        self.check(positions)?;
        let out = filtering::bilinear_sample(self.value(image), self.value(positions))?;
        let rg = self.grad_of(&[image, positions]);
        Ok(self.push(out, Op::BilinearSample { image, positions }, rg, None))
    }

    pub fn deformable_average(
        &mut self,
        target: Var,
        kernels: Var,
        offsets: Var,
        grid: GridSpec,
        lattice: Lattice,
        residual: bool,
    ) -> Result<Var> {
        self.check(target)?;
        self.check(kernels)?;
        self.check(offsets)?;
        let out = filtering::deformable_average_forward(
            self.value(target),
            self.value(kernels),
            self.value(offsets),
            grid,
            lattice,
            residual,
        )?;
        let rg = self.grad_of(&[target, kernels, offsets]);
        Ok(self.push(out, Op::Deform { target, kernels, offsets, grid, lattice, residual }, rg, None))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = tensor::pixel_shuffle(&self.check(x)?.value, r)?;
        let rg = self.grad_of(&[x]);
        Ok(self.push(out, Op::PixelShuffle(x, r), rg, None))
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = tensor::pixel_unshuffle(&self.check(x)?.value, r)?;
        let rg = self.grad_of(&[x]);
        Ok(self.push(out, Op::PixelUnshuffle(x, r), rg, None))
    }

    pub fn crop(&mut self, x: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let out = self.check(x)?.value.crop(y0, x0, h, w)?;
        let rg = self.grad_of(&[x]);
        Ok(self.push(out, Op::Crop { input: x, y0, x0 }, rg, None))
    }

    /// Sum of absolute differences; the subgradient at ties is zero.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.check(pred)?;
        self.check(target)?;
        let diff = self.value(pred).zip_map(self.value(target), |a, b| (a - b).abs())?;
        let rg = self.grad_of(&[pred, target]);
        Ok(self.push(Tensor::scalar(diff.sum()), Op::L1Loss { pred, target }, rg, None))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = self.check(loss)?;
        if node.value.shape() != [1, 1, 1, 1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { graph: self.id, grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.index].requires_grad {
            return Ok(());
        }
        match &mut grads[v.index] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { input, weight, bias, spec } => {
                let cg = tensor::conv2d_backward(self.value(*input), self.value(*weight), g, *spec, self.needs(*input))?;
                if let Some(dx) = cg.input {
                    self.accumulate(grads, *input, dx)?;
                }
                self.accumulate(grads, *weight, cg.weight)?;
                if let Some(b) = bias {
                    let shape = self.value(*b).shape();
                    self.accumulate(grads, *b, Tensor::from_vec(shape, cg.bias)?)?;
                }
            }
            Op::BatchNorm { input, scale, shift, cache } => {
                let (dx, dscale, dshift) =
                    tensor::batch_norm_backward(self.value(*input), self.value(*scale).data(), cache, g)?;
                self.accumulate(grads, *input, dx)?;
                self.accumulate(grads, *scale, Tensor::from_vec(self.value(*scale).shape(), dscale)?)?;
                self.accumulate(grads, *shift, Tensor::from_vec(self.value(*shift).shape(), dshift)?)?;
            }
            Op::Relu(x) => {
                let dx = self.value(*x).zip_map(g, |v, d| if v > T::zero() { d } else { T::zero() })?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Sigmoid(x) => {
                let dx = node.value.zip_map(g, |s, d| d * s * (T::one() - s))?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |d, v| d * v)?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |d, v| d * v)?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sum(x) => {
                let d = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), d))?;
            }
            Op::ChannelCenter(x) => {
                let dx = channel_map(g, |d, out| {
                    let mean = d.iter().fold(T::zero(), |a, &v| a + v) / T::from_usize(d.len()).unwrap();
                    for (o, &v) in out.iter_mut().zip(d) {
                        *o = v - mean;
                    }
                });
                self.accumulate(grads, *x, dx)?;
            }
            Op::ChannelL1Normalize(x) => {
                let floor = T::from_f64_lossy(L1_FLOOR);
                let dx = channel_map2(self.value(*x), g, |xs, ds, out| {
                    let raw = xs.iter().fold(T::zero(), |a, &v| a + v.abs());
                    let norm = raw.max(floor);
                    let dot = xs.iter().zip(ds).fold(T::zero(), |a, (&v, &d)| a + v * d);
                    for ((o, &v), &d) in out.iter_mut().zip(xs).zip(ds) {
                        *o = if raw > floor { d / norm - sign(v) * dot / (norm * norm) } else { d / norm };
                    }
                });
                self.accumulate(grads, *x, dx)?;
            }
            Op::RestrictOffsets { input, grid } => {
                let mask = filtering::restrict_offsets_mask(self.value(*input), *grid)?;
                let mut dx = g.clone();
                for (d, pass) in dx.data_mut().iter_mut().zip(mask) {
                    if !pass {
                        *d = T::zero();
                    }
                }
                self.accumulate(grads, *input, dx)?;
            }
            Op::BilinearSample { image, positions } => {
                let (di, dp) = filtering::bilinear_sample_backward(self.value(*image), self.value(*positions), g)?;
                self.accumulate(grads, *image, di)?;
                self.accumulate(grads, *positions, dp)?;
            }
            Op::Deform { target, kernels, offsets, grid, lattice, residual } => {
                let dg = filtering::deformable_average_backward(
                    self.value(*target),
                    self.value(*kernels),
                    self.value(*offsets),
                    *grid,
                    *lattice,
                    *residual,
                    g,
                    self.needs(*target),
                )?;
                if let Some(dt) = dg.target {
                    self.accumulate(grads, *target, dt)?;
                }
                self.accumulate(grads, *kernels, dg.kernels)?;
                self.accumulate(grads, *offsets, dg.offsets)?;
            }
            Op::PixelShuffle(x, r) => {
                self.accumulate(grads, *x, tensor::pixel_unshuffle(g, *r)?)?;
            }
            Op::PixelUnshuffle(x, r) => {
                self.accumulate(grads, *x, tensor::pixel_shuffle(g, *r)?)?;
            }
            Op::Crop { input, y0, x0 } => {
                let shape = self.value(*input).shape();
                let mut dx = Tensor::zeros(shape);
                for n in 0..g.n() {
                    for c in 0..g.c() {
                        for y in 0..g.h() {
                            for x in 0..g.w() {
                                dx.set(n, c, y + y0, x + x0, g.at(n, c, y, x));
                            }
                        }
                    }
                }
                self.accumulate(grads, *input, dx)?;
            }
            Op::L1Loss { pred, target } => {
                let d = g.data()[0];
                let sgn = self.value(*pred).zip_map(self.value(*target), |a, b| d * sign(a - b))?;
                if self.needs(*target) {
                    self.accumulate(grads, *target, sgn.map(|v| -v))?;
                }
                self.accumulate(grads, *pred, sgn)?;
            }
        }
        Ok(())
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Apply `f(channel values, output values)` at every (sample, pixel).
fn channel_map<T: Scalar>(t: &Tensor<T>, f: impl Fn(&[T], &mut [T])) -> Tensor<T> {
    channel_map2(t, t, |a, _, out| f(a, out))
}

fn channel_map2<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(&[T], &[T], &mut [T])) -> Tensor<T> {
    let [n, c, h, w] = a.shape();
    let hw = h * w;
    let mut out = Tensor::zeros(a.shape());
    let (mut va, mut vb, mut res) = (vec![T::zero(); c], vec![T::zero(); c], vec![T::zero(); c]);
    for s in 0..n {
        for p in 0..hw {
            for ch in 0..c {
                va[ch] = a.data()[(s * c + ch) * hw + p];
                vb[ch] = b.data()[(s * c + ch) * hw + p];
            }
            f(&va, &vb, &mut res);
            for (ch, &r) in res.iter().enumerate() {
                out.data_mut()[(s * c + ch) * hw + p] = r;
            }
        }
    }
    out
}

/// Gradients from one backward pass.
pub struct Gradients<T> {
    graph: u64,
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf recorded with [`Graph::input`] or [`Graph::param`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index)?.as_ref()
    }

    /// Gradient of every store entry in order; unreachable parameters and
    /// buffers get zeros.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        let mut out: Vec<Tensor<T>> = store.entries().iter().map(|e| Tensor::zeros(e.tensor.shape())).collect();
        for &(p, node) in &self.params {
            if let (Some(g), Some(slot)) = (&self.grads[node], out.get_mut(p.0)) {
                slot.add_assign(g).expect("parameter gradient shape");
            }
        }
        out
    }

    /// Gradients of trainable parameters keyed by name.
    pub fn named(&self, store: &ParamStore<T>) -> BTreeMap<String, Tensor<T>> {
        store
            .entries()
            .iter()
            .zip(self.for_store(store))
            .filter(|(e, _)| e.trainable)
            .map(|(e, g)| (e.name.clone(), g))
            .collect()
    }
}

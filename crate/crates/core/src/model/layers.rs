use rand::Rng;

use crate::autograd::{BnMode, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Scalar, Tensor};

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running estimates are updated after the step.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug)]
pub(crate) enum Layer {
    Conv { weight: ParamId, bias: Option<ParamId>, spec: ConvSpec },
    BatchNorm { scale: ParamId, shift: ParamId, mean: ParamId, var: ParamId },
    Relu,
}

/// Batch statistics observed by one training-mode batch-norm call.
#[derive(Clone, Debug)]
pub(crate) struct BnRecord {
    pub mean: ParamId,
    pub var: ParamId,
    pub node: Var,
}

/// Tape plus the bookkeeping of one forward pass.
pub struct Pass<'g, T> {
    pub graph: &'g mut Graph<T>,
    pub mode: Mode,
    pub(crate) records: Vec<BnRecord>,
}

impl<'g, T: Scalar> Pass<'g, T> {
    pub fn new(graph: &'g mut Graph<T>, mode: Mode) -> Self {
        Pass { graph, mode, records: Vec::new() }
    }
}

/// Sequential stack of layers sharing a name prefix.
#[derive(Clone, Debug)]
pub(crate) struct Stream {
    pub name: String,
    pub layers: Vec<(String, Layer)>,
}

pub(crate) struct StreamBuilder<'a, T, R> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    pub stream: Stream,
}

impl<'a, T: Scalar, R: Rng> StreamBuilder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R, name: &str) -> Self {
        StreamBuilder { store, rng, stream: Stream { name: name.to_string(), layers: Vec::new() } }
    }

    pub fn conv(
        &mut self,
        layer: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: ConvSpec,
        bias: bool,
    ) -> Result<&mut Self> {
        let (weight, bias) = conv_params(self.store, self.rng, &format!("{}.{layer}", self.stream.name), cin, cout, k, bias)?;
        self.stream.layers.push((layer.into(), Layer::Conv { weight, bias, spec }));
        Ok(self)
    }

    pub fn bn(&mut self, layer: &str, channels: usize) -> Result<&mut Self> {
        let p = format!("{}.{layer}", self.stream.name);
        let shape = [1, channels, 1, 1];
        let scale = self.store.add(format!("{p}.scale"), Tensor::full(shape, T::one()), true)?;
        let shift = self.store.add(format!("{p}.shift"), Tensor::zeros(shape), true)?;
        let mean = self.store.add(format!("{p}.running_mean"), Tensor::zeros(shape), false)?;
        let var = self.store.add(format!("{p}.running_var"), Tensor::full(shape, T::one()), false)?;
        self.stream.layers.push((layer.into(), Layer::BatchNorm { scale, shift, mean, var }));
        Ok(self)
    }

    pub fn relu(&mut self) -> &mut Self {
        self.stream.layers.push(("relu".into(), Layer::Relu));
        self
    }
}

/// Weight uniform in ±1/sqrt(fan_in); bias zero.
pub(crate) fn conv_params<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    bias: bool,
) -> Result<(ParamId, Option<ParamId>)> {
    let bound = 1.0 / ((cin * k * k) as f64).sqrt();
    let w = Tensor::random_uniform([cout, cin, k, k], -bound, bound, rng);
    let weight = store.add(format!("{prefix}.weight"), w, true)?;
    let bias = if bias { Some(store.add(format!("{prefix}.bias"), Tensor::zeros([1, cout, 1, 1]), true)?) } else { None };
    Ok((weight, bias))
}

impl Stream {
    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, pass: &mut Pass<'_, T>, input: Var) -> Result<Var> {
        let mut x = input;
        for (name, layer) in &self.layers {
            x = apply(store, pass, layer, x).map_err(|e| match e {
                Error::Dimension { context, expected, actual } => Error::Dimension {
                    context: format!("{}.{name}: {context}", self.name),
                    expected,
                    actual,
                },
                Error::Config(msg) => Error::Config(format!("{}.{name}: {msg}", self.name)),
                other => other,
            })?;
        }
        Ok(x)
    }
}

pub(crate) fn apply<T: Scalar>(store: &ParamStore<T>, pass: &mut Pass<'_, T>, layer: &Layer, x: Var) -> Result<Var> {
    let g = &mut *pass.graph;
    match layer {
        Layer::Conv { weight, bias, spec } => {
            let w = g.param(store, *weight);
            let b = bias.map(|b| g.param(store, b));
            g.conv2d(x, w, b, *spec)
        }
        Layer::BatchNorm { scale, shift, mean, var } => {
            let s = g.param(store, *scale);
            let t = g.param(store, *shift);
            let mode = match pass.mode {
                Mode::Train => BnMode::Train,
                Mode::Eval => BnMode::Eval { mean: store.get(*mean).data().to_vec(), var: store.get(*var).data().to_vec() },
            };
            let y = g.batch_norm(x, s, t, &mode, T::from_f64_lossy(BN_EPS))?;
            if pass.mode == Mode::Train {
                pass.records.push(BnRecord { mean: *mean, var: *var, node: y });
            }
            Ok(y)
        }
        Layer::Relu => g.relu(x),
    }
}

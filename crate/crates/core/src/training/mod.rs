//! End-to-end training: L1 loss, Adam with step decay, crop sampling and
//! checkpoints.
//!
//! DKN is trained on crops of the replicate-padded inputs whose side is
//! `51 + 4(m-1)`; a single pass then predicts an m×m lattice of pixels spaced
//! 4 apart, each from its own 51×51 receptive field. FDKN is trained on
//! dense crops.
//!
//! Each iteration draws its randomness from a stream keyed by
//! `(seed, iteration)`, so a resumed run replays exactly.

mod adam;
mod checkpoint;
mod scene;

pub use adam::{Adam, BETA1, BETA2, EPSILON};
pub use checkpoint::{
    decode, encode, load_checkpoint, load_checkpoint_as, save_checkpoint, Checkpoint, MAGIC, VERSION,
};
pub use scene::{
    discontinuity_fraction, generate_scene, synthesize_pair, ScenePair, SyntheticPair, EDGE_THRESHOLD,
    MIN_EDGE_FRACTION, MIN_SCENE_SIDE,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::filtering::bicubic_resize;
use crate::inference::BORDER;
use crate::model::{Mode, Network, Pass, Variant, RECEPTIVE_FIELD, RESAMPLE_STRIDE};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Iterations between learning-rate decays.
    pub decay_every: usize,
    /// Divisor applied at each decay.
    pub decay_factor: f64,
    /// Side of the high-resolution window covered by the loss. DKN samples
    /// it on a stride-4 lattice; FDKN rounds it down to a multiple of 4.
    pub crop: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 40_000,
            batch_size: 1,
            base_lr: 1e-3,
            decay_every: 10_000,
            decay_factor: 5.0,
            crop: 96,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.decay_every == 0 || self.crop == 0 {
            return Err(Error::Config("iterations, batch size, decay interval and crop must be positive".into()));
        }
        if !(self.base_lr > 0.0 && self.decay_factor >= 1.0) {
            return Err(Error::Config("learning rate must be positive and the decay factor at least 1".into()));
        }
        if self.iterations > self.decay_every && !self.iterations.is_multiple_of(self.decay_every) {
            return Err(Error::Config(format!(
                "{} iterations do not end on a decay boundary (every {})",
                self.iterations, self.decay_every
            )));
        }
        Ok(())
    }
}

/// Step-decayed learning rate.
pub fn lr_at(iteration: usize, config: &TrainConfig) -> f64 {
    config.base_lr / config.decay_factor.powi((iteration / config.decay_every) as i32)
}

/// Sum of absolute differences.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    if pred.shape() != gt.shape() {
        return Err(Error::dim("l1 loss operands", format!("{:?}", gt.shape()), format!("{:?}", pred.shape())));
    }
    Ok(pred.data().iter().zip(gt.data()).fold(T::zero(), |a, (&p, &g)| a + (p - g).abs()))
}

/// One scene with its network inputs precomputed.
struct Prepared {
    guidance: Tensor<f32>,
    upsampled: Tensor<f32>,
    target: Tensor<f32>,
}

/// Scenes ready for crop sampling at a fixed scale.
pub struct TrainSet {
    scale: usize,
    padded: bool,
    items: Vec<Prepared>,
}

impl TrainSet {
    pub fn new(scenes: &[ScenePair], scale: usize, variant: Variant) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let padded = variant == Variant::Dkn;
        let mut items = Vec::with_capacity(scenes.len());
        for s in scenes {
            let pair = synthesize_pair(s, scale)?;
            let mut upsampled = bicubic_resize(&pair.lr_depth, s.height(), s.width());
            let mut guidance = pair.guidance;
            if padded {
                upsampled = upsampled.pad_replicate(BORDER, BORDER, BORDER, BORDER);
                guidance = guidance.pad_replicate(BORDER, BORDER, BORDER, BORDER);
            }
            items.push(Prepared { guidance, upsampled, target: pair.target });
        }
        Ok(TrainSet { scale, padded, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn scale(&self) -> usize {
        self.scale
    }
}

/// A batch of crops: network inputs plus the targets the output is compared to.
pub struct Batch {
    pub guidance: Tensor<f32>,
    pub upsampled: Tensor<f32>,
    pub target: Tensor<f32>,
}

fn lattice_side(crop: usize, extent: usize) -> usize {
    let m = crop.div_ceil(RESAMPLE_STRIDE);
    m.min((extent - 1) / RESAMPLE_STRIDE + 1).max(1)
}

fn sample_crop(set: &TrainSet, crop: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let item = &set.items[rng.gen_range(0..set.items.len())];
    let (h, w) = (item.target.h(), item.target.w());
    if set.padded {
        let m = lattice_side(crop, h.min(w));
        let span = RESAMPLE_STRIDE * (m - 1);
        let y0 = rng.gen_range(0..h - span);
        let x0 = rng.gen_range(0..w - span);
        let side = RECEPTIVE_FIELD + span;
        let target = Tensor::from_fn([1, 1, m, m], |_, _, i, j| {
            item.target.at(0, 0, y0 + RESAMPLE_STRIDE * i, x0 + RESAMPLE_STRIDE * j)
        });
        Ok((item.guidance.crop(y0, x0, side, side)?, item.upsampled.crop(y0, x0, side, side)?, target))
    } else {
        let s = (crop.min(h).min(w) / RESAMPLE_STRIDE * RESAMPLE_STRIDE).max(RESAMPLE_STRIDE);
        let y0 = rng.gen_range(0..=h - s);
        let x0 = rng.gen_range(0..=w - s);
        Ok((item.guidance.crop(y0, x0, s, s)?, item.upsampled.crop(y0, x0, s, s)?, item.target.crop(y0, x0, s, s)?))
    }
}

/// Random generator for one iteration.
pub fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

/// Crops used at `iteration`.
pub fn sample_batch(set: &TrainSet, config: &TrainConfig, iteration: usize) -> Result<Batch> {
    let mut rng = iteration_rng(config.seed, iteration);
    let (mut gs, mut us, mut ts) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..config.batch_size {
        let (g, u, t) = sample_crop(set, config.crop, &mut rng)?;
        gs.push(g);
        us.push(u);
        ts.push(t);
    }
    Ok(Batch { guidance: Tensor::stack(&gs)?, upsampled: Tensor::stack(&us)?, target: Tensor::stack(&ts)? })
}

/// Training state: network, optimiser, progress and loss history.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub network: Network<f32>,
    pub optimizer: Adam<f32>,
    pub config: TrainConfig,
    pub iteration: usize,
    pub history: Vec<f64>,
}

impl Trainer {
    pub fn new(network: Network<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(network.params());
        Ok(Trainer { network, optimizer, config, iteration: 0, history: Vec::new() })
    }

    /// Continue from a checkpoint. The seed stored in the checkpoint wins.
    pub fn resume(ckpt: Checkpoint, mut config: TrainConfig) -> Result<Self> {
        config.seed = ckpt.seed;
        config.validate()?;
        let optimizer = match ckpt.optimizer {
            Some(o) => o,
            None => Adam::new(ckpt.network.params()),
        };
        Ok(Trainer {
            network: ckpt.network,
            optimizer,
            config,
            iteration: ckpt.iteration as usize,
            history: ckpt.history,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            network: self.network.clone(),
            optimizer: Some(self.optimizer.clone()),
            iteration: self.iteration as u64,
            seed: self.config.seed,
            history: self.history.clone(),
        }
    }

    /// Loss and parameter gradients on `batch` without updating anything.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(f64, Vec<Tensor<f32>>)> {
        let (loss, grads, _) = self.forward_backward(batch, Mode::Train)?;
        Ok((loss, grads))
    }

    fn forward_backward(&self, batch: &Batch, mode: Mode) -> Result<(f64, Vec<Tensor<f32>>, Graph<f32>)> {
        let net = &self.network;
        let mut graph = Graph::new();
        let mut pass = Pass::new(&mut graph, mode);
        let g = if net.config().guided { Some(pass.graph.constant(batch.guidance.clone())) } else { None };
        let u = pass.graph.constant(batch.upsampled.clone());
        let t = pass.graph.constant(batch.target.clone());
        let pred = net.predict(&mut pass, g, u)?;
        let loss = pass.graph.l1_loss(pred, t)?;
        let value = pass.graph.value(loss).data()[0] as f64;
        let grads = pass.graph.backward(loss)?.for_store(net.params());
        Ok((value, grads, graph))
    }

    /// One optimisation step; returns the mean per-pixel L1 loss.
    pub fn step(&mut self, set: &TrainSet) -> Result<f64> {
        let batch = sample_batch(set, &self.config, self.iteration)?;
        let net = &self.network;
        let mut graph = Graph::new();
        let mut pass = Pass::new(&mut graph, Mode::Train);
        let g = if net.config().guided { Some(pass.graph.constant(batch.guidance)) } else { None };
        let u = pass.graph.constant(batch.upsampled);
        let count = batch.target.numel();
        let t = pass.graph.constant(batch.target);
        let pred = net.predict(&mut pass, g, u)?;
        let loss = pass.graph.l1_loss(pred, t)?;
        let value = pass.graph.value(loss).data()[0] as f64 / count as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: self.iteration, last_finite: self.history.last().copied() });
        }
        let grads = pass.graph.backward(loss)?.for_store(net.params());
        self.network.absorb_batch_stats(&pass);
        let lr = lr_at(self.iteration, &self.config);
        self.optimizer.step(self.network.params_mut(), &grads, lr)?;
        self.history.push(value);
        self.iteration += 1;
        Ok(value)
    }

    /// Train until `config.iterations`, calling `on_step(self)` after each
    /// iteration.
    pub fn run(&mut self, set: &TrainSet, mut on_step: impl FnMut(&Self) -> Result<()>) -> Result<()> {
        if set.scale() != self.network.config().scale {
            log::warn!(
                "training set scale {} differs from the model's scale {}",
                set.scale(),
                self.network.config().scale
            );
        }
        while self.iteration < self.config.iterations {
            self.step(set)?;
            on_step(self)?;
        }
        Ok(())
    }
}

/// Build a network, train it on `scenes` and return the trainer.
pub fn train(network: Network<f32>, scenes: &[ScenePair], config: TrainConfig) -> Result<Trainer> {
    let set = TrainSet::new(scenes, network.config().scale, network.config().variant)?;
    let mut trainer = Trainer::new(network, config)?;
    trainer.run(&set, |_| Ok(()))?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), 1e-3);
        assert!((lr_at(10_000, &c) - 2e-4).abs() < 1e-18);
        assert!((lr_at(39_999, &c) - 8e-6).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for it in (0..40_000).step_by(250) {
            let lr = lr_at(it, &c);
            assert!(lr <= prev);
            assert_eq!(lr, lr_at(it / 10_000 * 10_000, &c));
            prev = lr;
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { iterations: 2000, ..Default::default() }.validate().is_ok());
        assert!(TrainConfig { iterations: 15_000, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { base_lr: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn l1_values() {
        let a = Tensor::<f32>::from_fn([1, 1, 3, 3], |_, _, y, x| (y * 3 + x) as f32);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(l1_loss(&a.map(|v| v + 0.5), &a).unwrap(), 4.5);
        assert!(l1_loss(&a, &Tensor::zeros([1, 1, 3, 2])).is_err());
    }

    #[test]
    fn dkn_crops_line_up_with_targets() {
        let scene = generate_scene(1, 64, 64).unwrap();
        let set = TrainSet::new(std::slice::from_ref(&scene), 4, Variant::Dkn).unwrap();
        let cfg = TrainConfig { crop: 16, ..Default::default() };
        let b = sample_batch(&set, &cfg, 3).unwrap();
        assert_eq!(b.target.shape(), [1, 1, 4, 4]);
        assert_eq!(b.upsampled.shape(), [1, 1, 63, 63]);
        let fdkn = TrainSet::new(std::slice::from_ref(&scene), 4, Variant::Fdkn).unwrap();
        let b = sample_batch(&fdkn, &TrainConfig { crop: 30, batch_size: 2, ..Default::default() }, 0).unwrap();
        assert_eq!(b.target.shape(), [2, 1, 28, 28]);
        assert_eq!(b.guidance.shape(), [2, 3, 28, 28]);
    }

    #[test]
    fn small_step_reduces_loss() {
        let scene = generate_scene(2, 64, 64).unwrap();
        let set = TrainSet::new(std::slice::from_ref(&scene), 4, Variant::Fdkn).unwrap();
        let net = Network::<f32>::new(ModelConfig::fdkn(), 1).unwrap();
        let cfg = TrainConfig { base_lr: 1e-4, crop: 32, ..Default::default() };
        let mut trainer = Trainer::new(net, cfg.clone()).unwrap();
        let batch = sample_batch(&set, &cfg, 0).unwrap();
        let (before, _) = trainer.loss_and_grads(&batch).unwrap();
        trainer.step(&set).unwrap();
        let (after, _) = trainer.loss_and_grads(&batch).unwrap();
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let scenes = [generate_scene(4, 64, 64).unwrap()];
        let set = TrainSet::new(&scenes, 4, Variant::Fdkn).unwrap();
        let cfg = TrainConfig { iterations: 3, crop: 16, seed: 9, ..Default::default() };
        let net = Network::<f32>::new(ModelConfig::fdkn(), 2).unwrap();
        let mut straight = Trainer::new(net.clone(), cfg.clone()).unwrap();
        straight.run(&set, |_| Ok(())).unwrap();

        let mut first = Trainer::new(net, cfg.clone()).unwrap();
        first.step(&set).unwrap();
        first.step(&set).unwrap();
        let bytes = encode(&first.checkpoint());
        let mut resumed = Trainer::resume(decode(&bytes).unwrap(), cfg).unwrap();
        resumed.step(&set).unwrap();
        assert_eq!(straight.history, resumed.history);
        assert_eq!(encode(&straight.checkpoint()), encode(&resumed.checkpoint()));
    }

    #[test]
    fn non_finite_loss_aborts() {
        let scenes = [generate_scene(4, 64, 64).unwrap()];
        let set = TrainSet::new(&scenes, 4, Variant::Fdkn).unwrap();
        let mut net = Network::<f32>::new(ModelConfig::fdkn(), 2).unwrap();
        let id = net.params().id("depth.weight_head.bias").unwrap();
        net.params_mut().get_mut(id).data_mut()[0] = f32::NAN;
        let mut t = Trainer::new(net, TrainConfig { crop: 16, ..Default::default() }).unwrap();
        match t.step(&set) {
            Err(Error::NonFiniteLoss { iteration: 0, last_finite: None }) => {}
            other => panic!("{other:?}"),
        }
    }
}

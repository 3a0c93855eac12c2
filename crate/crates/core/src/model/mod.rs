//! DKN and FDKN networks.
//!
//! Both variants share the same outline: a feature stack per stream
//! (guidance and depth), 1×1 heads regressing per-pixel kernel weights and
//! sampling offsets, and the constraint layers that turn head outputs into a
//! valid [`KernelField`] and [`OffsetField`].
//!
//! The DKN stack is unpadded; a 51×51 crop yields a single 128×1×1 feature
//! vector, and a larger crop of side `51 + 4(m-1)` yields an m×m grid of
//! features for target pixels spaced 4 apart. FDKN works on 4× pixel-
//! unshuffled images with padded 3×3 convolutions and emits fields for all
//! pixels at once.

mod config;
mod layers;

pub use config::{ModelConfig, Variant, PATCH_CENTER, RECEPTIVE_FIELD, RESAMPLE_STRIDE};
pub use layers::{Mode, Pass};

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::filtering::{KernelField, Lattice, OffsetField};
use crate::tensor::{ConvSpec, Scalar, Tensor};
use layers::{conv_params, Stream, StreamBuilder, BN_MOMENTUM};

/// Channel widths of the six FDKN layers.
pub const FDKN_WIDTHS: [usize; 6] = [32, 32, 64, 64, 96, 128];

/// Feature channels at the end of either stack.
pub const FEATURES: usize = 128;

#[derive(Clone, Debug)]
struct Head {
    weight: ParamId,
    bias: Option<ParamId>,
}

#[derive(Clone, Debug)]
struct Branch {
    stream: Stream,
    weight_head: Head,
    offset_head: Option<Head>,
}

/// Output of the feature stacks. `guide` is `None` for unguided models.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    pub guide: Option<Var>,
    pub depth: Var,
}

pub struct Network<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    guide: Option<Branch>,
    depth: Branch,
    passes: AtomicUsize,
}

impl<T: Scalar> Clone for Network<T> {
    fn clone(&self) -> Self {
        Network {
            config: self.config,
            store: self.store.clone(),
            guide: self.guide.clone(),
            depth: self.depth.clone(),
            passes: AtomicUsize::new(self.passes()),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Network<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("config", &self.config)
            .field("parameters", &self.num_parameters())
            .finish()
    }
}

fn dkn_stream<T: Scalar, R: rand::Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    cin: usize,
) -> Result<Stream> {
    let valid = ConvSpec { stride: 1, padding: 0 };
    let down = ConvSpec { stride: 2, padding: 0 };
    let mut b = StreamBuilder::new(store, rng, name);
    b.conv("conv1", cin, 32, 7, valid, false)?.bn("bn1", 32)?.relu();
    b.conv("down1", 32, 32, 2, down, true)?.relu();
    b.conv("conv2", 32, 64, 5, valid, false)?.bn("bn2", 64)?.relu();
    b.conv("down2", 64, 64, 2, down, true)?.relu();
    b.conv("conv3", 64, 128, 5, valid, false)?.bn("bn3", 128)?.relu();
    b.conv("conv4", 128, 128, 3, valid, true)?.relu();
    b.conv("conv5", 128, FEATURES, 3, valid, true)?.relu();
    Ok(b.stream)
}

fn fdkn_stream<T: Scalar, R: rand::Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    cin: usize,
) -> Result<Stream> {
    let same = ConvSpec { stride: 1, padding: 1 };
    let mut b = StreamBuilder::new(store, rng, name);
    let mut c = cin;
    for (i, &width) in FDKN_WIDTHS.iter().enumerate() {
        let normed = i < 3;
        b.conv(&format!("conv{}", i + 1), c, width, 3, same, !normed)?;
        if normed {
            b.bn(&format!("bn{}", i + 1), width)?;
        }
        b.relu();
        c = width;
    }
    Ok(b.stream)
}

impl<T: Scalar> Network<T> {
    /// Fresh network; identical seeds give bit-identical parameters.
    ///
    /// Offset heads start so that all offsets are zero. In a guided model only
    /// the depth-stream head is zeroed: with both factors of the product at
    /// zero neither would ever receive a gradient.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let sub = match config.variant {
            Variant::Dkn => 1,
            Variant::Fdkn => RESAMPLE_STRIDE * RESAMPLE_STRIDE,
        };
        let taps = config.taps() * sub;
        let build = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cin: usize, zero_offsets: bool| {
            let stream = match config.variant {
                Variant::Dkn => dkn_stream(store, rng, name, cin)?,
                Variant::Fdkn => fdkn_stream(store, rng, name, cin * sub)?,
            };
            let (weight, bias) = conv_params(store, rng, &format!("{name}.weight_head"), FEATURES, taps, 1, true)?;
            let weight_head = Head { weight, bias };
            let offset_head = if config.learn_offsets {
                let (weight, bias) =
                    conv_params(store, rng, &format!("{name}.offset_head"), FEATURES, 2 * taps, 1, true)?;
                if zero_offsets {
                    store.get_mut(weight).data_mut().fill(T::zero());
                }
                Some(Head { weight, bias })
            } else {
                None
            };
            Ok::<_, Error>(Branch { stream, weight_head, offset_head })
        };
        let guide = if config.guided {
            Some(build(&mut store, &mut rng, "guide", config.guidance_channels, false)?)
        } else {
            None
        };
        let depth = build(&mut store, &mut rng, "depth", 1, true)?;
        Ok(Network { config, store, guide, depth, passes: AtomicUsize::new(0) })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable()
    }

    /// Feature-stack evaluations since construction or the last reset.
    pub fn passes(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn reset_passes(&self) {
        self.passes.store(0, Ordering::Relaxed);
    }

    /// Same architecture and parameter values in another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config,
            store: self.store.cast(),
            guide: self.guide.clone(),
            depth: self.depth.clone(),
            passes: AtomicUsize::new(0),
        }
    }

    /// Zero the weight heads of both streams so that the residual variant
    /// reproduces its input exactly.
    pub fn zero_weight_heads(&mut self) {
        for branch in self.guide.iter().chain(std::iter::once(&self.depth)) {
            let h = &branch.weight_head;
            self.store.get_mut(h.weight).data_mut().fill(T::zero());
            if let Some(b) = h.bias {
                self.store.get_mut(b).data_mut().fill(T::zero());
            }
        }
    }

    fn check_inputs(&self, guidance: Option<&Tensor<T>>, target: &Tensor<T>) -> Result<()> {
        if target.c() != 1 {
            return Err(Error::dim("target channels", 1, target.c()));
        }
        if let (true, None) = (self.config.guided, guidance) {
            return Err(Error::GuidanceRequired);
        }
        if let (true, Some(g)) = (self.config.guided, guidance) {
            if g.c() != self.config.guidance_channels {
                return Err(Error::dim("guidance channels", self.config.guidance_channels, g.c()));
            }
            if (g.n(), g.h(), g.w()) != (target.n(), target.h(), target.w()) {
                return Err(Error::dim(
                    "guidance vs target extent",
                    (target.n(), target.h(), target.w()),
                    (g.n(), g.h(), g.w()),
                ));
            }
        }
        Ok(())
    }

    /// Run the feature stacks. Guidance is ignored by unguided models.
    ///
    /// For FDKN the inputs are pixel-unshuffled first and must have sides
    /// divisible by 4.
    pub fn extract_features(&self, pass: &mut Pass<'_, T>, guidance: Option<Var>, target: Var) -> Result<Features> {
        let g_val = guidance.map(|g| pass.graph.value(g).clone());
        self.check_inputs(g_val.as_ref(), pass.graph.value(target))?;
        self.passes.fetch_add(1, Ordering::Relaxed);
        let prep = |pass: &mut Pass<'_, T>, x: Var| match self.config.variant {
            Variant::Dkn => Ok(x),
            Variant::Fdkn => pass.graph.pixel_unshuffle(x, RESAMPLE_STRIDE),
        };
        let guide = match (&self.guide, guidance) {
            (Some(branch), Some(g)) => {
                let x = prep(pass, g)?;
                Some(branch.stream.forward(&self.store, pass, x)?)
            }
            _ => None,
        };
        let x = prep(pass, target)?;
        let depth = self.depth.stream.forward(&self.store, pass, x)?;
        Ok(Features { guide, depth })
    }

    fn head(&self, pass: &mut Pass<'_, T>, head: &Head, x: Var) -> Result<Var> {
        let g = &mut *pass.graph;
        let w = g.param(&self.store, head.weight);
        let b = head.bias.map(|b| g.param(&self.store, b));
        g.conv2d(x, w, b, ConvSpec { stride: 1, padding: 0 })
    }

    fn combine(&self, pass: &mut Pass<'_, T>, guide: Option<Var>, depth: Var) -> Result<Var> {
        match guide {
            Some(g) => pass.graph.mul(g, depth),
            None => Ok(depth),
        }
    }

    fn to_full_resolution(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        match self.config.variant {
            Variant::Dkn => Ok(x),
            Variant::Fdkn => pass.graph.pixel_shuffle(x, RESAMPLE_STRIDE),
        }
    }

    /// Kernel weights: sigmoid per stream, product across streams, then mean
    /// subtraction (residual) or L1 normalisation.
    pub fn regress_weights(&self, pass: &mut Pass<'_, T>, features: &Features) -> Result<Var> {
        let guide = match (&self.guide, features.guide) {
            (Some(branch), Some(f)) => {
                let h = self.head(pass, &branch.weight_head, f)?;
                Some(pass.graph.sigmoid(h)?)
            }
            _ => None,
        };
        let h = self.head(pass, &self.depth.weight_head, features.depth)?;
        let depth = pass.graph.sigmoid(h)?;
        let raw = self.combine(pass, guide, depth)?;
        let raw = self.to_full_resolution(pass, raw)?;
        if self.config.residual {
            pass.graph.channel_center(raw)
        } else {
            pass.graph.channel_l1_normalize(raw)
        }
    }

    /// Sampling offsets: head product across streams, restricted to the
    /// search window. All zero when offsets are not learned.
    pub fn regress_offsets(&self, pass: &mut Pass<'_, T>, features: &Features) -> Result<Var> {
        let grid = self.config.grid();
        let Some(depth_head) = &self.depth.offset_head else {
            let f = pass.graph.value(features.depth);
            let s = match self.config.variant {
                Variant::Dkn => 1,
                Variant::Fdkn => RESAMPLE_STRIDE,
            };
            let shape = [f.n(), 2 * grid.taps(), f.h() * s, f.w() * s];
            return Ok(pass.graph.constant(Tensor::zeros(shape)));
        };
        let guide = match (&self.guide, features.guide) {
            (Some(Branch { offset_head: Some(head), .. }), Some(f)) => Some(self.head(pass, head, f)?),
            _ => None,
        };
        let depth = self.head(pass, depth_head, features.depth)?;
        let raw = self.combine(pass, guide, depth)?;
        let raw = self.to_full_resolution(pass, raw)?;
        pass.graph.restrict_offsets(raw, grid)
    }

    /// Kernel and offset fields for the given inputs. For DKN the fields
    /// live on the stride-4 lattice with origin (25, 25) inside the input;
    /// for FDKN they are dense.
    pub fn fields(&self, pass: &mut Pass<'_, T>, guidance: Option<Var>, target: Var) -> Result<(Var, Var)> {
        let features = self.extract_features(pass, guidance, target)?;
        let k = self.regress_weights(pass, &features)?;
        let o = self.regress_offsets(pass, &features)?;
        Ok((k, o))
    }

    /// Lattice of the fields relative to the input image.
    pub fn lattice(&self) -> Lattice {
        match self.config.variant {
            Variant::Dkn => Lattice { origin_y: PATCH_CENTER, origin_x: PATCH_CENTER, stride: RESAMPLE_STRIDE },
            Variant::Fdkn => Lattice::DENSE,
        }
    }

    /// Full prediction. `target` is the bicubic-upsampled depth, which is
    /// both the network input and the image being filtered.
    ///
    /// DKN: input side `51 + 4(m-1)` gives an m×m output for the pixels
    /// `25 + 4i`. FDKN: output has the input's size.
    pub fn predict(&self, pass: &mut Pass<'_, T>, guidance: Option<Var>, target: Var) -> Result<Var> {
        let (k, o) = self.fields(pass, guidance, target)?;
        pass.graph.deformable_average(target, k, o, self.config.grid(), self.lattice(), self.config.residual)
    }

    /// Filtered value at the centre of a 51×51 patch, using running
    /// batch-norm statistics.
    pub fn forward_patch(&self, guidance: Option<&Tensor<T>>, target: &Tensor<T>) -> Result<T> {
        if self.config.variant != Variant::Dkn {
            return Err(Error::Config("forward_patch needs a DKN model".into()));
        }
        target.expect_shape([1, 1, RECEPTIVE_FIELD, RECEPTIVE_FIELD], "target patch")?;
        let mut graph = Graph::new();
        let mut pass = Pass::new(&mut graph, Mode::Eval);
        let g = self.guidance_var(&mut pass, guidance);
        let t = pass.graph.constant(target.clone());
        let out = self.predict(&mut pass, g, t)?;
        Ok(pass.graph.value(out).data()[0])
    }

    /// Dense fields for a whole image in a single pass (FDKN only). Sides
    /// must be multiples of 4.
    pub fn forward_full_fdkn(
        &self,
        guidance: Option<&Tensor<T>>,
        target: &Tensor<T>,
    ) -> Result<(KernelField<T>, OffsetField<T>)> {
        if self.config.variant != Variant::Fdkn {
            return Err(Error::Config("forward_full_fdkn needs an FDKN model".into()));
        }
        let (h, w) = (target.h(), target.w());
        if h % RESAMPLE_STRIDE != 0 || w % RESAMPLE_STRIDE != 0 {
            return Err(Error::PaddingRequired { height: h, width: w, stride: RESAMPLE_STRIDE });
        }
        self.eval_fields(guidance, target)
    }

    /// Fields in eval mode, detached from any tape.
    pub fn eval_fields(
        &self,
        guidance: Option<&Tensor<T>>,
        target: &Tensor<T>,
    ) -> Result<(KernelField<T>, OffsetField<T>)> {
        let mut graph = Graph::new();
        let mut pass = Pass::new(&mut graph, Mode::Eval);
        let g = self.guidance_var(&mut pass, guidance);
        let t = pass.graph.constant(target.clone());
        let (k, o) = self.fields(&mut pass, g, t)?;
        Ok((KernelField(graph.value(k).clone()), OffsetField(graph.value(o).clone())))
    }

    fn guidance_var(&self, pass: &mut Pass<'_, T>, guidance: Option<&Tensor<T>>) -> Option<Var> {
        if self.config.guided {
            guidance.map(|g| pass.graph.constant(g.clone()))
        } else {
            None
        }
    }

    /// Fold the batch statistics observed during a training pass into the
    /// running estimates.
    pub fn absorb_batch_stats(&mut self, pass: &Pass<'_, T>) {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        for rec in &pass.records {
            let Some((mean, var)) = pass.graph.batch_stats(rec.node) else { continue };
            let (mean, var) = (mean.to_vec(), var.to_vec());
            for (r, b) in self.store.get_mut(rec.mean).data_mut().iter_mut().zip(&mean) {
                *r = (T::one() - m) * *r + m * *b;
            }
            for (r, b) in self.store.get_mut(rec.var).data_mut().iter_mut().zip(&var) {
                *r = (T::one() - m) * *r + m * *b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([1, c, h, w], |_, _, _, _| rng.gen::<f32>())
    }

    #[test]
    fn parameter_budgets() {
        let dkn = Network::<f32>::new(ModelConfig::dkn(), 0).unwrap();
        let fdkn = Network::<f32>::new(ModelConfig::fdkn(), 0).unwrap();
        let (a, b) = (dkn.num_parameters() as f64, fdkn.num_parameters() as f64);
        assert!((a / 1.1e6 - 1.0).abs() < 0.1, "dkn {a}");
        assert!((b / 0.6e6 - 1.0).abs() < 0.1, "fdkn {b}");
        assert!(b < a);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Network::<f32>::new(ModelConfig::dkn(), 7).unwrap();
        let b = Network::<f32>::new(ModelConfig::dkn(), 7).unwrap();
        let c = Network::<f32>::new(ModelConfig::dkn(), 8).unwrap();
        assert!(a.params().bit_eq(b.params()));
        assert!(!a.params().bit_eq(c.params()));
    }

    #[test]
    fn streams_are_disjoint() {
        let net = Network::<f32>::new(ModelConfig::dkn(), 0).unwrap();
        for e in net.params().entries() {
            assert!(e.name.starts_with("guide.") || e.name.starts_with("depth."), "{}", e.name);
        }
        let guide = net.params().entries().iter().filter(|e| e.name.starts_with("guide.")).count();
        assert_eq!(guide * 2, net.params().len());
    }

    #[test]
    fn dkn_feature_shapes() {
        let net = Network::<f32>::new(ModelConfig::dkn(), 1).unwrap();
        let mut graph = Graph::new();
        let mut pass = Pass::new(&mut graph, Mode::Eval);
        let g = pass.graph.constant(rand_image(3, 51, 51, 1));
        let t = pass.graph.constant(rand_image(1, 51, 51, 2));
        let f = net.extract_features(&mut pass, Some(g), t).unwrap();
        assert_eq!(graph.value(f.depth).shape(), [1, 128, 1, 1]);
        assert_eq!(graph.value(f.guide.unwrap()).shape(), [1, 128, 1, 1]);
    }

    #[test]
    fn first_downconv_is_22() {
        let net = Network::<f32>::new(ModelConfig::dkn(), 1).unwrap();
        let mut graph = Graph::new();
        let mut pass = Pass::new(&mut graph, Mode::Eval);
        let x = pass.graph.constant(rand_image(1, 51, 51, 2));
        let mut head = net.depth.stream.clone();
        head.layers.truncate(5);
        let y = head.forward(net.params(), &mut pass, x).unwrap();
        assert_eq!(graph.value(y).shape(), [1, 32, 22, 22]);
    }

    #[test]
    fn wrong_patch_size_names_layer() {
        let net = Network::<f32>::new(ModelConfig::dkn(), 1).unwrap();
        let err = net.forward_patch(Some(&rand_image(3, 51, 51, 1)), &rand_image(1, 40, 40, 2));
        assert!(matches!(err, Err(Error::Dimension { .. })));
        let mut graph = Graph::new();
        let mut pass = Pass::new(&mut graph, Mode::Eval);
        let t = pass.graph.constant(rand_image(1, 20, 20, 2));
        let msg = net.extract_features(&mut pass, None, t).unwrap_err().to_string();
        assert!(msg.contains("guidance"), "{msg}");
        let g = pass.graph.constant(rand_image(3, 20, 20, 1));
        let msg = net.extract_features(&mut pass, Some(g), t).unwrap_err().to_string();
        assert!(msg.contains("guide.") && msg.contains("conv"), "{msg}");
    }

    #[test]
    fn kernel_constraints_hold() {
        for residual in [true, false] {
            let cfg = ModelConfig { residual, ..ModelConfig::dkn() };
            let net = Network::<f32>::new(cfg, 3).unwrap();
            let (k, o) = net.eval_fields(Some(&rand_image(3, 59, 59, 4)), &rand_image(1, 59, 59, 5)).unwrap();
            assert_eq!(k.0.shape(), [1, 9, 3, 3]);
            assert_eq!(o.0.shape(), [1, 18, 3, 3]);
            if residual {
                k.check_residual(1e-5).unwrap();
            } else {
                k.check_normalized(1e-5).unwrap();
            }
            assert!(o.0.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn unguided_ignores_guidance() {
        let cfg = ModelConfig { guided: false, ..ModelConfig::dkn() };
        let net = Network::<f32>::new(cfg, 3).unwrap();
        let t = rand_image(1, 51, 51, 5);
        let a = net.forward_patch(Some(&rand_image(3, 51, 51, 1)), &t).unwrap();
        let b = net.forward_patch(Some(&rand_image(3, 51, 51, 2)), &t).unwrap();
        let c = net.forward_patch(None, &t).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(a.to_bits(), c.to_bits());
    }

    #[test]
    fn guided_depends_on_guidance() {
        let net = Network::<f32>::new(ModelConfig::fdkn(), 3).unwrap();
        let t = rand_image(1, 16, 16, 5);
        let (a, _) = net.forward_full_fdkn(Some(&rand_image(3, 16, 16, 1)), &t).unwrap();
        let (b, _) = net.forward_full_fdkn(Some(&rand_image(3, 16, 16, 2)), &t).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn zero_weight_heads_give_identity() {
        let mut net = Network::<f32>::new(ModelConfig::dkn(), 3).unwrap();
        net.zero_weight_heads();
        let t = rand_image(1, 51, 51, 5);
        let v = net.forward_patch(Some(&rand_image(3, 51, 51, 1)), &t).unwrap();
        assert_eq!(v, t.at(0, 0, 25, 25));
    }

    #[test]
    fn fdkn_fields_are_full_resolution() {
        let net = Network::<f32>::new(ModelConfig::fdkn(), 3).unwrap();
        let (k, o) = net.forward_full_fdkn(Some(&rand_image(3, 12, 20, 1)), &rand_image(1, 12, 20, 2)).unwrap();
        assert_eq!(k.0.shape(), [1, 9, 12, 20]);
        assert_eq!(o.0.shape(), [1, 18, 12, 20]);
        k.check_residual(1e-5).unwrap();
        let err = net.forward_full_fdkn(Some(&rand_image(3, 13, 20, 1)), &rand_image(1, 13, 20, 2));
        assert!(matches!(err, Err(Error::PaddingRequired { .. })));
    }

    #[test]
    fn translated_patches_give_same_features() {
        let net = Network::<f32>::new(ModelConfig::dkn(), 3).unwrap();
        let g = rand_image(3, 70, 70, 1);
        let t = rand_image(1, 70, 70, 2);
        let at = |y: usize, x: usize| {
            let gp = g.crop(y, x, 51, 51).unwrap();
            let tp = t.crop(y, x, 51, 51).unwrap();
            let (k, o) = net.eval_fields(Some(&gp), &tp).unwrap();
            (k.0, o.0)
        };
        let big = net.eval_fields(Some(&g.crop(3, 7, 55, 55).unwrap()), &t.crop(3, 7, 55, 55).unwrap()).unwrap();
        let small = at(7, 11);
        let diff = big.0 .0.crop(1, 1, 1, 1).unwrap().max_abs_diff(&small.0).unwrap();
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn running_stats_move_towards_batch() {
        let mut net = Network::<f32>::new(ModelConfig::dkn(), 3).unwrap();
        let before = net.params().by_name("depth.bn1.running_mean").unwrap().clone();
        let mut graph = Graph::new();
        let mut pass = Pass::new(&mut graph, Mode::Train);
        let g = pass.graph.constant(rand_image(3, 51, 51, 1).map(|v| v + 3.0));
        let t = pass.graph.constant(rand_image(1, 51, 51, 2).map(|v| v + 3.0));
        net.predict(&mut pass, Some(g), t).unwrap();
        net.absorb_batch_stats(&pass);
        let after = net.params().by_name("depth.bn1.running_mean").unwrap();
        assert_ne!(&before, after);
    }
}

//! Finite-difference verification of the tape's gradients.
//!
//! Every check runs in f64 and compares the analytic gradient with the
//! central difference `(f(x + h) - f(x - h)) / 2h` on sampled coordinates.
//! Coordinates where the one-sided differences disagree sharply sit on a
//! kink (ReLU, bilinear cell boundary, clamp); they are skipped and counted.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BnMode, Graph, Var};
use crate::error::Result;
use crate::filtering::{GridSpec, Lattice};
use crate::model::{Mode, ModelConfig, Network, Pass, RECEPTIVE_FIELD};
use crate::tensor::{ConvSpec, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-3;

/// Gradients smaller than this are compared in absolute terms.
const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

impl std::fmt::Display for FdReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<5} {:<28} max rel err {:.2e}  ({} checked, {} at kinks)",
            if self.passed { "ok" } else { "FAIL" },
            self.name,
            self.max_rel_error,
            self.checked,
            self.skipped
        )
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

/// Compare `analytic` with central differences of `f` at the given flat
/// coordinates of `x`.
pub fn finite_difference_check(
    name: &str,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    coords: &[usize],
    step: f64,
    tolerance: f64,
) -> FdReport {
    let f0 = f(x);
    let mut probe = x.clone();
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - step;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        let (fwd, bwd) = ((fp - f0) / step, (f0 - fm) / step);
        if relative_error(fwd, bwd) > 0.05 && (fwd - bwd).abs() > 1e-4 {
            skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * step);
        let err = relative_error(analytic.data()[i], numeric);
        if err >= tolerance {
            // a kink inside the stencil shows up as disagreement with the half step
            let half = step / 2.0;
            probe.data_mut()[i] = orig + half;
            let hp = f(&probe);
            probe.data_mut()[i] = orig - half;
            let hm = f(&probe);
            probe.data_mut()[i] = orig;
            if relative_error(numeric, (hp - hm) / step) >= tolerance {
                skipped += 1;
                continue;
            }
        }
        worst = worst.max(err);
        checked += 1;
    }
    FdReport {
        name: name.into(),
        max_rel_error: worst,
        checked,
        skipped,
        passed: worst < tolerance && checked > 0 && skipped <= checked,
    }
}

fn pick(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    sample(rng, n, k.min(n)).into_vec()
}

fn uniform(shape: [usize; 4], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

/// Values bounded away from zero by `gap`.
fn away_from_zero(shape: [usize; 4], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let v = rng.gen_range(gap..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// Check `build` on each of its inputs. The output is projected onto fixed
/// random weights so that every element contributes a distinct amount.
fn check_op(name: &str, inputs: Vec<Tensor<f64>>, build: &Build, samples: usize, rng: &mut ChaCha8Rng) -> Vec<FdReport> {
    let eval = |ins: &[Tensor<f64>], proj: &Tensor<f64>| -> (f64, Vec<Tensor<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars).expect("gradcheck op");
        let p = g.constant(proj.clone());
        let prod = g.mul(out, p).expect("projection");
        let loss = g.sum(prod).expect("sum");
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss).expect("backward");
        let grads = vars.iter().map(|&v| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape())));
        (value, grads.collect())
    };
    let shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars).expect("gradcheck op");
        g.value(out).shape()
    };
    let proj = uniform(shape, 0.5, 1.5, rng);
    let (_, grads) = eval(&inputs, &proj);
    let mut reports = Vec::new();
    for (k, x) in inputs.iter().enumerate() {
        let coords = pick(x.numel(), samples, rng);
        let f = |probe: &Tensor<f64>| {
            let mut ins = inputs.clone();
            ins[k] = probe.clone();
            eval(&ins, &proj).0
        };
        let label = if inputs.len() > 1 { format!("{name}[{k}]") } else { name.to_string() };
        reports.push(finite_difference_check(&label, f, x, &grads[k], &coords, STEP, TOLERANCE));
    }
    reports
}

/// Positions with both coordinates at least 0.05 from an integer.
fn off_grid_positions(shape: [usize; 4], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| loop {
        let v: f64 = rng.gen_range(lo..hi);
        let frac = v - v.floor();
        if (0.05..=0.95).contains(&frac) {
            break v;
        }
    })
}

/// Operator-level checks.
pub fn op_suite(seed: u64) -> Vec<FdReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let spec = ConvSpec { stride: 1, padding: 1 };
    let conv: &Build = &move |g, v| g.conv2d(v[0], v[1], Some(v[2]), spec);
    let ins = vec![uniform([2, 3, 6, 5], -1.0, 1.0, r), uniform([4, 3, 3, 3], -1.0, 1.0, r), uniform([1, 4, 1, 1], -1.0, 1.0, r)];
    out.extend(check_op("conv2d", ins, conv, 30, r));
    let strided: &Build = &|g, v| g.conv2d(v[0], v[1], None, ConvSpec { stride: 2, padding: 0 });
    let ins = vec![uniform([1, 2, 7, 7], -1.0, 1.0, r), uniform([3, 2, 2, 2], -1.0, 1.0, r)];
    out.extend(check_op("conv2d stride 2", ins, strided, 30, r));

    let bn: &Build = &|g, v| g.batch_norm(v[0], v[1], v[2], &BnMode::Train, 1e-5);
    let ins = vec![uniform([1, 2, 4, 4], -1.0, 1.0, r), uniform([1, 2, 1, 1], 0.5, 1.5, r), uniform([1, 2, 1, 1], -0.5, 0.5, r)];
    out.extend(check_op("batch norm", ins, bn, 32, r));

    let sig: &Build = &|g, v| g.sigmoid(v[0]);
    out.extend(check_op("sigmoid", vec![uniform([1, 2, 3, 3], -3.0, 3.0, r)], sig, 18, r));
    let relu: &Build = &|g, v| g.relu(v[0]);
    out.extend(check_op("relu", vec![away_from_zero([1, 2, 3, 3], 10.0 * STEP, r)], relu, 18, r));
    let mul: &Build = &|g, v| g.mul(v[0], v[1]);
    let ins = vec![uniform([1, 2, 3, 3], -1.0, 1.0, r), uniform([1, 2, 3, 3], -1.0, 1.0, r)];
    out.extend(check_op("elementwise mul", ins, mul, 18, r));

    let bil: &Build = &|g, v| g.bilinear_sample(v[0], v[1]);
    let ins = vec![uniform([1, 2, 6, 7], 0.0, 1.0, r), off_grid_positions([1, 2, 4, 4], 0.2, 5.8, r)];
    out.extend(check_op("bilinear sampler", ins, bil, 32, r));

    let grid = GridSpec::new(3).unwrap();
    let deform: &Build = &move |g, v| g.deformable_average(v[0], v[1], v[2], grid, Lattice::DENSE, true);
    let offsets = off_grid_positions([1, 18, 5, 5], -1.9, 1.9, r);
    let ins = vec![uniform([1, 1, 5, 5], 0.0, 1.0, r), uniform([1, 9, 5, 5], -0.5, 0.5, r), offsets];
    out.extend(check_op("deformable average", ins, deform, 40, r));

    let center: &Build = &|g, v| g.channel_center(v[0]);
    out.extend(check_op("mean subtraction", vec![uniform([1, 9, 2, 2], 0.0, 1.0, r)], center, 20, r));
    let l1n: &Build = &|g, v| g.channel_l1_normalize(v[0]);
    out.extend(check_op("l1 normalisation", vec![uniform([1, 9, 2, 2], 0.1, 1.0, r)], l1n, 20, r));
    let restrict: &Build = &move |g, v| g.restrict_offsets(v[0], grid);
    out.extend(check_op("offset restriction", vec![uniform([1, 18, 2, 2], -3.0, 3.0, r)], restrict, 20, r));
    let shuffle: &Build = &|g, v| {
        let u = g.pixel_unshuffle(v[0], 2)?;
        g.pixel_shuffle(u, 2)
    };
    out.extend(check_op("pixel (un)shuffle", vec![uniform([1, 2, 4, 4], -1.0, 1.0, r)], shuffle, 12, r));

    let target = uniform([1, 1, 4, 4], -1.0, 1.0, r);
    let l1: &Build = &move |g, v| {
        let t = g.constant(target.clone());
        g.l1_loss(v[0], t)
    };
    let pred = away_from_zero([1, 1, 4, 4], 0.01, r).map(|v| v * 3.0);
    out.extend(check_op("l1 loss", vec![pred], l1, 16, r));
    out
}

/// Every trainable parameter of a guided DKN on one 51×51 patch with L1
/// loss, sampling `per_param` coordinates of each parameter tensor.
pub fn network_suite(seed: u64, per_param: usize) -> Result<Vec<FdReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::<f64>::new(ModelConfig::dkn(), seed)?;
    // move the offsets off the integer grid so bilinear sampling is smooth
    for name in ["depth.offset_head.weight", "depth.offset_head.bias"] {
        let id = net.params().id(name).expect("offset head");
        for v in net.params_mut().get_mut(id).data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
    }
    let n = RECEPTIVE_FIELD;
    let guide = uniform([1, 3, n, n], 0.0, 1.0, &mut rng);
    let target = uniform([1, 1, n, n], 0.0, 1.0, &mut rng);
    let gt = Tensor::scalar(target.at(0, 0, n / 2, n / 2) + 0.3);

    let loss_of = |net: &Network<f64>| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut graph = Graph::new();
        let mut pass = Pass::new(&mut graph, Mode::Train);
        let g = pass.graph.constant(guide.clone());
        let t = pass.graph.constant(target.clone());
        let pred = net.predict(&mut pass, Some(g), t)?;
        let gt = pass.graph.constant(gt.clone());
        let loss = pass.graph.l1_loss(pred, gt)?;
        let value = pass.graph.value(loss).data()[0];
        Ok((value, pass.graph.backward(loss)?.for_store(net.params())))
    };
    let (_, grads) = loss_of(&net)?;
    let mut reports = Vec::new();
    for id in net.params().ids().collect::<Vec<_>>() {
        let entry = &net.params().entries()[id.index()];
        if !entry.trainable {
            continue;
        }
        let name = entry.name.clone();
        let x = entry.tensor.clone();
        let coords = pick(x.numel(), per_param, &mut rng);
        let mut probe_net = net.clone();
        let f = |p: &Tensor<f64>| {
            *probe_net.params_mut().get_mut(id) = p.clone();
            loss_of(&probe_net).expect("forward").0
        };
        reports.push(finite_difference_check(&name, f, &x, &grads[id.index()], &coords, STEP, TOLERANCE));
    }
    Ok(reports)
}

/// Operator and network checks with their wall-clock time.
pub fn full_suite(seed: u64) -> Result<(Vec<FdReport>, f64)> {
    let start = Instant::now();
    let mut reports = op_suite(seed);
    reports.extend(network_suite(seed, 3)?);
    Ok((reports, start.elapsed().as_secs_f64()))
}

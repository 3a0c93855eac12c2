//! Batch normalisation with per-sample statistics in training mode.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a, T> {
    /// Normalise each (sample, channel) plane by its own spatial statistics.
    Train,
    /// Normalise with stored running statistics.
    Eval {
        running_mean: &'a [T],
        running_var: &'a [T],
    },
}

/// Values saved by the forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    /// One entry per (sample, channel) in training mode, per channel in eval mode.
    pub mean: Vec<T>,
    pub invstd: Vec<T>,
    pub training: bool,
    /// Per-channel statistics of this batch (sample-averaged mean and
    /// unbiased variance), used to update running estimates.
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

pub fn batch_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    scale: &[T],
    shift: &[T],
    mode: BatchNormMode<'_, T>,
    eps: T,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let [n, c, h, w] = x.shape();
    if scale.len() != c || shift.len() != c {
        return Err(Error::dim("batch_norm scale/shift", c, (scale.len(), shift.len())));
    }
    let m = h * w;
    if m == 0 {
        return Err(Error::Config("batch_norm on zero spatial extent".into()));
    }
    let mut out = x.clone();
    match mode {
        BatchNormMode::Train => {
            if m < 2 {
                return Err(Error::Config(format!(
                    "batch_norm training needs at least two spatial positions, got {h}x{w}"
                )));
            }
            let mf = T::from_usize(m).unwrap();
            let mut mean = Vec::with_capacity(n * c);
            let mut invstd = Vec::with_capacity(n * c);
            let mut batch_mean = vec![T::zero(); c];
            let mut batch_var = vec![T::zero(); c];
            for s in 0..n {
                for ch in 0..c {
                    let plane = x.plane(s, ch);
                    let mu = plane.iter().fold(T::zero(), |a, &v| a + v) / mf;
                    let ss = plane.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu));
                    let var = ss / mf;
                    let inv = (var + eps).sqrt().recip();
                    mean.push(mu);
                    invstd.push(inv);
                    batch_mean[ch] += mu;
                    batch_var[ch] += ss / (mf - T::one());
                }
            }
            let nf = T::from_usize(n).unwrap();
            batch_mean.iter_mut().for_each(|v| *v = *v / nf);
            batch_var.iter_mut().for_each(|v| *v = *v / nf);
            for (g, plane) in out.data_mut().chunks_mut(m).enumerate() {
                let ch = g % c;
                let (mu, inv) = (mean[g], invstd[g]);
                for v in plane {
                    *v = scale[ch] * (*v - mu) * inv + shift[ch];
                }
            }
            Ok((out, BatchNormCache { mean, invstd, training: true, batch_mean, batch_var }))
        }
        BatchNormMode::Eval { running_mean, running_var } => {
            if running_mean.len() != c || running_var.len() != c {
                return Err(Error::dim("batch_norm running stats", c, (running_mean.len(), running_var.len())));
            }
            let invstd: Vec<T> = running_var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
            for (g, plane) in out.data_mut().chunks_mut(m).enumerate() {
                let ch = g % c;
                let (mu, inv) = (running_mean[ch], invstd[ch]);
                for v in plane {
                    *v = scale[ch] * (*v - mu) * inv + shift[ch];
                }
            }
            Ok((
                out,
                BatchNormCache {
                    mean: running_mean.to_vec(),
                    invstd,
                    training: false,
                    batch_mean: Vec::new(),
                    batch_var: Vec::new(),
                },
            ))
        }
    }
}

/// Returns `(dx, dscale, dshift)`.
pub fn batch_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    scale: &[T],
    cache: &BatchNormCache<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    dy.expect_shape(x.shape(), "batch_norm_backward")?;
    let [_, c, h, w] = x.shape();
    let m = h * w;
    let mf = T::from_usize(m).unwrap();
    let mut dx = Tensor::zeros(x.shape());
    let mut dscale = vec![T::zero(); c];
    let mut dshift = vec![T::zero(); c];
    let groups = x.data().chunks(m).zip(dy.data().chunks(m)).zip(dx.data_mut().chunks_mut(m));
    for (g, ((xp, dyp), dxp)) in groups.enumerate() {
        let ch = g % c;
        let stat = if cache.training { g } else { ch };
        let (mu, inv) = (cache.mean[stat], cache.invstd[stat]);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for (&xv, &d) in xp.iter().zip(dyp) {
            let xhat = (xv - mu) * inv;
            sum_dy += d;
            sum_dy_xhat += d * xhat;
        }
        dscale[ch] += sum_dy_xhat;
        dshift[ch] += sum_dy;
        let gamma = scale[ch];
        if cache.training {
            for ((&xv, &d), o) in xp.iter().zip(dyp).zip(dxp.iter_mut()) {
                let xhat = (xv - mu) * inv;
                *o = gamma * inv / mf * (mf * d - sum_dy - xhat * sum_dy_xhat);
            }
        } else {
            for (&d, o) in dyp.iter().zip(dxp.iter_mut()) {
                *o = gamma * inv * d;
            }
        }
    }
    Ok((dx, dscale, dshift))
}

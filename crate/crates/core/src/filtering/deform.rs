//! Weighted average over deformably sampled neighbours.
//!
//! For an output pixel `p` with taps `q` on the k×k grid, learned weights `K`
//! and offsets `Δq`, the sampled neighbourhood value is `f(q + Δq)` (bilinear)
//! and the output is `Σ K·f(q + Δq)`, plus `f(p)` in the residual variant.

use super::bilinear::{sample, sample_with_grad, scatter};
use super::GridSpec;
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{Scalar, Tensor};

/// Maps field coordinates `(i, j)` to target pixels `(oy + s·i, ox + s·j)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lattice {
    pub origin_y: usize,
    pub origin_x: usize,
    pub stride: usize,
}

impl Lattice {
    pub const DENSE: Lattice = Lattice { origin_y: 0, origin_x: 0, stride: 1 };

    pub fn at(origin_y: usize, origin_x: usize) -> Self {
        Lattice { origin_y, origin_x, stride: 1 }
    }

    #[inline]
    fn pixel(&self, i: usize, j: usize) -> (usize, usize) {
        (self.origin_y + self.stride * i, self.origin_x + self.stride * j)
    }
}

/// Per-pixel tap weights, N×k²×H×W.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelField<T>(pub Tensor<T>);

/// Per-pixel `(Δx, Δy)` pairs per tap, N×2k²×H×W.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField<T>(pub Tensor<T>);

impl<T: Scalar> KernelField<T> {
    fn tap_sums(&self) -> Vec<T> {
        let [n, taps, h, w] = self.0.shape();
        let mut sums = vec![T::zero(); n * h * w];
        for s in 0..n {
            for t in 0..taps {
                for (acc, &v) in sums[s * h * w..(s + 1) * h * w].iter_mut().zip(self.0.plane(s, t)) {
                    *acc += v;
                }
            }
        }
        sums
    }

    /// Residual kernels: taps in (-1, 1) summing to zero.
    pub fn check_residual(&self, tol: f64) -> Result<()> {
        if let Some(v) = self.0.data().iter().find(|v| v.abs() >= T::one()) {
            return Err(Error::Contract(format!("residual kernel weight {v} outside (-1, 1)")));
        }
        if let Some(s) = self.tap_sums().into_iter().find(|s| s.to_f64_lossy().abs() >= tol) {
            return Err(Error::Contract(format!("residual kernel taps sum to {s}, expected 0")));
        }
        Ok(())
    }

    /// Normalised kernels: non-negative taps summing to one.
    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        if let Some(v) = self.0.data().iter().find(|v| **v < T::zero()) {
            return Err(Error::Contract(format!("normalised kernel weight {v} is negative")));
        }
        if let Some(s) = self.tap_sums().into_iter().find(|s| (s.to_f64_lossy() - 1.0).abs() >= tol) {
            return Err(Error::Contract(format!("normalised kernel taps sum to {s}, expected 1")));
        }
        Ok(())
    }
}

fn validate<T: Scalar>(
    target: &Tensor<T>,
    kernels: &Tensor<T>,
    offsets: &Tensor<T>,
    grid: GridSpec,
    lattice: Lattice,
) -> Result<()> {
    let [n, _, h, w] = kernels.shape();
    kernels.expect_shape([target.n(), grid.taps(), h, w], "kernel field")?;
    offsets.expect_shape([n, 2 * grid.taps(), h, w], "offset field")?;
    if lattice.stride == 0 {
        return Err(Error::Config("lattice stride must be positive".into()));
    }
    if h > 0 && w > 0 {
        let (py, px) = lattice.pixel(h - 1, w - 1);
        if py >= target.h() || px >= target.w() {
            return Err(Error::dim(
                "deformable average lattice",
                format!("pixels within {}x{}", target.h(), target.w()),
                format!("last pixel ({py}, {px})"),
            ));
        }
    }
    Ok(())
}

#[inline]
fn position<T: Scalar>(grid: GridSpec, t: usize, py: usize, px: usize, dx: T, dy: T) -> (T, T) {
    let (by, bx) = grid.base(t);
    (
        T::from_i64(py as i64 + by as i64).unwrap() + dy,
        T::from_i64(px as i64 + bx as i64).unwrap() + dx,
    )
}

/// Forward pass; output is N×C×h×w for kernels of spatial size h×w.
pub fn deformable_average_forward<T: Scalar>(
    target: &Tensor<T>,
    kernels: &Tensor<T>,
    offsets: &Tensor<T>,
    grid: GridSpec,
    lattice: Lattice,
    residual: bool,
) -> Result<Tensor<T>> {
    validate(target, kernels, offsets, grid, lattice)?;
    let [n, c, th, tw] = target.shape();
    let (h, w) = (kernels.h(), kernels.w());
    let taps = grid.taps();
    // rows of (sample, i), each holding C×w values
    let rows = parallel::map_range(n * h, |r| {
        let (s, i) = (r / h, r % h);
        let mut vals = vec![T::zero(); c * w];
        for j in 0..w {
            let (py, px) = lattice.pixel(i, j);
            for ch in 0..c {
                let plane = target.plane(s, ch);
                let mut acc = if residual { plane[py * tw + px] } else { T::zero() };
                for t in 0..taps {
                    let k = kernels.at(s, t, i, j);
                    let (y, x) = position(grid, t, py, px, offsets.at(s, 2 * t, i, j), offsets.at(s, 2 * t + 1, i, j));
                    acc += k * sample(plane, th, tw, y, x);
                }
                vals[ch * w + j] = acc;
            }
        }
        vals
    });
    let mut out = Tensor::zeros([n, c, h, w]);
    for (r, vals) in rows.into_iter().enumerate() {
        let (s, i) = (r / h, r % h);
        for ch in 0..c {
            let idx = out.index(s, ch, i, 0);
            out.data_mut()[idx..idx + w].copy_from_slice(&vals[ch * w..(ch + 1) * w]);
        }
    }
    Ok(out)
}

pub struct DeformGrads<T> {
    pub target: Option<Tensor<T>>,
    pub kernels: Tensor<T>,
    pub offsets: Tensor<T>,
}

pub fn deformable_average_backward<T: Scalar>(
    target: &Tensor<T>,
    kernels: &Tensor<T>,
    offsets: &Tensor<T>,
    grid: GridSpec,
    lattice: Lattice,
    residual: bool,
    grad_out: &Tensor<T>,
    need_target: bool,
) -> Result<DeformGrads<T>> {
    validate(target, kernels, offsets, grid, lattice)?;
    let [n, c, th, tw] = target.shape();
    let (h, w) = (kernels.h(), kernels.w());
    grad_out.expect_shape([n, c, h, w], "deformable average grad")?;
    let taps = grid.taps();

    // per (sample, row): dK for taps×w and dΔ for 2·taps×w
    let rows = parallel::map_range(n * h, |r| {
        let (s, i) = (r / h, r % h);
        let mut dk = vec![T::zero(); taps * w];
        let mut doff = vec![T::zero(); 2 * taps * w];
        for j in 0..w {
            let (py, px) = lattice.pixel(i, j);
            for t in 0..taps {
                let k = kernels.at(s, t, i, j);
                let (y, x) = position(grid, t, py, px, offsets.at(s, 2 * t, i, j), offsets.at(s, 2 * t + 1, i, j));
                for ch in 0..c {
                    let g = grad_out.at(s, ch, i, j);
                    let (v, gy, gx) = sample_with_grad(target.plane(s, ch), th, tw, y, x);
                    dk[t * w + j] += g * v;
                    doff[2 * t * w + j] += g * k * gx;
                    doff[(2 * t + 1) * w + j] += g * k * gy;
                }
            }
        }
        (dk, doff)
    });
    let mut dkern = Tensor::zeros(kernels.shape());
    let mut doffs = Tensor::zeros(offsets.shape());
    for (r, (dk, doff)) in rows.into_iter().enumerate() {
        let (s, i) = (r / h, r % h);
        for t in 0..taps {
            let idx = dkern.index(s, t, i, 0);
            dkern.data_mut()[idx..idx + w].copy_from_slice(&dk[t * w..(t + 1) * w]);
        }
        for ch in 0..2 * taps {
            let idx = doffs.index(s, ch, i, 0);
            doffs.data_mut()[idx..idx + w].copy_from_slice(&doff[ch * w..(ch + 1) * w]);
        }
    }

    let dtarget = need_target.then(|| {
        let mut dt = Tensor::zeros(target.shape());
        for s in 0..n {
            for ch in 0..c {
                let base = dt.index(s, ch, 0, 0);
                let plane = &mut dt.data_mut()[base..base + th * tw];
                for i in 0..h {
                    for j in 0..w {
                        let g = grad_out.at(s, ch, i, j);
                        let (py, px) = lattice.pixel(i, j);
                        if residual {
                            plane[py * tw + px] += g;
                        }
                        for t in 0..taps {
                            let k = kernels.at(s, t, i, j);
                            let (y, x) =
                                position(grid, t, py, px, offsets.at(s, 2 * t, i, j), offsets.at(s, 2 * t + 1, i, j));
                            scatter(plane, th, tw, y, x, g * k);
                        }
                    }
                }
            }
        }
        dt
    });
    Ok(DeformGrads { target: dtarget, kernels: dkern, offsets: doffs })
}

/// Dense weighted average over full-resolution fields. In debug builds the
/// kernel field is checked against the invariant of its variant.
pub fn deformable_weighted_average<T: Scalar>(
    target: &Tensor<T>,
    kernels: &KernelField<T>,
    offsets: &OffsetField<T>,
    grid: GridSpec,
    residual: bool,
) -> Result<Tensor<T>> {
    if cfg!(debug_assertions) {
        let tol = if std::mem::size_of::<T>() == 4 { 1e-4 } else { 1e-9 };
        if residual {
            kernels.check_residual(tol)?;
        } else {
            kernels.check_normalized(tol)?;
        }
    }
    if (kernels.0.h(), kernels.0.w()) != (target.h(), target.w()) {
        return Err(Error::dim(
            "dense kernel field",
            (target.h(), target.w()),
            (kernels.0.h(), kernels.0.w()),
        ));
    }
    deformable_average_forward(target, &kernels.0, &offsets.0, grid, Lattice::DENSE, residual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid() -> GridSpec {
        GridSpec::new(3).unwrap()
    }

    #[test]
    fn residual_with_zero_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::<f32>::random_uniform([1, 1, 6, 7], 0.0, 1.0, &mut rng);
        let k = KernelField(Tensor::zeros([1, 9, 6, 7]));
        let o = OffsetField(Tensor::random_uniform([1, 18, 6, 7], -2.0, 2.0, &mut rng));
        let out = deformable_weighted_average(&f, &k, &o, grid(), true).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn identity_kernel_without_offsets_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Tensor::<f32>::random_uniform([1, 1, 5, 5], 0.0, 1.0, &mut rng);
        let k = KernelField(Tensor::from_fn([1, 9, 5, 5], |_, t, _, _| if t == 4 { 1.0 } else { 0.0 }));
        let o = OffsetField(Tensor::zeros([1, 18, 5, 5]));
        let out = deformable_weighted_average(&f, &k, &o, grid(), false).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn box_filter_preserves_linear_ramp_interior() {
        let f = Tensor::<f64>::from_fn([1, 1, 8, 8], |_, _, y, x| 0.5 * x as f64 + 0.25 * y as f64);
        let k = KernelField(Tensor::full([1, 9, 8, 8], 1.0 / 9.0));
        let o = OffsetField(Tensor::zeros([1, 18, 8, 8]));
        let out = deformable_weighted_average(&f, &k, &o, grid(), false).unwrap();
        for y in 1..7 {
            for x in 1..7 {
                // brute-force 9-tap sum
                let mut brute = 0.0;
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        brute += f.at(0, 0, (y as i32 + dy) as usize, (x as i32 + dx) as usize) / 9.0;
                    }
                }
                assert!((out.at(0, 0, y, x) - brute).abs() < 1e-12);
                assert!((out.at(0, 0, y, x) - f.at(0, 0, y, x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalised_kernels_preserve_constants_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Tensor::<f64>::full([1, 1, 9, 9], 0.37);
        let raw = Tensor::<f64>::random_uniform([1, 9, 9, 9], 0.01, 1.0, &mut rng);
        let mut k = raw.clone();
        for y in 0..9 {
            for x in 0..9 {
                let s: f64 = (0..9).map(|t| raw.at(0, t, y, x)).sum();
                for t in 0..9 {
                    k.set(0, t, y, x, raw.at(0, t, y, x) / s);
                }
            }
        }
        let o = OffsetField(Tensor::random_uniform([1, 18, 9, 9], -9.0, 9.0, &mut rng));
        let out = deformable_weighted_average(&f, &KernelField(k), &o, grid(), false).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn linear_in_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Tensor::<f64>::random_uniform([1, 1, 6, 6], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::random_uniform([1, 1, 6, 6], -1.0, 1.0, &mut rng);
        let k = Tensor::random_uniform([1, 9, 6, 6], -1.0, 1.0, &mut rng);
        let o = Tensor::random_uniform([1, 18, 6, 6], -3.0, 3.0, &mut rng);
        let run = |t: &Tensor<f64>| deformable_average_forward(t, &k, &o, grid(), Lattice::DENSE, true).unwrap();
        let sum = a.zip_map(&b, |x, y| 2.0 * x - 3.0 * y).unwrap();
        let lhs = run(&sum);
        let rhs = run(&a).zip_map(&run(&b), |x, y| 2.0 * x - 3.0 * y).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn strided_lattice_matches_dense_subset() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = Tensor::<f64>::random_uniform([1, 1, 12, 12], 0.0, 1.0, &mut rng);
        let k = Tensor::random_uniform([1, 9, 12, 12], -1.0, 1.0, &mut rng);
        let o = Tensor::random_uniform([1, 18, 12, 12], -3.0, 3.0, &mut rng);
        let dense = deformable_average_forward(&f, &k, &o, grid(), Lattice::DENSE, true).unwrap();
        let lat = Lattice { origin_y: 1, origin_x: 2, stride: 4 };
        let pick = |t: &Tensor<f64>| Tensor::from_fn([1, t.c(), 3, 3], |_, c, i, j| t.at(0, c, 1 + 4 * i, 2 + 4 * j));
        let sparse = deformable_average_forward(&f, &pick(&k), &pick(&o), grid(), lat, true).unwrap();
        assert_eq!(sparse, pick(&dense));
    }

    #[test]
    fn contract_violation_in_debug() {
        if !cfg!(debug_assertions) {
            return;
        }
        let f = Tensor::<f32>::zeros([1, 1, 3, 3]);
        let k = KernelField(Tensor::full([1, 9, 3, 3], 0.5));
        let o = OffsetField(Tensor::zeros([1, 18, 3, 3]));
        assert!(matches!(deformable_weighted_average(&f, &k, &o, grid(), true), Err(Error::Contract(_))));
        assert!(matches!(deformable_weighted_average(&f, &k, &o, grid(), false), Err(Error::Contract(_))));
    }
}

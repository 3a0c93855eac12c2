//! Separable bilinear sampling, `g(a, b) = max(0, 1 - |a - b|)` per axis.
//!
//! Positions are clamped to the image rectangle before weighting; the
//! gradient with respect to a clamped coordinate is zero. At integer
//! coordinates the floor cell is used, so the reported derivative is the
//! one-sided difference towards the next pixel.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[inline]
fn cell<T: Scalar>(pos: T, len: usize) -> (usize, usize, T, bool) {
    let max = T::from_usize(len - 1).unwrap();
    let clamped = pos < T::zero() || pos > max;
    let p = pos.max(T::zero()).min(max);
    let i0 = p.floor().to_usize().unwrap_or(0).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, p - T::from_usize(i0).unwrap(), clamped)
}

/// Sample `plane` (h×w, row-major) at fractional `(y, x)`.
#[inline]
pub fn sample<T: Scalar>(plane: &[T], h: usize, w: usize, y: T, x: T) -> T {
    let (y0, y1, wy, _) = cell(y, h);
    let (x0, x1, wx, _) = cell(x, w);
    let one = T::one();
    let top = plane[y0 * w + x0] * (one - wx) + plane[y0 * w + x1] * wx;
    let bot = plane[y1 * w + x0] * (one - wx) + plane[y1 * w + x1] * wx;
    top * (one - wy) + bot * wy
}

/// Sampled value and its partial derivatives `(v, dv/dy, dv/dx)`.
#[inline]
pub fn sample_with_grad<T: Scalar>(plane: &[T], h: usize, w: usize, y: T, x: T) -> (T, T, T) {
    let (y0, y1, wy, cy) = cell(y, h);
    let (x0, x1, wx, cx) = cell(x, w);
    let one = T::one();
    let (a, b, c, d) = (plane[y0 * w + x0], plane[y0 * w + x1], plane[y1 * w + x0], plane[y1 * w + x1]);
    let top = a * (one - wx) + b * wx;
    let bot = c * (one - wx) + d * wx;
    let v = top * (one - wy) + bot * wy;
    let dy = if cy || y1 == y0 { T::zero() } else { bot - top };
    let dx = if cx || x1 == x0 {
        T::zero()
    } else {
        (b - a) * (one - wy) + (d - c) * wy
    };
    (v, dy, dx)
}

/// Accumulate `g` into `grad` (h×w) with the bilinear weights of `(y, x)`.
#[inline]
pub fn scatter<T: Scalar>(grad: &mut [T], h: usize, w: usize, y: T, x: T, g: T) {
    let (y0, y1, wy, _) = cell(y, h);
    let (x0, x1, wx, _) = cell(x, w);
    let one = T::one();
    grad[y0 * w + x0] += g * (one - wy) * (one - wx);
    grad[y0 * w + x1] += g * (one - wy) * wx;
    grad[y1 * w + x0] += g * wy * (one - wx);
    grad[y1 * w + x1] += g * wy * wx;
}

fn check_positions<T: Scalar>(image: &Tensor<T>, positions: &Tensor<T>) -> Result<()> {
    if positions.n() != image.n() || positions.c() != 2 {
        return Err(Error::dim(
            "bilinear_sample positions",
            [image.n(), 2],
            [positions.n(), positions.c()],
        ));
    }
    if image.h() == 0 || image.w() == 0 {
        return Err(Error::Config("bilinear_sample on empty image".into()));
    }
    Ok(())
}

/// Sample every channel of `image` (N×C×H×W) at `positions` (N×2×h×w,
/// channel 0 = x, channel 1 = y), giving N×C×h×w.
pub fn bilinear_sample<T: Scalar>(image: &Tensor<T>, positions: &Tensor<T>) -> Result<Tensor<T>> {
    check_positions(image, positions)?;
    let [n, c, h, w] = image.shape();
    let (oh, ow) = (positions.h(), positions.w());
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for s in 0..n {
        let (px, py) = (positions.plane(s, 0), positions.plane(s, 1));
        for ch in 0..c {
            let plane = image.plane(s, ch);
            for i in 0..oh * ow {
                let v = sample(plane, h, w, py[i], px[i]);
                let idx = out.index(s, ch, 0, 0) + i;
                out.data_mut()[idx] = v;
            }
        }
    }
    Ok(out)
}

/// Returns `(d image, d positions)`.
pub fn bilinear_sample_backward<T: Scalar>(
    image: &Tensor<T>,
    positions: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_positions(image, positions)?;
    let [n, c, h, w] = image.shape();
    let (oh, ow) = (positions.h(), positions.w());
    grad_out.expect_shape([n, c, oh, ow], "bilinear_sample_backward")?;
    let mut dimg = Tensor::zeros(image.shape());
    let mut dpos = Tensor::zeros(positions.shape());
    for s in 0..n {
        for ch in 0..c {
            let plane = image.plane(s, ch);
            let g = grad_out.plane(s, ch);
            let base = dimg.index(s, ch, 0, 0);
            let pbase = dpos.index(s, 0, 0, 0);
            for i in 0..oh * ow {
                let (x, y) = (positions.plane(s, 0)[i], positions.plane(s, 1)[i]);
                let (_, gy, gx) = sample_with_grad(plane, h, w, y, x);
                dpos.data_mut()[pbase + i] += g[i] * gx;
                dpos.data_mut()[pbase + oh * ow + i] += g[i] * gy;
                scatter(&mut dimg.data_mut()[base..base + h * w], h, w, y, x, g[i]);
            }
        }
    }
    Ok((dimg, dpos))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img() -> Vec<f64> {
        vec![1.0, 2.0, 3.0, 4.0]
    }

    #[test]
    fn integer_positions_return_pixels() {
        let plane: Vec<f64> = (0..48).map(|v| v as f64 * 1.5).collect(); // 6 rows, 8 cols
        assert_eq!(sample(&plane, 6, 8, 5.0, 3.0), plane[5 * 8 + 3]);
        assert_eq!(sample(&plane, 6, 8, 0.0, 7.0), plane[7]);
    }

    #[test]
    fn centre_of_square_is_mean() {
        assert_eq!(sample(&img(), 2, 2, 0.5, 0.5), 2.5);
    }

    #[test]
    fn four_term_expansion() {
        // x = 0.25, y = 0.75 expanded by hand over the 4-neighbourhood:
        // 1*(0.75*0.25) + 2*(0.25*0.25) + 3*(0.75*0.75) + 4*(0.25*0.75)
        let g = |a: f64, b: f64| (1.0 - (a - b).abs()).max(0.0);
        let (x, y) = (0.25, 0.75);
        let brute: f64 = [(0.0, 0.0, 1.0), (0.0, 1.0, 2.0), (1.0, 0.0, 3.0), (1.0, 1.0, 4.0)]
            .iter()
            .map(|&(ty, tx, f)| g(x, tx) * g(y, ty) * f)
            .sum();
        assert_eq!(brute, 2.75);
        let (xs, ys) = (0.25f64, 0.75f64);
        assert!((sample(&img(), 2, 2, ys, xs) - brute).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_positions_clamp_to_border() {
        assert_eq!(sample(&img(), 2, 2, -3.0, 0.5), 1.5);
        assert_eq!(sample(&img(), 2, 2, 9.0, 9.0), 4.0);
        let (_, gy, gx) = sample_with_grad(&img(), 2, 2, -3.0, 0.5);
        assert_eq!(gy, 0.0);
        assert_eq!(gx, 1.0);
    }

    #[test]
    fn affine_images_are_reproduced() {
        let (h, w) = (7, 9);
        let f = |y: f64, x: f64| 0.3 * x - 1.7 * y + 2.0;
        let plane: Vec<f64> = (0..h * w).map(|i| f((i / w) as f64, (i % w) as f64)).collect();
        for &(y, x) in &[(0.1, 0.2), (3.7, 5.25), (5.999, 7.5), (2.0, 8.0)] {
            assert!((sample(&plane, h, w, y, x) - f(y, x)).abs() < 1e-5);
        }
    }

    #[test]
    fn tensor_api_matches_scalar_sampler() {
        let image = Tensor::<f64>::from_vec([1, 1, 2, 2], img()).unwrap();
        let pos = Tensor::from_vec([1, 2, 1, 2], vec![0.25, 0.5, 0.75, 0.5]).unwrap();
        let out = bilinear_sample(&image, &pos).unwrap();
        assert_eq!(out.data(), &[2.75, 2.5]);
    }
}

//! Separable cubic-convolution resampling with edge clamping.

use crate::parallel;
use crate::tensor::{Scalar, Tensor};

/// Cubic kernel parameter (Catmull-Rom).
pub const BICUBIC_A: f64 = -0.5;

pub fn cubic_weight(x: f64) -> f64 {
    let a = BICUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Four source indices and normalised weights for every output position.
fn taps(input: usize, output: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let mut idx = [0usize; 4];
            let mut wts = [0.0f64; 4];
            for k in 0..4 {
                let pos = base + k as f64 - 1.0;
                idx[k] = pos.max(0.0).min((input - 1) as f64) as usize;
                wts[k] = cubic_weight(src - pos);
            }
            let sum: f64 = wts.iter().sum();
            wts.iter_mut().for_each(|w| *w /= sum);
            (idx, wts)
        })
        .collect()
}

/// Resize every plane of `image` to `out_h × out_w`. Not differentiable.
pub fn bicubic_resize<T: Scalar>(image: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let [n, c, h, w] = image.shape();
    assert!(out_h > 0 && out_w > 0 && h > 0 && w > 0, "bicubic_resize needs non-empty images");
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let planes = parallel::map_range(n * c, |p| {
        let src = image.plane(p / c, p % c);
        // horizontal pass: h × out_w
        let mut mid = vec![0.0f64; h * out_w];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for (x, (idx, wts)) in tx.iter().enumerate() {
                mid[y * out_w + x] = (0..4).map(|k| wts[k] * row[idx[k]].to_f64_lossy()).sum();
            }
        }
        let mut out = Vec::with_capacity(out_h * out_w);
        for (idx, wts) in &ty {
            for x in 0..out_w {
                let v: f64 = (0..4).map(|k| wts[k] * mid[idx[k] * out_w + x]).sum();
                out.push(T::from_f64_lossy(v));
            }
        }
        out
    });
    Tensor::from_vec([n, c, out_h, out_w], planes.concat()).expect("plane sizes are consistent")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_shape() {
        assert_eq!(cubic_weight(0.0), 1.0);
        assert_eq!(cubic_weight(1.0), 0.0);
        assert_eq!(cubic_weight(2.0), 0.0);
        for t in [0.1, 0.25, 0.5, 0.9] {
            let s: f64 = (-1..=2).map(|k| cubic_weight(t - k as f64)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn same_size_is_identity() {
        let t = Tensor::<f32>::from_fn([1, 2, 5, 6], |_, c, y, x| (c + y * x) as f32);
        assert_eq!(bicubic_resize(&t, 5, 6), t);
    }

    #[test]
    fn constants_are_preserved() {
        let t = Tensor::<f32>::full([1, 1, 12, 9], 0.625);
        for (oh, ow) in [(3, 3), (48, 36), (7, 20)] {
            let r = bicubic_resize(&t, oh, ow);
            assert!(r.data().iter().all(|&v| (v - 0.625).abs() < 1e-6));
        }
    }

    #[test]
    fn linear_ramp_downsampled_matches_analytic() {
        let ramp = |y: f64, x: f64| 0.1 * x + 0.05 * y;
        let t = Tensor::<f64>::from_fn([1, 1, 8, 8], |_, _, y, x| ramp(y as f64, x as f64));
        let r = bicubic_resize(&t, 4, 4);
        for y in 1..3 {
            for x in 1..3 {
                // output pixel centre maps to source coordinate 2·o + 0.5
                let want = ramp(2.0 * y as f64 + 0.5, 2.0 * x as f64 + 0.5);
                assert!((r.at(0, 0, y, x) - want).abs() < 1e-4);
            }
        }
    }
}

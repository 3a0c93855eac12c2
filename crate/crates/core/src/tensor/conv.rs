//! 2-D cross-correlation via im2col and a blocked GEMM.

use super::{MatMut, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::parallel;

/// Output channels handled per parallel work item.
const ROW_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec { stride: 1, padding: 0 }
    }
}

/// Output extent along one axis, or a configuration error when the window
/// does not tile the padded input exactly.
pub fn conv_output_size(input: usize, kernel: usize, spec: ConvSpec) -> Result<usize> {
    if spec.stride == 0 {
        return Err(Error::Config("convolution stride must be positive".into()));
    }
    let padded = input + 2 * spec.padding;
    if padded < kernel {
        return Err(Error::Config(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / spec.stride + 1)
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn new<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, spec: ConvSpec) -> Result<Self> {
        let [_, c, h, w] = input.shape();
        let [_, wc, kh, kw] = weight.shape();
        if c != wc {
            return Err(Error::dim("conv2d input channels", wc, c));
        }
        let ho = conv_output_size(h, kh, spec)?;
        let wo = conv_output_size(w, kw, spec)?;
        Ok(Geometry { c, h, w, kh, kw, ho, wo, spec })
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col<T: Scalar>(&self, plane: &[T]) -> Vec<T> {
        let (ho, wo) = (self.ho, self.wo);
        let mut cols = vec![T::zero(); self.rows() * self.cols()];
        let pad = self.spec.padding as isize;
        let s = self.spec.stride;
        for c in 0..self.c {
            let src = &plane[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[r * ho * wo..(r + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - pad;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let row = &src[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let out = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - pad;
                            if ix >= 0 && ix < self.w as isize {
                                *o = row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T], plane: &mut [T]) {
        let (ho, wo) = (self.ho, self.wo);
        let pad = self.spec.padding as isize;
        let s = self.spec.stride;
        for c in 0..self.c {
            let dst = &mut plane[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[r * ho * wo..(r + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - pad;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let row = &mut dst[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - pad;
                            if ix >= 0 && ix < self.w as isize {
                                row[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlate `input` (N×C×H×W) with `weight` (O×C×kh×kw), adding `bias`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&[T]>, spec: ConvSpec) -> Result<Tensor<T>> {
    let g = Geometry::new(input, weight, spec)?;
    let o = weight.n();
    if let Some(b) = bias {
        if b.len() != o {
            return Err(Error::dim("conv2d bias", o, b.len()));
        }
    }
    let n = input.n();
    let (k, hw) = (g.rows(), g.cols());
    let per_sample = parallel::map_range(n, |s| {
        let cols = g.im2col(input.sample_data(s));
        let mut out = vec![T::zero(); o * hw];
        parallel::for_each_chunk_mut(&mut out, ROW_CHUNK * hw, |ci, chunk| {
            let rows = chunk.len() / hw;
            let r0 = ci * ROW_CHUNK;
            if let Some(b) = bias {
                for (r, row) in chunk.chunks_mut(hw).enumerate() {
                    row.fill(b[r0 + r]);
                }
            }
            let w = &weight.data()[r0 * k..(r0 + rows) * k];
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            T::gemm(rows, k, hw, T::one(), MatRef::row_major(w, k), MatRef::row_major(&cols, hw), beta, MatMut::row_major(chunk, hw));
        });
        out
    });
    Tensor::from_vec([n, o, g.ho, g.wo], per_sample.concat())
}

/// Gradients of a convolution; `input` is `None` when not requested.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: ConvSpec,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = Geometry::new(input, weight, spec)?;
    let o = weight.n();
    let n = input.n();
    grad_out.expect_shape([n, o, g.ho, g.wo], "conv2d_backward grad")?;
    let (k, hw) = (g.rows(), g.cols());

    let mut bias = vec![T::zero(); o];
    for s in 0..n {
        for (oc, b) in bias.iter_mut().enumerate() {
            *b += grad_out.plane(s, oc).iter().fold(T::zero(), |a, &v| a + v);
        }
    }

    let per_sample = parallel::map_range(n, |s| {
        let cols = g.im2col(input.sample_data(s));
        let dy = &grad_out.data()[s * o * hw..(s + 1) * o * hw];
        let mut dw = vec![T::zero(); o * k];
        parallel::for_each_chunk_mut(&mut dw, ROW_CHUNK * k, |ci, chunk| {
            let rows = chunk.len() / k;
            let r0 = ci * ROW_CHUNK;
            T::gemm(
                rows,
                hw,
                k,
                T::one(),
                MatRef::row_major(&dy[r0 * hw..(r0 + rows) * hw], hw),
                MatRef::transposed(&cols, hw),
                T::zero(),
                MatMut::row_major(chunk, k),
            );
        });
        let dx = need_input.then(|| {
            let mut dcols = vec![T::zero(); k * hw];
            parallel::for_each_chunk_mut(&mut dcols, ROW_CHUNK * hw, |ci, chunk| {
                let rows = chunk.len() / hw;
                let r0 = ci * ROW_CHUNK;
                // rows r0.. of W^T are columns r0.. of W
                T::gemm(
                    rows,
                    o,
                    hw,
                    T::one(),
                    MatRef { data: &weight.data()[r0..], rs: 1, cs: k },
                    MatRef::row_major(dy, hw),
                    T::zero(),
                    MatMut::row_major(chunk, hw),
                );
            });
            let mut plane = vec![T::zero(); g.c * g.h * g.w];
            g.col2im(&dcols, &mut plane);
            plane
        });
        (dw, dx)
    });

    let mut dweight = vec![T::zero(); o * k];
    let mut dinput = need_input.then(|| Vec::with_capacity(input.numel()));
    for (dw, dx) in per_sample {
        for (a, b) in dweight.iter_mut().zip(dw) {
            *a += b;
        }
        if let (Some(acc), Some(dx)) = (dinput.as_mut(), dx) {
            acc.extend(dx);
        }
    }
    Ok(ConvGrads {
        input: dinput.map(|d| Tensor::from_vec(input.shape(), d)).transpose()?,
        weight: Tensor::from_vec(weight.shape(), dweight)?,
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Six nested loops straight from the definition.
    fn naive(input: &Tensor<f64>, weight: &Tensor<f64>, bias: &[f64], spec: ConvSpec) -> Tensor<f64> {
        let [n, c, h, w] = input.shape();
        let [o, _, kh, kw] = weight.shape();
        let ho = (h + 2 * spec.padding - kh) / spec.stride + 1;
        let wo = (w + 2 * spec.padding - kw) / spec.stride + 1;
        Tensor::from_fn([n, o, ho, wo], |b, oc, oy, ox| {
            let mut acc = bias[oc];
            for ic in 0..c {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += input.at(b, ic, iy as usize, ix as usize) * weight.at(oc, ic, ky, kx);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn hand_computed_window_sums() {
        let x = Tensor::<f32>::from_vec([1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let w = Tensor::<f32>::full([1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &w, Some(&[0.0]), ConvSpec::default()).unwrap();
        assert_eq!(y.data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::random_uniform([2, 3, 5, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::from_fn([3, 3, 1, 1], |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        let y = conv2d(&x, &w, Some(&[0.0; 3]), ConvSpec::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn table_shape_first_layer() {
        let x = Tensor::<f32>::zeros([1, 3, 51, 51]);
        let w = Tensor::<f32>::zeros([32, 3, 7, 7]);
        let y = conv2d(&x, &w, None, ConvSpec::default()).unwrap();
        assert_eq!(y.shape(), [1, 32, 45, 45]);
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let x = Tensor::<f32>::zeros([1, 2, 8, 8]);
        let w = Tensor::<f32>::zeros([4, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &w, None, ConvSpec::default()), Err(Error::Dimension { .. })));
        let w = Tensor::<f32>::zeros([4, 2, 9, 9]);
        assert!(matches!(conv2d(&x, &w, None, ConvSpec::default()), Err(Error::Config(_))));
    }

    #[test]
    fn agrees_with_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(stride, padding, k) in &[(1, 0, 3), (2, 0, 2), (1, 1, 3), (2, 1, 5), (1, 0, 7)] {
            let spec = ConvSpec { stride, padding };
            let x = Tensor::<f64>::random_uniform([2, 8, 16, 16], -1.0, 1.0, &mut rng);
            let w = Tensor::<f64>::random_uniform([40, 8, k, k], -1.0, 1.0, &mut rng);
            let b: Vec<f64> = (0..40).map(|i| i as f64 * 0.1).collect();
            let fast = conv2d(&x, &w, Some(&b), spec).unwrap();
            let slow = naive(&x, &w, &b, spec);
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() <= 1e-5 * e.abs().max(1.0), "{a} vs {e}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), g> is bilinear: check weight/input grads against the naive oracle
        // through the identity <dL/dx, dx> = d<conv(x), g>.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ConvSpec { stride: 2, padding: 1 };
        let x = Tensor::<f64>::random_uniform([2, 3, 9, 8], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::random_uniform([5, 3, 3, 3], -1.0, 1.0, &mut rng);
        let y = conv2d(&x, &w, None, spec).unwrap();
        let gy = Tensor::<f64>::random_uniform(y.shape(), -1.0, 1.0, &mut rng);
        let grads = conv2d_backward(&x, &w, &gy, spec, true).unwrap();
        let inner = |x: &Tensor<f64>, w: &Tensor<f64>| -> f64 {
            let y = naive(x, w, &[0.0; 5], spec);
            y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum()
        };
        let base = inner(&x, &w);
        for i in [0, 17, 100, x.numel() - 1] {
            let mut xp = x.clone();
            xp.data_mut()[i] += 1.0;
            let d = inner(&xp, &w) - base;
            assert!((d - grads.input.as_ref().unwrap().data()[i]).abs() < 1e-9);
        }
        for i in [0, 8, 30, w.numel() - 1] {
            let mut wp = w.clone();
            wp.data_mut()[i] += 1.0;
            let d = inner(&x, &wp) - base;
            assert!((d - grads.weight.data()[i]).abs() < 1e-9);
        }
        let total: f64 = gy.data().iter().sum();
        assert!((grads.bias.iter().sum::<f64>() - total).abs() < 1e-9);
    }
}

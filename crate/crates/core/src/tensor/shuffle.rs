//! Lossless rearrangement between spatial resolution and channels.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// N×C×H×W → N×(C·r²)×(H/r)×(W/r); output channel `c·r² + dy·r + dx` at
/// `(y, x)` holds input `(c, y·r + dy, x·r + dx)`.
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::PaddingRequired { height: h, width: w, stride: r.max(1) });
    }
    let (oh, ow) = (h / r, w / r);
    let mut out = Vec::with_capacity(x.numel());
    for s in 0..n {
        for ch in 0..c {
            let plane = x.plane(s, ch);
            for dy in 0..r {
                for dx in 0..r {
                    for y in 0..oh {
                        let row = (y * r + dy) * w;
                        out.extend((0..ow).map(|xx| plane[row + xx * r + dx]));
                    }
                }
            }
        }
    }
    Tensor::from_vec([n, c * r * r, oh, ow], out)
}

/// Exact inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, cr, h, w] = x.shape();
    if r == 0 || cr % (r * r) != 0 {
        return Err(Error::dim("pixel_shuffle channels", format!("multiple of {}", r * r), cr));
    }
    let c = cr / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let data = out.data_mut();
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * oh * ow;
            for dy in 0..r {
                for dx in 0..r {
                    let src = x.plane(s, ch * r * r + dy * r + dx);
                    for y in 0..h {
                        let row = base + (y * r + dy) * ow;
                        for xx in 0..w {
                            data[row + xx * r + dx] = src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

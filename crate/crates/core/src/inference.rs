//! Full-image upsampling.
//!
//! The depth map is first upsampled bicubically. DKN then obtains its kernel
//! and offset fields by shift-and-stitch: the unpadded network maps a crop of
//! side `51 + 4(n-1)` to an n×n field for every fourth pixel, so sixteen
//! shifted crops of the replicate-padded image cover all pixels. FDKN gets
//! dense fields from a single pass on the image padded to a multiple of 4.

use crate::error::{Error, Result};
use crate::filtering::{bicubic_resize, deformable_weighted_average, KernelField, OffsetField};
use crate::model::{Network, Variant, PATCH_CENTER, RECEPTIVE_FIELD, RESAMPLE_STRIDE};
use crate::parallel;
use crate::tensor::{Scalar, Tensor};

pub use crate::tensor::{pixel_shuffle, pixel_unshuffle};

/// Border added on every side before shift-and-stitch, so that each pixel
/// sits at the centre of a full receptive field.
pub const BORDER: usize = PATCH_CENTER;

pub const SCALES: [usize; 3] = [4, 8, 16];

#[derive(Clone, Copy, Debug)]
pub struct UpsampleRequest<'a, T> {
    /// 1×1×h×w low-resolution depth.
    pub lr_depth: &'a Tensor<T>,
    /// 1×C×(r·h)×(r·w) guidance image; required by guided models.
    pub hr_guidance: Option<&'a Tensor<T>>,
    pub scale: usize,
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Kernel and offset fields for every pixel of `target` from sixteen
/// network passes on shifted crops of the padded inputs.
///
/// Shift `(dy, dx)` produces the outputs for pixels with
/// `(y mod 4, x mod 4) = (dy, dx)`.
pub fn shift_and_stitch<T: Scalar>(
    net: &Network<T>,
    guidance: Option<&Tensor<T>>,
    target: &Tensor<T>,
) -> Result<(KernelField<T>, OffsetField<T>)> {
    if net.config().variant != Variant::Dkn {
        return Err(Error::Config("shift-and-stitch needs a DKN model".into()));
    }
    let cfg = net.config();
    if cfg.guided && guidance.is_none() {
        return Err(Error::GuidanceRequired);
    }
    let [n, _, h, w] = target.shape();
    let s = RESAMPLE_STRIDE;
    let pad = |t: &Tensor<T>| t.pad_replicate(BORDER, BORDER, BORDER, BORDER);
    let target_p = pad(target);
    let guide_p = if cfg.guided { guidance.map(pad) } else { None };

    let shifts = parallel::map_range(s * s, |i| -> Result<Option<_>> {
        let (dy, dx) = (i / s, i % s);
        if dy >= h || dx >= w {
            return Ok(None);
        }
        let (ny, nx) = (ceil_div(h - dy, s), ceil_div(w - dx, s));
        let (ch, cw) = (RECEPTIVE_FIELD + s * (ny - 1), RECEPTIVE_FIELD + s * (nx - 1));
        let t = target_p.crop(dy, dx, ch, cw)?;
        let g = match &guide_p {
            Some(g) => Some(g.crop(dy, dx, ch, cw)?),
            None => None,
        };
        let (k, o) = net.eval_fields(g.as_ref(), &t)?;
        Ok(Some((dy, dx, k, o)))
    });

    let taps = cfg.taps();
    let mut kernels = Tensor::zeros([n, taps, h, w]);
    let mut offsets = Tensor::zeros([n, 2 * taps, h, w]);
    for shift in shifts {
        let Some((dy, dx, k, o)) = shift? else { continue };
        scatter_strided(&mut kernels, &k.0, dy, dx, s);
        scatter_strided(&mut offsets, &o.0, dy, dx, s);
    }
    Ok((KernelField(kernels), OffsetField(offsets)))
}

fn scatter_strided<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>, dy: usize, dx: usize, s: usize) {
    let [n, c, h, w] = src.shape();
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    dst.set(b, ch, dy + s * i, dx + s * j, src.at(b, ch, i, j));
                }
            }
        }
    }
}

/// Replicate padding on the bottom and right up to the next multiple of `m`.
pub fn pad_to_multiple<T: Scalar>(t: &Tensor<T>, m: usize) -> Tensor<T> {
    let (ph, pw) = (ceil_div(t.h(), m) * m - t.h(), ceil_div(t.w(), m) * m - t.w());
    if ph == 0 && pw == 0 {
        t.clone()
    } else {
        t.pad_replicate(0, ph, 0, pw)
    }
}

/// Dense fields from either variant for a pre-upsampled `target`.
pub fn dense_fields<T: Scalar>(
    net: &Network<T>,
    guidance: Option<&Tensor<T>>,
    target: &Tensor<T>,
) -> Result<(KernelField<T>, OffsetField<T>)> {
    match net.config().variant {
        Variant::Dkn => shift_and_stitch(net, guidance, target),
        Variant::Fdkn => {
            let (h, w) = (target.h(), target.w());
            let t = pad_to_multiple(target, RESAMPLE_STRIDE);
            let g = match guidance {
                Some(g) if net.config().guided => Some(pad_to_multiple(g, RESAMPLE_STRIDE)),
                _ => None,
            };
            let (k, o) = net.forward_full_fdkn(g.as_ref(), &t)?;
            Ok((KernelField(k.0.crop(0, 0, h, w)?), OffsetField(o.0.crop(0, 0, h, w)?)))
        }
    }
}

/// Filter an already upsampled depth map with the network.
pub fn refine<T: Scalar>(net: &Network<T>, guidance: Option<&Tensor<T>>, upsampled: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, o) = dense_fields(net, guidance, upsampled)?;
    deformable_weighted_average(upsampled, &k, &o, net.config().grid(), net.config().residual)
}

fn check_request<T: Scalar>(net: &Network<T>, req: &UpsampleRequest<'_, T>) -> Result<(usize, usize)> {
    if !SCALES.contains(&req.scale) {
        return Err(Error::Config(format!("scale must be 4, 8 or 16, got {}", req.scale)));
    }
    let [n, c, h, w] = req.lr_depth.shape();
    if (n, c) != (1, 1) {
        return Err(Error::dim("low-resolution depth", [1, 1, h, w], req.lr_depth.shape()));
    }
    if h == 0 || w == 0 {
        return Err(Error::dim("low-resolution depth extent", "non-empty", (h, w)));
    }
    let (hh, hw) = (h * req.scale, w * req.scale);
    let cfg = net.config();
    if cfg.guided {
        let g = req.hr_guidance.ok_or(Error::GuidanceRequired)?;
        g.expect_shape([1, cfg.guidance_channels, hh, hw], "guidance image")?;
    }
    Ok((hh, hw))
}

/// Upsample `lr_depth` by `scale`: bicubic interpolation followed by the
/// learned deformable filtering.
pub fn upsample<T: Scalar>(net: &Network<T>, req: &UpsampleRequest<'_, T>) -> Result<Tensor<T>> {
    let (hh, hw) = check_request(net, req)?;
    let bic = bicubic_resize(req.lr_depth, hh, hw);
    let out = refine(net, req.hr_guidance, &bic)?;
    if !out.is_finite() {
        return Err(Error::Contract("upsampled depth contains non-finite values".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([1, c, h, w], |_, _, _, _| rng.gen::<f32>())
    }

    /// Fields at one pixel from its own 51×51 patch of the padded inputs.
    fn patch_fields(net: &Network<f32>, g: &Tensor<f32>, t: &Tensor<f32>, y: usize, x: usize) -> (Vec<f32>, Vec<f32>) {
        let gp = g.pad_replicate(BORDER, BORDER, BORDER, BORDER).crop(y, x, 51, 51).unwrap();
        let tp = t.pad_replicate(BORDER, BORDER, BORDER, BORDER).crop(y, x, 51, 51).unwrap();
        let (k, o) = net.eval_fields(Some(&gp), &tp).unwrap();
        (k.0.into_vec(), o.0.into_vec())
    }

    #[test]
    fn stitch_matches_per_pixel_patches() {
        let net = Network::<f32>::new(ModelConfig::dkn(), 11).unwrap();
        let g = rand_image(3, 10, 9, 1);
        let t = rand_image(1, 10, 9, 2);
        net.reset_passes();
        let (k, o) = shift_and_stitch(&net, Some(&g), &t).unwrap();
        assert_eq!(net.passes(), 16);
        assert_eq!(k.0.shape(), [1, 9, 10, 9]);
        let mut worst = 0f32;
        for y in 0..10 {
            for x in 0..9 {
                let (pk, po) = patch_fields(&net, &g, &t, y, x);
                for (c, v) in pk.iter().enumerate() {
                    worst = worst.max((k.0.at(0, c, y, x) - v).abs());
                }
                for (c, v) in po.iter().enumerate() {
                    worst = worst.max((o.0.at(0, c, y, x) - v).abs());
                }
            }
        }
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn zero_weight_heads_reproduce_bicubic() {
        for cfg in [ModelConfig::dkn(), ModelConfig::fdkn()] {
            let mut net = Network::<f32>::new(cfg, 5).unwrap();
            net.zero_weight_heads();
            let lr = rand_image(1, 5, 3, 3);
            let g = rand_image(3, 20, 12, 4);
            let req = UpsampleRequest { lr_depth: &lr, hr_guidance: Some(&g), scale: 4 };
            let out = upsample(&net, &req).unwrap();
            assert_eq!(out, bicubic_resize(&lr, 20, 12));
        }
    }

    #[test]
    fn fdkn_handles_odd_sizes() {
        let net = Network::<f32>::new(ModelConfig::fdkn(), 5).unwrap();
        let t = rand_image(1, 13, 7, 3);
        let g = rand_image(3, 13, 7, 4);
        let (k, o) = dense_fields(&net, Some(&g), &t).unwrap();
        assert_eq!(k.0.shape(), [1, 9, 13, 7]);
        assert_eq!(o.0.shape(), [1, 18, 13, 7]);
    }

    #[test]
    fn request_validation() {
        let net = Network::<f32>::new(ModelConfig::dkn(), 5).unwrap();
        let lr = rand_image(1, 4, 4, 3);
        let req = UpsampleRequest { lr_depth: &lr, hr_guidance: None, scale: 4 };
        assert!(matches!(upsample(&net, &req), Err(Error::GuidanceRequired)));
        let g = rand_image(3, 15, 16, 4);
        let req = UpsampleRequest { lr_depth: &lr, hr_guidance: Some(&g), scale: 4 };
        let msg = upsample(&net, &req).unwrap_err().to_string();
        assert!(msg.contains("[1, 3, 16, 16]") && msg.contains("[1, 3, 15, 16]"), "{msg}");
        let req = UpsampleRequest { lr_depth: &lr, hr_guidance: Some(&g), scale: 3 };
        assert!(matches!(upsample(&net, &req), Err(Error::Config(_))));
        let fdkn = Network::<f32>::new(ModelConfig::fdkn(), 5).unwrap();
        assert!(shift_and_stitch(&fdkn, Some(&g), &lr).is_err());
    }

    #[test]
    fn interior_ignores_padding_content() {
        let net = Network::<f32>::new(ModelConfig::dkn(), 5).unwrap();
        let g = rand_image(3, 60, 60, 1);
        let t = rand_image(1, 60, 60, 2);
        let (y, x) = (30, 31);
        let a = patch_fields(&net, &g, &t, y, x);
        let g2 = g.crop(3, 2, 56, 57).unwrap();
        let t2 = t.crop(3, 2, 56, 57).unwrap();
        let b = patch_fields(&net, &g2, &t2, y - 3, x - 2);
        assert_eq!(a, b);
    }

    #[test]
    fn upsample_is_deterministic() {
        let net = Network::<f32>::new(ModelConfig::fdkn(), 5).unwrap();
        let lr = rand_image(1, 4, 4, 3);
        let g = rand_image(3, 16, 16, 4);
        let req = UpsampleRequest { lr_depth: &lr, hr_guidance: Some(&g), scale: 4 };
        assert_eq!(upsample(&net, &req).unwrap(), upsample(&net, &req).unwrap());
    }
}

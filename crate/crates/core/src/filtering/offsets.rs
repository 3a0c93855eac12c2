//! Restriction of sampling positions to a (2R+1)×(2R+1) window.

use super::GridSpec;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn check<T: Scalar>(raw: &Tensor<T>, grid: GridSpec) -> Result<()> {
    if raw.c() != 2 * grid.taps() {
        return Err(Error::dim("offset field channels", 2 * grid.taps(), raw.c()));
    }
    Ok(())
}

/// Clamp each tap's total displacement `base + Δ` to `[-R, R]` per axis and
/// return the corresponding offsets. Channels are `(Δx, Δy)` pairs per tap.
pub fn restrict_offsets<T: Scalar>(raw: &Tensor<T>, grid: GridSpec) -> Result<Tensor<T>> {
    check(raw, grid)?;
    let r = T::from_i32(grid.radius()).unwrap();
    let hw = raw.h() * raw.w();
    let mut out = raw.clone();
    for (g, plane) in out.data_mut().chunks_mut(hw).enumerate() {
        let ch = g % raw.c();
        let (by, bx) = grid.base(ch / 2);
        let base = T::from_i32(if ch.is_multiple_of(2) { bx } else { by }).unwrap();
        for v in plane {
            *v = (base + *v).max(-r).min(r) - base;
        }
    }
    Ok(out)
}

/// `true` where the restriction is inactive (gradient passes through).
pub fn restrict_offsets_mask<T: Scalar>(raw: &Tensor<T>, grid: GridSpec) -> Result<Vec<bool>> {
    check(raw, grid)?;
    let r = T::from_i32(grid.radius()).unwrap();
    let hw = raw.h() * raw.w();
    Ok(raw
        .data()
        .chunks(hw)
        .enumerate()
        .flat_map(|(g, plane)| {
            let ch = g % raw.c();
            let (by, bx) = grid.base(ch / 2);
            let base = T::from_i32(if ch.is_multiple_of(2) { bx } else { by }).unwrap();
            plane.iter().map(move |&v| {
                let d = base + v;
                d >= -r && d <= r
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_offsets_unchanged() {
        let g = GridSpec::new(3).unwrap();
        let raw = Tensor::<f32>::zeros([1, 18, 4, 4]);
        assert_eq!(restrict_offsets(&raw, g).unwrap(), raw);
    }

    #[test]
    fn corner_tap_is_clamped_per_axis() {
        let g = GridSpec::new(3).unwrap();
        // tap 8 has base (dy, dx) = (1, 1); channels 16 (Δx) and 17 (Δy)
        let mut raw = Tensor::<f64>::zeros([1, 18, 1, 1]);
        raw.set(0, 16, 0, 0, 10.0);
        raw.set(0, 17, 0, 0, -3.0);
        let out = restrict_offsets(&raw, g).unwrap();
        let (dx, dy) = (1.0 + out.at(0, 16, 0, 0), 1.0 + out.at(0, 17, 0, 0));
        assert_eq!((dx, dy), (7.0, -2.0));
        let mask = restrict_offsets_mask(&raw, g).unwrap();
        assert!(!mask[16] && mask[17]);
    }

    #[test]
    fn random_fields_stay_in_window_and_are_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in [3, 5, 7] {
            let g = GridSpec::new(k).unwrap();
            let raw = Tensor::<f32>::random_uniform([2, 2 * k * k, 6, 5], -30.0, 30.0, &mut rng);
            let out = restrict_offsets(&raw, g).unwrap();
            for (i, &v) in out.data().iter().enumerate() {
                let ch = (i / 30) % (2 * k * k);
                let (by, bx) = g.base(ch / 2);
                let d = v + if ch.is_multiple_of(2) { bx } else { by } as f32;
                assert!((-7.0..=7.0).contains(&d), "{d}");
            }
            assert_eq!(restrict_offsets(&out, g).unwrap(), out);
        }
    }
}

//! Deformable sampling primitives.
//!
//! Raw forward/backward kernels live here; the differentiable versions are
//! recorded on the tape by [`crate::autograd::Graph`].

mod bicubic;
mod bilinear;
mod deform;
mod offsets;

pub use bicubic::{bicubic_resize, cubic_weight, BICUBIC_A};
pub use bilinear::{bilinear_sample, bilinear_sample_backward, sample, sample_with_grad, scatter};
pub use deform::{
    deformable_average_backward, deformable_average_forward, deformable_weighted_average, DeformGrads,
    KernelField, Lattice, OffsetField,
};
pub use offsets::{restrict_offsets, restrict_offsets_mask};

use crate::error::{Error, Result};

/// Half-width of the window sampling positions are restricted to (15×15).
pub const WINDOW_RADIUS: i32 = 7;

/// Kernel geometry: a k×k lattice of taps centred on the output pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridSpec {
    k: usize,
    radius: i32,
}

impl GridSpec {
    pub fn new(k: usize) -> Result<Self> {
        if !matches!(k, 3 | 5 | 7) {
            return Err(Error::Config(format!("kernel size must be 3, 5 or 7, got {k}")));
        }
        Ok(GridSpec { k, radius: WINDOW_RADIUS })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn taps(&self) -> usize {
        self.k * self.k
    }

    pub fn radius(&self) -> i32 {
        self.radius
    }

    /// Base displacement `(dy, dx)` of tap `t` in row-major kernel order.
    #[inline]
    pub fn base(&self, t: usize) -> (i32, i32) {
        let half = (self.k / 2) as i32;
        ((t / self.k) as i32 - half, (t % self.k) as i32 - half)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_offsets_are_symmetric() {
        for k in [3, 5, 7] {
            let g = GridSpec::new(k).unwrap();
            let (sy, sx) = (0..g.taps()).map(|t| g.base(t)).fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
            assert_eq!((sy, sx), (0, 0));
            assert_eq!(g.base(g.taps() / 2), (0, 0));
        }
        assert_eq!(GridSpec::new(3).unwrap().base(0), (-1, -1));
        assert!(GridSpec::new(4).is_err());
        assert!(GridSpec::new(9).is_err());
    }
}

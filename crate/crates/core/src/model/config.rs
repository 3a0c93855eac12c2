use crate::error::{Error, Result};
use crate::filtering::GridSpec;

/// Sub-sampling factor of both architectures (two stride-2 layers, or a
/// 4× pixel unshuffle).
pub const RESAMPLE_STRIDE: usize = 4;

/// Side of the DKN receptive field.
pub const RECEPTIVE_FIELD: usize = 51;

/// Offset of the output pixel inside a receptive-field patch.
pub const PATCH_CENTER: usize = RECEPTIVE_FIELD / 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Patch network with strided convolutions, evaluated by shift-and-stitch.
    Dkn,
    /// Pixel-unshuffled network evaluated in a single pass.
    Fdkn,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Dkn => "dkn",
            Variant::Fdkn => "fdkn",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dkn" => Ok(Variant::Dkn),
            "fdkn" => Ok(Variant::Fdkn),
            other => Err(Error::Config(format!("unknown variant {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub kernel_size: usize,
    /// Two-stream (guidance + depth) or depth-only feature extraction.
    pub guided: bool,
    /// Predict a residual on top of the bicubic input (zero-sum kernels)
    /// rather than the output itself (normalised kernels).
    pub residual: bool,
    /// When false the sampling offsets are fixed at zero (regular grid).
    pub learn_offsets: bool,
    pub scale: usize,
    pub guidance_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Dkn,
            kernel_size: 3,
            guided: true,
            residual: true,
            learn_offsets: true,
            scale: 4,
            guidance_channels: 3,
        }
    }
}

impl ModelConfig {
    pub fn dkn() -> Self {
        Self::default()
    }

    pub fn fdkn() -> Self {
        ModelConfig { variant: Variant::Fdkn, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        GridSpec::new(self.kernel_size)?;
        if !matches!(self.scale, 4 | 8 | 16) {
            return Err(Error::Config(format!("scale must be 4, 8 or 16, got {}", self.scale)));
        }
        if self.guided && self.guidance_channels == 0 {
            return Err(Error::Config("guided model needs at least one guidance channel".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec::new(self.kernel_size).expect("validated kernel size")
    }

    pub fn resample_stride(&self) -> usize {
        RESAMPLE_STRIDE
    }

    pub fn taps(&self) -> usize {
        self.kernel_size * self.kernel_size
    }
}

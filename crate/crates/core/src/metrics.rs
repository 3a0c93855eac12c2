//! RMSE in physical units and evaluation reports.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::filtering::bicubic_resize;
use crate::inference::{upsample, UpsampleRequest};
use crate::model::Network;
use crate::tensor::Tensor;
use crate::training::{synthesize_pair, ScenePair};

/// Value scales for the two common protocols.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Protocol {
    /// Depth normalised to [0, 1] maps to [0, 255].
    Scaled255,
    /// Depth normalised to [0, 1] spans `cm_per_unit` centimetres.
    Centimeters { cm_per_unit: f64 },
}

/// Default depth range for the centimetre protocol (10 m).
pub const NYU_CM_PER_UNIT: f64 = 1000.0;

impl Protocol {
    pub fn value_scale(self) -> f64 {
        match self {
            Protocol::Scaled255 => 255.0,
            Protocol::Centimeters { cm_per_unit } => cm_per_unit,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Scaled255 => "scaled255",
            Protocol::Centimeters { .. } => "nyu",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scaled255" => Ok(Protocol::Scaled255),
            "nyu" => Ok(Protocol::Centimeters { cm_per_unit: NYU_CM_PER_UNIT }),
            other => Err(Error::Config(format!("unknown protocol {other}"))),
        }
    }
}

/// Single-channel depth with a physical scale and an optional validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub samples: Vec<f32>,
    /// Physical units per stored unit.
    pub value_scale: f64,
    pub mask: Option<Vec<bool>>,
}

impl DepthImage {
    pub fn new(tensor: &Tensor<f32>, value_scale: f64) -> Result<Self> {
        tensor.expect_shape([1, 1, tensor.h(), tensor.w()], "depth image")?;
        Ok(DepthImage {
            width: tensor.w(),
            height: tensor.h(),
            samples: tensor.data().to_vec(),
            value_scale,
            mask: None,
        })
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.width * self.height {
            return Err(Error::dim("mask", self.width * self.height, mask.len()));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    /// Exclude a band of `border` pixels on every side.
    pub fn with_border(self, border: usize) -> Result<Self> {
        let (w, h) = (self.width, self.height);
        let base = self.mask.clone().unwrap_or_else(|| vec![true; w * h]);
        let mask = (0..w * h)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                base[i] && y >= border && x >= border && y + border < h && x + border < w
            })
            .collect();
        self.with_mask(mask)
    }

    fn valid(&self, i: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[i])
    }
}

/// Root-mean-square difference over pixels valid in both images, in
/// physical units.
pub fn rmse(pred: &DepthImage, gt: &DepthImage) -> Result<f64> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::dim("rmse operands", (gt.height, gt.width), (pred.height, pred.width)));
    }
    if pred.value_scale != gt.value_scale {
        return Err(Error::Config(format!(
            "rmse operands use different value scales ({} vs {})",
            pred.value_scale, gt.value_scale
        )));
    }
    let (mut se, mut n) = (0.0f64, 0usize);
    for (i, (&p, &g)) in pred.samples.iter().zip(&gt.samples).enumerate() {
        if pred.valid(i) && gt.valid(i) {
            se += (p as f64 - g as f64).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Config("rmse over an empty mask".into()));
    }
    Ok((se / n as f64).sqrt() * pred.value_scale)
}

/// RMSE between two 1×1×H×W tensors with a border exclusion.
pub fn tensor_rmse(pred: &Tensor<f32>, gt: &Tensor<f32>, value_scale: f64, border: usize) -> Result<f64> {
    let p = DepthImage::new(pred, value_scale)?.with_border(border)?;
    let g = DepthImage::new(gt, value_scale)?;
    rmse(&p, &g)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageResult {
    pub name: String,
    pub rmse: f64,
    pub bicubic_rmse: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub protocol: String,
    pub scale: usize,
    pub border: usize,
    pub images: Vec<ImageResult>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl EvalReport {
    pub fn average_rmse(&self) -> f64 {
        mean(self.images.iter().map(|r| r.rmse))
    }

    pub fn average_bicubic_rmse(&self) -> f64 {
        mean(self.images.iter().map(|r| r.bicubic_rmse))
    }

    pub fn average_seconds(&self) -> f64 {
        mean(self.images.iter().map(|r| r.seconds))
    }

    /// Human-readable lines followed by a `key=value` block.
    pub fn render(&self) -> String {
        let mut s = String::new();
        writeln!(s, "method {} | scale {}x | protocol {} | border {}", self.method, self.scale, self.protocol, self.border)
            .unwrap();
        for r in &self.images {
            writeln!(s, "{:<24} rmse {:>9.4}  bicubic {:>9.4}  {:>8.3}s", r.name, r.rmse, r.bicubic_rmse, r.seconds)
                .unwrap();
        }
        writeln!(
            s,
            "average over {} images: rmse {:.4}  bicubic {:.4}  {:.3}s/image",
            self.images.len(),
            self.average_rmse(),
            self.average_bicubic_rmse(),
            self.average_seconds()
        )
        .unwrap();
        writeln!(s, "---").unwrap();
        writeln!(s, "method={}", self.method).unwrap();
        writeln!(s, "scale={}", self.scale).unwrap();
        writeln!(s, "protocol={}", self.protocol).unwrap();
        writeln!(s, "border={}", self.border).unwrap();
        writeln!(s, "images={}", self.images.len()).unwrap();
        for (i, r) in self.images.iter().enumerate() {
            writeln!(s, "image.{i}.name={}", r.name).unwrap();
            writeln!(s, "image.{i}.rmse={}", r.rmse).unwrap();
            writeln!(s, "image.{i}.bicubic_rmse={}", r.bicubic_rmse).unwrap();
            writeln!(s, "image.{i}.seconds={}", r.seconds).unwrap();
        }
        writeln!(s, "average_rmse={}", self.average_rmse()).unwrap();
        writeln!(s, "average_bicubic_rmse={}", self.average_bicubic_rmse()).unwrap();
        writeln!(s, "average_seconds={}", self.average_seconds()).unwrap();
        s
    }
}

/// Upsample every scene with `net` and compare against ground truth and
/// plain bicubic interpolation.
pub fn evaluate(
    net: &Network<f32>,
    scenes: &[ScenePair],
    scale: usize,
    protocol: Protocol,
    border: usize,
) -> Result<EvalReport> {
    let vs = protocol.value_scale();
    let mut images = Vec::with_capacity(scenes.len());
    for s in scenes {
        let pair = synthesize_pair(s, scale)?;
        let start = Instant::now();
        let req = UpsampleRequest { lr_depth: &pair.lr_depth, hr_guidance: Some(&pair.guidance), scale };
        let out = upsample(net, &req)?;
        let seconds = start.elapsed().as_secs_f64();
        let bic = bicubic_resize(&pair.lr_depth, s.height(), s.width());
        images.push(ImageResult {
            name: s.source.clone(),
            rmse: tensor_rmse(&out, &pair.target, vs, border)?,
            bicubic_rmse: tensor_rmse(&bic, &pair.target, vs, border)?,
            seconds,
        });
    }
    let c = net.config();
    let method = format!(
        "{}{}{}{} k={}",
        c.variant.name(),
        if c.guided { "" } else { "-unguided" },
        if c.residual { "" } else { "-noresidual" },
        if c.learn_offsets { "" } else { "-fixedgrid" },
        c.kernel_size
    );
    Ok(EvalReport { method, protocol: protocol.name().into(), scale, border, images })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: &[f32], w: usize) -> DepthImage {
        DepthImage { width: w, height: v.len() / w, samples: v.to_vec(), value_scale: 255.0, mask: None }
    }

    #[test]
    fn identical_is_zero_and_offset_is_scaled() {
        let a = img(&[0.1, 0.2, 0.3, 0.4], 2);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        let b = img(&[0.15, 0.25, 0.35, 0.45], 2);
        assert!((rmse(&a, &b).unwrap() - 0.05 * 255.0).abs() < 1e-4);
        assert_eq!(rmse(&a, &b).unwrap(), rmse(&b, &a).unwrap());
    }

    #[test]
    fn masks_and_errors() {
        let a = img(&[0.0, 0.0, 0.0, 0.0], 2);
        let b = img(&[1.0, 0.0, 0.0, 0.0], 2);
        let masked = b.clone().with_mask(vec![false, true, true, true]).unwrap();
        assert_eq!(rmse(&a, &masked).unwrap(), 0.0);
        assert!(rmse(&a, &b.clone().with_mask(vec![false; 4]).unwrap()).is_err());
        assert!(b.clone().with_mask(vec![true; 3]).is_err());
        assert!(rmse(&a, &img(&[0.0; 6], 3)).is_err());
        let mut c = a.clone();
        c.value_scale = 1.0;
        assert!(rmse(&a, &c).is_err());
    }

    #[test]
    fn border_excludes_frame() {
        let mut v = vec![0.0f32; 25];
        v[0] = 1.0;
        let a = img(&[0.0; 25], 5).with_border(1).unwrap();
        assert_eq!(rmse(&a, &img(&v, 5)).unwrap(), 0.0);
        assert!(rmse(&img(&[0.0; 25], 5), &img(&v, 5)).unwrap() > 0.0);
    }

    #[test]
    fn report_average_is_arithmetic_mean() {
        let r = EvalReport {
            method: "m".into(),
            protocol: "scaled255".into(),
            scale: 4,
            border: 0,
            images: vec![
                ImageResult { name: "a".into(), rmse: 1.0, bicubic_rmse: 2.0, seconds: 0.5 },
                ImageResult { name: "b".into(), rmse: 3.0, bicubic_rmse: 4.0, seconds: 1.5 },
            ],
        };
        assert_eq!(r.average_rmse(), 2.0);
        let text = r.render();
        assert!(text.contains("average_rmse=2\n"));
        assert!(text.contains("image.1.name=b"));
    }
}

//! Procedural RGB-D scenes.
//!
//! Depth is a tilted background plane with piecewise-planar objects (ellipses
//! and convex polygons) painted on top. The colour image shares the object
//! boundaries, with a random albedo, stripe texture and noise per region, so
//! that colour edges predict depth edges without matching them exactly.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::filtering::bicubic_resize;
use crate::tensor::Tensor;

pub const MIN_SCENE_SIDE: usize = 64;

/// Gradient magnitude above which a depth pixel counts as a discontinuity.
pub const EDGE_THRESHOLD: f32 = 0.1;

/// Fraction of discontinuity pixels every generated scene reaches.
pub const MIN_EDGE_FRACTION: f64 = 0.02;

/// Aligned colour and depth images, both with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    /// 1×3×H×W
    pub color: Tensor<f32>,
    /// 1×1×H×W
    pub depth: Tensor<f32>,
    pub source: String,
}

impl ScenePair {
    pub fn new(color: Tensor<f32>, depth: Tensor<f32>, source: impl Into<String>) -> Result<Self> {
        if color.n() != 1 || color.c() != 3 {
            return Err(Error::dim("scene colour", "1x3xHxW", format!("{:?}", color.shape())));
        }
        depth.expect_shape([1, 1, color.h(), color.w()], "scene depth")?;
        Ok(ScenePair { color, depth, source: source.into() })
    }

    pub fn height(&self) -> usize {
        self.depth.h()
    }

    pub fn width(&self) -> usize {
        self.depth.w()
    }
}

/// Training triple derived from a scene.
#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub lr_depth: Tensor<f32>,
    pub target: Tensor<f32>,
    pub guidance: Tensor<f32>,
}

/// Bicubic downsampling of the depth by `scale`.
pub fn synthesize_pair(scene: &ScenePair, scale: usize) -> Result<SyntheticPair> {
    let (h, w) = (scene.height(), scene.width());
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(Error::PaddingRequired { height: h, width: w, stride: scale });
    }
    Ok(SyntheticPair {
        lr_depth: bicubic_resize(&scene.depth, h / scale, w / scale),
        target: scene.depth.clone(),
        guidance: scene.color.clone(),
    })
}

enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, cos: f64, sin: f64 },
    Polygon(Vec<(f64, f64)>),
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Shape::Ellipse { cy, cx, ry, rx, cos, sin } => {
                let (dy, dx) = (y - cy, x - cx);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Polygon(pts) => {
                // vertices are in counter-clockwise order around the centre
                pts.iter().zip(pts.iter().cycle().skip(1)).all(|(&(y0, x0), &(y1, x1))| {
                    (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) >= 0.0
                })
            }
        }
    }
}

struct Region {
    shape: Shape,
    depth: [f64; 3],
    albedo: [f64; 3],
    stripe: [f64; 3],
}

fn random_shape(rng: &mut ChaCha8Rng, h: f64, w: f64) -> Shape {
    let side = h.min(w);
    let (cy, cx) = (rng.gen_range(0.0..h), rng.gen_range(0.0..w));
    if rng.gen_bool(0.5) {
        let a = rng.gen_range(0.0..PI);
        Shape::Ellipse {
            cy,
            cx,
            ry: rng.gen_range(0.06..0.25) * side,
            rx: rng.gen_range(0.06..0.25) * side,
            cos: a.cos(),
            sin: a.sin(),
        }
    } else {
        let n = rng.gen_range(3..=6);
        let mut angles: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        angles.sort_by(f64::total_cmp);
        let pts = angles
            .into_iter()
            .map(|a| {
                let r = rng.gen_range(0.08..0.3) * side;
                (cy + r * a.sin(), cx + r * a.cos())
            })
            .collect();
        Shape::Polygon(pts)
    }
}

fn random_region(rng: &mut ChaCha8Rng, h: f64, w: f64) -> Region {
    let shape = random_shape(rng, h, w);
    let d = rng.gen_range(0.05..0.6);
    let tilt = 0.1 / h.max(w);
    Region {
        shape,
        depth: [d, rng.gen_range(-tilt..tilt), rng.gen_range(-tilt..tilt)],
        albedo: [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)],
        stripe: [rng.gen_range(0.0..0.06), rng.gen_range(0.2..1.2), rng.gen_range(0.0..PI)],
    }
}

/// Fraction of pixels whose forward-difference gradient magnitude exceeds
/// [`EDGE_THRESHOLD`].
pub fn discontinuity_fraction(depth: &Tensor<f32>) -> f64 {
    let (h, w) = (depth.h(), depth.w());
    if h < 2 || w < 2 {
        return 0.0;
    }
    let p = depth.plane(0, 0);
    let mut count = 0usize;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let v = p[y * w + x];
            let gx = p[y * w + x + 1] - v;
            let gy = p[(y + 1) * w + x] - v;
            if (gx * gx + gy * gy).sqrt() > EDGE_THRESHOLD {
                count += 1;
            }
        }
    }
    count as f64 / (h * w) as f64
}

fn render(regions: &[Region], background: &Region, h: usize, w: usize, noise_seed: u64) -> ScenePair {
    let mut depth = Tensor::zeros([1, 1, h, w]);
    let mut color = Tensor::zeros([1, 3, h, w]);
    let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let r = regions.iter().rev().find(|r| r.shape.contains(fy, fx)).unwrap_or(background);
            let d = r.depth[0] + r.depth[1] * (fx - cx) + r.depth[2] * (fy - cy);
            depth.set(0, 0, y, x, d.clamp(0.0, 1.0) as f32);
            let [amp, freq, angle] = r.stripe;
            let tex = amp * (freq * (fx * angle.cos() + fy * angle.sin())).sin();
            for c in 0..3 {
                let n: f64 = noise.gen_range(-0.02..0.02);
                color.set(0, c, y, x, (r.albedo[c] + tex + n).clamp(0.0, 1.0) as f32);
            }
        }
    }
    ScenePair { color, depth, source: String::new() }
}

/// Deterministic synthetic scene of size `height`×`width` (both ≥ 64).
pub fn generate_scene(seed: u64, height: usize, width: usize) -> Result<ScenePair> {
    if height < MIN_SCENE_SIDE || width < MIN_SCENE_SIDE {
        return Err(Error::Config(format!(
            "synthetic scenes need sides of at least {MIN_SCENE_SIDE}, got {height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f64, width as f64);
    let slope = 0.3 / h.max(w);
    let background = Region {
        shape: Shape::Polygon(Vec::new()),
        depth: [rng.gen_range(0.65..0.9), rng.gen_range(-slope..slope), rng.gen_range(-slope..slope)],
        albedo: [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)],
        stripe: [rng.gen_range(0.0..0.04), rng.gen_range(0.1..0.6), rng.gen_range(0.0..PI)],
    };
    let noise_seed = rng.gen();
    let mut regions: Vec<Region> = (0..rng.gen_range(4..=8)).map(|_| random_region(&mut rng, h, w)).collect();
    loop {
        let mut scene = render(&regions, &background, height, width, noise_seed);
        if discontinuity_fraction(&scene.depth) >= MIN_EDGE_FRACTION || regions.len() >= 64 {
            scene.source = format!("synthetic:{seed}");
            return Ok(scene);
        }
        regions.push(random_region(&mut rng, h, w));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn deterministic() {
        assert_eq!(generate_scene(3, 64, 80).unwrap(), generate_scene(3, 64, 80).unwrap());
        assert_ne!(generate_scene(3, 64, 80).unwrap().depth, generate_scene(4, 64, 80).unwrap().depth);
    }

    #[test]
    fn ranges_and_edges() {
        for seed in 0..20 {
            let s = generate_scene(seed, 96, 96).unwrap();
            assert!(s.depth.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.color.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(discontinuity_fraction(&s.depth) >= MIN_EDGE_FRACTION, "seed {seed}");
        }
    }

    #[test]
    fn too_small_is_rejected() {
        assert!(generate_scene(0, 63, 100).is_err());
    }

    #[test]
    fn constant_depth_stays_constant() {
        let s = ScenePair::new(Tensor::full([1, 3, 64, 64], 0.5), Tensor::full([1, 1, 64, 64], 0.25), "c").unwrap();
        let p = synthesize_pair(&s, 8).unwrap();
        assert_eq!(p.lr_depth.shape(), [1, 1, 8, 8]);
        assert!(p.lr_depth.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
        assert!(synthesize_pair(&s, 3).is_err());
    }

    #[test]
    fn bicubic_round_trip_beats_nearest_on_smooth_depth() {
        let (h, w) = (64usize, 64usize);
        let depth = Tensor::from_fn([1, 1, h, w], |_, _, y, x| {
            let (u, v) = (y as f32 / h as f32 - 0.4, x as f32 / w as f32 - 0.6);
            0.3 + u * u + 0.5 * v * v
        });
        let s = ScenePair::new(Tensor::zeros([1, 3, h, w]), depth.clone(), "q").unwrap();
        let p = synthesize_pair(&s, 4).unwrap();
        let up = bicubic_resize(&p.lr_depth, h, w);
        let nearest = Tensor::from_fn([1, 1, h, w], |_, _, y, x| p.lr_depth.at(0, 0, y / 4, x / 4));
        let rmse = |a: &Tensor<f32>| {
            let se: f64 = a.data().iter().zip(depth.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
            (se / (h * w) as f64).sqrt()
        };
        assert!(rmse(&up) < rmse(&nearest), "{} {}", rmse(&up), rmse(&nearest));
    }
}

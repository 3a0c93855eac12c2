//! Netpbm (binary PGM/PPM) and PFM images, plus dataset discovery.
//!
//! Integer formats are normalised to [0, 1] by their maxval; 16-bit samples
//! are big-endian. PFM floats pass through unchanged; the sign of the header
//! scale selects the byte order (negative is little-endian) and rows run
//! bottom to top.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::ScenePair;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Pgm,
    Ppm,
    Pfm,
}

impl Format {
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        match ext.as_str() {
            "pgm" => Ok(Format::Pgm),
            "ppm" => Ok(Format::Ppm),
            "pfm" => Ok(Format::Pfm),
            _ => Err(Error::UnsupportedFormat(format!("{} (expected .pgm, .ppm or .pfm)", path.display()))),
        }
    }
}

/// Decoded image with the information needed to write it back unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    /// 1×C×H×W with C = 1 or 3.
    pub tensor: Tensor<f32>,
    /// Netpbm maxval, or `None` for PFM.
    pub maxval: Option<u32>,
    /// Absolute PFM scale, or `None` for netpbm.
    pub pfm_scale: Option<f32>,
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<u8> {
        self.data.get(self.pos).copied()
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(c) = self.peek() {
            if c == b'#' {
                while let Some(c) = self.peek() {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self, what: &str) -> Result<&'a str> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.peek().is_some_and(|c| !c.is_ascii_whitespace()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(if self.pos >= self.data.len() {
                Error::UnexpectedEof
            } else {
                Error::MalformedHeader(format!("missing {what}"))
            });
        }
        std::str::from_utf8(&self.data[start..self.pos]).map_err(|_| Error::MalformedHeader(format!("bad {what}")))
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        let t = self.token(what)?;
        t.parse().map_err(|_| Error::MalformedHeader(format!("{what} {t:?} is not a number")))
    }

    /// Exactly one whitespace byte separates the header from the raster.
    fn end_header(&mut self) -> Result<()> {
        match self.peek() {
            Some(c) if c.is_ascii_whitespace() => {
                self.pos += 1;
                Ok(())
            }
            Some(_) => Err(Error::MalformedHeader("no whitespace after header".into())),
            None => Err(Error::UnexpectedEof),
        }
    }

    fn rest(&self) -> &'a [u8] {
        &self.data[self.pos..]
    }
}

const MAX_PIXELS: usize = 1 << 28;

fn checked_extent(w: u32, h: u32, channels: usize) -> Result<usize> {
    if w == 0 || h == 0 {
        return Err(Error::MalformedHeader(format!("empty image {w}x{h}")));
    }
    let n = (w as usize).checked_mul(h as usize).filter(|&n| n <= MAX_PIXELS);
    n.map(|n| n * channels).ok_or_else(|| Error::MalformedHeader(format!("image {w}x{h} too large")))
}

fn decode_netpbm(data: &[u8], channels: usize) -> Result<Image> {
    let mut c = Cursor { data, pos: 2 };
    let w = c.number("width")?;
    let h = c.number("height")?;
    let maxval = c.number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::UnsupportedMaxval(maxval));
    }
    c.end_header()?;
    let count = checked_extent(w, h, channels)?;
    let bytes = if maxval > 255 { 2 } else { 1 };
    let raster = c.rest();
    if raster.len() < count * bytes {
        return Err(Error::UnexpectedEof);
    }
    let (w, h) = (w as usize, h as usize);
    let mut t = Tensor::zeros([1, channels, h, w]);
    for i in 0..count {
        let v = if bytes == 2 {
            u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as u32
        } else {
            raster[i] as u32
        };
        let (pix, ch) = (i / channels, i % channels);
        t.set(0, ch, pix / w, pix % w, v.min(maxval) as f32 / maxval as f32);
    }
    Ok(Image { tensor: t, maxval: Some(maxval), pfm_scale: None })
}

fn decode_pfm(data: &[u8], channels: usize) -> Result<Image> {
    let mut c = Cursor { data, pos: 2 };
    let w = c.number("width")?;
    let h = c.number("height")?;
    let s = c.token("scale")?;
    let scale: f32 = s.parse().map_err(|_| Error::MalformedHeader(format!("scale {s:?} is not a number")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::MalformedHeader(format!("invalid scale {scale}")));
    }
    c.end_header()?;
    let count = checked_extent(w, h, channels)?;
    let raster = c.rest();
    if raster.len() < count * 4 {
        return Err(Error::UnexpectedEof);
    }
    let (w, h) = (w as usize, h as usize);
    let mut t = Tensor::zeros([1, channels, h, w]);
    for i in 0..count {
        let b = [raster[4 * i], raster[4 * i + 1], raster[4 * i + 2], raster[4 * i + 3]];
        let v = if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (pix, ch) = (i / channels, i % channels);
        t.set(0, ch, h - 1 - pix / w, pix % w, v);
    }
    Ok(Image { tensor: t, maxval: None, pfm_scale: Some(scale.abs()) })
}

/// Decode from memory; the format is taken from the magic number.
pub fn decode_image(data: &[u8]) -> Result<Image> {
    if data.len() < 2 {
        return Err(Error::UnexpectedEof);
    }
    match &data[..2] {
        b"P5" => decode_netpbm(data, 1),
        b"P6" => decode_netpbm(data, 3),
        b"Pf" => decode_pfm(data, 1),
        b"PF" => decode_pfm(data, 3),
        m => Err(Error::MalformedHeader(format!("unknown magic {:?}", String::from_utf8_lossy(m)))),
    }
}

fn check_writable(t: &Tensor<f32>, channels: usize) -> Result<(usize, usize)> {
    if t.n() != 1 || t.c() != channels {
        return Err(Error::dim("image to write", format!("1x{channels}xHxW"), format!("{:?}", t.shape())));
    }
    Ok((t.h(), t.w()))
}

/// Binary PGM (`channels` = 1) or PPM (3) with the given maxval. Values are
/// clamped to [0, 1] and rounded.
pub fn encode_netpbm(t: &Tensor<f32>, maxval: u32) -> Result<Vec<u8>> {
    if maxval == 0 || maxval > 65535 {
        return Err(Error::UnsupportedMaxval(maxval));
    }
    let channels = t.c();
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::dim("netpbm channels", "1 or 3", channels)),
    };
    let (h, w) = check_writable(t, channels)?;
    let mut out = format!("{magic}\n{w} {h}\n{maxval}\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                let v = (t.at(0, c, y, x).clamp(0.0, 1.0) * maxval as f32).round() as u32;
                if maxval > 255 {
                    out.extend_from_slice(&(v as u16).to_be_bytes());
                } else {
                    out.push(v as u8);
                }
            }
        }
    }
    Ok(out)
}

/// Little-endian PFM with scale 1.
pub fn encode_pfm(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let channels = t.c();
    let magic = match channels {
        1 => "Pf",
        3 => "PF",
        _ => return Err(Error::dim("pfm channels", "1 or 3", channels)),
    };
    let (h, w) = check_writable(t, channels)?;
    let mut out = format!("{magic}\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for x in 0..w {
            for c in 0..channels {
                out.extend_from_slice(&t.at(0, c, y, x).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn read_image_full(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    Format::from_path(path)?;
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&data)
}

/// Read a PGM, PPM or PFM file as a 1×C×H×W tensor.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    Ok(read_image_full(path)?.tensor)
}

/// Write by extension: 16-bit PGM, 8-bit PPM or little-endian PFM.
pub fn write_image(t: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match Format::from_path(path)? {
        Format::Pgm => {
            check_writable(t, 1)?;
            encode_netpbm(t, 65535)?
        }
        Format::Ppm => {
            check_writable(t, 3)?;
            encode_netpbm(t, 255)?
        }
        Format::Pfm => encode_pfm(t)?,
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// A `<name>.depth.<ext>` file with its optional `<name>.color.<ext>` partner.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetEntry {
    pub name: String,
    pub depth: PathBuf,
    pub color: Option<PathBuf>,
}

fn split_name(file: &str) -> Option<(&str, &str)> {
    let (stem, ext) = file.rsplit_once('.')?;
    if !matches!(ext.to_ascii_lowercase().as_str(), "pgm" | "ppm" | "pfm") {
        return None;
    }
    let (name, role) = stem.rsplit_once('.')?;
    Some((name, role))
}

/// Pair up `<name>.color.*` and `<name>.depth.*` files, sorted by name.
pub fn scan_dataset(dir: impl AsRef<Path>) -> Result<Vec<DatasetEntry>> {
    let dir = dir.as_ref();
    let mut depth = std::collections::BTreeMap::new();
    let mut color = std::collections::BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(file) = path.file_name().and_then(|f| f.to_str()) else { continue };
        let Some((name, role)) = split_name(file) else { continue };
        let map = match role {
            "depth" => &mut depth,
            "color" => &mut color,
            _ => continue,
        };
        if let Some(prev) = map.insert(name.to_string(), path.clone()) {
            return Err(Error::Dataset(format!("{} and {} share a name", prev.display(), path.display())));
        }
    }
    if let Some(orphan) = color.keys().find(|k| !depth.contains_key(*k)) {
        return Err(Error::Dataset(format!("{orphan}: colour image without depth")));
    }
    if depth.is_empty() {
        return Err(Error::Dataset(format!("no <name>.depth.<ext> files in {}", dir.display())));
    }
    Ok(depth
        .into_iter()
        .map(|(name, d)| {
            let c = color.remove(&name);
            DatasetEntry { name, depth: d, color: c }
        })
        .collect())
}

/// Load an entry as a scene; a missing colour image is replaced by grey.
pub fn load_scene(entry: &DatasetEntry) -> Result<ScenePair> {
    let depth = read_image(&entry.depth)?;
    if depth.c() != 1 {
        return Err(Error::dim(format!("{} channels", entry.depth.display()), 1, depth.c()));
    }
    let color = match &entry.color {
        Some(p) => {
            let c = read_image(p)?;
            if c.c() == 1 {
                Tensor::from_fn([1, 3, c.h(), c.w()], |_, _, y, x| c.at(0, 0, y, x))
            } else {
                c
            }
        }
        None => Tensor::full([1, 3, depth.h(), depth.w()], 0.5),
    };
    ScenePair::new(color, depth, entry.name.clone())
}

/// Write a scene as `<name>.color.ppm` and `<name>.depth.pgm`.
pub fn write_scene(dir: impl AsRef<Path>, name: &str, scene: &ScenePair) -> Result<()> {
    let dir = dir.as_ref();
    write_image(&scene.color, dir.join(format!("{name}.color.ppm")))?;
    write_image(&scene.depth, dir.join(format!("{name}.depth.pgm")))
}

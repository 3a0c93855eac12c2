//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! "DKNC"  u32 version
//! config: u8 variant, u32 k, u8 guided, u8 residual, u8 learn_offsets,
//!         u32 scale, u32 guidance_channels
//! u32 entry count, then per entry:
//!         u32 name length, name bytes, u8 trainable, 4×u32 shape, f32 data
//! u8 optimizer present; if 1: u64 step, then m and v (f32 data) for each
//!         trainable entry in order
//! u64 iteration, u64 seed, u64 history length, f64 history values
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::adam::Adam;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Network, Variant};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DKNC";
pub const VERSION: u32 = 1;

/// Network plus the state needed to resume training.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub network: Network<f32>,
    pub optimizer: Option<Adam<f32>>,
    pub iteration: u64,
    pub seed: u64,
    /// Mean per-pixel L1 loss of every completed iteration.
    pub history: Vec<f64>,
}

impl Checkpoint {
    pub fn from_network(network: Network<f32>) -> Self {
        Checkpoint { network, optimizer: None, iteration: 0, seed: 0, history: Vec::new() }
    }
}

fn write_config(out: &mut Vec<u8>, c: &ModelConfig) {
    out.push(match c.variant {
        Variant::Dkn => 0,
        Variant::Fdkn => 1,
    });
    out.write_u32::<LE>(c.kernel_size as u32).unwrap();
    out.push(c.guided as u8);
    out.push(c.residual as u8);
    out.push(c.learn_offsets as u8);
    out.write_u32::<LE>(c.scale as u32).unwrap();
    out.write_u32::<LE>(c.guidance_channels as u32).unwrap();
}

fn write_floats(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialise a checkpoint to bytes.
pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.write_u32::<LE>(VERSION).unwrap();
    write_config(&mut out, ckpt.network.config());
    let entries = ckpt.network.params().entries();
    out.write_u32::<LE>(entries.len() as u32).unwrap();
    for e in entries {
        out.write_u32::<LE>(e.name.len() as u32).unwrap();
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.trainable as u8);
        for d in e.tensor.shape() {
            out.write_u32::<LE>(d as u32).unwrap();
        }
        write_floats(&mut out, e.tensor.data());
    }
    match &ckpt.optimizer {
        Some(adam) => {
            out.push(1);
            out.write_u64::<LE>(adam.step).unwrap();
            for t in adam.m.iter().chain(&adam.v) {
                write_floats(&mut out, t.data());
            }
        }
        None => out.push(0),
    }
    out.write_u64::<LE>(ckpt.iteration).unwrap();
    out.write_u64::<LE>(ckpt.seed).unwrap();
    out.write_u64::<LE>(ckpt.history.len() as u64).unwrap();
    for &v in &ckpt.history {
        out.write_f64::<LE>(v).unwrap();
    }
    out
}

struct Reader<'a> {
    inner: &'a [u8],
}

impl Reader<'_> {
    fn section<T>(&mut self, what: &'static str, f: impl FnOnce(&mut &[u8]) -> io::Result<T>) -> Result<T> {
        f(&mut self.inner).map_err(|_| Error::Truncated(what))
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        self.section(what, |r| r.read_u8())
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        self.section(what, |r| r.read_u32::<LE>())
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        self.section(what, |r| r.read_u64::<LE>())
    }

    fn flag(&mut self, what: &'static str) -> Result<bool> {
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::CorruptCheckpoint(format!("{what}: flag value {v}"))),
        }
    }

    fn floats(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>> {
        if self.inner.len() / 4 < n {
            return Err(Error::Truncated(what));
        }
        let mut out = vec![0f32; n];
        self.section(what, |r| r.read_f32_into::<LE>(&mut out))?;
        Ok(out)
    }
}

fn read_config(r: &mut Reader<'_>) -> Result<ModelConfig> {
    let variant = match r.u8("config")? {
        0 => Variant::Dkn,
        1 => Variant::Fdkn,
        v => return Err(Error::CorruptCheckpoint(format!("unknown variant tag {v}"))),
    };
    let config = ModelConfig {
        variant,
        kernel_size: r.u32("config")? as usize,
        guided: r.flag("config")?,
        residual: r.flag("config")?,
        learn_offsets: r.flag("config")?,
        scale: r.u32("config")? as usize,
        guidance_channels: r.u32("config")? as usize,
    };
    config.validate().map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    Ok(config)
}

/// Parse a checkpoint produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { inner: bytes };
    let mut magic = [0u8; 4];
    r.section("magic", |r| r.read_exact(&mut magic))?;
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let config = read_config(&mut r)?;
    let mut network = Network::new(config, 0)?;
    let count = r.u32("entry count")? as usize;
    if count != network.params().len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{count} parameter entries, architecture has {}",
            network.params().len()
        )));
    }
    for i in 0..count {
        let len = r.u32("entry name")? as usize;
        if r.inner.len() < len {
            return Err(Error::Truncated("entry name"));
        }
        let (name, rest) = r.inner.split_at(len);
        r.inner = rest;
        let name = std::str::from_utf8(name).map_err(|_| Error::CorruptCheckpoint("entry name is not UTF-8".into()))?;
        let trainable = r.flag("entry header")?;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.u32("entry header")? as usize;
        }
        let entry = &mut network.params_mut().entries_mut()[i];
        if entry.name != name || entry.trainable != trainable || entry.tensor.shape() != shape {
            return Err(Error::CorruptCheckpoint(format!(
                "entry {i}: found {name} {shape:?}, expected {} {:?}",
                entry.name,
                entry.tensor.shape()
            )));
        }
        let data = r.floats(shape.iter().product(), "entry data")?;
        entry.tensor = Tensor::from_vec(shape, data)?;
    }
    let optimizer = if r.flag("optimizer")? {
        let mut adam = Adam::new(network.params());
        adam.step = r.u64("optimizer")?;
        for t in adam.m.iter_mut().chain(adam.v.iter_mut()) {
            let data = r.floats(t.numel(), "optimizer moments")?;
            *t = Tensor::from_vec(t.shape(), data)?;
        }
        Some(adam)
    } else {
        None
    };
    let iteration = r.u64("metadata")?;
    let seed = r.u64("metadata")?;
    let n = r.u64("metadata")? as usize;
    if r.inner.len() / 8 < n {
        return Err(Error::Truncated("loss history"));
    }
    let mut history = vec![0f64; n];
    r.section("loss history", |r| r.read_f64_into::<LE>(&mut history))?;
    if !r.inner.is_empty() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", r.inner.len())));
    }
    Ok(Checkpoint { network, optimizer, iteration, seed, history })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Load and require a specific model configuration.
pub fn load_checkpoint_as(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let found = ckpt.network.config();
    if found != expected {
        return Err(Error::ConfigMismatch(format!("checkpoint holds {found:?}, expected {expected:?}")));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let net = Network::<f32>::new(ModelConfig::fdkn(), 9).unwrap();
        let mut adam = Adam::new(net.params());
        adam.step = 3;
        adam.m[0].data_mut()[0] = 0.25;
        adam.v[1].data_mut()[2] = 1.5;
        Checkpoint { network: net, optimizer: Some(adam), iteration: 17, seed: 5, history: vec![0.5, 0.25, f64::MIN_POSITIVE] }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let d = decode(&encode(&c)).unwrap();
        assert!(c.network.params().bit_eq(d.network.params()));
        assert_eq!(c.optimizer, d.optimizer);
        assert_eq!((c.iteration, c.seed, &c.history), (d.iteration, d.seed, &d.history));
    }

    #[test]
    fn file_round_trip_and_config_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dknc");
        save_checkpoint(&sample(), &path).unwrap();
        assert!(load_checkpoint_as(&path, &ModelConfig::fdkn()).is_ok());
        assert!(matches!(load_checkpoint_as(&path, &ModelConfig::dkn()), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn every_truncation_is_reported() {
        let bytes = encode(&sample());
        for cut in [0, 3, 6, 10, 30, 1000, bytes.len() / 2, bytes.len() - 9, bytes.len() - 1] {
            match decode(&bytes[..cut]) {
                Err(Error::Truncated(_)) => {}
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode(&sample());
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::BadMagic(_))));
        let mut bytes = encode(&sample());
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(Error::UnsupportedVersion(9))));
        let mut bytes = encode(&sample());
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(Error::CorruptCheckpoint(_))));
    }
}

//! `HMN1` checkpoints: magic, a length-prefixed `key=value` config block,
//! then named tensors as `(u32 name length, name, u32 rank, u32 dims…, f64 LE data)`
//! until end of file.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::attention::Tiers;
use crate::error::{Error, Result};
use crate::model::{HmnParams, MemoryKind, ModelConfig};
use crate::numerics::{ParamStore, Tensor};
use crate::scalar::Scalar;
use crate::training::Discriminator;

const MAGIC: &[u8; 4] = b"HMN1";

/// Raw checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Format(format!("checkpoint config lacks {key}")))?;
        raw.parse()
            .map_err(|_| Error::Format(format!("checkpoint config {key}={raw} is malformed")))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            memory_len: self.parse("memory_len")?,
            patches: self.parse("patches")?,
            dim: self.parse("dim")?,
            hidden: self.parse("hidden")?,
            attn_dim: self.parse("attn_dim")?,
            noise_dim: self.parse("noise_dim")?,
            kind: MemoryKind::parse(self.get("kind").unwrap_or_default())?,
            tiers: Tiers {
                input: self.parse("tier_input")?,
                patch: self.parse("tier_patch")?,
                frame: self.parse("tier_frame")?,
            },
        })
    }
}

fn config_pairs(c: &ModelConfig, disc_hidden: usize) -> Vec<(String, String)> {
    [
        ("memory_len", c.memory_len.to_string()),
        ("patches", c.patches.to_string()),
        ("dim", c.dim.to_string()),
        ("hidden", c.hidden.to_string()),
        ("attn_dim", c.attn_dim.to_string()),
        ("noise_dim", c.noise_dim.to_string()),
        ("kind", c.kind.name().to_string()),
        ("tier_input", c.tiers.input.to_string()),
        ("tier_patch", c.tiers.patch.to_string()),
        ("tier_frame", c.tiers.frame.to_string()),
        ("disc_hidden", disc_hidden.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn u32_of(n: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(n)
        .map(|x| x.to_le_bytes())
        .map_err(|_| Error::Format(format!("{what} {n} exceeds u32")))
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<()> {
    w.write_all(MAGIC)?;
    let mut block = String::new();
    for (k, v) in &ckpt.config {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Format(format!("config entry {k:?} cannot be encoded")));
        }
        block.push_str(&format!("{k}={v}\n"));
    }
    w.write_all(&u32_of(block.len(), "config block length")?)?;
    w.write_all(block.as_bytes())?;
    for (name, t) in &ckpt.tensors {
        w.write_all(&u32_of(name.len(), "name length")?)?;
        w.write_all(name.as_bytes())?;
        w.write_all(&u32_of(t.rank(), "rank")?)?;
        for &d in t.shape() {
            w.write_all(&u32_of(d, "dimension")?)?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == ErrorKind::UnexpectedEof {
        Error::Format("checkpoint is truncated".into())
    } else {
        Error::Io(e)
    }
}

/// Reads the first byte of the next record, or `None` at a clean end of file.
fn next_byte<R: Read>(r: &mut R) -> Result<Option<u8>> {
    let mut b = [0u8; 1];
    loop {
        match r.read(&mut b) {
            Ok(0) => return Ok(None),
            Ok(_) => return Ok(Some(b[0])),
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let len = read_u32(&mut r)? as usize;
    let mut block = vec![0u8; len];
    r.read_exact(&mut block).map_err(truncated)?;
    let text = String::from_utf8(block).map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    let config = text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Format(format!("config line {l:?} lacks '='")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut tensors = Vec::new();
    while let Some(first) = next_byte(&mut r)? {
        let mut rest = [0u8; 3];
        r.read_exact(&mut rest).map_err(truncated)?;
        let name_len = u32::from_le_bytes([first, rest[0], rest[1], rest[2]]) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw).map_err(truncated)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok(Checkpoint { config, tensors })
}

fn store_tensors<T: Scalar>(store: &ParamStore<T>) -> impl Iterator<Item = (String, Tensor<f64>)> + '_ {
    store.iter().map(|(_, name, t)| {
        let data = t.data().iter().map(|x| x.to_f64_lossy()).collect();
        (name.to_string(), Tensor::new(t.shape().to_vec(), data).expect("shape preserved"))
    })
}

fn load_store<T: Scalar>(store: &mut ParamStore<T>, ckpt: &Checkpoint) -> Result<()> {
    let ids: Vec<_> = store.iter().map(|(id, name, _)| (id, name.to_string())).collect();
    for (id, name) in ids {
        let (_, t) = ckpt
            .tensors
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
        let dst = store.get_mut(id);
        if dst.shape() != t.shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, model expects {:?}",
                t.shape(),
                dst.shape()
            )));
        }
        for (d, &s) in dst.data_mut().iter_mut().zip(t.data()) {
            *d = T::lit(s);
        }
    }
    Ok(())
}

/// Writes generator and discriminator parameters plus `extra` config entries.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    params: &HmnParams<T>,
    disc: &Discriminator<T>,
    extra: &[(String, String)],
) -> Result<()> {
    let disc_hidden = disc.layout.encoder.hidden();
    let mut config = config_pairs(&params.config, disc_hidden);
    config.extend(extra.iter().cloned());
    let tensors = store_tensors(&params.store).chain(store_tensors(&disc.store)).collect();
    let file = File::create(path)?;
    write_checkpoint(BufWriter::new(file), &Checkpoint { config, tensors })
}

/// Rebuilds the generator and discriminator stored at `path`.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(HmnParams<T>, Discriminator<T>, Checkpoint)> {
    let ckpt = read_checkpoint(BufReader::new(File::open(path)?))?;
    let cfg = ckpt.model_config()?;
    let mut params = HmnParams::new(cfg, 0)?;
    load_store(&mut params.store, &ckpt)?;
    let disc_hidden: usize = ckpt.parse("disc_hidden")?;
    let mut disc = Discriminator::new(cfg.dim, cfg.width(), disc_hidden, 0)?;
    load_store(&mut disc.store, &ckpt)?;
    let expected = params.store.len() + disc.store.len();
    if ckpt.tensors.len() != expected {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, model has {expected}",
            ckpt.tensors.len()
        )));
    }
    Ok((params, disc, ckpt))
}

//! `FGR1` files: magic, `u32` version, `K`, `d`, `Δ`, then per episode
//! `u32 id`, `u32 T`, `u8 label`, `T·K·d` frame values and `T·K·d` future
//! values, all little-endian `f32`, until end of file.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::data::{Episode, Label};
use crate::error::{Error, Result};
use crate::memory::FeatureGrid;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"FGR1";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecordHeader {
    pub patches: usize,
    pub dim: usize,
    pub delta: usize,
}

fn put_u32<W: Write>(w: &mut W, n: usize) -> Result<()> {
    let v = u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_grid<W: Write, T: Scalar>(w: &mut W, g: &FeatureGrid<T>, h: &RecordHeader) -> Result<()> {
    if g.patches() != h.patches || g.dim() != h.dim {
        return Err(Error::Format(format!(
            "grid is {}x{}, header declares {}x{}",
            g.patches(),
            g.dim(),
            h.patches,
            h.dim
        )));
    }
    for &x in g.data() {
        w.write_all(&(x.to_f64_lossy() as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Writes `episodes`; returns how many were written.
pub fn write_records<W: Write, T: Scalar>(mut w: W, header: &RecordHeader, episodes: &[Episode<T>]) -> Result<usize> {
    w.write_all(MAGIC)?;
    put_u32(&mut w, VERSION as usize)?;
    put_u32(&mut w, header.patches)?;
    put_u32(&mut w, header.dim)?;
    put_u32(&mut w, header.delta)?;
    for e in episodes {
        if e.frames.len() != e.futures.len() {
            return Err(Error::Format(format!("episode {} has unequal frames and futures", e.id)));
        }
        put_u32(&mut w, e.id as usize)?;
        put_u32(&mut w, e.len())?;
        w.write_all(&[e.label.class() as u8])?;
        for g in &e.frames {
            put_grid(&mut w, g, header)?;
        }
        for g in &e.futures {
            put_grid(&mut w, g, header)?;
        }
    }
    w.flush()?;
    Ok(episodes.len())
}

pub fn write_records_file<T: Scalar>(path: &Path, header: &RecordHeader, episodes: &[Episode<T>]) -> Result<usize> {
    write_records(BufWriter::new(File::create(path)?), header, episodes)
}

fn eof_is_truncation(e: std::io::Error) -> Error {
    if e.kind() == ErrorKind::UnexpectedEof {
        Error::Format("record file is truncated".into())
    } else {
        Error::Io(e)
    }
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(eof_is_truncation)?;
    Ok(u32::from_le_bytes(b))
}

/// Fills `buf` completely, or returns `false` if the reader is already at end of file.
fn read_block_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) if got == 0 => return Ok(false),
            Ok(0) => return Err(Error::Format("record file is truncated".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

fn get_grids<R: Read, T: Scalar>(r: &mut R, count: usize, h: &RecordHeader) -> Result<Vec<FeatureGrid<T>>> {
    let n = h.patches * h.dim;
    let mut raw = vec![0u8; n * 4];
    (0..count)
        .map(|_| {
            r.read_exact(&mut raw).map_err(eof_is_truncation)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64))
                .collect();
            FeatureGrid::new(h.patches, h.dim, data)
        })
        .collect()
}

/// Reads a whole stream; any error discards everything read so far.
pub fn read_records<R: Read, T: Scalar>(mut r: R) -> Result<(RecordHeader, Vec<Episode<T>>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof_is_truncation)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad record magic {magic:?}")));
    }
    let version = get_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported record version {version}")));
    }
    let header = RecordHeader {
        patches: get_u32(&mut r)? as usize,
        dim: get_u32(&mut r)? as usize,
        delta: get_u32(&mut r)? as usize,
    };
    if header.patches == 0 || header.dim == 0 {
        return Err(Error::Format("header declares an empty grid".into()));
    }
    let mut episodes = Vec::new();
    let mut id_bytes = [0u8; 4];
    while read_block_or_eof(&mut r, &mut id_bytes)? {
        let id = u32::from_le_bytes(id_bytes);
        let len = get_u32(&mut r)? as usize;
        let mut label = [0u8; 1];
        r.read_exact(&mut label).map_err(eof_is_truncation)?;
        let label = match label[0] {
            0 => Label::Real,
            1 => Label::Fake,
            b => return Err(Error::Format(format!("episode {id} has label byte {b}"))),
        };
        let frames = get_grids(&mut r, len, &header)?;
        let futures = get_grids(&mut r, len, &header)?;
        episodes.push(Episode {
            id,
            label,
            frames,
            futures,
            source: "fgr1".into(),
        });
    }
    Ok((header, episodes))
}

pub fn read_records_file<T: Scalar>(path: &Path) -> Result<(RecordHeader, Vec<Episode<T>>)> {
    let (h, mut eps) = read_records(BufReader::new(File::open(path)?))?;
    let tag = path.display().to_string();
    eps.iter_mut().for_each(|e| e.source = tag.clone());
    Ok((h, eps))
}

/// Reads every `.fgr` file of `dir` in file-name order; headers must agree.
pub fn read_records_dir<T: Scalar>(dir: &Path) -> Result<(RecordHeader, Vec<Episode<T>>)> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_file() && p.extension().is_some_and(|e| e == "fgr") {
            paths.push(p);
        }
    }
    paths.sort();
    let mut header = None;
    let mut all = Vec::new();
    for p in &paths {
        let (h, eps) = read_records_file(p)?;
        match header {
            None => header = Some(h),
            Some(prev) if prev != h => {
                return Err(Error::Format(format!(
                    "{} declares {h:?}, earlier files declare {prev:?}",
                    p.display()
                )))
            }
            _ => {}
        }
        all.extend(eps);
    }
    let header = header.ok_or_else(|| Error::Format(format!("no .fgr files in {}", dir.display())))?;
    Ok((header, all))
}

/// Reads a file, or every `.fgr` file when `path` is a directory.
pub fn read_records_path<T: Scalar>(path: &Path) -> Result<(RecordHeader, Vec<Episode<T>>)> {
    if path.is_dir() {
        read_records_dir(path)
    } else {
        read_records_file(path)
    }
}

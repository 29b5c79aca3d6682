//! Parameter files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! b"SESAMECK" version count
//! count × (name_len name_bytes rank dims…)      manifest
//! count × tensor                                 Tensor::write_to, same order
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SESAMECK";
const VERSION: u32 = 1;

/// Names and shapes, in file order.
pub type Manifest = Vec<(String, Vec<usize>)>;

pub fn manifest(params: &ParamSet) -> Manifest {
    params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect()
}

fn put_u32<W: Write + ?Sized>(w: &mut W, x: usize) -> Result<()> {
    let x = u32::try_from(x).map_err(|_| Error::Format(format!("{x} does not fit in u32")))?;
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf) as usize)
}

pub fn write_checkpoint<W: Write + ?Sized>(w: &mut W, params: &ParamSet) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION as usize)?;
    put_u32(w, params.len())?;
    for (name, shape) in manifest(params) {
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(w, shape.len())?;
        for d in shape {
            put_u32(w, d)?;
        }
    }
    for (_, t) in params.iter() {
        t.write_to(w)?;
    }
    Ok(())
}

/// Reads only the manifest.
pub fn read_manifest<R: Read>(r: &mut R) -> Result<Manifest> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = get_u32(r)?;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = get_u32(r)?;
        if len > 1 << 16 {
            return Err(Error::Format(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = get_u32(r)?;
        if rank > 8 {
            return Err(Error::Format(format!("implausible rank {rank} for {name}")));
        }
        let shape = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        out.push((name, shape));
    }
    Ok(out)
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<ParamSet> {
    let manifest = read_manifest(r)?;
    let mut params = ParamSet::new();
    for (name, shape) in manifest {
        let t = Tensor::read_from(r)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "{name}: manifest shape {shape:?} but stored tensor {:?}",
                t.shape()
            )));
        }
        params.insert(name, t);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", rest.len())));
    }
    Ok(params)
}

pub fn save(path: &Path, params: &ParamSet) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_checkpoint(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamSet> {
    read_checkpoint(&mut BufReader::new(fs::File::open(path)?))
}

/// Every name/shape disagreement between what a model expects and what a
/// file holds, one per line. Empty when they match.
pub fn shape_report(expected: &Manifest, found: &Manifest) -> String {
    let mut lines = Vec::new();
    for (name, shape) in expected {
        match found.iter().find(|(n, _)| n == name) {
            None => lines.push(format!("{name}: expected {shape:?}, missing from checkpoint")),
            Some((_, s)) if s != shape => lines.push(format!("{name}: expected {shape:?}, checkpoint has {s:?}")),
            Some(_) => {}
        }
    }
    for (name, shape) in found {
        if !expected.iter().any(|(n, _)| n == name) {
            lines.push(format!("{name}: unexpected parameter {shape:?} in checkpoint"));
        }
    }
    lines.join("\n")
}

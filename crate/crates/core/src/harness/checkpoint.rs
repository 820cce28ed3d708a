//! Binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "GFRCKPT1"
//! config_len   u32      followed by the run config as UTF-8 key = value text
//! count        u32      number of tensors
//! per tensor:  u32 name_len, name bytes, u32 rank, rank x u64 dims,
//!              product(dims) x f64 values
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Detector;
use crate::tensor::{ParamStore, ParamTensor};

pub const MAGIC: &[u8; 8] = b"GFRCKPT1";

pub fn write_checkpoint<W: Write>(mut w: W, config: &RunConfig, store: &ParamStore) -> Result<()> {
    w.write_all(MAGIC)?;
    let text = config.to_text();
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for p in store.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
        for &d in &p.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &p.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut b = vec![0; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::format("checkpoint", "string is not UTF-8"))
}

/// Raw contents of a checkpoint.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(RunConfig, Vec<ParamTensor>)> {
    let mut magic = [0; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let len = read_u32(&mut r)? as usize;
    let config: RunConfig = read_string(&mut r, len)?.parse()?;
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let name = read_string(&mut r, len)?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0; n * 8];
        r.read_exact(&mut bytes)?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(ParamTensor::from_values(name, &shape, values)?);
    }
    Ok((config, tensors))
}

/// Rebuilds the detector described by the checkpoint and loads its weights.
/// Every tensor of the model must be present with the recorded shape.
pub fn load_detector<R: Read>(r: R) -> Result<(RunConfig, Detector)> {
    let (config, tensors) = read_checkpoint(r)?;
    let mut detector = Detector::new(config.model_config(), config.seed)?;
    if tensors.len() != detector.store.len() {
        return Err(Error::format(
            "checkpoint",
            format!("{} tensors, model has {}", tensors.len(), detector.store.len()),
        ));
    }
    for t in tensors {
        let id = detector
            .store
            .id(&t.name)
            .ok_or_else(|| Error::format("checkpoint", format!("unknown tensor {}", t.name)))?;
        let p = detector.store.get_mut(id);
        if p.shape != t.shape {
            return Err(Error::format(
                "checkpoint",
                format!("{}: shape {:?}, model expects {:?}", t.name, t.shape, p.shape),
            ));
        }
        p.values = t.values;
        p.zero_grad();
    }
    Ok((config, detector))
}

pub fn save(path: &Path, config: &RunConfig, store: &ParamStore) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, config, store)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(RunConfig, Detector)> {
    load_detector(fs::File::open(path).map(std::io::BufReader::new)?)
}

//! Flat binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"OACK"
//! version  u32
//! step     u64       optimizer step counter
//! count    u64       number of records
//! record*  name_len u32, name bytes (UTF-8), rank u32, dims u64 * rank,
//!          payload f64 * prod(dims)
//! ```
//!
//! Trainable parameters are followed by two records holding their Adam
//! moments, named `adam.m/<name>` and `adam.v/<name>`; non-trainable
//! entries (running statistics) have none.

use std::io::{Read, Write};
use std::path::Path;

use super::params::{Parameter, ParameterStore};
use super::tensor::Tensor;
use super::EngineError;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"OACK";
const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";

fn write_record(w: &mut impl Write, name: &str, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint(store: &ParameterStore, w: &mut impl Write) -> Result<(), EngineError> {
    let mut count = 0u64;
    for (_, p) in store.iter() {
        count += if p.trainable { 3 } else { 1 };
    }
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&store.step().to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    for (name, p) in store.iter() {
        write_record(w, name, &p.value)?;
        if p.trainable {
            write_record(w, &format!("{MOMENT1}{name}"), &p.first_moment)?;
            write_record(w, &format!("{MOMENT2}{name}"), &p.second_moment)?;
        }
    }
    Ok(())
}

fn bad(msg: impl Into<String>) -> EngineError {
    EngineError::Checkpoint(msg.into())
}

fn read_exact<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N], EngineError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| bad(format!("truncated {what}: {e}")))?;
    Ok(buf)
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ParameterStore, EngineError> {
    if &read_exact::<4>(r, "magic")? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(read_exact(r, "version")?);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let step = u64::from_le_bytes(read_exact(r, "step")?);
    let count = u64::from_le_bytes(read_exact(r, "record count")?);
    let mut records: Vec<(String, Tensor)> = Vec::new();
    for i in 0..count {
        let len = u32::from_le_bytes(read_exact(r, "name length")?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| bad(format!("record {i}: truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| bad(format!("record {i}: name is not UTF-8")))?;
        let rank = u32::from_le_bytes(read_exact(r, "rank")?) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(read_exact(r, "dimension")?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(read_exact(r, "payload")?));
        }
        records.push((name, Tensor::new(shape, data)?));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(bad("trailing bytes after last record"));
    }

    let mut store = ParameterStore::new();
    let mut moments: std::collections::HashMap<String, Tensor> = records
        .iter()
        .filter(|(n, _)| n.starts_with(MOMENT1) || n.starts_with(MOMENT2))
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    for (name, value) in records {
        if name.starts_with(MOMENT1) || name.starts_with(MOMENT2) {
            continue;
        }
        let m = moments.remove(&format!("{MOMENT1}{name}"));
        let v = moments.remove(&format!("{MOMENT2}{name}"));
        let param = match (m, v) {
            (Some(m), Some(v)) => {
                if m.shape() != value.shape() || v.shape() != value.shape() {
                    return Err(bad(format!("moment shapes of `{name}` do not match")));
                }
                Parameter { value, first_moment: m, second_moment: v, trainable: true }
            }
            (None, None) => {
                let shape = value.shape().to_vec();
                Parameter {
                    value,
                    first_moment: Tensor::zeros(&shape),
                    second_moment: Tensor::zeros(&shape),
                    trainable: false,
                }
            }
            _ => return Err(bad(format!("`{name}` has only one Adam moment"))),
        };
        store.insert_raw(name, param);
    }
    if let Some(orphan) = moments.keys().next() {
        return Err(bad(format!("moment record `{orphan}` has no parameter")));
    }
    store.set_step(step);
    Ok(store)
}

/// Writes to a temporary sibling and renames it into place.
pub fn save_checkpoint(store: &ParameterStore, path: &Path) -> Result<(), EngineError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        write_checkpoint(store, &mut f)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterStore, EngineError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut f)
}

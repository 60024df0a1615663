//! Binary parameter checkpoints.
//!
//! Layout: magic `SRL1`, format version (u32), record count (u32), then per
//! record the name length (u32) and UTF-8 name, the rank (u32), each dim
//! (u32) and the values as little-endian f64. Batch-norm running statistics
//! are stored as two records, `<name>.mean` and `<name>.var`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::layers::Module;

const MAGIC: &[u8; 4] = b"SRL1";
const VERSION: u32 = 1;

struct Record {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| TensorError::Checkpoint(format!("{v} does not fit u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| TensorError::Checkpoint(format!("truncated file: {e}")))?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn write_record(w: &mut impl Write, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    put_u32(w, name.len())?;
    w.write_all(name.as_bytes())?;
    put_u32(w, shape.len())?;
    for &d in shape {
        put_u32(w, d)?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write(module: &dyn Module, w: &mut impl Write) -> Result<()> {
    let params = module.params();
    let buffers = module.buffers();
    w.write_all(MAGIC)?;
    put_u32(w, VERSION as usize)?;
    put_u32(w, params.len() + 2 * buffers.len())?;
    for (name, p) in &params {
        write_record(w, name, p.shape(), p.data())?;
    }
    for (name, b) in &buffers {
        let (mean, var) = b.snapshot();
        write_record(w, &format!("{name}.mean"), &[mean.len()], &mean)?;
        write_record(w, &format!("{name}.var"), &[var.len()], &var)?;
    }
    Ok(())
}

fn read_records(r: &mut impl Read) -> Result<HashMap<String, Record>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| TensorError::Checkpoint("file too short for header".into()))?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION as usize {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = get_u32(r)?;
    let mut out = HashMap::with_capacity(count);
    for _ in 0..count {
        let len = get_u32(r)?;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| TensorError::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| TensorError::Checkpoint("name is not UTF-8".into()))?;
        let rank = get_u32(r)?;
        let shape = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)
                .map_err(|e| TensorError::Checkpoint(format!("truncated values of `{name}`: {e}")))?;
            data.push(f64::from_le_bytes(b));
        }
        out.insert(name, Record { shape, data });
    }
    Ok(out)
}

/// Loads values into `module`; every parameter must be present with a
/// matching shape.
pub fn read(module: &mut dyn Module, r: &mut impl Read) -> Result<()> {
    let mut recs = read_records(r)?;
    let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
        let rec = recs
            .remove(name)
            .ok_or_else(|| TensorError::Checkpoint(format!("missing tensor `{name}`")))?;
        if rec.shape != shape {
            return Err(TensorError::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                rec.shape
            )));
        }
        Ok(rec.data)
    };
    let mut staged = Vec::new();
    for (name, p) in module.params() {
        staged.push(take(&name, p.shape())?);
    }
    let mut stats = Vec::new();
    for (name, b) in module.buffers() {
        let c = b.channels();
        stats.push((take(&format!("{name}.mean"), &[c])?, take(&format!("{name}.var"), &[c])?));
    }
    for ((_, p), data) in module.params_mut().into_iter().zip(staged) {
        p.data_mut().copy_from_slice(&data);
    }
    for ((_, b), (m, v)) in module.buffers().into_iter().zip(stats) {
        b.set(m, v);
    }
    Ok(())
}

pub fn save(module: &dyn Module, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write(module, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load(module: &mut dyn Module, path: &Path) -> Result<()> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read(module, &mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{BatchNorm, Dense};
    use rand::SeedableRng;

    #[test]
    fn round_trip_is_bitwise() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let d = Dense::new(4, 3, &mut rng);
        let mut buf = Vec::new();
        write(&d, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"SRL1");
        let mut e = Dense::new(4, 3, &mut rng);
        assert_ne!(d.checksum(), e.checksum());
        read(&mut e, &mut buf.as_slice()).unwrap();
        assert_eq!(d.w, e.w);
        assert_eq!(d.b, e.b);
    }

    #[test]
    fn running_stats_round_trip() {
        let bn = BatchNorm::new(2);
        bn.running.set(vec![0.5, -1.0], vec![2.0, 3.0]);
        let mut buf = Vec::new();
        write(&bn, &mut buf).unwrap();
        let mut other = BatchNorm::new(2);
        read(&mut other, &mut buf.as_slice()).unwrap();
        assert_eq!(other.running.snapshot(), bn.running.snapshot());
    }

    #[test]
    fn corrupt_inputs_are_checkpoint_errors() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut d = Dense::new(2, 2, &mut rng);
        assert!(matches!(read(&mut d, &mut &b"XXXX"[..]), Err(TensorError::Checkpoint(_))));
        let mut buf = Vec::new();
        write(&d, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read(&mut d, &mut buf.as_slice()), Err(TensorError::Checkpoint(_))));
        let mut small = Vec::new();
        write(&Dense::new(3, 2, &mut rng), &mut small).unwrap();
        assert!(matches!(read(&mut d, &mut small.as_slice()), Err(TensorError::Checkpoint(_))));
    }
}

//! Checkpoint container: magic `HMOE`, format version, then one record per
//! parameter (name, extents, f32 values row-major). Everything little-endian.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Parameter;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"HMOE";
const VERSION: u32 = 1;

pub fn save_checkpoint<T: Scalar>(params: &[&Parameter<T>], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(params.len())
        .map_err(|_| Error::Checkpoint("too many parameters".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for p in params {
        let name = p.name().as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| {
            Error::Checkpoint(format!("parameter name too long: {}", p.name()))
        })?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.shape();
        let rank = u8::try_from(shape.len())
            .map_err(|_| Error::Checkpoint(format!("rank too large for {}", p.name())))?;
        w.write_all(&[rank])?;
        for &e in &shape {
            let e = u32::try_from(e)
                .map_err(|_| Error::Checkpoint(format!("extent too large in {}", p.name())))?;
            w.write_all(&e.to_le_bytes())?;
        }
        for v in p.data() {
            w.write_all(&v.as_f32().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load values into an existing parameter set. Names and shapes must match
/// the file exactly in both directions.
pub fn load_checkpoint<T: Scalar>(params: &[&Parameter<T>], path: &Path) -> Result<()> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?} (expected {:?})",
            magic, MAGIC
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {} (expected {})",
            version, VERSION
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut records: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for _ in 0..count {
        let mut nl = [0u8; 2];
        r.read_exact(&mut nl)?;
        let mut name = vec![0u8; u16::from_le_bytes(nl) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut buf = vec![0u8; numel * 4];
        r.read_exact(&mut buf)?;
        let values: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if records.insert(name.clone(), (shape, values)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last record".into()));
    }

    for p in params {
        let Some((shape, values)) = records.remove(p.name()) else {
            return Err(Error::Checkpoint(format!(
                "missing parameter {}",
                p.name()
            )));
        };
        if shape != p.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {}: checkpoint {:?} vs model {:?}",
                p.name(),
                shape,
                p.shape()
            )));
        }
        p.set_data(values.into_iter().map(T::from_f32).collect());
    }
    if !records.is_empty() {
        let extra: Vec<&String> = records.keys().collect();
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} unknown parameter(s): {:?}",
            extra.len(),
            extra
        )));
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_names_shapes_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let a = Parameter::<f64>::new("w.a", vec![1.5, -2.25, 0.0, 8.0], &[2, 2]);
        let b = Parameter::<f64>::new("w.b", vec![0.125; 3], &[3]);
        save_checkpoint(&[&a, &b], &path).unwrap();

        let a2 = Parameter::<f64>::new("w.a", vec![0.0; 4], &[2, 2]);
        let b2 = Parameter::<f64>::new("w.b", vec![0.0; 3], &[3]);
        load_checkpoint(&[&a2, &b2], &path).unwrap();
        assert_eq!(a2.data(), a.data());
        assert_eq!(b2.data(), b.data());
    }

    #[test]
    fn header_bytes_match_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = Parameter::<f32>::new("x", vec![1.0], &[1]);
        save_checkpoint(&[&p], &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"HMOE");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        // name record: len 1, "x", rank 1, extent 1, value 1.0f32
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 1);
        assert_eq!(bytes[14], b'x');
        assert_eq!(bytes[15], 1);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1);
        assert_eq!(
            f32::from_le_bytes(bytes[20..24].try_into().unwrap()),
            1.0f32
        );
        assert_eq!(bytes.len(), 24);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = Parameter::<f64>::new("w", vec![0.0; 6], &[2, 3]);
        save_checkpoint(&[&p], &path).unwrap();
        let q = Parameter::<f64>::new("w", vec![0.0; 6], &[3, 2]);
        let msg = load_checkpoint(&[&q], &path).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn unknown_and_missing_names_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = Parameter::<f64>::new("w.old", vec![0.0], &[1]);
        save_checkpoint(&[&p], &path).unwrap();
        let q = Parameter::<f64>::new("w.new", vec![0.0], &[1]);
        assert!(load_checkpoint(&[&q], &path).is_err());
    }
}

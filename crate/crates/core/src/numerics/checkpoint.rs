//! Binary parameter container.
//!
//! Layout (little endian): magic `CTPARAMS`, `u32` format version, `u64`
//! entry count, then per entry: `u32` name length, UTF-8 name, `u8` decay
//! flag, `u32` rank, `u64` dims, and the raw `f64` values.

use std::io::{Read, Write};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CTPARAMS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub decay_exempt: bool,
    pub value: Tensor,
}

fn io_err(e: std::io::Error) -> Error {
    Error::Data(format!("parameter container I/O: {e}"))
}

pub fn write_params<W: Write>(mut w: W, store: &ParamStore) -> Result<()> {
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(store.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    for p in store.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(name).map_err(io_err)?;
        w.write_all(&[p.decay_exempt as u8]).map_err(io_err)?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())
            .map_err(io_err)?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
        }
        let mut buf = Vec::with_capacity(p.value.len() * 8);
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io_err)?;
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(io_err)?;
    Ok(buf)
}

pub fn read_params<R: Read>(mut r: R) -> Result<Vec<NamedTensor>> {
    let magic: [u8; 8] = read_exact(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Data("not a parameter container (bad magic)".into()));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "unsupported container version {version}"
        )));
    }
    let count = u64::from_le_bytes(read_exact(&mut r)?) as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Data("parameter name is not UTF-8".into()))?;
        let [flag] = read_exact::<_, 1>(&mut r)?;
        let rank = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(read_exact(&mut r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw).map_err(io_err)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(NamedTensor {
            name,
            decay_exempt: flag != 0,
            value: Tensor::new(shape, data)?,
        });
    }
    Ok(out)
}

/// Overwrites the values in `store` with the container's entries, matched by name.
pub fn load_into(store: &mut ParamStore, entries: Vec<NamedTensor>) -> Result<()> {
    if entries.len() != store.len() {
        return Err(Error::Data(format!(
            "checkpoint holds {} parameters, model expects {}",
            entries.len(),
            store.len()
        )));
    }
    for entry in entries {
        let id = store
            .find(&entry.name)
            .ok_or_else(|| Error::Data(format!("unknown parameter {}", entry.name)))?;
        let param = store.get_mut(id);
        if param.value.shape() != entry.value.shape() {
            return Err(Error::Data(format!(
                "parameter {} has shape {:?}, checkpoint has {:?}",
                entry.name,
                param.value.shape(),
                entry.value.shape()
            )));
        }
        param.value = entry.value;
        param.decay_exempt = entry.decay_exempt;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut store = ParamStore::default();
        store.add(
            "emb",
            Tensor::new(
                vec![2, 3],
                vec![0.1, -2.5e-300, f64::MIN_POSITIVE, 1.0 / 3.0, 7.0, -0.0],
            )
            .unwrap(),
        );
        store.add(
            "ln.bias",
            Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(),
        );
        let mut buf = Vec::new();
        write_params(&mut buf, &store).unwrap();
        let entries = read_params(&buf[..]).unwrap();
        assert_eq!(entries.len(), 2);
        for (e, p) in entries.iter().zip(store.iter()) {
            assert_eq!(e.name, p.name);
            assert_eq!(e.decay_exempt, p.decay_exempt);
            let a: Vec<u64> = e.value.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = p.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_params(&b"NOTMAGIC\x01\0\0\0"[..]).is_err());
        let mut store = ParamStore::default();
        store.add("w", Tensor::zeros(&[4]));
        let mut buf = Vec::new();
        write_params(&mut buf, &store).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_params(&buf[..]).is_err());
    }
}

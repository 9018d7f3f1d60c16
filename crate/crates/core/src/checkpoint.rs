//! Binary checkpoint format, bit-exact round trip.
//!
//! Layout (all integers little-endian):
//!   magic "LEVO" | version u32 | entry count u64 | entries...
//! Each entry:
//!   name len u64 | name bytes | rank u64 | dims u64 x rank | payload f32 x numel

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"LEVO";
pub const VERSION: u32 = 1;

pub fn save_checkpoint(params: &ParamStore<f32>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&t.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(Error::TruncatedPayload(format!(
                "unexpected end of file while reading {what}"
            )));
        }
        filled += n;
    }
    Ok(())
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore<f32>> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut vb = [0u8; 4];
    read_exact(&mut r, &mut vb, "version")?;
    let version = u32::from_le_bytes(vb);
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }

    let count = read_u64(&mut r, "entry count")?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let name_len = read_u64(&mut r, "name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, "name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::invalid(format!("entry {i}: name is not UTF-8")))?;
        let rank = read_u64(&mut r, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r, "dims")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        read_exact(&mut r, &mut payload, &format!("payload of {name}"))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(name, Tensor::from_vec(shape, data)?)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, normal_vec};
    use std::io::{Seek, SeekFrom};

    fn sample_store() -> ParamStore<f32> {
        let mut rng = derive_rng(11, 0);
        let mut ps = ParamStore::new();
        ps.insert(
            "lm.w",
            Tensor::from_vec(vec![3, 4], normal_vec(&mut rng, 12, 1.0)).unwrap(),
        )
        .unwrap();
        ps.insert(
            "dec.b",
            Tensor::from_vec(vec![5], normal_vec(&mut rng, 5, 1.0)).unwrap(),
        )
        .unwrap();
        ps.insert("scalars", Tensor::scalar(0.25)).unwrap();
        ps
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ps = sample_store();
        save_checkpoint(&ps, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(ps.len(), loaded.len());
        for (name, t) in ps.iter() {
            let l = loaded.get(name).unwrap();
            assert_eq!(t.shape(), l.shape());
            assert_eq!(t.to_le_bytes(), l.to_le_bytes(), "{name} not byte-equal");
        }
    }

    #[test]
    fn bad_magic_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&sample_store(), &path).unwrap();
        let mut f = std::fs::OpenOptions::new().write(true).open(&path).unwrap();
        f.seek(SeekFrom::Start(0)).unwrap();
        f.write_all(b"NOPE").unwrap();
        match load_checkpoint(&path) {
            Err(Error::BadMagic) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&sample_store(), &path).unwrap();
        let mut f = std::fs::OpenOptions::new().write(true).open(&path).unwrap();
        f.seek(SeekFrom::Start(4)).unwrap();
        f.write_all(&99u32.to_le_bytes()).unwrap();
        match load_checkpoint(&path) {
            Err(Error::VersionMismatch { found: 99, .. }) => {}
            other => panic!("expected VersionMismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&sample_store(), &path).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        let f = std::fs::OpenOptions::new().write(true).open(&path).unwrap();
        f.set_len(len - 7).unwrap();
        match load_checkpoint(&path) {
            Err(Error::TruncatedPayload(_)) => {}
            other => panic!("expected TruncatedPayload, got {other:?}"),
        }
    }
}

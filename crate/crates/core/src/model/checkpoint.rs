//! Flat binary serialization for parameter sets.
//!
//! Layout: magic `FMPS`, format version (u32), entry count (u32), then per
//! entry a length-prefixed UTF-8 name, rank, dims, and raw f64 data. All
//! integers and floats little-endian. Entry order is preserved, so equal
//! parameter sets always serialize to identical bytes.

use std::fs;
use std::path::Path;

use fewmark_autodiff::{ParamSet, Tensor};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FMPS";
const VERSION: u32 = 1;

/// Serializes a parameter set to bytes.
pub fn paramset_bytes(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Deserializes a parameter set from bytes produced by [`paramset_bytes`].
pub fn paramset_from_bytes(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::data("checkpoint: bad magic, not a parameter file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::data(format!(
            "checkpoint: unsupported format version {version}"
        )));
    }
    let count = r.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::data("checkpoint: entry name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        params.insert(&name, Tensor::from_vec(&dims, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::data(format!(
            "checkpoint: {} trailing bytes after last entry",
            bytes.len() - r.pos
        )));
    }
    Ok(params)
}

/// Writes a parameter set to disk, creating parent directories as needed.
pub fn save_paramset(path: &Path, params: &ParamSet) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    fs::write(path, paramset_bytes(params)).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a parameter set from disk.
pub fn load_paramset(path: &Path) -> Result<ParamSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    paramset_from_bytes(&bytes)
}

/// Writes a single tensor to disk as a one-entry parameter set.
pub fn save_matrix(path: &Path, matrix: &Tensor) -> Result<()> {
    let mut params = ParamSet::new();
    params.insert("weight", matrix.detach())?;
    save_paramset(path, &params)
}

/// Reads a tensor written by [`save_matrix`].
pub fn load_matrix(path: &Path) -> Result<Tensor> {
    let params = load_paramset(path)?;
    if params.len() != 1 {
        return Err(Error::data(format!(
            "checkpoint: expected a single-tensor file, found {} entries",
            params.len()
        )));
    }
    Ok(params.expect("weight")?.clone())
}

/// Serializes a single tensor to bytes.
pub fn matrix_bytes(matrix: &Tensor) -> Vec<u8> {
    let mut params = ParamSet::new();
    params.insert("weight", matrix.detach()).expect("fresh set");
    paramset_bytes(&params)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::data(format!(
                "checkpoint: truncated file, wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fewmark_autodiff::{randn_init, Rng};

    fn sample_params() -> ParamSet {
        let mut rng = Rng::new(77);
        let mut p = ParamSet::new();
        p.insert("layer.weight", randn_init(&[3, 4], 4, &mut rng).unwrap())
            .unwrap();
        p.insert("layer.bias", Tensor::zeros(&[3]).unwrap()).unwrap();
        p.insert("scalar", Tensor::scalar(-2.5).unwrap()).unwrap();
        p
    }

    #[test]
    fn roundtrip_preserves_names_shapes_and_bits() {
        let p = sample_params();
        let back = paramset_from_bytes(&paramset_bytes(&p)).unwrap();
        assert!(p.bit_eq(&back));
        assert_eq!(
            p.names().collect::<Vec<_>>(),
            back.names().collect::<Vec<_>>()
        );
    }

    #[test]
    fn serialization_is_byte_stable() {
        let p = sample_params();
        assert_eq!(paramset_bytes(&p), paramset_bytes(&p));
        let back = paramset_from_bytes(&paramset_bytes(&p)).unwrap();
        assert_eq!(paramset_bytes(&p), paramset_bytes(&back));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.fmps");
        let p = sample_params();
        save_paramset(&path, &p).unwrap();
        assert!(load_paramset(&path).unwrap().bit_eq(&p));
    }

    #[test]
    fn matrix_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("detectors.fmps");
        let m = Tensor::from_vec(&[2, 3], vec![1.0, -1.0, 0.5, 0.25, 4.0, 9.0]).unwrap();
        save_matrix(&path, &m).unwrap();
        assert!(load_matrix(&path).unwrap().bit_eq(&m));
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = paramset_bytes(&sample_params());
        bytes[0] = b'X';
        assert!(paramset_from_bytes(&bytes).is_err());
    }

    #[test]
    fn truncation_rejected() {
        let bytes = paramset_bytes(&sample_params());
        for cut in [3, 9, 15, bytes.len() - 1] {
            assert!(paramset_from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = paramset_bytes(&sample_params());
        bytes.push(0);
        assert!(paramset_from_bytes(&bytes).is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_paramset(Path::new("/nonexistent/params.fmps")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}

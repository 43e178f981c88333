//! Versioned binary parameter file.
//!
//! Layout (little endian): magic `M3TPARAM`, `u32` version, `u32` entry
//! count, then per entry: `u32` name length, UTF-8 name, `u32` rows,
//! `u32` cols, `rows·cols` `f64` values.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::{NnError, Param, Parameterized, Result, Tensor2};

const MAGIC: &[u8; 8] = b"M3TPARAM";
pub const VERSION: u32 = 1;

pub fn write_params<W: Write>(mut w: W, params: &[&Param]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.value.rows() as u32).to_le_bytes())?;
        w.write_all(&(p.value.cols() as u32).to_le_bytes())?;
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_params<R: Read>(mut r: R) -> Result<BTreeMap<String, Tensor2>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut b = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.insert(name, Tensor2::from_vec(rows, cols, data)?);
    }
    Ok(out)
}

/// Assigns every parameter of `model` from `tensors` by name.
pub fn assign(model: &mut dyn Parameterized, tensors: &BTreeMap<String, Tensor2>) -> Result<()> {
    for p in model.params_mut() {
        let t = tensors
            .get(&p.name)
            .ok_or_else(|| NnError::Checkpoint(format!("missing tensor {}", p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(NnError::ShapeMismatch {
                op: "checkpoint",
                left: p.value.shape(),
                right: t.shape(),
            });
        }
        p.value = t.clone();
    }
    Ok(())
}

pub fn save(path: &Path, model: &dyn Parameterized) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_params(file, &model.params())
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Tensor2>> {
    read_params(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Activation, Mlp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_and_load_by_name() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Mlp::new("m", &[3, 5, 2], Activation::Relu, Activation::Identity, &mut rng);
        let mut b = Mlp::new("m", &[3, 5, 2], Activation::Relu, Activation::Identity, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save(&path, &a).unwrap();
        assign(&mut b, &load(&path).unwrap()).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert_eq!(x.value, y.value);
        }
    }

    #[test]
    fn rejects_garbage() {
        let err = read_params(&b"NOTPARAMxxxxxxxx"[..]).unwrap_err();
        assert!(matches!(err, NnError::Checkpoint(_)));
    }

    #[test]
    fn missing_name_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = Mlp::new("m", &[2, 2], Activation::Relu, Activation::Identity, &mut rng);
        let err = assign(&mut m, &BTreeMap::new()).unwrap_err();
        assert!(err.to_string().contains("m.0.w"));
    }
}

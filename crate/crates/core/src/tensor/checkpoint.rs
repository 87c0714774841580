//! Checkpoints are two files sharing a stem: `<stem>.manifest` lists one
//! `name<TAB>shape<TAB>dtype` line per tensor, and `<stem>.bin` holds the
//! tensors' values as little-endian `f32`, row-major, in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    let s = stem.as_os_str().to_owned();
    let mut m = s.clone();
    m.push(".manifest");
    let mut b = s;
    b.push(".bin");
    (PathBuf::from(m), PathBuf::from(b))
}

pub fn save_checkpoint<T: Real>(params: &ParamStore<T>, stem: &Path) -> Result<()> {
    let (manifest_path, bin_path) = paths(stem);
    let mut manifest = String::new();
    let mut bytes = Vec::with_capacity(params.num_values() * 4);
    for (_, name, t) in params.iter() {
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{}\t{}\tf32\n", name, shape.join(",")));
        for x in t.data() {
            bytes.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))?;
    Ok(())
}

pub fn read_manifest(text: &str) -> Result<Vec<CheckpointEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                message: "expected name, shape and dtype".into(),
            });
        }
        let shape = fields[1]
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        if fields[2] != "f32" {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("unsupported dtype {}", fields[2]),
            });
        }
        out.push(CheckpointEntry {
            name: fields[0].to_string(),
            shape,
            dtype: fields[2].to_string(),
        });
    }
    Ok(out)
}

/// Loads a checkpoint into a fresh store, in manifest order.
pub fn load_checkpoint<T: Real>(stem: &Path) -> Result<ParamStore<T>> {
    let (manifest_path, bin_path) = paths(stem);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let entries = read_manifest(&text)?;
    let total: usize = entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if total * 4 != bytes.len() {
        return Err(Error::Invalid(format!(
            "{} holds {} bytes, manifest needs {}",
            bin_path.display(),
            bytes.len(),
            total * 4
        )));
    }
    let mut store = ParamStore::new();
    let mut offset = 0;
    for e in entries {
        let n: usize = e.shape.iter().product();
        let data = bytes[offset..offset + n * 4]
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        offset += n * 4;
        store.insert(e.name, Tensor::new(e.shape, data)?)?;
    }
    Ok(store)
}

impl<T: Real> ParamStore<T> {
    /// Copies values from `other` for every matching name; names and shapes
    /// must agree exactly.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Invalid(format!(
                "checkpoint has {} tensors, model has {}",
                other.len(),
                self.len()
            )));
        }
        for (_, name, t) in other.iter() {
            let id = self.id(name)?;
            let dst = self.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(Error::shape(
                    "load",
                    format!("`{name}`: {:?} vs {:?}", dst.shape(), t.shape()),
                ));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::<f32>::new();
        s.insert("emb", Tensor::matrix(2, 3, vec![0.1, -0.2, 3.5, 1e-7, 0.0, -9.0]).unwrap())
            .unwrap();
        s.insert("bias", Tensor::row_vector(vec![0.25, 0.5])).unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        save_checkpoint(&s, &a).unwrap();
        let loaded: ParamStore<f32> = load_checkpoint(&a).unwrap();
        assert!(loaded.same_values(&s));
        save_checkpoint(&loaded, &b).unwrap();
        for ext in ["manifest", "bin"] {
            let x = fs::read(dir.path().join(format!("a.{ext}"))).unwrap();
            let y = fs::read(dir.path().join(format!("b.{ext}"))).unwrap();
            assert_eq!(x, y);
        }
        let text = fs::read_to_string(dir.path().join("a.manifest")).unwrap();
        assert_eq!(text, "emb\t2,3\tf32\nbias\t1,2\tf32\n");
    }

    #[test]
    fn truncated_data_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::row_vector(vec![1.0, 2.0])).unwrap();
        let stem = dir.path().join("c");
        save_checkpoint(&s, &stem).unwrap();
        fs::write(dir.path().join("c.bin"), [0u8; 4]).unwrap();
        assert!(load_checkpoint::<f32>(&stem).is_err());
    }
}

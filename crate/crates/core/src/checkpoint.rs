//! Flat binary parameter checkpoints.
//!
//! Layout (all integers little-endian u32, floats little-endian f64):
//!
//! ```text
//! magic "PMCK" | version(=1) | kind_len kind | meta_len meta_json
//! | n_arrays | { name_len name | ndim | dims... | data... } * n_arrays
//! ```
//!
//! The same container serves backbone, evaluator, and prompt-stack
//! parameter sets; `kind` tells them apart.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{named_tensors, Params};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PMCK";
const VERSION: u32 = 1;

pub struct Checkpoint {
    pub kind: String,
    pub meta_json: String,
    pub arrays: Vec<(String, Tensor)>,
}

pub fn save(path: &Path, kind: &str, meta_json: &str, params: &dyn Params) -> Result<()> {
    let arrays = named_tensors(params);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut buf, kind);
    put_str(&mut buf, meta_json);
    buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, t) in &arrays {
        put_str(&mut buf, name);
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path)?;
    let mut cur = Cursor { buf: &buf, pos: 0, path };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {magic:?}, expected {MAGIC:?}",
            path.display()
        )));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version}, expected {VERSION}",
            path.display()
        )));
    }
    let kind = cur.string()?;
    let meta_json = cur.string()?;
    let n = cur.u32()? as usize;
    let mut arrays = Vec::with_capacity(n);
    for _ in 0..n {
        let name = cur.string()?;
        let ndim = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.push((name, Tensor::from_vec(shape, data)));
    }
    Ok(Checkpoint { kind, meta_json, arrays })
}

/// Copies checkpoint arrays into an existing parameter set by name. Every
/// parameter must be present with a matching shape, and every stored array
/// must be consumed.
pub fn restore(params: &mut dyn Params, ckpt: &Checkpoint) -> Result<()> {
    let mut used = vec![false; ckpt.arrays.len()];
    let mut missing = Vec::new();
    params.visit_mut("", &mut |name, t| {
        match ckpt.arrays.iter().position(|(n, _)| n == name) {
            Some(i) => {
                let stored = &ckpt.arrays[i].1;
                assert_eq!(
                    stored.shape(),
                    t.shape(),
                    "checkpoint array '{name}' has shape {:?}, parameter expects {:?}",
                    stored.shape(),
                    t.shape()
                );
                *t = stored.clone();
                used[i] = true;
            }
            None => missing.push(name.to_string()),
        }
    });
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!("checkpoint lacks arrays: {missing:?}")));
    }
    let unused: Vec<&str> =
        ckpt.arrays.iter().zip(&used).filter(|(_, u)| !**u).map(|((n, _), _)| n.as_str()).collect();
    if !unused.is_empty() {
        return Err(Error::Checkpoint(format!("checkpoint has extra arrays: {unused:?}")));
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated, wanted {n} bytes at offset {}, file has {}",
                self.path.display(),
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let b = self.take(len)?;
        String::from_utf8(b.to_vec())
            .map_err(|e| Error::Checkpoint(format!("{}: bad utf8: {e}", self.path.display())))
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

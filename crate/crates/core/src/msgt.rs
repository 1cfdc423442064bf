//! MSGT tensor files and named-tensor directories.
//!
//! Layout: magic `MSGT`, u32 version (1), u32 rank, rank × u64 dims, u8 dtype
//! (0 = f32, 1 = f64), then the little-endian row-major payload.
//! A directory of tensors carries `manifest.txt` with one `name<TAB>file` line per entry.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Real, Tensor};

const MAGIC: &[u8; 4] = b"MSGT";
const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.txt";

pub fn encode<T: Real>(t: &Tensor<T>, dtype: Dtype) -> Vec<u8> {
    let width = if dtype == Dtype::F32 { 4 } else { 8 };
    let mut buf = Vec::with_capacity(13 + 8 * t.rank() + width * t.numel());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    buf.push(dtype as u8);
    for &v in t.data() {
        match dtype {
            Dtype::F32 => buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            Dtype::F64 => buf.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
    buf
}

/// Decodes a tensor, converting from the stored dtype to `T`.
pub fn decode<T: Real>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut r = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if r.len() < n {
            return Err(bad("truncated"));
        }
        let (head, tail) = r.split_at(n);
        r = tail;
        Ok(head)
    };
    if take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    if rank == 0 || rank > 8 {
        return Err(bad(&format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(8)?.try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| bad("dimension overflow"))?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("dimension overflow"))?;
    let dtype = take(1)?[0];
    let data: Vec<T> = match dtype {
        0 => take(numel.checked_mul(4).ok_or_else(|| bad("size overflow"))?)?
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect(),
        1 => take(numel.checked_mul(8).ok_or_else(|| bad("size overflow"))?)?
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        other => return Err(bad(&format!("unknown dtype tag {other}"))),
    };
    if !r.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Tensor::new(&shape, data).map_err(|e| bad(&e.to_string()))
}

pub fn write<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    write_as(path, t, T::DTYPE)
}

pub fn write_as<T: Real>(path: &Path, t: &Tensor<T>, dtype: Dtype) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(t, dtype)).map_err(|e| Error::io(path, e))
}

pub fn read<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Writes every tensor as `<name>.msgt` plus a manifest. Names may not contain path separators.
pub fn write_dir<T: Real>(dir: &Path, tensors: &BTreeMap<String, Tensor<T>>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (name, t) in tensors {
        if name.is_empty() || name.contains(['/', '\\', '\t', '\n']) {
            return Err(Error::config(format!("invalid tensor name {name:?}")));
        }
        let file = format!("{name}.msgt");
        write(&dir.join(&file), t)?;
        manifest.push_str(&format!("{name}\t{file}\n"));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

pub fn read_dir<T: Real>(dir: &Path) -> Result<BTreeMap<String, Tensor<T>>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (name, file) = line.split_once('\t').ok_or_else(|| Error::Format {
            path: path.clone(),
            reason: format!("line {} is not `name<TAB>file`", lineno + 1),
        })?;
        if file.contains(['/', '\\']) {
            return Err(Error::Format {
                path: path.clone(),
                reason: format!("entry {name} points outside the directory"),
            });
        }
        out.insert(name.to_string(), read(&dir.join(file))?);
    }
    Ok(out)
}

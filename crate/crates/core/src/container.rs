//! Binary container shared by clip frames and checkpoints.
//!
//! Layout (little-endian): magic `MV4D`, version `u32`, then named arrays
//! until end of file. Each array is: name length `u32`, UTF-8 name bytes,
//! dtype code `u8`, rank `u32`, `rank` extents as `u64`, raw element data.
//!
//! Also hosts the `key=value` manifest reader/writer used next to blobs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"MV4D";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BlobError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad magic, not an MV4D container")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated container")]
    Truncated,
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("array `{0}` not found")]
    Missing(String),
    #[error("array `{name}` has type {found}, expected {expected}")]
    WrongType { name: String, found: &'static str, expected: &'static str },
    #[error("array `{name}` has shape {found:?}, expected {expected:?}")]
    WrongShape { name: String, found: Vec<usize>, expected: Vec<usize> },
    #[error("manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U32(Vec<u32>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl ArrayData {
    fn code(&self) -> u8 {
        match self {
            ArrayData::F64(_) => 0,
            ArrayData::U32(_) => 1,
            ArrayData::U64(_) => 2,
            ArrayData::U8(_) => 3,
        }
    }

    fn type_name(&self) -> &'static str {
        match self {
            ArrayData::F64(_) => "f64",
            ArrayData::U32(_) => "u32",
            ArrayData::U64(_) => "u64",
            ArrayData::U8(_) => "u8",
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::U32(v) => v.len(),
            ArrayData::U64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

/// An ordered collection of named arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Blob {
    pub arrays: Vec<NamedArray>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BlobError> {
        let end = self.pos.checked_add(n).ok_or(BlobError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(BlobError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, BlobError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, BlobError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

impl Blob {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: impl Into<String>, shape: &[usize], data: ArrayData) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.push(NamedArray { name: name.into(), shape: shape.to_vec(), data });
    }

    pub fn put_f64(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) {
        self.push(name, shape, ArrayData::F64(data));
    }

    pub fn put_u32(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<u32>) {
        self.push(name, shape, ArrayData::U32(data));
    }

    pub fn put_u64(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<u64>) {
        self.push(name, shape, ArrayData::U64(data));
    }

    pub fn put_u8(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<u8>) {
        self.push(name, shape, ArrayData::U8(data));
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray, BlobError> {
        self.arrays.iter().find(|a| a.name == name).ok_or_else(|| BlobError::Missing(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|a| a.name.as_str())
    }

    fn wrong(a: &NamedArray, expected: &'static str) -> BlobError {
        BlobError::WrongType { name: a.name.clone(), found: a.data.type_name(), expected }
    }

    pub fn f64s(&self, name: &str) -> Result<(&[usize], &[f64]), BlobError> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::F64(v) => Ok((&a.shape, v)),
            _ => Err(Self::wrong(a, "f64")),
        }
    }

    pub fn u32s(&self, name: &str) -> Result<(&[usize], &[u32]), BlobError> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::U32(v) => Ok((&a.shape, v)),
            _ => Err(Self::wrong(a, "u32")),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<(&[usize], &[u64]), BlobError> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::U64(v) => Ok((&a.shape, v)),
            _ => Err(Self::wrong(a, "u64")),
        }
    }

    pub fn u8s(&self, name: &str) -> Result<(&[usize], &[u8]), BlobError> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::U8(v) => Ok((&a.shape, v)),
            _ => Err(Self::wrong(a, "u8")),
        }
    }

    /// `f64` array that must have exactly `shape`.
    pub fn f64s_shaped(&self, name: &str, shape: &[usize]) -> Result<&[f64], BlobError> {
        let (s, v) = self.f64s(name)?;
        if s != shape {
            return Err(BlobError::WrongShape { name: name.into(), found: s.to_vec(), expected: shape.to_vec() });
        }
        Ok(v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.push(a.data.code());
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &e in &a.shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            match &a.data {
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BlobError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(BlobError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(BlobError::UnsupportedVersion(version));
        }
        let mut blob = Blob::new();
        while !r.done() {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| BlobError::Truncated)?;
            let code = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let data = match code {
                0 => ArrayData::F64(r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => ArrayData::U32(r.take(n * 4)?.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()),
                2 => ArrayData::U64(r.take(n * 8)?.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
                3 => ArrayData::U8(r.take(n)?.to_vec()),
                other => return Err(BlobError::UnknownDtype(other)),
            };
            blob.arrays.push(NamedArray { name, shape, data });
        }
        Ok(blob)
    }

    pub fn save(&self, path: &Path) -> Result<(), BlobError> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, BlobError> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn io_err(path: &Path, source: std::io::Error) -> BlobError {
    BlobError::Io { path: path.display().to_string(), source }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), BlobError> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>, BlobError> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| BlobError::Manifest(format!("line {}: missing `=`", n + 1)))?;
        if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(BlobError::Manifest(format!("line {}: duplicate key `{}`", n + 1, k.trim())));
        }
    }
    Ok(map)
}

pub fn format_key_values(map: &BTreeMap<String, String>) -> String {
    map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

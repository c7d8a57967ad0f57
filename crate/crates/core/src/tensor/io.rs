//! The `FMAP1` tensor file format and plain-text parameter manifests.
//!
//! Layout: `b"FMAP"`, `u8` version (1), `u8` ndim, `ndim` little-endian
//! `u32` dims, then `product(dims)` little-endian `f32` values in row-major
//! order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{FeatureMap, Matrix};
use crate::error::{shape_err, Error, Result};

const MAGIC: &[u8; 4] = b"FMAP";
const VERSION: u8 = 1;

/// A tensor of any rank as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorFile {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(shape_err!("dims {dims:?} do not match {} values", data.len()));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::Format(format!("rank {} too large", dims.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 || &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!("unsupported version {}", bytes[4])));
        }
        let ndim = bytes[5] as usize;
        let header = 6 + 4 * ndim;
        if bytes.len() < header {
            return Err(Error::Format("truncated header".into()));
        }
        let dims: Vec<usize> = bytes[6..header]
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .collect();
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("element count overflows".into()))?;
        let body = &bytes[header..];
        if body.len() != count * 4 {
            return Err(Error::Format(format!(
                "expected {} payload bytes, found {}",
                count * 4,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Ok(Self { dims, data })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn to_feature_map(&self) -> Result<FeatureMap> {
        let dims: [usize; 4] = self
            .dims
            .as_slice()
            .try_into()
            .map_err(|_| shape_err!("expected a rank-4 tensor, got dims {:?}", self.dims))?;
        FeatureMap::new(dims, self.data.clone())
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.dims.as_slice() {
            [r, c] => Matrix::new(*r, *c, self.data.clone()),
            _ => Err(shape_err!("expected a rank-2 tensor, got dims {:?}", self.dims)),
        }
    }
}

impl From<&FeatureMap> for TensorFile {
    fn from(fm: &FeatureMap) -> Self {
        Self {
            dims: fm.dims().to_vec(),
            data: fm.data().to_vec(),
        }
    }
}

impl From<&Matrix> for TensorFile {
    fn from(m: &Matrix) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }
}

/// Parses `name path` lines. Relative paths resolve against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<(String, PathBuf)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(name), Some(file), None) => entries.push((name.to_string(), base.join(file))),
            _ => {
                return Err(Error::Format(format!(
                    "{}:{}: expected `name path`",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    Ok(entries)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[(String, PathBuf)]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for (name, file) in entries {
        text.push_str(name);
        text.push(' ');
        text.push_str(&file.to_string_lossy());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Named tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, TensorFile>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: TensorFile) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&TensorFile> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn feature_map(&self, name: &str) -> Result<FeatureMap> {
        self.get(name)?.to_feature_map()
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        self.get(name)?.to_matrix()
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get(name)?.data.clone())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let mut store = Self::new();
        for (name, path) in read_manifest(manifest)? {
            store.insert(name, TensorFile::read(&path)?);
        }
        Ok(store)
    }

    /// Writes one `<name>.fmap` per tensor into `dir` plus a manifest named `manifest`.
    pub fn save(&self, dir: impl AsRef<Path>, manifest: &str) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let file = PathBuf::from(format!("{name}.fmap"));
            t.write(dir.join(&file))?;
            entries.push((name.clone(), file));
        }
        let path = dir.join(manifest);
        write_manifest(&path, &entries)?;
        Ok(path)
    }
}

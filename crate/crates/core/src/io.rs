//! MTX1 matrix files and JSON layer manifests.
//!
//! MTX1 layout: 4-byte magic `MTX1`, `rows: u32` LE, `cols: u32` LE, then
//! `rows·cols` `f64` LE in row-major order. Total length is exactly
//! `12 + 8·rows·cols` bytes.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: [u8; 4] = *b"MTX1";
pub const HEADER_LEN: u64 = 12;

pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN as usize + 8 * m.data().len());
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Parses an MTX1 byte buffer; `path` only labels errors.
pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<Matrix> {
    let label = || path.to_path_buf();
    if bytes.len() < HEADER_LEN as usize {
        return Err(Error::Truncated { path: label(), expected: HEADER_LEN, actual: bytes.len() as u64 });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { path: label(), found: magic });
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as u64;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as u64;
    let expected = HEADER_LEN + 8 * rows * cols;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(Error::Truncated { path: label(), expected, actual });
    }
    if actual > expected {
        return Err(Error::SizeMismatch { path: label(), expected, actual });
    }
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidShape { rows: rows as usize, cols: cols as usize, reason: "empty matrix file" });
    }
    let mut data = Vec::with_capacity((rows * cols) as usize);
    for (index, chunk) in bytes[HEADER_LEN as usize..].chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFinitePayload { path: label(), index });
        }
        data.push(v);
    }
    Matrix::from_vec(rows as usize, cols as usize, data)
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::other("path has no file name")))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    write_atomic(path.as_ref(), &encode_matrix(m))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub before_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub after_path: Option<String>,
}

/// `{"layers": [{"name", "before_path", "after_path"}], "metadata": {}}`.
/// Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub layers: Vec<LayerEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl Manifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }
}

#[derive(Debug, Clone)]
pub struct LoadedLayer {
    pub name: String,
    pub before: Matrix,
    pub after: Option<Matrix>,
}

/// A validated manifest with every referenced matrix loaded.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub manifest: Manifest,
    pub base_dir: PathBuf,
    pub layers: Vec<LoadedLayer>,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() { p.to_path_buf() } else { base.join(p) }
}

/// Parses and validates a manifest. Either every layer loads or an error is
/// returned; nothing partial escapes.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<LoadedManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();

    let mut seen = HashSet::new();
    for layer in &manifest.layers {
        if layer.name.is_empty() {
            return Err(Error::Manifest("layer with empty name".into()));
        }
        if !seen.insert(layer.name.as_str()) {
            return Err(Error::Manifest(format!("duplicate layer name '{}'", layer.name)));
        }
    }
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        let before = read_matrix(resolve(&base_dir, &entry.before_path))?;
        let after = match &entry.after_path {
            Some(p) => Some(read_matrix(resolve(&base_dir, p))?),
            None => None,
        };
        layers.push(LoadedLayer { name: entry.name.clone(), before, after });
    }
    Ok(LoadedManifest { manifest, base_dir, layers })
}

/// Named `ΔW = after − before`, in manifest order.
#[derive(Debug, Clone)]
pub struct DeltaPairs {
    pub deltas: Vec<(String, Matrix)>,
    /// Layers without `after_path`.
    pub skipped: Vec<String>,
}

pub fn delta_pairs(loaded: &LoadedManifest) -> Result<DeltaPairs> {
    let mut deltas = Vec::new();
    let mut skipped = Vec::new();
    for layer in &loaded.layers {
        match &layer.after {
            None => skipped.push(layer.name.clone()),
            Some(after) => {
                if after.shape() != layer.before.shape() {
                    return Err(Error::LayerShapeMismatch {
                        layer: layer.name.clone(),
                        before: layer.before.shape(),
                        after: after.shape(),
                    });
                }
                deltas.push((layer.name.clone(), after.sub(&layer.before)?));
            }
        }
    }
    Ok(DeltaPairs { deltas, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let m = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let bytes = encode_matrix(&m);
        assert_eq!(bytes.len(), 12 + 8 * 6);
        assert_eq!(&bytes[0..4], b"MTX1");
        assert_eq!(&bytes[4..8], &[2, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[3, 0, 0, 0]);
        assert_eq!(&bytes[12..20], &1.0f64.to_le_bytes());
        assert_eq!(&bytes[20..28], &2.0f64.to_le_bytes());
    }

    #[test]
    fn decode_errors_are_distinct() {
        let p = Path::new("mem");
        let good = encode_matrix(&Matrix::identity(2));
        assert!(decode_matrix(&good, p).is_ok());

        let mut bad = good.clone();
        bad[3] = b'2';
        assert!(matches!(decode_matrix(&bad, p), Err(Error::BadMagic { found, .. }) if &found == b"MTX2"));
        assert!(matches!(decode_matrix(&good[..good.len() - 1], p), Err(Error::Truncated { .. })));
        assert!(matches!(decode_matrix(&good[..5], p), Err(Error::Truncated { .. })));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode_matrix(&long, p), Err(Error::SizeMismatch { .. })));
        let mut nan = good;
        nan[20..28].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode_matrix(&nan, p), Err(Error::NonFinitePayload { index: 1, .. })));
    }
}

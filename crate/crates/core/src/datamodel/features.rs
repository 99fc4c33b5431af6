//! Dense feature matrices and the `ICFM` binary container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ICFM" | version: u32 | dim: u32 | rows: u64
//! per row: id_len: u16 | id bytes (UTF-8) | dim x f32
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ICFM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub feature_name: String,
    pub dim: usize,
    pub rows: BTreeMap<String, Vec<f64>>,
}

impl FeatureMatrix {
    pub fn new(feature_name: impl Into<String>, dim: usize) -> Self {
        FeatureMatrix {
            feature_name: feature_name.into(),
            dim,
            rows: BTreeMap::new(),
        }
    }

    /// Builds a matrix from `(id, row)` pairs, validating length and finiteness.
    pub fn from_rows<I, S>(feature_name: impl Into<String>, dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        let mut m = FeatureMatrix::new(feature_name, dim);
        for (id, row) in rows {
            m.insert(id.into(), row)?;
        }
        Ok(m)
    }

    pub fn insert(&mut self, image_id: String, row: Vec<f64>) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::schema(
                format!("feature {} row {}", self.feature_name, image_id),
                format!("expected {} values, found {}", self.dim, row.len()),
            ));
        }
        if let Some(index) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { image_id, index });
        }
        if self.rows.contains_key(&image_id) {
            return Err(Error::schema(
                format!("feature {} row {}", self.feature_name, image_id),
                "duplicate image id",
            ));
        }
        self.rows.insert(image_id, row);
        Ok(())
    }

    pub fn get(&self, image_id: &str) -> Option<&[f64]> {
        self.rows.get(image_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.rows.len() as u64).to_le_bytes())?;
        for (id, row) in &self.rows {
            let bytes = id.as_bytes();
            let len = u16::try_from(bytes.len()).map_err(|_| {
                std::io::Error::new(std::io::ErrorKind::InvalidInput, "image id too long")
            })?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
            for v in row {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    /// Decodes an `ICFM` stream. `locator` names the source in errors.
    pub fn read_from<R: Read>(feature_name: &str, locator: &str, r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let header_err = |what: &str| Error::schema(locator.to_string(), what.to_string());

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| header_err("truncated header"))?;
        if &magic != MAGIC {
            return Err(header_err("bad magic, expected ICFM"));
        }
        let version = read_u32(&mut r).map_err(|_| header_err("truncated header"))?;
        if version != FORMAT_VERSION {
            return Err(header_err(&format!("unsupported format version {version}")));
        }
        let dim = read_u32(&mut r).map_err(|_| header_err("truncated header"))? as usize;
        if dim == 0 {
            return Err(header_err("dim must be positive"));
        }
        let n = read_u64(&mut r).map_err(|_| header_err("truncated header"))?;

        let mut m = FeatureMatrix::new(feature_name, dim);
        let mut buf = vec![0u8; dim * 4];
        for row_idx in 0..n {
            let mut len = [0u8; 2];
            r.read_exact(&mut len).map_err(|_| {
                Error::schema(format!("{locator} row {row_idx}"), "truncated row header")
            })?;
            let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut id).map_err(|_| {
                Error::schema(format!("{locator} row {row_idx}"), "truncated image id")
            })?;
            let id = String::from_utf8(id).map_err(|_| {
                Error::schema(format!("{locator} row {row_idx}"), "image id is not UTF-8")
            })?;
            r.read_exact(&mut buf).map_err(|_| {
                Error::schema(
                    format!("{locator} image {id}"),
                    format!("row shorter than dim {dim}"),
                )
            })?;
            let row = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            m.insert(id, row)?;
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::io(locator, e))? != 0 {
            return Err(header_err("trailing bytes after last row"));
        }
        Ok(m)
    }

    pub fn load(feature_name: &str, path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(feature_name, &path.display().to_string(), file)
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

//! `.embt` embedding fixtures, their JSON manifests, and image vectors.
//!
//! `.embt` layout, little-endian:
//!
//! ```text
//! offset  size          field
//! 0       4             magic "EMBT"
//! 4       4             version u32 = 1
//! 8       4             count u32
//! 12      4             dim u32
//! 16      8·count·dim   f64 rows, row-major
//! ```
//!
//! The manifest lives next to the binary with a `.json` extension.
//! Image vectors (`.vec`) are `"EVEC"`, version u32, dim u32, then `dim` f64 values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    l2, name_key, CategoryLibrary, EmbeddingError, EmbeddingTable, LibrarySource, Result,
    LOAD_NORM_TOLERANCE,
};

pub const EMBT_MAGIC: &[u8; 4] = b"EMBT";
pub const EVEC_MAGIC: &[u8; 4] = b"EVEC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub names: Vec<String>,
    pub dim: usize,
    pub count: usize,
    pub source: LibrarySource,
}

pub fn manifest_path(fixture: &Path) -> PathBuf {
    fixture.with_extension("json")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EmbeddingError + '_ {
    move |source| EmbeddingError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Bounds-checked little-endian reader that reports absolute byte offsets.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(EmbeddingError::Format {
                offset: self.buf.len() as u64,
                message: format!(
                    "truncated while reading {what}: need {n} bytes at offset {}, file ends at {}",
                    self.pos,
                    self.buf.len()
                ),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or_else(|| EmbeddingError::Format {
            offset: self.offset(),
            message: format!("{what} length overflows"),
        })?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let at = self.offset();
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(EmbeddingError::Format {
                offset: at,
                message: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            });
        }
        Ok(())
    }

    pub(crate) fn version(&mut self) -> Result<()> {
        let at = self.offset();
        let v = self.u32("version")?;
        if v != FORMAT_VERSION {
            return Err(EmbeddingError::Format {
                offset: at,
                message: format!("unsupported version {v}"),
            });
        }
        Ok(())
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(EmbeddingError::Format {
                offset: self.offset(),
                message: format!("{} trailing bytes", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}

struct RawFixture {
    count: usize,
    dim: usize,
    values: Vec<f64>,
}

fn parse_embt(bytes: &[u8]) -> Result<RawFixture> {
    let mut r = ByteReader::new(bytes);
    r.magic(EMBT_MAGIC)?;
    r.version()?;
    let count_at = r.offset();
    let count = r.u32("count")? as usize;
    if count == 0 {
        return Err(EmbeddingError::Format {
            offset: count_at,
            message: "count must be positive".into(),
        });
    }
    let dim_at = r.offset();
    let dim = r.u32("dim")? as usize;
    if dim == 0 {
        return Err(EmbeddingError::Format {
            offset: dim_at,
            message: "dim must be positive".into(),
        });
    }
    let values = r.f64s(count * dim, "rows")?;
    r.finish()?;
    Ok(RawFixture { count, dim, values })
}

/// Loads `path` (`.embt`) and its manifest, cross-checking both.
pub fn load_fixture(path: &Path) -> Result<(CategoryLibrary, EmbeddingTable)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let raw = parse_embt(&bytes)?;

    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| EmbeddingError::Manifest(format!("{}: {e}", mpath.display())))?;
    if manifest.count != raw.count || manifest.names.len() != raw.count {
        return Err(EmbeddingError::Manifest(format!(
            "manifest lists {} names (count {}), binary header says {}",
            manifest.names.len(),
            manifest.count,
            raw.count
        )));
    }
    if manifest.dim != raw.dim {
        return Err(EmbeddingError::Manifest(format!(
            "manifest dim {} differs from binary header dim {}",
            manifest.dim, raw.dim
        )));
    }

    let mut values = raw.values;
    for (i, row) in values.chunks_mut(raw.dim).enumerate() {
        let norm = l2(row);
        if !norm.is_finite() || (norm - 1.0).abs() > LOAD_NORM_TOLERANCE {
            return Err(EmbeddingError::Data(format!(
                "row {i} ({:?}) has norm {norm}, outside 1 ± {LOAD_NORM_TOLERANCE}",
                manifest.names[i]
            )));
        }
        // Rows already unit to rounding are kept bit-exact.
        if (norm - 1.0).abs() > 4.0 * f64::EPSILON {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    let library = CategoryLibrary::new(manifest.names.clone(), manifest.source)?;
    let table = EmbeddingTable::new(manifest.names, raw.dim, values)?;
    Ok((library, table))
}

fn embt_bytes(table: &EmbeddingTable) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * table.rows().len());
    out.extend_from_slice(EMBT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    out.extend_from_slice(&(table.dim() as u32).to_le_bytes());
    for v in table.rows() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Writes `path` and its manifest. Library and table must list the same names.
pub fn write_fixture(path: &Path, lib: &CategoryLibrary, table: &EmbeddingTable) -> Result<()> {
    let same = lib.len() == table.len()
        && lib
            .names()
            .iter()
            .zip(table.names())
            .all(|(a, b)| name_key(a) == name_key(b));
    if !same {
        return Err(EmbeddingError::Data(
            "library and embedding table list different classes".into(),
        ));
    }
    fs::write(path, embt_bytes(table)).map_err(io_err(path))?;
    let manifest = Manifest {
        names: lib.names().to_vec(),
        dim: table.dim(),
        count: table.len(),
        source: lib.source(),
    };
    let mpath = manifest_path(path);
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    json.push('\n');
    fs::write(&mpath, json).map_err(io_err(&mpath))
}

pub fn read_image_embedding(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut r = ByteReader::new(&bytes);
    r.magic(EVEC_MAGIC)?;
    r.version()?;
    let dim_at = r.offset();
    let dim = r.u32("dim")? as usize;
    if dim == 0 {
        return Err(EmbeddingError::Format {
            offset: dim_at,
            message: "dim must be positive".into(),
        });
    }
    let v = r.f64s(dim, "values")?;
    r.finish()?;
    Ok(v)
}

pub fn write_image_embedding(path: &Path, v: &[f64]) -> Result<()> {
    let mut out = Vec::with_capacity(12 + 8 * v.len());
    out.extend_from_slice(EVEC_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, out).map_err(io_err(path))
}

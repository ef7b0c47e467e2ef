//! Per-item continuous embeddings: file ingest, validation, and a deterministic
//! n-gram hashing embedder used in place of a trained text encoder.
//!
//! Two on-disk encodings share one layout (header `count d_L`, then one record
//! per item):
//!
//! * text: UTF-8, whitespace separated, `.` decimal point. Values are written
//!   with the shortest representation that parses back to the same `f64`, so
//!   text files round-trip bit-exactly.
//! * binary: magic `SREMB\0`, `u32` version, `u64` count, `u64` d_L, then per
//!   record a `u16` id length, the id bytes, and d_L little-endian `f32`s.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const BINARY_MAGIC: &[u8; 6] = b"SREMB\0";
const BINARY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ItemEmbedding {
    pub item_id: String,
    pub vector: Vec<f64>,
}

/// Immutable, validated set of item embeddings sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCatalog {
    dim: usize,
    entries: Vec<ItemEmbedding>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingEncoding {
    Text,
    Binary,
}

impl EmbeddingEncoding {
    /// `.bin` selects the binary form; anything else is text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("bin") => EmbeddingEncoding::Binary,
            _ => EmbeddingEncoding::Text,
        }
    }
}

impl EmbeddingCatalog {
    /// Validates and builds a catalog. Rows are numbered from 1 in errors.
    pub fn new(dim: usize, entries: Vec<ItemEmbedding>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            validate_entry(i + 1, e, dim)?;
            if !seen.insert(e.item_id.as_str()) {
                return Err(Error::DuplicateItem {
                    row: i + 1,
                    item_id: e.item_id.clone(),
                });
            }
        }
        Ok(Self { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ItemEmbedding] {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = &ItemEmbedding> {
        self.entries.iter()
    }

    pub fn get(&self, item_id: &str) -> Option<&ItemEmbedding> {
        self.entries.iter().find(|e| e.item_id == item_id)
    }

    /// Catalog restricted to `item_ids`, in the order given.
    pub fn subset<'a>(&self, item_ids: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let index: std::collections::HashMap<&str, &ItemEmbedding> =
            self.entries.iter().map(|e| (e.item_id.as_str(), e)).collect();
        let entries = item_ids
            .into_iter()
            .map(|id| {
                index
                    .get(id)
                    .map(|e| (*e).clone())
                    .ok_or_else(|| Error::UnknownItem(id.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.dim, entries)
    }
}

fn validate_entry(row: usize, e: &ItemEmbedding, dim: usize) -> Result<()> {
    if e.item_id.is_empty() || e.item_id.chars().any(char::is_whitespace) {
        return Err(Error::Malformed {
            row,
            message: format!("invalid item id `{}`", e.item_id),
        });
    }
    if e.vector.len() != dim {
        return Err(Error::DimensionMismatch {
            row,
            expected: dim,
            found: e.vector.len(),
        });
    }
    if let Some(column) = e.vector.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { row, column });
    }
    Ok(())
}

/// Loads an embedding file, choosing the encoding by extension.
pub fn load_embeddings(path: &Path, expected_dim: usize) -> Result<EmbeddingCatalog> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let catalog = match EmbeddingEncoding::from_path(path) {
        EmbeddingEncoding::Text => read_text(reader, expected_dim),
        EmbeddingEncoding::Binary => read_binary(reader, expected_dim),
    };
    catalog.map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn write_embeddings(path: &Path, catalog: &EmbeddingCatalog) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = match EmbeddingEncoding::from_path(path) {
        EmbeddingEncoding::Text => write_text(&mut w, catalog),
        EmbeddingEncoding::Binary => write_binary(&mut w, catalog),
    };
    res.and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn write_text<W: Write>(w: &mut W, catalog: &EmbeddingCatalog) -> std::io::Result<()> {
    writeln!(w, "{} {}", catalog.len(), catalog.dim())?;
    for e in catalog.iter() {
        write!(w, "{}", e.item_id)?;
        for v in &e.vector {
            write!(w, " {v:?}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_binary<W: Write>(w: &mut W, catalog: &EmbeddingCatalog) -> std::io::Result<()> {
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&BINARY_VERSION.to_le_bytes())?;
    w.write_all(&(catalog.len() as u64).to_le_bytes())?;
    w.write_all(&(catalog.dim() as u64).to_le_bytes())?;
    for e in catalog.iter() {
        let id = e.item_id.as_bytes();
        let len = u16::try_from(id.len()).map_err(|_| {
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "item id longer than 65535 bytes")
        })?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(id)?;
        for v in &e.vector {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn malformed(row: usize, message: impl Into<String>) -> Error {
    Error::Malformed {
        row,
        message: message.into(),
    }
}

pub fn read_text<R: BufRead>(reader: R, expected_dim: usize) -> Result<EmbeddingCatalog> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => line.map_err(|e| Error::io("<embeddings>", e))?,
        None => return Err(malformed(0, "missing header")),
    };
    let mut fields = header.split_whitespace();
    let (count, dim) = match (fields.next(), fields.next(), fields.next()) {
        (Some(c), Some(d), None) => (
            c.parse::<usize>().map_err(|_| malformed(0, "bad count in header"))?,
            d.parse::<usize>().map_err(|_| malformed(0, "bad dimension in header"))?,
        ),
        _ => return Err(malformed(0, "header must be `count d_L`")),
    };
    if dim != expected_dim {
        return Err(Error::DimensionMismatch {
            row: 0,
            expected: expected_dim,
            found: dim,
        });
    }
    let mut entries = Vec::with_capacity(count);
    let mut seen = HashSet::with_capacity(count);
    let mut row = 0;
    for line in lines {
        let line = line.map_err(|e| Error::io("<embeddings>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        row += 1;
        let mut fields = line.split_whitespace();
        let item_id = fields.next().expect("non-empty line").to_string();
        let vector = fields
            .map(|f| f.parse::<f64>().map_err(|_| malformed(row, format!("unparsable value `{f}`"))))
            .collect::<Result<Vec<f64>>>()?;
        let entry = ItemEmbedding { item_id, vector };
        validate_entry(row, &entry, expected_dim)?;
        if !seen.insert(entry.item_id.clone()) {
            return Err(Error::DuplicateItem {
                row,
                item_id: entry.item_id,
            });
        }
        entries.push(entry);
    }
    if entries.len() != count {
        return Err(malformed(
            row,
            format!("header declares {count} rows, found {}", entries.len()),
        ));
    }
    EmbeddingCatalog::new(dim, entries)
}

pub fn read_binary<R: Read>(mut reader: R, expected_dim: usize) -> Result<EmbeddingCatalog> {
    let io = |e| Error::io("<embeddings>", e);
    let mut magic = [0u8; 6];
    reader.read_exact(&mut magic).map_err(io)?;
    if &magic != BINARY_MAGIC {
        return Err(malformed(0, "not a binary embedding file"));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    reader.read_exact(&mut b4).map_err(io)?;
    let version = u32::from_le_bytes(b4);
    if version != BINARY_VERSION {
        return Err(malformed(0, format!("unsupported version {version}")));
    }
    reader.read_exact(&mut b8).map_err(io)?;
    let count = u64::from_le_bytes(b8) as usize;
    reader.read_exact(&mut b8).map_err(io)?;
    let dim = u64::from_le_bytes(b8) as usize;
    if dim != expected_dim {
        return Err(Error::DimensionMismatch {
            row: 0,
            expected: expected_dim,
            found: dim,
        });
    }
    let mut entries = Vec::with_capacity(count.min(1 << 20));
    let mut seen = HashSet::new();
    for row in 1..=count {
        let truncated = |_| malformed(row, "truncated record");
        let mut b2 = [0u8; 2];
        reader.read_exact(&mut b2).map_err(truncated)?;
        let mut id = vec![0u8; u16::from_le_bytes(b2) as usize];
        reader.read_exact(&mut id).map_err(truncated)?;
        let item_id = String::from_utf8(id).map_err(|_| malformed(row, "item id is not UTF-8"))?;
        let mut vector = Vec::with_capacity(dim);
        for _ in 0..dim {
            reader.read_exact(&mut b4).map_err(truncated)?;
            vector.push(f32::from_le_bytes(b4) as f64);
        }
        let entry = ItemEmbedding { item_id, vector };
        validate_entry(row, &entry, dim)?;
        if !seen.insert(entry.item_id.clone()) {
            return Err(Error::DuplicateItem {
                row,
                item_id: entry.item_id,
            });
        }
        entries.push(entry);
    }
    let mut rest = [0u8; 1];
    if reader.read(&mut rest).map_err(io)? != 0 {
        return Err(malformed(count, "trailing bytes after last record"));
    }
    EmbeddingCatalog::new(dim, entries)
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic stand-in for a text encoder.
///
/// The lower-cased text is padded with one space on each side and every
/// character 3-gram is hashed (seeded) to a signed unit increment in one of
/// `dim` buckets; the result is L2-normalized. Texts that share n-grams share
/// buckets, so cosine similarity tracks textual overlap.
pub fn stub_embed(item_id: &str, text: &str, dim: usize, seed: u64) -> Result<ItemEmbedding> {
    if dim == 0 {
        return Err(Error::Config("embedding dimension must be positive".into()));
    }
    let padded: Vec<char> = std::iter::once(' ')
        .chain(text.to_lowercase().chars())
        .chain(std::iter::once(' '))
        .collect();
    let mut vector = vec![0.0f64; dim];
    let mut buf = String::new();
    for gram in padded.windows(3) {
        buf.clear();
        buf.extend(gram);
        let h = splitmix64(fnv1a(buf.as_bytes()) ^ splitmix64(seed));
        let bucket = (h % dim as u64) as usize;
        let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
        vector[bucket] += sign;
    }
    let mut norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        // Every n-gram cancelled out; fall back to an id-derived direction.
        let h = splitmix64(fnv1a(item_id.as_bytes()) ^ splitmix64(seed));
        vector[(h % dim as u64) as usize] = 1.0;
        norm = 1.0;
    }
    vector.iter_mut().for_each(|v| *v /= norm);
    Ok(ItemEmbedding {
        item_id: item_id.to_string(),
        vector,
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}

//! FSQ configuration, the mixed-radix digit/token codec, and the token
//! catalog file.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::ItemEmbedding;
use crate::error::{Error, Result};

pub type TokenId = u32;

/// Levels used by the full-size configuration: 8·8·8·6·5 = 15,360 codes.
pub const FULL_LEVELS: [u32; 5] = [8, 8, 8, 6, 5];

/// Smaller levels for the desk-scale profile: 5·4·4·4·3 = 960 codes.
pub const DESK_LEVELS: [u32; 5] = [5, 4, 4, 4, 3];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsqConfig {
    /// Number of sub-vectors (and tokens) per item, K.
    pub sub_vectors: usize,
    /// Full embedding dimension, d_L.
    pub embedding_dim: usize,
    /// Per-dimension level counts; `levels.len()` is d_fsq.
    pub levels: Vec<u32>,
}

impl FsqConfig {
    pub fn new(sub_vectors: usize, embedding_dim: usize, levels: Vec<u32>) -> Result<Self> {
        let c = Self {
            sub_vectors,
            embedding_dim,
            levels,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn full(embedding_dim: usize) -> Self {
        Self {
            sub_vectors: 4,
            embedding_dim,
            levels: FULL_LEVELS.to_vec(),
        }
    }

    pub fn desk(embedding_dim: usize) -> Self {
        Self {
            sub_vectors: 4,
            embedding_dim,
            levels: DESK_LEVELS.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sub_vectors == 0 || self.embedding_dim == 0 {
            return Err(Error::Config("K and d_L must be positive".into()));
        }
        if self.embedding_dim % self.sub_vectors != 0 {
            return Err(Error::Config(format!(
                "d_L = {} is not divisible by K = {}",
                self.embedding_dim, self.sub_vectors
            )));
        }
        if self.levels.is_empty() {
            return Err(Error::Config("at least one quantization level is required".into()));
        }
        if let Some(l) = self.levels.iter().find(|&&l| l < 2) {
            return Err(Error::Config(format!("level count {l} < 2")));
        }
        let size = self
            .levels
            .iter()
            .try_fold(1u64, |acc, &l| acc.checked_mul(l as u64));
        match size {
            Some(s) if s <= u32::MAX as u64 => Ok(()),
            _ => Err(Error::Config("codebook size overflows u32".into())),
        }
    }

    pub fn fsq_dim(&self) -> usize {
        self.levels.len()
    }

    pub fn sub_dim(&self) -> usize {
        self.embedding_dim / self.sub_vectors
    }

    /// |C|, the product of the level counts.
    pub fn codebook_size(&self) -> usize {
        self.levels.iter().map(|&l| l as usize).product()
    }
}

/// One FSQ code: digit `j` lies in `[0, levels[j])`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QuantizedDigits(pub Vec<u32>);

/// Mixed-radix encoding with digit 0 most significant.
pub fn digits_to_token(digits: &QuantizedDigits, config: &FsqConfig) -> Result<TokenId> {
    if digits.0.len() != config.levels.len() {
        return Err(Error::Shape(format!(
            "expected {} digits, got {}",
            config.levels.len(),
            digits.0.len()
        )));
    }
    let mut id: u64 = 0;
    for (j, (&d, &l)) in digits.0.iter().zip(&config.levels).enumerate() {
        if d >= l {
            return Err(Error::OutOfRange(format!("digit {j} = {d} not below level {l}")));
        }
        id = id * l as u64 + d as u64;
    }
    Ok(id as TokenId)
}

pub fn token_to_digits(token: TokenId, config: &FsqConfig) -> Result<QuantizedDigits> {
    let size = config.codebook_size();
    if token as usize >= size {
        return Err(Error::OutOfRange(format!("token {token} >= codebook size {size}")));
    }
    let mut rest = token;
    let mut digits = vec![0u32; config.levels.len()];
    for (d, &l) in digits.iter_mut().zip(&config.levels).rev() {
        *d = rest % l;
        rest /= l;
    }
    Ok(QuantizedDigits(digits))
}

/// Splits an embedding into K contiguous, equal-length sub-vectors.
pub fn partition<'a>(e: &'a ItemEmbedding, config: &FsqConfig) -> Result<Vec<&'a [f64]>> {
    if config.embedding_dim % config.sub_vectors != 0 {
        return Err(Error::Config(format!(
            "d_L = {} is not divisible by K = {}",
            config.embedding_dim, config.sub_vectors
        )));
    }
    if e.vector.len() != config.embedding_dim {
        return Err(Error::Shape(format!(
            "`{}` has dimension {}, expected {}",
            e.item_id,
            e.vector.len(),
            config.embedding_dim
        )));
    }
    Ok(e.vector.chunks_exact(config.sub_dim()).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ItemTokenSequence {
    pub item_id: String,
    pub tokens: Vec<TokenId>,
}

/// Writes one `item_id t_0 … t_{K-1}` line per item.
pub fn write_token_catalog(path: &Path, items: &[ItemTokenSequence]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        for item in items {
            write!(w, "{}", item.item_id)?;
            for t in &item.tokens {
                write!(w, " {t}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn read_token_catalog(path: &Path, config: &FsqConfig) -> Result<Vec<ItemTokenSequence>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_token_catalog(BufReader::new(file), config).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_token_catalog<R: BufRead>(reader: R, config: &FsqConfig) -> Result<Vec<ItemTokenSequence>> {
    let size = config.codebook_size();
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let row = i + 1;
        let line = line.map_err(|e| Error::io("<token catalog>", e))?;
        let mut fields = line.split_whitespace();
        let Some(item_id) = fields.next() else { continue };
        let tokens = fields
            .map(|f| {
                let t: TokenId = f.parse().map_err(|_| Error::Malformed {
                    row,
                    message: format!("bad token `{f}`"),
                })?;
                if t as usize >= size {
                    return Err(Error::Malformed {
                        row,
                        message: format!("token {t} >= codebook size {size}"),
                    });
                }
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        if tokens.len() != config.sub_vectors {
            return Err(Error::Malformed {
                row,
                message: format!("expected {} tokens, found {}", config.sub_vectors, tokens.len()),
            });
        }
        if !seen.insert(item_id.to_string()) {
            return Err(Error::DuplicateItem {
                row,
                item_id: item_id.to_string(),
            });
        }
        out.push(ItemTokenSequence {
            item_id: item_id.to_string(),
            tokens,
        });
    }
    Ok(out)
}

//! Per-corpus dense index with exact inner-product top-k search.
//!
//! File layout (`.vidx`), all integers little-endian:
//!
//! ```text
//! magic "RVIX" | u32 version | u32 header_len | header JSON
//! ids block:   count × (u32 byte_len | UTF-8 id)
//! matrix:      count × dim f32, row-major
//! ```
//!
//! The header carries `corpus_id`, `dim`, `count`, `fingerprint` and a
//! SHA-256 `checksum` over the ids block and matrix bytes.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::corpus::Snippet;
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::providers::{embed_batch, EmbedRole, Provider, Vector};

const MAGIC: &[u8; 4] = b"RVIX";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Retrieval,
    Rerank,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSnippet {
    pub snippet_id: String,
    pub corpus_id: String,
    pub score: f64,
    pub score_kind: ScoreKind,
}

/// Descending score, then ascending snippet id. Signed zeros compare equal.
pub fn rank_order(a: &ScoredSnippet, b: &ScoredSnippet) -> Ordering {
    (b.score + 0.0)
        .total_cmp(&(a.score + 0.0))
        .then_with(|| a.snippet_id.cmp(&b.snippet_id))
}

/// Identity of the embedding space an index was built in.
pub fn fingerprint(model_name: &str, dim: usize) -> String {
    format!("{model_name}#{dim}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorIndex {
    corpus_id: String,
    dim: usize,
    ids: Vec<String>,
    matrix: Vec<f32>,
    fingerprint: String,
}

#[derive(Clone, Debug)]
pub struct BuildMetadata {
    pub rows: usize,
    pub elapsed: Duration,
}

#[derive(Serialize, Deserialize)]
struct Header {
    corpus_id: String,
    dim: usize,
    count: usize,
    fingerprint: String,
    checksum: String,
}

impl VectorIndex {
    pub fn from_rows(
        corpus_id: impl Into<String>,
        ids: Vec<String>,
        rows: Vec<Vector>,
        fingerprint: impl Into<String>,
    ) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::invalid("an index needs at least one row"));
        }
        if ids.len() != rows.len() {
            return Err(Error::invalid(format!("{} ids for {} rows", ids.len(), rows.len())));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::invalid(format!("duplicate id {dup} in index")));
        }
        let dim = rows[0].dim();
        let mut matrix = Vec::with_capacity(dim * rows.len());
        for row in rows {
            if row.dim() != dim {
                return Err(Error::Dim {
                    expected: dim,
                    actual: row.dim(),
                });
            }
            matrix.extend_from_slice(row.values());
        }
        Ok(Self {
            corpus_id: corpus_id.into(),
            dim,
            ids,
            matrix,
            fingerprint: fingerprint.into(),
        })
    }

    pub fn corpus_id(&self) -> &str {
        &self.corpus_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn check_fingerprint(&self, expected: &str) -> Result<()> {
        if self.fingerprint != expected {
            return Err(Error::Fingerprint {
                expected: expected.to_string(),
                found: self.fingerprint.clone(),
            });
        }
        Ok(())
    }

    /// The `min(k, len)` rows with the largest inner product against `query`,
    /// sorted by [`rank_order`].
    pub fn top_k(&self, query: &Vector, k: usize) -> Result<Vec<ScoredSnippet>> {
        if query.dim() != self.dim {
            return Err(Error::Dim {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        if k == 0 {
            return Err(Error::invalid("top_k needs k >= 1"));
        }
        let mut scored: Vec<ScoredSnippet> = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| ScoredSnippet {
                snippet_id: id.clone(),
                corpus_id: self.corpus_id.clone(),
                score: query.dot(self.row(i)),
                score_kind: ScoreKind::Retrieval,
            })
            .collect();
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, rank_order);
            scored.truncate(k);
        }
        scored.sort_by(rank_order);
        Ok(scored)
    }

    fn ids_block(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        out
    }

    fn matrix_block(&self) -> Vec<u8> {
        self.matrix.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let ids = self.ids_block();
        let matrix = self.matrix_block();
        let header = Header {
            corpus_id: self.corpus_id.clone(),
            dim: self.dim,
            count: self.ids.len(),
            fingerprint: self.fingerprint.clone(),
            checksum: checksum(&ids, &matrix),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + ids.len() + matrix.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&ids);
        out.extend_from_slice(&matrix);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptIndex("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CorruptIndex(format!("unsupported version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::CorruptIndex(format!("header: {e}")))?;
        if header.dim == 0 || header.count == 0 {
            return Err(Error::CorruptIndex("empty index".into()));
        }

        let ids_start = r.pos;
        let mut ids = Vec::with_capacity(header.count);
        for _ in 0..header.count {
            let len = r.u32()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::CorruptIndex("id is not UTF-8".into()))?;
            ids.push(id.to_string());
        }
        let ids_bytes = &bytes[ids_start..r.pos];
        let matrix_len = header
            .count
            .checked_mul(header.dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::CorruptIndex("matrix size overflows".into()))?;
        let matrix_bytes = r.take(matrix_len)?;
        if r.pos != bytes.len() {
            return Err(Error::CorruptIndex("trailing bytes".into()));
        }
        if checksum(ids_bytes, matrix_bytes) != header.checksum {
            return Err(Error::CorruptIndex("checksum mismatch".into()));
        }
        let matrix: Vec<f32> = matrix_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut seen = HashSet::with_capacity(ids.len());
        if ids.iter().any(|id| !seen.insert(id.as_str())) {
            return Err(Error::CorruptIndex("duplicate ids".into()));
        }
        Ok(Self {
            corpus_id: header.corpus_id,
            dim: header.dim,
            ids,
            matrix,
            fingerprint: header.fingerprint,
        })
    }
}

fn checksum(ids: &[u8], matrix: &[u8]) -> String {
    crate::digest::DigestBuilder::new().part(ids).part(matrix).finish()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptIndex("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Embeds every snippet with the document encoder.
pub fn build_index(snippets: &[Snippet], provider: &dyn Provider) -> Result<(VectorIndex, BuildMetadata)> {
    let started = Instant::now();
    let first = snippets
        .first()
        .ok_or_else(|| Error::invalid("cannot build an index from zero snippets"))?;
    if let Some(other) = snippets.iter().find(|s| s.corpus_id != first.corpus_id) {
        return Err(Error::invalid(format!(
            "index mixes corpora {} and {}",
            first.corpus_id, other.corpus_id
        )));
    }
    let texts: Vec<String> = snippets.iter().map(Snippet::retrieval_text).collect();
    let rows = embed_batch(provider, &texts, EmbedRole::Document)?;
    let dim = rows[0].dim();
    let ids = snippets.iter().map(|s| s.snippet_id.clone()).collect();
    let index = VectorIndex::from_rows(
        first.corpus_id.clone(),
        ids,
        rows,
        fingerprint(provider.model_name(), dim),
    )?;
    let meta = BuildMetadata {
        rows: index.len(),
        elapsed: started.elapsed(),
    };
    Ok((index, meta))
}

pub fn save_index(index: &VectorIndex, path: &Path) -> Result<()> {
    fs::write(path, index.to_bytes())?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<VectorIndex> {
    VectorIndex::from_bytes(&fs::read(path)?)
}

/// Content digest of an index file's payload.
pub fn index_digest(index: &VectorIndex) -> String {
    sha256_hex(index.to_bytes())
}

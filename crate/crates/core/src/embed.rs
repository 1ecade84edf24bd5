//! Turning counseling note text into fixed-width vectors.
//!
//! Two interchangeable strategies sit behind [`NoteEmbedder`]: a
//! self-contained feature-hashing embedder that needs no vocabulary, and a
//! table of precomputed vectors loaded from disk (for callers that bring
//! their own sentence embeddings). Both produce plain `Vec<f64>` of a fixed
//! dimension, which the note encoder consumes one note at a time.
//!
//! The hashing embedder accumulates signed integer counts per bucket before
//! normalizing, so the result is exactly invariant to token order; no
//! floating-point summation order can leak in.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

pub const DEFAULT_HASH_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("failed to read {path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },
    #[error("embedding table is missing {count} note id(s): {listing}")]
    MissingNotes { count: usize, listing: String },
    #[error("hashing embedder dimension must be positive")]
    ZeroDim,
}

/// Splits text into lowercase tokens. Alphanumeric runs are kept together;
/// punctuation and whitespace separate tokens, except that a period with a
/// digit on both sides stays inside the token so decimals like "2.1"
/// survive.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut tokens = Vec::new();
    let mut current = String::new();
    for (i, &ch) in chars.iter().enumerate() {
        let keep = ch.is_alphanumeric()
            || (ch == '.'
                && i > 0
                && chars[i - 1].is_ascii_digit()
                && chars.get(i + 1).is_some_and(|c| c.is_ascii_digit()));
        if keep {
            current.push(ch);
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the token bytes, folded with the seed and finalized with a
/// splitmix64 avalanche. Stable across platforms and releases, unlike the
/// standard library's default hasher.
fn token_hash(token: &str, seed: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ splitmix64(seed);
    for &b in token.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h)
}

/// Table of externally computed note vectors keyed by note id.
#[derive(Debug, Clone)]
pub struct PrecomputedTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl PrecomputedTable {
    /// Parses the table format: a `dim=<n>` header line, then one line per
    /// note of the form `note_id<TAB>v1 v2 ... vn`.
    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| EmbedError::Io {
            path: display.clone(),
            message: e.to_string(),
        })?;
        let mut lines = text.lines().enumerate();
        let (header_no, header) = lines
            .by_ref()
            .find(|(_, l)| !l.trim().is_empty())
            .ok_or_else(|| EmbedError::Format {
                path: display.clone(),
                line: 1,
                message: "empty file, expected a dim=<n> header".to_string(),
            })?;
        let dim: usize = header
            .trim()
            .strip_prefix("dim=")
            .and_then(|v| v.parse().ok())
            .filter(|d| *d > 0)
            .ok_or_else(|| EmbedError::Format {
                path: display.clone(),
                line: header_no + 1,
                message: format!("expected header dim=<n>, found {header:?}"),
            })?;
        let mut vectors = HashMap::new();
        for (no, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (id, rest) = line.split_once('\t').ok_or_else(|| EmbedError::Format {
                path: display.clone(),
                line: no + 1,
                message: "expected note_id<TAB>values".to_string(),
            })?;
            let values: Vec<f64> = rest
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| EmbedError::Format {
                    path: display.clone(),
                    line: no + 1,
                    message: format!("bad value: {e}"),
                })?;
            if values.len() != dim {
                return Err(EmbedError::Format {
                    path: display.clone(),
                    line: no + 1,
                    message: format!("expected {dim} values, found {}", values.len()),
                });
            }
            if vectors.insert(id.to_string(), values).is_some() {
                return Err(EmbedError::Format {
                    path: display,
                    line: no + 1,
                    message: format!("duplicate note id {id:?}"),
                });
            }
        }
        Ok(PrecomputedTable { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, note_id: &str) -> Option<&[f64]> {
        self.vectors.get(note_id).map(|v| v.as_slice())
    }
}

/// A note-to-vector strategy.
#[derive(Debug, Clone)]
pub enum NoteEmbedder {
    /// Signed feature hashing over tokens, L2-normalized.
    Hashing { dim: usize, seed: u64 },
    /// Lookup into an externally supplied table.
    Precomputed(PrecomputedTable),
}

impl NoteEmbedder {
    pub fn hashing(dim: usize, seed: u64) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::ZeroDim);
        }
        Ok(NoteEmbedder::Hashing { dim, seed })
    }

    pub fn dim(&self) -> usize {
        match self {
            NoteEmbedder::Hashing { dim, .. } => *dim,
            NoteEmbedder::Precomputed(t) => t.dim,
        }
    }

    /// Embeds one note. The hashing strategy uses only `text`; the
    /// precomputed strategy uses only `note_id`.
    pub fn embed(&self, note_id: &str, text: &str) -> Result<Vec<f64>, EmbedError> {
        match self {
            NoteEmbedder::Hashing { dim, seed } => Ok(hash_embed(text, *dim, *seed)),
            NoteEmbedder::Precomputed(table) => {
                table
                    .get(note_id)
                    .map(|v| v.to_vec())
                    .ok_or_else(|| EmbedError::MissingNotes {
                        count: 1,
                        listing: note_id.to_string(),
                    })
            }
        }
    }

    /// Checks that every id in `ids` can be embedded, reporting all missing
    /// ids at once. The hashing strategy covers everything by construction.
    pub fn check_coverage<'a>(
        &self,
        ids: impl IntoIterator<Item = &'a str>,
    ) -> Result<(), EmbedError> {
        let NoteEmbedder::Precomputed(table) = self else {
            return Ok(());
        };
        let mut missing: Vec<&str> = ids
            .into_iter()
            .filter(|id| !table.vectors.contains_key(*id))
            .collect();
        if missing.is_empty() {
            return Ok(());
        }
        missing.sort_unstable();
        missing.dedup();
        let count = missing.len();
        let mut listing = String::new();
        for (i, id) in missing.iter().take(20).enumerate() {
            if i > 0 {
                listing.push_str(", ");
            }
            let _ = write!(listing, "{id}");
        }
        if count > 20 {
            let _ = write!(listing, ", ... ({} more)", count - 20);
        }
        Err(EmbedError::MissingNotes { count, listing })
    }
}

/// Signed bag-of-tokens hashing: each token adds plus or minus one to one of
/// `dim` buckets (bucket from the low hash bits, sign from the high bit),
/// and the count vector is L2-normalized. A note with no tokens embeds as
/// the zero vector.
fn hash_embed(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut counts = vec![0i64; dim];
    for token in tokenize(text) {
        let h = token_hash(&token, seed);
        let bucket = (h % dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1 } else { -1 };
        counts[bucket] += sign;
    }
    let norm_sq: i64 = counts.iter().map(|c| c * c).sum();
    if norm_sq == 0 {
        return vec![0.0; dim];
    }
    let norm = (norm_sq as f64).sqrt();
    counts.iter().map(|c| *c as f64 / norm).collect()
}

//! Content-keyed embedding store and the providers that fill it.
//!
//! Store file layout:
//!
//! ```text
//! CAMSEMB v1 dim=<n>
//! <sha256 hex of NFC text>\t<c0>,<c1>,...,<cn-1>
//! ```
//!
//! Components are written in the shortest decimal form that parses back to
//! the identical `f64`, so a store round-trips bit-exactly.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::thread;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::Dataset;
use crate::numerics::{NumericsError, Vector};
use crate::text;

const HEADER_PREFIX: &str = "CAMSEMB v1 dim=";

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("no embedding for text {text:?}")]
    Missing { text: String },
    #[error("embedding dimension {got} does not match store dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero-norm embedding for text {text:?}")]
    ZeroNorm { text: String },
    #[error("embedding dimension must be positive")]
    ZeroDimension,
    #[error("invalid vector: {0}")]
    Vector(#[from] NumericsError),
    #[error("provider returned {got} vectors for {expected} texts")]
    CountMismatch { expected: usize, got: usize },
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("store file {path}, line {line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

/// SHA-256 hex digest of the NFC form of `text`.
pub fn content_key(text: &str) -> String {
    hex::encode(Sha256::digest(text::nfc(text).as_bytes()))
}

/// Fixed-dimension map from content key to vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    entries: BTreeMap<String, Vector>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Result<Self, EmbeddingError> {
        if dim == 0 {
            return Err(EmbeddingError::ZeroDimension);
        }
        Ok(EmbeddingStore {
            dim,
            entries: BTreeMap::new(),
        })
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

    pub fn insert(&mut self, text: &str, vector: Vector) -> Result<(), EmbeddingError> {
        self.check(&vector, text)?;
        self.entries.insert(content_key(text), vector);
        Ok(())
    }

    /// Inserts under a precomputed content key.
    pub fn insert_keyed(&mut self, key: String, vector: Vector) -> Result<(), EmbeddingError> {
        self.check(&vector, &key)?;
        self.entries.insert(key, vector);
        Ok(())
    }

    fn check(&self, vector: &Vector, label: &str) -> Result<(), EmbeddingError> {
        if vector.dim() != self.dim {
            return Err(EmbeddingError::DimensionMismatch {
                expected: self.dim,
                got: vector.dim(),
            });
        }
        if vector.norm() == 0.0 {
            return Err(EmbeddingError::ZeroNorm {
                text: label.to_string(),
            });
        }
        Ok(())
    }

    pub fn contains(&self, text: &str) -> bool {
        self.entries.contains_key(&content_key(text))
    }

    pub fn get(&self, text: &str) -> Option<&Vector> {
        self.entries.get(&content_key(text))
    }

    pub fn lookup(&self, text: &str) -> Result<&Vector, EmbeddingError> {
        self.get(text).ok_or_else(|| EmbeddingError::Missing {
            text: text.to_string(),
        })
    }

    /// Entries in key order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Vector)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// First text of `d` (answers and truths) without an embedding.
    pub fn first_missing<'a>(&self, d: &'a Dataset) -> Option<&'a str> {
        d.texts().into_iter().find(|t| !self.contains(t))
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{HEADER_PREFIX}{}", self.dim)?;
        for (key, vector) in &self.entries {
            write!(out, "{key}\t")?;
            for (i, c) in vector.as_slice().iter().enumerate() {
                if i > 0 {
                    out.write_all(b",")?;
                }
                // `Display` for f64 is the shortest representation that round-trips.
                write!(out, "{c}")?;
            }
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbeddingError> {
        let io_err = |source| EmbeddingError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = fs::File::create(path).map_err(io_err)?;
        self.write_to(io::BufWriter::new(file)).map_err(io_err)
    }

    pub fn read_from<R: BufRead>(reader: R, origin: &str) -> Result<Self, EmbeddingError> {
        let format_err = |line: usize, message: String| EmbeddingError::Format {
            path: origin.to_string(),
            line,
            message,
        };
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| format_err(1, "missing header".into()))?
            .map_err(|source| EmbeddingError::Io {
                path: origin.to_string(),
                source,
            })?;
        let dim: usize = header
            .strip_prefix(HEADER_PREFIX)
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| format_err(1, format!("bad header {header:?}")))?;
        let mut store = EmbeddingStore::new(dim)?;
        for (idx, line) in lines.enumerate() {
            let lineno = idx + 2;
            let line = line.map_err(|source| EmbeddingError::Io {
                path: origin.to_string(),
                source,
            })?;
            if line.is_empty() {
                continue;
            }
            let (key, values) = line
                .split_once('\t')
                .ok_or_else(|| format_err(lineno, "missing tab separator".into()))?;
            if key.len() != 64 || !key.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(format_err(lineno, format!("bad key {key:?}")));
            }
            let components = values
                .split(',')
                .map(|c| c.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| format_err(lineno, e.to_string()))?;
            let vector = Vector::new(components).map_err(|e| format_err(lineno, e.to_string()))?;
            store
                .insert_keyed(key.to_string(), vector)
                .map_err(|e| format_err(lineno, e.to_string()))?;
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self, EmbeddingError> {
        let file = fs::File::open(path).map_err(|source| EmbeddingError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read_from(BufReader::new(file), &path.display().to_string())
    }
}

/// Maps a batch of texts to vectors, preserving order.
///
/// The same text must always produce the same vector within one provider
/// instance.
pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vector>, EmbeddingError>;
}

/// Pre-computed vectors read from a JSON file of the form
/// `{"dim": n, "vectors": {"<text>": [..], ...}}`.
#[derive(Debug, Clone)]
pub struct PrecomputedProvider {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

#[derive(Deserialize)]
struct PrecomputedFile {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl PrecomputedProvider {
    pub fn from_json_str(json: &str) -> Result<Self, EmbeddingError> {
        let file: PrecomputedFile =
            serde_json::from_str(json).map_err(|e| EmbeddingError::Provider(e.to_string()))?;
        let vectors = file
            .vectors
            .into_iter()
            .map(|(t, v)| (text::nfc(&t), v))
            .collect();
        Ok(PrecomputedProvider {
            dim: file.dim,
            vectors,
        })
    }

    pub fn load(path: &Path) -> Result<Self, EmbeddingError> {
        let raw = fs::read_to_string(path).map_err(|source| EmbeddingError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&raw)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl EmbeddingProvider for PrecomputedProvider {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vector>, EmbeddingError> {
        texts
            .iter()
            .map(|t| {
                let raw = self
                    .vectors
                    .get(&text::nfc(t))
                    .ok_or_else(|| EmbeddingError::Missing { text: t.clone() })?;
                Ok(Vector::new(raw.clone())?)
            })
            .collect()
    }
}

/// Bag-of-tokens feature hashing. A deterministic offline stand-in for a
/// sentence encoder; useful for smoke runs, not for real evaluation.
#[derive(Debug, Clone, Copy)]
pub struct HashedBagProvider {
    pub dim: usize,
}

impl EmbeddingProvider for HashedBagProvider {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vector>, EmbeddingError> {
        if self.dim == 0 {
            return Err(EmbeddingError::ZeroDimension);
        }
        texts
            .iter()
            .map(|t| {
                let mut v = vec![0.0; self.dim];
                for token in text::tokenize(t) {
                    let digest = Sha256::digest(token.as_bytes());
                    let mut head = [0u8; 8];
                    head.copy_from_slice(&digest[..8]);
                    v[(u64::from_le_bytes(head) % self.dim as u64) as usize] += 1.0;
                }
                Ok(Vector::new(v)?)
            })
            .collect()
    }
}

#[derive(Serialize)]
struct HttpEmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct HttpEmbedResponse {
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

/// POSTs `{"texts": [...]}` and expects `{"dim": n, "vectors": [[...], ...]}`
/// in request order.
#[derive(Debug, Clone)]
pub struct HttpProvider {
    pub url: String,
    pub timeout: Duration,
}

impl HttpProvider {
    pub fn new(url: impl Into<String>) -> Self {
        HttpProvider {
            url: url.into(),
            timeout: Duration::from_secs(60),
        }
    }
}

impl EmbeddingProvider for HttpProvider {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vector>, EmbeddingError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut response = agent
            .post(&self.url)
            .send_json(HttpEmbedRequest { texts })
            .map_err(|e| EmbeddingError::Provider(e.to_string()))?;
        let body: HttpEmbedResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| EmbeddingError::Provider(e.to_string()))?;
        if body.vectors.len() != texts.len() {
            return Err(EmbeddingError::CountMismatch {
                expected: texts.len(),
                got: body.vectors.len(),
            });
        }
        body.vectors
            .into_iter()
            .map(|v| {
                if v.len() != body.dim {
                    return Err(EmbeddingError::DimensionMismatch {
                        expected: body.dim,
                        got: v.len(),
                    });
                }
                Ok(Vector::new(v)?)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct EmbedOptions {
    pub batch_size: usize,
    /// Extra attempts per batch after the first failure.
    pub retries: usize,
    pub retry_delay: Duration,
    /// L2-normalize vectors before storing them.
    pub normalize: bool,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        EmbedOptions {
            batch_size: 64,
            retries: 2,
            retry_delay: Duration::from_millis(500),
            normalize: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EmbedReport {
    pub distinct_texts: usize,
    pub cache_hits: usize,
    pub provider_calls: usize,
}

/// Extends `cache` so that it covers every answer and ground-truth text of
/// `d`. Texts already present are never sent to the provider.
///
/// Batches may be requested concurrently; they are merged in text order so
/// the result does not depend on scheduling.
pub fn embed_dataset(
    d: &Dataset,
    provider: &dyn EmbeddingProvider,
    cache: EmbeddingStore,
    opts: &EmbedOptions,
) -> Result<(EmbeddingStore, EmbedReport), EmbeddingError> {
    let texts = d.texts();
    let missing: Vec<String> = texts
        .iter()
        .filter(|t| !cache.contains(t))
        .map(|t| t.to_string())
        .collect();
    let mut report = EmbedReport {
        distinct_texts: texts.len(),
        cache_hits: texts.len() - missing.len(),
        provider_calls: 0,
    };
    if missing.is_empty() {
        return Ok((cache, report));
    }

    let batch_size = opts.batch_size.max(1);
    let batches: Vec<&[String]> = missing.chunks(batch_size).collect();
    let results: Vec<(Vec<Vector>, usize)> = batches
        .par_iter()
        .map(|batch| embed_with_retries(provider, batch, opts))
        .collect::<Result<_, _>>()?;

    let mut store = cache;
    for (batch, (vectors, calls)) in batches.iter().zip(results) {
        report.provider_calls += calls;
        if vectors.len() != batch.len() {
            return Err(EmbeddingError::CountMismatch {
                expected: batch.len(),
                got: vectors.len(),
            });
        }
        for (text, vector) in batch.iter().zip(vectors) {
            let vector = if opts.normalize {
                vector.normalized().map_err(|_| EmbeddingError::ZeroNorm { text: text.clone() })?
            } else {
                vector
            };
            store.insert(text, vector)?;
        }
    }
    Ok((store, report))
}

fn embed_with_retries(
    provider: &dyn EmbeddingProvider,
    batch: &[String],
    opts: &EmbedOptions,
) -> Result<(Vec<Vector>, usize), EmbeddingError> {
    let mut calls = 0;
    loop {
        calls += 1;
        match provider.embed(batch) {
            Ok(vectors) => return Ok((vectors, calls)),
            Err(EmbeddingError::Provider(msg)) if calls <= opts.retries => {
                log::warn!("embedding batch failed (attempt {calls}): {msg}");
                thread::sleep(opts.retry_delay);
            }
            Err(e) => return Err(e),
        }
    }
}

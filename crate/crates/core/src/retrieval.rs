//! Guideline chunking, embedding and exact top-k cosine retrieval.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::StageCategory;
use crate::error::{Error, Result};
use crate::llm::{self, Embedder};
use crate::prompts::hex;

pub const DEFAULT_MAX_CHARS: usize = 1200;
pub const DEFAULT_K: usize = 5;
pub const MIN_MAX_CHARS: usize = 200;

/// The guideline query used for both rule elicitation and standard RAG.
pub fn default_query(category: StageCategory) -> String {
    format!("A list of rules as knowledge that help predict the {category} stage for breast cancer")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: usize,
    pub text: String,
    /// Byte range `[start, end)` of this chunk's own (non-overlap) text in the source.
    pub source_span: (usize, usize),
}

pub fn doc_hash(doc: &str) -> String {
    hex(&Sha256::digest(doc.as_bytes()))
}

/// Byte ranges of paragraphs: maximal runs of non-blank lines.
fn paragraphs(doc: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut end = 0;
    let mut pos = 0;
    for line in doc.split_inclusive('\n') {
        let content = line.trim_end_matches(['\n', '\r']);
        if content.trim().is_empty() {
            if let Some(s) = start.take() {
                out.push((s, end));
            }
        } else {
            if start.is_none() {
                start = Some(pos);
            }
            end = pos + content.len();
        }
        pos += line.len();
    }
    if let Some(s) = start {
        out.push((s, end));
    }
    out
}

fn char_len(s: &str) -> usize {
    s.chars().count()
}

/// Splits an over-long paragraph into pieces of at most `max_chars` characters,
/// cutting after the last whitespace before the limit when there is one.
fn split_long(doc: &str, (start, end): (usize, usize), max_chars: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut s = start;
    while char_len(&doc[s..end]) > max_chars {
        let window_end = doc[s..end].char_indices().nth(max_chars).map_or(end, |(i, _)| s + i);
        let window = &doc[s..window_end];
        let cut = window
            .char_indices()
            .rfind(|(_, c)| c.is_whitespace())
            .map(|(i, c)| s + i + c.len_utf8())
            .filter(|&c| c > s)
            .unwrap_or(window_end);
        out.push((s, cut));
        s = cut;
    }
    if s < end {
        out.push((s, end));
    }
    out
}

/// Splits a document into chunks along blank-line paragraph boundaries.
///
/// Paragraphs are merged greedily while the merged text stays within
/// `max_chars` characters. Chunk spans tile the document, so concatenating
/// `doc[span]` over all chunks yields the document. With `overlap_chars > 0`
/// each chunk's text is prefixed by the last `overlap_chars` characters of the
/// previous chunk.
pub fn chunk_document(doc: &str, max_chars: usize, overlap_chars: usize) -> Result<Vec<Chunk>> {
    if max_chars < MIN_MAX_CHARS {
        return Err(Error::InvalidArgument(format!(
            "max_chars must be at least {MIN_MAX_CHARS}, got {max_chars}"
        )));
    }
    if overlap_chars >= max_chars {
        return Err(Error::InvalidArgument(format!(
            "overlap_chars {overlap_chars} must be below max_chars {max_chars}"
        )));
    }
    let units: Vec<(usize, usize)> = paragraphs(doc)
        .into_iter()
        .flat_map(|p| split_long(doc, p, max_chars))
        .collect();
    if units.is_empty() {
        return Err(Error::InvalidArgument("guideline document is empty".into()));
    }

    // group units greedily; a group is a run of unit indices
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut first = 0;
    for i in 1..units.len() {
        if char_len(&doc[units[first].0..units[i].1]) > max_chars {
            groups.push((first, i - 1));
            first = i;
        }
    }
    groups.push((first, units.len() - 1));

    let mut chunks: Vec<Chunk> = Vec::with_capacity(groups.len());
    for (gi, &(first, _)) in groups.iter().enumerate() {
        let start = if gi == 0 { 0 } else { units[first].0 };
        let end = groups.get(gi + 1).map_or(doc.len(), |&(next, _)| units[next].0);
        let own = &doc[start..end];
        let text = match chunks.last() {
            Some(prev) if overlap_chars > 0 => {
                let prev_own = &doc[prev.source_span.0..prev.source_span.1];
                let skip = char_len(prev_own).saturating_sub(overlap_chars);
                let tail: String = prev_own.chars().skip(skip).collect();
                format!("{tail}{own}")
            }
            _ => own.to_string(),
        };
        chunks.push(Chunk {
            chunk_id: gi,
            text,
            source_span: (start, end),
        });
    }
    Ok(chunks)
}

/// Embedded chunks supporting exact cosine search. Vectors are stored unit-norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkIndex {
    pub model_id: String,
    pub doc_hash: String,
    pub dim: usize,
    pub chunks: Vec<Chunk>,
    pub vectors: Vec<Vec<f32>>,
}

fn normalize(values: &[f32]) -> Result<Vec<f64>> {
    let norm = values.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::InvalidArgument(
            "cannot normalize a zero or non-finite vector".into(),
        ));
    }
    Ok(values.iter().map(|&x| f64::from(x) / norm).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub chunk: Chunk,
    pub score: f64,
}

impl ChunkIndex {
    /// Embeds every chunk and stores the unit-normalized vectors.
    pub fn build(chunks: Vec<Chunk>, doc_hash: String, embedder: &dyn Embedder) -> Result<Self> {
        if chunks.is_empty() {
            return Err(Error::InvalidArgument("cannot index zero chunks".into()));
        }
        let texts: Vec<String> = chunks.iter().map(|c| c.text.trim().to_string()).collect();
        let embedded = llm::embed(embedder, &texts)?;
        let dim = embedded[0].values.len();
        let vectors = embedded
            .iter()
            .map(|v| Ok(normalize(&v.values)?.into_iter().map(|x| x as f32).collect()))
            .collect::<Result<Vec<Vec<f32>>>>()?;
        Ok(ChunkIndex {
            model_id: embedder.model_id(),
            doc_hash,
            dim,
            chunks,
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    /// Cosine of a unit query against chunk `i`.
    pub fn score(&self, unit_query: &[f64], i: usize) -> f64 {
        let dot: f64 = self.vectors[i]
            .iter()
            .zip(unit_query)
            .map(|(&a, &b)| f64::from(a) * b)
            .sum();
        dot.clamp(-1.0, 1.0)
    }

    /// Exact top-k by cosine: descending score, ties to the lower chunk id.
    pub fn search(&self, query_vector: &[f32], k: usize) -> Result<Vec<Hit>> {
        if self.is_empty() {
            return Err(Error::Precondition("chunk index is empty".into()));
        }
        if query_vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: query_vector.len(),
            });
        }
        if k == 0 {
            return Err(Error::InvalidArgument("k must be positive".into()));
        }
        let k = if k > self.len() {
            log::warn!("k={k} exceeds the {} indexed chunks; clamping", self.len());
            self.len()
        } else {
            k
        };
        let q = normalize(query_vector)?;
        let mut scored: Vec<(usize, f64)> = (0..self.len()).map(|i| (i, self.score(&q, i))).collect();
        let order = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        Ok(scored
            .into_iter()
            .map(|(i, score)| Hit {
                chunk: self.chunks[i].clone(),
                score,
            })
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        crate::write_file(path.as_ref(), s.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let index: ChunkIndex = serde_json::from_str(&text)?;
        index.validate()?;
        Ok(index)
    }

    fn validate(&self) -> Result<()> {
        if self.chunks.len() != self.vectors.len() {
            return Err(Error::InvalidArgument(format!(
                "index has {} chunks but {} vectors",
                self.chunks.len(),
                self.vectors.len()
            )));
        }
        for (i, (c, v)) in self.chunks.iter().zip(&self.vectors).enumerate() {
            if c.chunk_id != i {
                return Err(Error::InvalidArgument(format!("chunk ids are not dense at {i}")));
            }
            if v.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: v.len(),
                });
            }
        }
        Ok(())
    }
}

/// Chunks, embeds and indexes a guideline document.
pub fn index_document(
    doc: &str,
    max_chars: usize,
    overlap_chars: usize,
    embedder: &dyn Embedder,
) -> Result<ChunkIndex> {
    let chunks = chunk_document(doc, max_chars, overlap_chars)?;
    ChunkIndex::build(chunks, doc_hash(doc), embedder)
}

/// An index paired with the embedder for queries; counts retrieval passes.
pub struct Retriever {
    index: Arc<ChunkIndex>,
    embedder: Arc<dyn Embedder>,
    passes: AtomicUsize,
}

impl Retriever {
    pub fn new(index: Arc<ChunkIndex>, embedder: Arc<dyn Embedder>) -> Self {
        Retriever {
            index,
            embedder,
            passes: AtomicUsize::new(0),
        }
    }

    pub fn index(&self) -> &ChunkIndex {
        &self.index
    }

    /// Number of `top_k` calls served so far.
    pub fn passes(&self) -> usize {
        self.passes.load(Ordering::SeqCst)
    }

    pub fn top_k(&self, query: &str, k: usize) -> Result<Vec<Hit>> {
        if self.index.is_empty() {
            return Err(Error::Precondition("chunk index is empty".into()));
        }
        self.passes.fetch_add(1, Ordering::SeqCst);
        let v = llm::embed(self.embedder.as_ref(), &[query.to_string()])?;
        self.index.search(&v[0].values, k)
    }
}

/// Joins hit texts in rank order for binding into a prompt.
pub fn join_context(hits: &[Hit]) -> String {
    hits.iter()
        .map(|h| h.chunk.text.trim())
        .collect::<Vec<_>>()
        .join("\n---\n")
}

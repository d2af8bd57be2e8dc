//! Question-conditioned frame selection.
//!
//! Training picks half of the frames on a uniform temporal grid and fills the
//! rest with the remaining frames closest (cosine) to the question embedding.
//! Testing uses the uniform grid alone.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `L` frame embeddings of width `d_s`, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEmbeddingSet {
    dim: usize,
    data: Vec<f64>,
}

impl FrameEmbeddingSet {
    pub fn new(count: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if count == 0 || dim == 0 {
            return Err(Error::shape(
                "frame set needs at least one frame of nonzero width",
            ));
        }
        if data.len() != count * dim {
            return Err(Error::shape(format!(
                "{count} frames of width {dim} need {} values, got {}",
                count * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite frame embedding"));
        }
        Ok(FrameEmbeddingSet { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("ragged frame embeddings"));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    /// Reads an `L×d_s` matrix.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (l, d) = t.dims2()?;
        Self::new(l, d, t.data().to_vec())
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Text embedding of the question in the same space as the frames.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbedding(Vec<f64>);

impl QueryEmbedding {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::shape("empty query embedding"));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric("non-finite query embedding"));
        }
        Ok(QueryEmbedding(v))
    }

    /// Accepts any tensor holding exactly `d_s` values.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Self::new(t.data().to_vec())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Chosen frame indices, each list ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub uniform: Vec<usize>,
    pub similarity: Vec<usize>,
    pub all: Vec<usize>,
}

impl SamplingPlan {
    fn from_parts(uniform: Vec<usize>, mut similarity: Vec<usize>) -> Self {
        similarity.sort_unstable();
        let mut all: Vec<usize> = uniform.iter().chain(&similarity).copied().collect();
        all.sort_unstable();
        SamplingPlan {
            uniform,
            similarity,
            all,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    let mut sq = 0.0;
    for x in v {
        sq += x * x;
    }
    sq.sqrt()
}

/// `a·b / (‖a‖₂ ‖b‖₂)`. Zero-norm inputs are rejected.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "cosine of vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::degenerate("cosine similarity of a zero-norm vector"));
    }
    let mut dot = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `floor(i·L/k)` for `i = 0..k`.
pub fn uniform_indices(len: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > len {
        return Err(Error::contract(format!(
            "cannot pick {k} uniform indices from {len} frames"
        )));
    }
    Ok((0..k).map(|i| i * len / k).collect())
}

/// Training-time selection of `t` frames.
pub fn select_frames_train(
    query: &QueryEmbedding,
    frames: &FrameEmbeddingSet,
    t: usize,
) -> Result<SamplingPlan> {
    if t < 2 {
        return Err(Error::contract(format!(
            "training sampling needs T >= 2, got {t}"
        )));
    }
    let len = frames.len();
    if len <= t {
        return Ok(SamplingPlan::from_parts((0..len).collect(), Vec::new()));
    }
    if query.dim() != frames.dim() {
        return Err(Error::shape(format!(
            "query width {} against frame width {}",
            query.dim(),
            frames.dim()
        )));
    }
    let k_uniform = t.div_ceil(2);
    let uniform = uniform_indices(len, k_uniform)?;

    let mut ranked = Vec::with_capacity(len - k_uniform);
    let mut picked = uniform.iter().peekable();
    for i in 0..len {
        if picked.peek() == Some(&&i) {
            picked.next();
            continue;
        }
        let sim = cosine_similarity(query.as_slice(), frames.frame(i)).map_err(|e| match e {
            Error::Degenerate(_) => {
                Error::degenerate(format!("frame {i} or the query has zero norm"))
            }
            other => other,
        })?;
        ranked.push((sim, i));
    }
    ranked.sort_by(|a, b| match b.0.total_cmp(&a.0) {
        Ordering::Equal => a.1.cmp(&b.1),
        ord => ord,
    });
    let similarity = ranked.iter().take(t - k_uniform).map(|&(_, i)| i).collect();
    Ok(SamplingPlan::from_parts(uniform, similarity))
}

/// Test-time selection: the uniform grid, capped at `len` frames.
pub fn select_frames_test(len: usize, t: usize) -> Result<SamplingPlan> {
    if t == 0 {
        return Err(Error::contract("test sampling needs T >= 1"));
    }
    if len == 0 {
        return Err(Error::shape("video has no frames"));
    }
    Ok(SamplingPlan::from_parts(
        uniform_indices(len, t.min(len))?,
        Vec::new(),
    ))
}

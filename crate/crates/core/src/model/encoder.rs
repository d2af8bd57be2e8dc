//! Frozen stand-in for the pretrained visual/text encoder.
//!
//! Fixed seeded projections map each raw frame vector to `n×d` patch features
//! and to a `d_s`-wide sampling embedding; question tokens are embedded into
//! the same sampling space by averaging fixed per-token vectors.

use crate::error::{Error, Result};
use crate::params::{component_rng, ParamStore};
use crate::sampler::{FrameEmbeddingSet, QueryEmbedding};
use crate::tensor::Tensor;

use super::config::PipelineConfig;

pub const PREFIX: &str = "encoder.";
pub const PATCH: &str = "encoder.patch";
pub const SAMPLER: &str = "encoder.sampler";
pub const TEXT: &str = "encoder.text";

const RNG_STREAM: u64 = 1;

pub fn init_params(cfg: &PipelineConfig) -> ParamStore {
    let mut rng = component_rng(cfg.seed, RNG_STREAM);
    let raw = cfg.raw_dim;
    let (n, d) = (cfg.perceiver.patches, cfg.perceiver.dim);
    let std = 1.0 / (raw as f64).sqrt();
    let mut store = ParamStore::new();
    store.insert(PATCH, Tensor::randn(&[raw, n * d], std, &mut rng));
    store.insert(
        SAMPLER,
        Tensor::randn(&[raw, cfg.sampler_dim], std, &mut rng),
    );
    store.insert(
        TEXT,
        Tensor::randn(&[cfg.vocab_size, cfg.sampler_dim], 1.0, &mut rng),
    );
    store.set_trainable(PREFIX, false);
    store
}

fn check_raw(raw: &Tensor, cfg: &PipelineConfig) -> Result<(usize, usize)> {
    let (l, r) = raw.dims2()?;
    if r != cfg.raw_dim {
        return Err(Error::shape(format!(
            "video frames have width {r}, config expects {}",
            cfg.raw_dim
        )));
    }
    Ok((l, r))
}

/// Patch features of the selected frames, shape `k×n×d`.
pub fn patch_features(
    params: &ParamStore,
    cfg: &PipelineConfig,
    raw: &Tensor,
    indices: &[usize],
) -> Result<Tensor> {
    let (l, r) = check_raw(raw, cfg)?;
    if indices.is_empty() {
        return Err(Error::shape("no frames selected"));
    }
    let mut rows = Vec::with_capacity(indices.len() * r);
    for &i in indices {
        if i >= l {
            return Err(Error::shape(format!(
                "frame index {i} of a {l}-frame video"
            )));
        }
        rows.extend_from_slice(raw.row(i));
    }
    let picked = Tensor::new(vec![indices.len(), r], rows)?;
    picked.matmul(params.get(PATCH)?)?.reshape(&[
        indices.len(),
        cfg.perceiver.patches,
        cfg.perceiver.dim,
    ])
}

/// Sampling-space embedding of every frame, `L×d_s`.
pub fn frame_embeddings(
    params: &ParamStore,
    cfg: &PipelineConfig,
    raw: &Tensor,
) -> Result<FrameEmbeddingSet> {
    check_raw(raw, cfg)?;
    FrameEmbeddingSet::from_tensor(&raw.matmul(params.get(SAMPLER)?)?)
}

/// Mean of the fixed text vectors of the question tokens.
pub fn query_embedding(params: &ParamStore, ids: &[usize]) -> Result<QueryEmbedding> {
    let table = params.get(TEXT)?;
    let (v, ds) = table.dims2()?;
    if ids.is_empty() {
        return Err(Error::contract("query embedding of an empty question"));
    }
    let mut acc = vec![0.0; ds];
    for &id in ids {
        if id >= v {
            return Err(Error::contract(format!(
                "token id {id} outside vocabulary of {v}"
            )));
        }
        for (a, x) in acc.iter_mut().zip(table.row(id)) {
            *a += x;
        }
    }
    let n = ids.len() as f64;
    QueryEmbedding::new(acc.into_iter().map(|a| a / n).collect())
}

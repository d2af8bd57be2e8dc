//! Video Perceiver: resamples `T×n×d` frame features into `m` learned tokens.
//!
//! Learned time encodings are added per frame, frames are flattened to
//! `(T·n)×d`, and `p` cross-attention layers let the latents attend over the
//! features concatenated with the latents themselves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{attention_head, feed_forward, init_feed_forward, INIT_STD};
use crate::params::{component_rng, Bindings, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const PREFIX: &str = "perceiver.";
pub const LATENTS: &str = "perceiver.latents";
pub const TIME_ENC: &str = "perceiver.time_enc";

const RNG_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceiverConfig {
    /// Sampled frames `T`.
    pub frames: usize,
    /// Patch features per frame `n`.
    pub patches: usize,
    /// Feature width `d`.
    pub dim: usize,
    /// Learned output tokens `m`.
    pub latents: usize,
    /// Stacked layers `p`.
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl Default for PerceiverConfig {
    fn default() -> Self {
        PerceiverConfig {
            frames: 100,
            patches: 256,
            dim: 1024,
            latents: 356,
            layers: 1,
            heads: 8,
            head_dim: 64,
        }
    }
}

impl PerceiverConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("frames", self.frames),
            ("patches", self.patches),
            ("dim", self.dim),
            ("latents", self.latents),
            ("layers", self.layers),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(Error::contract(format!("perceiver {name} must be >= 1"))),
            None => Ok(()),
        }
    }
}

fn layer_key(layer: usize, rest: &str) -> String {
    format!("{PREFIX}layers.{layer}.{rest}")
}

/// Fresh seeded parameters. Every tensor is trainable.
pub fn init_params(cfg: &PerceiverConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = component_rng(seed, RNG_STREAM);
    let (d, dh) = (cfg.dim, cfg.head_dim);
    let mut store = ParamStore::new();
    store.insert(
        LATENTS,
        Tensor::randn(&[cfg.latents, d], INIT_STD, &mut rng),
    );
    store.insert(
        TIME_ENC,
        Tensor::randn(&[cfg.frames, 1, d], INIT_STD, &mut rng),
    );
    for l in 0..cfg.layers {
        for h in 0..cfg.heads {
            for proj in ["q", "k", "v"] {
                store.insert(
                    layer_key(l, &format!("attn.{proj}.{h}")),
                    Tensor::randn(&[d, dh], INIT_STD, &mut rng),
                );
            }
        }
        store.insert(
            layer_key(l, "attn.out"),
            Tensor::randn(&[cfg.heads * dh, d], INIT_STD, &mut rng),
        );
        init_feed_forward(&mut store, &layer_key(l, "ffn"), d, &mut rng);
    }
    store.set_trainable(PREFIX, true);
    Ok(store)
}

/// `out[t, i, :] = features[t, i, :] + time_enc[t, 0, :]`.
pub fn add_time_encodings(tape: &mut Tape, features: Var, time_enc: Var) -> Result<Var> {
    tape.add_time(features, time_enc)
}

/// `T×n×d → (T·n)×d`, row `t·n + i` holding frame `t`, patch `i`.
pub fn flatten_frames(tape: &mut Tape, features: Var) -> Result<Var> {
    match *tape.shape(features) {
        [t, n, d] => tape.reshape(features, &[t * n, d]),
        ref s => Err(Error::shape(format!("features must be T×n×d, got {s:?}"))),
    }
}

/// One latent cross-attention layer followed by the residual feed-forward.
pub fn perceiver_layer(
    tape: &mut Tape,
    latents: Var,
    feats: Var,
    b: &Bindings,
    cfg: &PerceiverConfig,
    layer: usize,
) -> Result<Var> {
    let (m, d) = tape.value(latents).dims2()?;
    let (_, fd) = tape.value(feats).dims2()?;
    if d != cfg.dim || fd != cfg.dim {
        return Err(Error::shape(format!(
            "perceiver width {} against latents {m}×{d} and features of width {fd}",
            cfg.dim
        )));
    }
    let kv = tape.concat_rows(&[feats, latents])?;
    let scale = (cfg.head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let wq = b.get(&layer_key(layer, &format!("attn.q.{h}")))?;
        let wk = b.get(&layer_key(layer, &format!("attn.k.{h}")))?;
        let wv = b.get(&layer_key(layer, &format!("attn.v.{h}")))?;
        heads.push(attention_head(tape, latents, kv, wq, wk, wv, scale, false)?);
    }
    let merged = tape.concat_cols(&heads)?;
    let attn = tape.matmul(merged, b.get(&layer_key(layer, "attn.out"))?)?;
    let x = tape.add(latents, attn)?;
    let ff = feed_forward(tape, x, b, &layer_key(layer, "ffn"))?;
    tape.add(x, ff)
}

/// Full resampler: time encodings, flatten, then `p` layers from the learned latents.
///
/// A clip with `k < T` frames (a video shorter than `T`) uses the first `k`
/// time encodings.
pub fn video_perceiver_forward(
    tape: &mut Tape,
    features: Var,
    b: &Bindings,
    cfg: &PerceiverConfig,
) -> Result<Var> {
    let frames = match *tape.shape(features) {
        [k, n, d] if k <= cfg.frames && n == cfg.patches && d == cfg.dim => k,
        ref s => {
            return Err(Error::shape(format!(
                "perceiver expects features [<= {}, {}, {}], got {s:?}",
                cfg.frames, cfg.patches, cfg.dim
            )))
        }
    };
    let mut time_enc = b.get(TIME_ENC)?;
    if frames < cfg.frames {
        let rows = tape.reshape(time_enc, &[cfg.frames, cfg.dim])?;
        let rows = tape.slice_rows(rows, 0, frames)?;
        time_enc = tape.reshape(rows, &[frames, 1, cfg.dim])?;
    }
    let with_time = add_time_encodings(tape, features, time_enc)?;
    let flat = flatten_frames(tape, with_time)?;
    let mut latents = b.get(LATENTS)?;
    for l in 0..cfg.layers {
        latents = perceiver_layer(tape, latents, flat, b, cfg, l)?;
    }
    Ok(latents)
}

/// Owned parameters plus configuration, for tape-free evaluation.
#[derive(Debug, Clone)]
pub struct VideoPerceiver {
    pub config: PerceiverConfig,
    pub params: ParamStore,
}

impl VideoPerceiver {
    pub fn new(config: PerceiverConfig, seed: u64) -> Result<Self> {
        Ok(VideoPerceiver {
            params: init_params(&config, seed)?,
            config,
        })
    }

    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let f = tape.constant(features.clone());
        let out = video_perceiver_forward(&mut tape, f, &b, &self.config)?;
        Ok(tape.value(out).clone())
    }
}

//! Minimal stand-in for the frozen language model: one causal single-head
//! self-attention block with a residual, a layer norm, and a vocabulary head.

use crate::error::Result;
use crate::layers::{attention_head, LN_EPS};
use crate::params::{component_rng, Bindings, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

use super::config::PipelineConfig;

pub const PREFIX: &str = "decoder.";

const RNG_STREAM: u64 = 5;

pub fn init_params(cfg: &PipelineConfig) -> ParamStore {
    let mut rng = component_rng(cfg.seed, RNG_STREAM);
    let dt = cfg.vqformer.text_dim;
    let std = 1.0 / (dt as f64).sqrt();
    let mut store = ParamStore::new();
    for proj in ["q", "k", "v", "o"] {
        store.insert(
            format!("{PREFIX}attn.{proj}"),
            Tensor::randn(&[dt, dt], std, &mut rng),
        );
    }
    store.insert(format!("{PREFIX}norm.gamma"), Tensor::ones(&[dt]));
    store.insert(format!("{PREFIX}norm.beta"), Tensor::zeros(&[dt]));
    // Unit-variance head so normalized states can reach confident logits.
    store.insert(
        format!("{PREFIX}head"),
        Tensor::randn(&[dt, cfg.vocab_size], 1.0, &mut rng),
    );
    store.set_trainable(PREFIX, cfg.trainable.decoder);
    store
}

/// `(s×d_text) → (s×V)` logits; position `i` sees positions `0..=i`.
pub fn decoder_forward(tape: &mut Tape, seq: Var, b: &Bindings) -> Result<Var> {
    let (_, dt) = tape.value(seq).dims2()?;
    let attn = attention_head(
        tape,
        seq,
        seq,
        b.get(&format!("{PREFIX}attn.q"))?,
        b.get(&format!("{PREFIX}attn.k"))?,
        b.get(&format!("{PREFIX}attn.v"))?,
        (dt as f64).sqrt(),
        true,
    )?;
    let attn = tape.matmul(attn, b.get(&format!("{PREFIX}attn.o"))?)?;
    let h = tape.add(seq, attn)?;
    let h = tape.layer_norm(
        h,
        b.get(&format!("{PREFIX}norm.gamma"))?,
        b.get(&format!("{PREFIX}norm.beta"))?,
        LN_EPS,
    )?;
    tape.matmul(h, b.get(&format!("{PREFIX}head"))?)
}

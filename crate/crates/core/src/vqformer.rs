//! Visual-Query Transformer: video tokens query the question embeddings
//! through gated multi-head cross-attention.
//!
//! ```text
//! O_a = CrossAttn(LN(M), X)
//! M'  = O_a·tanh(g_attn) + M·W_M
//! M'' = FFN(M')·tanh(g_ff) + M'
//! ```
//!
//! Both gates start at zero, so a fresh block maps `M` to exactly `M·W_M`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{attention_head, feed_forward, init_feed_forward, INIT_STD, LN_EPS};
use crate::params::{component_rng, Bindings, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const PREFIX: &str = "vqformer.";
pub const GATE_ATTN: &str = "vqformer.gate_attn";
pub const GATE_FF: &str = "vqformer.gate_ff";
pub const W_M: &str = "vqformer.wm";

const RNG_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VQFormerConfig {
    /// Video token width `d`.
    pub dim: usize,
    /// Text embedding width `d_text`.
    pub text_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Queries are divided by this before the logits.
    pub s_q: f64,
}

impl Default for VQFormerConfig {
    fn default() -> Self {
        VQFormerConfig {
            dim: 1024,
            text_dim: 4096,
            heads: 8,
            head_dim: 64,
            s_q: 8.0,
        }
    }
}

impl VQFormerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.text_dim == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(Error::contract("vqformer dimensions must be >= 1"));
        }
        if !(self.s_q > 0.0 && self.s_q.is_finite()) {
            return Err(Error::contract(format!(
                "s_q must be positive, got {}",
                self.s_q
            )));
        }
        Ok(())
    }
}

fn head_key(proj: &str, h: usize) -> String {
    format!("{PREFIX}attn.{proj}.{h}")
}

pub fn init_params(cfg: &VQFormerConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = component_rng(seed, RNG_STREAM);
    let (d, dt, dh) = (cfg.dim, cfg.text_dim, cfg.head_dim);
    let mut store = ParamStore::new();
    store.insert(format!("{PREFIX}norm.gamma"), Tensor::ones(&[d]));
    store.insert(format!("{PREFIX}norm.beta"), Tensor::zeros(&[d]));
    for h in 0..cfg.heads {
        store.insert(
            head_key("q", h),
            Tensor::randn(&[d, dh], INIT_STD, &mut rng),
        );
        store.insert(
            head_key("k", h),
            Tensor::randn(&[dt, dh], INIT_STD, &mut rng),
        );
        store.insert(
            head_key("v", h),
            Tensor::randn(&[dt, dh], INIT_STD, &mut rng),
        );
        store.insert(
            head_key("o", h),
            Tensor::randn(&[dh, dt], INIT_STD, &mut rng),
        );
    }
    store.insert(W_M, Tensor::randn(&[d, dt], INIT_STD, &mut rng));
    store.insert(GATE_ATTN, Tensor::zeros(&[1]));
    store.insert(GATE_FF, Tensor::zeros(&[1]));
    init_feed_forward(&mut store, &format!("{PREFIX}ffn"), dt, &mut rng);
    store.set_trainable(PREFIX, true);
    Ok(store)
}

fn check_inputs(tape: &Tape, m: Var, x: Var, cfg: &VQFormerConfig) -> Result<()> {
    let (_, d) = tape.value(m).dims2()?;
    let (_, dt) = tape.value(x).dims2()?;
    if d != cfg.dim || dt != cfg.text_dim {
        return Err(Error::shape(format!(
            "vqformer expects video width {} and text width {}, got {d} and {dt}",
            cfg.dim, cfg.text_dim
        )));
    }
    Ok(())
}

fn normalized_heads(
    tape: &mut Tape,
    m: Var,
    x: Var,
    b: &Bindings,
    cfg: &VQFormerConfig,
) -> Result<Vec<Var>> {
    check_inputs(tape, m, x, cfg)?;
    let normed = tape.layer_norm(
        m,
        b.get(&format!("{PREFIX}norm.gamma"))?,
        b.get(&format!("{PREFIX}norm.beta"))?,
        LN_EPS,
    )?;
    (0..cfg.heads)
        .map(|h| {
            attention_head(
                tape,
                normed,
                x,
                b.get(&head_key("q", h))?,
                b.get(&head_key("k", h))?,
                b.get(&head_key("v", h))?,
                cfg.s_q,
                false,
            )
        })
        .collect()
}

/// Multi-head cross-attention, heads combined by summing `head_h · W_O^(h)`.
pub fn vq_cross_attention(
    tape: &mut Tape,
    m: Var,
    x: Var,
    b: &Bindings,
    cfg: &VQFormerConfig,
) -> Result<Var> {
    let heads = normalized_heads(tape, m, x, b, cfg)?;
    let mut total: Option<Var> = None;
    for (h, head) in heads.into_iter().enumerate() {
        let projected = tape.matmul(head, b.get(&head_key("o", h))?)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, projected)?,
            None => projected,
        });
    }
    Ok(total.expect("at least one head"))
}

/// The same attention written as concat-then-project: heads side by side
/// (`m×(H·d_h)`) times the row-stacked `W_O^(1..H)` (`(H·d_h)×d_text`).
pub fn vq_cross_attention_stacked(
    tape: &mut Tape,
    m: Var,
    x: Var,
    b: &Bindings,
    cfg: &VQFormerConfig,
) -> Result<Var> {
    let heads = normalized_heads(tape, m, x, b, cfg)?;
    let merged = tape.concat_cols(&heads)?;
    let outs = (0..cfg.heads)
        .map(|h| b.get(&head_key("o", h)))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.concat_rows(&outs)?;
    tape.matmul(merged, stacked)
}

/// The full gated block.
pub fn vqformer_forward(
    tape: &mut Tape,
    m: Var,
    x: Var,
    b: &Bindings,
    cfg: &VQFormerConfig,
) -> Result<Var> {
    let attn = vq_cross_attention(tape, m, x, b, cfg)?;
    let gate_attn = tape.tanh(b.get(GATE_ATTN)?)?;
    let gated = tape.mul_scalar(attn, gate_attn)?;
    let skip = tape.matmul(m, b.get(W_M)?)?;
    let m1 = tape.add(gated, skip)?;
    let ff = feed_forward(tape, m1, b, &format!("{PREFIX}ffn"))?;
    let gate_ff = tape.tanh(b.get(GATE_FF)?)?;
    let gated_ff = tape.mul_scalar(ff, gate_ff)?;
    tape.add(gated_ff, m1)
}

/// Owned parameters plus configuration, for tape-free evaluation.
#[derive(Debug, Clone)]
pub struct VQFormer {
    pub config: VQFormerConfig,
    pub params: ParamStore,
}

impl VQFormer {
    pub fn new(config: VQFormerConfig, seed: u64) -> Result<Self> {
        Ok(VQFormer {
            params: init_params(&config, seed)?,
            config,
        })
    }

    pub fn forward(&self, m: &Tensor, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let mv = tape.constant(m.clone());
        let xv = tape.constant(x.clone());
        let out = vqformer_forward(&mut tape, mv, xv, &b, &self.config)?;
        Ok(tape.value(out).clone())
    }

    pub fn cross_attention(&self, m: &Tensor, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let mv = tape.constant(m.clone());
        let xv = tape.constant(x.clone());
        let out = vq_cross_attention(&mut tape, mv, xv, &b, &self.config)?;
        Ok(tape.value(out).clone())
    }

    pub fn set_gates(&mut self, attn: f64, ff: f64) -> Result<()> {
        self.params.get_mut(GATE_ATTN)?.data_mut()[0] = attn;
        self.params.get_mut(GATE_FF)?.data_mut()[0] = ff;
        Ok(())
    }
}

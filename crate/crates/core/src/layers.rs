//! Attention and feed-forward pieces shared by the perceiver, the VQ-Former
//! and the decoder stub.

use rand::Rng;

use crate::error::Result;
use crate::params::{Bindings, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// One attention head: `softmax((x_q W_Q / q_div)(x_kv W_K)ᵀ) · x_kv W_V`.
#[allow(clippy::too_many_arguments)]
pub fn attention_head(
    tape: &mut Tape,
    x_q: Var,
    x_kv: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    q_div: f64,
    causal: bool,
) -> Result<Var> {
    let q = tape.matmul(x_q, w_q)?;
    let q = tape.scale(q, 1.0 / q_div)?;
    let k = tape.matmul(x_kv, w_k)?;
    let v = tape.matmul(x_kv, w_v)?;
    let logits = tape.matmul_nt(q, k)?;
    let weights = if causal {
        tape.causal_softmax_rows(logits)?
    } else {
        tape.softmax_rows(logits)?
    };
    tape.matmul(weights, v)
}

/// Inserts `{prefix}.norm.gamma/beta`, `{prefix}.w1/b1` (width → 4·width) and
/// `{prefix}.w2/b2` (4·width → width).
pub fn init_feed_forward<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    width: usize,
    rng: &mut R,
) {
    let hidden = 4 * width;
    store.insert(format!("{prefix}.norm.gamma"), Tensor::ones(&[width]));
    store.insert(format!("{prefix}.norm.beta"), Tensor::zeros(&[width]));
    store.insert(
        format!("{prefix}.w1"),
        Tensor::randn(&[width, hidden], INIT_STD, rng),
    );
    store.insert(format!("{prefix}.b1"), Tensor::zeros(&[hidden]));
    store.insert(
        format!("{prefix}.w2"),
        Tensor::randn(&[hidden, width], INIT_STD, rng),
    );
    store.insert(format!("{prefix}.b2"), Tensor::zeros(&[width]));
}

/// LayerNorm → Linear(w→4w) → GELU → Linear(4w→w).
pub fn feed_forward(tape: &mut Tape, x: Var, b: &Bindings, prefix: &str) -> Result<Var> {
    let gamma = b.get(&format!("{prefix}.norm.gamma"))?;
    let beta = b.get(&format!("{prefix}.norm.beta"))?;
    let h = tape.layer_norm(x, gamma, beta, LN_EPS)?;
    let h = tape.matmul(h, b.get(&format!("{prefix}.w1"))?)?;
    let h = tape.add_row(h, b.get(&format!("{prefix}.b1"))?)?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, b.get(&format!("{prefix}.w2"))?)?;
    tape.add_row(h, b.get(&format!("{prefix}.b2"))?)
}

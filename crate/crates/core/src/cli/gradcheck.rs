//! Gradient-check harness behind `vaquita gradcheck`.
//!
//! Every check redraws the trainable parameters at std 0.5 (which also opens
//! the VQ-Former gates): at the 0.02 init scale, gradients reaching deep
//! parameters are smaller than the rounding noise of central differences.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{random_video, Pipeline, PipelineConfig};
use crate::params::{check_param_gradients_on, component_rng, Bindings, ParamStore};
use crate::perceiver::{self, video_perceiver_forward, PerceiverConfig};
use crate::tensor::{AdjointFault, GroupError, Tape, Tensor, Var};
use crate::vqformer::{self, vqformer_forward};

pub const THRESHOLD: f64 = 1e-4;

const REDRAW_STD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Module {
    Tensor,
    Perceiver,
    VQFormer,
    Model,
}

impl Module {
    pub const ALL: [Module; 4] = [
        Module::Tensor,
        Module::Perceiver,
        Module::VQFormer,
        Module::Model,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Module::Tensor => "tensor",
            Module::Perceiver => "perceiver",
            Module::VQFormer => "vqformer",
            Module::Model => "model",
        }
    }
}

/// Worst relative error of one parameter group under one seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub module: &'static str,
    pub seed: u64,
    pub name: String,
    pub max_rel_err: f64,
}

impl GroupReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < THRESHOLD
    }
}

/// Checks every trainable group of `module` for seeds `0..seeds`.
pub fn run(
    module: Module,
    seeds: u64,
    eps: f64,
    fault: Option<AdjointFault>,
) -> Result<Vec<GroupReport>> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::contract(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    if seeds == 0 {
        return Err(Error::contract("at least one seed is required"));
    }
    let mut out = Vec::new();
    for seed in 0..seeds {
        let groups = match module {
            Module::Tensor => check_tensor(seed, eps, fault)?,
            Module::Perceiver => check_perceiver(seed, eps, fault)?,
            Module::VQFormer => check_vqformer(seed, eps, fault)?,
            Module::Model => check_model(seed, eps, fault)?,
        };
        out.extend(groups.into_iter().map(|g| GroupReport {
            module: module.name(),
            seed,
            name: g.name,
            max_rel_err: g.max_rel_err,
        }));
    }
    Ok(out)
}

fn tape_with(fault: Option<AdjointFault>) -> Tape {
    let mut tape = Tape::new();
    if let Some(f) = fault {
        tape.inject_fault(f);
    }
    tape
}

fn trainable(t: Tensor) -> Tensor {
    t.with_requires_grad(true)
}

/// A composite scalar touching every differentiable primitive of the tape.
fn check_tensor(seed: u64, eps: f64, fault: Option<AdjointFault>) -> Result<Vec<GroupError>> {
    let mut rng = component_rng(seed, 10);
    let mut store = ParamStore::new();
    for (name, shape) in [
        ("x", &[2, 3][..]),
        ("w", &[3, 4]),
        ("bias", &[4]),
        ("gamma", &[4]),
        ("beta", &[4]),
        ("table", &[5, 4]),
        ("time", &[2, 1, 3]),
        ("feats", &[2, 2, 3]),
    ] {
        store.insert(name, trainable(Tensor::randn(shape, 1.0, &mut rng)));
    }
    check_param_gradients_on(tape_with(fault), &store, eps, |_, tape, b| {
        tensor_loss(tape, b)
    })
}

fn tensor_loss(tape: &mut Tape, b: &Bindings) -> Result<Var> {
    let h = tape.matmul(b.get("x")?, b.get("w")?)?;
    let h = tape.add_row(h, b.get("bias")?)?;
    let h = tape.layer_norm(h, b.get("gamma")?, b.get("beta")?, 1e-5)?;
    let g = tape.gelu(h)?;
    let t = tape.tanh(g)?;
    let e = tape.embed_lookup(b.get("table")?, &[1, 3])?;
    let m = tape.mul(t, e)?;
    let s = tape.softmax_rows(m)?;
    let scores = tape.matmul_nt(m, e)?;
    let c = tape.causal_softmax_rows(scores)?;
    let cat = tape.concat_cols(&[s, c])?;
    let half = tape.scale(cat, 0.5)?;
    let stacked = tape.concat_rows(&[cat, half])?;
    let mid = tape.slice_rows(stacked, 1, 3)?;
    let tr = tape.transpose(mid)?;
    let r = tape.reshape(tr, &[4, 3])?;
    let f = tape.add_time(b.get("feats")?, b.get("time")?)?;
    let f = tape.reshape(f, &[4, 3])?;
    let sum = tape.add(r, f)?;
    let k = tape.element(b.get("bias")?, 0)?;
    let logits = tape.mul_scalar(sum, k)?;
    let nll = tape.smoothed_nll(logits, &[0, 2, 1, 1], 0.1)?;
    let total = tape.sum(logits)?;
    let total = tape.scale(total, 0.1)?;
    tape.add(nll, total)
}

fn tiny_perceiver() -> PerceiverConfig {
    let mut cfg = PipelineConfig::tiny().perceiver;
    cfg.layers = 2;
    cfg
}

fn check_perceiver(seed: u64, eps: f64, fault: Option<AdjointFault>) -> Result<Vec<GroupError>> {
    let cfg = tiny_perceiver();
    let mut store = perceiver::init_params(&cfg, seed)?;
    store.redraw_trainable(seed, REDRAW_STD);
    let mut rng = component_rng(seed, 11);
    let feats = Tensor::randn(&[cfg.frames, cfg.patches, cfg.dim], 1.0, &mut rng);
    let probe = Tensor::randn(&[cfg.latents, cfg.dim], 1.0, &mut rng);
    check_param_gradients_on(tape_with(fault), &store, eps, |_, tape, b| {
        let f = tape.constant(feats.clone());
        let out = video_perceiver_forward(tape, f, b, &cfg)?;
        let w = tape.constant(probe.clone());
        let y = tape.mul(out, w)?;
        tape.sum(y)
    })
}

fn check_vqformer(seed: u64, eps: f64, fault: Option<AdjointFault>) -> Result<Vec<GroupError>> {
    let cfg = PipelineConfig::tiny().vqformer;
    let mut store = vqformer::init_params(&cfg, seed)?;
    store.redraw_trainable(seed, REDRAW_STD);
    let mut rng = component_rng(seed, 12);
    let m = Tensor::randn(&[2, cfg.dim], 1.0, &mut rng);
    let x = Tensor::randn(&[3, cfg.text_dim], 1.0, &mut rng);
    let probe = Tensor::randn(&[2, cfg.text_dim], 1.0, &mut rng);
    check_param_gradients_on(tape_with(fault), &store, eps, |_, tape, b| {
        let mv = tape.constant(m.clone());
        let xv = tape.constant(x.clone());
        let out = vqformer_forward(tape, mv, xv, b, &cfg)?;
        let w = tape.constant(probe.clone());
        let y = tape.mul(out, w)?;
        tape.sum(y)
    })
}

/// End to end, with the decoder unfrozen so its adjoints are covered too.
fn check_model(seed: u64, eps: f64, fault: Option<AdjointFault>) -> Result<Vec<GroupError>> {
    let mut cfg = PipelineConfig::tiny();
    cfg.seed = seed;
    cfg.trainable.decoder = true;
    let mut p = Pipeline::new(cfg)?;
    p.params.redraw_trainable(seed, REDRAW_STD);
    let video = random_video(5, p.config.raw_dim, seed);
    let answer = [3, 2, 4];
    check_param_gradients_on(tape_with(fault), &p.params, eps, |store, tape, b| {
        let view = Pipeline {
            config: p.config.clone(),
            params: store.clone(),
            tokenizer: p.tokenizer.clone(),
        };
        view.loss_on_tape(tape, b, &video, "what red zebra", &answer)
    })
}

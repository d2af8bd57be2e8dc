//! Command implementations behind the `vaquita` binary.
//!
//! Exit codes: 0 ok, 1 check failed, 2 format/IO/usage, 3 degenerate input,
//! 4 shape mismatch, 5 numeric failure. Every JSON document is written with
//! sorted keys.

pub mod gradcheck;
pub mod judge;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::model::train::{load_dataset, train_loop};
use crate::model::{checkpoint, Mode, Pipeline, PipelineConfig};
use crate::sampler::{select_frames_test, select_frames_train, FrameEmbeddingSet, QueryEmbedding};
use crate::tensor::AdjointFault;
use crate::vqta;

use gradcheck::Module;
use judge::{ExactJudge, Judge, MockJudge};

/// Overrides both `--seed` and the configuration seed.
pub const SEED_ENV: &str = "VAQUITA_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "vaquita",
    version,
    about = "Question-conditioned video-text alignment toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Select frame indices from VQTA frame and query embeddings.
    Sample {
        /// `L×d_s` frame embeddings.
        #[arg(long)]
        frames: PathBuf,
        /// `d_s` query embedding; required in train mode.
        #[arg(long)]
        query: Option<PathBuf>,
        /// Number of frames to keep.
        #[arg(long = "T", visible_alias = "t")]
        t: usize,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Where to write the plan; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy answer logits for one video and question, as JSON on stdout.
    Forward {
        #[arg(long)]
        config: PathBuf,
        /// `L×raw_dim` raw frame features.
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        question: String,
        /// Prepend the critical-thinking prompt.
        #[arg(long)]
        critical: bool,
        /// Checkpoint directory; fresh seeded parameters when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// SGD over a dataset manifest; writes losses.csv and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare tape gradients with central differences.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        module: ModuleArg,
        #[arg(long, default_value_t = 1e-5, allow_negative_numbers = true)]
        eps: f64,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, value_enum, hide = true)]
        corrupt_adjoint: Option<FaultArg>,
    },
    /// Score predictions against references.
    Eval {
        /// JSON array of predicted answers.
        #[arg(long)]
        pred: PathBuf,
        /// JSON array of reference answers.
        #[arg(long)]
        refs: PathBuf,
        #[arg(long, value_enum, default_value = "exact")]
        judge: JudgeArg,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Train,
    Test,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Train => Mode::Train,
            ModeArg::Test => Mode::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModuleArg {
    Tensor,
    Perceiver,
    Vqformer,
    Model,
    All,
}

impl ModuleArg {
    fn modules(self) -> Vec<Module> {
        match self {
            ModuleArg::Tensor => vec![Module::Tensor],
            ModuleArg::Perceiver => vec![Module::Perceiver],
            ModuleArg::Vqformer => vec![Module::VQFormer],
            ModuleArg::Model => vec![Module::Model],
            ModuleArg::All => Module::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FaultArg {
    Gelu,
    Softmax,
    Matmul,
}

impl From<FaultArg> for AdjointFault {
    fn from(f: FaultArg) -> Self {
        match f {
            FaultArg::Gelu => AdjointFault::Gelu,
            FaultArg::Softmax => AdjointFault::Softmax,
            FaultArg::Matmul => AdjointFault::MatMul,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum JudgeArg {
    Exact,
    Mock,
}

/// Runs one command and returns the process exit code; errors go to stderr.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Sample {
            frames,
            query,
            t,
            mode,
            out,
        } => cmd_sample(&frames, query.as_deref(), t, mode.into(), out.as_deref()),
        Command::Forward {
            config,
            video,
            question,
            critical,
            checkpoint,
            seed,
        } => cmd_forward(
            &config,
            &video,
            &question,
            critical,
            checkpoint.as_deref(),
            seed,
        ),
        Command::Train {
            config,
            data,
            out,
            resume,
            seed,
        } => cmd_train(&config, &data, &out, resume.as_deref(), seed),
        Command::Gradcheck {
            module,
            eps,
            seeds,
            corrupt_adjoint,
        } => cmd_gradcheck(
            &module.modules(),
            eps,
            seeds,
            corrupt_adjoint.map(Into::into),
        ),
        Command::Eval { pred, refs, judge } => cmd_eval(&pred, &refs, judge),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Sorted-key JSON text of any serializable value.
pub fn to_sorted_json<T: Serialize>(value: &T) -> String {
    // `Value` maps are ordered by key.
    let v: Value = serde_json::to_value(value).expect("plain data serializes");
    serde_json::to_string(&v).expect("value serializes")
}

fn print_json(v: &Value) {
    println!("{}", to_sorted_json(v));
}

/// `VAQUITA_SEED` > `--seed` > config.
pub fn resolve_seed(flag: Option<u64>, config_seed: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| Error::format(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(flag.unwrap_or(config_seed)),
        Err(std::env::VarError::NotUnicode(_)) => {
            Err(Error::format(format!("{SEED_ENV} is not valid UTF-8")))
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(path)?;
    cfg.seed = resolve_seed(seed, cfg.seed)?;
    Ok(cfg)
}

pub fn cmd_sample(
    frames: &Path,
    query: Option<&Path>,
    t: usize,
    mode: Mode,
    out: Option<&Path>,
) -> Result<i32> {
    let set = FrameEmbeddingSet::from_tensor(&vqta::read(frames)?)?;
    let query = match query {
        Some(q) => {
            let q = QueryEmbedding::from_tensor(&vqta::read(q)?)?;
            if q.dim() != set.dim() {
                return Err(Error::shape(format!(
                    "query width {} against frame width {}",
                    q.dim(),
                    set.dim()
                )));
            }
            Some(q)
        }
        None => None,
    };
    if t > set.len() {
        eprintln!(
            "warning: T={t} exceeds the {} available frames; keeping all of them",
            set.len()
        );
    }
    let plan = match mode {
        Mode::Test => select_frames_test(set.len(), t)?,
        Mode::Train => {
            let q = query.ok_or_else(|| Error::contract("train mode needs --query"))?;
            select_frames_train(&q, &set, t)?
        }
    };
    let text = to_sorted_json(&plan);
    match out {
        Some(path) => fs::write(path, format!("{text}\n")).map_err(|e| Error::io(path, e))?,
        None => println!("{text}"),
    }
    Ok(0)
}

pub fn cmd_forward(
    config: &Path,
    video: &Path,
    question: &str,
    critical: bool,
    ckpt: Option<&Path>,
    seed: Option<u64>,
) -> Result<i32> {
    let cfg = load_config(config, seed)?;
    let mut pipeline = Pipeline::new(cfg)?;
    if let Some(dir) = ckpt {
        checkpoint::load(dir, &mut pipeline)?;
    }
    let raw = vqta::read(video)?;
    let (_, width) = raw.dims2()?;
    if width != pipeline.config.raw_dim {
        return Err(Error::shape(format!(
            "{}: frames of width {width}, config expects {}",
            video.display(),
            pipeline.config.raw_dim
        )));
    }
    let prepared = pipeline.prepare_question(question, Mode::Test, critical);
    let out = pipeline.greedy_answer(&raw, &prepared)?;
    let logits: Vec<&[f64]> = (0..out.tokens.len()).map(|i| out.logits.row(i)).collect();
    print_json(&json!({
        "answer": pipeline.tokenizer.decode(&out.tokens),
        "frames": out.plan.all,
        "logits": logits,
        "question": prepared,
        "question_tokens": out.question_tokens,
        "token_ids": out.tokens,
    }));
    Ok(0)
}

pub fn cmd_train(
    config: &Path,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    seed: Option<u64>,
) -> Result<i32> {
    let cfg = load_config(config, seed)?;
    let mut pipeline = Pipeline::new(cfg)?;
    let dataset = load_dataset(data, &pipeline)?;
    let start = match resume {
        Some(dir) => checkpoint::load(dir, &mut pipeline)?,
        None => 0,
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    checkpoint::save(out.join("initial"), &pipeline, start)?;

    let csv_path = out.join("losses.csv");
    let mut csv = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    writeln!(csv, "step,loss").map_err(|e| Error::io(&csv_path, e))?;
    let mut write_err = None;
    let mut step = start;
    let result = train_loop(&mut pipeline, &dataset, start, |s, loss| {
        step = s + 1;
        if write_err.is_none() {
            if let Err(e) = writeln!(csv, "{s},{loss}") {
                write_err = Some(e);
            }
        }
    });
    if let Some(e) = write_err {
        return Err(Error::io(&csv_path, e));
    }
    let history = result?;
    checkpoint::save(out.join("final"), &pipeline, step)?;
    print_json(&json!({
        "final_loss": history.last(),
        "initial_loss": history.first(),
        "start_step": start,
        "steps": history.len(),
    }));
    Ok(0)
}

pub fn cmd_gradcheck(
    modules: &[Module],
    eps: f64,
    seeds: u64,
    fault: Option<AdjointFault>,
) -> Result<i32> {
    let mut groups = Vec::new();
    for &m in modules {
        groups.extend(gradcheck::run(m, seeds, eps, fault)?);
    }
    let worst = groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<_> = groups.iter().filter(|g| !g.passed()).collect();
    print_json(&json!({
        "eps": eps,
        "groups": groups,
        "max_rel_err": worst,
        "passed": failed.is_empty(),
        "threshold": gradcheck::THRESHOLD,
    }));
    if failed.is_empty() {
        return Ok(0);
    }
    eprintln!("gradient check failed for {} group(s):", failed.len());
    for g in failed {
        eprintln!(
            "  {} seed {} {}: {:.3e}",
            g.module, g.seed, g.name, g.max_rel_err
        );
    }
    Ok(1)
}

fn read_string_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

pub fn cmd_eval(pred: &Path, refs: &Path, judge: JudgeArg) -> Result<i32> {
    let predictions = read_string_list(pred)?;
    let references = read_string_list(refs)?;
    let judge: &dyn Judge = match judge {
        JudgeArg::Exact => &ExactJudge,
        JudgeArg::Mock => &MockJudge,
    };
    let (accuracy, score) = judge::evaluate(judge, &predictions, &references)?;
    print_json(&json!({ "accuracy": accuracy, "score": score }));
    Ok(0)
}

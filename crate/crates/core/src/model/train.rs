//! Plain SGD over the trainable parameter groups.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};
use crate::vqta;

use super::Pipeline;

/// One training example with its answer already tokenized.
#[derive(Debug, Clone)]
pub struct Example {
    pub frames: Tensor,
    pub question: String,
    pub answer: Vec<usize>,
}

/// One line of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    /// VQTA file of raw frames, `L×raw_dim`; relative paths resolve against the manifest.
    pub frames: String,
    pub question: String,
    pub answer: String,
}

/// Reads a JSON list of records and the frame files they name.
pub fn load_dataset(manifest: impl AsRef<Path>, pipeline: &Pipeline) -> Result<Vec<Example>> {
    let manifest = manifest.as_ref();
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let records: Vec<ManifestRecord> = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("{}: {e}", manifest.display())))?;
    if records.is_empty() {
        return Err(Error::format(format!(
            "{}: empty dataset",
            manifest.display()
        )));
    }
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    records
        .into_iter()
        .map(|r| {
            let path = resolve(&base, &r.frames);
            let frames = vqta::read(&path)?;
            let (_, width) = frames.dims2()?;
            if width != pipeline.config.raw_dim {
                return Err(Error::shape(format!(
                    "{}: frames of width {width}, config expects {}",
                    path.display(),
                    pipeline.config.raw_dim
                )));
            }
            Ok(Example {
                frames,
                answer: pipeline.encode_answer(&r.answer)?,
                question: r.question,
            })
        })
        .collect()
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// Steps in one pass over `n` examples.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Mean loss of one batch; leaves gradients in `pipeline.params` and returns the loss.
pub fn batch_loss_and_grads(pipeline: &mut Pipeline, batch: &[Example]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut tape = Tape::new();
    let b = pipeline.params.bind(&mut tape);
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        losses.push(pipeline.loss_on_tape(&mut tape, &b, &ex.frames, &ex.question, &ex.answer)?);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    let mean = tape.scale(total, 1.0 / batch.len() as f64)?;
    let value = tape.value(mean).data()[0];
    if !value.is_finite() {
        return Err(Error::numeric("loss is not finite"));
    }
    tape.backward(mean)?;
    pipeline.params.collect_grads(&tape, &b)?;
    Ok(value)
}

/// Runs SGD from global step `start_step` up to `epochs × steps_per_epoch`.
///
/// Batches are taken in dataset order, so step `s` always sees the same
/// batch; resuming from a checkpoint at step `s` continues the same sequence.
/// `on_step(step, loss)` is called after each update.
pub fn train_loop<F>(
    pipeline: &mut Pipeline,
    data: &[Example],
    start_step: usize,
    mut on_step: F,
) -> Result<Vec<f64>>
where
    F: FnMut(usize, f64),
{
    if data.is_empty() {
        return Err(Error::contract("empty training set"));
    }
    let cfg = &pipeline.config;
    let per_epoch = steps_per_epoch(data.len(), cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let (lr, batch_size) = (cfg.learning_rate, cfg.batch_size);
    let mut history = Vec::with_capacity(total.saturating_sub(start_step));
    for step in start_step..total {
        let k = step % per_epoch;
        let batch = &data[k * batch_size..((k + 1) * batch_size).min(data.len())];
        let loss = batch_loss_and_grads(pipeline, batch)?;
        pipeline.params.sgd_step(lr)?;
        pipeline.params.clear_grads();
        history.push(loss);
        on_step(step, loss);
    }
    Ok(history)
}

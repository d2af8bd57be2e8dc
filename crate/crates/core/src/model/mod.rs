//! End-to-end toy pipeline: frozen encoder stub → frame sampling → perceiver
//! → VQ-Former → `[video tokens; question; answer]` → frozen decoder stub.

pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod prompt;
pub mod tokenizer;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{component_rng, Bindings, ParamStore};
use crate::sampler::{select_frames_test, select_frames_train, SamplingPlan};
use crate::tensor::{Tape, Tensor, Var};
use crate::{perceiver, vqformer};

pub use config::{PipelineConfig, Trainable};
pub use prompt::{prepend_prompt, CRITICAL_PROMPT};
pub use tokenizer::Tokenizer;

const TOKENIZER_STREAM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Test,
}

/// `[video; text]` rows, video first.
pub fn assemble_input(tape: &mut Tape, video: Var, text: Var) -> Result<Var> {
    let (_, dv) = tape.value(video).dims2()?;
    let (_, dt) = tape.value(text).dims2()?;
    if dv != dt {
        return Err(Error::shape(format!(
            "video tokens of width {dv} cannot join text of width {dt}"
        )));
    }
    tape.concat_rows(&[video, text])
}

/// Label-smoothed NLL, mean over positions.
pub fn smoothed_nll_loss(tape: &mut Tape, logits: Var, targets: &[usize], eps: f64) -> Result<Var> {
    tape.smoothed_nll(logits, targets, eps)
}

/// Configuration, every parameter group, and the tokenizer.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub params: ParamStore,
    pub tokenizer: Tokenizer,
}

/// Output of [`Pipeline::forward_on_tape`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `a×V`, row `j` predicting answer token `j`.
    pub logits: Var,
    pub plan: SamplingPlan,
    pub question_ids: Vec<usize>,
}

impl Pipeline {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let mut params = encoder::init_params(&config);
        params.extend(perceiver::init_params(&config.perceiver, seed)?);
        params.extend(vqformer::init_params(&config.vqformer, seed)?);
        let mut rng = component_rng(seed, TOKENIZER_STREAM);
        params.insert(
            tokenizer::EMBED,
            Tensor::randn(
                &[config.vocab_size, config.vqformer.text_dim],
                1.0,
                &mut rng,
            ),
        );
        params.extend(decoder::init_params(&config));
        let tokenizer = Tokenizer::new(config.vocab_size, &config.vocab)?;
        let mut pipeline = Pipeline {
            config,
            params,
            tokenizer,
        };
        pipeline.apply_trainable();
        Ok(pipeline)
    }

    /// Re-applies the trainable flags from the configuration.
    pub fn apply_trainable(&mut self) {
        let t = self.config.trainable;
        self.params.set_trainable(encoder::PREFIX, false);
        self.params.set_trainable("tokenizer.", t.tokenizer);
        self.params.set_trainable(perceiver::PREFIX, t.perceiver);
        self.params.set_trainable(vqformer::PREFIX, t.vqformer);
        self.params.set_trainable(decoder::PREFIX, t.decoder);
    }

    /// Question token ids, truncated to `max_text_len`.
    pub fn encode_question(&self, question: &str) -> Result<Vec<usize>> {
        let mut ids = self.tokenizer.encode(question);
        if ids.is_empty() {
            return Err(Error::contract("question has no tokens"));
        }
        ids.truncate(self.config.max_text_len);
        Ok(ids)
    }

    /// Answer token ids, truncated to `answer_len`.
    pub fn encode_answer(&self, answer: &str) -> Result<Vec<usize>> {
        let mut ids = self.tokenizer.encode(answer);
        if ids.is_empty() {
            return Err(Error::contract("answer has no tokens"));
        }
        ids.truncate(self.config.answer_len);
        Ok(ids)
    }

    /// The question actually fed to the model: test mode with `critical`
    /// prepends the critical-thinking prompt.
    pub fn prepare_question(&self, question: &str, mode: Mode, critical: bool) -> String {
        if critical && mode == Mode::Test {
            prepend_prompt(question, CRITICAL_PROMPT)
        } else {
            question.to_string()
        }
    }

    pub fn sample_frames(
        &self,
        raw: &Tensor,
        question_ids: &[usize],
        mode: Mode,
    ) -> Result<SamplingPlan> {
        let (len, _) = raw.dims2()?;
        let t = self.config.perceiver.frames;
        match mode {
            Mode::Test => select_frames_test(len, t),
            Mode::Train => {
                if len <= t {
                    return select_frames_test(len, t);
                }
                let frames = encoder::frame_embeddings(&self.params, &self.config, raw)?;
                let query = encoder::query_embedding(&self.params, question_ids)?;
                select_frames_train(&query, &frames, t)
            }
        }
    }

    /// Records the whole forward pass. `answer` supplies the teacher-forced
    /// answer tokens; its last token is never fed as input.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        raw: &Tensor,
        question: &str,
        answer: &[usize],
        mode: Mode,
    ) -> Result<ForwardOutput> {
        if answer.is_empty() {
            return Err(Error::contract("at least one answer position is required"));
        }
        let question_ids = self.encode_question(question)?;
        let plan = self.sample_frames(raw, &question_ids, mode)?;
        let feats = encoder::patch_features(&self.params, &self.config, raw, &plan.all)?;
        let feats = tape.constant(feats);

        let latents = perceiver::video_perceiver_forward(tape, feats, b, &self.config.perceiver)?;
        let table = b.get(tokenizer::EMBED)?;
        let text = tape.embed_lookup(table, &question_ids)?;
        let video = vqformer::vqformer_forward(tape, latents, text, b, &self.config.vqformer)?;

        let mut seq = assemble_input(tape, video, text)?;
        if answer.len() > 1 {
            let prefix = tape.embed_lookup(table, &answer[..answer.len() - 1])?;
            seq = tape.concat_rows(&[seq, prefix])?;
        }
        let all_logits = decoder::decoder_forward(tape, seq, b)?;
        let start = self.config.perceiver.latents + question_ids.len() - 1;
        let logits = tape.slice_rows(all_logits, start, start + answer.len())?;
        Ok(ForwardOutput {
            logits,
            plan,
            question_ids,
        })
    }

    /// Teacher-forced answer logits, `a×V`.
    pub fn forward(
        &self,
        raw: &Tensor,
        question: &str,
        answer: &[usize],
        mode: Mode,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let out = self.forward_on_tape(&mut tape, &b, raw, question, answer, mode)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Smoothed NLL of one example.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        raw: &Tensor,
        question: &str,
        answer: &[usize],
    ) -> Result<Var> {
        let out = self.forward_on_tape(tape, b, raw, question, answer, Mode::Train)?;
        smoothed_nll_loss(tape, out.logits, answer, self.config.label_smoothing)
    }

    /// Greedy decode of `answer_len` tokens in test mode.
    pub fn greedy_answer(&self, raw: &Tensor, question: &str) -> Result<GreedyOutput> {
        let mut tokens: Vec<usize> = Vec::with_capacity(self.config.answer_len);
        let mut rows = Vec::with_capacity(self.config.answer_len);
        let mut question_tokens = 0;
        let mut plan = None;
        for _ in 0..self.config.answer_len {
            // The final slot is a placeholder: row j never sees answer[j].
            let mut probe = tokens.clone();
            probe.push(tokenizer::PAD_ID);
            let mut tape = Tape::new();
            let b = self.params.bind(&mut tape);
            let out = self.forward_on_tape(&mut tape, &b, raw, question, &probe, Mode::Test)?;
            question_tokens = out.question_ids.len();
            plan = Some(out.plan);
            let logits = tape.value(out.logits);
            let last = logits.row(probe.len() - 1).to_vec();
            let best = argmax(&last);
            rows.push(last);
            tokens.push(best);
        }
        Ok(GreedyOutput {
            logits: Tensor::from_rows(&rows)?,
            tokens,
            question_tokens,
            plan: plan.expect("answer_len >= 1"),
        })
    }
}

#[derive(Debug, Clone)]
pub struct GreedyOutput {
    pub logits: Tensor,
    pub tokens: Vec<usize>,
    pub question_tokens: usize,
    pub plan: SamplingPlan,
}

/// First index of the maximum.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Random raw frames for tests, demos and fixtures.
pub fn random_video(frames: usize, raw_dim: usize, seed: u64) -> Tensor {
    let mut rng = component_rng(seed, 99);
    Tensor::randn(&[frames, raw_dim], 1.0, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::check_param_gradients;

    #[test]
    fn assemble_puts_video_first() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::full(&[2, 3], 1.0));
        let x = tape.constant(Tensor::full(&[3, 3], 2.0));
        let s = assemble_input(&mut tape, v, x).unwrap();
        assert_eq!(tape.shape(s), &[5, 3]);
        assert_eq!(tape.value(s).row(1), &[1.0; 3]);
        assert_eq!(tape.value(s).row(2), &[2.0; 3]);
        let head = tape.slice_rows(s, 0, 2).unwrap();
        let tail = tape.slice_rows(s, 2, 5).unwrap();
        assert!(tape.value(head).bit_eq(tape.value(v)));
        assert!(tape.value(tail).bit_eq(tape.value(x)));
        let narrow = tape.constant(Tensor::full(&[1, 2], 0.0));
        assert!(assemble_input(&mut tape, v, narrow).is_err());
    }

    #[test]
    fn logits_cover_answer_positions() {
        let p = Pipeline::new(PipelineConfig::desk()).unwrap();
        let video = random_video(10, p.config.raw_dim, 1);
        let answer = p.encode_answer("red shirt").unwrap();
        let logits = p
            .forward(&video, "what color is the shirt?", &answer, Mode::Train)
            .unwrap();
        assert_eq!(logits.shape(), &[2, p.config.vocab_size]);
    }

    #[test]
    fn empty_question_is_rejected() {
        let p = Pipeline::new(PipelineConfig::desk()).unwrap();
        let video = random_video(6, p.config.raw_dim, 1);
        assert!(matches!(
            p.forward(&video, " ?? ", &[2], Mode::Test),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn test_mode_sampling_ignores_the_question() {
        let p = Pipeline::new(PipelineConfig::desk()).unwrap();
        let video = random_video(40, p.config.raw_dim, 2);
        let a = p
            .sample_frames(
                &video,
                &p.encode_question("what is the man doing").unwrap(),
                Mode::Test,
            )
            .unwrap();
        let b = p
            .sample_frames(&video, &p.encode_question("red dog").unwrap(), Mode::Test)
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.all, vec![0, 10, 20, 30]);
    }

    #[test]
    fn same_seed_same_logits() {
        let video = random_video(12, PipelineConfig::desk().raw_dim, 3);
        let run = || {
            let p = Pipeline::new(PipelineConfig::desk()).unwrap();
            p.forward(&video, "what is the woman doing", &[5, 6], Mode::Test)
                .unwrap()
        };
        assert!(run().bit_eq(&run()));
    }

    #[test]
    fn critical_prompt_only_in_test_mode() {
        let p = Pipeline::new(PipelineConfig::desk()).unwrap();
        assert_eq!(p.prepare_question("Q?", Mode::Train, true), "Q?");
        assert_eq!(p.prepare_question("Q?", Mode::Test, false), "Q?");
        assert_eq!(
            p.prepare_question("Q?", Mode::Test, true),
            "Please be critical. Q?"
        );
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let mut cfg = PipelineConfig::tiny();
        cfg.trainable.decoder = true;
        let mut p = Pipeline::new(cfg).unwrap();
        p.params.redraw_trainable(11, 0.5);
        let video = random_video(5, 3, 8);
        let answer = vec![3, 2, 4];
        let report = check_param_gradients(&p.params, 1e-5, |store, tape, b| {
            let view = Pipeline {
                config: p.config.clone(),
                params: store.clone(),
                tokenizer: p.tokenizer.clone(),
            };
            view.loss_on_tape(tape, b, &video, "what red zebra", &answer)
        })
        .unwrap();
        assert!(report.iter().any(|g| g.name.starts_with("decoder.")));
        assert!(!report.iter().any(|g| g.name.starts_with("encoder.")));
        for g in report {
            assert!(g.max_rel_err < 1e-4, "{}: {}", g.name, g.max_rel_err);
        }
    }
}

//! Answer judges for `vaquita eval`.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JudgeVerdict {
    pub correct: bool,
    score: u8,
}

impl JudgeVerdict {
    pub fn new(correct: bool, score: u8) -> Result<Self> {
        if !(1..=5).contains(&score) {
            return Err(Error::contract(format!(
                "judge score {score} outside 1..=5"
            )));
        }
        Ok(JudgeVerdict { correct, score })
    }

    pub fn score(&self) -> u8 {
        self.score
    }
}

/// Anything that can grade a predicted answer against a reference.
pub trait Judge {
    fn judge(&self, prediction: &str, reference: &str) -> Result<JudgeVerdict>;
}

/// Lowercase, trim surrounding ASCII punctuation from each word, collapse whitespace.
pub fn normalize(s: &str) -> String {
    s.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| c.is_ascii_punctuation())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Correct iff the normalized strings agree; score 5 or 1.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactJudge;

impl Judge for ExactJudge {
    fn judge(&self, prediction: &str, reference: &str) -> Result<JudgeVerdict> {
        let correct = normalize(prediction) == normalize(reference);
        JudgeVerdict::new(correct, if correct { 5 } else { 1 })
    }
}

/// Deterministic stand-in for an external judge: correctness follows the
/// exact judge, the score is drawn from a hash of the pair
/// (3–5 when correct, 1–2 otherwise).
#[derive(Debug, Clone, Copy, Default)]
pub struct MockJudge;

impl Judge for MockJudge {
    fn judge(&self, prediction: &str, reference: &str) -> Result<JudgeVerdict> {
        let (p, r) = (normalize(prediction), normalize(reference));
        let mut hasher = Sha256::new();
        hasher.update(p.as_bytes());
        hasher.update([0u8]);
        hasher.update(r.as_bytes());
        let h = hasher.finalize()[0];
        let correct = p == r;
        let score = if correct { 3 + h % 3 } else { 1 + h % 2 };
        JudgeVerdict::new(correct, score)
    }
}

/// Accuracy and mean score over paired lists.
pub fn evaluate(
    judge: &dyn Judge,
    predictions: &[String],
    references: &[String],
) -> Result<(f64, f64)> {
    if predictions.len() != references.len() {
        return Err(Error::format(format!(
            "{} predictions against {} references",
            predictions.len(),
            references.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::format("no predictions to evaluate"));
    }
    let mut correct = 0usize;
    let mut score = 0u64;
    for (p, r) in predictions.iter().zip(references) {
        let v = judge.judge(p, r)?;
        correct += usize::from(v.correct);
        score += u64::from(v.score());
    }
    let n = predictions.len() as f64;
    Ok((correct as f64 / n, score as f64 / n))
}

/// Test-time instruction placed in front of the question.
pub const CRITICAL_PROMPT: &str = "Please be critical";

/// `prompt + ". " + question`, or `prompt + " " + question` when the prompt
/// already ends in `.`, `!` or `?`. An empty prompt leaves the question as is.
///
/// Not idempotent: prepending twice yields the prompt twice.
pub fn prepend_prompt(question: &str, prompt: &str) -> String {
    let prompt = prompt.trim_end();
    if prompt.is_empty() {
        return question.to_string();
    }
    if prompt.ends_with(['.', '!', '?']) {
        format!("{prompt} {question}")
    } else {
        format!("{prompt}. {question}")
    }
}

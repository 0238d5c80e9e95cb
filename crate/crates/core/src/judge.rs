//! Model-as-judge scoring over the gateway protocol.

use serde::{Deserialize, Serialize};

use crate::gateway::{GatewayClient, GenerationParams, GenerationRequest, RetryPolicy};

pub const DEFAULT_RUBRIC: &str =
    "Score 1 if the candidate answer is equivalent in meaning to the reference answer, otherwise score 0.";

const JUDGE_PROMPT: &str = "You are grading a model answer against a reference.\n\
Rubric:\n{rubric}\n\
Reference answer:\n{reference}\n\
Candidate answer:\n{pred}\n\
Reply with a first line of the form \"SCORE: <number between 0 and 1>\" or one of WIN, TIE, LOSS, followed by a short rationale.\n";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Win,
    Tie,
    Loss,
    Score(f64),
}

impl Verdict {
    /// Win 1, tie 0.5, loss 0, scores as given.
    pub fn as_score(&self) -> f64 {
        match self {
            Verdict::Win => 1.0,
            Verdict::Tie => 0.5,
            Verdict::Loss => 0.0,
            Verdict::Score(s) => *s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgement {
    pub verdict: Verdict,
    pub rationale: String,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum JudgeError {
    #[error("judge unavailable: {0}")]
    JudgeUnavailable(String),
    #[error("could not parse a verdict from judge reply {0:?}")]
    UnparseableVerdict(String),
}

pub fn render_judge_prompt(pred: &str, reference: &str, rubric: &str) -> String {
    JUDGE_PROMPT
        .replace("{rubric}", rubric)
        .replace("{reference}", reference)
        .replace("{pred}", pred)
}

/// Reads the leading verdict token of a judge reply.
pub fn parse_verdict(reply: &str) -> Result<Judgement, JudgeError> {
    let unparseable = || JudgeError::UnparseableVerdict(reply.to_string());
    let text = reply.trim_start();

    if text
        .get(..5)
        .is_some_and(|h| h.eq_ignore_ascii_case("score"))
    {
        let rest = text[5..].trim_start();
        let rest = rest.strip_prefix(':').ok_or_else(unparseable)?.trim_start();
        let end = rest
            .find(|c: char| !(c.is_ascii_digit() || c == '.'))
            .unwrap_or(rest.len());
        let score: f64 = rest[..end].parse().map_err(|_| unparseable())?;
        if !(0.0..=1.0).contains(&score) {
            return Err(unparseable());
        }
        return Ok(Judgement {
            verdict: Verdict::Score(score),
            rationale: rest[end..].trim().to_string(),
        });
    }

    let end = text
        .find(|c: char| !c.is_ascii_alphabetic())
        .unwrap_or(text.len());
    let verdict = match text[..end].to_ascii_uppercase().as_str() {
        "WIN" => Verdict::Win,
        "TIE" => Verdict::Tie,
        "LOSS" => Verdict::Loss,
        _ => return Err(unparseable()),
    };
    let rationale = text[end..].trim_start_matches(|c: char| c.is_ascii_punctuation());
    Ok(Judgement {
        verdict,
        rationale: rationale.trim().to_string(),
    })
}

/// Asks the judge endpoint to grade `pred` against `reference`.
pub async fn judge(
    client: &GatewayClient,
    instance_id: &str,
    pred: &str,
    reference: &str,
    rubric: &str,
    policy: &RetryPolicy,
) -> Result<Judgement, JudgeError> {
    let req = GenerationRequest::generation(
        instance_id,
        render_judge_prompt(pred, reference, rubric),
        GenerationParams {
            temperature: 0.0,
            ..GenerationParams::default()
        },
    );
    let resp = client.generate_with_retry(&req, policy).await;
    if resp.is_error() {
        return Err(JudgeError::JudgeUnavailable(resp.error.unwrap_or_default()));
    }
    parse_verdict(resp.text.as_deref().unwrap_or_default())
}

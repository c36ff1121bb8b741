//! The six evaluation procedures.
//!
//! | id                  | passes                                  | abstains when                         |
//! |---------------------|-----------------------------------------|---------------------------------------|
//! | `original`          | 4-option prompt                         | never                                 |
//! | `augmented`         | 5-option prompt with IDK                | the model picks IDK                   |
//! | `self-eval`         | 4-option prompt, then yes/no check      | the model rejects its own answer      |
//! | `entropy-original`  | 4-option prompt with logprobs           | entropy > mean + std over the run     |
//! | `entropy-augmented` | 5-option prompt with logprobs           | entropy > mean + std over the run     |
//! | `second-guess`      | 4-option prompt, then 5-option prompt   | the answer changes between the passes |
//!
//! Answers are compared by [`ChoiceId`], never by letter, so the independent
//! shuffles of the two Second Guess passes cannot manufacture or hide a switch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{cached_query, Backend, BackendError, Decoding, ModelRequest, ModelResponse, ResponseCache};
use crate::mcqa::{
    augment_with_idk_at, parse_answer, parse_verdict, render_prompt, render_verification, shuffle_options,
    ChoiceId, ChoiceSet, IdkPlacement, McqaError, ParsedAnswer, PromptKind, PromptVariant, Question, Verdict,
};
use crate::seed::derive_seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("question {question}: {source}")]
    Backend {
        question: String,
        #[source]
        source: BackendError,
    },
    #[error("response carries fewer than two answer-token logprobs")]
    MissingLogprobs,
    #[error("entropy distribution is empty")]
    EmptyDistribution,
    #[error(transparent)]
    Mcqa(#[from] McqaError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolId {
    Original,
    Augmented,
    SelfEval,
    EntropyOriginal,
    EntropyAugmented,
    SecondGuess,
}

impl ProtocolId {
    pub const ALL: [ProtocolId; 6] = [
        ProtocolId::Original,
        ProtocolId::Augmented,
        ProtocolId::SelfEval,
        ProtocolId::EntropyOriginal,
        ProtocolId::EntropyAugmented,
        ProtocolId::SecondGuess,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolId::Original => "original",
            ProtocolId::Augmented => "augmented",
            ProtocolId::SelfEval => "self-eval",
            ProtocolId::EntropyOriginal => "entropy-original",
            ProtocolId::EntropyAugmented => "entropy-augmented",
            ProtocolId::SecondGuess => "second-guess",
        }
    }

    /// Row label used in reports.
    pub fn display_name(self) -> &'static str {
        match self {
            ProtocolId::Original => "Original",
            ProtocolId::Augmented => "Augmented",
            ProtocolId::SelfEval => "Self-Evaluation",
            ProtocolId::EntropyOriginal => "Entropy Thresholding (Original)",
            ProtocolId::EntropyAugmented => "Entropy Thresholding (Augmented)",
            ProtocolId::SecondGuess => "Second Guess",
        }
    }

    pub fn uses_entropy(self) -> bool {
        matches!(self, ProtocolId::EntropyOriginal | ProtocolId::EntropyAugmented)
    }
}

impl fmt::Display for ProtocolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProtocolId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ProtocolId::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| {
                let known: Vec<_> = ProtocolId::ALL.iter().map(|p| p.as_str()).collect();
                format!("unknown protocol {s:?}; expected one of {}", known.join(", "))
            })
    }
}

/// Divisor used for standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdConvention {
    /// Divide by N.
    #[default]
    Population,
    /// Divide by N - 1.
    Sample,
}

impl StdConvention {
    pub fn std(self, values: &[f64]) -> f64 {
        let n = values.len();
        if n == 0 {
            return 0.0;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        let divisor = match self {
            StdConvention::Population => n,
            StdConvention::Sample if n > 1 => n - 1,
            StdConvention::Sample => return 0.0,
        };
        (ss / divisor as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerSource {
    Preserved,
    SwitchedToIdk,
    SwitchedToOther,
    ExplicitIdk,
    EntropyAbstain,
    VerifierRejected,
    /// The answering pass could not be parsed; scored as incorrect.
    Unparseable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "choice", rename_all = "snake_case")]
pub enum FinalValue {
    Choice(ChoiceId),
    /// No readable answer; counts as incorrect, never as an abstention.
    Unparseable,
    Abstain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub value: FinalValue,
    pub source: AnswerSource,
}

impl FinalAnswer {
    pub fn preserved(choice: ChoiceId) -> Self {
        Self {
            value: FinalValue::Choice(choice),
            source: AnswerSource::Preserved,
        }
    }

    pub fn abstain(source: AnswerSource) -> Self {
        Self {
            value: FinalValue::Abstain,
            source,
        }
    }

    pub fn unparseable() -> Self {
        Self {
            value: FinalValue::Unparseable,
            source: AnswerSource::Unparseable,
        }
    }

    pub fn is_abstain(&self) -> bool {
        self.value == FinalValue::Abstain
    }
}

/// One MCQA pass: what was asked and what came back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassRecord {
    pub prompt_kind: PromptKind,
    /// Letter → choice mapping shown to the model.
    pub choice_set: ChoiceSet,
    pub answer: ParsedAnswer,
    /// Underlying choice of the parsed letter.
    pub choice: Option<ChoiceId>,
    /// Answer-token entropy in nats, when logprobs were returned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationRecord {
    pub raw: String,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRecord {
    pub question_id: String,
    pub gold: ChoiceId,
    pub pass1: PassRecord,
    /// Second answering pass; only Second Guess has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass2: Option<PassRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification: Option<VerificationRecord>,
    #[serde(rename = "final")]
    pub final_answer: FinalAnswer,
    /// Whether the first pass named the gold choice.
    pub originally_correct: bool,
}

impl PairedRecord {
    fn single(question: &Question, pass1: PassRecord, final_answer: FinalAnswer) -> Self {
        let gold = question.gold_choice();
        Self {
            question_id: question.id.clone(),
            gold,
            originally_correct: pass1.choice == Some(gold),
            pass1,
            pass2: None,
            verification: None,
            final_answer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub decoding: Decoding,
    pub idk_placement: IdkPlacement,
    /// Second Guess pass 2 augments pass 1's ordering instead of reshuffling.
    pub reuse_pass1_order: bool,
    pub entropy_std: StdConvention,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            decoding: Decoding::default(),
            idk_placement: IdkPlacement::Random,
            reuse_pass1_order: false,
            entropy_std: StdConvention::Population,
        }
    }
}

/// Backend, optional cache and settings shared by every question of a run.
pub struct ProtocolContext<'a> {
    pub backend: &'a dyn Backend,
    pub cache: Option<&'a ResponseCache>,
    pub config: ProtocolConfig,
}

/// Per-question seeds, derived from the run seed, the question id and the
/// pass, so the passes are independent and the run reproducible.
#[derive(Debug, Clone, Copy)]
struct PassSeeds {
    original: u64,
    augmented: u64,
    idk: u64,
    verification: u64,
}

impl PassSeeds {
    fn new(run_seed: u64, question_id: &str) -> Self {
        let s = |tag| derive_seed(run_seed, &[question_id, tag]);
        Self {
            original: s("original"),
            augmented: s("augmented"),
            idk: s("idk"),
            verification: s("verification"),
        }
    }
}

impl ProtocolContext<'_> {
    fn ask(&self, question: &Question, prompt: PromptVariant, seed: u64, want_logprobs: bool) -> Result<ModelResponse, ProtocolError> {
        let request = ModelRequest {
            prompt,
            decoding: Decoding {
                want_logprobs,
                ..self.config.decoding
            },
            seed,
        };
        cached_query(self.cache, self.backend, &request).map_err(|source| ProtocolError::Backend {
            question: question.id.clone(),
            source,
        })
    }

    fn answer_pass(
        &self,
        question: &Question,
        choices: ChoiceSet,
        seed: u64,
        want_logprobs: bool,
    ) -> Result<PassRecord, ProtocolError> {
        let prompt = render_prompt(&question.stem, &choices);
        let prompt_kind = prompt.kind;
        let response = self.ask(question, prompt, seed, want_logprobs)?;
        let entropy = match answer_entropy(&response) {
            Ok(h) => Some(h),
            Err(e) if want_logprobs => return Err(e),
            Err(_) => None,
        };
        let answer = parse_answer(&response.text, &choices);
        let choice = answer.letter().and_then(|l| choices.choice_for(l));
        Ok(PassRecord {
            prompt_kind,
            choice_set: choices,
            answer,
            choice,
            entropy,
        })
    }

    fn original_pass(&self, question: &Question, seeds: &PassSeeds, want_logprobs: bool) -> Result<PassRecord, ProtocolError> {
        let choices = shuffle_options(question, seeds.original);
        self.answer_pass(question, choices, seeds.original, want_logprobs)
    }

    fn augmented_choices(&self, question: &Question, seeds: &PassSeeds) -> Result<ChoiceSet, ProtocolError> {
        let base = shuffle_options(question, seeds.augmented);
        Ok(augment_with_idk_at(&base, self.config.idk_placement, seeds.idk)?)
    }

    fn augmented_pass(&self, question: &Question, seeds: &PassSeeds, want_logprobs: bool) -> Result<PassRecord, ProtocolError> {
        let choices = self.augmented_choices(question, seeds)?;
        self.answer_pass(question, choices, seeds.augmented, want_logprobs)
    }
}

fn single_pass_final(pass: &PassRecord) -> FinalAnswer {
    match pass.choice {
        Some(ChoiceId::Idk) => FinalAnswer::abstain(AnswerSource::ExplicitIdk),
        Some(choice) => FinalAnswer::preserved(choice),
        None => FinalAnswer::unparseable(),
    }
}

/// Four shuffled options, one query. Never abstains.
pub fn run_original(question: &Question, ctx: &ProtocolContext<'_>, run_seed: u64) -> Result<PairedRecord, ProtocolError> {
    let seeds = PassSeeds::new(run_seed, &question.id);
    let pass1 = ctx.original_pass(question, &seeds, false)?;
    let final_answer = single_pass_final(&pass1);
    Ok(PairedRecord::single(question, pass1, final_answer))
}

/// Five options including IDK, one query. Choosing IDK is the only way to
/// abstain, and since IDK is never gold such records are not originally
/// correct.
pub fn run_augmented(question: &Question, ctx: &ProtocolContext<'_>, run_seed: u64) -> Result<PairedRecord, ProtocolError> {
    let seeds = PassSeeds::new(run_seed, &question.id);
    let pass1 = ctx.augmented_pass(question, &seeds, false)?;
    let final_answer = single_pass_final(&pass1);
    Ok(PairedRecord::single(question, pass1, final_answer))
}

/// The Second Guess decision: keep the first answer if the second pass named
/// the same choice, abstain otherwise.
///
/// `None` stands for an unparseable pass; it never matches anything.
pub fn resolve_second_guess(pass1: Option<ChoiceId>, pass2: Option<ChoiceId>) -> FinalAnswer {
    match (pass1, pass2) {
        (Some(first), Some(second)) if first == second => FinalAnswer::preserved(first),
        (_, Some(ChoiceId::Idk)) => FinalAnswer::abstain(AnswerSource::SwitchedToIdk),
        _ => FinalAnswer::abstain(AnswerSource::SwitchedToOther),
    }
}

pub fn second_guess(question: &Question, ctx: &ProtocolContext<'_>, run_seed: u64) -> Result<PairedRecord, ProtocolError> {
    let seeds = PassSeeds::new(run_seed, &question.id);
    let pass1 = ctx.original_pass(question, &seeds, false)?;
    let pass2 = if ctx.config.reuse_pass1_order {
        let choices = augment_with_idk_at(&pass1.choice_set, ctx.config.idk_placement, seeds.idk)?;
        ctx.answer_pass(question, choices, seeds.augmented, false)?
    } else {
        ctx.augmented_pass(question, &seeds, false)?
    };
    let final_answer = resolve_second_guess(pass1.choice, pass2.choice);
    let mut record = PairedRecord::single(question, pass1, final_answer);
    record.pass2 = Some(pass2);
    Ok(record)
}

/// Answer, then ask the model to confirm its own answer.
///
/// An unparseable first pass skips verification and is scored as incorrect.
pub fn self_evaluation(question: &Question, ctx: &ProtocolContext<'_>, run_seed: u64) -> Result<PairedRecord, ProtocolError> {
    let seeds = PassSeeds::new(run_seed, &question.id);
    let pass1 = ctx.original_pass(question, &seeds, false)?;
    let (Some(letter), Some(choice)) = (pass1.answer.letter(), pass1.choice) else {
        return Ok(PairedRecord::single(question, pass1, FinalAnswer::unparseable()));
    };
    let prompt = render_verification(&question.stem, &pass1.choice_set, letter)
        .expect("parsed letter is inside the choice set");
    let response = ctx.ask(question, prompt, seeds.verification, false)?;
    let verdict = parse_verdict(&response.text);
    let final_answer = match verdict {
        Verdict::Accept => FinalAnswer::preserved(choice),
        Verdict::Reject | Verdict::Unparseable => FinalAnswer::abstain(AnswerSource::VerifierRejected),
    };
    let mut record = PairedRecord::single(question, pass1, final_answer);
    record.verification = Some(VerificationRecord {
        raw: response.text,
        verdict,
    });
    Ok(record)
}

/// First phase of an entropy protocol: answer with logprobs, no abstention
/// yet. [`apply_entropy_abstention`] converts records once the whole run's
/// entropies are known.
pub fn entropy_pass(
    question: &Question,
    ctx: &ProtocolContext<'_>,
    run_seed: u64,
    augmented: bool,
) -> Result<PairedRecord, ProtocolError> {
    let seeds = PassSeeds::new(run_seed, &question.id);
    let pass1 = if augmented {
        ctx.augmented_pass(question, &seeds, true)?
    } else {
        ctx.original_pass(question, &seeds, true)?
    };
    let final_answer = single_pass_final(&pass1);
    Ok(PairedRecord::single(question, pass1, final_answer))
}

/// Runs the per-question part of `protocol`.
pub fn run_question(
    protocol: ProtocolId,
    question: &Question,
    ctx: &ProtocolContext<'_>,
    run_seed: u64,
) -> Result<PairedRecord, ProtocolError> {
    match protocol {
        ProtocolId::Original => run_original(question, ctx, run_seed),
        ProtocolId::Augmented => run_augmented(question, ctx, run_seed),
        ProtocolId::SelfEval => self_evaluation(question, ctx, run_seed),
        ProtocolId::EntropyOriginal => entropy_pass(question, ctx, run_seed, false),
        ProtocolId::EntropyAugmented => entropy_pass(question, ctx, run_seed, true),
        ProtocolId::SecondGuess => second_guess(question, ctx, run_seed),
    }
}

/// Entropy in nats of the first generated token.
///
/// Uses the reported top-k probabilities plus one residual outcome holding
/// whatever mass they leave uncovered.
pub fn answer_entropy(response: &ModelResponse) -> Result<f64, ProtocolError> {
    let logprobs = response
        .answer_token_logprobs
        .as_deref()
        .filter(|l| l.len() >= 2)
        .ok_or(ProtocolError::MissingLogprobs)?;
    let probs: Vec<f64> = logprobs.iter().map(|t| t.logprob.exp()).collect();
    let residual = (1.0 - probs.iter().sum::<f64>()).max(0.0);
    let h: f64 = probs
        .iter()
        .chain(std::iter::once(&residual))
        .filter(|p| **p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(h.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyStats {
    pub mean: f64,
    pub std: f64,
    pub threshold: f64,
}

pub fn entropy_threshold(entropies: &[f64], convention: StdConvention) -> Result<EntropyStats, ProtocolError> {
    if entropies.is_empty() {
        return Err(ProtocolError::EmptyDistribution);
    }
    let mean = entropies.iter().sum::<f64>() / entropies.len() as f64;
    let std = convention.std(entropies);
    Ok(EntropyStats {
        mean,
        std,
        threshold: mean + std,
    })
}

/// Converts every record whose pass-1 entropy strictly exceeds the threshold
/// into an abstention. `originally_correct` is kept.
pub fn apply_entropy_abstention(
    records: Vec<PairedRecord>,
    stats: &EntropyStats,
) -> Result<Vec<PairedRecord>, ProtocolError> {
    records
        .into_iter()
        .map(|mut record| {
            let entropy = record.pass1.entropy.ok_or(ProtocolError::MissingLogprobs)?;
            if entropy > stats.threshold {
                record.final_answer = FinalAnswer::abstain(AnswerSource::EntropyAbstain);
            }
            Ok(record)
        })
        .collect()
}

/// Run-level step after all questions are answered: the entropy protocols
/// threshold here, the rest pass through.
pub fn finalize_run(
    protocol: ProtocolId,
    records: Vec<PairedRecord>,
    convention: StdConvention,
) -> Result<(Vec<PairedRecord>, Option<EntropyStats>), ProtocolError> {
    if !protocol.uses_entropy() {
        return Ok((records, None));
    }
    let entropies = records
        .iter()
        .map(|r| r.pass1.entropy.ok_or(ProtocolError::MissingLogprobs))
        .collect::<Result<Vec<_>, _>>()?;
    let stats = entropy_threshold(&entropies, convention)?;
    Ok((apply_entropy_abstention(records, &stats)?, Some(stats)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::TokenLogprob;

    fn response_with(probs: &[f64]) -> ModelResponse {
        ModelResponse {
            text: "A".into(),
            answer_token_logprobs: Some(
                probs
                    .iter()
                    .map(|p| TokenLogprob { token: "x".into(), logprob: p.ln() })
                    .collect(),
            ),
            latency_ms: 0,
            backend_id: "t".into(),
            usage: None,
        }
    }

    #[test]
    fn entropy_examples() {
        let uniform = answer_entropy(&response_with(&[0.25; 4])).unwrap();
        assert!((uniform - 4f64.ln()).abs() < 1e-12);
        let degenerate = ModelResponse {
            answer_token_logprobs: Some(vec![
                TokenLogprob { token: "A".into(), logprob: 0.0 },
                TokenLogprob { token: "B".into(), logprob: -1e9 },
            ]),
            ..response_with(&[])
        };
        assert_eq!(answer_entropy(&degenerate).unwrap(), 0.0);
        let h = answer_entropy(&response_with(&[0.5, 0.3])).unwrap();
        let expected = -(0.5f64 * 0.5f64.ln() + 0.3 * 0.3f64.ln() + 0.2 * 0.2f64.ln());
        assert!((h - expected).abs() < 1e-12);
        assert!((h - 1.0297).abs() < 1e-4);
        assert_eq!(answer_entropy(&response_with(&[1.0])), Err(ProtocolError::MissingLogprobs));
        let none = ModelResponse { answer_token_logprobs: None, ..response_with(&[]) };
        assert_eq!(answer_entropy(&none), Err(ProtocolError::MissingLogprobs));
    }

    #[test]
    fn threshold_examples() {
        let s = entropy_threshold(&[1.0, 1.0, 1.0], StdConvention::Population).unwrap();
        assert_eq!((s.mean, s.std, s.threshold), (1.0, 0.0, 1.0));
        let s = entropy_threshold(&[0.0, 2.0], StdConvention::Population).unwrap();
        assert_eq!((s.mean, s.std, s.threshold), (1.0, 1.0, 2.0));
        let s = entropy_threshold(&[0.0, 2.0], StdConvention::Sample).unwrap();
        assert!((s.std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(entropy_threshold(&[], StdConvention::Population), Err(ProtocolError::EmptyDistribution));
    }

    #[test]
    fn eq1_cases() {
        let b = ChoiceId::Option(1);
        let c = ChoiceId::Option(2);
        assert_eq!(resolve_second_guess(Some(b), Some(b)), FinalAnswer::preserved(b));
        assert_eq!(
            resolve_second_guess(Some(b), Some(ChoiceId::Idk)),
            FinalAnswer::abstain(AnswerSource::SwitchedToIdk)
        );
        assert_eq!(resolve_second_guess(Some(b), Some(c)), FinalAnswer::abstain(AnswerSource::SwitchedToOther));
        assert_eq!(resolve_second_guess(Some(b), None), FinalAnswer::abstain(AnswerSource::SwitchedToOther));
        assert_eq!(resolve_second_guess(None, None), FinalAnswer::abstain(AnswerSource::SwitchedToOther));
    }

    #[test]
    fn protocol_ids_round_trip() {
        for p in ProtocolId::ALL {
            assert_eq!(p.as_str().parse::<ProtocolId>().unwrap(), p);
            assert_eq!(serde_json::to_string(&p).unwrap(), format!("\"{}\"", p.as_str()));
        }
        assert!("best".parse::<ProtocolId>().is_err());
    }
}

//! Deterministic simulated model.
//!
//! Each question has a [`KnowledgeProfile`] describing how the model behaves
//! on it. Stable profiles always name the same underlying choice; unstable
//! ones sample from one distribution under the plain prompt and another under
//! the augmented prompt. The exact distribution is returned as the answer-token
//! logprobs, which makes entropy and switch rates computable in closed form.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, ModelRequest, ModelResponse, TokenLogprob};
use crate::mcqa::{ChoiceId, ChoiceKind, PromptKind, PromptVariant, OPTION_COUNT};
use crate::seed::rng_for;

/// Logprob reported for outcomes with zero probability; logprobs must stay
/// finite.
pub const FLOOR_LOGPROB: f64 = -30.0;

const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KnowledgeProfile {
    /// Always answers the gold option.
    StableKnown,
    /// Always answers the option at `wrong_choice` (an index into the
    /// normalized question's options).
    StableWrong { wrong_choice: usize },
    /// `dist_plain[i]` is the probability of option `i` under the four-option
    /// prompt; `dist_augmented[4]` is the probability of answering IDK.
    Unstable {
        dist_plain: [f64; OPTION_COUNT],
        dist_augmented: [f64; OPTION_COUNT + 1],
    },
}

impl KnowledgeProfile {
    pub fn validate(&self) -> Result<(), String> {
        fn check(dist: &[f64]) -> Result<(), String> {
            if dist.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(format!("distribution {dist:?} has a negative or non-finite entry"));
            }
            let sum: f64 = dist.iter().sum();
            if (sum - 1.0).abs() > SUM_TOLERANCE {
                return Err(format!("distribution {dist:?} sums to {sum}"));
            }
            Ok(())
        }
        match self {
            KnowledgeProfile::StableKnown => Ok(()),
            KnowledgeProfile::StableWrong { wrong_choice } => {
                if *wrong_choice < OPTION_COUNT {
                    Ok(())
                } else {
                    Err(format!("wrong_choice {wrong_choice} out of range"))
                }
            }
            KnowledgeProfile::Unstable {
                dist_plain,
                dist_augmented,
            } => {
                check(dist_plain)?;
                check(dist_augmented)
            }
        }
    }

    /// Probability of answering `choice` under a prompt of `kind`.
    pub fn probability(&self, choice: ChoiceId, gold: ChoiceId, kind: PromptKind) -> f64 {
        let indicator = |target: ChoiceId| if choice == target { 1.0 } else { 0.0 };
        match self {
            KnowledgeProfile::StableKnown => indicator(gold),
            KnowledgeProfile::StableWrong { wrong_choice } => indicator(ChoiceId::Option(*wrong_choice)),
            KnowledgeProfile::Unstable {
                dist_plain,
                dist_augmented,
            } => match (kind, choice) {
                (PromptKind::Augmented, ChoiceId::Option(i)) => dist_augmented[i],
                (PromptKind::Augmented, ChoiceId::Idk) => dist_augmented[OPTION_COUNT],
                (_, ChoiceId::Option(i)) => dist_plain[i],
                (_, ChoiceId::Idk) => 0.0,
            },
        }
    }
}

/// Question id → profile.
pub type ProfileTable = BTreeMap<String, KnowledgeProfile>;

pub fn load_profiles(path: &Path) -> Result<ProfileTable, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let table: ProfileTable =
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    for (id, profile) in &table {
        profile.validate().map_err(|e| format!("profile {id}: {e}"))?;
    }
    Ok(table)
}

/// How the simulated model answers self-verification prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierPolicy {
    AcceptAll,
    RejectAll,
    /// Accepts exactly the proposals that are gold.
    #[default]
    AcceptIfGold,
}

/// Answers an MCQA prompt according to `profile`.
///
/// Pure in `(profile, prompt, seed)`: the draw uses a generator seeded from
/// `seed`, the question id and the prompt kind.
pub fn simulate_response(
    profile: &KnowledgeProfile,
    prompt: &PromptVariant,
    seed: u64,
) -> Result<ModelResponse, BackendError> {
    if matches!(prompt.kind, PromptKind::Verification { .. }) {
        return Err(BackendError::Unsupported(
            "knowledge profiles only answer MCQA prompts".into(),
        ));
    }
    profile.validate().map_err(BackendError::InvalidRequest)?;
    let set = &prompt.choice_set;
    let gold = set
        .gold()
        .map(|e| e.id)
        .ok_or_else(|| BackendError::InvalidRequest("choice set has no gold entry".into()))?;
    let probs: Vec<f64> = set
        .entries
        .iter()
        .map(|e| profile.probability(e.id, gold, prompt.kind))
        .collect();
    let total: f64 = probs.iter().sum();
    if total <= 0.0 {
        return Err(BackendError::InvalidRequest(format!(
            "profile for {} puts no mass on the presented choices",
            set.question_id
        )));
    }

    let mut rng = rng_for(seed, &["simulate", &set.question_id, prompt.kind.label()]);
    let draw = rng.random::<f64>() * total;
    let mut cumulative = 0.0;
    let mut picked = None;
    for (i, p) in probs.iter().enumerate() {
        if *p <= 0.0 {
            continue;
        }
        picked = Some(i);
        cumulative += p;
        if draw < cumulative {
            break;
        }
    }
    let picked = picked.expect("positive total mass");

    let mut logprobs: Vec<TokenLogprob> = set
        .entries
        .iter()
        .zip(&probs)
        .map(|(e, p)| TokenLogprob {
            token: e.letter.to_string(),
            logprob: if *p > 0.0 { p.ln().min(0.0) } else { FLOOR_LOGPROB },
        })
        .collect();
    logprobs.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));

    Ok(ModelResponse {
        text: set.entries[picked].letter.to_string(),
        answer_token_logprobs: Some(logprobs),
        latency_ms: 0,
        backend_id: SimulatedBackend::ID.into(),
        usage: None,
    })
}

pub struct SimulatedBackend {
    profiles: ProfileTable,
    verifier: VerifierPolicy,
}

impl SimulatedBackend {
    pub const ID: &'static str = "simulated";

    pub fn new(profiles: ProfileTable, verifier: VerifierPolicy) -> Self {
        Self { profiles, verifier }
    }

    pub fn profiles(&self) -> &ProfileTable {
        &self.profiles
    }

    fn verify(&self, prompt: &PromptVariant, proposed: crate::mcqa::Letter) -> ModelResponse {
        let is_gold = prompt
            .choice_set
            .entry(proposed)
            .is_some_and(|e| e.kind == ChoiceKind::Gold);
        let accept = match self.verifier {
            VerifierPolicy::AcceptAll => true,
            VerifierPolicy::RejectAll => false,
            VerifierPolicy::AcceptIfGold => is_gold,
        };
        ModelResponse {
            text: if accept { "Yes" } else { "No" }.into(),
            answer_token_logprobs: None,
            latency_ms: 0,
            backend_id: Self::ID.into(),
            usage: None,
        }
    }
}

impl Backend for SimulatedBackend {
    fn id(&self) -> &str {
        Self::ID
    }

    fn query(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        request.decoding.validate()?;
        let prompt = &request.prompt;
        if let PromptKind::Verification { proposed } = prompt.kind {
            return Ok(self.verify(prompt, proposed));
        }
        let id = &prompt.choice_set.question_id;
        let profile = self
            .profiles
            .get(id)
            .ok_or_else(|| BackendError::ProfileMissing(id.clone()))?;
        simulate_response(profile, prompt, request.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Decoding;
    use crate::mcqa::{augment_with_idk, render_prompt, render_verification, shuffle_options, Question};

    fn question() -> Question {
        Question::new("q7", "stem", vec!["a".into(), "b".into(), "c".into(), "d".into()], 1).unwrap()
    }

    fn answered_choice(resp: &ModelResponse, prompt: &PromptVariant) -> ChoiceId {
        let letter = crate::mcqa::parse_answer(&resp.text, &prompt.choice_set).letter().unwrap();
        prompt.choice_set.choice_for(letter).unwrap()
    }

    #[test]
    fn stable_known_answers_gold_under_both_prompts() {
        let q = question();
        for seed in 0..20 {
            let plain = render_prompt(&q.stem, &shuffle_options(&q, seed));
            let aug = render_prompt(&q.stem, &augment_with_idk(&shuffle_options(&q, seed + 100), seed).unwrap());
            let r1 = simulate_response(&KnowledgeProfile::StableKnown, &plain, seed).unwrap();
            let r2 = simulate_response(&KnowledgeProfile::StableKnown, &aug, seed).unwrap();
            assert_eq!(answered_choice(&r1, &plain), ChoiceId::Option(1));
            assert_eq!(answered_choice(&r2, &aug), ChoiceId::Option(1));
            let lps = r1.answer_token_logprobs.unwrap();
            assert_eq!(lps.len(), 4);
            assert_eq!(lps[0].logprob, 0.0);
            assert_eq!(lps[0].token, r1.text);
        }
    }

    #[test]
    fn stable_wrong_answers_its_choice() {
        let q = question();
        let p = render_prompt(&q.stem, &shuffle_options(&q, 4));
        let r = simulate_response(&KnowledgeProfile::StableWrong { wrong_choice: 3 }, &p, 0).unwrap();
        assert_eq!(answered_choice(&r, &p), ChoiceId::Option(3));
    }

    #[test]
    fn degenerate_idk_distribution() {
        let q = question();
        let profile = KnowledgeProfile::Unstable {
            dist_plain: [0.25; 4],
            dist_augmented: [0.0, 0.0, 0.0, 0.0, 1.0],
        };
        for seed in 0..20 {
            let aug = render_prompt(&q.stem, &augment_with_idk(&shuffle_options(&q, seed), seed).unwrap());
            let r = simulate_response(&profile, &aug, seed).unwrap();
            assert_eq!(answered_choice(&r, &aug), ChoiceId::Idk);
        }
    }

    #[test]
    fn deterministic_and_logprobs_sane() {
        let q = question();
        let profile = KnowledgeProfile::Unstable {
            dist_plain: [0.1, 0.2, 0.3, 0.4],
            dist_augmented: [0.1, 0.1, 0.1, 0.2, 0.5],
        };
        let p = render_prompt(&q.stem, &augment_with_idk(&shuffle_options(&q, 1), 2).unwrap());
        let a = simulate_response(&profile, &p, 99).unwrap();
        assert_eq!(a, simulate_response(&profile, &p, 99).unwrap());
        a.check_logprobs().unwrap();
        let mass: f64 = a.answer_token_logprobs.unwrap().iter().map(|t| t.logprob.exp()).sum();
        assert!(mass <= 1.0 + 1e-6);
    }

    #[test]
    fn backend_lookup_and_verifier() {
        let q = question();
        let backend = SimulatedBackend::new(ProfileTable::new(), VerifierPolicy::AcceptIfGold);
        let prompt = render_prompt(&q.stem, &shuffle_options(&q, 0));
        let req = ModelRequest { prompt: prompt.clone(), decoding: Decoding::default(), seed: 0 };
        assert_eq!(backend.query(&req), Err(BackendError::ProfileMissing("q7".into())));

        let gold = prompt.choice_set.letter_of(ChoiceId::Option(1)).unwrap();
        let other = prompt.choice_set.letter_of(ChoiceId::Option(0)).unwrap();
        let ask = |letter| ModelRequest {
            prompt: render_verification(&q.stem, &prompt.choice_set, letter).unwrap(),
            decoding: Decoding::default(),
            seed: 0,
        };
        assert_eq!(backend.query(&ask(gold)).unwrap().text, "Yes");
        assert_eq!(backend.query(&ask(other)).unwrap().text, "No");
    }

    #[test]
    fn profile_validation() {
        let bad = KnowledgeProfile::Unstable { dist_plain: [0.5, 0.5, 0.5, 0.0], dist_augmented: [0.2; 5] };
        assert!(bad.validate().is_err());
        assert!(KnowledgeProfile::StableWrong { wrong_choice: 4 }.validate().is_err());
        let json = r#"{"kind":"unstable","dist_plain":[0.25,0.25,0.25,0.25],"dist_augmented":[0.2,0.2,0.2,0.2,0.2]}"#;
        let p: KnowledgeProfile = serde_json::from_str(json).unwrap();
        assert!(p.validate().is_ok());
    }
}

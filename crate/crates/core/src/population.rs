//! Synthetic question sets with matching knowledge profiles, for exercising
//! the harness end to end against the simulated backend.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{KnowledgeProfile, ProfileTable};
use crate::datasets::RawQuestion;
use crate::mcqa::OPTION_COUNT;
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub n: usize,
    /// Fraction of questions the model reliably knows.
    pub stable_known: f64,
    /// Fraction of questions the model reliably gets wrong.
    pub stable_wrong: f64,
    /// Largest IDK probability an unstable profile may put on the augmented
    /// prompt.
    pub max_idk_mass: f64,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        Self {
            n: 100,
            stable_known: 0.5,
            stable_wrong: 0.2,
            max_idk_mass: 0.3,
        }
    }
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<(), String> {
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if self.n == 0 {
            return Err("population needs at least one question".into());
        }
        if !in_unit(self.stable_known) || !in_unit(self.stable_wrong) || self.stable_known + self.stable_wrong > 1.0 {
            return Err("stable fractions must lie in [0, 1] and sum to at most 1".into());
        }
        if !in_unit(self.max_idk_mass) {
            return Err("max_idk_mass must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub questions: Vec<RawQuestion>,
    pub profiles: ProfileTable,
}

fn random_simplex<const K: usize>(rng: &mut impl Rng) -> [f64; K] {
    // Normalized exponentials are uniform on the simplex.
    let mut v = [0.0; K];
    for x in &mut v {
        *x = -(1.0 - rng.random::<f64>()).ln();
    }
    let total: f64 = v.iter().sum();
    for x in &mut v {
        *x /= total;
    }
    v
}

/// Generates `spec.n` four-option questions and a profile for each.
///
/// The first `round(n * stable_known)` questions are stably known, the next
/// `round(n * stable_wrong)` stably wrong, the rest unstable with random
/// distributions.
pub fn generate(spec: &PopulationSpec, seed: u64) -> Result<Population, String> {
    spec.validate()?;
    let known = (spec.n as f64 * spec.stable_known).round() as usize;
    let wrong = ((spec.n as f64 * spec.stable_wrong).round() as usize).min(spec.n - known);
    let width = spec.n.to_string().len();

    let mut questions = Vec::with_capacity(spec.n);
    let mut profiles = ProfileTable::new();
    for i in 0..spec.n {
        let id = format!("sim-{i:0width$}");
        let mut rng = rng_for(seed, &["population", &id]);
        let gold_index = rng.random_range(0..OPTION_COUNT);
        questions.push(RawQuestion {
            id: id.clone(),
            stem: format!("Synthetic question {i}"),
            options: (0..OPTION_COUNT).map(|k| format!("choice {i}.{k}")).collect(),
            gold_index,
        });
        let profile = if i < known {
            KnowledgeProfile::StableKnown
        } else if i < known + wrong {
            let offset = rng.random_range(1..OPTION_COUNT);
            KnowledgeProfile::StableWrong {
                wrong_choice: (gold_index + offset) % OPTION_COUNT,
            }
        } else {
            let dist_plain = random_simplex::<OPTION_COUNT>(&mut rng);
            let idk = rng.random::<f64>() * spec.max_idk_mass;
            let spread = random_simplex::<OPTION_COUNT>(&mut rng);
            let mut dist_augmented = [0.0; OPTION_COUNT + 1];
            for k in 0..OPTION_COUNT {
                dist_augmented[k] = spread[k] * (1.0 - idk);
            }
            dist_augmented[OPTION_COUNT] = idk;
            KnowledgeProfile::Unstable {
                dist_plain,
                dist_augmented,
            }
        };
        profiles.insert(id, profile);
    }
    Ok(Population { questions, profiles })
}

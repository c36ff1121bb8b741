#![allow(dead_code)]

use std::path::{Path, PathBuf};

use sg_core::backend::KnowledgeProfile;
use sg_core::datasets::write_jsonl;
use sg_core::harness::RunConfig;
use sg_core::mcqa::{
    AnswerValue, ChoiceId, ChoiceSet, IdkPlacement, Letter, ParsedAnswer, PromptKind, Question,
};
use sg_core::population::{generate, Population, PopulationSpec};
use sg_core::protocols::{resolve_second_guess, FinalAnswer, PairedRecord, PassRecord, ProtocolId};

/// Published Second Guess rows as (precision, error rate, composite risk), in
/// dataset-major order: CSQA, MMLU Pro, QASC, SuperGPQA; within each,
/// Granite, Llama, Llama-FT, Mistral, Qwen, Qwen-FT.
pub const SECOND_GUESS_ROWS: [(f64, f64, f64); 24] = [
    (81.82, 14.0, 23.0),
    (83.15, 15.0, 21.0),
    (89.36, 10.0, 12.0),
    (83.33, 14.0, 20.0),
    (88.30, 11.0, 14.0),
    (88.17, 11.0, 15.0),
    (63.79, 21.0, 31.0),
    (72.06, 19.0, 29.0),
    (78.38, 16.0, 23.0),
    (58.46, 27.0, 38.0),
    (77.14, 16.0, 23.0),
    (80.00, 15.0, 24.0),
    (73.17, 22.0, 29.0),
    (76.92, 21.0, 25.0),
    (84.62, 14.0, 14.0),
    (72.37, 21.0, 28.0),
    (76.47, 20.0, 27.0),
    (81.72, 17.0, 21.0),
    (46.51, 23.0, 44.0),
    (40.74, 32.0, 42.0),
    (50.00, 29.0, 40.0),
    (46.34, 22.0, 40.0),
    (53.85, 24.0, 37.0),
    (50.00, 27.0, 42.0),
];

/// Original-prompt accuracy for the same combinations.
pub const BASE_ACCURACY: [f64; 24] = [
    72.0, 80.0, 86.0, 76.0, 86.0, 86.0, 47.0, 59.0, 65.0, 49.0, 61.0, 69.0, 67.0, 74.0, 77.0, 62.0,
    72.0, 80.0, 41.0, 32.0, 40.0, 37.0, 41.0, 42.0,
];

/// Composite-risk reduction of Second Guess over Original.
pub const CR_REDUCTION: [f64; 24] = [
    5.0, -1.0, 2.0, 4.0, 0.0, -1.0, 22.0, 12.0, 12.0, 13.0, 16.0, 7.0, 4.0, 1.0, 9.0, 10.0, 1.0,
    -1.0, 15.0, 26.0, 20.0, 23.0, 22.0, 16.0,
];

pub const DATASETS: [&str; 4] = ["CSQA", "MMLU Pro", "QASC", "SuperGPQA"];
pub const MODELS: [&str; 6] = ["Granite", "Llama", "Llama-FT", "Mistral", "Qwen", "Qwen-FT"];

pub fn is_fine_tuned(row: usize) -> bool {
    matches!(row % 6, 2 | 5)
}

pub fn combo_of(row: usize) -> (&'static str, &'static str) {
    (DATASETS[row / 6], MODELS[row % 6])
}

/// Writes a generated population as a dataset and profile table, returning
/// both paths.
pub fn write_population(dir: &Path, spec: &PopulationSpec, seed: u64) -> (Population, PathBuf, PathBuf) {
    let pop = generate(spec, seed).unwrap();
    let (dataset, profiles) = write_population_files(dir, &pop);
    (pop, dataset, profiles)
}

pub fn simulated_config(dataset: &Path, profiles: &Path, out: &Path, protocol: ProtocolId, sample_n: usize) -> RunConfig {
    let mut config: RunConfig = serde_json::from_value(serde_json::json!({
        "dataset": dataset,
        "dataset_name": "sim",
        "sample_n": sample_n,
        "backend": "simulated",
        "profiles": profiles,
        "protocol": protocol,
    }))
    .unwrap();
    config.out = out.to_path_buf();
    config
}

pub fn question(id: &str, gold: usize) -> Question {
    Question::new(
        id,
        format!("stem {id}"),
        (0..4).map(|k| format!("{id} option {k}")).collect(),
        gold,
    )
    .unwrap()
}

fn pass(q: &Question, choice: Option<ChoiceId>, augmented: bool) -> PassRecord {
    let mut set = ChoiceSet::in_order(q);
    let mut kind = PromptKind::Original;
    if augmented {
        set = sg_core::mcqa::augment_with_idk_at(&set, IdkPlacement::Last, 0).unwrap();
        kind = PromptKind::Augmented;
    }
    let letter = choice.and_then(|c| set.letter_of(c));
    PassRecord {
        prompt_kind: kind,
        answer: ParsedAnswer {
            value: letter.map(AnswerValue::Letter).unwrap_or(AnswerValue::Unparseable),
            raw: letter.map(|l: Letter| l.to_string()).unwrap_or_default(),
        },
        choice,
        choice_set: set,
        entropy: None,
    }
}

/// A Second Guess record with the given passes; gold is option 0.
pub fn paired(id: &str, first: Option<ChoiceId>, second: Option<ChoiceId>) -> PairedRecord {
    let q = question(id, 0);
    let gold = q.gold_choice();
    PairedRecord {
        question_id: id.to_string(),
        gold,
        pass1: pass(&q, first, false),
        pass2: Some(pass(&q, second, true)),
        verification: None,
        final_answer: resolve_second_guess(first, second),
        originally_correct: first == Some(gold),
    }
}

/// A single-pass record with a fixed final answer; gold is option 0.
pub fn single(id: &str, first: Option<ChoiceId>, final_answer: FinalAnswer) -> PairedRecord {
    let q = question(id, 0);
    let gold = q.gold_choice();
    PairedRecord {
        question_id: id.to_string(),
        gold,
        pass1: pass(&q, first, false),
        pass2: None,
        verification: None,
        final_answer,
        originally_correct: first == Some(gold),
    }
}

/// Records realizing one change-breakdown row: for originally correct
/// questions `[to IDK, to other, preserved]`, then the same for originally
/// incorrect ones.
pub fn records_from_breakdown(correct: [usize; 3], incorrect: [usize; 3]) -> Vec<PairedRecord> {
    let gold = ChoiceId::Option(0);
    let wrong = ChoiceId::Option(1);
    let other = ChoiceId::Option(2);
    let mut out = Vec::new();
    let mut push = |first: ChoiceId, second: ChoiceId, n: usize| {
        for _ in 0..n {
            let id = format!("q{:03}", out.len());
            out.push(paired(&id, Some(first), Some(second)));
        }
    };
    push(gold, ChoiceId::Idk, correct[0]);
    push(gold, wrong, correct[1]);
    push(gold, gold, correct[2]);
    push(wrong, ChoiceId::Idk, incorrect[0]);
    push(wrong, other, incorrect[1]);
    push(wrong, wrong, incorrect[2]);
    out
}

/// Per-question probabilities of (correct, incorrect, abstain,
/// abstain-but-correct) under Second Guess, for a population whose two passes
/// are independent draws from the profile.
pub fn second_guess_outcome_probs(profile: &KnowledgeProfile, gold: usize) -> [f64; 4] {
    match profile {
        KnowledgeProfile::StableKnown => [1.0, 0.0, 0.0, 0.0],
        KnowledgeProfile::StableWrong { .. } => [0.0, 1.0, 0.0, 0.0],
        KnowledgeProfile::Unstable { dist_plain, dist_augmented } => {
            let same: Vec<f64> = (0..4).map(|j| dist_plain[j] * dist_augmented[j]).collect();
            let agree: f64 = same.iter().sum();
            let correct = same[gold];
            [
                correct,
                agree - correct,
                1.0 - agree,
                dist_plain[gold] * (1.0 - dist_augmented[gold]),
            ]
        }
    }
}

/// A deterministic population realizing a change-breakdown row: every
/// profile puts all its mass on one choice per prompt kind. Gold is option 0.
pub fn population_from_breakdown(correct: [usize; 3], incorrect: [usize; 3]) -> Population {
    let point = |k: usize| {
        let mut d = [0.0; 4];
        d[k] = 1.0;
        d
    };
    let point5 = |k: usize| {
        let mut d = [0.0; 5];
        d[k] = 1.0;
        d
    };
    let unstable = |plain: usize, augmented: usize| KnowledgeProfile::Unstable {
        dist_plain: point(plain),
        dist_augmented: point5(augmented),
    };
    let groups = [
        (correct[0], unstable(0, 4)),
        (correct[1], unstable(0, 1)),
        (correct[2], KnowledgeProfile::StableKnown),
        (incorrect[0], unstable(1, 4)),
        (incorrect[1], unstable(1, 2)),
        (incorrect[2], KnowledgeProfile::StableWrong { wrong_choice: 1 }),
    ];
    let mut pop = Population {
        questions: Vec::new(),
        profiles: Default::default(),
    };
    for (count, profile) in groups {
        for _ in 0..count {
            let q = question(&format!("b{:03}", pop.questions.len()), 0);
            pop.profiles.insert(q.id.clone(), profile.clone());
            pop.questions.push(sg_core::datasets::RawQuestion {
                id: q.id,
                stem: q.stem,
                options: q.options,
                gold_index: 0,
            });
        }
    }
    pop
}

pub fn write_population_files(dir: &Path, pop: &Population) -> (PathBuf, PathBuf) {
    let dataset = dir.join("population.jsonl");
    let profiles = dir.join("profiles.json");
    write_jsonl(&dataset, &pop.questions).unwrap();
    std::fs::write(&profiles, serde_json::to_vec(&pop.profiles).unwrap()).unwrap();
    (dataset, profiles)
}

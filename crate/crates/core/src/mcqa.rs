//! Multiple-choice items, option shuffling, the prompt template and answer
//! extraction.
//!
//! Everything here is a pure function of its arguments. Choices are tracked by
//! [`ChoiceId`] (the index of the option in the normalized question, or the
//! IDK option) so that answers given under different shufflings can be compared
//! by what they denote rather than by their letter.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_for;

/// Text of the abstention option.
pub const IDK_TEXT: &str = "I don't know";

/// Number of options every normalized question carries.
pub const OPTION_COUNT: usize = 4;

const INSTRUCTION: &str =
    "You are given a question and some options. Output the correct option letter only and nothing else.";
/// Literal every MCQA prompt ends with; the model continues with a letter.
pub const ANSWER_CUE: &str = "The correct option is: (";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum McqaError {
    #[error("question {id}: expected {OPTION_COUNT} options, found {found}")]
    WrongOptionCount { id: String, found: usize },
    #[error("question {id}: gold index {gold} out of range")]
    GoldOutOfRange { id: String, gold: usize },
    #[error("question {id}: option {index} is empty")]
    EmptyOption { id: String, index: usize },
    #[error("question {id}: option text {text:?} appears more than once")]
    DuplicateOption { id: String, text: String },
    #[error("choice set for {0} already contains an IDK option")]
    AlreadyAugmented(String),
    #[error("choice set for {id} has {found} entries, expected {OPTION_COUNT}")]
    WrongChoiceCount { id: String, found: usize },
}

/// One normalized multiple-choice item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub stem: String,
    pub options: Vec<String>,
    pub gold_index: usize,
}

impl Question {
    pub fn new(
        id: impl Into<String>,
        stem: impl Into<String>,
        options: Vec<String>,
        gold_index: usize,
    ) -> Result<Self, McqaError> {
        let question = Self {
            id: id.into(),
            stem: stem.into(),
            options,
            gold_index,
        };
        question.validate()?;
        Ok(question)
    }

    pub fn validate(&self) -> Result<(), McqaError> {
        let id = || self.id.clone();
        if self.options.len() != OPTION_COUNT {
            return Err(McqaError::WrongOptionCount {
                id: id(),
                found: self.options.len(),
            });
        }
        if self.gold_index >= self.options.len() {
            return Err(McqaError::GoldOutOfRange {
                id: id(),
                gold: self.gold_index,
            });
        }
        for (index, text) in self.options.iter().enumerate() {
            if text.trim().is_empty() {
                return Err(McqaError::EmptyOption { id: id(), index });
            }
            if self.options[..index].contains(text) {
                return Err(McqaError::DuplicateOption {
                    id: id(),
                    text: text.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn gold_choice(&self) -> ChoiceId {
        ChoiceId::Option(self.gold_index)
    }
}

/// Option letter `A`..`E`, stored as a zero-based position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Letter(u8);

impl Letter {
    pub const MAX: usize = 5;

    pub fn from_index(index: usize) -> Option<Self> {
        (index < Self::MAX).then_some(Self(index as u8))
    }

    pub fn from_char(c: char) -> Option<Self> {
        let upper = c.to_ascii_uppercase();
        ('A'..='E')
            .contains(&upper)
            .then(|| Self(upper as u8 - b'A'))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn as_char(self) -> char {
        (b'A' + self.0) as char
    }
}

impl fmt::Display for Letter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl Serialize for Letter {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Letter {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Letter::from_char(c)
                .ok_or_else(|| serde::de::Error::custom(format!("invalid letter {s:?}"))),
            _ => Err(serde::de::Error::custom(format!("invalid letter {s:?}"))),
        }
    }
}

/// Identity of a choice independent of its letter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChoiceId {
    /// Index into [`Question::options`].
    Option(usize),
    Idk,
}

impl ChoiceId {
    pub fn is_idk(self) -> bool {
        matches!(self, ChoiceId::Idk)
    }
}

impl fmt::Display for ChoiceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChoiceId::Option(i) => write!(f, "option{i}"),
            ChoiceId::Idk => f.write_str("idk"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChoiceKind {
    Distractor,
    Gold,
    Idk,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceEntry {
    pub letter: Letter,
    pub text: String,
    pub kind: ChoiceKind,
    pub id: ChoiceId,
}

/// The lettered options shown in one prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceSet {
    pub question_id: String,
    pub entries: Vec<ChoiceEntry>,
    /// Seed of the last shuffle or insertion applied to this set.
    pub seed: u64,
}

impl ChoiceSet {
    /// The question's options in their stored order, unshuffled.
    pub fn in_order(question: &Question) -> Self {
        let entries = question
            .options
            .iter()
            .enumerate()
            .map(|(i, text)| ChoiceEntry {
                letter: Letter(i as u8),
                text: text.clone(),
                kind: if i == question.gold_index {
                    ChoiceKind::Gold
                } else {
                    ChoiceKind::Distractor
                },
                id: ChoiceId::Option(i),
            })
            .collect();
        Self {
            question_id: question.id.clone(),
            entries,
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_augmented(&self) -> bool {
        self.entries.iter().any(|e| e.kind == ChoiceKind::Idk)
    }

    pub fn entry(&self, letter: Letter) -> Option<&ChoiceEntry> {
        self.entries.get(letter.index())
    }

    pub fn choice_for(&self, letter: Letter) -> Option<ChoiceId> {
        self.entry(letter).map(|e| e.id)
    }

    pub fn letter_of(&self, id: ChoiceId) -> Option<Letter> {
        self.entries.iter().find(|e| e.id == id).map(|e| e.letter)
    }

    pub fn gold(&self) -> Option<&ChoiceEntry> {
        self.entries.iter().find(|e| e.kind == ChoiceKind::Gold)
    }

    fn relabel(&mut self) {
        for (i, entry) in self.entries.iter_mut().enumerate() {
            entry.letter = Letter(i as u8);
        }
    }
}

/// Where the IDK option goes in an augmented set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IdkPlacement {
    /// Uniform over all five slots.
    #[default]
    Random,
    Last,
}

/// Permutes the question's options. The permutation depends only on
/// `(question.id, seed)`.
pub fn shuffle_options(question: &Question, seed: u64) -> ChoiceSet {
    let mut set = ChoiceSet::in_order(question);
    let mut rng = rng_for(seed, &["shuffle", &question.id]);
    set.entries.shuffle(&mut rng);
    set.relabel();
    set.seed = seed;
    set
}

/// Inserts the IDK option at a uniformly random slot.
pub fn augment_with_idk(choices: &ChoiceSet, seed: u64) -> Result<ChoiceSet, McqaError> {
    augment_with_idk_at(choices, IdkPlacement::Random, seed)
}

pub fn augment_with_idk_at(
    choices: &ChoiceSet,
    placement: IdkPlacement,
    seed: u64,
) -> Result<ChoiceSet, McqaError> {
    if choices.is_augmented() {
        return Err(McqaError::AlreadyAugmented(choices.question_id.clone()));
    }
    if choices.len() != OPTION_COUNT {
        return Err(McqaError::WrongChoiceCount {
            id: choices.question_id.clone(),
            found: choices.len(),
        });
    }
    let slot = match placement {
        IdkPlacement::Random => {
            rng_for(seed, &["idk", &choices.question_id]).random_range(0..=OPTION_COUNT)
        }
        IdkPlacement::Last => OPTION_COUNT,
    };
    let mut set = choices.clone();
    set.entries.insert(
        slot,
        ChoiceEntry {
            letter: Letter(0),
            text: IDK_TEXT.to_string(),
            kind: ChoiceKind::Idk,
            id: ChoiceId::Idk,
        },
    );
    set.relabel();
    set.seed = seed;
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PromptKind {
    Original,
    Augmented,
    /// Asks the model to accept or reject `proposed` from the original set.
    Verification { proposed: Letter },
}

impl PromptKind {
    pub fn label(&self) -> &'static str {
        match self {
            PromptKind::Original => "original",
            PromptKind::Augmented => "augmented",
            PromptKind::Verification { .. } => "verification",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptVariant {
    pub kind: PromptKind,
    pub text: String,
    pub choice_set: ChoiceSet,
}

/// Renders the MCQA prompt. The kind is `Augmented` when the set contains the
/// IDK option and `Original` otherwise.
pub fn render_prompt(stem: &str, choices: &ChoiceSet) -> PromptVariant {
    let mut text = String::with_capacity(256);
    text.push_str(INSTRUCTION);
    text.push_str("\n<question>\n");
    text.push_str(stem);
    text.push_str("\n</question>\n<options>\n");
    for entry in &choices.entries {
        text.push('(');
        text.push(entry.letter.as_char());
        text.push_str(") ");
        text.push_str(&entry.text);
        text.push('\n');
    }
    text.push_str("</options>\n");
    text.push_str(ANSWER_CUE);

    let kind = if choices.is_augmented() {
        PromptKind::Augmented
    } else {
        PromptKind::Original
    };
    PromptVariant {
        kind,
        text,
        choice_set: choices.clone(),
    }
}

/// Renders the yes/no self-verification prompt for `proposed`.
///
/// Returns `None` if `proposed` is outside the set.
pub fn render_verification(
    stem: &str,
    choices: &ChoiceSet,
    proposed: Letter,
) -> Option<PromptVariant> {
    let entry = choices.entry(proposed)?;
    let text = format!(
        "Question: {stem}\nProposed answer: ({}) {}\nIs the proposed answer correct? Answer Yes or No only.\nAnswer:",
        entry.letter, entry.text
    );
    Some(PromptVariant {
        kind: PromptKind::Verification { proposed },
        text,
        choice_set: choices.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "letter", rename_all = "snake_case")]
pub enum AnswerValue {
    Letter(Letter),
    Unparseable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub value: AnswerValue,
    pub raw: String,
}

impl ParsedAnswer {
    pub fn letter(&self) -> Option<Letter> {
        match self.value {
            AnswerValue::Letter(l) => Some(l),
            AnswerValue::Unparseable => None,
        }
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '\''
}

/// Extracts the answer letter from a completion.
///
/// The first single-letter token in `A`..`E` (either case) wins, provided it
/// addresses an entry of `choices`; if it does not, the answer is
/// unparseable. Punctuation such as `(`, `)` and `.` around the letter is
/// ignored.
pub fn parse_answer(completion: &str, choices: &ChoiceSet) -> ParsedAnswer {
    let chars: Vec<char> = completion.chars().collect();
    let mut value = AnswerValue::Unparseable;
    for (i, &c) in chars.iter().enumerate() {
        let Some(letter) = Letter::from_char(c) else {
            continue;
        };
        let before_ok = i == 0 || !is_word_char(chars[i - 1]);
        let after_ok = i + 1 == chars.len() || !is_word_char(chars[i + 1]);
        if before_ok && after_ok {
            if letter.index() < choices.len() {
                value = AnswerValue::Letter(letter);
            }
            break;
        }
    }
    ParsedAnswer {
        value,
        raw: completion.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject,
    Unparseable,
}

/// First `yes` or `no` word in the completion, case-insensitive.
pub fn parse_verdict(completion: &str) -> Verdict {
    completion
        .split(|c: char| !c.is_alphanumeric())
        .find_map(|word| {
            if word.eq_ignore_ascii_case("yes") {
                Some(Verdict::Accept)
            } else if word.eq_ignore_ascii_case("no") {
                Some(Verdict::Reject)
            } else {
                None
            }
        })
        .unwrap_or(Verdict::Unparseable)
}

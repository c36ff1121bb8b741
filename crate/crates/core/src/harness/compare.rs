use std::collections::{BTreeSet, HashMap};
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{HarnessError, RunArtifact};
use crate::protocols::{FinalAnswer, ProtocolId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionDelta {
    pub question_id: String,
    pub a: Option<FinalAnswer>,
    pub b: Option<FinalAnswer>,
    /// Both runs produced the same final value.
    pub agree: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub protocol_a: ProtocolId,
    pub protocol_b: ProtocolId,
    pub questions: Vec<QuestionDelta>,
    pub agreement_rate: f64,
}

impl DeltaReport {
    pub fn disagreements(&self) -> impl Iterator<Item = &QuestionDelta> {
        self.questions.iter().filter(|q| !q.agree)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} vs {}: {:.2}% agreement over {} questions\n",
            self.protocol_a,
            self.protocol_b,
            self.agreement_rate,
            self.questions.len()
        );
        let describe = |f: &Option<FinalAnswer>| match f {
            Some(f) => format!("{:?} ({:?})", f.value, f.source),
            None => "failed".to_string(),
        };
        let mut any = false;
        for q in self.disagreements() {
            if !any {
                let _ = writeln!(out, "| Question | {} | {} |", self.protocol_a, self.protocol_b);
                let _ = writeln!(out, "|---|---|---|");
                any = true;
            }
            let _ = writeln!(out, "| {} | {} | {} |", q.question_id, describe(&q.a), describe(&q.b));
        }
        out
    }
}

/// Per-question diff of two runs over the same sample.
pub fn compare(a: &RunArtifact, b: &RunArtifact) -> Result<DeltaReport, HarnessError> {
    let ids_a: BTreeSet<&str> = a.question_ids.iter().map(String::as_str).collect();
    let ids_b: BTreeSet<&str> = b.question_ids.iter().map(String::as_str).collect();
    if ids_a != ids_b {
        return Err(HarnessError::SampleMismatch);
    }
    let finals = |art: &RunArtifact| -> HashMap<String, FinalAnswer> {
        art.records
            .iter()
            .map(|r| (r.question_id.clone(), r.final_answer))
            .collect()
    };
    let (fa, fb) = (finals(a), finals(b));
    let questions: Vec<QuestionDelta> = a
        .question_ids
        .iter()
        .map(|id| {
            let (x, y) = (fa.get(id).copied(), fb.get(id).copied());
            let agree = match (x, y) {
                (Some(x), Some(y)) => x.value == y.value,
                _ => false,
            };
            QuestionDelta {
                question_id: id.clone(),
                a: x,
                b: y,
                agree,
            }
        })
        .collect();
    let agreeing = questions.iter().filter(|q| q.agree).count();
    let agreement_rate = if questions.is_empty() {
        100.0
    } else {
        100.0 * agreeing as f64 / questions.len() as f64
    };
    Ok(DeltaReport {
        protocol_a: a.protocol,
        protocol_b: b.protocol,
        questions,
        agreement_rate,
    })
}

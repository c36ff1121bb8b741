//! Precision, error rate and composite risk, the two-pass change breakdown,
//! cross-combination aggregation and the accuracy/improvement trend fit.
//!
//! With `N` questions, `N_c` correct answers, `N_i` incorrect answers, `N_a`
//! abstentions and `N_ca` abstentions whose first-pass answer was correct:
//!
//! ```text
//! precision      = 100 * N_c / (N_c + N_i)
//! error rate     = 100 * N_i / N
//! composite risk = 100 * (N_i + N_ca) / N
//! ```
//!
//! Everything is computed in full precision; rounding happens only when a
//! report is rendered.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocols::{AnswerSource, FinalValue, PairedRecord, StdConvention};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("duplicate question id {0} in run")]
    InconsistentRecords(String),
    #[error("every question was abstained on; precision is undefined")]
    AllAbstained,
    #[error("run has no questions")]
    EmptyRun,
    #[error("record {0} has no second answering pass")]
    SinglePassRun(String),
    #[error("rows and baseline cover different combinations: {0}")]
    CombosMismatch(String),
    #[error("need at least two points with distinct x to fit a line")]
    DegeneratePoints,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunTally {
    pub n: usize,
    pub n_c: usize,
    pub n_i: usize,
    pub n_a: usize,
    pub n_ca: usize,
    /// First-pass answers that could not be parsed (diagnostic; already
    /// inside `n_i` or `n_a`).
    #[serde(default)]
    pub unparseable: usize,
}

impl RunTally {
    pub fn is_consistent(&self) -> bool {
        self.n == self.n_c + self.n_i + self.n_a && self.n_ca <= self.n_a
    }
}

pub fn tally(records: &[PairedRecord]) -> Result<RunTally, MetricsError> {
    let mut seen = HashSet::with_capacity(records.len());
    let mut t = RunTally::default();
    for record in records {
        if !seen.insert(record.question_id.as_str()) {
            return Err(MetricsError::InconsistentRecords(record.question_id.clone()));
        }
        t.n += 1;
        match record.final_answer.value {
            FinalValue::Choice(c) if c == record.gold => t.n_c += 1,
            FinalValue::Choice(_) | FinalValue::Unparseable => t.n_i += 1,
            FinalValue::Abstain => {
                t.n_a += 1;
                if record.originally_correct {
                    t.n_ca += 1;
                }
            }
        }
        if record.pass1.choice.is_none() {
            t.unparseable += 1;
        }
    }
    Ok(t)
}

pub fn precision(t: &RunTally) -> Result<f64, MetricsError> {
    let answered = t.n_c + t.n_i;
    if answered == 0 {
        return Err(MetricsError::AllAbstained);
    }
    Ok(100.0 * t.n_c as f64 / answered as f64)
}

pub fn error_rate(t: &RunTally) -> Result<f64, MetricsError> {
    if t.n == 0 {
        return Err(MetricsError::EmptyRun);
    }
    Ok(100.0 * t.n_i as f64 / t.n as f64)
}

pub fn composite_risk(t: &RunTally) -> Result<f64, MetricsError> {
    if t.n == 0 {
        return Err(MetricsError::EmptyRun);
    }
    Ok(100.0 * (t.n_i + t.n_ca) as f64 / t.n as f64)
}

/// The three metrics of one run, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    /// `None` when every question was abstained on.
    pub precision_pct: Option<f64>,
    pub error_rate_pct: f64,
    pub composite_risk_pct: f64,
}

impl MetricTriple {
    pub fn new(precision_pct: f64, error_rate_pct: f64, composite_risk_pct: f64) -> Self {
        Self {
            precision_pct: Some(precision_pct),
            error_rate_pct,
            composite_risk_pct,
        }
    }

    pub fn from_tally(t: &RunTally) -> Result<Self, MetricsError> {
        Ok(Self {
            precision_pct: precision(t).ok(),
            error_rate_pct: error_rate(t)?,
            composite_risk_pct: composite_risk(t)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroupCounts {
    pub to_idk: usize,
    pub to_other: usize,
    pub preserved: usize,
    pub total: usize,
}

/// Two-pass outcomes split by first-pass correctness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub correct: GroupCounts,
    pub incorrect: GroupCounts,
}

impl BreakdownRow {
    /// Builds the records-free row from the six counts in table order.
    pub fn from_counts(correct: [usize; 3], incorrect: [usize; 3]) -> Self {
        let group = |c: [usize; 3]| GroupCounts {
            to_idk: c[0],
            to_other: c[1],
            preserved: c[2],
            total: c.iter().sum(),
        };
        Self {
            correct: group(correct),
            incorrect: group(incorrect),
        }
    }

    /// The tally these counts imply under Second Guess.
    pub fn implied_tally(&self) -> RunTally {
        let n = self.correct.total + self.incorrect.total;
        let n_c = self.correct.preserved;
        let n_i = self.incorrect.preserved;
        RunTally {
            n,
            n_c,
            n_i,
            n_a: n - n_c - n_i,
            n_ca: self.correct.to_idk + self.correct.to_other,
            unparseable: 0,
        }
    }
}

/// Classifies Second Guess records by first-pass correctness and second-pass
/// behavior.
pub fn change_breakdown(records: &[PairedRecord]) -> Result<BreakdownRow, MetricsError> {
    let mut row = BreakdownRow::default();
    for record in records {
        if record.pass2.is_none() {
            return Err(MetricsError::SinglePassRun(record.question_id.clone()));
        }
        let group = if record.originally_correct {
            &mut row.correct
        } else {
            &mut row.incorrect
        };
        match record.final_answer.source {
            AnswerSource::SwitchedToIdk => group.to_idk += 1,
            AnswerSource::SwitchedToOther => group.to_other += 1,
            _ => group.preserved += 1,
        }
        group.total += 1;
    }
    Ok(row)
}

/// Identifies one (dataset, model) evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Combo {
    pub dataset: String,
    pub model: String,
}

impl Combo {
    pub fn new(dataset: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            dataset: dataset.into(),
            model: model.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    /// Mean of per-combination differences from the baseline.
    pub mean_delta: f64,
    /// Combinations that contributed.
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub precision: MetricSummary,
    pub error_rate: MetricSummary,
    pub composite_risk: MetricSummary,
}

fn summarize(pairs: &[(f64, f64)], convention: StdConvention) -> MetricSummary {
    let n = pairs.len();
    if n == 0 {
        return MetricSummary {
            mean: f64::NAN,
            std: f64::NAN,
            mean_delta: f64::NAN,
            count: 0,
        };
    }
    let values: Vec<f64> = pairs.iter().map(|(v, _)| *v).collect();
    MetricSummary {
        mean: values.iter().sum::<f64>() / n as f64,
        std: convention.std(&values),
        mean_delta: pairs.iter().map(|(v, b)| v - b).sum::<f64>() / n as f64,
        count: n,
    }
}

/// Mean, standard deviation and mean delta versus `baseline` of each metric.
///
/// Both lists must cover the same combinations; order does not matter.
/// Precision skips combinations where it is undefined on either side.
pub fn aggregate(
    rows: &[(Combo, MetricTriple)],
    baseline: &[(Combo, MetricTriple)],
    convention: StdConvention,
) -> Result<SummaryTable, MetricsError> {
    let base: BTreeMap<&Combo, &MetricTriple> = baseline.iter().map(|(c, m)| (c, m)).collect();
    let mine: BTreeMap<&Combo, &MetricTriple> = rows.iter().map(|(c, m)| (c, m)).collect();
    if base.len() != baseline.len() || mine.len() != rows.len() {
        return Err(MetricsError::CombosMismatch("duplicate combination".into()));
    }
    if rows.is_empty() {
        return Err(MetricsError::EmptyRun);
    }
    if let Some(missing) = mine
        .keys()
        .find(|c| !base.contains_key(*c))
        .or_else(|| base.keys().find(|c| !mine.contains_key(*c)))
    {
        return Err(MetricsError::CombosMismatch(format!(
            "{} / {}",
            missing.dataset, missing.model
        )));
    }

    let mut p = Vec::new();
    let mut e = Vec::new();
    let mut r = Vec::new();
    for (combo, m) in &mine {
        let b = base[combo];
        if let (Some(mp), Some(bp)) = (m.precision_pct, b.precision_pct) {
            p.push((mp, bp));
        }
        e.push((m.error_rate_pct, b.error_rate_pct));
        r.push((m.composite_risk_pct, b.composite_risk_pct));
    }
    Ok(SummaryTable {
        precision: summarize(&p, convention),
        error_rate: summarize(&e, convention),
        composite_risk: summarize(&r, convention),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendFit {
    pub slope: f64,
    pub intercept: f64,
    pub points: Vec<(f64, f64)>,
}

impl TrendFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }
}

/// Ordinary least-squares line through `points`.
pub fn fit_trend(points: &[(f64, f64)]) -> Result<TrendFit, MetricsError> {
    if points.len() < 2 {
        return Err(MetricsError::DegeneratePoints);
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    if sxx == 0.0 {
        return Err(MetricsError::DegeneratePoints);
    }
    let slope = sxy / sxx;
    Ok(TrendFit {
        slope,
        intercept: mean_y - slope * mean_x,
        points: points.to_vec(),
    })
}

/// Formats `value` to two decimals.
pub fn fmt2(value: f64) -> String {
    format!("{value:.2}")
}

/// Formats a delta with an explicit sign, e.g. `+9.82` or `-5.00`.
pub fn fmt_delta(delta: f64) -> String {
    let rounded = fmt2(delta);
    if rounded.starts_with('-') {
        if rounded.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
            "+0.00".to_string()
        } else {
            rounded
        }
    } else {
        format!("+{rounded}")
    }
}

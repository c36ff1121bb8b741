use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{HarnessError, RunArtifact};
use crate::metrics::{aggregate, change_breakdown, fmt2, fmt_delta, Combo, MetricTriple, SummaryTable};
use crate::protocols::{ProtocolId, StdConvention};

/// One CSV line: a protocol on a combination, at full precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub protocol: ProtocolId,
    pub dataset: String,
    pub model: String,
    pub n: usize,
    pub sample_n: usize,
    pub n_c: usize,
    pub n_i: usize,
    pub n_a: usize,
    pub n_ca: usize,
    pub unparseable: usize,
    pub precision: Option<f64>,
    pub error_rate: f64,
    pub composite_risk: f64,
    pub delta_precision: Option<f64>,
    pub delta_error_rate: f64,
    pub delta_composite_risk: f64,
}

impl ReportRow {
    fn combo(&self) -> Combo {
        Combo::new(&self.dataset, &self.model)
    }

    fn triple(&self) -> MetricTriple {
        MetricTriple {
            precision_pct: self.precision,
            error_rate_pct: self.error_rate,
            composite_risk_pct: self.composite_risk,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSummary {
    pub protocol: ProtocolId,
    pub summary: SummaryTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub baseline: ProtocolId,
    pub rows: Vec<ReportRow>,
    pub summaries: Vec<ProtocolSummary>,
    /// Runs that lost questions to backend failures.
    pub warnings: Vec<String>,
}

/// Builds per-combination rows with deltas against the `baseline` run of the
/// same combination, plus one aggregate per protocol.
pub fn report(
    artifacts: &[RunArtifact],
    baseline: ProtocolId,
    convention: StdConvention,
) -> Result<Report, HarnessError> {
    let mut by_key: BTreeMap<(ProtocolId, Combo), &RunArtifact> = BTreeMap::new();
    for artifact in artifacts {
        let key = (artifact.protocol, artifact.combo.clone());
        if by_key.insert(key, artifact).is_some() {
            return Err(HarnessError::DuplicateRun {
                protocol: artifact.protocol,
                dataset: artifact.combo.dataset.clone(),
                model: artifact.combo.model.clone(),
            });
        }
    }

    let mut rows = Vec::with_capacity(by_key.len());
    let mut warnings = Vec::new();
    for ((protocol, combo), artifact) in &by_key {
        let base = by_key
            .get(&(baseline, combo.clone()))
            .ok_or_else(|| HarnessError::MissingBaseline {
                protocol: baseline,
                dataset: combo.dataset.clone(),
                model: combo.model.clone(),
            })?;
        let m = &artifact.metrics;
        let b = &base.metrics;
        let t = &artifact.tally;
        if t.n < artifact.config.sample_n {
            warnings.push(format!(
                "{} on {} / {}: N = {} of {} sampled questions ({} failed)",
                protocol,
                combo.dataset,
                combo.model,
                t.n,
                artifact.config.sample_n,
                artifact.failures.len()
            ));
        }
        rows.push(ReportRow {
            protocol: *protocol,
            dataset: combo.dataset.clone(),
            model: combo.model.clone(),
            n: t.n,
            sample_n: artifact.config.sample_n,
            n_c: t.n_c,
            n_i: t.n_i,
            n_a: t.n_a,
            n_ca: t.n_ca,
            unparseable: t.unparseable,
            precision: m.precision_pct,
            error_rate: m.error_rate_pct,
            composite_risk: m.composite_risk_pct,
            delta_precision: m.precision_pct.zip(b.precision_pct).map(|(x, y)| x - y),
            delta_error_rate: m.error_rate_pct - b.error_rate_pct,
            delta_composite_risk: m.composite_risk_pct - b.composite_risk_pct,
        });
    }
    let summaries = summarize_rows(&rows, baseline, convention)?;
    Ok(Report {
        baseline,
        rows,
        summaries,
        warnings,
    })
}

/// Aggregates rows per protocol against the baseline protocol's rows.
pub fn summarize_rows(
    rows: &[ReportRow],
    baseline: ProtocolId,
    convention: StdConvention,
) -> Result<Vec<ProtocolSummary>, HarnessError> {
    let mut grouped: BTreeMap<ProtocolId, Vec<(Combo, MetricTriple)>> = BTreeMap::new();
    for row in rows {
        grouped.entry(row.protocol).or_default().push((row.combo(), row.triple()));
    }
    let base_rows = grouped.get(&baseline).cloned().unwrap_or_default();
    grouped
        .iter()
        .map(|(protocol, rows)| {
            let base: Vec<_> = base_rows
                .iter()
                .filter(|(c, _)| rows.iter().any(|(rc, _)| rc == c))
                .cloned()
                .collect();
            if let Some((missing, _)) = rows.iter().find(|(c, _)| !base.iter().any(|(bc, _)| bc == c)) {
                return Err(HarnessError::MissingBaseline {
                    protocol: baseline,
                    dataset: missing.dataset.clone(),
                    model: missing.model.clone(),
                });
            }
            Ok(ProtocolSummary {
                protocol: *protocol,
                summary: aggregate(rows, &base, convention)?,
            })
        })
        .collect()
}

fn cell(value: Option<f64>, delta: Option<f64>, show_delta: bool) -> String {
    match (value, show_delta) {
        (None, _) => "n/a".to_string(),
        (Some(v), true) => match delta {
            Some(d) => format!("{} ({})", fmt2(v), fmt_delta(d)),
            None => fmt2(v),
        },
        (Some(v), false) => fmt2(v),
    }
}

fn summary_cell(s: &crate::metrics::MetricSummary, show_delta: bool) -> String {
    if s.count == 0 {
        return "n/a".to_string();
    }
    let base = format!("{} ± {}", fmt2(s.mean), fmt2(s.std));
    if show_delta {
        format!("{base} ({})", fmt_delta(s.mean_delta))
    } else {
        base
    }
}

impl Report {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        for w in &self.warnings {
            let _ = writeln!(out, "> **Warning:** {w}");
        }
        if !self.warnings.is_empty() {
            out.push('\n');
        }
        let _ = writeln!(out, "## Summary\n");
        let _ = writeln!(
            out,
            "Each cell: mean ± std across combinations, then the mean change versus {}.\n",
            self.baseline.display_name()
        );
        let _ = writeln!(out, "| Method | Precision ↑ | Error Rate ↓ | Composite Risk ↓ |");
        let _ = writeln!(out, "|---|---:|---:|---:|");
        for ps in self.ordered_summaries() {
            let delta = ps.protocol != self.baseline;
            let s = &ps.summary;
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} |",
                ps.protocol.display_name(),
                summary_cell(&s.precision, delta),
                summary_cell(&s.error_rate, delta),
                summary_cell(&s.composite_risk, delta)
            );
        }
        for protocol in ProtocolId::ALL {
            let rows: Vec<_> = self.rows.iter().filter(|r| r.protocol == protocol).collect();
            if rows.is_empty() {
                continue;
            }
            let delta = protocol != self.baseline;
            let _ = writeln!(out, "\n## {}\n", protocol.display_name());
            let _ = writeln!(out, "| Dataset | Model | N | Precision ↑ | Error Rate ↓ | Composite Risk ↓ |");
            let _ = writeln!(out, "|---|---|---:|---:|---:|---:|");
            for r in rows {
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {} | {} |",
                    r.dataset,
                    r.model,
                    r.n,
                    cell(r.precision, r.delta_precision, delta),
                    cell(Some(r.error_rate), Some(r.delta_error_rate), delta),
                    cell(Some(r.composite_risk), Some(r.delta_composite_risk), delta)
                );
            }
        }
        out
    }

    fn ordered_summaries(&self) -> Vec<&ProtocolSummary> {
        let mut v: Vec<_> = self.summaries.iter().collect();
        v.sort_by_key(|s| (s.protocol != self.baseline, s.protocol));
        v
    }

    pub fn to_csv(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            writer.serialize(row).expect("row serializes");
        }
        String::from_utf8(writer.into_inner().expect("in-memory writer")).expect("csv is utf-8")
    }
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>, csv::Error> {
    csv::Reader::from_reader(text.as_bytes()).deserialize().collect()
}

/// Change-breakdown table for a Second Guess artifact, columns split by
/// first-pass correctness.
pub fn breakdown(artifact: &RunArtifact) -> Result<String, HarnessError> {
    let row = change_breakdown(&artifact.records)?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "| | | Originally Correct | | | | Originally Incorrect | | | |"
    );
    let _ = writeln!(
        out,
        "| Dataset | Model | → IDK | → Other | Preserved | Total | → IDK | → Other | Preserved | Total |"
    );
    let _ = writeln!(out, "|---|---|---:|---:|---:|---:|---:|---:|---:|---:|");
    let (c, i) = (row.correct, row.incorrect);
    let _ = writeln!(
        out,
        "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
        artifact.combo.dataset,
        artifact.combo.model,
        c.to_idk,
        c.to_other,
        c.preserved,
        c.total,
        i.to_idk,
        i.to_other,
        i.preserved,
        i.total
    );
    Ok(out)
}

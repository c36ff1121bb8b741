//! End-to-end runs: configuration, bounded-concurrency execution, artifacts,
//! and the report/breakdown/compare views over them.

mod compare;
mod report;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::simulated::load_profiles;
use crate::backend::{
    Backend, ChatCompletionsBackend, Counting, Decoding, ResponseCache, Retrying, RetryPolicy, SimulatedBackend,
    VerifierPolicy,
};
use crate::datasets::{self, DatasetError, DatasetFormat, DatasetManifest};
use crate::mcqa::{IdkPlacement, Question};
use crate::metrics::{self, BreakdownRow, Combo, MetricTriple, MetricsError, RunTally};
use crate::protocols::{self, EntropyStats, PairedRecord, ProtocolConfig, ProtocolContext, ProtocolError, ProtocolId, StdConvention};

pub use compare::{compare, DeltaReport, QuestionDelta};
pub use report::{breakdown, parse_report_csv, report, summarize_rows, Report, ReportRow, ProtocolSummary};

/// Version of the artifact layout.
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("no {protocol} run for {dataset} / {model} to compare against")]
    MissingBaseline {
        protocol: ProtocolId,
        dataset: String,
        model: String,
    },
    #[error("more than one {protocol} run for {dataset} / {model}")]
    DuplicateRun {
        protocol: ProtocolId,
        dataset: String,
        model: String,
    },
    #[error("artifacts were evaluated on different question samples")]
    SampleMismatch,
    #[error("{path}: {message}")]
    Artifact { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Wire,
    Simulated,
}

fn default_concurrency() -> usize {
    4
}
fn default_max_new_tokens() -> u32 {
    Decoding::default().max_new_tokens
}
fn default_top_logprobs_k() -> u8 {
    Decoding::default().top_logprobs_k
}
fn default_out() -> PathBuf {
    PathBuf::from("runs")
}
fn default_timeout_secs() -> u64 {
    60
}
fn default_max_retries() -> u32 {
    RetryPolicy::default().max_retries
}
fn default_retry_backoff_ms() -> u64 {
    RetryPolicy::default().initial_backoff.as_millis() as u64
}

/// Everything that determines a run. Read from a JSON file; CLI flags
/// override individual fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Path to the dataset file.
    pub dataset: PathBuf,
    /// Label used in reports; defaults to the file stem.
    #[serde(default)]
    pub dataset_name: Option<String>,
    #[serde(default)]
    pub dataset_format: Option<DatasetFormat>,
    #[serde(default)]
    pub normalization_seed: u64,
    #[serde(default)]
    pub sample_seed: u64,
    pub sample_n: usize,

    pub backend: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Model name sent to the endpoint; also the report label.
    #[serde(default)]
    pub model: Option<String>,
    /// Profile table for the simulated backend.
    #[serde(default)]
    pub profiles: Option<PathBuf>,
    #[serde(default)]
    pub verifier: VerifierPolicy,

    pub protocol: ProtocolId,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
    #[serde(default = "default_top_logprobs_k")]
    pub top_logprobs_k: u8,
    #[serde(default)]
    pub idk_position: IdkPlacement,
    #[serde(default)]
    pub reuse_pass1_order: bool,
    #[serde(default)]
    pub entropy_std: StdConvention,

    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_retry_backoff_ms")]
    pub retry_backoff_ms: u64,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(io_error(path))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::ConfigInvalid(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let invalid = |m: &str| Err(HarnessError::ConfigInvalid(m.to_string()));
        if self.concurrency == 0 {
            return invalid("concurrency must be at least 1");
        }
        if self.sample_n == 0 {
            return invalid("sample_n must be at least 1");
        }
        match self.backend {
            BackendKind::Wire => {
                if self.endpoint.as_deref().unwrap_or("").is_empty() {
                    return invalid("wire backend needs an endpoint");
                }
                if self.model.as_deref().unwrap_or("").is_empty() {
                    return invalid("wire backend needs a model");
                }
            }
            BackendKind::Simulated => {
                if self.profiles.is_none() {
                    return invalid("simulated backend needs a profiles file");
                }
            }
        }
        self.decoding()
            .validate()
            .map_err(|e| HarnessError::ConfigInvalid(e.to_string()))
    }

    pub fn decoding(&self) -> Decoding {
        Decoding {
            temperature: self.temperature,
            max_new_tokens: self.max_new_tokens,
            want_logprobs: false,
            top_logprobs_k: self.top_logprobs_k,
        }
    }

    pub fn protocol_config(&self) -> ProtocolConfig {
        ProtocolConfig {
            decoding: self.decoding(),
            idk_placement: self.idk_position,
            reuse_pass1_order: self.reuse_pass1_order,
            entropy_std: self.entropy_std,
        }
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            initial_backoff: Duration::from_millis(self.retry_backoff_ms),
        }
    }

    pub fn dataset_label(&self) -> String {
        self.dataset_name.clone().unwrap_or_else(|| {
            self.dataset
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into())
        })
    }

    pub fn model_label(&self) -> String {
        self.model.clone().unwrap_or_else(|| match self.backend {
            BackendKind::Simulated => SimulatedBackend::ID.to_string(),
            BackendKind::Wire => "model".to_string(),
        })
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            name: self.dataset_label(),
            path: self.dataset.clone(),
            format: self
                .dataset_format
                .unwrap_or_else(|| DatasetFormat::from_path(&self.dataset)),
            item_count: 0,
            normalization_seed: self.normalization_seed,
            sample_seed: self.sample_seed,
        }
    }

    /// File-name-safe identifier of the run.
    pub fn run_id(&self) -> String {
        let clean = |s: &str| -> String {
            s.chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
                .collect()
        };
        format!(
            "{}__{}__{}__s{}",
            clean(&self.dataset_label()),
            clean(&self.model_label()),
            self.protocol,
            self.seed
        )
    }

    /// Builds the configured backend, without retries or caching.
    pub fn build_backend(&self) -> Result<Box<dyn Backend>, HarnessError> {
        match self.backend {
            BackendKind::Wire => Ok(Box::new(ChatCompletionsBackend::from_env(
                self.endpoint.as_deref().unwrap_or_default(),
                self.model.as_deref().unwrap_or_default(),
                Duration::from_secs(self.timeout_secs),
                self.concurrency,
            ))),
            BackendKind::Simulated => {
                let path = self.profiles.as_ref().expect("validated");
                let table = load_profiles(path).map_err(HarnessError::ConfigInvalid)?;
                Ok(Box::new(SimulatedBackend::new(table, self.verifier)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub question_id: String,
    pub error: String,
}

/// Call and timing counters; kept out of the artifact file so reruns stay
/// byte-identical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Accounting {
    pub backend_calls: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub cache_corrupt: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub wall_clock_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub version: u32,
    pub id: String,
    pub config: RunConfig,
    pub combo: Combo,
    pub protocol: ProtocolId,
    /// Sampled questions in evaluation order.
    pub question_ids: Vec<String>,
    pub failures: Vec<Failure>,
    pub tally: RunTally,
    pub metrics: MetricTriple,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<BreakdownRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy: Option<EntropyStats>,
    /// Records live in a JSONL file next to the artifact.
    pub records_file: String,
    #[serde(skip)]
    pub records: Vec<PairedRecord>,
    #[serde(skip)]
    pub accounting: Accounting,
}

impl RunArtifact {
    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }

    /// Recomputes tally and metrics from the records.
    pub fn recompute(&self) -> Result<(RunTally, MetricTriple), MetricsError> {
        let t = metrics::tally(&self.records)?;
        Ok((t, MetricTriple::from_tally(&t)?))
    }
}

/// Loads the dataset, builds the backend, runs and writes the artifact.
pub fn run(config: &RunConfig) -> Result<RunArtifact, HarnessError> {
    config.validate()?;
    let questions = datasets::prepare(&config.manifest(), config.sample_n)?;
    let backend = config.build_backend()?;
    let artifact = execute(config, &questions, backend.as_ref())?;
    write_artifact(&artifact, &config.out)?;
    Ok(artifact)
}

/// Runs `config.protocol` over `questions` with at most `config.concurrency`
/// questions (and hence backend calls) in flight. Records come back in
/// question order whatever the completion order.
pub fn execute(config: &RunConfig, questions: &[Question], backend: &dyn Backend) -> Result<RunArtifact, HarnessError> {
    config.validate()?;
    let started = Instant::now();
    let cache = match &config.cache_dir {
        Some(dir) => Some(ResponseCache::open(dir).map_err(io_error(dir))?),
        None => None,
    };
    let counted = Counting::new(Retrying::new(backend, config.retry_policy()));
    let ctx = ProtocolContext {
        backend: &counted,
        cache: cache.as_ref(),
        config: config.protocol_config(),
    };

    let slots: Vec<Mutex<Option<Result<PairedRecord, ProtocolError>>>> =
        questions.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = config.concurrency.min(questions.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(question) = questions.get(i) else { break };
                let outcome = protocols::run_question(config.protocol, question, &ctx, config.seed);
                *slots[i].lock().unwrap_or_else(|p| p.into_inner()) = Some(outcome);
            });
        }
    });

    let mut records = Vec::with_capacity(questions.len());
    let mut failures = Vec::new();
    for (question, slot) in questions.iter().zip(slots) {
        match slot.into_inner().unwrap_or_else(|p| p.into_inner()) {
            Some(Ok(record)) => records.push(record),
            Some(Err(e)) => {
                log::warn!("question {} failed: {e}", question.id);
                failures.push(Failure {
                    question_id: question.id.clone(),
                    error: e.to_string(),
                });
            }
            None => unreachable!("every question is claimed by a worker"),
        }
    }
    if records.is_empty() {
        let first = failures.first().map(|f| f.error.clone()).unwrap_or_default();
        return Err(HarnessError::BackendUnreachable(first));
    }
    if !failures.is_empty() {
        log::warn!(
            "partial run: {} of {} questions failed and are excluded from N",
            failures.len(),
            questions.len()
        );
    }

    let (records, entropy) = protocols::finalize_run(config.protocol, records, config.entropy_std)?;
    let t = metrics::tally(&records)?;
    let breakdown = (config.protocol == ProtocolId::SecondGuess)
        .then(|| metrics::change_breakdown(&records))
        .transpose()?;
    let cache_stats = cache.as_ref().map(|c| c.stats()).unwrap_or_default();
    let usage = counted.usage();
    let id = config.run_id();
    Ok(RunArtifact {
        version: ARTIFACT_VERSION,
        records_file: format!("{id}.records.jsonl"),
        id,
        config: config.clone(),
        combo: Combo::new(config.dataset_label(), config.model_label()),
        protocol: config.protocol,
        question_ids: questions.iter().map(|q| q.id.clone()).collect(),
        failures,
        tally: t,
        metrics: MetricTriple::from_tally(&t)?,
        breakdown,
        entropy,
        records,
        accounting: Accounting {
            backend_calls: counted.calls(),
            cache_hits: cache_stats.hits,
            cache_misses: cache_stats.misses,
            cache_corrupt: cache_stats.corrupt,
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
            wall_clock_ms: started.elapsed().as_millis() as u64,
        },
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    use std::io::Write;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_error(dir))?;
    tmp.write_all(bytes).map_err(io_error(path))?;
    tmp.persist(path).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

/// Paths written for one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactPaths {
    pub artifact: PathBuf,
    pub records: PathBuf,
    pub accounting: PathBuf,
}

/// Writes `<id>.json`, `<id>.records.jsonl` and `<id>.accounting.json`
/// into `dir`, each through a temp file and a rename.
pub fn write_artifact(artifact: &RunArtifact, dir: &Path) -> Result<ArtifactPaths, HarnessError> {
    std::fs::create_dir_all(dir).map_err(io_error(dir))?;
    let paths = ArtifactPaths {
        artifact: dir.join(format!("{}.json", artifact.id)),
        records: dir.join(&artifact.records_file),
        accounting: dir.join(format!("{}.accounting.json", artifact.id)),
    };
    let mut lines = Vec::new();
    for record in &artifact.records {
        serde_json::to_writer(&mut lines, record).expect("record serializes");
        lines.push(b'\n');
    }
    write_atomic(&paths.records, &lines)?;
    let mut doc = serde_json::to_vec_pretty(artifact).expect("artifact serializes");
    doc.push(b'\n');
    write_atomic(&paths.artifact, &doc)?;
    let mut acct = serde_json::to_vec_pretty(&artifact.accounting).expect("accounting serializes");
    acct.push(b'\n');
    write_atomic(&paths.accounting, &acct)?;
    Ok(paths)
}

/// True for the accounting sidecar, which shares the `.json` extension with
/// artifacts and so turns up in `runs/*.json` globs.
pub fn is_sidecar(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(".accounting.json"))
}

/// Reads an artifact and its records; accounting is loaded when present.
pub fn load_artifact(path: &Path) -> Result<RunArtifact, HarnessError> {
    let bad = |message: String| HarnessError::Artifact {
        path: path.to_path_buf(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(io_error(path))?;
    let mut artifact: RunArtifact = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if artifact.version != ARTIFACT_VERSION {
        return Err(bad(format!("unsupported artifact version {}", artifact.version)));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let records_path = dir.join(&artifact.records_file);
    let records_text = std::fs::read_to_string(&records_path).map_err(io_error(&records_path))?;
    artifact.records = records_text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| HarnessError::Artifact {
                path: records_path.clone(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect::<Result<_, _>>()?;
    let accounting_path = dir.join(format!("{}.accounting.json", artifact.id));
    if let Ok(acct) = std::fs::read_to_string(&accounting_path) {
        artifact.accounting = serde_json::from_str(&acct).unwrap_or_default();
    }
    let (t, m) = artifact.recompute()?;
    if t != artifact.tally || m != artifact.metrics {
        return Err(bad("stored metrics do not match the records".into()));
    }
    Ok(artifact)
}

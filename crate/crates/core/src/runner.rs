//! End-to-end trial execution: baseline pass, exposure pass (including the
//! multi-step mitigation pipelines), answer parsing, and durable run-directory
//! persistence.
//!
//! The baseline completion runs once per (subject, item) and is shared by
//! every trial that references the pair. Records append to records.jsonl in
//! trial order; rerunning a directory skips trials whose records are already
//! well-formed, so an interrupted run resumed with the same seeds ends in the
//! same file a cold run produces.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::McOption;
use crate::error::{Error, Result};
use crate::gateway::{ChatRequest, Gateway, RequestKind, SideBand};
use crate::persona::Group;
use crate::prompt::{self, DefeasibleStage, PromptBundle};
use crate::scenario::{Trial, UpdateKind};

pub use crate::scenario::TrialItem;

pub const RECORDS_SCHEMA_VERSION: u32 = 1;
pub const PARSER_VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ParsedAnswer {
    Label(String),
    Unparseable,
}

impl ParsedAnswer {
    pub fn label(&self) -> Option<&str> {
        match self {
            ParsedAnswer::Label(l) => Some(l),
            ParsedAnswer::Unparseable => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Judgment {
    Proof,
    Unknown,
    Disproof,
}

impl Judgment {
    pub fn as_str(self) -> &'static str {
        match self {
            Judgment::Proof => "Proof",
            Judgment::Unknown => "Unknown",
            Judgment::Disproof => "Disproof",
        }
    }

    /// Affirmation score: Proof +1, Unknown 0, Disproof -1.
    pub fn score(self) -> i8 {
        match self {
            Judgment::Proof => 1,
            Judgment::Unknown => 0,
            Judgment::Disproof => -1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ParsedJudgment {
    Judgment(Judgment),
    Unparseable,
}

impl ParsedJudgment {
    pub fn judgment(&self) -> Option<Judgment> {
        match self {
            ParsedJudgment::Judgment(j) => Some(*j),
            ParsedJudgment::Unparseable => None,
        }
    }
}

/// Extract an option choice from raw model text. Total: never fails.
///
/// Precedence: (1) earliest canonical label occurrence, (2) case-insensitive
/// whole-string match of the trimmed text against an option text, (3) unique
/// case-insensitive substring match of exactly one option text.
pub fn parse_answer(text: &str, options: &[McOption]) -> ParsedAnswer {
    let mut best: Option<(usize, &str)> = None;
    for opt in options {
        if let Some(pos) = text.find(&opt.label) {
            if best.map_or(true, |(p, _)| pos < p) {
                best = Some((pos, &opt.label));
            }
        }
    }
    if let Some((_, label)) = best {
        return ParsedAnswer::Label(label.to_string());
    }
    let trimmed = text.trim();
    for opt in options {
        if trimmed.eq_ignore_ascii_case(&opt.text) {
            return ParsedAnswer::Label(opt.label.clone());
        }
    }
    let lower = text.to_lowercase();
    let hits: Vec<&McOption> = options
        .iter()
        .filter(|o| lower.contains(&o.text.to_lowercase()))
        .collect();
    if hits.len() == 1 {
        return ParsedAnswer::Label(hits[0].label.clone());
    }
    ParsedAnswer::Unparseable
}

/// First judgment keyword occurring in the text, case-insensitive. Total.
pub fn parse_judgment(text: &str) -> ParsedJudgment {
    let lower = text.to_lowercase();
    let mut best: Option<(usize, Judgment)> = None;
    for (kw, j) in [
        ("disproof", Judgment::Disproof),
        ("proof", Judgment::Proof),
        ("unknown", Judgment::Unknown),
    ] {
        if let Some(pos) = lower.find(kw) {
            if best.map_or(true, |(p, _)| pos < p) {
                best = Some((pos, j));
            }
        }
    }
    match best {
        Some((_, j)) => ParsedJudgment::Judgment(j),
        None => ParsedJudgment::Unparseable,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutput {
    pub stage: String,
    pub text: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

/// Persisted outcome of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub schema_version: u32,
    pub trial: Trial,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub o0: Option<ParsedAnswer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub o1: Option<ParsedAnswer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j0: Option<ParsedJudgment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j1: Option<ParsedJudgment>,
    pub raw: Vec<StageOutput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub backend_id: String,
    pub renderer_version: String,
    pub parser_version: String,
}

impl TrialRecord {
    pub fn is_failed(&self) -> bool {
        self.failed_stage.is_some()
    }

    pub fn o1_label(&self) -> Option<&str> {
        self.o1.as_ref().and_then(|a| a.label())
    }

    pub fn o0_label(&self) -> Option<&str> {
        self.o0.as_ref().and_then(|a| a.label())
    }
}

#[derive(Debug, Clone)]
pub struct ExecConfig {
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub batch_size: usize,
}

impl Default for ExecConfig {
    fn default() -> Self {
        ExecConfig {
            model_id: "mock".into(),
            temperature: 0.0,
            max_output_tokens: 64,
            batch_size: 64,
        }
    }
}

/// Shared baseline result for one (subject, item) pair.
#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub o0: Option<ParsedAnswer>,
    pub j0: Option<ParsedJudgment>,
    pub stage: Option<StageOutput>,
    pub error: Option<String>,
}

pub fn baseline_key(trial: &Trial) -> (String, String) {
    (trial.subject.id.clone(), trial.item.id().to_string())
}

pub fn baseline_tag(trial: &Trial) -> String {
    format!("baseline:{}:{}", trial.subject.id, trial.item.id())
}

fn qa_options(trial: &Trial) -> Option<&[McOption]> {
    trial.item.qa().map(|q| q.options.as_slice())
}

const JUDGMENT_LABELS: [&str; 3] = ["Proof", "Unknown", "Disproof"];

fn update_as_judgment(update: UpdateKind) -> &'static str {
    match update {
        UpdateKind::Strengthener => "Proof",
        UpdateKind::Weakener => "Disproof",
    }
}

fn baseline_sideband(trial: &Trial) -> SideBand {
    match &trial.item {
        TrialItem::Qa(item) => SideBand {
            option_labels: item.options.iter().map(|o| o.label.clone()).collect(),
            truth_label: Some(item.truth_label.clone()),
            ..SideBand::default()
        },
        TrialItem::Defeasible(_) => SideBand {
            option_labels: JUDGMENT_LABELS.iter().map(|s| s.to_string()).collect(),
            ..SideBand::default()
        },
    }
}

fn exposure_sideband(trial: &Trial) -> SideBand {
    match &trial.item {
        TrialItem::Qa(item) => SideBand {
            option_labels: item.options.iter().map(|o| o.label.clone()).collect(),
            truth_label: Some(item.truth_label.clone()),
            in_group_label: trial.advocated_label(Group::InGroup).map(String::from),
            out_group_label: trial.advocated_label(Group::OutGroup).map(String::from),
            first_peer_label: trial
                .peers
                .first()
                .and_then(|p| p.advocated.label())
                .map(String::from),
            last_peer_label: trial
                .peers
                .last()
                .and_then(|p| p.advocated.label())
                .map(String::from),
            ..SideBand::default()
        },
        TrialItem::Defeasible(_) => SideBand {
            option_labels: JUDGMENT_LABELS.iter().map(|s| s.to_string()).collect(),
            in_group_label: trial
                .advocated_update(Group::InGroup)
                .map(|u| update_as_judgment(u).to_string()),
            out_group_label: trial
                .advocated_update(Group::OutGroup)
                .map(|u| update_as_judgment(u).to_string()),
            first_peer_label: trial
                .peers
                .first()
                .and_then(|p| p.advocated.update())
                .map(|u| update_as_judgment(u).to_string()),
            last_peer_label: trial
                .peers
                .last()
                .and_then(|p| p.advocated.update())
                .map(|u| update_as_judgment(u).to_string()),
            ..SideBand::default()
        },
    }
}

fn request(
    exec: &ExecConfig,
    bundle: &PromptBundle,
    tag: String,
    kind: RequestKind,
    sideband: SideBand,
) -> ChatRequest {
    ChatRequest {
        model_id: exec.model_id.clone(),
        turns: bundle.turns.clone(),
        temperature: exec.temperature,
        max_output_tokens: exec.max_output_tokens,
        request_tag: tag,
        kind,
        sideband,
    }
}

/// Solo pass for one (subject, item) pair.
pub fn run_baseline(trial: &Trial, gateway: &Gateway, exec: &ExecConfig) -> BaselineOutcome {
    let rendered = match &trial.item {
        TrialItem::Qa(item) => prompt::render_baseline(&trial.subject, item),
        TrialItem::Defeasible(_) => {
            prompt::render_defeasible(trial, DefeasibleStage::Initial, None)
        }
    };
    let bundle = match rendered {
        Ok(b) => b,
        Err(e) => {
            return BaselineOutcome {
                o0: None,
                j0: None,
                stage: None,
                error: Some(e.to_string()),
            }
        }
    };
    let kind = match &trial.item {
        TrialItem::Qa(_) => RequestKind::QaBaseline,
        TrialItem::Defeasible(_) => RequestKind::DefeasibleInitial,
    };
    let req = request(
        exec,
        &bundle,
        baseline_tag(trial),
        kind,
        baseline_sideband(trial),
    );
    match gateway.complete(&req) {
        Ok(resp) => {
            let stage = StageOutput {
                stage: "baseline".into(),
                text: resp.text.clone(),
                latency_ms: resp.latency_ms,
                attempt_count: resp.attempt_count,
            };
            let (o0, j0) = match qa_options(trial) {
                Some(options) => (Some(parse_answer(&resp.text, options)), None),
                None => (None, Some(parse_judgment(&resp.text))),
            };
            BaselineOutcome {
                o0,
                j0,
                stage: Some(stage),
                error: None,
            }
        }
        Err(e) => BaselineOutcome {
            o0: None,
            j0: None,
            stage: None,
            error: Some(e.to_string()),
        },
    }
}

/// Exposure pass; consumes the shared baseline outcome and yields the full
/// record. Per-stage failures mark the record and the run continues.
pub fn run_exposure(
    trial: &Trial,
    gateway: &Gateway,
    exec: &ExecConfig,
    baseline: &BaselineOutcome,
) -> TrialRecord {
    let mut record = TrialRecord {
        schema_version: RECORDS_SCHEMA_VERSION,
        trial: trial.clone(),
        o0: baseline.o0.clone(),
        o1: None,
        j0: baseline.j0.clone(),
        j1: None,
        raw: baseline.stage.clone().into_iter().collect(),
        failed_stage: None,
        error: None,
        backend_id: gateway.backend_id().to_string(),
        renderer_version: prompt::TEMPLATE_VERSION.into(),
        parser_version: PARSER_VERSION.into(),
    };
    if let Some(err) = &baseline.error {
        record.failed_stage = Some("baseline".into());
        record.error = Some(err.clone());
        return record;
    }
    match &trial.item {
        TrialItem::Qa(item) => {
            let steps = prompt::exposure_steps(&trial.condition);
            let mut priors: Vec<String> = Vec::new();
            for step in 1..=steps {
                let bundle = match prompt::render_exposure_step(trial, step, &priors) {
                    Ok(b) => b,
                    Err(e) => {
                        record.failed_stage = Some(format!("exposure:{step}"));
                        record.error = Some(e.to_string());
                        return record;
                    }
                };
                let req = request(
                    exec,
                    &bundle,
                    format!("{}:exposure:{step}", trial.id),
                    RequestKind::QaExposure,
                    exposure_sideband(trial),
                );
                match gateway.complete(&req) {
                    Ok(resp) => {
                        record.raw.push(StageOutput {
                            stage: format!("exposure:{step}"),
                            text: resp.text.clone(),
                            latency_ms: resp.latency_ms,
                            attempt_count: resp.attempt_count,
                        });
                        priors.push(resp.text);
                    }
                    Err(e) => {
                        record.failed_stage = Some(format!("exposure:{step}"));
                        record.error = Some(e.to_string());
                        return record;
                    }
                }
            }
            let final_text = priors.last().expect("at least one exposure step");
            record.o1 = Some(parse_answer(final_text, &item.options));
        }
        TrialItem::Defeasible(_) => {
            let prior = match &record.j0 {
                Some(ParsedJudgment::Judgment(j)) => j.as_str().to_string(),
                _ => baseline
                    .stage
                    .as_ref()
                    .map(|s| s.text.trim().to_string())
                    .unwrap_or_default(),
            };
            let bundle =
                match prompt::render_defeasible(trial, DefeasibleStage::Revised, Some(&prior)) {
                    Ok(b) => b,
                    Err(e) => {
                        record.failed_stage = Some("exposure:1".into());
                        record.error = Some(e.to_string());
                        return record;
                    }
                };
            let req = request(
                exec,
                &bundle,
                format!("{}:exposure:1", trial.id),
                RequestKind::DefeasibleRevision,
                exposure_sideband(trial),
            );
            match gateway.complete(&req) {
                Ok(resp) => {
                    record.raw.push(StageOutput {
                        stage: "exposure:1".into(),
                        text: resp.text.clone(),
                        latency_ms: resp.latency_ms,
                        attempt_count: resp.attempt_count,
                    });
                    record.j1 = Some(parse_judgment(&resp.text));
                }
                Err(e) => {
                    record.failed_stage = Some("exposure:1".into());
                    record.error = Some(e.to_string());
                }
            }
        }
    }
    record
}

use crate::util::{pmap, smap};

pub type BaselineCache = HashMap<(String, String), BaselineOutcome>;

/// One representative trial per (subject, item) key not yet in the cache.
fn missing_baselines<'a>(trials: &'a [Trial], cache: &BaselineCache) -> Vec<&'a Trial> {
    let mut missing: Vec<&Trial> = Vec::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for t in trials {
        let key = baseline_key(t);
        if !cache.contains_key(&key) && seen.insert(key) {
            missing.push(t);
        }
    }
    missing
}

/// Execute a batch of trials: shared baselines first (deduplicated), then
/// exposures, results in input order. Parallel when the `parallel` feature
/// is enabled.
pub fn run_trial_batch(
    trials: &[Trial],
    gateway: &Gateway,
    exec: &ExecConfig,
    cache: &mut BaselineCache,
) -> Vec<TrialRecord> {
    let missing = missing_baselines(trials, cache);
    let computed: Vec<((String, String), BaselineOutcome)> =
        pmap(&missing, |t| (baseline_key(t), run_baseline(t, gateway, exec)));
    for (key, outcome) in computed {
        cache.insert(key, outcome);
    }
    let shared: &BaselineCache = cache;
    pmap(trials, |t| {
        let baseline = shared.get(&baseline_key(t)).expect("baseline precomputed");
        run_exposure(t, gateway, exec, baseline)
    })
}

/// Sequential twin of [`run_trial_batch`]; used as the comparison arm in
/// benchmarks and equivalence tests.
pub fn run_trial_batch_seq(
    trials: &[Trial],
    gateway: &Gateway,
    exec: &ExecConfig,
    cache: &mut BaselineCache,
) -> Vec<TrialRecord> {
    for t in missing_baselines(trials, cache) {
        let outcome = run_baseline(t, gateway, exec);
        cache.insert(baseline_key(t), outcome);
    }
    let shared: &BaselineCache = cache;
    smap(trials, |t| {
        let baseline = shared.get(&baseline_key(t)).expect("baseline precomputed");
        run_exposure(t, gateway, exec, baseline)
    })
}

/// Layout of one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RunPaths { dir: dir.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }

    pub fn trials(&self) -> PathBuf {
        self.dir.join("trials.jsonl")
    }

    pub fn records(&self) -> PathBuf {
        self.dir.join("records.jsonl")
    }

    pub fn audit(&self) -> PathBuf {
        self.dir.join("audit.jsonl")
    }

    pub fn corpus(&self) -> PathBuf {
        self.dir.join("corpus.jsonl")
    }

    pub fn variants(&self) -> PathBuf {
        self.dir.join("variants.jsonl")
    }

    pub fn done(&self) -> PathBuf {
        self.dir.join("DONE")
    }

    pub fn is_done(&self) -> bool {
        self.done().exists()
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item)
            .map_err(|e| Error::Protocol(format!("serialize: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    read_jsonl(path)
}

pub fn read_records(path: &Path) -> Result<Vec<TrialRecord>> {
    read_jsonl(path)
}

/// Parse records.jsonl, truncating the file at the first malformed line so a
/// partially written tail from an interrupted run is dropped.
fn sanitize_records(path: &Path) -> Result<Vec<TrialRecord>> {
    let data = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut valid_bytes = 0usize;
    for line in data.split_inclusive('\n') {
        let body = line.strip_suffix('\n').unwrap_or(line);
        if body.trim().is_empty() {
            valid_bytes += line.len();
            continue;
        }
        match serde_json::from_str::<TrialRecord>(body) {
            // a line without trailing newline may be a partial write
            Ok(r) if line.ends_with('\n') => {
                records.push(r);
                valid_bytes += line.len();
            }
            _ => break,
        }
    }
    if valid_bytes < data.len() {
        log::warn!(
            "truncating {} malformed byte(s) at the tail of {}",
            data.len() - valid_bytes,
            path.display()
        );
        let f = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.set_len(valid_bytes as u64).map_err(|e| Error::io(path, e))?;
    }
    Ok(records)
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RunReport {
    pub total: usize,
    pub executed: usize,
    pub skipped: usize,
    pub failed: usize,
    pub o1_unparseable: usize,
}

/// Execute all trials of a run directory, resuming over existing records.
pub fn execute_run(run: &RunPaths, gateway: &Gateway, exec: &ExecConfig) -> Result<RunReport> {
    let trials = read_trials(&run.trials())?;
    let records_path = run.records();
    let existing = if records_path.exists() {
        sanitize_records(&records_path)?
    } else {
        Vec::new()
    };
    let done_ids: HashSet<&str> = existing.iter().map(|r| r.trial.id.as_str()).collect();

    // seed the baseline cache from completed records so resumed trials share
    // the original baseline responses
    let mut cache: BaselineCache = HashMap::new();
    for r in &existing {
        let key = (r.trial.subject.id.clone(), r.trial.item.id().to_string());
        cache.entry(key).or_insert_with(|| BaselineOutcome {
            o0: r.o0.clone(),
            j0: r.j0.clone(),
            stage: r.raw.iter().find(|s| s.stage == "baseline").cloned(),
            error: if r.failed_stage.as_deref() == Some("baseline") {
                r.error.clone()
            } else {
                None
            },
        });
    }

    let remaining: Vec<Trial> = trials
        .iter()
        .filter(|t| !done_ids.contains(t.id.as_str()))
        .cloned()
        .collect();
    let mut report = RunReport {
        total: trials.len(),
        skipped: existing.len(),
        ..RunReport::default()
    };
    for r in &existing {
        if r.is_failed() {
            report.failed += 1;
        }
        if r.trial.item.qa().is_some()
            && matches!(r.o1, Some(ParsedAnswer::Unparseable))
        {
            report.o1_unparseable += 1;
        }
    }

    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&records_path)
        .map_err(|e| Error::io(&records_path, e))?;
    let mut writer = BufWriter::new(file);
    let batch = exec.batch_size.max(1);
    let started = Instant::now();
    for chunk in remaining.chunks(batch) {
        let records = run_trial_batch(chunk, gateway, exec, &mut cache);
        for record in records {
            if record.is_failed() {
                report.failed += 1;
            }
            if record.trial.item.qa().is_some()
                && matches!(record.o1, Some(ParsedAnswer::Unparseable))
            {
                report.o1_unparseable += 1;
            }
            let line = serde_json::to_string(&record)
                .map_err(|e| Error::Protocol(format!("serialize record: {e}")))?;
            writeln!(writer, "{line}").map_err(|e| Error::io(&records_path, e))?;
            report.executed += 1;
        }
        writer.flush().map_err(|e| Error::io(&records_path, e))?;
    }
    log::info!(
        "run complete: {} executed, {} skipped, {} failed in {:?}",
        report.executed,
        report.skipped,
        report.failed,
        started.elapsed()
    );
    let done = serde_json::json!({
        "schema_version": RECORDS_SCHEMA_VERSION,
        "records": report.executed + report.skipped,
        "failed": report.failed,
    });
    fs::write(run.done(), format!("{done}\n")).map_err(|e| Error::io(run.done(), e))?;
    Ok(report)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FilterReport {
    pub kept: usize,
    pub excluded_wrong_baseline: usize,
    pub excluded_unparseable_baseline: usize,
    pub excluded_failed: usize,
    pub non_qa: usize,
}

/// Keep QA records whose baseline answer equals the truth label. Defeasible
/// records have no truth anchor and pass through neither set; they are
/// analyzed separately.
pub fn filter_baseline_correct(records: &[TrialRecord]) -> (Vec<&TrialRecord>, FilterReport) {
    let mut kept = Vec::new();
    let mut report = FilterReport::default();
    for r in records {
        let Some(item) = r.trial.item.qa() else {
            report.non_qa += 1;
            continue;
        };
        match &r.o0 {
            Some(ParsedAnswer::Label(l)) if *l == item.truth_label => {
                kept.push(r);
                report.kept += 1;
            }
            Some(ParsedAnswer::Label(_)) => report.excluded_wrong_baseline += 1,
            Some(ParsedAnswer::Unparseable) => report.excluded_unparseable_baseline += 1,
            None => report.excluded_failed += 1,
        }
    }
    (kept, report)
}

/// Request tags a trial will issue, in order. Used to pre-check replay gaps.
pub fn expected_tags(trial: &Trial) -> Vec<String> {
    let mut tags = vec![baseline_tag(trial)];
    for step in 1..=prompt::exposure_steps(&trial.condition) {
        tags.push(format!("{}:exposure:{step}", trial.id));
    }
    tags
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::QAItem;

    fn options() -> Vec<McOption> {
        vec![
            McOption { label: "(A)".into(), text: "London".into() },
            McOption { label: "(B)".into(), text: "Berlin".into() },
            McOption { label: "(C)".into(), text: "Paris".into() },
            McOption { label: "(D)".into(), text: "Madrid".into() },
            McOption { label: "(E)".into(), text: "Rome".into() },
        ]
    }

    #[test]
    fn parse_answer_label_first_precedence() {
        let opts = options();
        assert_eq!(
            parse_answer("(C)", &opts),
            ParsedAnswer::Label("(C)".into())
        );
        assert_eq!(
            parse_answer("I think (A) London, though (C) is tempting", &opts),
            ParsedAnswer::Label("(A)".into())
        );
    }

    #[test]
    fn parse_answer_whole_string_and_substring() {
        let opts = options();
        assert_eq!(
            parse_answer("Paris", &opts),
            ParsedAnswer::Label("(C)".into())
        );
        assert_eq!(
            parse_answer("  paris  ", &opts),
            ParsedAnswer::Label("(C)".into())
        );
        assert_eq!(
            parse_answer("definitely Rome or Paris", &opts),
            ParsedAnswer::Unparseable
        );
        assert_eq!(
            parse_answer("the answer is madrid, obviously", &opts),
            ParsedAnswer::Label("(D)".into())
        );
    }

    #[test]
    fn parse_answer_is_total() {
        let opts = options();
        assert_eq!(parse_answer("", &opts), ParsedAnswer::Unparseable);
        assert_eq!(parse_answer("no idea", &opts), ParsedAnswer::Unparseable);
        assert_eq!(parse_answer("x", &[]), ParsedAnswer::Unparseable);
    }

    #[test]
    fn parse_judgment_first_occurrence_wins() {
        assert_eq!(
            parse_judgment("Proof"),
            ParsedJudgment::Judgment(Judgment::Proof)
        );
        assert_eq!(
            parse_judgment("unknown."),
            ParsedJudgment::Judgment(Judgment::Unknown)
        );
        assert_eq!(
            parse_judgment("Disproof"),
            ParsedJudgment::Judgment(Judgment::Disproof)
        );
        assert_eq!(
            parse_judgment("unknown, leaning proof"),
            ParsedJudgment::Judgment(Judgment::Unknown)
        );
        assert_eq!(parse_judgment("no keyword here"), ParsedJudgment::Unparseable);
    }

    #[test]
    fn filter_keeps_baseline_correct_only() {
        let item = QAItem {
            id: "q".into(),
            question: "?".into(),
            options: options()[..3].to_vec(),
            truth_label: "(B)".into(),
            subcategory: None,
        };
        let trial = Trial {
            schema_version: 1,
            id: "t".into(),
            subject: crate::persona::BasePersona::new("s", "p").unwrap(),
            peers: vec![],
            item: TrialItem::Qa(item),
            condition: Condition::BothFalse,
            psd: None,
            seed: 0,
            permutation: vec![],
        };
        let mk = |o0: Option<ParsedAnswer>| TrialRecord {
            schema_version: 1,
            trial: trial.clone(),
            o0,
            o1: None,
            j0: None,
            j1: None,
            raw: vec![],
            failed_stage: None,
            error: None,
            backend_id: "mock".into(),
            renderer_version: "v1".into(),
            parser_version: "v1".into(),
        };
        let records = vec![
            mk(Some(ParsedAnswer::Label("(B)".into()))),
            mk(Some(ParsedAnswer::Label("(A)".into()))),
            mk(Some(ParsedAnswer::Unparseable)),
            mk(None),
            mk(Some(ParsedAnswer::Label("(B)".into()))),
        ];
        let (kept, report) = filter_baseline_correct(&records);
        assert_eq!(kept.len(), 2);
        assert_eq!(report.excluded_wrong_baseline, 1);
        assert_eq!(report.excluded_unparseable_baseline, 1);
        assert_eq!(report.excluded_failed, 1);
    }
}

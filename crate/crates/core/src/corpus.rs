//! QA benchmark and defeasible-NLI ingestion.
//!
//! All multiple-choice benchmarks normalize to a single 3-option shape:
//! one truth option plus two false options, labels canonicalized to
//! "(A)", "(B)", "(C)". Per-benchmark quirks live behind a format tag.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{derive_seed, fnv1a, rng_for};

pub const CORPUS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatTag {
    GenericMc,
    BbhParenLabels,
}

impl FromStr for FormatTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generic_mc" => Ok(FormatTag::GenericMc),
            "bbh_paren_labels" => Ok(FormatTag::BbhParenLabels),
            other => Err(Error::Config(format!(
                "unknown corpus format '{other}' (expected generic_mc or bbh_paren_labels)"
            ))),
        }
    }
}

/// Field names for record extraction, overridable per benchmark file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct FieldMap {
    pub id: String,
    pub question: String,
    pub options: String,
    pub answer: String,
    pub subcategory: String,
    /// BBH-style combined prompt field.
    pub input: String,
    /// BBH-style answer field.
    pub target: String,
}

impl Default for FieldMap {
    fn default() -> Self {
        FieldMap {
            id: "id".into(),
            question: "question".into(),
            options: "options".into(),
            answer: "answer".into(),
            subcategory: "subcategory".into(),
            input: "input".into(),
            target: "target".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McOption {
    pub label: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAItem {
    pub id: String,
    pub question: String,
    pub options: Vec<McOption>,
    pub truth_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subcategory: Option<String>,
}

impl QAItem {
    pub fn truth_text(&self) -> &str {
        &self
            .options
            .iter()
            .find(|o| o.label == self.truth_label)
            .expect("truth label present")
            .text
    }

    pub fn false_labels(&self) -> Vec<&str> {
        self.options
            .iter()
            .filter(|o| o.label != self.truth_label)
            .map(|o| o.label.as_str())
            .collect()
    }

    pub fn option_text(&self, label: &str) -> Option<&str> {
        self.options
            .iter()
            .find(|o| o.label == label)
            .map(|o| o.text.as_str())
    }

    /// Invariants for the reduced 3-option form.
    pub fn validate_reduced(&self) -> Result<()> {
        if self.options.len() != 3 {
            return Err(Error::Domain(format!(
                "item {}: expected 3 options, found {}",
                self.id,
                self.options.len()
            )));
        }
        validate_common(self).map_err(|msg| Error::Domain(format!("item {}: {msg}", self.id)))
    }
}

fn validate_common(item: &QAItem) -> std::result::Result<(), String> {
    let labels: Vec<&str> = item.options.iter().map(|o| o.label.as_str()).collect();
    for (i, l) in labels.iter().enumerate() {
        if *l != canonical_label(i) {
            return Err(format!("label {l} out of canonical order"));
        }
    }
    if !labels.contains(&item.truth_label.as_str()) {
        return Err("truth label not among options".into());
    }
    let mut texts: Vec<&str> = item.options.iter().map(|o| o.text.as_str()).collect();
    texts.sort_unstable();
    texts.dedup();
    if texts.len() != item.options.len() {
        return Err("option texts are not pairwise distinct".into());
    }
    Ok(())
}

pub fn canonical_label(index: usize) -> String {
    let letter = (b'A' + index as u8) as char;
    format!("({letter})")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefeasibleItem {
    pub id: String,
    pub premise: String,
    pub hypothesis: String,
    pub strengthener: String,
    pub weakener: String,
}

/// Field names for defeasible-NLI records.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct DefeasibleFieldMap {
    pub premise: String,
    pub hypothesis: String,
    pub update: String,
    pub update_type: String,
}

impl Default for DefeasibleFieldMap {
    fn default() -> Self {
        DefeasibleFieldMap {
            premise: "premise".into(),
            hypothesis: "hypothesis".into(),
            update: "update".into(),
            update_type: "update_type".into(),
        }
    }
}

#[derive(Debug)]
pub struct QaLoad {
    pub items: Vec<QAItem>,
    pub rejected: usize,
}

/// Load and normalize a QA benchmark file. Rejected records are logged and
/// counted, not fatal; an entirely invalid file is.
pub fn load_qa(path: &Path, format: FormatTag, fields: &FieldMap) -> Result<QaLoad> {
    let data = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    let mut rejected = 0usize;
    for (idx, line) in data.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: line_no,
            msg: format!("invalid JSON: {e}"),
        })?;
        let id = value
            .get(&fields.id)
            .map(json_to_string)
            .unwrap_or_else(|| format!("q{line_no}"));
        let parsed = match format {
            FormatTag::GenericMc => parse_generic(&value, &id, fields),
            FormatTag::BbhParenLabels => parse_bbh(&value, &id, fields),
        };
        match parsed {
            Ok(item) => items.push(item),
            Err(reason) => {
                rejected += 1;
                log::warn!("rejected record {id} at {}:{line_no}: {reason}", path.display());
            }
        }
    }
    if items.is_empty() {
        return Err(Error::NoValidRecords {
            path: path.display().to_string(),
            what: format!("all {rejected} record(s) rejected"),
        });
    }
    Ok(QaLoad { items, rejected })
}

fn json_to_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn parse_generic(
    value: &serde_json::Value,
    id: &str,
    fields: &FieldMap,
) -> std::result::Result<QAItem, String> {
    let question = value
        .get(&fields.question)
        .and_then(|v| v.as_str())
        .ok_or_else(|| format!("missing question field '{}'", fields.question))?;
    let options_raw = value
        .get(&fields.options)
        .and_then(|v| v.as_array())
        .ok_or_else(|| format!("missing options array '{}'", fields.options))?;
    let texts: Vec<String> = options_raw
        .iter()
        .map(|v| match v {
            serde_json::Value::String(s) => normalize(s),
            other => normalize(&other.to_string()),
        })
        .collect();
    let answer = value
        .get(&fields.answer)
        .ok_or_else(|| format!("missing answer field '{}'", fields.answer))?;
    let truth_index = resolve_truth_index(answer, &texts)?;
    let subcategory = value
        .get(&fields.subcategory)
        .and_then(|v| v.as_str())
        .map(|s| s.to_string());
    build_item(id, &normalize(question), texts, truth_index, subcategory)
}

/// Resolve an answer given as an index, a letter, a "(X)" label, or the
/// exact option text.
fn resolve_truth_index(
    answer: &serde_json::Value,
    texts: &[String],
) -> std::result::Result<usize, String> {
    if let Some(n) = answer.as_u64() {
        let i = n as usize;
        if i < texts.len() {
            return Ok(i);
        }
        return Err(format!("answer index {i} out of range"));
    }
    let s = answer
        .as_str()
        .ok_or_else(|| "answer is neither index nor string".to_string())?
        .trim();
    let bare = s.trim_start_matches('(').trim_end_matches(')');
    if bare.len() == 1 {
        if let Some(c) = bare.chars().next() {
            let upper = c.to_ascii_uppercase();
            if upper.is_ascii_uppercase() {
                let i = (upper as u8 - b'A') as usize;
                if i < texts.len() {
                    return Ok(i);
                }
            }
        }
    }
    if let Some(i) = texts.iter().position(|t| t == s) {
        return Ok(i);
    }
    if let Some(i) = texts
        .iter()
        .position(|t| t.eq_ignore_ascii_case(s))
    {
        return Ok(i);
    }
    Err(format!("answer '{s}' matches no option"))
}

fn parse_bbh(
    value: &serde_json::Value,
    id: &str,
    fields: &FieldMap,
) -> std::result::Result<QAItem, String> {
    let input = value
        .get(&fields.input)
        .and_then(|v| v.as_str())
        .ok_or_else(|| format!("missing input field '{}'", fields.input))?;
    let target = value
        .get(&fields.target)
        .and_then(|v| v.as_str())
        .ok_or_else(|| format!("missing target field '{}'", fields.target))?;
    let (question, texts) = split_bbh_options(input)?;
    let answer = serde_json::Value::String(target.trim().to_string());
    let truth_index = resolve_truth_index(&answer, &texts)?;
    let subcategory = value
        .get(&fields.subcategory)
        .and_then(|v| v.as_str())
        .map(|s| s.to_string());
    build_item(id, &question, texts, truth_index, subcategory)
}

/// Split a BBH-style prompt into question text and "(A) ..."-labeled options.
fn split_bbh_options(input: &str) -> std::result::Result<(String, Vec<String>), String> {
    let marker = "Options:";
    let at = input
        .find(marker)
        .ok_or_else(|| "no 'Options:' marker in input".to_string())?;
    let question = normalize(&input[..at]);
    let tail = &input[at + marker.len()..];
    let mut option_spans = Vec::new();
    for i in 0.. {
        let label = canonical_label(i);
        match tail.find(&label) {
            Some(pos) => option_spans.push((pos, label.len())),
            None => break,
        }
    }
    if option_spans.len() < 2 {
        return Err("fewer than two labeled options".into());
    }
    let mut texts = Vec::new();
    for (i, (pos, len)) in option_spans.iter().enumerate() {
        let start = pos + len;
        let end = option_spans
            .get(i + 1)
            .map(|(p, _)| *p)
            .unwrap_or(tail.len());
        texts.push(normalize(&tail[start..end]));
    }
    Ok((question, texts))
}

fn build_item(
    id: &str,
    question: &str,
    texts: Vec<String>,
    truth_index: usize,
    subcategory: Option<String>,
) -> std::result::Result<QAItem, String> {
    if question.is_empty() {
        return Err("empty question".into());
    }
    if texts.len() < 3 {
        return Err(format!(
            "{} option(s); need at least 3 (truth plus two falses)",
            texts.len()
        ));
    }
    if texts.iter().any(|t| t.is_empty()) {
        return Err("empty option text".into());
    }
    let mut distinct: Vec<&String> = texts.iter().collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() != texts.len() {
        return Err("duplicate option texts".into());
    }
    let options = texts
        .into_iter()
        .enumerate()
        .map(|(i, text)| McOption {
            label: canonical_label(i),
            text,
        })
        .collect::<Vec<_>>();
    Ok(QAItem {
        id: id.to_string(),
        question: question.to_string(),
        options,
        truth_label: canonical_label(truth_index),
        subcategory,
    })
}

/// Reduce an item to truth plus two seeded false options, re-labelled
/// "(A)", "(B)", "(C)" with relative order preserved. Deterministic per
/// (item id, seed).
pub fn reduce_options(item: &QAItem, seed: u64) -> Result<QAItem> {
    if item.options.len() < 3 || item.option_text(&item.truth_label).is_none() {
        return Err(Error::Domain(format!(
            "item {}: cannot reduce, needs >= 3 options including truth",
            item.id
        )));
    }
    let keep_indices: Vec<usize> = if item.options.len() == 3 {
        (0..3).collect()
    } else {
        let false_indices: Vec<usize> = item
            .options
            .iter()
            .enumerate()
            .filter(|(_, o)| o.label != item.truth_label)
            .map(|(i, _)| i)
            .collect();
        let mut rng = rng_for(derive_seed(seed, "reduce_options", fnv1a(&item.id)), "pick", 0);
        let chosen = rand::seq::index::sample(&mut rng, false_indices.len(), 2);
        let truth_index = item
            .options
            .iter()
            .position(|o| o.label == item.truth_label)
            .expect("truth present");
        let mut keep = vec![
            truth_index,
            false_indices[chosen.index(0)],
            false_indices[chosen.index(1)],
        ];
        keep.sort_unstable();
        keep
    };
    let mut truth_label = None;
    let options: Vec<McOption> = keep_indices
        .iter()
        .enumerate()
        .map(|(new_i, old_i)| {
            let label = canonical_label(new_i);
            if item.options[*old_i].label == item.truth_label {
                truth_label = Some(label.clone());
            }
            McOption {
                label,
                text: item.options[*old_i].text.clone(),
            }
        })
        .collect();
    let reduced = QAItem {
        id: item.id.clone(),
        question: item.question.clone(),
        options,
        truth_label: truth_label.expect("truth retained"),
        subcategory: item.subcategory.clone(),
    };
    reduced.validate_reduced()?;
    Ok(reduced)
}

/// Load defeasible-NLI records and pair one strengthener with one weakener
/// per (premise, hypothesis). Unpairable records are dropped with a logged
/// count.
pub fn load_defeasible(path: &Path, fields: &DefeasibleFieldMap) -> Result<Vec<DefeasibleItem>> {
    let data = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    // key -> (first strengthener, first weakener), insertion-ordered
    let mut order: Vec<(String, String)> = Vec::new();
    let mut pairs: HashMap<(String, String), (Option<String>, Option<String>)> = HashMap::new();
    let mut records = 0usize;
    for (idx, line) in data.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: line_no,
            msg: format!("invalid JSON: {e}"),
        })?;
        let get = |f: &str| -> std::result::Result<String, String> {
            value
                .get(f)
                .and_then(|v| v.as_str())
                .map(normalize)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| format!("missing or empty field '{f}'"))
        };
        let extracted = (|| -> std::result::Result<_, String> {
            let premise = get(&fields.premise)?;
            let hypothesis = get(&fields.hypothesis)?;
            let update = get(&fields.update)?;
            let kind = get(&fields.update_type)?;
            Ok((premise, hypothesis, update, kind))
        })();
        let (premise, hypothesis, update, kind) = match extracted {
            Ok(t) => t,
            Err(reason) => {
                log::warn!("skipping defeasible record at {}:{line_no}: {reason}", path.display());
                continue;
            }
        };
        records += 1;
        let key = (premise, hypothesis);
        let entry = pairs.entry(key.clone()).or_insert_with(|| {
            order.push(key.clone());
            (None, None)
        });
        match kind.to_ascii_lowercase().as_str() {
            "strengthener" | "s" => {
                entry.0.get_or_insert(update);
            }
            "weakener" | "w" => {
                entry.1.get_or_insert(update);
            }
            other => {
                log::warn!(
                    "skipping defeasible record at {}:{line_no}: unknown update type '{other}'",
                    path.display()
                );
            }
        }
    }
    let mut items = Vec::new();
    let mut dropped = 0usize;
    for (i, key) in order.iter().enumerate() {
        let (s, w) = pairs.get(key).cloned().unwrap_or((None, None));
        match (s, w) {
            (Some(strengthener), Some(weakener)) => items.push(DefeasibleItem {
                id: format!("d{}", i + 1),
                premise: key.0.clone(),
                hypothesis: key.1.clone(),
                strengthener,
                weakener,
            }),
            _ => dropped += 1,
        }
    }
    if dropped > 0 {
        log::info!(
            "defeasible load: dropped {dropped} unpairable premise-hypothesis group(s) of {records} records"
        );
    }
    if items.is_empty() {
        return Err(Error::NoValidRecords {
            path: path.display().to_string(),
            what: "no premise-hypothesis pair has both a strengthener and a weakener".into(),
        });
    }
    Ok(items)
}

fn normalize(s: &str) -> String {
    s.replace("\r\n", "\n").replace('\r', "\n").trim().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_jsonl(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn bbh_record_parses_with_paren_labels() {
        let f = write_jsonl(&[
            r#"{"input":"Is the sky blue on a clear day? Options: (A) yes (B) no (C) maybe","target":"(B)"}"#,
        ]);
        let load = load_qa(f.path(), FormatTag::BbhParenLabels, &FieldMap::default()).unwrap();
        assert_eq!(load.rejected, 0);
        let item = &load.items[0];
        assert_eq!(item.truth_label, "(B)");
        assert_eq!(item.options.len(), 3);
        assert_eq!(item.option_text("(A)").unwrap(), "yes");
        assert_eq!(item.option_text("(C)").unwrap(), "maybe");
        assert_eq!(item.question, "Is the sky blue on a clear day?");
    }

    #[test]
    fn answer_matching_no_option_rejects_but_run_continues() {
        let f = write_jsonl(&[
            r#"{"question":"q1","options":["a","b","c"],"answer":"zzz"}"#,
            r#"{"question":"q2","options":["a","b","c"],"answer":"b"}"#,
        ]);
        let load = load_qa(f.path(), FormatTag::GenericMc, &FieldMap::default()).unwrap();
        assert_eq!(load.rejected, 1);
        assert_eq!(load.items.len(), 1);
        assert_eq!(load.items[0].truth_label, "(B)");
    }

    #[test]
    fn two_option_record_is_rejected() {
        let f = write_jsonl(&[
            r#"{"question":"q1","options":["yes","no"],"answer":"yes"}"#,
            r#"{"question":"q2","options":["a","b","c","d"],"answer":0}"#,
        ]);
        let load = load_qa(f.path(), FormatTag::GenericMc, &FieldMap::default()).unwrap();
        assert_eq!(load.rejected, 1);
        assert_eq!(load.items[0].options.len(), 4);
    }

    #[test]
    fn zero_valid_records_is_a_hard_error() {
        let f = write_jsonl(&[r#"{"question":"q1","options":["a","b"],"answer":"a"}"#]);
        assert!(matches!(
            load_qa(f.path(), FormatTag::GenericMc, &FieldMap::default()),
            Err(Error::NoValidRecords { .. })
        ));
    }

    #[test]
    fn reduce_keeps_truth_and_three_canonical_labels() {
        let item = build_item(
            "x",
            "pick",
            vec!["o0".into(), "o1".into(), "o2".into(), "o3".into(), "o4".into()],
            3,
            None,
        )
        .unwrap();
        let reduced = reduce_options(&item, 1).unwrap();
        assert_eq!(reduced.options.len(), 3);
        assert_eq!(reduced.truth_text(), "o3");
        let labels: Vec<&str> = reduced.options.iter().map(|o| o.label.as_str()).collect();
        assert_eq!(labels, vec!["(A)", "(B)", "(C)"]);
    }

    #[test]
    fn reduce_of_three_option_item_is_identity_on_texts() {
        let item = build_item("x", "q", vec!["a".into(), "b".into(), "c".into()], 1, None).unwrap();
        let reduced = reduce_options(&item, 99).unwrap();
        assert_eq!(reduced, item);
    }

    #[test]
    fn reduce_is_deterministic_per_seed_and_varies_across_seeds() {
        let item = build_item(
            "id-7",
            "q",
            (0..10).map(|i| format!("opt{i}")).collect(),
            4,
            None,
        )
        .unwrap();
        let a = reduce_options(&item, 1).unwrap();
        let b = reduce_options(&item, 1).unwrap();
        assert_eq!(a, b);
        let mut saw_difference = false;
        for seed in 0..100 {
            let r = reduce_options(&item, seed).unwrap();
            assert_eq!(r.truth_text(), "opt4");
            if r.options != a.options {
                saw_difference = true;
            }
        }
        assert!(saw_difference, "100 seeds never changed the false pair");
    }

    #[test]
    fn defeasible_pairs_strengthener_with_weakener() {
        let f = write_jsonl(&[
            r#"{"premise":"p1","hypothesis":"h1","update":"s text","update_type":"strengthener"}"#,
            r#"{"premise":"p1","hypothesis":"h1","update":"w text","update_type":"weakener"}"#,
        ]);
        let items = load_defeasible(f.path(), &DefeasibleFieldMap::default()).unwrap();
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].strengthener, "s text");
        assert_eq!(items[0].weakener, "w text");
    }

    #[test]
    fn strengthener_only_yields_hard_error() {
        let f = write_jsonl(&[
            r#"{"premise":"p1","hypothesis":"h1","update":"s","update_type":"strengthener"}"#,
        ]);
        assert!(matches!(
            load_defeasible(f.path(), &DefeasibleFieldMap::default()),
            Err(Error::NoValidRecords { .. })
        ));
    }

    #[test]
    fn mixed_defeasible_fixture_pairs_by_hand_count() {
        // 10 records over 6 premise-hypothesis groups; exactly 4 groups carry
        // both update types.
        let f = write_jsonl(&[
            r#"{"premise":"p1","hypothesis":"h","update":"s1","update_type":"S"}"#,
            r#"{"premise":"p1","hypothesis":"h","update":"w1","update_type":"W"}"#,
            r#"{"premise":"p2","hypothesis":"h","update":"s2","update_type":"S"}"#,
            r#"{"premise":"p2","hypothesis":"h","update":"w2","update_type":"W"}"#,
            r#"{"premise":"p3","hypothesis":"h","update":"s3","update_type":"S"}"#,
            r#"{"premise":"p4","hypothesis":"h","update":"w4","update_type":"W"}"#,
            r#"{"premise":"p5","hypothesis":"h","update":"s5","update_type":"S"}"#,
            r#"{"premise":"p5","hypothesis":"h","update":"w5","update_type":"W"}"#,
            r#"{"premise":"p6","hypothesis":"h","update":"s6","update_type":"S"}"#,
            r#"{"premise":"p6","hypothesis":"h","update":"w6","update_type":"W"}"#,
        ]);
        let items = load_defeasible(f.path(), &DefeasibleFieldMap::default()).unwrap();
        assert_eq!(items.len(), 4);
    }
}

//! Base-persona loading, similarity-graded variant generation, group
//! partitioning, and persona similarity distance.
//!
//! A subject's peer pool is built from six generated variants of its base
//! persona, one per target similarity level. Levels 0.6/0.8/1.0 form the
//! in-group pool, 0.0/0.2/0.4 the out-group pool, and the persona similarity
//! distance (PSD) of a peer pair is the gap between the two target levels.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{ChatRequest, Gateway, RequestKind, SideBand};
use crate::prompt;
use crate::seeding::rng_for;

/// Target similarity level of a generated persona variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub enum SimilarityLevel {
    L00,
    L02,
    L04,
    L06,
    L08,
    L10,
}

impl SimilarityLevel {
    pub const ALL: [SimilarityLevel; 6] = [
        SimilarityLevel::L00,
        SimilarityLevel::L02,
        SimilarityLevel::L04,
        SimilarityLevel::L06,
        SimilarityLevel::L08,
        SimilarityLevel::L10,
    ];

    /// Level in tenths (0, 2, 4, 6, 8, 10). Integer form keeps PSD
    /// bucketing exact.
    pub fn tenths(self) -> u8 {
        match self {
            SimilarityLevel::L00 => 0,
            SimilarityLevel::L02 => 2,
            SimilarityLevel::L04 => 4,
            SimilarityLevel::L06 => 6,
            SimilarityLevel::L08 => 8,
            SimilarityLevel::L10 => 10,
        }
    }

    pub fn value(self) -> f64 {
        f64::from(self.tenths()) / 10.0
    }

    /// Descriptor keyword used in the variant-generation instruction.
    pub fn keyword(self) -> &'static str {
        match self {
            SimilarityLevel::L00 => "completely unrelated",
            SimilarityLevel::L02 => "very different",
            SimilarityLevel::L04 => "somewhat different",
            SimilarityLevel::L06 => "somewhat similar",
            SimilarityLevel::L08 => "very similar",
            SimilarityLevel::L10 => "almost same",
        }
    }

    /// Labeled field name expected in the generation response.
    pub fn field_name(self) -> &'static str {
        match self {
            SimilarityLevel::L00 => "persona_0",
            SimilarityLevel::L02 => "persona_0_2",
            SimilarityLevel::L04 => "persona_0_4",
            SimilarityLevel::L06 => "persona_0_6",
            SimilarityLevel::L08 => "persona_0_8",
            SimilarityLevel::L10 => "persona_1_0",
        }
    }

    pub fn group(self) -> Group {
        if self.tenths() >= 6 {
            Group::InGroup
        } else {
            Group::OutGroup
        }
    }

    pub fn from_value(v: f64) -> Result<Self> {
        for level in Self::ALL {
            if (v - level.value()).abs() < 1e-9 {
                return Ok(level);
            }
        }
        Err(Error::Domain(format!(
            "similarity level {v} not in {{0.0, 0.2, 0.4, 0.6, 0.8, 1.0}}"
        )))
    }
}

impl TryFrom<f64> for SimilarityLevel {
    type Error = String;
    fn try_from(v: f64) -> std::result::Result<Self, String> {
        SimilarityLevel::from_value(v).map_err(|e| e.to_string())
    }
}

impl From<SimilarityLevel> for f64 {
    fn from(l: SimilarityLevel) -> f64 {
        l.value()
    }
}

/// Group membership, decided solely by the similarity level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    InGroup,
    OutGroup,
}

impl Group {
    pub fn slug(self) -> &'static str {
        match self {
            Group::InGroup => "in_group",
            Group::OutGroup => "out_group",
        }
    }
}

/// Descriptor keyword for a similarity level.
pub fn level_keyword(level: SimilarityLevel) -> &'static str {
    level.keyword()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasePersona {
    pub id: String,
    pub text: String,
}

impl BasePersona {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let id = id.into();
        let text = normalize_text(&text.into());
        if text.is_empty() {
            return Err(Error::Domain(format!("persona {id} has empty text")));
        }
        Ok(BasePersona { id, text })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaVariant {
    pub base_id: String,
    pub level: SimilarityLevel,
    pub text: String,
    pub group: Group,
}

/// The six variants of one base persona, one per similarity level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSet {
    pub base_id: String,
    pub variants: Vec<PersonaVariant>,
}

impl VariantSet {
    /// Build from per-level texts, assigning groups by level. Fails on empty
    /// text; level completeness is guaranteed by construction.
    pub fn new(base_id: &str, texts: [(SimilarityLevel, String); 6]) -> Result<Self> {
        let mut variants = Vec::with_capacity(6);
        let mut seen = HashSet::new();
        for (level, raw) in texts {
            let text = normalize_text(&raw);
            if text.is_empty() {
                return Err(Error::Generation {
                    msg: format!("empty text for {} of base {base_id}", level.field_name()),
                    raw: String::new(),
                });
            }
            if !seen.insert(level) {
                return Err(Error::Domain(format!(
                    "duplicate level {} for base {base_id}",
                    level.value()
                )));
            }
            variants.push(PersonaVariant {
                base_id: base_id.to_string(),
                level,
                text,
                group: level.group(),
            });
        }
        variants.sort_by_key(|v| v.level.tenths());
        Ok(VariantSet {
            base_id: base_id.to_string(),
            variants,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let levels: HashSet<u8> = self.variants.iter().map(|v| v.level.tenths()).collect();
        if self.variants.len() != 6 || levels.len() != 6 {
            return Err(Error::Domain(format!(
                "variant set for {} must hold all six levels exactly once",
                self.base_id
            )));
        }
        for v in &self.variants {
            if v.group != v.level.group() {
                return Err(Error::Domain(format!(
                    "variant {}:{} has group inconsistent with its level",
                    self.base_id,
                    v.level.value()
                )));
            }
            if v.text.trim().is_empty() {
                return Err(Error::Domain(format!(
                    "variant {}:{} has empty text",
                    self.base_id,
                    v.level.value()
                )));
            }
        }
        Ok(())
    }

    pub fn pool(&self, group: Group) -> Vec<&PersonaVariant> {
        self.variants.iter().filter(|v| v.group == group).collect()
    }
}

/// Persona similarity distance between a peer pair, one decimal place.
pub fn psd(s_in: SimilarityLevel, s_out: SimilarityLevel) -> Result<f64> {
    Ok(f64::from(psd_tenths(s_in, s_out)?) / 10.0)
}

/// PSD in tenths; the exact integer form used for bucketing.
pub fn psd_tenths(s_in: SimilarityLevel, s_out: SimilarityLevel) -> Result<u8> {
    if s_in.group() != Group::InGroup {
        return Err(Error::Domain(format!(
            "s_in {} is not an in-group level",
            s_in.value()
        )));
    }
    if s_out.group() != Group::OutGroup {
        return Err(Error::Domain(format!(
            "s_out {} is not an out-group level",
            s_out.value()
        )));
    }
    Ok(s_in.tenths() - s_out.tenths())
}

/// Load `count` base personas from a line-delimited JSON file, sampled
/// uniformly without replacement under `seed`. Pure in (file bytes, field,
/// count, seed).
pub fn load_base_personas(
    source: &Path,
    persona_field: &str,
    count: usize,
    seed: u64,
) -> Result<Vec<BasePersona>> {
    let data = fs::read_to_string(source).map_err(|e| Error::io(source, e))?;
    let mut all = Vec::new();
    for (idx, line) in data.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::Parse {
                path: source.display().to_string(),
                line: line_no,
                msg: format!("invalid JSON: {e}"),
            })?;
        let text = value
            .get(persona_field)
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Parse {
                path: source.display().to_string(),
                line: line_no,
                msg: format!("missing persona field '{persona_field}'"),
            })?;
        let id = value
            .get("id")
            .map(json_scalar_to_string)
            .unwrap_or_else(|| format!("p{line_no}"));
        all.push(BasePersona::new(id, text).map_err(|e| Error::Parse {
            path: source.display().to_string(),
            line: line_no,
            msg: e.to_string(),
        })?);
    }
    if all.len() < count {
        return Err(Error::InsufficientRecords {
            path: source.display().to_string(),
            have: all.len(),
            want: count,
        });
    }
    let mut rng = rng_for(seed, "base_personas", 0);
    let picked = sample(&mut rng, all.len(), count);
    let mut out: Vec<BasePersona> = picked.iter().map(|i| all[i].clone()).collect();
    dedup_ids(&mut out);
    Ok(out)
}

fn json_scalar_to_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

// Source ids are opaque and occasionally collide across heterogeneous files;
// suffix duplicates so ids stay unique within a run.
fn dedup_ids(personas: &mut [BasePersona]) {
    let mut seen: HashSet<String> = HashSet::new();
    for p in personas.iter_mut() {
        let mut candidate = p.id.clone();
        let mut n = 1;
        while !seen.insert(candidate.clone()) {
            n += 1;
            candidate = format!("{}#{n}", p.id);
        }
        p.id = candidate;
    }
}

fn normalize_text(s: &str) -> String {
    s.replace("\r\n", "\n").replace('\r', "\n").trim().to_string()
}

/// Generate the six similarity-graded variants for one base persona with a
/// single completion request. Retries once on a parse failure, then fails
/// carrying the raw response.
pub fn generate_variants(base: &BasePersona, gateway: &Gateway) -> Result<VariantSet> {
    let bundle = prompt::render_persona_generation(base);
    let mut last_raw = String::new();
    for attempt in 0..2 {
        let tag = if attempt == 0 {
            format!("personas:{}", base.id)
        } else {
            format!("personas:{}:retry", base.id)
        };
        let request = ChatRequest {
            model_id: gateway.model_id().to_string(),
            turns: bundle.turns.clone(),
            temperature: gateway.default_temperature(),
            max_output_tokens: 1024,
            request_tag: tag,
            kind: RequestKind::PersonaGeneration,
            sideband: SideBand {
                base_persona_text: Some(base.text.clone()),
                ..SideBand::default()
            },
        };
        let response = gateway.complete(&request)?;
        last_raw = response.text.clone();
        match parse_variant_fields(&response.text) {
            Ok(texts) => return VariantSet::new(&base.id, texts),
            Err(e) => {
                log::warn!(
                    "variant parse failed for base {} (attempt {}): {e}",
                    base.id,
                    attempt + 1
                );
            }
        }
    }
    Err(Error::Generation {
        msg: format!(
            "response missing labeled persona fields for base {} after retry",
            base.id
        ),
        raw: last_raw,
    })
}

/// Extract the six `persona_X:`-labeled fields from a generation response.
pub fn parse_variant_fields(text: &str) -> Result<[(SimilarityLevel, String); 6]> {
    let mut out: Vec<(SimilarityLevel, String)> = Vec::with_capacity(6);
    for level in SimilarityLevel::ALL {
        let field = level.field_name();
        let mut found = None;
        for line in text.lines() {
            let stripped = line
                .trim()
                .trim_start_matches(['-', '*', ' '])
                .trim_start();
            let lower = stripped.to_ascii_lowercase();
            if let Some(rest) = lower.strip_prefix(field) {
                let rest = rest.trim_start();
                if let Some(after) = rest.strip_prefix(':') {
                    // slice the original line to preserve case
                    let offset = stripped.len() - after.len();
                    found = Some(stripped[offset..].trim().to_string());
                    break;
                }
            }
        }
        match found {
            Some(v) if !v.is_empty() => out.push((level, v)),
            Some(_) => {
                return Err(Error::Generation {
                    msg: format!("field {field} is empty"),
                    raw: text.to_string(),
                })
            }
            None => {
                return Err(Error::Generation {
                    msg: format!("field {field} not found"),
                    raw: text.to_string(),
                })
            }
        }
    }
    Ok(out.try_into().expect("six fields collected"))
}

pub const VARIANTS_SCHEMA_VERSION: u32 = 1;

/// One line of variants.jsonl: a base persona and its six variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSetRecord {
    pub schema_version: u32,
    pub base_id: String,
    pub base_text: String,
    pub variants: Vec<PersonaVariant>,
}

pub fn write_variant_sets(
    path: &Path,
    bases: &[BasePersona],
    sets: &[VariantSet],
) -> Result<()> {
    let by_id: std::collections::HashMap<&str, &VariantSet> =
        sets.iter().map(|s| (s.base_id.as_str(), s)).collect();
    let mut records = Vec::with_capacity(bases.len());
    for base in bases {
        let set = by_id.get(base.id.as_str()).ok_or_else(|| {
            Error::Config(format!("no variant set generated for base {}", base.id))
        })?;
        records.push(VariantSetRecord {
            schema_version: VARIANTS_SCHEMA_VERSION,
            base_id: base.id.clone(),
            base_text: base.text.clone(),
            variants: set.variants.clone(),
        });
    }
    crate::runner::write_jsonl(path, &records)
}

pub fn read_variant_sets(path: &Path) -> Result<(Vec<BasePersona>, Vec<VariantSet>)> {
    let records: Vec<VariantSetRecord> = crate::runner::read_jsonl(path)?;
    let mut bases = Vec::with_capacity(records.len());
    let mut sets = Vec::with_capacity(records.len());
    for r in records {
        let set = VariantSet {
            base_id: r.base_id.clone(),
            variants: r.variants,
        };
        set.validate()?;
        bases.push(BasePersona::new(r.base_id, r.base_text)?);
        sets.push(set);
    }
    Ok((bases, sets))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyword_map_is_fixed() {
        assert_eq!(level_keyword(SimilarityLevel::L00), "completely unrelated");
        assert_eq!(level_keyword(SimilarityLevel::L02), "very different");
        assert_eq!(level_keyword(SimilarityLevel::L04), "somewhat different");
        assert_eq!(level_keyword(SimilarityLevel::L06), "somewhat similar");
        assert_eq!(level_keyword(SimilarityLevel::L08), "very similar");
        assert_eq!(level_keyword(SimilarityLevel::L10), "almost same");
    }

    #[test]
    fn off_grid_level_is_rejected() {
        assert!(matches!(
            SimilarityLevel::from_value(0.5),
            Err(Error::Domain(_))
        ));
        assert_eq!(
            SimilarityLevel::from_value(0.8).unwrap(),
            SimilarityLevel::L08
        );
    }

    #[test]
    fn partition_is_total_and_exclusive() {
        let (mut ins, mut outs) = (0, 0);
        for level in SimilarityLevel::ALL {
            match level.group() {
                Group::InGroup => {
                    ins += 1;
                    assert!(level.tenths() >= 6);
                }
                Group::OutGroup => {
                    outs += 1;
                    assert!(level.tenths() <= 4);
                }
            }
        }
        assert_eq!((ins, outs), (3, 3));
    }

    #[test]
    fn psd_examples() {
        assert_eq!(
            psd(SimilarityLevel::L08, SimilarityLevel::L02).unwrap(),
            0.6
        );
        assert_eq!(
            psd(SimilarityLevel::L10, SimilarityLevel::L00).unwrap(),
            1.0
        );
        assert_eq!(
            psd(SimilarityLevel::L06, SimilarityLevel::L04).unwrap(),
            0.2
        );
        assert!(psd(SimilarityLevel::L04, SimilarityLevel::L02).is_err());
        assert!(psd(SimilarityLevel::L08, SimilarityLevel::L06).is_err());
    }

    #[test]
    fn psd_range_is_the_five_buckets() {
        let mut buckets = HashSet::new();
        for s_in in SimilarityLevel::ALL.iter().filter(|l| l.group() == Group::InGroup) {
            for s_out in SimilarityLevel::ALL.iter().filter(|l| l.group() == Group::OutGroup) {
                buckets.insert(psd_tenths(*s_in, *s_out).unwrap());
            }
        }
        let mut got: Vec<u8> = buckets.into_iter().collect();
        got.sort_unstable();
        assert_eq!(got, vec![2, 4, 6, 8, 10]);
    }

    #[test]
    fn parse_variant_fields_accepts_labeled_lines() {
        let text = "persona_0: An arctic marine biologist.\n\
                    persona_0_2: A pastry chef.\n\
                    - persona_0_4: A park ranger.\n\
                    persona_0_6: A data analyst.\n\
                    persona_0_8: A backend engineer.\n\
                    persona_1_0: A software engineer who loves logic.";
        let fields = parse_variant_fields(text).unwrap();
        assert_eq!(fields[0].1, "An arctic marine biologist.");
        assert_eq!(fields[2].1, "A park ranger.");
        assert_eq!(fields[5].0, SimilarityLevel::L10);
    }

    #[test]
    fn parse_variant_fields_rejects_missing_field() {
        let text = "persona_0: a\npersona_0_2: b\npersona_0_4: c\npersona_0_6: d\npersona_0_8: e";
        assert!(matches!(
            parse_variant_fields(text),
            Err(Error::Generation { .. })
        ));
    }

    #[test]
    fn variant_set_partitions_three_and_three() {
        let texts = SimilarityLevel::ALL.map(|l| (l, format!("variant {}", l.value())));
        let set = VariantSet::new("b1", texts).unwrap();
        set.validate().unwrap();
        assert_eq!(set.pool(Group::InGroup).len(), 3);
        assert_eq!(set.pool(Group::OutGroup).len(), 3);
    }
}

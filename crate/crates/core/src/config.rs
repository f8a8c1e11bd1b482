//! Run configuration (TOML) and the run manifest.
//!
//! The config is validated before any side effect and rejected on unknown
//! keys; everything that influences outputs lands in manifest.json so two
//! runs with equal manifests and mock backends produce equal records.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{DefeasibleFieldMap, FieldMap, FormatTag};
use crate::error::{Error, Result};
use crate::gateway::{
    Gateway, MockPolicy, Position, RemoteConfig, RetryPolicy, TEMPERATURE_SWEEP,
};
use crate::prompt::TEMPLATE_VERSION;
use crate::runner::{ExecConfig, PARSER_VERSION};
use crate::scenario::{Condition, ConflictKind, DefeasibleSetting, Mitigation, WrongSide};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_config_schema")]
    pub schema_version: u32,
    pub run: RunSection,
    pub personas: PersonaSection,
    #[serde(default)]
    pub corpus: Option<CorpusSection>,
    #[serde(default)]
    pub defeasible: Option<DefeasibleSection>,
    pub backend: BackendSection,
    #[serde(default)]
    pub numerosity: Option<NumerositySection>,
    #[serde(default)]
    pub mitigation: Option<MitigationSection>,
}

fn default_config_schema() -> u32 {
    CONFIG_SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub conditions: Vec<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_true")]
    pub audit: bool,
}

fn default_max_output_tokens() -> u32 {
    64
}

fn default_batch_size() -> usize {
    64
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonaSection {
    pub source: PathBuf,
    #[serde(default = "default_persona_field")]
    pub persona_field: String,
    /// N: base personas sampled from the source.
    pub count: usize,
    /// K: peer pairs generated per base persona.
    pub pairs: usize,
}

fn default_persona_field() -> String {
    "persona".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub path: PathBuf,
    pub format: String,
    /// M: questions sampled from the benchmark.
    pub questions: usize,
    #[serde(default)]
    pub fields: FieldMap,
    #[serde(default)]
    pub dataset: Option<String>,
}

impl CorpusSection {
    pub fn format_tag(&self) -> Result<FormatTag> {
        self.format.parse()
    }

    pub fn dataset_name(&self) -> String {
        self.dataset.clone().unwrap_or_else(|| {
            self.path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "corpus".into())
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefeasibleSection {
    pub path: PathBuf,
    /// M: premise-hypothesis items used.
    pub items: usize,
    #[serde(default)]
    pub fields: DefeasibleFieldMap,
    /// Settings to build; all six when omitted.
    #[serde(default)]
    pub settings: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    /// "mock" or "remote".
    pub kind: String,
    #[serde(default)]
    pub policy: Option<String>,
    #[serde(default)]
    pub policy_seed: Option<u64>,
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_max_in_flight() -> usize {
    4
}

fn default_timeout_s() -> u64 {
    60
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumerositySection {
    pub composition: [usize; 2],
    pub wrong_side: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MitigationSection {
    pub strategy: String,
    #[serde(default = "default_inner")]
    pub inner: String,
}

fn default_inner() -> String {
    "both_false".into()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.conditions.is_empty() {
            return Err(Error::Config("run.conditions must not be empty".into()));
        }
        if !self.run.temperature.is_finite() || !(0.0..=2.0).contains(&self.run.temperature) {
            return Err(Error::Config(format!(
                "run.temperature {} outside [0, 2]",
                self.run.temperature
            )));
        }
        if self.personas.count == 0 || self.personas.pairs == 0 {
            return Err(Error::Config(
                "personas.count and personas.pairs must be positive".into(),
            ));
        }
        let conditions = self.resolve_conditions()?;
        let needs_qa = conditions.iter().any(|c| !c.is_defeasible());
        let needs_defeasible = conditions.iter().any(|c| c.is_defeasible());
        if needs_qa {
            let corpus = self
                .corpus
                .as_ref()
                .ok_or_else(|| Error::Config("QA conditions need a [corpus] section".into()))?;
            corpus.format_tag()?;
            if corpus.questions == 0 {
                return Err(Error::Config("corpus.questions must be positive".into()));
            }
        }
        if needs_defeasible {
            let d = self.defeasible.as_ref().ok_or_else(|| {
                Error::Config("defeasible conditions need a [defeasible] section".into())
            })?;
            if d.items == 0 {
                return Err(Error::Config("defeasible.items must be positive".into()));
            }
        }
        match self.backend.kind.as_str() {
            "mock" => {
                self.mock_policy()?;
            }
            "remote" => {
                for (field, value) in [
                    ("backend.model_id", &self.backend.model_id),
                    ("backend.base_url", &self.backend.base_url),
                    ("backend.api_key_env", &self.backend.api_key_env),
                ] {
                    if value.as_deref().map_or(true, str::is_empty) {
                        return Err(Error::Config(format!(
                            "{field} is required for a remote backend"
                        )));
                    }
                }
                if self.backend.max_in_flight == 0 {
                    return Err(Error::Config("backend.max_in_flight must be positive".into()));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown backend.kind '{other}' (expected mock or remote)"
                )))
            }
        }
        Ok(())
    }

    /// Expand the condition list into resolved condition values.
    pub fn resolve_conditions(&self) -> Result<Vec<Condition>> {
        let mut out = Vec::new();
        for name in &self.run.conditions {
            match name.as_str() {
                "both_false" => out.push(Condition::BothFalse),
                "out_true" => out.push(Condition::OutTrue),
                "in_true" => out.push(Condition::InTrue),
                "single_in" => out.push(Condition::SingleIn),
                "single_out" => out.push(Condition::SingleOut),
                "mask_both" => out.push(Condition::MaskBoth),
                "numerosity" => {
                    let n = self.numerosity.as_ref().ok_or_else(|| {
                        Error::Config("condition 'numerosity' needs a [numerosity] section".into())
                    })?;
                    let wrong_side = match n.wrong_side.as_str() {
                        "in_wrong" => WrongSide::InWrong,
                        "out_wrong" => WrongSide::OutWrong,
                        other => {
                            return Err(Error::Config(format!(
                                "unknown numerosity.wrong_side '{other}'"
                            )))
                        }
                    };
                    out.push(Condition::Numerosity {
                        n_in: n.composition[0],
                        n_out: n.composition[1],
                        wrong_side,
                    });
                }
                "defeasible" => {
                    let d = self.defeasible.as_ref().ok_or_else(|| {
                        Error::Config("condition 'defeasible' needs a [defeasible] section".into())
                    })?;
                    let settings: Vec<DefeasibleSetting> = match &d.settings {
                        Some(list) => list
                            .iter()
                            .map(|s| DefeasibleSetting::from_slug(s))
                            .collect::<Result<_>>()?,
                        None => DefeasibleSetting::ALL.to_vec(),
                    };
                    for setting in settings {
                        out.push(Condition::Defeasible { setting });
                    }
                }
                "mitigated" => {
                    let m = self.mitigation.as_ref().ok_or_else(|| {
                        Error::Config("condition 'mitigated' needs a [mitigation] section".into())
                    })?;
                    let strategy = match m.strategy.as_str() {
                        "ibi" => Mitigation::Ibi,
                        "scr" => Mitigation::Scr,
                        "hpe" => Mitigation::Hpe,
                        other => {
                            return Err(Error::Config(format!(
                                "unknown mitigation.strategy '{other}'"
                            )))
                        }
                    };
                    let inner = match m.inner.as_str() {
                        "both_false" => ConflictKind::BothFalse,
                        "out_true" => ConflictKind::OutTrue,
                        "in_true" => ConflictKind::InTrue,
                        other => {
                            return Err(Error::Config(format!(
                                "unknown mitigation.inner '{other}'"
                            )))
                        }
                    };
                    out.push(Condition::Mitigated { strategy, inner });
                }
                other => {
                    return Err(Error::Config(format!("unknown condition '{other}'")));
                }
            }
        }
        Ok(out)
    }

    pub fn mock_policy(&self) -> Result<MockPolicy> {
        let spec = self
            .backend
            .policy
            .as_deref()
            .ok_or_else(|| Error::Config("backend.policy is required for a mock backend".into()))?;
        let seed = self.backend.policy_seed.unwrap_or(self.run.seed);
        match spec {
            "truth_oracle" => Ok(MockPolicy::TruthOracle),
            "in_group_follower" => Ok(MockPolicy::InGroupFollower),
            "out_group_follower" => Ok(MockPolicy::OutGroupFollower),
            "position_follower:first" => Ok(MockPolicy::PositionFollower(Position::First)),
            "position_follower:last" => Ok(MockPolicy::PositionFollower(Position::Last)),
            "uniform_random" => Ok(MockPolicy::UniformRandom(seed)),
            other => Err(Error::Config(format!("unknown mock policy '{other}'"))),
        }
    }

    /// Build the configured gateway; mocks never touch the network.
    pub fn build_gateway(&self, audit_path: Option<&Path>) -> Result<Gateway> {
        let gateway = match self.backend.kind.as_str() {
            "mock" => Gateway::mock(self.mock_policy()?),
            "remote" => Gateway::remote(RemoteConfig {
                base_url: self.backend.base_url.clone().unwrap_or_default(),
                model_id: self.backend.model_id.clone().unwrap_or_default(),
                api_key_env: self.backend.api_key_env.clone().unwrap_or_default(),
                timeout_s: self.backend.timeout_s,
                max_in_flight: self.backend.max_in_flight,
                retry: self.backend.retry.clone(),
            })?,
            other => return Err(Error::Config(format!("unknown backend.kind '{other}'"))),
        };
        let gateway = gateway.with_default_temperature(self.run.temperature);
        match audit_path {
            Some(path) => gateway.with_audit(path),
            None => Ok(gateway),
        }
    }

    pub fn exec_config(&self) -> ExecConfig {
        ExecConfig {
            model_id: self
                .backend
                .model_id
                .clone()
                .unwrap_or_else(|| "mock".into()),
            temperature: self.run.temperature,
            max_output_tokens: self.run.max_output_tokens,
            batch_size: self.run.batch_size,
        }
    }

    pub fn dataset_name(&self) -> String {
        self.corpus
            .as_ref()
            .map(|c| c.dataset_name())
            .or_else(|| {
                self.defeasible
                    .as_ref()
                    .map(|d| d.path.file_stem().map(|s| s.to_string_lossy().into_owned()))
                    .flatten()
            })
            .unwrap_or_else(|| "dataset".into())
    }

    pub fn model_name(&self) -> String {
        match self.backend.kind.as_str() {
            "remote" => self.backend.model_id.clone().unwrap_or_default(),
            _ => format!(
                "mock:{}",
                self.backend.policy.clone().unwrap_or_default()
            ),
        }
    }
}

/// Everything that influenced a run's outputs, frozen at build time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub package_version: String,
    pub master_seed: u64,
    pub template_version: String,
    pub parser_version: String,
    pub psd_buckets: Vec<f64>,
    pub temperature_grid: Vec<f64>,
    pub conditions: Vec<String>,
    pub trial_counts: BTreeMap<String, usize>,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(config: &RunConfig, trial_counts: BTreeMap<String, usize>) -> Result<Manifest> {
        let conditions = config
            .resolve_conditions()?
            .iter()
            .map(|c| c.slug())
            .collect();
        Ok(Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed: config.run.seed,
            template_version: TEMPLATE_VERSION.to_string(),
            parser_version: PARSER_VERSION.to_string(),
            psd_buckets: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            temperature_grid: TEMPERATURE_SWEEP.to_vec(),
            conditions,
            trial_counts,
            config: config.clone(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Protocol(format!("manifest serialize: {e}")))?;
        fs::write(path, format!("{body}\n")).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml() -> String {
        r#"
[run]
out_dir = "runs/demo"
seed = 42
conditions = ["both_false"]

[personas]
source = "personas.jsonl"
count = 2
pairs = 3

[corpus]
path = "items.jsonl"
format = "generic_mc"
questions = 5

[backend]
kind = "mock"
policy = "truth_oracle"
"#
        .to_string()
    }

    #[test]
    fn minimal_config_parses_and_validates() {
        let cfg: RunConfig = toml::from_str(&minimal_toml()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.run.seed, 42);
        assert_eq!(cfg.personas.persona_field, "persona");
        assert_eq!(cfg.resolve_conditions().unwrap(), vec![Condition::BothFalse]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = minimal_toml().replace("[backend]", "[backend]\nbogus_key = 1\n");
        let text = text.replace("kind = \"mock\"", "kind = \"mock\"");
        let err = toml::from_str::<RunConfig>(&text).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn unknown_condition_is_a_config_error() {
        let text = minimal_toml().replace("both_false", "sideways");
        let cfg: RunConfig = toml::from_str(&text).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn remote_backend_requires_endpoint_fields() {
        let text = minimal_toml().replace(
            "kind = \"mock\"\npolicy = \"truth_oracle\"",
            "kind = \"remote\"",
        );
        let cfg: RunConfig = toml::from_str(&text).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn defeasible_condition_expands_to_all_six_settings() {
        let mut text = minimal_toml().replace("[\"both_false\"]", "[\"defeasible\"]");
        text = text.replace(
            "[backend]",
            "[defeasible]\npath = \"dnli.jsonl\"\nitems = 10\n\n[backend]",
        );
        let cfg: RunConfig = toml::from_str(&text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.resolve_conditions().unwrap().len(), 6);
    }

    #[test]
    fn manifest_round_trips(){
        let cfg: RunConfig = toml::from_str(&minimal_toml()).unwrap();
        let manifest = Manifest::new(&cfg, BTreeMap::new()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        manifest.write(&path).unwrap();
        let back = Manifest::read(&path).unwrap();
        assert_eq!(manifest, back);
    }
}

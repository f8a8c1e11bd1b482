//! Trial construction for every experimental condition.
//!
//! Builders are pure functions of (inputs, master seed). The unit layout is
//! always bases x peer-pairs x items: a peer pair is sampled once per
//! (base, k) and reused across items, option assignments and presentation
//! order are drawn per trial from seed streams that do not depend on the
//! condition, so condition twins (mask/no-mask, single in/out, mitigated and
//! its inner condition) agree on everything but the designated field.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DefeasibleItem, QAItem};
use crate::error::{Error, Result};
use crate::persona::{psd, BasePersona, Group, PersonaVariant, VariantSet};
use crate::seeding::{derive_seed, rng_for};

pub const TRIALS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateKind {
    Strengthener,
    Weakener,
}

impl UpdateKind {
    pub fn slug(self) -> &'static str {
        match self {
            UpdateKind::Strengthener => "s",
            UpdateKind::Weakener => "w",
        }
    }
}

/// What a peer argues for: a labeled option in QA mode, or an update type in
/// defeasible mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Advocacy {
    OptionLabel(String),
    Update(UpdateKind),
}

impl Advocacy {
    pub fn label(&self) -> Option<&str> {
        match self {
            Advocacy::OptionLabel(l) => Some(l),
            Advocacy::Update(_) => None,
        }
    }

    pub fn update(&self) -> Option<UpdateKind> {
        match self {
            Advocacy::Update(u) => Some(*u),
            Advocacy::OptionLabel(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerAssignment {
    pub variant: PersonaVariant,
    pub advocated: Advocacy,
    /// Masked peers render anonymously but keep their variant for metric
    /// grouping.
    pub masked: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WrongSide {
    InWrong,
    OutWrong,
}

impl WrongSide {
    pub fn slug(self) -> &'static str {
        match self {
            WrongSide::InWrong => "in_wrong",
            WrongSide::OutWrong => "out_wrong",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceSide {
    In,
    Out,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    NoMask,
    MaskBoth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictKind {
    BothFalse,
    OutTrue,
    InTrue,
}

impl ConflictKind {
    pub fn slug(self) -> &'static str {
        match self {
            ConflictKind::BothFalse => "both_false",
            ConflictKind::OutTrue => "out_true",
            ConflictKind::InTrue => "in_true",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mitigation {
    Ibi,
    Scr,
    Hpe,
}

impl Mitigation {
    pub fn slug(self) -> &'static str {
        match self {
            Mitigation::Ibi => "ibi",
            Mitigation::Scr => "scr",
            Mitigation::Hpe => "hpe",
        }
    }
}

/// The six defeasible settings: two identity-update conflicts plus the four
/// single-peer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefeasibleSetting {
    InSOutW,
    InWOutS,
    InS,
    InW,
    OutS,
    OutW,
}

impl DefeasibleSetting {
    pub const ALL: [DefeasibleSetting; 6] = [
        DefeasibleSetting::InSOutW,
        DefeasibleSetting::InWOutS,
        DefeasibleSetting::InS,
        DefeasibleSetting::InW,
        DefeasibleSetting::OutS,
        DefeasibleSetting::OutW,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            DefeasibleSetting::InSOutW => "in_s_out_w",
            DefeasibleSetting::InWOutS => "in_w_out_s",
            DefeasibleSetting::InS => "in_s",
            DefeasibleSetting::InW => "in_w",
            DefeasibleSetting::OutS => "out_s",
            DefeasibleSetting::OutW => "out_w",
        }
    }

    pub fn from_slug(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.slug() == s)
            .ok_or_else(|| Error::Config(format!("unknown defeasible setting '{s}'")))
    }

    /// Peer roster for this setting, in canonical (in before out) order.
    pub fn roster(self) -> Vec<(Group, UpdateKind)> {
        use DefeasibleSetting::*;
        use UpdateKind::*;
        match self {
            InSOutW => vec![(Group::InGroup, Strengthener), (Group::OutGroup, Weakener)],
            InWOutS => vec![(Group::InGroup, Weakener), (Group::OutGroup, Strengthener)],
            InS => vec![(Group::InGroup, Strengthener)],
            InW => vec![(Group::InGroup, Weakener)],
            OutS => vec![(Group::OutGroup, Strengthener)],
            OutW => vec![(Group::OutGroup, Weakener)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "snake_case")]
pub enum Condition {
    BothFalse,
    OutTrue,
    InTrue,
    SingleIn,
    SingleOut,
    MaskBoth,
    Numerosity {
        n_in: usize,
        n_out: usize,
        wrong_side: WrongSide,
    },
    Defeasible {
        setting: DefeasibleSetting,
    },
    Mitigated {
        strategy: Mitigation,
        inner: ConflictKind,
    },
}

impl Condition {
    pub fn slug(&self) -> String {
        match self {
            Condition::BothFalse => "both_false".into(),
            Condition::OutTrue => "out_true".into(),
            Condition::InTrue => "in_true".into(),
            Condition::SingleIn => "single_in".into(),
            Condition::SingleOut => "single_out".into(),
            Condition::MaskBoth => "mask_both".into(),
            Condition::Numerosity {
                n_in,
                n_out,
                wrong_side,
            } => format!("numerosity_{n_in}_{n_out}_{}", wrong_side.slug()),
            Condition::Defeasible { setting } => format!("defeasible_{}", setting.slug()),
            Condition::Mitigated { strategy, inner } => {
                format!("{}_{}", strategy.slug(), inner.slug())
            }
        }
    }

    pub fn is_defeasible(&self) -> bool {
        matches!(self, Condition::Defeasible { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TrialItem {
    Qa(QAItem),
    Defeasible(DefeasibleItem),
}

impl TrialItem {
    pub fn id(&self) -> &str {
        match self {
            TrialItem::Qa(q) => &q.id,
            TrialItem::Defeasible(d) => &d.id,
        }
    }

    pub fn qa(&self) -> Option<&QAItem> {
        match self {
            TrialItem::Qa(q) => Some(q),
            TrialItem::Defeasible(_) => None,
        }
    }

    pub fn defeasible(&self) -> Option<&DefeasibleItem> {
        match self {
            TrialItem::Defeasible(d) => Some(d),
            TrialItem::Qa(_) => None,
        }
    }
}

/// One experimental unit. Peers are stored in presentation order; the
/// applied permutation of the canonical order is kept for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub schema_version: u32,
    pub id: String,
    pub subject: BasePersona,
    pub peers: Vec<PeerAssignment>,
    pub item: TrialItem,
    pub condition: Condition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psd: Option<f64>,
    pub seed: u64,
    pub permutation: Vec<usize>,
}

impl Trial {
    pub fn peers_of(&self, group: Group) -> impl Iterator<Item = &PeerAssignment> {
        self.peers.iter().filter(move |p| p.variant.group == group)
    }

    /// The option label advocated by the given side, when that side exists
    /// and argues for an option. Peers on one side always share one label.
    pub fn advocated_label(&self, group: Group) -> Option<&str> {
        self.peers_of(group).find_map(|p| p.advocated.label())
    }

    pub fn advocated_update(&self, group: Group) -> Option<UpdateKind> {
        self.peers_of(group).find_map(|p| p.advocated.update())
    }

    /// Structural invariants shared by all builders.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Domain(format!("trial {}: {msg}", self.id)));
        let n_in = self.peers_of(Group::InGroup).count();
        let n_out = self.peers_of(Group::OutGroup).count();
        match &self.condition {
            Condition::BothFalse
            | Condition::OutTrue
            | Condition::InTrue
            | Condition::MaskBoth
            | Condition::Mitigated { .. } => {
                if self.peers.len() != 2 || n_in != 1 || n_out != 1 {
                    return fail("triadic condition needs exactly one in-group and one out-group peer".into());
                }
            }
            Condition::SingleIn => {
                if self.peers.len() != 1 || n_in != 1 {
                    return fail("single-source in-side needs exactly one in-group peer".into());
                }
            }
            Condition::SingleOut => {
                if self.peers.len() != 1 || n_out != 1 {
                    return fail("single-source out-side needs exactly one out-group peer".into());
                }
            }
            Condition::Numerosity { n_in: ci, n_out: co, .. } => {
                if n_in != *ci || n_out != *co || self.peers.len() != ci + co {
                    return fail(format!("numerosity composition mismatch: {n_in}+{n_out}"));
                }
            }
            Condition::Defeasible { setting } => {
                if self.peers.len() != setting.roster().len() {
                    return fail("defeasible peer count mismatch".into());
                }
            }
        }
        if let TrialItem::Qa(item) = &self.item {
            for p in &self.peers {
                match p.advocated.label() {
                    Some(l) if item.option_text(l).is_some() => {}
                    _ => return fail("peer advocates an option not in the item".into()),
                }
            }
            if let (Some(o_in), Some(o_out)) = (
                self.advocated_label(Group::InGroup),
                self.advocated_label(Group::OutGroup),
            ) {
                if o_in == o_out {
                    return fail("in-group and out-group advocate the same option".into());
                }
            }
            let truth = item.truth_label.as_str();
            let check = |label: Option<&str>, want_truth: bool, side: &str| {
                match label {
                    Some(l) if (l == truth) == want_truth => Ok(()),
                    Some(l) => Err(format!(
                        "{side} advocates {l}, expected {}",
                        if want_truth { "truth" } else { "a false option" }
                    )),
                    None => Err(format!("{side} missing")),
                }
            };
            let pattern: Option<(bool, bool)> = match &self.condition {
                Condition::BothFalse | Condition::MaskBoth => Some((false, false)),
                Condition::OutTrue => Some((false, true)),
                Condition::InTrue => Some((true, false)),
                Condition::Mitigated { inner, .. } => Some(match inner {
                    ConflictKind::BothFalse => (false, false),
                    ConflictKind::OutTrue => (false, true),
                    ConflictKind::InTrue => (true, false),
                }),
                Condition::Numerosity { wrong_side, .. } => Some(match wrong_side {
                    WrongSide::InWrong => (false, true),
                    WrongSide::OutWrong => (true, false),
                }),
                _ => None,
            };
            if let Some((in_truth, out_truth)) = pattern {
                check(self.advocated_label(Group::InGroup), in_truth, "in-group")
                    .map_err(|m| Error::Domain(format!("trial {}: {m}", self.id)))?;
                check(self.advocated_label(Group::OutGroup), out_truth, "out-group")
                    .map_err(|m| Error::Domain(format!("trial {}: {m}", self.id)))?;
            }
            if matches!(self.condition, Condition::SingleIn | Condition::SingleOut) {
                let l = self.peers[0].advocated.label().unwrap_or_default();
                if l == truth {
                    return fail("single-source peer must advocate a false option".into());
                }
            }
        }
        Ok(())
    }
}

/// Uniformly permute peer order; the applied permutation replaces the
/// trial's audit record.
pub fn randomize_order(mut trial: Trial, rng: &mut impl Rng) -> Trial {
    let (peers, perm) = shuffle_peers(trial.peers, rng);
    trial.peers = peers;
    trial.permutation = perm;
    trial
}

fn shuffle_peers(peers: Vec<PeerAssignment>, rng: &mut impl Rng) -> (Vec<PeerAssignment>, Vec<usize>) {
    let mut perm: Vec<usize> = (0..peers.len()).collect();
    perm.shuffle(rng);
    let reordered = perm.iter().map(|&i| peers[i].clone()).collect();
    (reordered, perm)
}

/// Shared inputs of all builders.
pub struct BuildParams<'a> {
    pub bases: &'a [BasePersona],
    pub variant_sets: &'a [VariantSet],
    pub pairs_per_base: usize,
    pub master_seed: u64,
}

impl<'a> BuildParams<'a> {
    fn set_index(&self) -> Result<HashMap<&'a str, &'a VariantSet>> {
        let map: HashMap<&str, &VariantSet> = self
            .variant_sets
            .iter()
            .map(|s| (s.base_id.as_str(), s))
            .collect();
        for base in self.bases {
            let set = map.get(base.id.as_str()).ok_or_else(|| {
                Error::Config(format!("no variant set for base persona {}", base.id))
            })?;
            set.validate()?;
        }
        if self.bases.is_empty() {
            return Err(Error::Config("no base personas".into()));
        }
        if self.pairs_per_base == 0 {
            return Err(Error::Config("pairs_per_base must be positive".into()));
        }
        Ok(map)
    }
}

fn sample_variant(set: &VariantSet, group: Group, rng: &mut ChaCha8Rng) -> PersonaVariant {
    let pool = set.pool(group);
    pool[rng.gen_range(0..pool.len())].clone()
}

/// Drive the bases x pairs x items cross. The unit closure receives the
/// sampled peer pair and condition-independent seed streams for the trial.
fn build_units<I, F>(
    p: &BuildParams,
    items: &[I],
    mut unit: F,
) -> Result<Vec<Trial>>
where
    F: FnMut(UnitCtx, &I) -> Result<Trial>,
{
    let sets = p.set_index()?;
    if items.is_empty() {
        return Err(Error::Config("no items to build trials from".into()));
    }
    let k_total = p.pairs_per_base;
    let m_total = items.len();
    let mut trials = Vec::with_capacity(p.bases.len() * k_total * m_total);
    for (i, base) in p.bases.iter().enumerate() {
        let set = sets[base.id.as_str()];
        for k in 0..k_total {
            let pair_index = (i * k_total + k) as u64;
            let mut pair_rng = rng_for(p.master_seed, "pair", pair_index);
            let p_in = sample_variant(set, Group::InGroup, &mut pair_rng);
            let p_out = sample_variant(set, Group::OutGroup, &mut pair_rng);
            for (m, item) in items.iter().enumerate() {
                let trial_index = (pair_index as usize * m_total + m) as u64;
                let ctx = UnitCtx {
                    base,
                    set,
                    p_in: &p_in,
                    p_out: &p_out,
                    k,
                    master_seed: p.master_seed,
                    trial_index,
                };
                let trial = unit(ctx, item)?;
                trial.validate()?;
                trials.push(trial);
            }
        }
    }
    Ok(trials)
}

struct UnitCtx<'a> {
    base: &'a BasePersona,
    set: &'a VariantSet,
    p_in: &'a PersonaVariant,
    p_out: &'a PersonaVariant,
    k: usize,
    master_seed: u64,
    trial_index: u64,
}

impl<'a> UnitCtx<'a> {
    fn assign_rng(&self) -> ChaCha8Rng {
        rng_for(self.master_seed, "assign", self.trial_index)
    }

    fn order_rng(&self) -> ChaCha8Rng {
        rng_for(self.master_seed, "order", self.trial_index)
    }

    fn trial_seed(&self) -> u64 {
        derive_seed(self.master_seed, "trial", self.trial_index)
    }

    fn finish(
        &self,
        condition: Condition,
        item: TrialItem,
        peers: Vec<PeerAssignment>,
        psd_value: Option<f64>,
    ) -> Trial {
        let id = format!(
            "{}:{}:k{}:{}",
            condition.slug(),
            self.base.id,
            self.k,
            item.id()
        );
        let trial = Trial {
            schema_version: TRIALS_SCHEMA_VERSION,
            id,
            subject: self.base.clone(),
            peers,
            item,
            condition,
            psd: psd_value,
            seed: self.trial_seed(),
            permutation: Vec::new(),
        };
        randomize_order(trial, &mut self.order_rng())
    }

    fn pair_psd(&self) -> Option<f64> {
        psd(self.p_in.level, self.p_out.level).ok()
    }
}

/// Pick the (O_in, O_out) labels for a conflict pattern. The coin decides
/// which false option lands on which side so neither option is tied to a
/// side systematically.
fn conflict_labels(kind: ConflictKind, item: &QAItem, rng: &mut ChaCha8Rng) -> (String, String) {
    let falses = item.false_labels();
    let flip = rng.gen::<bool>();
    let (f_a, f_b) = if flip {
        (falses[1], falses[0])
    } else {
        (falses[0], falses[1])
    };
    match kind {
        ConflictKind::BothFalse => (f_a.to_string(), f_b.to_string()),
        ConflictKind::OutTrue => (f_a.to_string(), item.truth_label.clone()),
        ConflictKind::InTrue => (item.truth_label.clone(), f_a.to_string()),
    }
}

/// Both peers advocate distinct incorrect options.
pub fn build_existence_trials(p: &BuildParams, items: &[QAItem]) -> Result<Vec<Trial>> {
    build_conflict_trials(p, items, ConflictKind::BothFalse)
}

/// Truth-tribe conflict trials with the given correctness pattern.
pub fn build_conflict_trials(
    p: &BuildParams,
    items: &[QAItem],
    which: ConflictKind,
) -> Result<Vec<Trial>> {
    build_conflict_with(p, items, which, false, None)
}

fn build_conflict_with(
    p: &BuildParams,
    items: &[QAItem],
    which: ConflictKind,
    masked: bool,
    mitigation: Option<Mitigation>,
) -> Result<Vec<Trial>> {
    build_units(p, items, |ctx, item| {
        item.validate_reduced()?;
        let (o_in, o_out) = conflict_labels(which, item, &mut ctx.assign_rng());
        let peers = vec![
            PeerAssignment {
                variant: ctx.p_in.clone(),
                advocated: Advocacy::OptionLabel(o_in),
                masked,
            },
            PeerAssignment {
                variant: ctx.p_out.clone(),
                advocated: Advocacy::OptionLabel(o_out),
                masked,
            },
        ];
        let condition = match (masked, mitigation) {
            (true, _) => Condition::MaskBoth,
            (false, Some(strategy)) => Condition::Mitigated {
                strategy,
                inner: which,
            },
            (false, None) => match which {
                ConflictKind::BothFalse => Condition::BothFalse,
                ConflictKind::OutTrue => Condition::OutTrue,
                ConflictKind::InTrue => Condition::InTrue,
            },
        };
        let psd_value = ctx.pair_psd();
        Ok(ctx.finish(condition, TrialItem::Qa(item.clone()), peers, psd_value))
    })
}

/// One peer alone presents a fixed incorrect option; the In and Out twins of
/// a unit share the same option.
pub fn build_single_source_trials(
    p: &BuildParams,
    items: &[QAItem],
    side: SourceSide,
) -> Result<Vec<Trial>> {
    build_units(p, items, |ctx, item| {
        item.validate_reduced()?;
        // Same draw as the conflict builders' coin so the false content is
        // side-independent.
        let falses = item.false_labels();
        let flip = ctx.assign_rng().gen::<bool>();
        let advocated = if flip { falses[1] } else { falses[0] }.to_string();
        let (variant, condition) = match side {
            SourceSide::In => (ctx.p_in.clone(), Condition::SingleIn),
            SourceSide::Out => (ctx.p_out.clone(), Condition::SingleOut),
        };
        let peers = vec![PeerAssignment {
            variant,
            advocated: Advocacy::OptionLabel(advocated),
            masked: false,
        }];
        Ok(ctx.finish(condition, TrialItem::Qa(item.clone()), peers, None))
    })
}

/// Both-false trials with peer personas hidden (or the unmasked twin).
pub fn build_anonymized_trials(
    p: &BuildParams,
    items: &[QAItem],
    mask: MaskMode,
) -> Result<Vec<Trial>> {
    build_conflict_with(p, items, ConflictKind::BothFalse, mask == MaskMode::MaskBoth, None)
}

/// Conflict trials wrapped in a mitigation strategy.
pub fn build_mitigated_trials(
    p: &BuildParams,
    items: &[QAItem],
    strategy: Mitigation,
    inner: ConflictKind,
) -> Result<Vec<Trial>> {
    build_conflict_with(p, items, inner, false, Some(strategy))
}

/// Four peers with a fixed in/out composition; the wrong side advocates a
/// false option, the other side the truth. In-side variants are sampled
/// without replacement from the three in-group levels (likewise out).
pub fn build_numerosity_trials(
    p: &BuildParams,
    items: &[QAItem],
    composition: (usize, usize),
    wrong_side: WrongSide,
) -> Result<Vec<Trial>> {
    let (n_in, n_out) = composition;
    if n_in + n_out != 4 || !matches!((n_in, n_out), (1, 3) | (2, 2) | (3, 1)) {
        return Err(Error::Config(format!(
            "numerosity composition ({n_in},{n_out}) not in {{(1,3),(2,2),(3,1)}}"
        )));
    }
    build_units(p, items, |ctx, item| {
        item.validate_reduced()?;
        let mut rng = ctx.assign_rng();
        let falses = item.false_labels();
        let false_label = if rng.gen::<bool>() { falses[1] } else { falses[0] }.to_string();
        let truth_label = item.truth_label.clone();
        let (in_label, out_label) = match wrong_side {
            WrongSide::InWrong => (false_label, truth_label),
            WrongSide::OutWrong => (truth_label, false_label),
        };
        let mut peers = Vec::with_capacity(4);
        for (group, n, label) in [
            (Group::InGroup, n_in, &in_label),
            (Group::OutGroup, n_out, &out_label),
        ] {
            let pool = ctx.set.pool(group);
            let picked = rand::seq::index::sample(&mut rng, pool.len(), n.min(pool.len()));
            for j in 0..n {
                let variant = if j < picked.len() {
                    pool[picked.index(j)].clone()
                } else {
                    // pool exhausted; fall back to with-replacement
                    pool[rng.gen_range(0..pool.len())].clone()
                };
                peers.push(PeerAssignment {
                    variant,
                    advocated: Advocacy::OptionLabel(label.clone()),
                    masked: false,
                });
            }
        }
        let condition = Condition::Numerosity {
            n_in,
            n_out,
            wrong_side,
        };
        Ok(ctx.finish(condition, TrialItem::Qa(item.clone()), peers, None))
    })
}

/// Defeasible trials for one of the six settings; the peer "advocacy" is an
/// update type rendered with the item's strengthener or weakener text.
pub fn build_defeasible_trials(
    p: &BuildParams,
    items: &[DefeasibleItem],
    setting: DefeasibleSetting,
) -> Result<Vec<Trial>> {
    build_units(p, items, |ctx, item| {
        let roster = setting.roster();
        let peers: Vec<PeerAssignment> = roster
            .iter()
            .map(|(group, update)| PeerAssignment {
                variant: match group {
                    Group::InGroup => ctx.p_in.clone(),
                    Group::OutGroup => ctx.p_out.clone(),
                },
                advocated: Advocacy::Update(*update),
                masked: false,
            })
            .collect();
        let psd_value = if roster.len() == 2 { ctx.pair_psd() } else { None };
        Ok(ctx.finish(
            Condition::Defeasible { setting },
            TrialItem::Defeasible(item.clone()),
            peers,
            psd_value,
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::McOption;
    use crate::persona::SimilarityLevel;

    pub(crate) fn fixture_bases(n: usize) -> Vec<BasePersona> {
        (0..n)
            .map(|i| BasePersona::new(format!("b{i}"), format!("base persona {i}")).unwrap())
            .collect()
    }

    pub(crate) fn fixture_sets(bases: &[BasePersona]) -> Vec<VariantSet> {
        bases
            .iter()
            .map(|b| {
                let texts = SimilarityLevel::ALL
                    .map(|l| (l, format!("{} variant {} of {}", l.keyword(), l.value(), b.id)));
                VariantSet::new(&b.id, texts).unwrap()
            })
            .collect()
    }

    pub(crate) fn fixture_items(m: usize) -> Vec<QAItem> {
        (0..m)
            .map(|i| QAItem {
                id: format!("q{i}"),
                question: format!("question {i}?"),
                options: vec![
                    McOption { label: "(A)".into(), text: format!("alpha{i}") },
                    McOption { label: "(B)".into(), text: format!("beta{i}") },
                    McOption { label: "(C)".into(), text: format!("gamma{i}") },
                ],
                truth_label: "(B)".into(),
                subcategory: Some(format!("sub{}", i % 3)),
            })
            .collect()
    }

    fn params<'a>(
        bases: &'a [BasePersona],
        sets: &'a [VariantSet],
        k: usize,
        seed: u64,
    ) -> BuildParams<'a> {
        BuildParams {
            bases,
            variant_sets: sets,
            pairs_per_base: k,
            master_seed: seed,
        }
    }

    #[test]
    fn existence_builds_n_times_k_times_m_trials() {
        let bases = fixture_bases(2);
        let sets = fixture_sets(&bases);
        let items = fixture_items(5);
        let trials = build_existence_trials(&params(&bases, &sets, 3, 11), &items).unwrap();
        assert_eq!(trials.len(), 30);
        for t in &trials {
            let truth = t.item.qa().unwrap().truth_label.as_str();
            let o_in = t.advocated_label(Group::InGroup).unwrap();
            let o_out = t.advocated_label(Group::OutGroup).unwrap();
            assert_ne!(o_in, truth);
            assert_ne!(o_out, truth);
            assert_ne!(o_in, o_out);
            assert!(t.psd.is_some());
        }
    }

    #[test]
    fn in_group_first_frequency_is_near_half() {
        let bases = fixture_bases(5);
        let sets = fixture_sets(&bases);
        let items = fixture_items(20);
        let trials = build_existence_trials(&params(&bases, &sets, 10, 7), &items).unwrap();
        assert_eq!(trials.len(), 1000);
        let in_first = trials
            .iter()
            .filter(|t| t.peers[0].variant.group == Group::InGroup)
            .count() as f64
            / trials.len() as f64;
        assert!((0.45..=0.55).contains(&in_first), "in-first rate {in_first}");
    }

    #[test]
    fn conflict_patterns_hold() {
        let bases = fixture_bases(2);
        let sets = fixture_sets(&bases);
        let items = fixture_items(4);
        let p = params(&bases, &sets, 2, 3);
        for t in build_conflict_trials(&p, &items, ConflictKind::OutTrue).unwrap() {
            assert_eq!(
                t.advocated_label(Group::OutGroup).unwrap(),
                t.item.qa().unwrap().truth_label
            );
        }
        for t in build_conflict_trials(&p, &items, ConflictKind::InTrue).unwrap() {
            assert_eq!(
                t.advocated_label(Group::InGroup).unwrap(),
                t.item.qa().unwrap().truth_label
            );
        }
    }

    #[test]
    fn both_false_equals_existence_structurally() {
        let bases = fixture_bases(2);
        let sets = fixture_sets(&bases);
        let items = fixture_items(3);
        let p = params(&bases, &sets, 2, 19);
        let a = build_existence_trials(&p, &items).unwrap();
        let b = build_conflict_trials(&p, &items, ConflictKind::BothFalse).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_source_twins_share_advocated_content() {
        let bases = fixture_bases(1);
        let sets = fixture_sets(&bases);
        let items = fixture_items(10);
        let p = params(&bases, &sets, 1, 23);
        let ins = build_single_source_trials(&p, &items, SourceSide::In).unwrap();
        let outs = build_single_source_trials(&p, &items, SourceSide::Out).unwrap();
        assert_eq!(ins.len(), 10);
        assert_eq!(outs.len(), 10);
        for (a, b) in ins.iter().zip(&outs) {
            assert_eq!(a.peers[0].advocated, b.peers[0].advocated);
            assert_eq!(a.peers[0].variant.group, Group::InGroup);
            assert_eq!(b.peers[0].variant.group, Group::OutGroup);
            assert_eq!(a.subject, b.subject);
            assert_eq!(a.item, b.item);
            assert_eq!(a.seed, b.seed);
        }
    }

    #[test]
    fn mask_twins_differ_only_in_designated_fields() {
        let bases = fixture_bases(2);
        let sets = fixture_sets(&bases);
        let items = fixture_items(3);
        let p = params(&bases, &sets, 2, 31);
        let plain = build_anonymized_trials(&p, &items, MaskMode::NoMask).unwrap();
        let masked = build_anonymized_trials(&p, &items, MaskMode::MaskBoth).unwrap();
        // the no-mask arm reduces to plain both-false trials
        assert_eq!(plain, build_existence_trials(&p, &items).unwrap());
        for (a, b) in plain.iter().zip(&masked) {
            assert_eq!(b.condition, Condition::MaskBoth);
            assert!(b.peers.iter().all(|p| p.masked));
            assert!(a.peers.iter().all(|p| !p.masked));
            assert_eq!(a.subject, b.subject);
            assert_eq!(a.item, b.item);
            assert_eq!(a.seed, b.seed);
            assert_eq!(a.permutation, b.permutation);
            assert_eq!(a.psd, b.psd);
            for (pa, pb) in a.peers.iter().zip(&b.peers) {
                assert_eq!(pa.variant, pb.variant);
                assert_eq!(pa.advocated, pb.advocated);
            }
        }
    }

    #[test]
    fn numerosity_compositions_sum_to_four_and_follow_wrong_side() {
        let bases = fixture_bases(2);
        let sets = fixture_sets(&bases);
        let items = fixture_items(3);
        let p = params(&bases, &sets, 2, 5);
        for comp in [(1usize, 3usize), (2, 2), (3, 1)] {
            let trials =
                build_numerosity_trials(&p, &items, comp, WrongSide::InWrong).unwrap();
            for t in &trials {
                assert_eq!(t.peers.len(), 4);
                assert_eq!(t.peers_of(Group::InGroup).count(), comp.0);
                assert_eq!(t.peers_of(Group::OutGroup).count(), comp.1);
                let truth = t.item.qa().unwrap().truth_label.as_str();
                assert_ne!(t.advocated_label(Group::InGroup).unwrap(), truth);
                assert_eq!(t.advocated_label(Group::OutGroup).unwrap(), truth);
                // within-side variants are distinct when the pool allows
                let mut in_levels: Vec<u8> = t
                    .peers_of(Group::InGroup)
                    .map(|p| p.variant.level.tenths())
                    .collect();
                in_levels.sort_unstable();
                in_levels.dedup();
                assert_eq!(in_levels.len(), comp.0.min(3));
            }
        }
        let mirrored =
            build_numerosity_trials(&p, &items, (3, 1), WrongSide::OutWrong).unwrap();
        for t in &mirrored {
            let truth = t.item.qa().unwrap().truth_label.as_str();
            assert_eq!(t.advocated_label(Group::InGroup).unwrap(), truth);
            assert_ne!(t.advocated_label(Group::OutGroup).unwrap(), truth);
        }
        assert!(build_numerosity_trials(&p, &items, (4, 0), WrongSide::InWrong).is_err());
    }

    #[test]
    fn defeasible_settings_build_expected_rosters_and_counts() {
        let bases = fixture_bases(1);
        let sets = fixture_sets(&bases);
        let items: Vec<DefeasibleItem> = (0..10)
            .map(|i| DefeasibleItem {
                id: format!("d{i}"),
                premise: format!("premise {i}"),
                hypothesis: format!("hypothesis {i}"),
                strengthener: format!("s {i}"),
                weakener: format!("w {i}"),
            })
            .collect();
        let p = params(&bases, &sets, 1, 13);
        let mut total = 0;
        for setting in DefeasibleSetting::ALL {
            let trials = build_defeasible_trials(&p, &items, setting).unwrap();
            total += trials.len();
            for t in &trials {
                assert_eq!(t.peers.len(), setting.roster().len());
            }
        }
        assert_eq!(total, 60);
        let conflict = build_defeasible_trials(&p, &items, DefeasibleSetting::InSOutW).unwrap();
        for t in &conflict {
            assert_eq!(
                t.advocated_update(Group::InGroup),
                Some(UpdateKind::Strengthener)
            );
            assert_eq!(
                t.advocated_update(Group::OutGroup),
                Some(UpdateKind::Weakener)
            );
        }
        let single = build_defeasible_trials(&p, &items, DefeasibleSetting::OutW).unwrap();
        for t in &single {
            assert_eq!(t.peers.len(), 1);
            assert_eq!(t.peers[0].variant.group, Group::OutGroup);
        }
    }

    #[test]
    fn builders_are_deterministic_in_the_master_seed() {
        let bases = fixture_bases(2);
        let sets = fixture_sets(&bases);
        let items = fixture_items(4);
        let p = params(&bases, &sets, 2, 77);
        let a = build_existence_trials(&p, &items).unwrap();
        let b = build_existence_trials(&p, &items).unwrap();
        assert_eq!(a, b);
        let p2 = params(&bases, &sets, 2, 78);
        assert_ne!(a, build_existence_trials(&p2, &items).unwrap());
    }

    #[test]
    fn four_peer_permutations_are_uniform() {
        use std::collections::HashMap;
        let mut rng = rng_for(99, "perm_test", 0);
        let peers: Vec<PeerAssignment> = fixture_sets(&fixture_bases(1))[0]
            .variants
            .iter()
            .take(4)
            .map(|v| PeerAssignment {
                variant: v.clone(),
                advocated: Advocacy::OptionLabel("(A)".into()),
                masked: false,
            })
            .collect();
        let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
        let draws = 10_000;
        for _ in 0..draws {
            let (_, perm) = shuffle_peers(peers.clone(), &mut rng);
            *counts.entry(perm).or_default() += 1;
        }
        assert_eq!(counts.len(), 24);
        // 3-sigma binomial band around 1/24
        let p = 1.0 / 24.0;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        for (perm, n) in counts {
            let f = n as f64 / draws as f64;
            assert!(
                (f - p).abs() <= 3.0 * sigma + 1e-12,
                "permutation {perm:?} frequency {f} outside 3-sigma of {p}"
            );
        }
    }

    #[test]
    fn fixed_seed_gives_fixed_permutation() {
        let bases = fixture_bases(1);
        let sets = fixture_sets(&bases);
        let items = fixture_items(1);
        let p = params(&bases, &sets, 1, 41);
        let a = build_existence_trials(&p, &items).unwrap();
        let b = build_existence_trials(&p, &items).unwrap();
        assert_eq!(a[0].permutation, b[0].permutation);
        assert_eq!(a[0].permutation.len(), 2);
    }
}

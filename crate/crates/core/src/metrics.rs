//! Quantitative measures over trial-record streams: truth deviation rates,
//! tribe coefficient, accuracy, error-rate delta, PSD-bucketed summaries,
//! Pearson correlation, and defeasible judgment shifts.
//!
//! All rates reduce to exact integer tallies folded over the records, so a
//! parallel partial aggregation with the associative merge equals the
//! sequential fold exactly. Rates are fractions; percent formatting belongs
//! to the report layer.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::persona::Group;
use crate::runner::{ParsedAnswer, TrialRecord};
use crate::scenario::Condition;

/// Exact Bernoulli tally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Counts {
    pub count: usize,
    pub denom: usize,
}

impl Counts {
    pub fn add(&mut self, hit: bool) {
        self.denom += 1;
        if hit {
            self.count += 1;
        }
    }

    pub fn merge(&mut self, other: Counts) {
        self.count += other.count;
        self.denom += other.denom;
    }

    /// Empirical rate; `None` flags an undefined (empty-denominator) rate.
    pub fn value(self) -> Option<f64> {
        (self.denom > 0).then(|| self.count as f64 / self.denom as f64)
    }

    /// Bernoulli standard error of the mean, sqrt(p(1-p)/n).
    pub fn sem(self) -> Option<f64> {
        self.value()
            .map(|p| (p * (1.0 - p) / self.denom as f64).sqrt())
    }
}

/// Per-base-persona tallies, for the clustered SEM mode.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BaseCounts {
    pub tdr_in: Counts,
    pub tdr_out: Counts,
    pub accuracy: Counts,
}

/// Associative fold state for all rate metrics.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricCounts {
    pub n: usize,
    pub tdr_in: Counts,
    pub tdr_out: Counts,
    pub accuracy: Counts,
    pub o1_unparseable: usize,
    pub per_base: BTreeMap<String, BaseCounts>,
}

impl MetricCounts {
    pub fn add(&mut self, record: &TrialRecord) {
        let Some(item) = record.trial.item.qa() else {
            return;
        };
        self.n += 1;
        let o1 = record.o1_label();
        if record.o1.is_some() && o1.is_none() {
            self.o1_unparseable += 1;
        }
        let Some(answer) = o1 else { return };
        let correct = answer == item.truth_label;
        // a side enters its TDR denominator only when it advocates a false option
        let side_hit = |side: Group| {
            record
                .trial
                .advocated_label(side)
                .filter(|a| *a != item.truth_label)
                .map(|a| answer == a)
        };
        let in_hit = side_hit(Group::InGroup);
        let out_hit = side_hit(Group::OutGroup);
        self.accuracy.add(correct);
        if let Some(hit) = in_hit {
            self.tdr_in.add(hit);
        }
        if let Some(hit) = out_hit {
            self.tdr_out.add(hit);
        }
        let base = self
            .per_base
            .entry(record.trial.subject.id.clone())
            .or_default();
        base.accuracy.add(correct);
        if let Some(hit) = in_hit {
            base.tdr_in.add(hit);
        }
        if let Some(hit) = out_hit {
            base.tdr_out.add(hit);
        }
    }

    pub fn merge(mut self, other: MetricCounts) -> MetricCounts {
        self.n += other.n;
        self.tdr_in.merge(other.tdr_in);
        self.tdr_out.merge(other.tdr_out);
        self.accuracy.merge(other.accuracy);
        self.o1_unparseable += other.o1_unparseable;
        for (base, counts) in other.per_base {
            let entry = self.per_base.entry(base).or_default();
            entry.tdr_in.merge(counts.tdr_in);
            entry.tdr_out.merge(counts.tdr_out);
            entry.accuracy.merge(counts.accuracy);
        }
        self
    }
}

/// Sequential fold over a record set.
pub fn tally<'a, I: IntoIterator<Item = &'a TrialRecord>>(records: I) -> MetricCounts {
    let mut acc = MetricCounts::default();
    for r in records {
        acc.add(r);
    }
    acc
}

/// Parallel partial aggregation; must (and does) equal the sequential fold
/// exactly since every metric is an integer tally.
#[cfg(feature = "parallel")]
pub fn tally_par(records: &[&TrialRecord]) -> MetricCounts {
    use rayon::prelude::*;
    records
        .par_iter()
        .fold(MetricCounts::default, |mut acc, r| {
            acc.add(r);
            acc
        })
        .reduce(MetricCounts::default, MetricCounts::merge)
}

/// Truth deviation rate for one side: among records where that side
/// advocates a false option and the final answer parsed, the fraction that
/// adopted the side's option.
pub fn tdr(records: &[&TrialRecord], side: Group) -> Counts {
    let counts = tally(records.iter().copied());
    match side {
        Group::InGroup => counts.tdr_in,
        Group::OutGroup => counts.tdr_out,
    }
}

/// Identity-bias magnitude: TDR-I minus TDR-O.
pub fn tribe_coefficient(tdr_in: f64, tdr_out: f64) -> f64 {
    tdr_in - tdr_out
}

/// Post-exposure accuracy over parseable final answers.
pub fn accuracy(records: &[&TrialRecord]) -> Counts {
    tally(records.iter().copied()).accuracy
}

/// Standard deviation of per-base rates divided by sqrt(B); `None` below
/// two contributing bases.
fn clustered_sem<F: Fn(&BaseCounts) -> Counts>(counts: &MetricCounts, pick: F) -> Option<f64> {
    let rates: Vec<f64> = counts
        .per_base
        .values()
        .filter_map(|b| pick(b).value())
        .collect();
    let b = rates.len();
    if b < 2 {
        return None;
    }
    let mean = rates.iter().sum::<f64>() / b as f64;
    let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (b - 1) as f64;
    Some((var / b as f64).sqrt())
}

/// Error-rate increase of the exposed set relative to the solo set over
/// matched (subject, item) pairs. Exposed records answer with o1, solo
/// records with their baseline o0.
pub fn delta_err(exposed: &[&TrialRecord], solo: &[&TrialRecord]) -> Option<f64> {
    let mut solo_correct: HashMap<(&str, &str), bool> = HashMap::new();
    for r in solo {
        if let (Some(item), Some(ParsedAnswer::Label(l))) = (r.trial.item.qa(), &r.o0) {
            solo_correct
                .entry((r.trial.subject.id.as_str(), item.id.as_str()))
                .or_insert(*l == item.truth_label);
        }
    }
    let mut exposed_counts = Counts::default();
    let mut used: BTreeMap<(&str, &str), bool> = BTreeMap::new();
    for r in exposed {
        let Some(item) = r.trial.item.qa() else { continue };
        let key = (r.trial.subject.id.as_str(), item.id.as_str());
        let Some(solo_ok) = solo_correct.get(&key) else { continue };
        if let Some(answer) = r.o1_label() {
            exposed_counts.add(answer == item.truth_label);
            used.insert(key, *solo_ok);
        }
    }
    let acc_exposed = exposed_counts.value()?;
    let solo_hits = used.values().filter(|ok| **ok).count();
    let acc_solo = solo_hits as f64 / used.len() as f64;
    Some((1.0 - acc_exposed) - (1.0 - acc_solo))
}

/// Sample Pearson correlation with the two-sided p-value from the
/// t-distribution with n-2 degrees of freedom.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() {
        return Err(Error::Domain("pearson needs equal-length inputs".into()));
    }
    let n = xs.len();
    if n < 3 {
        return Err(Error::Domain("pearson needs at least 3 points".into()));
    }
    let mean_x = xs.iter().sum::<f64>() / n as f64;
    let mean_y = ys.iter().sum::<f64>() / n as f64;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mean_x;
        let dy = y - mean_y;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Domain("pearson undefined: zero variance".into()));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let denom = 1.0 - r * r;
    let p = if denom <= 0.0 {
        0.0
    } else {
        let t = r.abs() * (df / denom).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df)
            .map_err(|e| Error::Domain(format!("t-distribution: {e}")))?;
        2.0 * (1.0 - dist.cdf(t))
    };
    Ok((r, p))
}

/// Serializable rate with both SEM modes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateOut {
    pub count: usize,
    pub denom: usize,
    pub value: Option<f64>,
    pub sem: Option<f64>,
    pub sem_clustered: Option<f64>,
}

impl RateOut {
    fn from_counts(c: Counts, clustered: Option<f64>) -> RateOut {
        RateOut {
            count: c.count,
            denom: c.denom,
            value: c.value(),
            sem: c.sem(),
            sem_clustered: clustered,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct GroupKey {
    pub dataset: String,
    pub model: String,
    pub condition: String,
    pub psd: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsSummary {
    pub key: GroupKey,
    pub n: usize,
    pub tdr_in: RateOut,
    pub tdr_out: RateOut,
    pub tc: Option<f64>,
    pub accuracy: RateOut,
    pub delta_err: Option<f64>,
    pub unparseable_count: usize,
}

impl MetricsSummary {
    /// Compute one summary. TDR, TC, and accuracy come from the
    /// baseline-filtered records; the error delta compares o1 against o0
    /// over the unfiltered matched records.
    pub fn compute(
        key: GroupKey,
        filtered: &[&TrialRecord],
        unfiltered: &[&TrialRecord],
    ) -> MetricsSummary {
        let counts = tally(filtered.iter().copied());
        let tc = match (counts.tdr_in.value(), counts.tdr_out.value()) {
            (Some(i), Some(o)) => Some(tribe_coefficient(i, o)),
            _ => None,
        };
        MetricsSummary {
            key,
            n: counts.n,
            tdr_in: RateOut::from_counts(counts.tdr_in, clustered_sem(&counts, |b| b.tdr_in)),
            tdr_out: RateOut::from_counts(counts.tdr_out, clustered_sem(&counts, |b| b.tdr_out)),
            tc,
            accuracy: RateOut::from_counts(counts.accuracy, clustered_sem(&counts, |b| b.accuracy)),
            delta_err: delta_err(unfiltered, unfiltered),
            unparseable_count: counts.o1_unparseable,
        }
    }
}

/// PSD bucket label ("0.2" .. "1.0") of a record, from the exact tenths.
pub fn psd_bucket(record: &TrialRecord) -> Option<String> {
    record.trial.psd.map(|p| bucket_label((p * 10.0).round() as u8))
}

pub fn bucket_label(tenths: u8) -> String {
    format!("{}.{}", tenths / 10, tenths % 10)
}

/// Per-PSD-bucket summaries; buckets with no records are absent.
pub fn group_by_psd(
    base_key: &GroupKey,
    filtered: &[&TrialRecord],
    unfiltered: &[&TrialRecord],
) -> BTreeMap<String, MetricsSummary> {
    let mut filtered_by: BTreeMap<String, Vec<&TrialRecord>> = BTreeMap::new();
    for r in filtered {
        if let Some(bucket) = psd_bucket(r) {
            filtered_by.entry(bucket).or_default().push(r);
        }
    }
    let mut unfiltered_by: BTreeMap<String, Vec<&TrialRecord>> = BTreeMap::new();
    for r in unfiltered {
        if let Some(bucket) = psd_bucket(r) {
            unfiltered_by.entry(bucket).or_default().push(r);
        }
    }
    filtered_by
        .into_iter()
        .map(|(bucket, records)| {
            let key = GroupKey {
                psd: Some(bucket.clone()),
                ..base_key.clone()
            };
            let empty = Vec::new();
            let unf = unfiltered_by.get(&bucket).unwrap_or(&empty);
            (bucket, MetricsSummary::compute(key, &records, unf))
        })
        .collect()
}

/// Distribution of judgment transitions and the mean affirmation shift, per
/// defeasible setting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JudgmentShift {
    pub n: usize,
    pub transitions: BTreeMap<String, usize>,
    pub mean_shift: Option<f64>,
}

pub fn judgment_shift(records: &[&TrialRecord]) -> BTreeMap<String, JudgmentShift> {
    let mut by_setting: BTreeMap<String, (BTreeMap<String, usize>, i64, usize)> = BTreeMap::new();
    for r in records {
        let Condition::Defeasible { setting } = &r.trial.condition else {
            continue;
        };
        let (Some(j0), Some(j1)) = (
            r.j0.as_ref().and_then(|p| p.judgment()),
            r.j1.as_ref().and_then(|p| p.judgment()),
        ) else {
            continue;
        };
        let entry = by_setting.entry(setting.slug().to_string()).or_default();
        let key = format!(
            "{}->{}",
            j0.as_str().to_lowercase(),
            j1.as_str().to_lowercase()
        );
        *entry.0.entry(key).or_default() += 1;
        entry.1 += i64::from(j1.score()) - i64::from(j0.score());
        entry.2 += 1;
    }
    by_setting
        .into_iter()
        .map(|(setting, (transitions, total_shift, n))| {
            (
                setting,
                JudgmentShift {
                    n,
                    transitions,
                    mean_shift: (n > 0).then(|| total_shift as f64 / n as f64),
                },
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tribe_coefficient_is_the_exact_difference() {
        assert_eq!(tribe_coefficient(0.285, 0.228), 0.285 - 0.228);
        assert_eq!(tribe_coefficient(0.4, 0.4), 0.0);
        assert_eq!(tribe_coefficient(1.0, 0.0), 1.0);
    }

    #[test]
    fn pearson_matches_frozen_hand_computation() {
        // frozen via an independent high-precision computation
        let xs = [0.12, 0.47, 0.33, 0.85, 0.64, 0.29, 0.91, 0.55, 0.73, 0.18];
        let ys = [0.42, 0.31, 0.38, 0.12, 0.25, 0.36, 0.07, 0.22, 0.19, 0.40];
        let (r, p) = pearson(&xs, &ys).unwrap();
        assert!((r - (-0.9793719439111569)).abs() < 1e-12, "r = {r}");
        assert!(
            (p - 7.727162639148642e-07).abs() / 7.727162639148642e-07 < 1e-9,
            "p = {p}"
        );
    }

    #[test]
    fn pearson_is_exact_on_linear_inputs() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let up: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let down: Vec<f64> = xs.iter().map(|x| -x).collect();
        let (r_up, p_up) = pearson(&xs, &up).unwrap();
        let (r_down, _) = pearson(&xs, &down).unwrap();
        assert!((r_up - 1.0).abs() < 1e-12);
        assert!((r_down + 1.0).abs() < 1e-12);
        assert_eq!(p_up, 0.0);
    }

    #[test]
    fn pearson_rejects_degenerate_inputs() {
        assert!(pearson(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(pearson(&[1.0, 2.0, 3.0], &[0.5, 0.5, 0.5]).is_err());
    }

    #[test]
    fn bucket_labels_cover_the_grid() {
        assert_eq!(bucket_label(2), "0.2");
        assert_eq!(bucket_label(4), "0.4");
        assert_eq!(bucket_label(6), "0.6");
        assert_eq!(bucket_label(8), "0.8");
        assert_eq!(bucket_label(10), "1.0");
    }

    #[test]
    fn empty_denominator_is_flagged_not_zero() {
        let c = Counts::default();
        assert_eq!(c.value(), None);
        assert_eq!(c.sem(), None);
    }
}

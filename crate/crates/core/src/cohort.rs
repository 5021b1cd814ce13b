//! Cohort construction from visit stores.
//!
//! Two recipes are supported. Adjacent pairs turn every consecutive pair of
//! a patient's visits into one example, labeled by the later visit. Index
//! encounter cohorts anchor each patient at the first visit carrying an
//! inclusion code and label them by whether a target code appears within a
//! horizon afterwards, after three exclusion rules.

use std::collections::{BTreeMap, BTreeSet};

use chrono::Days;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CohortExample, Label, MedicalCode, Split, Visit};
use crate::util::{largest_remainder, round_half_up_ratio, stream_rng};

/// Visits grouped per patient, each list ordered by `(date, visit_id)`.
#[derive(Debug, Clone, Default)]
pub struct VisitStore {
    patients: BTreeMap<String, Vec<Visit>>,
}

impl VisitStore {
    pub fn new(visits: impl IntoIterator<Item = Visit>) -> Result<Self> {
        let mut patients: BTreeMap<String, Vec<Visit>> = BTreeMap::new();
        let mut ids = BTreeSet::new();
        for v in visits {
            if !ids.insert(v.visit_id.clone()) {
                return Err(Error::Invalid(format!("duplicate visit_id {}", v.visit_id)));
            }
            patients.entry(v.patient_id.clone()).or_default().push(v);
        }
        for list in patients.values_mut() {
            list.sort_by(|a, b| (a.date, &a.visit_id).cmp(&(b.date, &b.visit_id)));
        }
        Ok(VisitStore { patients })
    }

    pub fn patients(&self) -> impl Iterator<Item = (&str, &[Visit])> {
        self.patients.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn num_patients(&self) -> usize {
        self.patients.len()
    }

    pub fn visits(&self) -> impl Iterator<Item = &Visit> {
        self.patients.values().flatten()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortMode {
    AdjacentPairs,
    IndexEncounter,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub mode: CohortMode,
    pub target_codes: BTreeSet<MedicalCode>,
    /// Follow-up horizon in days; index-encounter mode only.
    pub horizon_days: u32,
    /// History window for the prior-target exclusion, in days before the
    /// index visit. `None` looks at the full history.
    #[serde(default)]
    pub lookback_days: Option<u32>,
    pub seed: u64,
    pub task_id: String,
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.target_codes.is_empty() {
            return Err(Error::Invalid("cohort target_codes must be nonempty".into()));
        }
        if self.mode == CohortMode::IndexEncounter && self.horizon_days < 1 {
            return Err(Error::Invalid("horizon_days must be at least 1".into()));
        }
        Ok(())
    }
}

fn make_example(task_id: &str, input: &Visit, label: Label) -> CohortExample {
    CohortExample {
        example_id: format!("{}/{}", input.patient_id, input.visit_id),
        patient_id: input.patient_id.clone(),
        input_visit: input.clone(),
        label,
        split: Split::Train,
        task_id: task_id.to_string(),
    }
}

/// One example per consecutive visit pair: the earlier visit is the input,
/// the later visit decides the label. Single-visit patients contribute nothing.
pub fn build_adjacent_pairs(store: &VisitStore, spec: &CohortSpec) -> Result<Vec<CohortExample>> {
    spec.validate()?;
    if spec.mode != CohortMode::AdjacentPairs {
        return Err(Error::Invalid("build_adjacent_pairs needs mode adjacent_pairs".into()));
    }
    let mut out = Vec::new();
    for (_, visits) in store.patients() {
        for pair in visits.windows(2) {
            let label = Label::from_bool(pair[1].contains_any(&spec.target_codes));
            out.push(make_example(&spec.task_id, &pair[0], label));
        }
    }
    Ok(out)
}

/// Per-rule drop counts from an index-encounter build.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionCounts {
    pub too_few_visits: usize,
    pub short_follow_up: usize,
    pub no_index_visit: usize,
    pub prior_history: usize,
}

#[derive(Debug, Clone)]
pub struct IndexCohort {
    pub examples: Vec<CohortExample>,
    pub exclusions: ExclusionCounts,
}

pub fn build_index_cohort(
    store: &VisitStore,
    spec: &CohortSpec,
    inclusion_codes: &BTreeSet<MedicalCode>,
) -> Result<IndexCohort> {
    spec.validate()?;
    if spec.mode != CohortMode::IndexEncounter {
        return Err(Error::Invalid("build_index_cohort needs mode index_encounter".into()));
    }
    if inclusion_codes.is_empty() {
        return Err(Error::Invalid("inclusion codes must be nonempty".into()));
    }
    let horizon = Days::new(u64::from(spec.horizon_days));
    let mut exclusions = ExclusionCounts::default();
    let mut examples = Vec::new();

    for (patient_id, visits) in store.patients() {
        if visits.len() < 2 {
            exclusions.too_few_visits += 1;
            continue;
        }
        let first = &visits[0];
        let last = &visits[visits.len() - 1];
        if (last.date - first.date).num_days() < i64::from(spec.horizon_days) {
            exclusions.short_follow_up += 1;
            continue;
        }
        let Some(index_pos) = visits.iter().position(|v| v.contains_any(inclusion_codes)) else {
            exclusions.no_index_visit += 1;
            continue;
        };
        let index = &visits[index_pos];
        let history_start = spec
            .lookback_days
            .and_then(|d| index.date.checked_sub_days(Days::new(u64::from(d))));
        let has_history = visits[..=index_pos]
            .iter()
            .filter(|v| history_start.is_none_or(|start| v.date >= start))
            .any(|v| v.contains_any(&spec.target_codes));
        if has_history {
            exclusions.prior_history += 1;
            continue;
        }

        let window_end = index.date + horizon;
        let endpoint_pos = visits
            .iter()
            .enumerate()
            .skip(index_pos + 1)
            .take_while(|(_, v)| v.date <= window_end)
            .find(|(_, v)| v.contains_any(&spec.target_codes))
            .map(|(i, _)| i);

        let example = match endpoint_pos {
            Some(end) => {
                // earliest encounter within the horizon before the endpoint
                let endpoint_date = visits[end].date;
                let input = visits[..end]
                    .iter()
                    .find(|v| (endpoint_date - v.date).num_days() <= i64::from(spec.horizon_days))
                    .expect("the index visit precedes the endpoint within the horizon");
                make_example(&spec.task_id, input, Label::Positive)
            }
            None => {
                // last encounter itself is never eligible
                let cutoff = last.date - horizon;
                let candidates: Vec<&Visit> = visits[..visits.len() - 1]
                    .iter()
                    .filter(|v| v.date <= cutoff)
                    .collect();
                let mut rng = stream_rng(spec.seed, &format!("index-negative/{patient_id}"));
                let pick = candidates[rng.gen_range(0..candidates.len())];
                make_example(&spec.task_id, pick, Label::Negative)
            }
        };
        examples.push(example);
    }

    if examples.is_empty() {
        log::warn!("no patient passed the index-cohort exclusions: {exclusions:?}");
    } else {
        log::info!("index cohort: {} examples, exclusions {exclusions:?}", examples.len());
    }
    Ok(IndexCohort {
        examples,
        exclusions,
    })
}

fn partition_by_label(examples: &[CohortExample]) -> (Vec<&CohortExample>, Vec<&CohortExample>) {
    examples.iter().partition(|e| e.label.is_positive())
}

/// Draws `n` examples preserving the pool's class balance. The positive quota
/// is `round(n * prevalence)` with halves rounded up.
pub fn stratified_sample(examples: &[CohortExample], n: usize, seed: u64) -> Result<Vec<CohortExample>> {
    if n > examples.len() {
        return Err(Error::SampleTooLarge {
            requested: n,
            available: examples.len(),
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let (pos, neg) = partition_by_label(examples);
    let n_pos = round_half_up_ratio(n as u128 * pos.len() as u128, examples.len() as u128) as usize;
    let n_neg = n - n_pos;
    for (class, quota, pool) in [(Label::Positive, n_pos, &pos), (Label::Negative, n_neg, &neg)] {
        if quota > pool.len() {
            return Err(Error::InsufficientClass {
                class,
                needed: quota,
                available: pool.len(),
            });
        }
    }
    let mut rng = stream_rng(seed, "stratified-sample");
    let mut out: Vec<CohortExample> = Vec::with_capacity(n);
    for (quota, pool) in [(n_pos, &pos), (n_neg, &neg)] {
        let mut idx = rand::seq::index::sample(&mut rng, pool.len(), quota).into_vec();
        idx.sort_unstable();
        out.extend(idx.into_iter().map(|i| pool[i].clone()));
    }
    out.shuffle(&mut rng);
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct SplitCohort {
    pub train: Vec<CohortExample>,
    pub calibration: Vec<CohortExample>,
    pub test: Vec<CohortExample>,
}

impl SplitCohort {
    pub fn all(&self) -> impl Iterator<Item = &CohortExample> {
        self.train.iter().chain(&self.calibration).chain(&self.test)
    }
}

const SPLITS: [Split; 3] = [Split::Train, Split::Calibration, Split::Test];

/// Stratified train/calibration/test partition.
///
/// Examples of one patient always land in the same split. Patient groups are
/// shuffled by seed, placed largest first, each into the split whose
/// remaining positive/negative deficits it reduces most. With one example
/// per patient this reproduces the per-class quotas exactly.
pub fn split_cohort(examples: &[CohortExample], fractions: [f64; 3], seed: u64) -> Result<SplitCohort> {
    if fractions.iter().any(|f| f.is_nan() || *f <= 0.0) {
        return Err(Error::Invalid("split fractions must be positive".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("split fractions sum to {total}, not 1")));
    }

    let n = examples.len();
    let n_pos = examples.iter().filter(|e| e.label.is_positive()).count();
    let sizes = largest_remainder(n, &fractions);
    let pos_quota = largest_remainder(n_pos, &fractions);
    let mut pos_def: Vec<i64> = pos_quota.iter().map(|&q| q as i64).collect();
    let mut neg_def: Vec<i64> = sizes.iter().zip(&pos_quota).map(|(&s, &p)| s as i64 - p as i64).collect();

    // group by patient, keeping first-appearance order before the shuffle
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        let g = groups.entry(e.patient_id.as_str()).or_default();
        if g.is_empty() {
            order.push(e.patient_id.as_str());
        }
        g.push(i);
    }
    let mut rng = stream_rng(seed, "split-cohort");
    order.shuffle(&mut rng);
    order.sort_by_key(|p| std::cmp::Reverse(groups[p].len()));

    let mut assignment = vec![0usize; n];
    for patient in order {
        let members = &groups[patient];
        let p = members.iter().filter(|&&i| examples[i].label.is_positive()).count() as i64;
        let q = members.len() as i64 - p;
        let best = (0..3)
            .min_by_key(|&s| {
                let before = pos_def[s].pow(2) + neg_def[s].pow(2);
                let after = (pos_def[s] - p).pow(2) + (neg_def[s] - q).pow(2);
                (after - before, s)
            })
            .unwrap();
        pos_def[best] -= p;
        neg_def[best] -= q;
        for &i in members {
            assignment[i] = best;
        }
    }

    let mut out = SplitCohort::default();
    for (i, e) in examples.iter().enumerate() {
        let mut e = e.clone();
        e.split = SPLITS[assignment[i]];
        match assignment[i] {
            0 => out.train.push(e),
            1 => out.calibration.push(e),
            _ => out.test.push(e),
        }
    }
    for (split, list) in [
        (Split::Train, &out.train),
        (Split::Calibration, &out.calibration),
        (Split::Test, &out.test),
    ] {
        let pos = list.iter().filter(|e| e.label.is_positive()).count();
        if pos == 0 || pos == list.len() {
            return Err(Error::Invalid(format!(
                "{split:?} split would receive no examples of one class ({pos} positive of {})",
                list.len()
            )));
        }
    }
    Ok(out)
}

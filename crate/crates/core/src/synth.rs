//! Synthetic visit stores with a planted, learnable signal.
//!
//! Every consecutive visit pair of a generated patient is one example, so the
//! emitted cohort is exactly what the adjacent-pair recipe rebuilds from the
//! emitted visits and the target code. Labels are assigned by exact
//! stratification over all pairs. The input visit of a positive pair carries
//! each signal code with probability `signal_strength`, a negative one with
//! probability `1 - signal_strength`; the following visit carries the target
//! code iff the pair is positive.

use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CodeCategory, CodingSystem, CohortExample, Label, MedicalCode, Split, Visit};
use crate::narrative::CodeNameMap;
use crate::util::{round_half_up_ratio, stream_rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_patients: usize,
    /// Inclusive range of visits per patient; the minimum must be at least 2.
    pub visits_per_patient: [usize; 2],
    /// Vocabulary sizes for diagnoses, medications, procedures.
    pub vocab_sizes: [usize; 3],
    pub prevalence: f64,
    pub signal_codes: usize,
    pub signal_strength: f64,
    pub signal_category: CodeCategory,
    pub seed: u64,
    pub task_id: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_patients: 500,
            visits_per_patient: [2, 2],
            vocab_sizes: [60, 40, 20],
            prevalence: 0.3,
            signal_codes: 5,
            signal_strength: 0.9,
            signal_category: CodeCategory::Diagnosis,
            seed: 0,
            task_id: "synthetic".into(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.visits_per_patient;
        if lo < 2 || hi < lo {
            return Err(Error::Invalid(format!("visits_per_patient must satisfy 2 <= min <= max, got {lo}..={hi}")));
        }
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return Err(Error::Invalid("prevalence must lie strictly between 0 and 1".into()));
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return Err(Error::Invalid("signal_strength must lie in [0, 1]".into()));
        }
        if self.signal_codes == 0 {
            return Err(Error::Invalid("signal_codes must be at least 1".into()));
        }
        let cat = category_slot(self.signal_category);
        // diagnoses also hold the target code and need one noise code
        let reserved = if cat == 0 { 2 } else { 1 };
        if self.vocab_sizes[cat] < self.signal_codes + reserved {
            return Err(Error::Invalid(format!(
                "{} vocabulary of {} cannot hold {} signal codes",
                self.signal_category, self.vocab_sizes[cat], self.signal_codes
            )));
        }
        if self.vocab_sizes.contains(&0) {
            return Err(Error::Invalid("every vocabulary needs at least one code".into()));
        }
        if self.n_patients == 0 {
            return Err(Error::Invalid("n_patients must be positive".into()));
        }
        Ok(())
    }
}

fn category_slot(c: CodeCategory) -> usize {
    match c {
        CodeCategory::Diagnosis => 0,
        CodeCategory::Medication => 1,
        CodeCategory::Procedure => 2,
    }
}

const PREFIX: [&str; 3] = ["D", "M", "P"];
const NOUN: [&str; 3] = ["condition", "medication", "procedure"];
const SYSTEM: [CodingSystem; 3] = [CodingSystem::Icd10, CodingSystem::Ndc, CodingSystem::Cpt];

fn synth_code(slot: usize, i: usize) -> MedicalCode {
    MedicalCode::new(SYSTEM[slot], format!("{}{i:04}", PREFIX[slot]), CodeCategory::ALL[slot]).expect("nonempty")
}

pub fn synth_name(slot: usize, i: usize) -> String {
    format!("synthetic {} {i}", NOUN[slot])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub spec: SynthSpec,
    pub target_code: MedicalCode,
    pub signal_codes: Vec<MedicalCode>,
    pub signal_names: Vec<String>,
    pub n_examples: usize,
    pub n_positive: usize,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub visits: Vec<Visit>,
    pub vocab: CodeNameMap,
    pub cohort: Vec<CohortExample>,
    pub manifest: SynthManifest,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, "synth");
    let [lo, hi] = spec.visits_per_patient;
    let visit_counts: Vec<usize> = (0..spec.n_patients).map(|_| rng.gen_range(lo..=hi)).collect();
    let n_examples: usize = visit_counts.iter().map(|k| k - 1).sum();
    let n_pos = round_half_up_ratio(
        (spec.prevalence * 1e9).round() as u128 * n_examples as u128,
        1_000_000_000,
    ) as usize;
    if n_pos == 0 || n_pos >= n_examples {
        return Err(Error::Invalid(format!(
            "prevalence {} over {n_examples} examples leaves a class empty",
            spec.prevalence
        )));
    }
    let mut labels: Vec<bool> = (0..n_examples).map(|i| i < n_pos).collect();
    labels.shuffle(&mut rng);

    let signal_slot = category_slot(spec.signal_category);
    let signal_offset = if signal_slot == 0 { 1 } else { 0 };
    let target_code = synth_code(0, 0);
    let signal_codes: Vec<MedicalCode> = (0..spec.signal_codes)
        .map(|i| synth_code(signal_slot, i + signal_offset))
        .collect();
    let noise_pool: [Vec<usize>; 3] = std::array::from_fn(|slot| {
        let start = match slot {
            0 if signal_slot == 0 => 1 + spec.signal_codes,
            0 => 1,
            s if s == signal_slot => spec.signal_codes,
            _ => 0,
        };
        (start..spec.vocab_sizes[slot]).collect()
    });
    // (min, max) noise codes per visit and category
    const NOISE: [(usize, usize); 3] = [(1, 3), (1, 3), (0, 2)];

    let base = NaiveDate::from_ymd_opt(2013, 1, 1).expect("valid date");
    let mut visits = Vec::new();
    let mut cohort = Vec::with_capacity(n_examples);
    let mut slot_iter = labels.into_iter();
    for (p, &k) in visit_counts.iter().enumerate() {
        let patient_id = format!("P{p:05}");
        let pair_labels: Vec<bool> = (0..k - 1).map(|_| slot_iter.next().expect("one label per pair")).collect();
        let mut date = base + Days::new(rng.gen_range(0..365));
        let mut patient_visits = Vec::with_capacity(k);
        for i in 0..k {
            let mut v = Visit::new(format!("{patient_id}-V{i:02}"), &patient_id, date);
            for slot in 0..3 {
                let pool = &noise_pool[slot];
                let (a, b) = NOISE[slot];
                let count = rng.gen_range(a..=b).min(pool.len());
                for &c in pool.choose_multiple(&mut rng, count) {
                    v.codes.insert(synth_code(slot, c));
                }
            }
            if i > 0 && pair_labels[i - 1] {
                v.codes.insert(target_code.clone());
            }
            if i + 1 < k {
                let prob = if pair_labels[i] {
                    spec.signal_strength
                } else {
                    1.0 - spec.signal_strength
                };
                for code in &signal_codes {
                    if rng.gen_bool(prob) {
                        v.codes.insert(code.clone());
                    }
                }
            }
            patient_visits.push(v);
            date = date + Days::new(rng.gen_range(30..=200));
        }
        for i in 0..k - 1 {
            let input = &patient_visits[i];
            cohort.push(CohortExample {
                example_id: format!("{}/{}", patient_id, input.visit_id),
                patient_id: patient_id.clone(),
                input_visit: input.clone(),
                label: Label::from_bool(pair_labels[i]),
                split: Split::Train,
                task_id: spec.task_id.clone(),
            });
        }
        visits.extend(patient_visits);
    }

    let mut vocab = CodeNameMap::default();
    for slot in 0..3 {
        for i in 0..spec.vocab_sizes[slot] {
            let code = synth_code(slot, i);
            vocab.insert(code.system, code.code, synth_name(slot, i))?;
        }
    }
    let signal_names = signal_codes
        .iter()
        .map(|c| vocab.get(c.system, &c.code).expect("signal code named").to_string())
        .collect();
    Ok(SynthData {
        visits,
        vocab,
        cohort,
        manifest: SynthManifest {
            spec: spec.clone(),
            target_code,
            signal_codes,
            signal_names,
            n_examples,
            n_positive: n_pos,
        },
    })
}

pub const VISITS_FILE: &str = "visits.csv";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const COHORT_FILE: &str = "cohort.jsonl";
pub const TARGET_FILE: &str = "target_codes.csv";
pub const MANIFEST_FILE: &str = "signal_manifest.json";

impl SynthData {
    /// Writes visits, vocabulary, cohort, target code set and signal manifest.
    pub fn write(&self, dir: &Path) -> Result<Vec<String>> {
        crate::io::write_visits(&dir.join(VISITS_FILE), &self.visits)?;
        crate::io::write_bytes(&dir.join(VOCAB_FILE), self.vocab.to_tsv().as_bytes())?;
        crate::io::write_jsonl(&dir.join(COHORT_FILE), &self.cohort)?;
        crate::io::write_code_set(&dir.join(TARGET_FILE), [&self.manifest.target_code])?;
        crate::io::write_json(&dir.join(MANIFEST_FILE), &self.manifest)?;
        Ok([VISITS_FILE, VOCAB_FILE, COHORT_FILE, TARGET_FILE, MANIFEST_FILE]
            .map(String::from)
            .to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{build_adjacent_pairs, CohortMode, CohortSpec, VisitStore};
    use crate::model::validate_cohort;

    #[test]
    fn exact_prevalence() {
        let spec = SynthSpec {
            n_patients: 400,
            prevalence: 0.25,
            ..Default::default()
        };
        let d = generate(&spec).unwrap();
        assert_eq!(d.cohort.len(), 400);
        assert_eq!(d.cohort.iter().filter(|e| e.label.is_positive()).count(), 100);
        assert!(validate_cohort(&d.cohort).is_valid());
    }

    #[test]
    fn perfect_signal_is_a_single_feature_rule() {
        let spec = SynthSpec {
            n_patients: 300,
            visits_per_patient: [2, 4],
            signal_strength: 1.0,
            ..Default::default()
        };
        let d = generate(&spec).unwrap();
        for code in &d.manifest.signal_codes {
            for e in &d.cohort {
                assert_eq!(e.input_visit.codes.contains(code), e.label.is_positive());
            }
        }
    }

    #[test]
    fn adjacent_recipe_rebuilds_cohort() {
        let spec = SynthSpec {
            n_patients: 120,
            visits_per_patient: [2, 5],
            ..Default::default()
        };
        let d = generate(&spec).unwrap();
        let store = VisitStore::new(d.visits.clone()).unwrap();
        let rebuilt = build_adjacent_pairs(
            &store,
            &CohortSpec {
                mode: CohortMode::AdjacentPairs,
                target_codes: [d.manifest.target_code.clone()].into(),
                horizon_days: 365,
                lookback_days: None,
                seed: 0,
                task_id: spec.task_id.clone(),
            },
        )
        .unwrap();
        assert_eq!(rebuilt, d.cohort);
    }

    #[test]
    fn infeasible_specs() {
        for bad in [
            SynthSpec { prevalence: 0.0, ..Default::default() },
            SynthSpec { visits_per_patient: [1, 3], ..Default::default() },
            SynthSpec { signal_codes: 60, ..Default::default() },
            SynthSpec { n_patients: 2, prevalence: 0.01, ..Default::default() },
        ] {
            assert!(generate(&bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn seeded_output_is_stable() {
        let spec = SynthSpec {
            n_patients: 50,
            ..Default::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate(&spec).unwrap().write(a.path()).unwrap();
        generate(&spec).unwrap().write(b.path()).unwrap();
        for f in [VISITS_FILE, VOCAB_FILE, COHORT_FILE, TARGET_FILE, MANIFEST_FILE] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
    }

    #[test]
    fn signal_frequency_within_three_sigma() {
        let spec = SynthSpec {
            n_patients: 2000,
            signal_strength: 0.8,
            ..Default::default()
        };
        let d = generate(&spec).unwrap();
        for code in &d.manifest.signal_codes {
            for (positive, p) in [(true, 0.8), (false, 0.2)] {
                let class: Vec<_> = d.cohort.iter().filter(|e| e.label.is_positive() == positive).collect();
                let n = class.len() as f64;
                let hits = class.iter().filter(|e| e.input_visit.codes.contains(code)).count() as f64;
                let sigma = (n * p * (1.0 - p)).sqrt();
                assert!((hits - n * p).abs() <= 3.0 * sigma, "{code} {positive}: {hits} vs {}", n * p);
            }
        }
    }
}

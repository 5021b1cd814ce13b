//! Shared data model: coded visits, labeled cohort examples, narratives,
//! predictions and the critic-side feedback records.
//!
//! Every type here is a plain value object. Once constructed nothing is
//! mutated in place, so values can be shared freely across threads.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CodingSystem {
    #[serde(rename = "ICD9")]
    Icd9,
    #[serde(rename = "ICD10")]
    Icd10,
    #[serde(rename = "NDC")]
    Ndc,
    #[serde(rename = "CPT")]
    Cpt,
    #[serde(rename = "CCS")]
    Ccs,
    #[serde(rename = "OTHER")]
    Other,
}

impl CodingSystem {
    pub fn as_str(self) -> &'static str {
        match self {
            CodingSystem::Icd9 => "ICD9",
            CodingSystem::Icd10 => "ICD10",
            CodingSystem::Ndc => "NDC",
            CodingSystem::Cpt => "CPT",
            CodingSystem::Ccs => "CCS",
            CodingSystem::Other => "OTHER",
        }
    }
}

impl fmt::Display for CodingSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CodingSystem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ICD9" | "ICD-9" => Ok(CodingSystem::Icd9),
            "ICD10" | "ICD-10" => Ok(CodingSystem::Icd10),
            "NDC" => Ok(CodingSystem::Ndc),
            "CPT" => Ok(CodingSystem::Cpt),
            "CCS" => Ok(CodingSystem::Ccs),
            "OTHER" => Ok(CodingSystem::Other),
            other => Err(Error::Invalid(format!("unknown coding system {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CodeCategory {
    Diagnosis,
    Medication,
    Procedure,
}

impl CodeCategory {
    pub const ALL: [CodeCategory; 3] = [
        CodeCategory::Diagnosis,
        CodeCategory::Medication,
        CodeCategory::Procedure,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CodeCategory::Diagnosis => "Diagnosis",
            CodeCategory::Medication => "Medication",
            CodeCategory::Procedure => "Procedure",
        }
    }
}

impl fmt::Display for CodeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CodeCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "diagnosis" | "dx" => Ok(CodeCategory::Diagnosis),
            "medication" | "rx" => Ok(CodeCategory::Medication),
            "procedure" | "px" => Ok(CodeCategory::Procedure),
            other => Err(Error::Invalid(format!("unknown code category {other:?}"))),
        }
    }
}

/// One coded clinical concept.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawMedicalCode")]
pub struct MedicalCode {
    pub system: CodingSystem,
    pub code: String,
    pub category: CodeCategory,
}

#[derive(Deserialize)]
struct RawMedicalCode {
    system: CodingSystem,
    code: String,
    category: CodeCategory,
}

impl TryFrom<RawMedicalCode> for MedicalCode {
    type Error = Error;

    fn try_from(raw: RawMedicalCode) -> Result<Self> {
        MedicalCode::new(raw.system, raw.code, raw.category)
    }
}

impl MedicalCode {
    pub fn new(system: CodingSystem, code: impl Into<String>, category: CodeCategory) -> Result<Self> {
        let code = code.into().trim().to_string();
        if code.is_empty() {
            return Err(Error::Invalid("medical code must not be empty".into()));
        }
        Ok(MedicalCode {
            system,
            code,
            category,
        })
    }

    pub fn diagnosis(system: CodingSystem, code: &str) -> Result<Self> {
        Self::new(system, code, CodeCategory::Diagnosis)
    }

    pub fn medication(system: CodingSystem, code: &str) -> Result<Self> {
        Self::new(system, code, CodeCategory::Medication)
    }

    pub fn procedure(system: CodingSystem, code: &str) -> Result<Self> {
        Self::new(system, code, CodeCategory::Procedure)
    }
}

impl fmt::Display for MedicalCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.system, self.code)
    }
}

/// A single encounter. `codes` has set semantics, so ingesting a duplicated
/// code row leaves the visit unchanged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visit {
    pub visit_id: String,
    pub patient_id: String,
    pub date: NaiveDate,
    pub codes: BTreeSet<MedicalCode>,
}

impl Visit {
    pub fn new(visit_id: impl Into<String>, patient_id: impl Into<String>, date: NaiveDate) -> Self {
        Visit {
            visit_id: visit_id.into(),
            patient_id: patient_id.into(),
            date,
            codes: BTreeSet::new(),
        }
    }

    pub fn with_codes(mut self, codes: impl IntoIterator<Item = MedicalCode>) -> Self {
        self.codes.extend(codes);
        self
    }

    pub fn codes_in(&self, category: CodeCategory) -> impl Iterator<Item = &MedicalCode> {
        self.codes.iter().filter(move |c| c.category == category)
    }

    pub fn contains_any(&self, targets: &BTreeSet<MedicalCode>) -> bool {
        self.codes.iter().any(|c| targets.contains(c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    /// Default decision rule; a probability of exactly 0.5 is positive.
    pub fn from_probability(p_positive: f64) -> Self {
        Label::from_bool(p_positive >= 0.5)
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Positive => Label::Negative,
            Label::Negative => Label::Positive,
        }
    }

    /// Rendering used in prompts.
    pub fn answer_word(self) -> &'static str {
        match self {
            Label::Positive => "Yes",
            Label::Negative => "No",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Calibration,
    Test,
}

/// One labeled prediction instance: the input visit plus the outcome label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortExample {
    pub example_id: String,
    pub patient_id: String,
    pub input_visit: Visit,
    pub label: Label,
    pub split: Split,
    pub task_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Narrative {
    pub example_id: String,
    pub text: String,
}

/// How the predicted probability was obtained from a completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMode {
    Logprob,
    TextOnly,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub example_id: String,
    pub predicted_label: Label,
    pub p_positive: f64,
    pub reasoning: String,
    pub prompt_hash: String,
    pub raw_response: String,
    pub extraction_mode: ExtractionMode,
    /// Backend attempts spent on this record; 0 for a cache hit.
    pub attempts: u32,
    /// Set when the backend failed after all retries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl PredictionRecord {
    pub fn is_failed(&self) -> bool {
        self.error.is_some()
    }
}

/// A mispredicted record handed to the critic, with its input narrative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorItem {
    pub record: PredictionRecord,
    pub true_label: Label,
    pub narrative: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBatch {
    pub batch_id: u32,
    pub items: Vec<ErrorItem>,
}

impl ErrorBatch {
    /// Checks that every item is genuinely mispredicted and the batch is nonempty.
    pub fn verify(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::Invalid(format!("error batch {} is empty", self.batch_id)));
        }
        for item in &self.items {
            if item.record.predicted_label == item.true_label {
                return Err(Error::Invalid(format!(
                    "error batch {} contains correctly predicted example {}",
                    self.batch_id, item.record.example_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackSet {
    pub batch_id: u32,
    /// Empty only when the critic produced nothing parseable (recorded with a warning).
    pub instructions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsolidatedInstructions {
    pub instructions: Vec<String>,
    pub source_batch_ids: Vec<u32>,
    pub round: u32,
}

impl ConsolidatedInstructions {
    pub fn new(instructions: Vec<String>, source_batch_ids: Vec<u32>, round: u32) -> Result<Self> {
        if instructions.is_empty() || instructions.iter().any(|s| s.trim().is_empty()) {
            return Err(Error::Invalid("consolidated instructions must be nonempty strings".into()));
        }
        if source_batch_ids.is_empty() {
            return Err(Error::Invalid("consolidated instructions need source batches".into()));
        }
        if round == 0 {
            return Err(Error::Invalid("round numbers start at 1".into()));
        }
        Ok(ConsolidatedInstructions {
            instructions,
            source_batch_ids,
            round,
        })
    }

    /// Placeholder recorded when a round had nothing to consolidate.
    pub fn empty(round: u32) -> Self {
        ConsolidatedInstructions {
            instructions: Vec::new(),
            source_batch_ids: Vec::new(),
            round,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub example_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Checks cohort-level invariants. Never fails; problems are reported.
///
/// Labels are a closed enum, so out-of-range labels are rejected at decode
/// time and cannot reach this check.
pub fn validate_cohort(examples: &[CohortExample]) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for ex in examples {
        let count = seen.entry(ex.example_id.as_str()).or_insert(0);
        *count += 1;
        if *count == 2 {
            report.errors.push(Issue {
                example_id: ex.example_id.clone(),
                message: "duplicate example_id".into(),
            });
        }
        if ex.example_id.trim().is_empty() {
            report.errors.push(Issue {
                example_id: ex.example_id.clone(),
                message: "empty example_id".into(),
            });
        }
        if ex.input_visit.patient_id != ex.patient_id {
            report.errors.push(Issue {
                example_id: ex.example_id.clone(),
                message: format!(
                    "input visit belongs to patient {} not {}",
                    ex.input_visit.patient_id, ex.patient_id
                ),
            });
        }
        if ex.input_visit.codes.is_empty() {
            report.warnings.push(Issue {
                example_id: ex.example_id.clone(),
                message: "input visit has no recorded codes".into(),
            });
        }
    }
    report
}

/// Fraction of positive examples; `None` for an empty slice.
pub fn prevalence(examples: &[CohortExample]) -> Option<f64> {
    if examples.is_empty() {
        return None;
    }
    let pos = examples.iter().filter(|e| e.label.is_positive()).count();
    Some(pos as f64 / examples.len() as f64)
}

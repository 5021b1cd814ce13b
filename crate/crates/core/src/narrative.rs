//! Code vocabularies, phenotype grouping, and visit-to-text serialization.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CodeCategory, CodingSystem, Label, MedicalCode, Narrative, Visit};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackPolicy {
    /// Render a miss as `code <system>:<code>`.
    #[default]
    RawCode,
    /// Leave the code out of the narrative.
    Skip,
    Error,
}

/// Display names keyed by `(system, code)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CodeNameMap {
    entries: BTreeMap<(CodingSystem, String), String>,
    pub fallback: FallbackPolicy,
}

impl CodeNameMap {
    pub fn new(fallback: FallbackPolicy) -> Self {
        CodeNameMap {
            entries: BTreeMap::new(),
            fallback,
        }
    }

    pub fn insert(&mut self, system: CodingSystem, code: impl Into<String>, name: impl Into<String>) -> Result<bool> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(Error::Invalid("display names must be nonempty".into()));
        }
        Ok(self.entries.insert((system, code.into()), name).is_some())
    }

    pub fn get(&self, system: CodingSystem, code: &str) -> Option<&str> {
        self.entries.get(&(system, code.to_string())).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (CodingSystem, &str, &str)> {
        self.entries.iter().map(|((s, c), n)| (*s, c.as_str(), n.as_str()))
    }

    /// Parses `system<TAB>code<TAB>name` rows. Returns the map and the number
    /// of duplicate rows (later rows win).
    pub fn parse_tsv(text: &str, path: &Path) -> Result<(Self, usize)> {
        let mut map = CodeNameMap::default();
        let mut duplicates = 0;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::parse(path, i + 1, "expected system<TAB>code<TAB>name"));
            }
            let system: CodingSystem = cols[0]
                .parse()
                .map_err(|e: Error| Error::parse(path, i + 1, e.to_string()))?;
            let replaced = map
                .insert(system, cols[1].trim(), cols[2].trim())
                .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
            duplicates += usize::from(replaced);
        }
        if duplicates > 0 {
            log::warn!("{}: {duplicates} duplicate vocabulary rows, last row wins", path.display());
        }
        Ok((map, duplicates))
    }

    pub fn to_tsv(&self) -> String {
        self.iter().map(|(s, c, n)| format!("{s}\t{c}\t{n}\n")).collect()
    }
}

/// Loads a vocabulary TSV, returning the map and its duplicate-row count.
pub fn load_vocab(path: &Path) -> Result<(CodeNameMap, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CodeNameMap::parse_tsv(&text, path)
}

/// Resolves a code to its display name. `Ok(None)` is the skip marker.
pub fn map_code(map: &CodeNameMap, code: &MedicalCode) -> Result<Option<String>> {
    if let Some(name) = map.get(code.system, &code.code) {
        return Ok(Some(name.to_string()));
    }
    match map.fallback {
        FallbackPolicy::RawCode => Ok(Some(format!("code {}:{}", code.system, code.code))),
        FallbackPolicy::Skip => Ok(None),
        FallbackPolicy::Error => Err(Error::UnknownCode(code.to_string())),
    }
}

/// Single-level grouping of codes into phenotype identifiers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PhenotypeMap {
    entries: BTreeMap<(CodingSystem, String), String>,
}

impl PhenotypeMap {
    pub fn insert(&mut self, system: CodingSystem, code: impl Into<String>, phenotype: impl Into<String>) {
        self.entries.insert((system, code.into()), phenotype.into());
    }

    pub fn phenotype_of(&self, code: &MedicalCode) -> Option<&str> {
        self.entries.get(&(code.system, code.code.clone())).map(String::as_str)
    }

    /// `system<TAB>code<TAB>phenotype_id` rows; a code listed twice under
    /// different phenotypes is an error.
    pub fn parse_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut map = PhenotypeMap::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
            if cols.len() != 3 || cols[2].is_empty() {
                return Err(Error::parse(path, i + 1, "expected system<TAB>code<TAB>phenotype_id"));
            }
            let system: CodingSystem = cols[0]
                .parse()
                .map_err(|e: Error| Error::parse(path, i + 1, e.to_string()))?;
            let key = (system, cols[1].to_string());
            if let Some(prev) = map.entries.get(&key) {
                if prev != cols[2] {
                    return Err(Error::parse(
                        path,
                        i + 1,
                        format!("code {}:{} mapped to both {prev} and {}", system, cols[1], cols[2]),
                    ));
                }
            }
            map.entries.insert(key, cols[2].to_string());
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text, path)
    }
}

/// Positive iff any diagnosis code of the visit belongs to `phenotype_id`.
pub fn phenotype_label(pheno: &PhenotypeMap, visit: &Visit, phenotype_id: &str) -> Label {
    Label::from_bool(
        visit
            .codes_in(CodeCategory::Diagnosis)
            .any(|c| pheno.phenotype_of(c) == Some(phenotype_id)),
    )
}

/// Layout of a serialized visit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NarrativeTemplate {
    pub section_order: [CodeCategory; 3],
    pub diagnosis_header: String,
    pub medication_header: String,
    pub procedure_header: String,
    /// Joins the last item of a list; other items are joined with ", ".
    pub list_conjunctive: String,
    pub empty_section_text: String,
}

impl Default for NarrativeTemplate {
    fn default() -> Self {
        NarrativeTemplate {
            section_order: CodeCategory::ALL,
            diagnosis_header: "Diagnoses".into(),
            medication_header: "Medications".into(),
            procedure_header: "Procedures".into(),
            list_conjunctive: ", and ".into(),
            empty_section_text: "none recorded".into(),
        }
    }
}

impl NarrativeTemplate {
    pub fn validate(&self) -> Result<()> {
        let mut seen = self.section_order.to_vec();
        seen.sort();
        seen.dedup();
        if seen.len() != 3 {
            return Err(Error::Invalid("section_order must list each category once".into()));
        }
        Ok(())
    }

    fn header(&self, category: CodeCategory) -> &str {
        match category {
            CodeCategory::Diagnosis => &self.diagnosis_header,
            CodeCategory::Medication => &self.medication_header,
            CodeCategory::Procedure => &self.procedure_header,
        }
    }

    fn join(&self, names: &[String]) -> String {
        match names {
            [] => self.empty_section_text.clone(),
            [one] => one.clone(),
            [init @ .., last] => format!("{}{}{}", init.join(", "), self.list_conjunctive, last),
        }
    }
}

/// Renders a visit as `"<Header>: a, and b. <Header>: none recorded. ..."`.
/// Names within a section are sorted, so the text does not depend on the
/// order codes were ingested in.
pub fn serialize_narrative(
    example_id: &str,
    visit: &Visit,
    map: &CodeNameMap,
    template: &NarrativeTemplate,
) -> Result<Narrative> {
    template.validate()?;
    let mut sections = Vec::with_capacity(3);
    for category in template.section_order {
        let mut names = Vec::new();
        for code in visit.codes_in(category) {
            if let Some(name) = map_code(map, code)? {
                names.push(name);
            }
        }
        names.sort();
        sections.push(format!("{}: {}.", template.header(category), template.join(&names)));
    }
    Ok(Narrative {
        example_id: example_id.to_string(),
        text: sections.join(" "),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn vocab() -> CodeNameMap {
        let mut m = CodeNameMap::default();
        m.insert(CodingSystem::Icd9, "401.9", "hypertension").unwrap();
        m.insert(CodingSystem::Icd9, "250.00", "type 2 diabetes").unwrap();
        m
    }

    fn day() -> NaiveDate {
        NaiveDate::from_ymd_opt(2015, 1, 1).unwrap()
    }

    #[test]
    fn tsv_loading() {
        let (m, d) = CodeNameMap::parse_tsv("", Path::new("v")).unwrap();
        assert!(m.is_empty());
        assert_eq!(d, 0);

        let (m, _) = CodeNameMap::parse_tsv("ICD9\t272.4\tOther and unspecified hyperlipidemia\n", Path::new("v")).unwrap();
        assert_eq!(m.get(CodingSystem::Icd9, "272.4"), Some("Other and unspecified hyperlipidemia"));

        let (m, d) = CodeNameMap::parse_tsv("ICD9\t1\tA\nICD9\t1\tB\n", Path::new("v")).unwrap();
        assert_eq!(m.get(CodingSystem::Icd9, "1"), Some("B"));
        assert_eq!(d, 1);

        match CodeNameMap::parse_tsv("ICD9\t1\tA\nbroken line\n", Path::new("v")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fallback_policies() {
        let code = MedicalCode::diagnosis(CodingSystem::Icd10, "E11.9").unwrap();
        let mut m = vocab();
        assert_eq!(map_code(&m, &code).unwrap().as_deref(), Some("code ICD10:E11.9"));
        m.fallback = FallbackPolicy::Skip;
        assert_eq!(map_code(&m, &code).unwrap(), None);
        m.fallback = FallbackPolicy::Error;
        let err = map_code(&m, &code).unwrap_err();
        assert!(err.to_string().contains("ICD10:E11.9"));
        let known = MedicalCode::diagnosis(CodingSystem::Icd9, "401.9").unwrap();
        assert_eq!(map_code(&m, &known).unwrap().as_deref(), Some("hypertension"));
    }

    #[test]
    fn phenotype_labels() {
        let mut p = PhenotypeMap::default();
        p.insert(CodingSystem::Icd9, "272.4", "53");
        for (code, pheno) in [("401.9", "98"), ("250.00", "49"), ("428.0", "108")] {
            p.insert(CodingSystem::Icd9, code, pheno);
        }
        let empty = Visit::new("v", "p", day());
        assert_eq!(phenotype_label(&p, &empty, "53"), Label::Negative);
        let hit = empty.clone().with_codes([MedicalCode::diagnosis(CodingSystem::Icd9, "272.4").unwrap()]);
        assert_eq!(phenotype_label(&p, &hit, "53"), Label::Positive);
        let distract = empty.with_codes(
            ["401.9", "250.00", "428.0"].map(|c| MedicalCode::diagnosis(CodingSystem::Icd9, c).unwrap()),
        );
        assert_eq!(phenotype_label(&p, &distract, "53"), Label::Negative);
    }

    #[test]
    fn phenotype_conflict() {
        assert!(PhenotypeMap::parse_tsv("ICD9\t1\ta\nICD9\t1\tb\n", Path::new("p")).is_err());
    }

    #[test]
    fn narrative_example() {
        let v = Visit::new("v", "p", day()).with_codes([
            MedicalCode::diagnosis(CodingSystem::Icd9, "250.00").unwrap(),
            MedicalCode::diagnosis(CodingSystem::Icd9, "401.9").unwrap(),
        ]);
        let n = serialize_narrative("e", &v, &vocab(), &NarrativeTemplate::default()).unwrap();
        assert_eq!(
            n.text,
            "Diagnoses: hypertension, and type 2 diabetes. Medications: none recorded. Procedures: none recorded."
        );
    }

    #[test]
    fn empty_visit_narrative() {
        let v = Visit::new("v", "p", day());
        let n = serialize_narrative("e", &v, &vocab(), &NarrativeTemplate::default()).unwrap();
        assert_eq!(n.text.matches("none recorded").count(), 3);
    }

    #[test]
    fn three_item_list_and_order() {
        let mut m = vocab();
        m.insert(CodingSystem::Ndc, "1", "aspirin").unwrap();
        m.insert(CodingSystem::Ndc, "2", "metformin").unwrap();
        m.insert(CodingSystem::Ndc, "3", "atorvastatin").unwrap();
        let v = Visit::new("v", "p", day())
            .with_codes(["1", "2", "3"].map(|c| MedicalCode::medication(CodingSystem::Ndc, c).unwrap()));
        let t = NarrativeTemplate {
            section_order: [CodeCategory::Medication, CodeCategory::Diagnosis, CodeCategory::Procedure],
            ..Default::default()
        };
        let n = serialize_narrative("e", &v, &m, &t).unwrap();
        assert!(n.text.starts_with("Medications: aspirin, atorvastatin, and metformin."));
        let bad = NarrativeTemplate {
            section_order: [CodeCategory::Medication; 3],
            ..Default::default()
        };
        assert!(serialize_narrative("e", &v, &m, &bad).is_err());
    }

    fn arb_visit() -> impl Strategy<Value = (Vec<MedicalCode>, CodeNameMap)> {
        prop::collection::btree_set((0usize..40, 0usize..3), 0..15).prop_map(|set| {
            let mut map = CodeNameMap::default();
            let codes = set
                .into_iter()
                .map(|(i, k)| {
                    let code = MedicalCode::new(CodingSystem::Other, format!("X{i}K{k}"), CodeCategory::ALL[k]).unwrap();
                    map.insert(CodingSystem::Other, code.code.clone(), format!("concept{i}k{k}z")).unwrap();
                    code
                })
                .collect();
            (codes, map)
        })
    }

    proptest! {
        #[test]
        fn narrative_complete_and_order_free((codes, map) in arb_visit(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let t = NarrativeTemplate::default();
            let v = Visit::new("v", "p", day()).with_codes(codes.clone());
            let text = serialize_narrative("e", &v, &map, &t).unwrap().text;
            for c in &codes {
                let name = map.get(c.system, &c.code).unwrap();
                prop_assert_eq!(text.matches(name).count(), 1);
                prop_assert!(!text.contains(&c.code));
            }
            let mut shuffled = codes.clone();
            shuffled.shuffle(&mut crate::util::stream_rng(seed, "t"));
            let v2 = Visit::new("v", "p", day()).with_codes(shuffled);
            prop_assert_eq!(serialize_narrative("e", &v2, &map, &t).unwrap().text, text);
        }
    }
}

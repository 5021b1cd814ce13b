use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CohortExample, Label, MedicalCode};

/// Binary code-presence features, one row per example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub rows: Vec<Vec<f64>>,
    pub columns: Vec<MedicalCode>,
    #[serde(skip)]
    pub column_index: BTreeMap<MedicalCode, usize>,
    pub labels: Vec<Label>,
    /// Codes seen in the examples but absent from the universe.
    pub ignored_codes: usize,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn subset(&self, rows: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            rows: rows.iter().map(|&i| self.rows[i].clone()).collect(),
            columns: self.columns.clone(),
            column_index: self.column_index.clone(),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            ignored_codes: 0,
        }
    }
}

/// Sorted distinct codes across the examples' input visits.
pub fn code_universe<'a>(examples: impl IntoIterator<Item = &'a CohortExample>) -> Vec<MedicalCode> {
    let set: BTreeSet<&MedicalCode> = examples.into_iter().flat_map(|e| e.input_visit.codes.iter()).collect();
    set.into_iter().cloned().collect()
}

pub fn featurize(examples: &[CohortExample], universe: &[MedicalCode]) -> Result<FeatureMatrix> {
    if universe.is_empty() {
        return Err(Error::Invalid("code universe must be nonempty".into()));
    }
    let mut column_index = BTreeMap::new();
    for (i, c) in universe.iter().enumerate() {
        if column_index.insert(c.clone(), i).is_some() {
            return Err(Error::Invalid(format!("code {c} appears twice in the universe")));
        }
    }
    let mut ignored = 0;
    let rows = examples
        .iter()
        .map(|e| {
            let mut row = vec![0.0; universe.len()];
            for c in &e.input_visit.codes {
                match column_index.get(c) {
                    Some(&j) => row[j] = 1.0,
                    None => ignored += 1,
                }
            }
            row
        })
        .collect();
    Ok(FeatureMatrix {
        rows,
        columns: universe.to_vec(),
        column_index,
        labels: examples.iter().map(|e| e.label).collect(),
        ignored_codes: ignored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CodingSystem, Split, Visit};

    fn code(c: &str) -> MedicalCode {
        MedicalCode::diagnosis(CodingSystem::Other, c).unwrap()
    }

    fn ex(id: &str, codes: &[&str], pos: bool) -> CohortExample {
        CohortExample {
            example_id: id.into(),
            patient_id: id.into(),
            input_visit: Visit::new(id, id, chrono::NaiveDate::from_ymd_opt(2015, 1, 1).unwrap())
                .with_codes(codes.iter().map(|c| code(c))),
            label: Label::from_bool(pos),
            split: Split::Train,
            task_id: "t".into(),
        }
    }

    #[test]
    fn presence_rows() {
        let universe = vec![code("a"), code("b"), code("c")];
        let m = featurize(&[ex("1", &["a", "c"], true), ex("2", &[], false)], &universe).unwrap();
        assert_eq!(m.rows, vec![vec![1.0, 0.0, 1.0], vec![0.0, 0.0, 0.0]]);
        assert_eq!(m.labels, vec![Label::Positive, Label::Negative]);
    }

    #[test]
    fn hand_encoded_matrix() {
        let universe = vec![code("a"), code("b"), code("c"), code("d")];
        let exs = [ex("1", &["d"], true), ex("2", &["a", "b", "z"], false), ex("3", &["a", "b", "c", "d"], true)];
        let m = featurize(&exs, &universe).unwrap();
        let expected = vec![
            vec![0.0, 0.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0, 0.0],
            vec![1.0, 1.0, 1.0, 1.0],
        ];
        assert_eq!(m.rows, expected);
        assert_eq!(m.ignored_codes, 1);
    }

    #[test]
    fn universe_checks() {
        assert!(featurize(&[], &[]).is_err());
        assert!(featurize(&[], &[code("a"), code("a")]).is_err());
        let u = code_universe(&[ex("1", &["b", "a"], true), ex("2", &["a"], false)]);
        assert_eq!(u, vec![code("a"), code("b")]);
    }
}

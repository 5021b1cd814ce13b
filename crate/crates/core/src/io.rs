//! File formats: the per-code visit CSV, code-set files, and line-delimited
//! JSON records for everything else.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{MedicalCode, Visit};

pub const VISIT_HEADER: [&str; 6] = ["patient_id", "visit_id", "date", "system", "code", "category"];

/// Parses visit rows (one row per visit/code pair) into visits ordered by
/// visit id. Repeated rows collapse into one code.
pub fn read_visits(path: &Path) -> Result<Vec<Visit>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_visits(file, path)
}

pub fn parse_visits<R: std::io::Read>(reader: R, path: &Path) -> Result<Vec<Visit>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(path, 1, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != VISIT_HEADER {
        return Err(Error::parse(
            path,
            1,
            format!("expected header {}", VISIT_HEADER.join(",")),
        ));
    }
    let mut visits: BTreeMap<String, Visit> = BTreeMap::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::parse(path, line, e.to_string()))?;
        let field = |k: usize| row.get(k).unwrap_or("");
        let date = NaiveDate::parse_from_str(field(2), "%Y-%m-%d")
            .map_err(|e| Error::parse(path, line, format!("bad date {:?}: {e}", field(2))))?;
        let visit = visits
            .entry(field(1).to_string())
            .or_insert_with(|| Visit::new(field(1), field(0), date));
        if visit.patient_id != field(0) || visit.date != date {
            return Err(Error::parse(
                path,
                line,
                format!("visit {} has conflicting patient or date", field(1)),
            ));
        }
        // Rows with an empty code declare a visit without codes.
        if field(4).is_empty() {
            continue;
        }
        let code = MedicalCode::new(
            field(3).parse().map_err(|e: Error| Error::parse(path, line, e.to_string()))?,
            field(4),
            field(5).parse().map_err(|e: Error| Error::parse(path, line, e.to_string()))?,
        )
        .map_err(|e| Error::parse(path, line, e.to_string()))?;
        visit.codes.insert(code);
    }
    Ok(visits.into_values().collect())
}

pub fn write_visits<'a>(path: &Path, visits: impl IntoIterator<Item = &'a Visit>) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(VISIT_HEADER).map_err(|e| Error::Invalid(e.to_string()))?;
        for v in visits {
            let date = v.date.format("%Y-%m-%d").to_string();
            if v.codes.is_empty() {
                w.write_record([v.patient_id.as_str(), &v.visit_id, &date, "", "", ""])
                    .map_err(|e| Error::Invalid(e.to_string()))?;
            }
            for c in &v.codes {
                w.write_record([
                    v.patient_id.as_str(),
                    &v.visit_id,
                    &date,
                    c.system.as_str(),
                    &c.code,
                    c.category.as_str(),
                ])
                .map_err(|e| Error::Invalid(e.to_string()))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    write_bytes(path, &buf)
}

/// Reads a `system,code,category` code set. A header row is optional.
pub fn read_code_set(path: &Path) -> Result<BTreeSet<MedicalCode>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_code_set(&text, path)
}

pub fn parse_code_set(text: &str, path: &Path) -> Result<BTreeSet<MedicalCode>> {
    let mut set = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::parse(path, line_no, "expected system,code,category"));
        }
        if line_no == 1 && parts == ["system", "code", "category"] {
            continue;
        }
        let system = parts[0].parse().map_err(|e: Error| Error::parse(path, line_no, e.to_string()))?;
        let category = parts[2].parse().map_err(|e: Error| Error::parse(path, line_no, e.to_string()))?;
        let code = MedicalCode::new(system, parts[1], category)
            .map_err(|e| Error::parse(path, line_no, e.to_string()))?;
        set.insert(code);
    }
    Ok(set)
}

pub fn write_code_set<'a>(path: &Path, codes: impl IntoIterator<Item = &'a MedicalCode>) -> Result<()> {
    let mut out = String::from("system,code,category\n");
    for c in codes {
        out.push_str(&format!("{},{},{}\n", c.system, c.code, c.category));
    }
    write_bytes(path, out.as_bytes())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, items: impl IntoIterator<Item = &'a T>) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    write_bytes(path, &buf)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut buf = serde_json::to_vec_pretty(value)?;
    buf.push(b'\n');
    write_bytes(path, &buf)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start].lines().count().max(1))
            .unwrap_or(0);
        Error::parse(path, line, e.message().to_string())
    })
}

/// Writes through a temporary sibling and renames, so readers never observe
/// a half-written file.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = path.with_extension(format!(
        "{}.tmp{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or(""),
        std::process::id()
    ));
    {
        let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::*;
    use proptest::prelude::*;

    #[test]
    fn visit_rows_group_and_dedupe() {
        let csv = "patient_id,visit_id,date,system,code,category\n\
                   p1,v1,2015-01-02,ICD9,272.4,Diagnosis\n\
                   p1,v1,2015-01-02,ICD9,272.4,Diagnosis\n\
                   p1,v1,2015-01-02,NDC,0001,Medication\n\
                   p2,v2,2016-03-04,,,\n";
        let visits = parse_visits(csv.as_bytes(), Path::new("x.csv")).unwrap();
        assert_eq!(visits.len(), 2);
        assert_eq!(visits[0].codes.len(), 2);
        assert!(visits[1].codes.is_empty());
    }

    #[test]
    fn bad_date_reports_line() {
        let csv = "patient_id,visit_id,date,system,code,category\np1,v1,2015/01/02,ICD9,1,Diagnosis\n";
        match parse_visits(csv.as_bytes(), Path::new("x.csv")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn code_set_with_and_without_header() {
        let a = parse_code_set("system,code,category\nICD9,410,Diagnosis\n", Path::new("a")).unwrap();
        let b = parse_code_set("ICD9,410,Diagnosis\n", Path::new("b")).unwrap();
        assert_eq!(a, b);
        assert!(parse_code_set("ICD9,410\n", Path::new("c")).is_err());
    }

    fn arb_code() -> impl Strategy<Value = MedicalCode> {
        (
            prop::sample::select(vec![CodingSystem::Icd9, CodingSystem::Icd10, CodingSystem::Ndc]),
            "[A-Z0-9.]{1,6}",
            prop::sample::select(CodeCategory::ALL.to_vec()),
        )
            .prop_map(|(s, c, k)| MedicalCode::new(s, c, k).unwrap())
    }

    fn arb_example() -> impl Strategy<Value = CohortExample> {
        (
            "[a-z0-9]{1,8}",
            0i64..5000,
            prop::collection::btree_set(arb_code(), 0..6),
            any::<bool>(),
        )
            .prop_map(|(id, days, codes, pos)| {
                let date = NaiveDate::from_ymd_opt(2010, 1, 1).unwrap() + chrono::Days::new(days as u64);
                CohortExample {
                    example_id: id.clone(),
                    patient_id: format!("p{id}"),
                    input_visit: Visit {
                        visit_id: format!("v{id}"),
                        patient_id: format!("p{id}"),
                        date,
                        codes,
                    },
                    label: Label::from_bool(pos),
                    split: Split::Calibration,
                    task_id: "task".into(),
                }
            })
    }

    proptest! {
        #[test]
        fn cohort_json_roundtrip(ex in arb_example()) {
            let line = serde_json::to_string(&ex).unwrap();
            let back: CohortExample = serde_json::from_str(&line).unwrap();
            prop_assert_eq!(back, ex);
        }

        #[test]
        fn visit_csv_roundtrip(exs in prop::collection::vec(arb_example(), 1..5)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("v.csv");
            let mut visits: Vec<Visit> = exs.into_iter().map(|e| e.input_visit).collect();
            visits.sort_by(|a, b| a.visit_id.cmp(&b.visit_id));
            visits.dedup_by(|a, b| a.visit_id == b.visit_id);
            write_visits(&path, &visits).unwrap();
            prop_assert_eq!(read_visits(&path).unwrap(), visits);
        }
    }
}

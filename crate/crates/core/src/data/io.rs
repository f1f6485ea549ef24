use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::{Map, Value};

use super::{Label, SubjectRecord};
use crate::connectome::SCMatrix;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::{ClinicalFields, ClinicalReport};

pub const REPORTS_FILE: &str = "reports.jsonl";
pub const SC_DIR: &str = "sc";
const FIELD_KEYS: [&str; 7] = ["age", "sex", "education", "apoe4", "mmse", "cdr", "notes"];

/// Parses `N` lines of `N` comma-separated numbers and validates the
/// matrix invariants.
pub fn load_sc(path: &Path) -> Result<SCMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, detail: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        detail,
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .enumerate()
            .map(|(j, cell)| {
                cell.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(i + 1, format!("column {}: {:?} is not a number", j + 1, cell.trim())))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(parse_err(
                    i + 1,
                    format!("{} columns, expected {}", row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err(1, "empty matrix".into()));
    }
    if rows.len() != rows[0].len() {
        return Err(parse_err(
            rows.len(),
            format!(
                "{} rows of {} columns; matrix must be square",
                rows.len(),
                rows[0].len()
            ),
        ));
    }
    let values = Tensor::from_rows(&rows)?;
    SCMatrix::with_default_names(values).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

/// Writes one row per line using shortest round-trip number formatting.
pub fn save_sc(path: &Path, sc: &SCMatrix) -> Result<()> {
    let n = sc.region_count();
    let mut out = String::new();
    for i in 0..n {
        for j in 0..n {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{}", sc.at(i, j)).expect("writing to a string");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One line of `reports.jsonl`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportEntry {
    pub subject_id: String,
    pub label: Label,
    pub fields: ClinicalFields,
}

impl ReportEntry {
    pub fn report(&self) -> ClinicalReport {
        ClinicalReport::from_fields(self.subject_id.clone(), &self.fields)
    }

    fn to_json(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("subject_id".into(), Value::String(self.subject_id.clone()));
        obj.insert("label".into(), Value::String(self.label.to_string()));
        let map = self.fields.to_map();
        for key in FIELD_KEYS {
            let v = &map[key];
            if v == "unknown" {
                continue;
            }
            // Numeric fields are written as JSON numbers when that is lossless.
            let value = match v.parse::<serde_json::Number>() {
                Ok(num) if key != "notes" && num.to_string() == *v => Value::Number(num),
                _ => Value::String(v.clone()),
            };
            obj.insert(key.into(), value);
        }
        Value::Object(obj)
    }
}

fn field_text(v: &Value) -> Option<String> {
    match v {
        Value::Null => None,
        Value::String(s) if s.trim().is_empty() => None,
        Value::String(s) => Some(s.clone()),
        other => Some(other.to_string()),
    }
}

/// Reads line-delimited report records. Blank lines are skipped; unknown
/// keys are ignored.
pub fn load_reports(path: &Path) -> Result<Vec<ReportEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |detail: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail,
        };
        let value: Value = serde_json::from_str(line).map_err(|e| err(format!("malformed record: {e}")))?;
        let Value::Object(obj) = value else {
            return Err(err("record is not an object".into()));
        };
        let subject_id = match obj.get("subject_id") {
            Some(Value::String(s)) if !s.is_empty() => s.clone(),
            _ => return Err(err("missing or non-string subject_id".into())),
        };
        let label = match obj.get("label") {
            Some(Value::String(s)) => s.parse::<Label>().map_err(|e| err(e.to_string()))?,
            _ => return Err(err("missing label".into())),
        };
        if !seen.insert(subject_id.clone()) {
            return Err(err(format!("duplicate subject_id {subject_id:?}")));
        }
        let get = |k: &str| obj.get(k).and_then(field_text);
        out.push(ReportEntry {
            subject_id,
            label,
            fields: ClinicalFields {
                age: get("age"),
                sex: get("sex"),
                education: get("education"),
                apoe4: get("apoe4"),
                mmse: get("mmse"),
                cdr: get("cdr"),
                notes: get("notes"),
            },
        });
    }
    Ok(out)
}

pub fn save_reports(path: &Path, entries: &[ReportEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&e.to_json().to_string());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads `dir/reports.jsonl` and `dir/sc/<id>.sc.csv` for every record,
/// checking that all matrices share one region count.
pub fn load_dataset(dir: &Path) -> Result<Vec<SubjectRecord>> {
    let entries = load_reports(&dir.join(REPORTS_FILE))?;
    let mut records = Vec::with_capacity(entries.len());
    let mut regions = None;
    for e in entries {
        let sc = load_sc(&dir.join(SC_DIR).join(format!("{}.sc.csv", e.subject_id)))?;
        match regions {
            None => regions = Some(sc.region_count()),
            Some(n) if n != sc.region_count() => {
                return Err(Error::Validation(format!(
                    "subject {} has N={}, dataset has N={n}",
                    e.subject_id,
                    sc.region_count()
                )))
            }
            _ => {}
        }
        records.push(SubjectRecord {
            report: e.report(),
            subject_id: e.subject_id,
            sc,
            label: e.label,
        });
    }
    Ok(records)
}

pub fn save_dataset(dir: &Path, records: &[SubjectRecord]) -> Result<()> {
    let sc_dir = dir.join(SC_DIR);
    fs::create_dir_all(&sc_dir).map_err(|e| Error::io(&sc_dir, e))?;
    let entries: Vec<ReportEntry> = records
        .iter()
        .map(|r| ReportEntry {
            subject_id: r.subject_id.clone(),
            label: r.label,
            fields: ClinicalFields::from_map(&r.report.structured),
        })
        .collect();
    save_reports(&dir.join(REPORTS_FILE), &entries)?;
    for r in records {
        save_sc(&sc_dir.join(format!("{}.sc.csv", r.subject_id)), &r.sc)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_matrix_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.sc.csv");
        fs::write(&p, "0,0,0\n0,0,0\n0,0,0\n").unwrap();
        assert_eq!(load_sc(&p).unwrap().region_count(), 3);
    }

    #[test]
    fn asymmetry_names_the_entry() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.sc.csv");
        fs::write(&p, "0,5,0\n4,0,0\n0,0,0\n").unwrap();
        let msg = load_sc(&p).unwrap_err().to_string();
        assert!(msg.contains("(0,1)"), "{msg}");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.sc.csv");
        fs::write(&p, "0,1\n1,x\n").unwrap();
        assert!(matches!(load_sc(&p), Err(Error::Parse { line: 2, .. })));
        fs::write(&p, "0,1\n1\n").unwrap();
        assert!(matches!(load_sc(&p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn sc_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.sc.csv");
        let v = Tensor::from_rows(&[
            vec![0.0, 0.1 + 0.2, 7.0],
            vec![0.1 + 0.2, 0.0, 1e-300],
            vec![7.0, 1e-300, 0.0],
        ])
        .unwrap();
        let sc = SCMatrix::with_default_names(v).unwrap();
        save_sc(&p, &sc).unwrap();
        assert_eq!(load_sc(&p).unwrap(), sc);
    }

    #[test]
    fn reports_edge_cases() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(REPORTS_FILE);
        fs::write(&p, "").unwrap();
        assert!(load_reports(&p).unwrap().is_empty());

        fs::write(&p, "{\"subject_id\":\"a\",\"label\":\"MCI\",\"age\":72,\"cdr\":0.5}\n").unwrap();
        let r = load_reports(&p).unwrap();
        assert_eq!(r[0].fields.age.as_deref(), Some("72"));
        assert!(r[0].report().raw_text.ends_with("cdr 0.5. notes: unknown."));

        fs::write(
            &p,
            "{\"subject_id\":\"a\",\"label\":\"NC\"}\n{\"subject_id\":\"a\",\"label\":\"NC\"}\n",
        )
        .unwrap();
        assert!(matches!(load_reports(&p), Err(Error::Parse { line: 2, .. })));

        fs::write(&p, "{\"subject_id\":\"a\",\"label\":\"NC\"}\n{oops\n").unwrap();
        assert!(matches!(load_reports(&p), Err(Error::Parse { line: 2, .. })));

        fs::write(&p, "{\"subject_id\":\"a\",\"label\":\"AD\"}\n").unwrap();
        assert!(load_reports(&p).is_err());
    }

    #[test]
    fn reports_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(REPORTS_FILE);
        let entries = vec![ReportEntry {
            subject_id: "s1".into(),
            label: Label::Mci,
            fields: ClinicalFields {
                age: Some("72".into()),
                cdr: Some("0.5".into()),
                notes: Some("mild memory complaints".into()),
                ..Default::default()
            },
        }];
        save_reports(&p, &entries).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"age\":72"), "{text}");
        assert_eq!(load_reports(&p).unwrap(), entries);
    }
}

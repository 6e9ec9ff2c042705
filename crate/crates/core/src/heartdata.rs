//! Heart-disease records: CSV parsing, train/validation/test splitting and
//! min-max feature scaling.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Number of model input features.
pub const NUM_FEATURES: usize = 13;

/// Column order of the 13 features, as they appear in the CSV.
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "age", "sex", "cp", "trestbps", "chol", "fbs", "restecg", "thalach", "exang", "oldpeak",
    "slope", "ca", "thal",
];

/// Name of the optional 14th column.
pub const LABEL_NAME: &str = "target";

/// The bundled Cleveland dataset (303 rows, header line, 14 columns).
pub const CLEVELAND_CSV: &str = include_str!("../data/heart.csv");

pub type Features = [f64; NUM_FEATURES];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("line {line}: expected 13 or 14 fields, got {got}")]
    FieldCount { line: usize, got: usize },
    #[error("line {line}: column '{column}' is not numeric: {value:?}")]
    NotNumeric {
        line: usize,
        column: &'static str,
        value: String,
    },
    #[error("line {line}: column '{column}' out of range: {value}")]
    OutOfRange {
        line: usize,
        column: &'static str,
        value: f64,
    },
    #[error("need at least 10 records to split, got {0}")]
    TooFewRecords(usize),
    #[error("cannot fit normalization on an empty training set")]
    EmptyTrainSet,
}

/// One patient: 13 clinical features and an optional diagnosis label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub age: f64,
    pub sex: f64,
    pub cp: f64,
    pub trestbps: f64,
    pub chol: f64,
    pub fbs: f64,
    pub restecg: f64,
    pub thalach: f64,
    pub exang: f64,
    pub oldpeak: f64,
    pub slope: f64,
    pub ca: f64,
    pub thal: f64,
    pub label: Option<u8>,
}

impl PatientRecord {
    pub fn from_features(f: Features, label: Option<u8>) -> Self {
        Self {
            age: f[0],
            sex: f[1],
            cp: f[2],
            trestbps: f[3],
            chol: f[4],
            fbs: f[5],
            restecg: f[6],
            thalach: f[7],
            exang: f[8],
            oldpeak: f[9],
            slope: f[10],
            ca: f[11],
            thal: f[12],
            label,
        }
    }

    pub fn features(&self) -> Features {
        [
            self.age,
            self.sex,
            self.cp,
            self.trestbps,
            self.chol,
            self.fbs,
            self.restecg,
            self.thalach,
            self.exang,
            self.oldpeak,
            self.slope,
            self.ca,
            self.thal,
        ]
    }

    /// Checks finiteness and the enumerated ranges of categorical columns.
    ///
    /// Both the 0-based encoding (cp 0..3, slope 0..2, thal 0..3) and the raw
    /// UCI encoding (cp 1..4, slope 1..3, thal 3/6/7) are accepted.
    pub fn validate(&self, line: usize) -> Result<(), DataError> {
        for (i, &v) in self.features().iter().enumerate() {
            let column = FEATURE_NAMES[i];
            let ok = v.is_finite()
                && match column {
                    "sex" | "fbs" | "exang" => is_int_in(v, 0, 1),
                    "cp" => is_int_in(v, 0, 4),
                    "restecg" => is_int_in(v, 0, 2),
                    "slope" => is_int_in(v, 0, 3),
                    "ca" => is_int_in(v, 0, 4),
                    "thal" => is_int_in(v, 0, 3) || v == 6.0 || v == 7.0,
                    _ => true,
                };
            if !ok {
                return Err(DataError::OutOfRange {
                    line,
                    column,
                    value: v,
                });
            }
        }
        Ok(())
    }

    /// Comma-separated features, followed by the label when present.
    pub fn to_csv_line(&self) -> String {
        let mut out = String::new();
        for (i, v) in self.features().iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        if let Some(label) = self.label {
            let _ = write!(out, ",{label}");
        }
        out
    }
}

fn is_int_in(v: f64, lo: i32, hi: i32) -> bool {
    v == libm::trunc(v) && v >= f64::from(lo) && v <= f64::from(hi)
}

/// Parses dataset text. A first line containing any non-numeric field is
/// treated as a header and skipped.
pub fn parse_csv(text: &str) -> Result<Vec<PatientRecord>, DataError> {
    let mut records = Vec::new();
    let mut first = true;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r').trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if first {
            first = false;
            if fields.iter().any(|f| f.parse::<f64>().is_err()) && looks_like_header(&fields) {
                continue;
            }
        }
        records.push(parse_fields(&fields, line_no)?);
    }
    Ok(records)
}

/// Parses a single data line (e.g. a job payload). `line_no` is used in errors.
pub fn parse_line(line: &str, line_no: usize) -> Result<PatientRecord, DataError> {
    let line = line.trim_end_matches(['\r', '\n']).trim();
    let fields: Vec<&str> = if line.is_empty() {
        Vec::new()
    } else {
        line.split(',').map(str::trim).collect()
    };
    parse_fields(&fields, line_no)
}

// A header has no numeric cell at all; a data line with one bad cell is an error.
fn looks_like_header(fields: &[&str]) -> bool {
    fields.iter().all(|f| f.parse::<f64>().is_err())
}

fn parse_fields(fields: &[&str], line: usize) -> Result<PatientRecord, DataError> {
    if fields.len() != NUM_FEATURES && fields.len() != NUM_FEATURES + 1 {
        return Err(DataError::FieldCount {
            line,
            got: fields.len(),
        });
    }
    let mut feats = [0.0; NUM_FEATURES];
    for (i, slot) in feats.iter_mut().enumerate() {
        *slot = parse_number(fields[i], line, FEATURE_NAMES[i])?;
    }
    let label = match fields.get(NUM_FEATURES) {
        Some(s) => {
            let v = parse_number(s, line, LABEL_NAME)?;
            if v < 0.0 || v != libm::trunc(v) {
                return Err(DataError::OutOfRange {
                    line,
                    column: LABEL_NAME,
                    value: v,
                });
            }
            // severity grades 2..4 of the raw data mean "disease present"
            Some(if v >= 1.0 { 1 } else { 0 })
        }
        None => None,
    };
    let rec = PatientRecord::from_features(feats, label);
    rec.validate(line)?;
    Ok(rec)
}

fn parse_number(s: &str, line: usize, column: &'static str) -> Result<f64, DataError> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(DataError::NotNumeric {
            line,
            column,
            value: s.to_string(),
        }),
    }
}

/// Serializes records with a header line.
pub fn to_csv(records: &[PatientRecord]) -> String {
    let mut out = String::new();
    out.push_str(&FEATURE_NAMES.join(","));
    if records.iter().any(|r| r.label.is_some()) {
        out.push(',');
        out.push_str(LABEL_NAME);
    }
    out.push('\n');
    for r in records {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<PatientRecord>,
    pub validation: Vec<PatientRecord>,
    pub test: Vec<PatientRecord>,
    pub seed: u64,
}

/// Seeded shuffle followed by a 70:10:20 cut (floor, floor, remainder).
pub fn split_dataset(records: &[PatientRecord], seed: u64) -> Result<DatasetSplit, DataError> {
    let n = records.len();
    if n < 10 {
        return Err(DataError::TooFewRecords(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 7 / 10;
    let n_val = n / 10;
    let pick = |range: &[usize]| range.iter().map(|&i| records[i]).collect::<Vec<_>>();
    Ok(DatasetSplit {
        train: pick(&order[..n_train]),
        validation: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
        seed,
    })
}

/// Per-feature min/max, fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Features,
    pub max: Features,
}

impl NormStats {
    pub fn fit(train: &[PatientRecord]) -> Result<Self, DataError> {
        fit_norm(train)
    }

    pub fn normalize(&self, record: &PatientRecord) -> Features {
        normalize(record, self)
    }

    /// Text form: a `normstats v1` line, then one `name min max` line per feature.
    pub fn to_text(&self) -> String {
        let mut out = String::from("normstats v1\n");
        for i in 0..NUM_FEATURES {
            let _ = writeln!(out, "{} {:?} {:?}", FEATURE_NAMES[i], self.min[i], self.max[i]);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some(h) if h.trim() == "normstats v1" => {}
            Some(h) => return Err(format!("unsupported normstats header {:?}", h.trim())),
            None => return Err("empty normstats file".into()),
        }
        let mut min = [0.0; NUM_FEATURES];
        let mut max = [0.0; NUM_FEATURES];
        for (i, name) in FEATURE_NAMES.iter().enumerate() {
            let line = lines
                .next()
                .ok_or_else(|| format!("missing normstats row for {name}"))?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 || parts[0] != *name {
                return Err(format!("malformed normstats row {:?}, expected {name}", line));
            }
            min[i] = parts[1].parse().map_err(|_| format!("bad min for {name}"))?;
            max[i] = parts[2].parse().map_err(|_| format!("bad max for {name}"))?;
            if !(min[i] <= max[i]) {
                return Err(format!("min > max for {name}"));
            }
        }
        Ok(Self { min, max })
    }
}

pub fn fit_norm(train: &[PatientRecord]) -> Result<NormStats, DataError> {
    let first = train.first().ok_or(DataError::EmptyTrainSet)?.features();
    let mut min = first;
    let mut max = first;
    for r in &train[1..] {
        for (i, v) in r.features().into_iter().enumerate() {
            min[i] = min[i].min(v);
            max[i] = max[i].max(v);
        }
    }
    Ok(NormStats { min, max })
}

/// Min-max scaling clamped to [0, 1]. Constant features map to 0.
pub fn normalize(record: &PatientRecord, stats: &NormStats) -> Features {
    normalize_features(&record.features(), stats)
}

pub fn normalize_features(x: &Features, stats: &NormStats) -> Features {
    let mut out = [0.0; NUM_FEATURES];
    for i in 0..NUM_FEATURES {
        let span = stats.max[i] - stats.min[i];
        out[i] = if span > 0.0 {
            ((x[i] - stats.min[i]) / span).clamp(0.0, 1.0)
        } else {
            0.0
        };
    }
    out
}

/// Normalized features paired with labels; unlabeled records are skipped.
pub fn to_samples(records: &[PatientRecord], stats: &NormStats) -> Vec<(Features, usize)> {
    records
        .iter()
        .filter_map(|r| r.label.map(|l| (normalize(r, stats), usize::from(l))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const ROW1: &str = "63,1,3,145,233,1,0,150,0,2.3,0,0,1,1";
    const ROW2: &str = "37,1,2,130,250,0,1,187,0,3.5,0,0,2,1";

    #[test]
    fn parses_table_row() {
        let recs = parse_csv(ROW1).unwrap();
        assert_eq!(recs.len(), 1);
        let r = recs[0];
        assert_eq!(r.age, 63.0);
        assert_eq!(r.oldpeak, 2.3);
        assert_eq!(r.thal, 1.0);
        assert_eq!(r.label, Some(1));
    }

    #[test]
    fn empty_file_is_empty() {
        assert!(parse_csv("").unwrap().is_empty());
        assert!(parse_csv("\n\r\n").unwrap().is_empty());
    }

    #[test]
    fn wrong_field_count_names_line() {
        let err = parse_csv("63,1,3").unwrap_err();
        assert_eq!(err.to_string(), "line 1: expected 13 or 14 fields, got 3");
        let err = parse_csv(&format!("{ROW1}\n1,2")).unwrap_err();
        assert_eq!(err.to_string(), "line 2: expected 13 or 14 fields, got 2");
    }

    #[test]
    fn non_numeric_names_column() {
        let err = parse_csv("63,1,3,145,233,1,0,150,0,2.3,0,?,1,1").unwrap_err();
        assert!(matches!(err, DataError::NotNumeric { column: "ca", line: 1, .. }));
        assert!(err.to_string().contains("'ca'"));
    }

    #[test]
    fn header_detected_and_crlf_accepted() {
        let text = format!("age,sex,cp,trestbps,chol,fbs,restecg,thalach,exang,oldpeak,slope,ca,thal,target\r\n{ROW1}\r\n{ROW2}\r\n");
        let recs = parse_csv(&text).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].age, 37.0);
    }

    #[test]
    fn thirteen_fields_has_no_label() {
        let r = parse_line("63,1,3,145,233,1,0,150,0,2.3,0,0,1", 1).unwrap();
        assert_eq!(r.label, None);
    }

    #[test]
    fn severity_labels_binarized() {
        let r = parse_line("67,1,4,160,286,0,2,108,1,1.5,2,3,3,2", 1).unwrap();
        assert_eq!(r.label, Some(1));
    }

    #[test]
    fn categorical_out_of_range_rejected() {
        let err = parse_line("63,2,3,145,233,1,0,150,0,2.3,0,0,1,1", 4).unwrap_err();
        assert_eq!(err.to_string(), "line 4: column 'sex' out of range: 2");
    }

    #[test]
    fn bundled_dataset_parses() {
        let recs = parse_csv(CLEVELAND_CSV).unwrap();
        assert_eq!(recs.len(), 303);
        assert!(recs.iter().all(|r| r.label.is_some()));
    }

    #[test]
    fn split_sizes() {
        let recs = parse_csv(CLEVELAND_CSV).unwrap();
        let s = split_dataset(&recs[..100], 42).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (70, 10, 20));
        let s = split_dataset(&recs, 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (212, 30, 61));
        assert_eq!(s, split_dataset(&recs, 1).unwrap());
        assert_ne!(s.train, split_dataset(&recs, 2).unwrap().train);
    }

    #[test]
    fn split_needs_ten() {
        let recs = parse_csv(CLEVELAND_CSV).unwrap();
        assert_eq!(split_dataset(&recs[..9], 0), Err(DataError::TooFewRecords(9)));
    }

    #[test]
    fn fit_norm_cases() {
        let recs = parse_csv(&format!("{ROW1}\n{ROW2}")).unwrap();
        let s = fit_norm(&recs).unwrap();
        assert_eq!((s.min[0], s.max[0]), (37.0, 63.0));
        let one = fit_norm(&recs[..1]).unwrap();
        assert_eq!(one.min, one.max);
        // sex is 1 in both rows
        assert_eq!((s.min[1], s.max[1]), (1.0, 1.0));
        assert_eq!(fit_norm(&[]), Err(DataError::EmptyTrainSet));
    }

    #[test]
    fn normalize_endpoints_and_clamp() {
        let recs = parse_csv(&format!("{ROW1}\n{ROW2}")).unwrap();
        let s = fit_norm(&recs).unwrap();
        assert_eq!(normalize(&recs[1], &s)[0], 0.0);
        assert_eq!(normalize(&recs[0], &s)[0], 1.0);
        let mut old = recs[0];
        old.age = 90.0;
        assert_eq!(normalize(&old, &s)[0], 1.0);
        // constant feature
        assert_eq!(normalize(&recs[0], &s)[1], 0.0);
    }

    #[test]
    fn normstats_text_round_trip() {
        let recs = parse_csv(CLEVELAND_CSV).unwrap();
        let s = fit_norm(&recs).unwrap();
        assert_eq!(NormStats::from_text(&s.to_text()).unwrap(), s);
        assert!(NormStats::from_text("normstats v2\n").is_err());
    }
}

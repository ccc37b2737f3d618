use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::format_float;

/// Flag marking points taken under the alternative field-1 background
/// condition (trapping light off); they get their own `bg1_incoherent`.
pub const ALT_BACKGROUND_FLAG: &str = "no_trap";

pub const DATASET_COLUMNS: [&str; 11] = [
    "p1", "p1_se", "g12", "g12_se", "qc", "qc_se", "p12", "p12_se", "w", "w_se", "flags",
];
const REQUIRED: [&str; 8] = ["p1", "p1_se", "g12", "g12_se", "qc", "qc_se", "p12", "p12_se"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    pub value: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub p1: Measured,
    pub g12: Measured,
    pub qc: Measured,
    pub p12: Measured,
    pub w: Option<Measured>,
    pub flags: Vec<String>,
}

impl DataPoint {
    pub fn has_flag(&self, flag: &str) -> bool {
        self.flags.iter().any(|f| f == flag)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub points: Vec<DataPoint>,
}

fn cell(row: &csv::StringRecord, idx: Option<usize>) -> &str {
    idx.and_then(|i| row.get(i)).unwrap_or("").trim()
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            let row = i + 1;
            if !(p.p1.value > 0.0 && p.p1.value < 1.0) {
                return Err(Error::Dataset(format!("row {row}: `p1` must lie in (0, 1)")));
            }
            let mut obs = vec![("p1", p.p1), ("g12", p.g12), ("qc", p.qc), ("p12", p.p12)];
            if let Some(w) = p.w {
                obs.push(("w", w));
            }
            for (name, m) in obs {
                if !m.value.is_finite() {
                    return Err(Error::Dataset(format!("row {row}: `{name}` must be finite")));
                }
                if !(m.se.is_finite() && m.se > 0.0) {
                    return Err(Error::Dataset(format!("row {row}: `{name}_se` must be > 0")));
                }
            }
        }
        Ok(())
    }

    pub fn has_alt_background(&self) -> bool {
        self.points.iter().any(|p| p.has_flag(ALT_BACKGROUND_FLAG))
    }

    /// Parses the CSV form. Every column must be a known one; `w`, `w_se`
    /// and `flags` may be absent or left empty per row. Flags are separated
    /// by `;`.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| Error::Dataset(format!("unreadable header: {e}")))?
            .clone();
        let mut index = [None; 11];
        for (i, name) in header.iter().enumerate() {
            let name = name.trim();
            let Some(k) = DATASET_COLUMNS.iter().position(|c| *c == name) else {
                return Err(Error::Dataset(format!("unknown column `{name}`")));
            };
            if index[k].is_some() {
                return Err(Error::Dataset(format!("duplicate column `{name}`")));
            }
            index[k] = Some(i);
        }
        for (k, name) in DATASET_COLUMNS.iter().enumerate() {
            if REQUIRED.contains(name) && index[k].is_none() {
                return Err(Error::Dataset(format!("missing column `{name}`")));
            }
        }
        if index[8].is_some() != index[9].is_some() {
            return Err(Error::Dataset("columns `w` and `w_se` must appear together".into()));
        }

        let mut points = Vec::new();
        for (r, row) in reader.records().enumerate() {
            let row_no = r + 1;
            let row = row.map_err(|e| Error::Dataset(format!("row {row_no}: {e}")))?;
            let num = |k: usize| -> Result<Option<f64>> {
                let s = cell(&row, index[k]);
                if s.is_empty() {
                    return Ok(None);
                }
                s.parse::<f64>().map(Some).map_err(|_| {
                    Error::Dataset(format!("row {row_no}: column `{}` is not a number", DATASET_COLUMNS[k]))
                })
            };
            let req = |k: usize| -> Result<f64> {
                num(k)?.ok_or_else(|| Error::Dataset(format!("row {row_no}: column `{}` is empty", DATASET_COLUMNS[k])))
            };
            let m = |k: usize| -> Result<Measured> {
                Ok(Measured {
                    value: req(k)?,
                    se: req(k + 1)?,
                })
            };
            let w = match (num(8)?, num(9)?) {
                (Some(value), Some(se)) => Some(Measured { value, se }),
                (None, None) => None,
                _ => {
                    return Err(Error::Dataset(format!(
                        "row {row_no}: `w` and `w_se` must both be set or both empty"
                    )))
                }
            };
            let flags = cell(&row, index[10])
                .split(';')
                .map(str::trim)
                .filter(|f| !f.is_empty())
                .map(str::to_string)
                .collect();
            points.push(DataPoint {
                p1: m(0)?,
                g12: m(2)?,
                qc: m(4)?,
                p12: m(6)?,
                w,
                flags,
            });
        }
        let ds = Dataset { points };
        ds.validate()?;
        Ok(ds)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = DATASET_COLUMNS.join(",");
        out.push('\n');
        for p in &self.points {
            let mut cells: Vec<String> = [p.p1, p.g12, p.qc, p.p12]
                .iter()
                .flat_map(|m| [format_float(m.value), format_float(m.se)])
                .collect();
            match p.w {
                Some(w) => cells.extend([format_float(w.value), format_float(w.se)]),
                None => cells.extend([String::new(), String::new()]),
            }
            cells.push(p.flags.join(";"));
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

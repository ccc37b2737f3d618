use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_sim::{ClickSet, DetectionRecord, DetectorId};
use crate::params::DetectionMode;

/// Sufficient statistics of a click record: how many trials saw each
/// detector, pair and triple fire. A coincidence is co-occurrence within
/// one trial; repeated clicks of one detector in a trial count once.
///
/// In split mode `n2` and `n12` refer to "either arm fired".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountTable {
    pub mode: DetectionMode,
    pub n_trials: u64,
    pub n1: u64,
    pub n2: u64,
    pub n12: u64,
    pub n2a: u64,
    pub n2b: u64,
    pub n2a_2b: u64,
    pub n1_2a: u64,
    pub n1_2b: u64,
    pub n1_2a_2b: u64,
}

impl CountTable {
    pub fn new(mode: DetectionMode) -> Self {
        Self::with_trials(mode, 0)
    }

    /// Empty counts over `n_trials` trials, to be filled from records
    /// (which only mention trials where something fired).
    pub fn with_trials(mode: DetectionMode, n_trials: u64) -> Self {
        CountTable {
            mode,
            n_trials,
            n1: 0,
            n2: 0,
            n12: 0,
            n2a: 0,
            n2b: 0,
            n2a_2b: 0,
            n1_2a: 0,
            n1_2b: 0,
            n1_2a_2b: 0,
        }
    }

    /// Adds one trial with the given clicks.
    pub fn add_trial(&mut self, clicks: ClickSet) {
        self.n_trials += 1;
        self.count_clicks(clicks);
    }

    pub(crate) fn count_clicks(&mut self, c: ClickSet) {
        let d1 = c.contains(DetectorId::D1);
        let (a, b) = (c.contains(DetectorId::D2a), c.contains(DetectorId::D2b));
        let d2 = match self.mode {
            DetectionMode::Single => c.contains(DetectorId::D2),
            DetectionMode::Split => a || b,
        };
        self.n1 += d1 as u64;
        self.n2 += d2 as u64;
        self.n12 += (d1 && d2) as u64;
        if self.mode == DetectionMode::Split {
            self.n2a += a as u64;
            self.n2b += b as u64;
            self.n2a_2b += (a && b) as u64;
            self.n1_2a += (d1 && a) as u64;
            self.n1_2b += (d1 && b) as u64;
            self.n1_2a_2b += (d1 && a && b) as u64;
        }
    }

    /// Componentwise sum of two tables over disjoint trial ranges.
    pub fn merge(&self, other: &CountTable) -> Result<CountTable> {
        if self.mode != other.mode {
            return Err(Error::ModeMismatch(format!(
                "cannot merge {} table with {} table",
                self.mode, other.mode
            )));
        }
        Ok(CountTable {
            mode: self.mode,
            n_trials: self.n_trials + other.n_trials,
            n1: self.n1 + other.n1,
            n2: self.n2 + other.n2,
            n12: self.n12 + other.n12,
            n2a: self.n2a + other.n2a,
            n2b: self.n2b + other.n2b,
            n2a_2b: self.n2a_2b + other.n2a_2b,
            n1_2a: self.n1_2a + other.n1_2a,
            n1_2b: self.n1_2b + other.n1_2b,
            n1_2a_2b: self.n1_2a_2b + other.n1_2a_2b,
        })
    }

    /// Named counts in report order.
    pub fn named_counts(&self) -> Vec<(&'static str, u64)> {
        let mut out = vec![("n1", self.n1), ("n2", self.n2), ("n12", self.n12)];
        if self.mode == DetectionMode::Split {
            out.extend([
                ("n2a", self.n2a),
                ("n2b", self.n2b),
                ("n2a_2b", self.n2a_2b),
                ("n1_2a", self.n1_2a),
                ("n1_2b", self.n1_2b),
                ("n1_2a_2b", self.n1_2a_2b),
            ]);
        }
        out
    }

    /// Number of trials showing each exact click pattern. Single mode has
    /// 4 patterns (bit 0 = D1, bit 1 = D2); split mode has 8 (bit 0 = D1,
    /// bit 1 = D2a, bit 2 = D2b).
    pub fn pattern_counts(&self) -> Vec<u64> {
        let n = self.n_trials as i128;
        let c = |x: u64| x as i128;
        let pats: Vec<i128> = match self.mode {
            DetectionMode::Single => {
                let p11 = c(self.n12);
                let p01 = c(self.n1) - p11;
                let p10 = c(self.n2) - p11;
                vec![n - p01 - p10 - p11, p01, p10, p11]
            }
            DetectionMode::Split => {
                let p111 = c(self.n1_2a_2b);
                let p_1a = c(self.n1_2a) - p111;
                let p_1b = c(self.n1_2b) - p111;
                let p_ab = c(self.n2a_2b) - p111;
                let p_1 = c(self.n1) - p_1a - p_1b - p111;
                let p_a = c(self.n2a) - p_1a - p_ab - p111;
                let p_b = c(self.n2b) - p_1b - p_ab - p111;
                let rest = n - p_1 - p_a - p_b - p_1a - p_1b - p_ab - p111;
                // index = D1 | D2a << 1 | D2b << 2
                vec![rest, p_1, p_a, p_1a, p_b, p_1b, p_ab, p111]
            }
        };
        pats.into_iter()
            .map(|v| u64::try_from(v).expect("inconsistent count table"))
            .collect()
    }

    /// Inverse of [`pattern_counts`](Self::pattern_counts).
    pub fn from_pattern_counts(mode: DetectionMode, pats: &[u64]) -> CountTable {
        let mut t = CountTable::new(mode);
        t.n_trials = pats.iter().sum();
        let sum = |pred: &dyn Fn(usize) -> bool| -> u64 {
            pats.iter().enumerate().filter(|(i, _)| pred(*i)).map(|(_, v)| *v).sum()
        };
        let d1 = |i: usize| i & 1 == 1;
        match mode {
            DetectionMode::Single => {
                assert_eq!(pats.len(), 4);
                let d2 = |i: usize| i & 2 == 2;
                t.n1 = sum(&d1);
                t.n2 = sum(&d2);
                t.n12 = sum(&|i| d1(i) && d2(i));
            }
            DetectionMode::Split => {
                assert_eq!(pats.len(), 8);
                let a = |i: usize| i & 2 == 2;
                let b = |i: usize| i & 4 == 4;
                t.n1 = sum(&d1);
                t.n2 = sum(&|i| a(i) || b(i));
                t.n12 = sum(&|i| d1(i) && (a(i) || b(i)));
                t.n2a = sum(&a);
                t.n2b = sum(&b);
                t.n2a_2b = sum(&|i| a(i) && b(i));
                t.n1_2a = sum(&|i| d1(i) && a(i));
                t.n1_2b = sum(&|i| d1(i) && b(i));
                t.n1_2a_2b = sum(&|i| d1(i) && a(i) && b(i));
            }
        }
        t
    }

    /// One-row CSV dump of the table.
    pub fn to_csv_string(&self) -> String {
        let counts = self.named_counts();
        let mut header = vec!["mode".to_string(), "n_trials".to_string()];
        header.extend(counts.iter().map(|(k, _)| k.to_string()));
        let mut row = vec![self.mode.to_string(), self.n_trials.to_string()];
        row.extend(counts.iter().map(|(_, v)| v.to_string()));
        format!("{}\n{}\n", header.join(","), row.join(","))
    }
}

/// Streaming ingestion of records grouped by trial.
#[derive(Debug, Clone)]
pub struct Correlator {
    table: CountTable,
    current: Option<(u64, ClickSet)>,
    last_trial: Option<u64>,
}

impl Correlator {
    pub fn new(table: CountTable) -> Self {
        Correlator {
            table,
            current: None,
            last_trial: None,
        }
    }

    pub fn push(&mut self, r: &DetectionRecord) -> Result<()> {
        if !r.detector.belongs_to(self.table.mode) {
            return Err(Error::ModeMismatch(format!(
                "{} record in a {} table (trial {})",
                r.detector, self.table.mode, r.trial_index
            )));
        }
        if r.trial_index >= self.table.n_trials {
            return Err(Error::Domain(format!(
                "record for trial {} but the table covers {} trials",
                r.trial_index, self.table.n_trials
            )));
        }
        match &mut self.current {
            Some((t, clicks)) if *t == r.trial_index => clicks.insert(r.detector),
            _ => {
                if let Some(last) = self.last_trial {
                    if r.trial_index <= last {
                        return Err(Error::Domain(format!(
                            "records not grouped by trial: trial {} after trial {last}",
                            r.trial_index
                        )));
                    }
                }
                self.flush();
                let mut clicks = ClickSet::EMPTY;
                clicks.insert(r.detector);
                self.current = Some((r.trial_index, clicks));
                self.last_trial = Some(r.trial_index);
            }
        }
        Ok(())
    }

    fn flush(&mut self) {
        if let Some((_, clicks)) = self.current.take() {
            self.table.count_clicks(clicks);
        }
    }

    pub fn finish(mut self) -> CountTable {
        self.flush();
        self.table
    }
}

/// Adds the clicks in `records` to `table`. Records must be grouped by
/// trial and fall inside `0..table.n_trials`.
pub fn accumulate<'a, I>(table: CountTable, records: I) -> Result<CountTable>
where
    I: IntoIterator<Item = &'a DetectionRecord>,
{
    let mut c = Correlator::new(table);
    for r in records {
        c.push(r)?;
    }
    Ok(c.finish())
}

/// Like [`accumulate`] over a fallible record source such as a file reader.
pub fn accumulate_results<I>(table: CountTable, records: I) -> Result<CountTable>
where
    I: IntoIterator<Item = Result<DetectionRecord>>,
{
    let mut c = Correlator::new(table);
    for r in records {
        c.push(&r?)?;
    }
    Ok(c.finish())
}

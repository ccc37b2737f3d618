use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::{format_float, KvDocument};

/// Cyclic acquisition timing: MOT cycles at `mot_rate_hz`, each opening a
/// `window_ms` window that holds `trials_per_window` write/read trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialSchedule {
    pub mot_rate_hz: f64,
    pub window_ms: f64,
    pub trials_per_window: u32,
    pub trial_period_ns: u32,
    pub read_delay_ns: u32,
    pub write_offset_ns: u32,
}

impl Default for TrialSchedule {
    fn default() -> Self {
        TrialSchedule {
            mot_rate_hz: 40.0,
            window_ms: 5.0,
            trials_per_window: 1100,
            trial_period_ns: 2000,
            read_delay_ns: 300,
            write_offset_ns: 0,
        }
    }
}

pub const SCHEDULE_KEYS: [&str; 6] = [
    "mot_rate_hz",
    "window_ms",
    "trials_per_window",
    "trial_period_ns",
    "read_delay_ns",
    "write_offset_ns",
];

impl TrialSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.mot_rate_hz.is_finite() && self.mot_rate_hz > 0.0) {
            return Err(Error::param("mot_rate_hz", "must be > 0"));
        }
        if !(self.window_ms.is_finite() && self.window_ms > 0.0) {
            return Err(Error::param("window_ms", "must be > 0"));
        }
        if self.window_ms * 1e6 > self.cycle_ns() as f64 {
            return Err(Error::param("window_ms", "window longer than the MOT cycle"));
        }
        if self.trials_per_window == 0 {
            return Err(Error::param("trials_per_window", "must be >= 1"));
        }
        if self.trial_period_ns == 0 {
            return Err(Error::param("trial_period_ns", "must be >= 1"));
        }
        let active = self.trials_per_window as f64 * self.trial_period_ns as f64;
        if active > self.window_ms * 1e6 {
            return Err(Error::param(
                "trials_per_window",
                "trials do not fit in the acquisition window",
            ));
        }
        if self.write_offset_ns as u64 + self.read_delay_ns as u64 >= self.trial_period_ns as u64 {
            return Err(Error::param("read_delay_ns", "read pulse falls outside the trial"));
        }
        Ok(())
    }

    /// Length of one MOT cycle in ns.
    pub fn cycle_ns(&self) -> u64 {
        (1e9 / self.mot_rate_hz).round() as u64
    }

    pub fn trials_per_second(&self) -> f64 {
        self.mot_rate_hz * self.trials_per_window as f64
    }

    /// Absolute start time of trial `t`, counted from the first window.
    pub fn trial_start_ns(&self, t: u64) -> u64 {
        let tpw = self.trials_per_window as u64;
        (t / tpw) * self.cycle_ns() + (t % tpw) * self.trial_period_ns as u64
    }

    /// Schedule time covered by `n_trials` trials, in whole MOT cycles.
    pub fn duration_ns(&self, n_trials: u64) -> u64 {
        n_trials.div_ceil(self.trials_per_window as u64) * self.cycle_ns()
    }

    /// Whether absolute time `t_ns` lies inside an acquisition window.
    pub fn in_active_window(&self, t_ns: u64) -> bool {
        (t_ns % self.cycle_ns()) as f64 <= self.window_ms * 1e6
    }

    pub fn field1_offset_ns(&self) -> u32 {
        self.write_offset_ns
    }

    pub fn field2_offset_ns(&self) -> u32 {
        self.write_offset_ns + self.read_delay_ns
    }

    pub fn from_document(doc: &KvDocument) -> Result<Self> {
        let mut s = TrialSchedule::default();
        if let Some(v) = doc.number("mot_rate_hz")? {
            s.mot_rate_hz = v;
        }
        if let Some(v) = doc.number("window_ms")? {
            s.window_ms = v;
        }
        let int = |key: &str, slot: &mut u32| -> Result<()> {
            if let Some(v) = doc.integer(key)? {
                *slot = u32::try_from(v).map_err(|_| Error::param(key, "out of range"))?;
            }
            Ok(())
        };
        int("trials_per_window", &mut s.trials_per_window)?;
        int("trial_period_ns", &mut s.trial_period_ns)?;
        int("read_delay_ns", &mut s.read_delay_ns)?;
        int("write_offset_ns", &mut s.write_offset_ns)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_document_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mot_rate_hz = {}", format_float(self.mot_rate_hz));
        let _ = writeln!(out, "window_ms = {}", format_float(self.window_ms));
        let _ = writeln!(out, "trials_per_window = {}", self.trials_per_window);
        let _ = writeln!(out, "trial_period_ns = {}", self.trial_period_ns);
        let _ = writeln!(out, "read_delay_ns = {}", self.read_delay_ns);
        let _ = writeln!(out, "write_offset_ns = {}", self.write_offset_ns);
        out
    }
}

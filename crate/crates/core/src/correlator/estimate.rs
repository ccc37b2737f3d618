//! Plug-in estimates of the figures of merit with standard errors.
//!
//! Every metric is a product of powers of click probabilities, each of which
//! is a sum over trial click patterns. Trials are i.i.d., so the pattern
//! counts are multinomial; the delta method and the bootstrap both work on
//! that multinomial.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_distr::{Binomial, Distribution};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use super::CountTable;
use crate::error::{Error, Result};
use crate::kv::format_float;
use crate::params::DetectionMode;
use crate::photon_model::Metrics;

/// Counts below this make the corresponding error bars unreliable.
pub const LOW_COUNT: u64 = 10;

pub const DEFAULT_BOOTSTRAP_REPLICATES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "method")]
pub enum ErrorMethod {
    Delta,
    Bootstrap { replicates: usize, seed: u64 },
}

impl ErrorMethod {
    pub fn name(&self) -> &'static str {
        match self {
            ErrorMethod::Delta => "delta",
            ErrorMethod::Bootstrap { .. } => "bootstrap",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    /// `None` when a denominator count is zero.
    pub value: Option<f64>,
    pub se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsWithErrors {
    pub mode: DetectionMode,
    pub n_trials: u64,
    pub eta2: f64,
    pub method: ErrorMethod,
    pub p1: Estimate,
    pub p2: Estimate,
    pub p12: Estimate,
    pub g12: Estimate,
    pub pc: Estimate,
    pub qc: Estimate,
    pub w: Estimate,
    pub naive_ratio: Estimate,
    /// Names of the counts that fell below [`LOW_COUNT`].
    pub low_counts: Vec<String>,
}

/// `scale * prod_k P_k^e_k`, where `P_k` sums the pattern probabilities in
/// `factors[k].0` (a bit mask over pattern indices).
struct Formula {
    factors: Vec<(u8, i32)>,
    scale: f64,
}

fn mask(n_patterns: usize, pred: impl Fn(usize) -> bool) -> u8 {
    (0..n_patterns).filter(|&i| pred(i)).fold(0u8, |m, i| m | (1 << i))
}

fn masked_sum(m: u8, probs: &[f64]) -> f64 {
    probs
        .iter()
        .enumerate()
        .filter(|(i, _)| m & (1 << i) != 0)
        .map(|(_, p)| p)
        .sum()
}

impl Formula {
    fn factor_values(&self, probs: &[f64]) -> Vec<f64> {
        self.factors.iter().map(|(m, _)| masked_sum(*m, probs)).collect()
    }

    fn eval(&self, probs: &[f64]) -> Option<f64> {
        let vals = self.factor_values(probs);
        let mut out = self.scale;
        for ((_, e), v) in self.factors.iter().zip(&vals) {
            if *e < 0 && *v <= 0.0 {
                return None;
            }
            out *= v.powi(*e);
        }
        Some(out)
    }

    /// Value with factor `skip` left out.
    fn partial(&self, vals: &[f64], skip: usize) -> f64 {
        self.factors
            .iter()
            .zip(vals)
            .enumerate()
            .filter(|(k, _)| *k != skip)
            .fold(self.scale, |acc, (_, ((_, e), v))| acc * v.powi(*e))
    }

    /// Delta-method standard error under multinomial sampling of `n` trials.
    /// A numerator with zero observed events gets the error of a single
    /// event, `1/n`, rather than a degenerate zero.
    fn delta_se(&self, probs: &[f64], n: u64) -> Option<f64> {
        self.eval(probs)?;
        let nf = n as f64;
        let vals = self.factor_values(probs);
        if let Some(k) = vals.iter().position(|v| *v == 0.0) {
            return Some(self.partial(&vals, k).abs() / nf);
        }
        // d value / d pi_p
        let grad: Vec<f64> = (0..probs.len())
            .map(|p| {
                self.factors
                    .iter()
                    .zip(&vals)
                    .enumerate()
                    .filter(|(_, ((m, _), _))| m & (1 << p) != 0)
                    .map(|(k, ((_, e), v))| *e as f64 * self.partial(&vals, k) * v.powi(*e - 1))
                    .sum()
            })
            .collect();
        let mean: f64 = probs.iter().zip(&grad).map(|(p, g)| p * g).sum();
        let second: f64 = probs.iter().zip(&grad).map(|(p, g)| p * g * g).sum();
        Some(((second - mean * mean).max(0.0) / nf).sqrt())
    }
}

struct FormulaSet {
    p1: Formula,
    p2: Formula,
    p12: Formula,
    g12: Formula,
    pc: Formula,
    qc: Formula,
    w: Option<Formula>,
    naive: Formula,
}

fn formulas(mode: DetectionMode, eta2: f64) -> FormulaSet {
    let np = match mode {
        DetectionMode::Single => 4,
        DetectionMode::Split => 8,
    };
    let d1 = mask(np, |i| i & 1 == 1);
    let d2 = mask(np, |i| i & 6 != 0);
    let d12 = d1 & d2;
    let f = |factors: Vec<(u8, i32)>| Formula { factors, scale: 1.0 };
    let w = (mode == DetectionMode::Split).then(|| {
        let a = mask(np, |i| i & 2 != 0);
        let b = mask(np, |i| i & 4 != 0);
        f(vec![(d1, 1), (d1 & a & b, 1), (d1 & a, -1), (d1 & b, -1)])
    });
    FormulaSet {
        p1: f(vec![(d1, 1)]),
        p2: f(vec![(d2, 1)]),
        p12: f(vec![(d12, 1)]),
        g12: f(vec![(d12, 1), (d1, -1), (d2, -1)]),
        pc: f(vec![(d12, 1), (d1, -1)]),
        qc: Formula {
            factors: vec![(d12, 1), (d1, -1)],
            scale: 1.0 / eta2,
        },
        w,
        naive: f(vec![(d2, 1), (d1, -1)]),
    }
}

impl FormulaSet {
    fn all(&self) -> [Option<&Formula>; 8] {
        [
            Some(&self.p1),
            Some(&self.p2),
            Some(&self.p12),
            Some(&self.g12),
            Some(&self.pc),
            Some(&self.qc),
            self.w.as_ref(),
            Some(&self.naive),
        ]
    }
}

/// Draws one multinomial resample of `n` trials over the pattern
/// probabilities, equivalent to resampling whole trials with replacement.
fn multinomial<R: rand::Rng>(n: u64, probs: &[f64], rng: &mut R) -> Vec<u64> {
    let mut out = vec![0u64; probs.len()];
    let mut left_n = n;
    let mut left_p = 1.0f64;
    for (i, p) in probs.iter().enumerate() {
        if left_n == 0 {
            break;
        }
        if i + 1 == probs.len() || left_p <= 0.0 {
            out[i] = left_n;
            break;
        }
        let q = (p / left_p).clamp(0.0, 1.0);
        let k = Binomial::new(left_n, q).expect("valid binomial").sample(rng);
        out[i] = k;
        left_n -= k;
        left_p -= p;
    }
    out
}

fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    Some((xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// Delta-method estimates; see [`estimate_metrics_with`].
pub fn estimate_metrics(table: &CountTable, eta2: f64) -> Result<MetricsWithErrors> {
    estimate_metrics_with(table, eta2, ErrorMethod::Delta)
}

/// Probabilities are count ratios over `n_trials`; `w` reduces to
/// `N1 N1_2a_2b / (N1_2a N1_2b)` once the trial counts cancel.
pub fn estimate_metrics_with(table: &CountTable, eta2: f64, method: ErrorMethod) -> Result<MetricsWithErrors> {
    if table.n_trials == 0 {
        return Err(Error::Domain("cannot estimate from zero trials".into()));
    }
    if !(eta2 > 0.0 && eta2 <= 1.0) {
        return Err(Error::param("eta2", "must lie in (0, 1]"));
    }
    let n = table.n_trials;
    let pats = table.pattern_counts();
    let probs: Vec<f64> = pats.iter().map(|&c| c as f64 / n as f64).collect();
    let fs = formulas(table.mode, eta2);
    let values: Vec<Option<f64>> = fs.all().iter().map(|f| f.and_then(|f| f.eval(&probs))).collect();

    let ses: Vec<Option<f64>> = match method {
        ErrorMethod::Delta => fs.all().iter().map(|f| f.and_then(|f| f.delta_se(&probs, n))).collect(),
        ErrorMethod::Bootstrap { replicates, seed } => {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
            let mut draws: Vec<Vec<f64>> = (0..8).map(|_| Vec::with_capacity(replicates)).collect();
            for _ in 0..replicates {
                let resample = multinomial(n, &probs, &mut rng);
                let rp: Vec<f64> = resample.iter().map(|&c| c as f64 / n as f64).collect();
                for (slot, f) in draws.iter_mut().zip(fs.all()) {
                    if let Some(v) = f.and_then(|f| f.eval(&rp)) {
                        slot.push(v);
                    }
                }
            }
            draws.iter().zip(&values).map(|(d, v)| v.and(sample_std(d))).collect()
        }
    };

    let est = |i: usize| Estimate {
        value: values[i],
        se: ses[i],
    };
    let low_counts = table
        .named_counts()
        .into_iter()
        .filter(|(_, c)| *c < LOW_COUNT)
        .map(|(k, _)| k.to_string())
        .collect();
    Ok(MetricsWithErrors {
        mode: table.mode,
        n_trials: n,
        eta2,
        method,
        p1: est(0),
        p2: est(1),
        p12: est(2),
        g12: est(3),
        pc: est(4),
        qc: est(5),
        w: est(6),
        naive_ratio: est(7),
        low_counts,
    })
}

impl MetricsWithErrors {
    pub fn metrics(&self) -> Metrics {
        Metrics {
            g12: self.g12.value,
            w: self.w.value,
            pc: self.pc.value,
            qc: self.qc.value,
            p12: self.p12.value.unwrap_or(0.0),
            naive_ratio: self.naive_ratio.value,
        }
    }

    pub fn named(&self) -> [(&'static str, Estimate); 8] {
        [
            ("p1", self.p1),
            ("p2", self.p2),
            ("p12", self.p12),
            ("g12", self.g12),
            ("pc", self.pc),
            ("qc", self.qc),
            ("w", self.w),
            ("naive_ratio", self.naive_ratio),
        ]
    }

    /// Flat `key = value` report; undefined entries are the string
    /// `"undefined"`.
    pub fn to_report_string(&self, table: &CountTable) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mode = \"{}\"", self.mode);
        let _ = writeln!(out, "n_trials = {}", self.n_trials);
        let _ = writeln!(out, "eta2 = {}", format_float(self.eta2));
        let _ = writeln!(out, "error_method = \"{}\"", self.method.name());
        if let ErrorMethod::Bootstrap { replicates, seed } = self.method {
            let _ = writeln!(out, "bootstrap_replicates = {replicates}");
            let _ = writeln!(out, "bootstrap_seed = {seed}");
        }
        for (k, v) in table.named_counts() {
            let _ = writeln!(out, "{k} = {v}");
        }
        let fmt = |x: Option<f64>| x.map(format_float).unwrap_or_else(|| "\"undefined\"".into());
        for (name, e) in self.named() {
            if name == "w" && self.mode == DetectionMode::Single {
                continue;
            }
            let _ = writeln!(out, "{name} = {}", fmt(e.value));
            let _ = writeln!(out, "{name}_se = {}", fmt(e.se));
        }
        let lows: Vec<String> = self.low_counts.iter().map(|k| format!("\"{k}\"")).collect();
        let _ = writeln!(out, "low_counts = [{}]", lows.join(", "));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_table(n: u64, n1: u64, n2: u64, n12: u64) -> CountTable {
        CountTable {
            n_trials: n,
            n1,
            n2,
            n12,
            ..CountTable::new(DetectionMode::Single)
        }
    }

    #[test]
    fn tiny_table_arithmetic() {
        let m = estimate_metrics(&single_table(10, 2, 2, 1), 0.25).unwrap();
        assert_eq!(m.g12.value, Some(2.5));
        assert_eq!(m.pc.value, Some(0.5));
        assert_eq!(m.qc.value, Some(2.0));
        assert_eq!(m.p1.value, Some(0.2));
        assert!(m.low_counts.contains(&"n12".to_string()));
    }

    #[test]
    fn zero_coincidences_give_zero_with_flag() {
        let m = estimate_metrics(&single_table(1000, 20, 30, 0), 0.25).unwrap();
        assert_eq!(m.g12.value, Some(0.0));
        assert!(m.g12.se.unwrap() > 0.0);
        assert!(m.low_counts.contains(&"n12".to_string()));
    }

    #[test]
    fn zero_heralds_make_conditionals_undefined() {
        let m = estimate_metrics(&single_table(1000, 0, 30, 0), 0.25).unwrap();
        assert_eq!(m.g12.value, None);
        assert_eq!(m.pc.value, None);
        assert_eq!(m.qc.value, None);
        assert_eq!(m.g12.se, None);
        let report = m.to_report_string(&single_table(1000, 0, 30, 0));
        assert!(report.contains("g12 = \"undefined\""));
        crate::kv::KvDocument::parse(&report).unwrap();
    }

    #[test]
    fn zero_trials_is_an_error() {
        assert!(estimate_metrics(&CountTable::new(DetectionMode::Single), 0.25).is_err());
    }

    #[test]
    fn single_probability_delta_se_is_binomial() {
        let m = estimate_metrics(&single_table(10_000, 400, 300, 50), 0.25).unwrap();
        let p: f64 = 0.04;
        assert!((m.p1.se.unwrap() - (p * (1.0 - p) / 1e4).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn g12_delta_se_matches_finite_difference_propagation() {
        // independent check: numerically differentiate g12 with respect to the
        // four pattern probabilities and propagate the multinomial covariance
        let t = single_table(100_000, 3000, 2000, 400);
        let pats = t.pattern_counts();
        let n = t.n_trials as f64;
        let probs: Vec<f64> = pats.iter().map(|&c| c as f64 / n).collect();
        let g = |p: &[f64]| {
            let p1 = p[1] + p[3];
            let p2 = p[2] + p[3];
            p[3] / (p1 * p2)
        };
        let grad: Vec<f64> = (0..4)
            .map(|i| {
                let h = 1e-7;
                let mut up = probs.clone();
                let mut dn = probs.clone();
                up[i] += h;
                dn[i] -= h;
                (g(&up) - g(&dn)) / (2.0 * h)
            })
            .collect();
        let mut var = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                let cov = if i == j {
                    probs[i] * (1.0 - probs[i])
                } else {
                    -probs[i] * probs[j]
                };
                var += grad[i] * grad[j] * cov;
            }
        }
        let expected = (var / n).sqrt();
        let m = estimate_metrics(&t, 0.25).unwrap();
        assert!((m.g12.se.unwrap() / expected - 1.0).abs() < 1e-5);
    }

    #[test]
    fn bootstrap_is_seeded() {
        let t = single_table(100_000, 3000, 2000, 400);
        let method = ErrorMethod::Bootstrap {
            replicates: 200,
            seed: 9,
        };
        let a = estimate_metrics_with(&t, 0.25, method).unwrap();
        let b = estimate_metrics_with(&t, 0.25, method).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn delta_and_bootstrap_agree_on_large_counts() {
        let counts = [
            ([false, false, false], 500_000u64),
            ([true, false, false], 20_000),
            ([false, true, false], 3_000),
            ([false, false, true], 3_000),
            ([true, true, false], 2_000),
            ([true, false, true], 2_000),
            ([false, true, true], 300),
            ([true, true, true], 150),
        ];
        let pats: Vec<u64> = {
            let mut v = vec![0u64; 8];
            for (bits, c) in counts {
                let idx = bits[0] as usize | (bits[1] as usize) << 1 | (bits[2] as usize) << 2;
                v[idx] = c;
            }
            v
        };
        let t = CountTable::from_pattern_counts(DetectionMode::Split, &pats);
        let delta = estimate_metrics(&t, 0.2).unwrap();
        let boot = estimate_metrics_with(
            &t,
            0.2,
            ErrorMethod::Bootstrap {
                replicates: 1000,
                seed: 1,
            },
        )
        .unwrap();
        for ((name, d), (_, b)) in delta.named().iter().zip(boot.named()) {
            let (d, b) = (d.se.unwrap(), b.se.unwrap());
            assert!((b / d - 1.0).abs() < 0.2, "{name}: delta {d} bootstrap {b}");
        }
    }

    #[test]
    fn w_from_counts() {
        let pats = [1000u64, 50, 20, 10, 20, 10, 4, 2];
        let t = CountTable::from_pattern_counts(DetectionMode::Split, &pats);
        let m = estimate_metrics(&t, 0.2).unwrap();
        let expect = t.n1 as f64 * t.n1_2a_2b as f64 / (t.n1_2a as f64 * t.n1_2b as f64);
        assert!((m.w.value.unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn plug_in_identities_in_exact_arithmetic() {
        use num_rational::Ratio;
        let n = 1000i64;
        let t = CountTable::from_pattern_counts(DetectionMode::Split, &[900, 40, 15, 13, 12, 11, 6, 3]);
        let r = |c: u64| Ratio::new(c as i64, n);
        // w from probabilities, before any cancellation
        let w_prob = r(t.n1) * r(t.n1_2a_2b) / (r(t.n1_2a) * r(t.n1_2b));
        let w_counts = Ratio::new((t.n1 * t.n1_2a_2b) as i64, (t.n1_2a * t.n1_2b) as i64);
        assert_eq!(w_prob, w_counts);
        let g_prob = r(t.n12) / (r(t.n1) * r(t.n2));
        let g_counts = Ratio::new(t.n12 as i64 * n, (t.n1 * t.n2) as i64);
        assert_eq!(g_prob, g_counts);
        assert_eq!(t.n_trials, n as u64);
        let m = estimate_metrics(&t, 0.2).unwrap();
        let to_f = |q: Ratio<i64>| *q.numer() as f64 / *q.denom() as f64;
        assert!((m.w.value.unwrap() - to_f(w_counts)).abs() < 1e-15);
        assert!((m.g12.value.unwrap() - to_f(g_counts)).abs() < 1e-12);

        let tiny = Ratio::new(1i64, 10) / (Ratio::new(2i64, 10) * Ratio::new(2i64, 10));
        assert_eq!(tiny, Ratio::new(5i64, 2));
    }
}

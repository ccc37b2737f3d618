//! Exact click statistics of a two-mode squeezed pair source with Poisson
//! backgrounds and binomial-loss click detectors.
//!
//! The closed forms follow from the pair-number generating function
//! `E[x^n1 y^n2] = (1 - chi) / (1 - chi x y)`. Detector `D` clicks iff a pair
//! photon or a background count reaches it, and backgrounds are independent
//! of each other and of the pairs, so
//!
//! ```text
//! P(all of T click) = sum_{R subset T} prod_{D in R} (1 - s_D) prod_{D in T\R} s_D Q(T\R)
//! ```
//!
//! where `s_D = exp(-b_D)` and `Q(U)` is the probability that pair photons
//! alone reach every detector in `U`. Every term is non-negative and each
//! `Q` is evaluated as a product of positive factors, so tiny triple
//! probabilities keep their relative precision (plain inclusion-exclusion
//! over no-click probabilities does not).

mod oracle;

pub use oracle::{brute_force_statistics, BruteForce, DEFAULT_NMAX, TAIL_WARNING};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Channel, ChannelModel, DetectionConfig, DetectionMode, Field2Channels, ModelParams};

/// Generating function `E[x^n1 y^n2]` of the two-mode squeezed state.
pub fn tmss_pgf(chi: f64, x: f64, y: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&chi) {
        return Err(Error::Domain(format!("chi = {chi} outside [0, 1)")));
    }
    if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
        return Err(Error::Domain(format!("pgf arguments ({x}, {y}) outside [0, 1]")));
    }
    Ok((1.0 - chi) / (1.0 - chi * x * y))
}

/// Per-trial click probabilities.
///
/// `p2`/`p12` refer to the single field-2 detector in single mode and to the
/// merged arms (`D2a or D2b`) in split mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Statistics {
    pub mode: DetectionMode,
    pub p1: f64,
    pub p2: f64,
    pub p12: f64,
    pub split: Option<SplitStatistics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitStatistics {
    pub p2a: f64,
    pub p2b: f64,
    pub p2a_2b: f64,
    pub p1_2a: f64,
    pub p1_2b: f64,
    pub p1_2a_2b: f64,
}

impl Statistics {
    /// Named fields, in a fixed order, for componentwise comparisons.
    pub fn fields(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![("p1", self.p1), ("p2", self.p2), ("p12", self.p12)];
        if let Some(s) = &self.split {
            out.extend([
                ("p2a", s.p2a),
                ("p2b", s.p2b),
                ("p2a_2b", s.p2a_2b),
                ("p1_2a", s.p1_2a),
                ("p1_2b", s.p1_2b),
                ("p1_2a_2b", s.p1_2a_2b),
            ]);
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Statistics) -> f64 {
        self.fields()
            .iter()
            .zip(other.fields())
            .map(|((_, a), (_, b))| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Figures of merit. `None` marks an undefined value: a zero denominator, or
/// `w` in single mode where no triple coincidences exist.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub g12: Option<f64>,
    pub w: Option<f64>,
    pub pc: Option<f64>,
    pub qc: Option<f64>,
    pub p12: f64,
    pub naive_ratio: Option<f64>,
}

pub(crate) fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

// Pair-only arrival probabilities. `a` is the field-1 registration probability
// of one photon, `r*` the field-2 ones.

fn pair_q1(chi: f64, a: f64) -> f64 {
    chi * a / ((1.0 - chi) + chi * a)
}

fn pair_q12(chi: f64, a: f64, r: f64) -> f64 {
    let c = 1.0 - chi;
    let x = 1.0 - a;
    let y = 1.0 - r;
    chi * a * r * (1.0 - chi * chi * x * y) / ((c + chi * a) * (c + chi * r) * (c + chi * (a + r - a * r)))
}

fn pair_qab(chi: f64, ra: f64, rb: f64) -> f64 {
    let c = 1.0 - chi;
    let u = chi * ra;
    let v = chi * rb;
    u * v * (2.0 * c + u + v) / ((c + u) * (c + v) * (c + u + v))
}

/// `sum_n t^n P(both arms hit | n)`.
fn arms_series(t: f64, ra: f64, rb: f64) -> f64 {
    let c = 1.0 - t;
    t * t * ra * rb * (2.0 * c + t * (ra + rb)) / (c * (c + t * ra) * (c + t * rb) * (c + t * (ra + rb)))
}

fn pair_q1ab(chi: f64, a: f64, ra: f64, rb: f64) -> f64 {
    let v = (1.0 - chi) * (arms_series(chi, ra, rb) - arms_series(chi * (1.0 - a), ra, rb));
    v.max(0.0)
}

fn single_click(ch: &Channel, q: f64) -> f64 {
    ch.bg_click() + ch.bg_silent() * q
}

fn pair_click(c1: &Channel, c2: &Channel, q1: f64, q2: f64, q12: f64) -> f64 {
    let (b1, s1) = (c1.bg_click(), c1.bg_silent());
    let (b2, s2) = (c2.bg_click(), c2.bg_silent());
    b1 * b2 + b1 * s2 * q2 + s1 * b2 * q1 + s1 * s2 * q12
}

/// Exact per-trial click probabilities.
pub fn click_statistics(params: &ModelParams, config: &DetectionConfig) -> Result<Statistics> {
    params.validate()?;
    Ok(channel_statistics(&ChannelModel::new(params, config)))
}

/// `p1` alone, without the field-2 terms.
pub(crate) fn herald_probability(m: &ChannelModel) -> f64 {
    single_click(&m.d1, pair_q1(m.chi, m.d1.pair_prob))
}

pub(crate) fn channel_statistics(m: &ChannelModel) -> Statistics {
    let chi = m.chi;
    let d1 = &m.d1;
    let q1 = pair_q1(chi, d1.pair_prob);
    let p1 = single_click(d1, q1);

    let f2 = m.field2_combined();
    let q2 = pair_q1(chi, f2.pair_prob);
    let q12 = pair_q12(chi, d1.pair_prob, f2.pair_prob);
    let p2 = single_click(&f2, q2);
    let p12 = pair_click(d1, &f2, q1, q2, q12);

    let split = match m.field2 {
        Field2Channels::Single(_) => None,
        Field2Channels::Split { a, b } => {
            let qa = pair_q1(chi, a.pair_prob);
            let qb = pair_q1(chi, b.pair_prob);
            let q1a = pair_q12(chi, d1.pair_prob, a.pair_prob);
            let q1b = pair_q12(chi, d1.pair_prob, b.pair_prob);
            let qab = pair_qab(chi, a.pair_prob, b.pair_prob);
            let q1ab = pair_q1ab(chi, d1.pair_prob, a.pair_prob, b.pair_prob);

            let (b1, s1) = (d1.bg_click(), d1.bg_silent());
            let (ba, sa) = (a.bg_click(), a.bg_silent());
            let (bb, sb) = (b.bg_click(), b.bg_silent());
            let p1_2a_2b = b1 * ba * bb
                + s1 * ba * bb * q1
                + b1 * sa * bb * qa
                + b1 * ba * sb * qb
                + s1 * sa * bb * q1a
                + s1 * ba * sb * q1b
                + b1 * sa * sb * qab
                + s1 * sa * sb * q1ab;

            Some(SplitStatistics {
                p2a: single_click(&a, qa),
                p2b: single_click(&b, qb),
                p2a_2b: pair_click(&a, &b, qa, qb, qab),
                p1_2a: pair_click(d1, &a, q1, qa, q1a),
                p1_2b: pair_click(d1, &b, q1, qb, q1b),
                p1_2a_2b,
            })
        }
    };

    Statistics {
        mode: m.mode(),
        p1,
        p2,
        p12,
        split,
    }
}

/// Figures of merit from click probabilities. `qc` refers `pc` back to the
/// ensemble output through the total field-2 efficiency of `stats.mode`.
pub fn derived_metrics(stats: &Statistics, params: &ModelParams) -> Metrics {
    let eta2 = DetectionConfig::new(stats.mode).field2_efficiency(params);
    metrics_with_eta(stats, eta2)
}

pub(crate) fn metrics_with_eta(stats: &Statistics, eta2: f64) -> Metrics {
    let pc = ratio(stats.p12, stats.p1);
    Metrics {
        g12: ratio(stats.p12, stats.p1 * stats.p2),
        w: stats
            .split
            .and_then(|s| ratio(stats.p1 * s.p1_2a_2b, s.p1_2a * s.p1_2b)),
        pc,
        qc: pc.and_then(|pc| ratio(pc, eta2)),
        p12: stats.p12,
        naive_ratio: ratio(stats.p2, stats.p1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn truncated_pgf(chi: f64, x: f64, y: f64) -> f64 {
        (0..=60).map(|n| (1.0 - chi) * (chi * x * y).powi(n)).sum()
    }

    #[test]
    fn pgf_examples() {
        assert_eq!(tmss_pgf(0.3, 1.0, 1.0).unwrap(), 1.0);
        assert_eq!(tmss_pgf(0.0, 0.2, 0.7).unwrap(), 1.0);
        // frozen from the truncated series (term at n = 0 only)
        let oracle = truncated_pgf(0.5, 0.0, 1.0);
        assert_eq!(oracle, 0.5);
        assert_eq!(tmss_pgf(0.5, 0.0, 1.0).unwrap(), oracle);
        assert!((tmss_pgf(0.4, 0.3, 0.8).unwrap() - truncated_pgf(0.4, 0.3, 0.8)).abs() < 1e-15);
    }

    #[test]
    fn pgf_domain_errors() {
        assert!(tmss_pgf(1.0, 1.0, 1.0).is_err());
        assert!(tmss_pgf(-0.1, 1.0, 1.0).is_err());
        assert!(tmss_pgf(0.5, 1.1, 1.0).is_err());
        assert!(tmss_pgf(0.5, 0.5, -0.1).is_err());
    }

    fn perfect(chi: f64) -> ModelParams {
        ModelParams {
            chi,
            retrieval_eff: 1.0,
            eta1: 1.0,
            eta2_path: 1.0,
            eta_apd: 1.0,
            ..ModelParams::default()
        }
    }

    #[test]
    fn perfect_detection_single_mode() {
        let s = click_statistics(&perfect(0.01), &DetectionConfig::SINGLE).unwrap();
        assert!((s.p1 - 0.01).abs() < 1e-15);
        assert!((s.p2 - 0.01).abs() < 1e-15);
        assert!((s.p12 - 0.01).abs() < 1e-15);
        let m = derived_metrics(&s, &perfect(0.01));
        assert!((m.g12.unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn vacuum_is_silent() {
        for cfg in [DetectionConfig::SINGLE, DetectionConfig::SPLIT] {
            let s = click_statistics(&ModelParams::default().with_chi(0.0), &cfg).unwrap();
            assert!(s.fields().iter().all(|(_, v)| *v == 0.0));
        }
    }

    #[test]
    fn backgrounds_only_factorize() {
        let b = 0.03;
        let p = ModelParams {
            chi: 0.0,
            bg1_incoherent: b,
            bg2_incoherent: 0.02,
            ..ModelParams::default()
        };
        let s = click_statistics(&p, &DetectionConfig::SINGLE).unwrap();
        assert!((s.p1 - (1.0 - (-b).exp())).abs() < 1e-16);
        assert!((s.p12 - s.p1 * s.p2).abs() < 1e-18);
        assert!((derived_metrics(&s, &p).g12.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metric_examples() {
        let s = Statistics {
            mode: DetectionMode::Single,
            p1: 0.5,
            p2: 0.5,
            p12: 0.5,
            split: None,
        };
        assert_eq!(metrics_with_eta(&s, 0.25).g12, Some(2.0));

        let s = Statistics {
            mode: DetectionMode::Single,
            p1: 0.01,
            p2: 0.01,
            p12: 0.00125,
            split: None,
        };
        let m = derived_metrics(&s, &ModelParams::default());
        assert!((m.pc.unwrap() - 0.125).abs() < 1e-15);
        assert!((m.qc.unwrap() - 0.5).abs() < 1e-15);

        let s = Statistics {
            mode: DetectionMode::Split,
            p1: 0.01,
            p2: 0.002,
            p12: 0.001,
            split: Some(SplitStatistics {
                p2a: 0.001,
                p2b: 0.001,
                p2a_2b: 0.0,
                p1_2a: 0.0005,
                p1_2b: 0.0005,
                p1_2a_2b: 0.0,
            }),
        };
        assert_eq!(metrics_with_eta(&s, 0.2).w, Some(0.0));
    }

    #[test]
    fn zero_denominators_are_flagged() {
        let s = click_statistics(&ModelParams::default().with_chi(0.0), &DetectionConfig::SPLIT).unwrap();
        let m = derived_metrics(&s, &ModelParams::default());
        assert_eq!(m.g12, None);
        assert_eq!(m.pc, None);
        assert_eq!(m.qc, None);
        assert_eq!(m.w, None);
        assert_eq!(m.naive_ratio, None);
        assert_eq!(m.p12, 0.0);
    }

    #[test]
    fn single_photon_arm_cannot_fire_both() {
        // one arm blocked: the triple needs both arms, so it only comes from backgrounds
        let p = ModelParams {
            bs_ratio: 1.0,
            ..ModelParams::default()
        };
        let s = click_statistics(&p, &DetectionConfig::SPLIT).unwrap();
        assert_eq!(s.split.unwrap().p1_2a_2b, 0.0);
    }

    #[test]
    fn small_chi_limit() {
        let s = click_statistics(&ModelParams::default().with_chi(1e-4), &DetectionConfig::SINGLE).unwrap();
        let g = derived_metrics(&s, &ModelParams::default()).g12.unwrap();
        assert!((g * 1e-4 - 1.0).abs() < 1e-3, "g12 * chi = {}", g * 1e-4);
    }

    #[test]
    fn balanced_splitter_is_symmetric() {
        let p = ModelParams {
            chi: 0.2,
            bg2_coherent: 0.01,
            bg2_incoherent: 0.003,
            bg1_incoherent: 0.01,
            ..ModelParams::default()
        };
        let s = click_statistics(&p, &DetectionConfig::SPLIT).unwrap().split.unwrap();
        assert_eq!(s.p1_2a, s.p1_2b);
        assert_eq!(s.p2a, s.p2b);
    }

    fn arb_params() -> impl Strategy<Value = ModelParams> {
        (
            0.0..0.6f64,
            0.0..0.05f64,
            0.0..0.05f64,
            0.0..0.05f64,
            0.0..0.05f64,
            (
                0.0..=1.0f64,
                0.0..=1.0f64,
                0.0..=1.0f64,
                0.0..=1.0f64,
                0.5..=1.0f64,
                0.0..=1.0f64,
            ),
        )
            .prop_map(|(chi, c1, c2, i1, i2, (eps, e1, e2, apd, bst, ratio))| ModelParams {
                chi,
                bg1_coherent: c1,
                bg2_coherent: c2,
                bg1_incoherent: i1,
                bg2_incoherent: i2,
                chi_ref: 0.1,
                retrieval_eff: eps,
                eta1: e1,
                eta2_path: e2,
                eta_apd: apd,
                bs_transmission: bst,
                bs_ratio: ratio,
            })
    }

    proptest! {
        #[test]
        fn statistics_are_bounded(p in arb_params()) {
            for cfg in [DetectionConfig::SINGLE, DetectionConfig::SPLIT] {
                let s = click_statistics(&p, &cfg).unwrap();
                for (name, v) in s.fields() {
                    prop_assert!((0.0..=1.0).contains(&v), "{} = {}", name, v);
                }
                prop_assert!(s.p12 <= s.p1.min(s.p2) + 1e-15);
                if let Some(sp) = s.split {
                    prop_assert!(sp.p1_2a_2b <= sp.p1_2a.min(sp.p1_2b) + 1e-15);
                    prop_assert!(sp.p2a_2b <= sp.p2a.min(sp.p2b) + 1e-15);
                }
            }
        }

        #[test]
        fn singles_monotone_in_own_efficiency_and_background(p in arb_params(), bump in 0.0..0.2f64) {
            let base = click_statistics(&p, &DetectionConfig::SINGLE).unwrap();
            let more_eta = ModelParams { eta1: (p.eta1 + bump).min(1.0), ..p };
            let more_bg = ModelParams { bg1_incoherent: p.bg1_incoherent + bump, ..p };
            let more_eps = ModelParams { retrieval_eff: (p.retrieval_eff + bump).min(1.0), ..p };
            prop_assert!(click_statistics(&more_eta, &DetectionConfig::SINGLE).unwrap().p1 >= base.p1 - 1e-16);
            prop_assert!(click_statistics(&more_bg, &DetectionConfig::SINGLE).unwrap().p1 >= base.p1 - 1e-16);
            prop_assert!(click_statistics(&more_eps, &DetectionConfig::SINGLE).unwrap().p2 >= base.p2 - 1e-16);
        }

        #[test]
        fn independence_limit(p in arb_params()) {
            let p = ModelParams { chi: 0.0, bg1_incoherent: p.bg1_incoherent + 1e-3, bg2_incoherent: p.bg2_incoherent + 1e-3, ..p };
            let s = click_statistics(&p, &DetectionConfig::SINGLE).unwrap();
            let g = derived_metrics(&s, &p).g12.unwrap();
            prop_assert!((g - 1.0).abs() <= 1e-12, "g12 = {}", g);
        }
    }
}

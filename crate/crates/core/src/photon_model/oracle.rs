//! Brute-force reference: explicit enumeration of pair number, binomial and
//! multinomial routing of every pair photon, and Poisson background counts.
//! Shares nothing with the closed forms beyond the per-detector reduction.

use log::warn;

use super::{SplitStatistics, Statistics};
use crate::error::{Error, Result};
use crate::params::{Channel, ChannelModel, DetectionConfig, Field2Channels, ModelParams};

pub const DEFAULT_NMAX: usize = 60;

/// Tail mass above which the enumeration is reported as not converged.
pub const TAIL_WARNING: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BruteForce {
    pub stats: Statistics,
    /// Probability mass outside the enumerated box.
    pub tail_mass: f64,
    pub truncation_warning: bool,
}

fn binomial_row(n: usize) -> Vec<f64> {
    let mut row = vec![1.0f64; n + 1];
    for k in 1..n {
        row[k] = row[k - 1] * (n - k + 1) as f64 / k as f64;
    }
    row
}

fn poisson_pmf(mean: f64, kmax: usize) -> Vec<f64> {
    let mut pmf = Vec::with_capacity(kmax + 1);
    let mut term = (-mean).exp();
    pmf.push(term);
    for k in 1..=kmax {
        term *= mean / k as f64;
        pmf.push(term);
    }
    pmf
}

/// Background response of one detector: `[P(no count), P(>= 1 count)]`,
/// both restricted to counts `<= kmax`.
fn background(ch: &Channel, kmax: usize) -> [f64; 2] {
    let pmf = poisson_pmf(ch.bg_mean, kmax);
    [pmf[0], pmf[1..].iter().sum()]
}

/// `P(click | pair photons hit?)` folded with the enumerated background.
fn click_given_hit(bg: &[f64; 2], hit: bool, click: bool) -> f64 {
    let total = bg[0] + bg[1];
    match (hit, click) {
        (true, true) => total,
        (true, false) => 0.0,
        (false, true) => bg[1],
        (false, false) => bg[0],
    }
}

/// Enumerates pair number `n <= nmax` and background counts `k <= nmax`.
pub fn brute_force_statistics(params: &ModelParams, config: &DetectionConfig, nmax: usize) -> Result<BruteForce> {
    if nmax < 1 {
        return Err(Error::Domain("nmax must be >= 1".into()));
    }
    params.validate()?;
    let m = ChannelModel::new(params, config);
    let chi = m.chi;

    // field-2 detectors: one or two arms
    let arms: Vec<Channel> = match m.field2 {
        Field2Channels::Single(c) => vec![c],
        Field2Channels::Split { a, b } => vec![a, b],
    };
    let bg1 = background(&m.d1, nmax);
    let bg2: Vec<[f64; 2]> = arms.iter().map(|c| background(c, nmax)).collect();
    let n_det = 1 + arms.len();

    // joint PMF over click patterns; bit 0 = D1, bit 1 = first arm, bit 2 = second arm
    let mut pattern = vec![0.0f64; 1 << n_det];
    let mut pair_mass = 0.0;

    for n in 0..=nmax {
        let weight = (1.0 - chi) * chi.powi(n as i32);
        if weight == 0.0 && n > 0 {
            break;
        }
        pair_mass += weight;
        let row = binomial_row(n);

        // field 1: j of n photons registered
        let a = m.d1.pair_prob;
        let mut hit1 = [0.0f64; 2];
        for (j, c) in row.iter().enumerate() {
            let p = c * a.powi(j as i32) * (1.0 - a).powi((n - j) as i32);
            hit1[(j > 0) as usize] += p;
        }

        // field 2: multinomial routing of n photons to arms or loss
        let mut hit2 = vec![0.0f64; 1 << arms.len()];
        match arms.as_slice() {
            [c] => {
                let r = c.pair_prob;
                for (j, coef) in row.iter().enumerate() {
                    let p = coef * r.powi(j as i32) * (1.0 - r).powi((n - j) as i32);
                    hit2[(j > 0) as usize] += p;
                }
            }
            [ca, cb] => {
                let (ra, rb) = (ca.pair_prob, cb.pair_prob);
                let lost = (1.0 - ra - rb).max(0.0);
                for ja in 0..=n {
                    let rest = binomial_row(n - ja);
                    for jb in 0..=(n - ja) {
                        let jl = n - ja - jb;
                        let p = row[ja] * rest[jb] * ra.powi(ja as i32) * rb.powi(jb as i32) * lost.powi(jl as i32);
                        hit2[(ja > 0) as usize | (((jb > 0) as usize) << 1)] += p;
                    }
                }
            }
            _ => unreachable!(),
        }

        for (h1, p1) in hit1.iter().enumerate() {
            for (h2, p2) in hit2.iter().enumerate() {
                let ph = weight * p1 * p2;
                if ph == 0.0 {
                    continue;
                }
                for (pat, slot) in pattern.iter_mut().enumerate() {
                    let mut p = ph * click_given_hit(&bg1, h1 == 1, pat & 1 == 1);
                    for (i, bg) in bg2.iter().enumerate() {
                        p *= click_given_hit(bg, (h2 >> i) & 1 == 1, (pat >> (i + 1)) & 1 == 1);
                    }
                    *slot += p;
                }
            }
        }
    }

    let bg_mass: f64 = (bg1[0] + bg1[1]) * bg2.iter().map(|b| b[0] + b[1]).product::<f64>();
    let tail_mass = (1.0 - pair_mass * bg_mass).max(0.0);

    let sum_where = |pred: &dyn Fn(usize) -> bool| -> f64 {
        pattern
            .iter()
            .enumerate()
            .filter(|(pat, _)| pred(*pat))
            .map(|(_, p)| p)
            .sum()
    };
    let d1 = |pat: usize| pat & 1 == 1;
    let da = |pat: usize| pat & 2 == 2;
    let db = |pat: usize| pat & 4 == 4;
    let any2 = |pat: usize| pat & 6 != 0;

    let split = (arms.len() == 2).then(|| SplitStatistics {
        p2a: sum_where(&da),
        p2b: sum_where(&db),
        p2a_2b: sum_where(&|p| da(p) && db(p)),
        p1_2a: sum_where(&|p| d1(p) && da(p)),
        p1_2b: sum_where(&|p| d1(p) && db(p)),
        p1_2a_2b: sum_where(&|p| d1(p) && da(p) && db(p)),
    });
    let stats = Statistics {
        mode: m.mode(),
        p1: sum_where(&d1),
        p2: sum_where(&any2),
        p12: sum_where(&|p| d1(p) && any2(p)),
        split,
    };

    let truncation_warning = tail_mass > TAIL_WARNING;
    if truncation_warning {
        warn!("brute-force enumeration truncated at nmax = {nmax}: tail mass {tail_mass:.3e}");
    }
    Ok(BruteForce {
        stats,
        tail_mass,
        truncation_warning,
    })
}

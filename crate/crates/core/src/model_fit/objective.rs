use serde::{Deserialize, Serialize};

use super::dataset::{DataPoint, Dataset, ALT_BACKGROUND_FLAG};
use crate::error::{Error, Result};
use crate::params::{ChannelModel, DetectionConfig, DetectionMode, ModelParams};
use crate::photon_model::{channel_statistics, herald_probability, metrics_with_eta};

/// Largest drive strength considered when inverting `p1`.
pub const CHI_MAX: f64 = 1.0 - 1e-9;

/// Residual assigned to an observable the model cannot predict.
const PENALTY_RESIDUAL: f64 = 1e3;

/// Model observables at one drive strength. `g12`, `qc` and `p12` follow the
/// requested detection mode; `w` always comes from split detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub chi: f64,
    pub p1: f64,
    pub g12: Option<f64>,
    pub qc: Option<f64>,
    pub p12: f64,
    pub w: Option<f64>,
}

pub(crate) fn predict_at(params: &ModelParams, mode: DetectionMode, chi: f64) -> CurvePoint {
    let p = params.with_chi(chi);
    let cfg = DetectionConfig::new(mode);
    let stats = channel_statistics(&ChannelModel::new(&p, &cfg));
    let m = metrics_with_eta(&stats, cfg.field2_efficiency(&p));
    let w = match mode {
        DetectionMode::Split => m.w,
        DetectionMode::Single => {
            let split = DetectionConfig::SPLIT;
            let s = channel_statistics(&ChannelModel::new(&p, &split));
            metrics_with_eta(&s, split.field2_efficiency(&p)).w
        }
    };
    CurvePoint {
        chi,
        p1: stats.p1,
        g12: m.g12,
        qc: m.qc,
        p12: m.p12,
        w,
    }
}

/// Observables along a drive-strength grid.
pub fn predict_curves(params: &ModelParams, chi_grid: &[f64], mode: DetectionMode) -> Result<Vec<CurvePoint>> {
    params.validate()?;
    if let Some(bad) = chi_grid.iter().find(|c| !(**c > 0.0 && **c < 1.0)) {
        return Err(Error::param("chi", format!("grid value {bad} outside (0, 1)")));
    }
    Ok(chi_grid.iter().map(|&chi| predict_at(params, mode, chi)).collect())
}

fn herald_at(params: &ModelParams, chi: f64) -> f64 {
    herald_probability(&ChannelModel::new(&params.with_chi(chi), &DetectionConfig::SINGLE))
}

/// Drive strength whose model `p1` equals `p1`, clamped to `[0, CHI_MAX]`.
/// `p1` is strictly increasing in chi, so bisection is exact up to rounding.
pub fn profile_chi(params: &ModelParams, p1: f64) -> f64 {
    if p1 <= herald_at(params, 0.0) {
        return 0.0;
    }
    if p1 >= herald_at(params, CHI_MAX) {
        return CHI_MAX;
    }
    let (mut lo, mut hi) = (0.0f64, CHI_MAX);
    while hi - lo > 1e-15 * hi {
        let mid = 0.5 * (lo + hi);
        if herald_at(params, mid) < p1 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Parameters for one point: flagged points swap in the alternative field-1
/// incoherent background when one is given.
fn point_params(params: &ModelParams, alt_bg1: Option<f64>, point: &DataPoint) -> ModelParams {
    match alt_bg1 {
        Some(bg) if point.has_flag(ALT_BACKGROUND_FLAG) => ModelParams {
            bg1_incoherent: bg,
            ..*params
        },
        _ => *params,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    /// One slot per (point, available observable), in dataset order.
    pub values: Vec<f64>,
    /// Sum of squares per point.
    pub per_point: Vec<f64>,
    pub chi: Vec<f64>,
    /// Set when some prediction was undefined or non-finite.
    pub penalized: bool,
}

impl Residuals {
    /// Total loss, summed in sorted order so it does not depend on the order
    /// of the dataset points.
    pub fn total(&self) -> f64 {
        let mut terms = self.per_point.clone();
        terms.sort_by(f64::total_cmp);
        terms.iter().sum()
    }
}

/// Standardized residual. Decade-spanning observables are compared in log
/// space. `slope` is d(prediction)/d(p1); it carries the `p1` uncertainty
/// into the variance because chi is inferred from the measured `p1`.
fn residual(obs: f64, se: f64, pred: Option<f64>, slope: Option<f64>, se_p1: f64, log: bool) -> Option<f64> {
    let pred = pred.filter(|p| p.is_finite())?;
    let slope = slope.filter(|s| s.is_finite()).unwrap_or(0.0);
    let r = if log && obs > 0.0 && pred > 0.0 {
        let var = (se / obs).powi(2) + (slope / pred * se_p1).powi(2);
        (obs.ln() - pred.ln()) / var.sqrt()
    } else {
        let var = se * se + (slope * se_p1).powi(2);
        (obs - pred) / var.sqrt()
    };
    r.is_finite().then_some(r)
}

pub fn residuals(params: &ModelParams, alt_bg1: Option<f64>, dataset: &Dataset, mode: DetectionMode) -> Residuals {
    let mut values = Vec::new();
    let mut per_point = Vec::with_capacity(dataset.points.len());
    let mut chis = Vec::with_capacity(dataset.points.len());
    let mut penalized = false;
    for point in &dataset.points {
        let p = point_params(params, alt_bg1, point);
        let chi = profile_chi(&p, point.p1.value);
        let at = predict_at(&p, mode, chi);
        let (lo, hi) = if chi > 0.0 {
            (chi * (1.0 - 1e-4), (chi * (1.0 + 1e-4)).min(CHI_MAX))
        } else {
            (0.0, 1e-12)
        };
        let (below, above) = (predict_at(&p, mode, lo), predict_at(&p, mode, hi));
        let dp1 = above.p1 - below.p1;
        let slope = |f: fn(&CurvePoint) -> Option<f64>| -> Option<f64> {
            (dp1 > 0.0).then(|| Some((f(&above)? - f(&below)?) / dp1)).flatten()
        };
        let se_p1 = point.p1.se;

        let mut rs = vec![Some((point.p1.value - at.p1) / se_p1)];
        rs.push(residual(
            point.g12.value,
            point.g12.se,
            at.g12,
            slope(|c| c.g12),
            se_p1,
            true,
        ));
        rs.push(residual(
            point.qc.value,
            point.qc.se,
            at.qc,
            slope(|c| c.qc),
            se_p1,
            false,
        ));
        rs.push(residual(
            point.p12.value,
            point.p12.se,
            Some(at.p12),
            slope(|c| Some(c.p12)),
            se_p1,
            true,
        ));
        if let Some(w) = point.w {
            rs.push(residual(w.value, w.se, at.w, slope(|c| c.w), se_p1, false));
        }
        let mut ss = 0.0;
        for r in rs {
            let r = r.unwrap_or_else(|| {
                penalized = true;
                PENALTY_RESIDUAL
            });
            ss += r * r;
            values.push(r);
        }
        per_point.push(ss);
        chis.push(chi);
    }
    Residuals {
        values,
        per_point,
        chi: chis,
        penalized,
    }
}

/// Weighted least-squares loss of `params` against `dataset`, with `g12`,
/// `qc` and `p12` read as single-detector measurements.
pub fn objective(params: &ModelParams, dataset: &Dataset) -> Result<f64> {
    objective_with(params, None, dataset, DetectionMode::Single)
}

pub fn objective_with(
    params: &ModelParams,
    alt_bg1: Option<f64>,
    dataset: &Dataset,
    mode: DetectionMode,
) -> Result<f64> {
    if dataset.points.is_empty() {
        return Err(Error::Dataset("dataset has no points".into()));
    }
    params.validate()?;
    let r = residuals(params, alt_bg1, dataset, mode);
    if r.penalized {
        log::warn!("model prediction undefined for some observables; penalty applied");
    }
    Ok(r.total())
}

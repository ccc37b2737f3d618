//! Global fit of one parameter set to measured curves.
//!
//! Each point's drive strength is not measured directly; it is profiled out
//! by matching the model `p1` to the measured one, so the free parameters are
//! the background and retrieval terms shared by all points.

mod dataset;
mod objective;
mod optimize;

pub use dataset::{DataPoint, Dataset, Measured, ALT_BACKGROUND_FLAG, DATASET_COLUMNS};
pub use objective::{
    objective, objective_with, predict_curves, profile_chi, residuals, CurvePoint, Residuals, CHI_MAX,
};
pub use optimize::{
    fit, Bound, Bounds, FitOptions, FitResult, StartDiagnostics, CONVERGENCE_TOL, DEFAULT_STARTS, FREE_KEYS,
};

use crate::correlator::estimate_metrics;
use crate::error::{Error, Result};
use crate::event_sim::{mix64, simulate_counts, SessionSpec};
use crate::params::{DetectionConfig, DetectionMode, ModelParams};

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n)
            .map(|i| {
                if i == 0 {
                    lo
                } else if i + 1 == n {
                    hi
                } else {
                    (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp()
                }
            })
            .collect(),
    }
}

/// Simulates one measured point per drive strength and turns the counts into
/// a dataset with delta-method errors. Point `i` uses its own seed derived
/// from `seed`.
pub fn synthetic_dataset(
    params: &ModelParams,
    chis: &[f64],
    mode: DetectionMode,
    trials_per_point: u64,
    seed: u64,
) -> Result<Dataset> {
    let eta2 = DetectionConfig::new(mode).field2_efficiency(params);
    let mut points = Vec::with_capacity(chis.len());
    for (i, &chi) in chis.iter().enumerate() {
        let spec = SessionSpec::new(params.with_chi(chi), mode, trials_per_point, mix64(seed ^ i as u64));
        let table = simulate_counts(&spec)?;
        let m = estimate_metrics(&table, eta2)?;
        let need = |name: &str, e: crate::correlator::Estimate| -> Result<Measured> {
            match (e.value, e.se) {
                (Some(value), Some(se)) if se > 0.0 => Ok(Measured { value, se }),
                _ => Err(Error::Dataset(format!("point {i}: `{name}` undefined at chi = {chi}"))),
            }
        };
        let w = match (m.w.value, m.w.se) {
            (Some(value), Some(se)) if se > 0.0 => Some(Measured { value, se }),
            _ => None,
        };
        points.push(DataPoint {
            p1: need("p1", m.p1)?,
            g12: need("g12", m.g12)?,
            qc: need("qc", m.qc)?,
            p12: need("p12", m.p12)?,
            w,
            flags: vec![],
        });
    }
    let ds = Dataset { points };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_endpoints() {
        let g = log_grid(1e-4, 1e-1, 4);
        assert_eq!(g[0], 1e-4);
        assert_eq!(g[3], 1e-1);
        assert!((g[1] / 1e-3 - 1.0).abs() < 1e-12);
        assert_eq!(log_grid(0.01, 0.1, 1), vec![0.01]);
    }

    #[test]
    fn synthetic_points_track_the_model() {
        let p = ModelParams::reference_regime();
        let chis = [1e-3, 1e-2];
        let ds = synthetic_dataset(&p, &chis, DetectionMode::Split, 2_000_000, 5).unwrap();
        let curves = predict_curves(&p, &chis, DetectionMode::Split).unwrap();
        for (pt, c) in ds.points.iter().zip(&curves) {
            assert!((pt.p1.value - c.p1).abs() < 4.0 * pt.p1.se);
            assert!((pt.qc.value - c.qc.unwrap()).abs() < 4.0 * pt.qc.se);
        }
    }
}

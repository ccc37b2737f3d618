use dlcz_core::correlator::{estimate_metrics, estimate_metrics_with, ErrorMethod};
use dlcz_core::event_sim::{mix64, simulate_counts, SessionSpec};
use dlcz_core::{click_statistics, derived_metrics, DetectionConfig, DetectionMode, ModelParams};

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

#[test]
fn reference_regime_qc_within_four_se() {
    let p = ModelParams::reference_regime();
    let table = simulate_counts(&SessionSpec::new(p, DetectionMode::Single, 10_000_000, 17)).unwrap();
    let m = estimate_metrics(&table, DetectionConfig::SINGLE.field2_efficiency(&p)).unwrap();
    let exact = derived_metrics(&click_statistics(&p, &DetectionConfig::SINGLE).unwrap(), &p);
    let (q, se) = (m.qc.value.unwrap(), m.qc.se.unwrap());
    assert!(
        (q - exact.qc.unwrap()).abs() <= 4.0 * se,
        "{q} +- {se} vs {:?}",
        exact.qc
    );
    let (g, gse) = (m.g12.value.unwrap(), m.g12.se.unwrap());
    assert!((g - exact.g12.unwrap()).abs() <= 4.0 * gse);
}

/// Reported errors shrink as N^-1/2 and agree with the replicate spread.
#[test]
fn standard_error_scaling() {
    let p = ModelParams {
        chi: 0.01,
        ..ModelParams::reference_regime()
    };
    let eta2 = DetectionConfig::SINGLE.field2_efficiency(&p);
    let sizes = [100_000u64, 400_000, 1_600_000];
    let mut spreads = Vec::new();
    for (k, &n) in sizes.iter().enumerate() {
        let mut qs = Vec::new();
        let mut ses = Vec::new();
        for r in 0..40u64 {
            let t = simulate_counts(&SessionSpec::new(
                p,
                DetectionMode::Single,
                n,
                mix64(1000 * k as u64 + r),
            ))
            .unwrap();
            let m = estimate_metrics(&t, eta2).unwrap();
            qs.push(m.qc.value.unwrap());
            ses.push(m.qc.se.unwrap());
        }
        let (_, sd) = mean_sd(&qs);
        let (mean_se, _) = mean_sd(&ses);
        assert!(
            (sd / mean_se - 1.0).abs() < 0.35,
            "n={n}: spread {sd} vs reported {mean_se}"
        );
        spreads.push(sd);
    }
    let slope = (spreads[2].ln() - spreads[0].ln()) / ((sizes[2] as f64).ln() - (sizes[0] as f64).ln());
    assert!((slope + 0.5).abs() <= 0.1, "slope {slope}");
}

#[test]
fn bootstrap_agrees_with_delta_on_simulated_counts() {
    let p = ModelParams {
        chi: 0.005,
        ..ModelParams::reference_regime()
    };
    let t = simulate_counts(&SessionSpec::new(p, DetectionMode::Split, 3_000_000, 3)).unwrap();
    let eta2 = DetectionConfig::SPLIT.field2_efficiency(&p);
    let d = estimate_metrics(&t, eta2).unwrap();
    let b = estimate_metrics_with(
        &t,
        eta2,
        ErrorMethod::Bootstrap {
            replicates: 400,
            seed: 5,
        },
    )
    .unwrap();
    for ((name, de), (_, be)) in d.named().iter().zip(b.named().iter()) {
        assert_eq!(de.value, be.value, "{name}: point estimate independent of method");
        if *name == "w" {
            continue;
        }
        let (x, y) = (de.se.unwrap(), be.se.unwrap());
        assert!((x / y - 1.0).abs() < 0.2, "{name}: delta {x} bootstrap {y}");
    }
}

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::objective::residuals;
use crate::error::{Error, Result};
use crate::kv::{format_float, KvDocument};
use crate::params::{DetectionMode, ModelParams};

/// Free parameters in fit order. The last one exists only for datasets with
/// flagged points.
pub const FREE_KEYS: [&str; 6] = [
    "bg1_coherent",
    "bg2_coherent",
    "bg1_incoherent",
    "bg2_incoherent",
    "retrieval_eff",
    "bg1_incoherent_alt",
];

pub const DEFAULT_STARTS: usize = 16;
pub const CONVERGENCE_TOL: f64 = 1e-10;

fn default_range(key: &str) -> (f64, f64) {
    match key {
        "bg1_coherent" => (1e-8, 1e-2),
        "bg2_coherent" => (1e-7, 1e-1),
        "bg1_incoherent" | "bg1_incoherent_alt" => (1e-10, 1e-4),
        "bg2_incoherent" => (1e-10, 1e-3),
        "retrieval_eff" => (0.01, 1.0),
        _ => unreachable!("not a free key"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Bound {
    Range { lo: f64, hi: f64 },
    Fixed(f64),
}

/// Search box for the free parameters, plus optional fixed overrides of any
/// model parameter. Unlisted free keys use built-in ranges.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub entries: Vec<(String, Bound)>,
}

impl Bounds {
    pub fn get(&self, key: &str) -> Option<Bound> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, b)| *b)
    }

    pub fn range(&self, key: &str) -> Option<(f64, f64)> {
        match self.get(key) {
            Some(Bound::Range { lo, hi }) => Some((lo, hi)),
            Some(Bound::Fixed(_)) => None,
            None => FREE_KEYS.contains(&key).then(|| default_range(key)),
        }
    }

    pub fn set(&mut self, key: &str, bound: Bound) {
        self.entries.retain(|(k, _)| k != key);
        self.entries.push((key.to_string(), bound));
    }

    pub fn validate(&self) -> Result<()> {
        for (key, b) in &self.entries {
            let is_free = FREE_KEYS.contains(&key.as_str());
            match *b {
                Bound::Range { lo, hi } => {
                    if !is_free {
                        return Err(Error::param(key, "only free parameters accept a range"));
                    }
                    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                        return Err(Error::param(key, "range needs finite lo < hi"));
                    }
                    if lo < 0.0 {
                        return Err(Error::param(key, "range must be non-negative"));
                    }
                    if key == "retrieval_eff" && hi > 1.0 {
                        return Err(Error::param(key, "range must lie in [0, 1]"));
                    }
                }
                Bound::Fixed(v) => {
                    let mut p = ModelParams::default();
                    let target = if key == "bg1_incoherent_alt" {
                        "bg1_incoherent"
                    } else {
                        key
                    };
                    p.set(target, v)?;
                    p.validate()
                        .map_err(|_| Error::param(key, "fixed value violates the parameter domain"))?;
                }
            }
        }
        Ok(())
    }

    /// `key = [lo, hi]` frees a parameter within a box; `key = value` fixes it.
    pub fn from_document(doc: &KvDocument) -> Result<Self> {
        let mut out = Bounds::default();
        for (key, _) in doc.iter() {
            if !(FREE_KEYS.contains(&key) || ModelParams::default().get(key).is_some()) {
                return Err(Error::UnknownKey(key.to_string()));
            }
            let bound = match doc.range(key) {
                Ok(Some((lo, hi))) => Bound::Range { lo, hi },
                _ => Bound::Fixed(doc.number(key)?.expect("key present")),
            };
            out.set(key, bound);
        }
        out.validate()?;
        Ok(out)
    }

    pub fn to_document_string(&self) -> String {
        let mut out = String::new();
        for (k, b) in &self.entries {
            let _ = match b {
                Bound::Range { lo, hi } => writeln!(out, "{k} = [{}, {}]", format_float(*lo), format_float(*hi)),
                Bound::Fixed(v) => writeln!(out, "{k} = {}", format_float(*v)),
            };
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Detection mode in which `g12`, `qc` and `p12` were measured.
    pub mode: DetectionMode,
    pub starts: usize,
    pub seed: u64,
    pub max_evals: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            mode: DetectionMode::Single,
            starts: DEFAULT_STARTS,
            seed: 0,
            max_evals: 20_000,
        }
    }
}

/// One free coordinate. Backgrounds with a positive lower bound are searched
/// in log space; everything maps to the unit interval.
#[derive(Debug, Clone, PartialEq)]
struct Axis {
    key: &'static str,
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn to_natural(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        if self.log {
            (self.lo.ln() + u * (self.hi.ln() - self.lo.ln()))
                .exp()
                .clamp(self.lo, self.hi)
        } else {
            self.lo + u * (self.hi - self.lo)
        }
    }

    fn to_unit(&self, x: f64) -> f64 {
        let x = x.clamp(self.lo, self.hi);
        if self.log {
            (x.ln() - self.lo.ln()) / (self.hi.ln() - self.lo.ln())
        } else {
            (x - self.lo) / (self.hi - self.lo)
        }
    }
}

struct Problem<'a> {
    base: ModelParams,
    base_alt: Option<f64>,
    axes: Vec<Axis>,
    dataset: &'a Dataset,
    mode: DetectionMode,
}

impl Problem<'_> {
    fn params(&self, theta: &[f64]) -> (ModelParams, Option<f64>) {
        let mut p = self.base;
        let mut alt = self.base_alt;
        for (a, v) in self.axes.iter().zip(theta) {
            if a.key == "bg1_incoherent_alt" {
                alt = Some(*v);
            } else {
                p.set(a.key, *v).expect("free key");
            }
        }
        (p, alt)
    }

    fn natural(&self, u: &[f64]) -> Vec<f64> {
        self.axes.iter().zip(u).map(|(a, u)| a.to_natural(*u)).collect()
    }

    fn residual_vec(&self, theta: &[f64]) -> Vec<f64> {
        let (p, alt) = self.params(theta);
        residuals(&p, alt, self.dataset, self.mode).values
    }

    fn loss_natural(&self, theta: &[f64]) -> f64 {
        let (p, alt) = self.params(theta);
        let v = residuals(&p, alt, self.dataset, self.mode).total();
        if v.is_finite() {
            v
        } else {
            f64::MAX
        }
    }

    fn loss_unit(&self, u: &[f64]) -> f64 {
        self.loss_natural(&self.natural(u))
    }
}

#[derive(Debug, Clone)]
struct SimplexOutcome {
    x: Vec<f64>,
    value: f64,
    evals: usize,
    converged: bool,
}

/// Nelder-Mead on the unit box (points are clamped before evaluation).
/// Converged once a full cycle of `n + 1` iterations improves the best value
/// by less than `tol` and the simplex values agree to `tol`.
fn nelder_mead(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], step: f64, max_evals: usize, tol: f64) -> SimplexOutcome {
    let n = x0.len();
    let clamp = |x: &mut Vec<f64>| x.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    let evals = std::cell::Cell::new(0usize);
    let eval = |x: &[f64]| {
        evals.set(evals.get() + 1);
        f(x)
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let mut start = x0.to_vec();
    clamp(&mut start);
    let v0 = eval(&start);
    simplex.push((start.clone(), v0));
    for i in 0..n {
        let mut x = start.clone();
        x[i] = if x[i] + step <= 1.0 { x[i] + step } else { x[i] - step };
        let v = eval(&x);
        simplex.push((x, v));
    }

    let mut converged = false;
    let mut iter = 0usize;
    let mut cycle_best = f64::INFINITY;
    while evals.get() < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if iter.is_multiple_of(n + 1) {
            let best = simplex[0].1;
            let spread = simplex[n].1 - best;
            let scale = 1.0 + best.abs();
            if cycle_best - best < tol * scale && spread < tol * scale {
                converged = true;
                break;
            }
            cycle_best = best;
        }
        iter += 1;

        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64)
            .collect();
        let toward = |t: f64, from: &[f64]| -> Vec<f64> {
            let mut x: Vec<f64> = centroid.iter().zip(from).map(|(c, w)| c + t * (c - w)).collect();
            x.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            x
        };
        let worst = simplex[n].clone();
        let xr = toward(1.0, &worst.0);
        let fr = eval(&xr);
        if fr < simplex[0].1 {
            let xe = toward(2.0, &worst.0);
            let fe = eval(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < worst.1 {
            let x = toward(0.5, &worst.0);
            let v = eval(&x);
            (x, v)
        } else {
            let x = toward(-0.5, &worst.0);
            let v = eval(&x);
            (x, v)
        };
        if fc < worst.1.min(fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        let best = simplex[0].0.clone();
        for (x, v) in simplex.iter_mut().skip(1) {
            for (xi, bi) in x.iter_mut().zip(&best) {
                *xi = bi + 0.5 * (*xi - bi);
            }
            *v = eval(x);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    SimplexOutcome {
        x,
        value,
        evals: evals.get(),
        converged,
    }
}

/// `count` Latin-hypercube points in the unit cube of dimension `dim`.
fn latin_hypercube(count: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; dim]; count];
    for j in 0..dim {
        let mut strata: Vec<usize> = (0..count).collect();
        strata.shuffle(rng);
        for (pt, s) in pts.iter_mut().zip(strata) {
            pt[j] = (s as f64 + rng.random::<f64>()) / count as f64;
        }
    }
    pts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartDiagnostics {
    pub value: f64,
    pub evaluations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParams,
    /// Field-1 incoherent background of flagged points, when fitted or fixed.
    pub bg1_incoherent_alt: Option<f64>,
    pub mode: DetectionMode,
    pub free: Vec<String>,
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub objective: f64,
    pub n_points: usize,
    pub n_residuals: usize,
    pub dof: i64,
    /// Drive strength inferred for each dataset point.
    pub chi: Vec<f64>,
    pub converged: bool,
    pub evaluations: usize,
    pub best_start: usize,
    pub starts: Vec<StartDiagnostics>,
    pub seed: u64,
    pub flagged: bool,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn std_error(&self, key: &str) -> Option<f64> {
        self.free.iter().position(|k| k == key).map(|i| self.std_errors[i])
    }

    pub fn value(&self, key: &str) -> Option<f64> {
        if key == "bg1_incoherent_alt" {
            return self.bg1_incoherent_alt;
        }
        self.params.get(key)
    }

    pub fn to_document_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mode = \"{}\"", self.mode);
        let _ = writeln!(out, "objective = {}", format_float(self.objective));
        let _ = writeln!(out, "converged = {}", self.converged);
        let _ = writeln!(out, "flagged = {}", self.flagged);
        let _ = writeln!(out, "n_points = {}", self.n_points);
        let _ = writeln!(out, "n_residuals = {}", self.n_residuals);
        let _ = writeln!(out, "dof = {}", self.dof);
        let _ = writeln!(out, "evaluations = {}", self.evaluations);
        let _ = writeln!(out, "n_starts = {}", self.starts.len());
        let _ = writeln!(out, "best_start = {}", self.best_start);
        let _ = writeln!(out, "seed = {}", self.seed);
        let quoted = |v: &[String]| v.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(", ");
        let _ = writeln!(out, "free = [{}]", quoted(&self.free));
        let _ = writeln!(out, "warnings = [{}]", quoted(&self.warnings));
        out.push_str(&self.params.to_document_string());
        if let Some(alt) = self.bg1_incoherent_alt {
            let _ = writeln!(out, "bg1_incoherent_alt = {}", format_float(alt));
        }
        for (k, se) in self.free.iter().zip(&self.std_errors) {
            let _ = writeln!(out, "{k}_se = {}", format_float(*se));
        }
        out
    }

    pub fn covariance_csv(&self) -> String {
        let mut out = format!("param,{}\n", self.free.join(","));
        for (k, row) in self.free.iter().zip(&self.covariance) {
            let cells: Vec<String> = row.iter().map(|v| format_float(*v)).collect();
            let _ = writeln!(out, "{k},{}", cells.join(","));
        }
        out
    }
}

/// Pseudo-inverse of a symmetric PSD matrix via its eigendecomposition;
/// directions with negligible curvature get zero variance rather than
/// blowing up, and the result stays symmetric PSD.
fn psd_pseudo_inverse(m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m);
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let cutoff = max * n as f64 * f64::EPSILON * 1e3;
    let inv = eig.eigenvalues.map(|l| if l > cutoff { 1.0 / l } else { 0.0 });
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&inv) * v.transpose();
    (&out + out.transpose()) * 0.5
}

/// Gauss-Newton covariance `(J^T J)^-1` with `J` from central differences of
/// the standardized residuals in natural parameter units.
fn covariance(problem: &Problem, theta: &[f64]) -> DMatrix<f64> {
    let k = theta.len();
    let r0 = problem.residual_vec(theta);
    let mut jac = DMatrix::<f64>::zeros(r0.len(), k);
    for (j, axis) in problem.axes.iter().enumerate() {
        let h = 1e-4 * theta[j].abs().max((axis.hi - axis.lo) * 1e-6);
        let (mut up, mut dn) = (theta.to_vec(), theta.to_vec());
        up[j] = (theta[j] + h).min(axis.hi);
        dn[j] = (theta[j] - h).max(axis.lo);
        let (ru, rd) = (problem.residual_vec(&up), problem.residual_vec(&dn));
        let width = up[j] - dn[j];
        for i in 0..r0.len() {
            jac[(i, j)] = (ru[i] - rd[i]) / width;
        }
    }
    psd_pseudo_inverse(jac.transpose() * &jac)
}

/// Global fit of one parameter set to every point of `dataset`.
pub fn fit(dataset: &Dataset, init: &ModelParams, bounds: &Bounds, options: &FitOptions) -> Result<FitResult> {
    if dataset.points.is_empty() {
        return Err(Error::Dataset("dataset has no points".into()));
    }
    dataset.validate()?;
    init.validate()?;
    bounds.validate()?;
    if options.starts == 0 {
        return Err(Error::param("starts", "must be >= 1"));
    }

    let mut base = *init;
    let mut base_alt = dataset.has_alt_background().then_some(init.bg1_incoherent);
    for (key, b) in &bounds.entries {
        if let Bound::Fixed(v) = b {
            if key == "bg1_incoherent_alt" {
                base_alt = base_alt.map(|_| *v);
            } else {
                base.set(key, *v)?;
            }
        }
    }
    base.validate()?;
    let axes: Vec<Axis> = FREE_KEYS
        .iter()
        .filter(|k| **k != "bg1_incoherent_alt" || base_alt.is_some())
        .filter_map(|&key| {
            let (lo, hi) = bounds.range(key)?;
            Some(Axis {
                key,
                lo,
                hi,
                log: key.starts_with("bg") && lo > 0.0,
            })
        })
        .collect();
    let problem = Problem {
        base,
        base_alt,
        axes,
        dataset,
        mode: options.mode,
    };
    let k = problem.axes.len();

    let init_theta: Vec<f64> = problem
        .axes
        .iter()
        .map(|a| {
            let v = if a.key == "bg1_incoherent_alt" {
                base_alt.unwrap_or(base.bg1_incoherent)
            } else {
                base.get(a.key).unwrap()
            };
            a.to_unit(v)
        })
        .collect();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(options.seed);
    let mut starts = vec![init_theta];
    starts.extend(latin_hypercube(options.starts, k, &mut rng));

    let loss = |u: &[f64]| problem.loss_unit(u);
    let outcomes: Vec<SimplexOutcome> = if k == 0 {
        vec![SimplexOutcome {
            x: vec![],
            value: loss(&[]),
            evals: 1,
            converged: true,
        }]
    } else {
        starts
            .par_iter()
            .map(|s| nelder_mead(&loss, s, 0.1, options.max_evals, CONVERGENCE_TOL))
            .collect()
    };
    let (best_start, best) = outcomes
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.value.total_cmp(&b.1.value).then(a.0.cmp(&b.0)))
        .expect("at least one start");
    let mut evaluations: usize = outcomes.iter().map(|o| o.evals).sum();
    let mut final_x = best.x.clone();
    let mut final_value = best.value;
    let mut converged = best.converged;
    if k > 0 {
        // one restart from the winner guards against a collapsed simplex
        let polish = nelder_mead(&loss, &best.x, 0.02, options.max_evals, CONVERGENCE_TOL);
        evaluations += polish.evals;
        if polish.value <= final_value {
            final_x = polish.x;
            final_value = polish.value;
            converged = polish.converged;
        }
    }

    let theta = problem.natural(&final_x);
    let (params, alt) = problem.params(&theta);
    let res = residuals(&params, alt, dataset, options.mode);
    let cov = if k > 0 {
        covariance(&problem, &theta)
    } else {
        DMatrix::zeros(0, 0)
    };
    let n_residuals = res.values.len();
    let dof = n_residuals as i64 - dataset.points.len() as i64 - k as i64;

    let mut warnings = Vec::new();
    // each point's p1 is spent on its own drive strength
    if dof <= 0 || dataset.points.len() < 2 {
        warnings.push(format!(
            "under-determined: {} points, {} free parameters, {} degrees of freedom",
            dataset.points.len(),
            k,
            dof
        ));
    }
    if !converged {
        warnings.push("simplex did not converge; best-so-far result reported".to_string());
    }
    if res.penalized {
        warnings.push("some predictions were undefined at the optimum".to_string());
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    Ok(FitResult {
        params,
        bg1_incoherent_alt: alt,
        mode: options.mode,
        free: problem.axes.iter().map(|a| a.key.to_string()).collect(),
        std_errors: (0..k).map(|i| cov[(i, i)].max(0.0).sqrt()).collect(),
        values: theta,
        covariance: (0..k).map(|i| (0..k).map(|j| cov[(i, j)]).collect()).collect(),
        objective: final_value,
        n_points: dataset.points.len(),
        n_residuals,
        dof,
        chi: res.chi,
        converged,
        evaluations,
        best_start,
        starts: outcomes
            .iter()
            .map(|o| StartDiagnostics {
                value: o.value,
                evaluations: o.evals,
                converged: o.converged,
            })
            .collect(),
        seed: options.seed,
        flagged: !warnings.is_empty(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_fit::dataset::{DataPoint, Measured};
    use crate::model_fit::predict_curves;

    fn rosenbrock(x: &[f64]) -> f64 {
        // minimum at (0.7, 0.49) inside the unit box
        let (a, b) = (x[0] - 0.7, x[1] - x[0] * x[0]);
        a * a + 100.0 * b * b
    }

    #[test]
    fn simplex_finds_interior_minimum() {
        let out = nelder_mead(&rosenbrock, &[0.1, 0.9], 0.1, 20_000, 1e-14);
        assert!(out.converged);
        assert!(
            (out.x[0] - 0.7).abs() < 1e-4 && (out.x[1] - 0.49).abs() < 1e-4,
            "{:?}",
            out.x
        );
    }

    #[test]
    fn simplex_respects_box() {
        let f = |x: &[f64]| (x[0] + 1.0).powi(2) + (x[1] - 2.0).powi(2);
        let out = nelder_mead(&f, &[0.5, 0.5], 0.1, 10_000, 1e-12);
        assert!(out.x[0].abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6, "{:?}", out.x);
    }

    #[test]
    fn latin_hypercube_strata() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let pts = latin_hypercube(16, 4, &mut rng);
        for j in 0..4 {
            let mut bins: Vec<usize> = pts.iter().map(|p| (p[j] * 16.0) as usize).collect();
            bins.sort();
            assert_eq!(bins, (0..16).collect::<Vec<_>>());
        }
    }

    #[test]
    fn pseudo_inverse_is_symmetric_psd() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let inv = psd_pseudo_inverse(a.transpose() * &a);
        let direct = (a.transpose() * &a).try_inverse().unwrap();
        assert!((inv - direct).abs().max() < 1e-9);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let inv = psd_pseudo_inverse(singular);
        assert!((inv[(0, 1)] - inv[(1, 0)]).abs() < 1e-15);
        assert!(SymmetricEigen::new(inv).eigenvalues.iter().all(|l| *l >= -1e-12));
    }

    #[test]
    fn bounds_document() {
        let doc = KvDocument::parse("retrieval_eff = [0.2, 0.9]\nbg2_incoherent = 5e-6\neta1 = 0.3\n").unwrap();
        let b = Bounds::from_document(&doc).unwrap();
        assert_eq!(b.range("retrieval_eff"), Some((0.2, 0.9)));
        assert_eq!(b.range("bg2_incoherent"), None);
        assert_eq!(b.range("bg1_coherent"), Some(default_range("bg1_coherent")));
        assert_eq!(
            Bounds::from_document(&KvDocument::parse(&b.to_document_string()).unwrap()).unwrap(),
            b
        );
        let bad = KvDocument::parse("retrieval_eff = [0.9, 0.2]\n").unwrap();
        assert!(Bounds::from_document(&bad).is_err());
        let bad = KvDocument::parse("eta1 = [0.1, 0.2]\n").unwrap();
        assert!(Bounds::from_document(&bad).is_err());
        let bad = KvDocument::parse("nonsense = 1.0\n").unwrap();
        assert!(matches!(Bounds::from_document(&bad), Err(Error::UnknownKey(_))));
    }

    fn exact(params: &ModelParams, chis: &[f64], rel_se: f64) -> Dataset {
        let pts = predict_curves(params, chis, DetectionMode::Single).unwrap();
        let m = |v: f64| Measured {
            value: v,
            se: rel_se * v,
        };
        Dataset {
            points: pts
                .iter()
                .map(|c| DataPoint {
                    p1: m(c.p1),
                    g12: m(c.g12.unwrap()),
                    qc: m(c.qc.unwrap()),
                    p12: m(c.p12),
                    w: Some(m(c.w.unwrap())),
                    flags: vec![],
                })
                .collect(),
        }
    }

    #[test]
    fn fit_recovers_noiseless_truth() {
        let truth = ModelParams::reference_regime();
        let chis: Vec<f64> = (0..10).map(|i| 1e-5 * 10f64.powf(i as f64 / 3.0)).collect();
        let ds = exact(&truth, &chis, 0.01);
        let init = ModelParams {
            bg1_coherent: 1e-4,
            bg2_coherent: 1e-2,
            bg1_incoherent: 1e-6,
            bg2_incoherent: 1e-5,
            retrieval_eff: 0.3,
            ..truth
        };
        let options = FitOptions {
            starts: 8,
            ..FitOptions::default()
        };
        let r = fit(&ds, &init, &Bounds::default(), &options).unwrap();
        assert!(!r.flagged, "{:?}", r.warnings);
        for key in [
            "bg1_coherent",
            "bg2_coherent",
            "bg1_incoherent",
            "bg2_incoherent",
            "retrieval_eff",
        ] {
            let (got, want) = (r.value(key).unwrap(), truth.get(key).unwrap());
            assert!((got / want - 1.0).abs() < 1e-3, "{key}: {got} vs {want}");
        }
        assert!(r.objective < 1e-6);
        // covariance is symmetric PSD
        let c = DMatrix::from_fn(5, 5, |i, j| r.covariance[i][j]);
        assert!((&c - c.transpose()).abs().max() < 1e-30);
        assert!(SymmetricEigen::new(c).eigenvalues.iter().all(|l| *l >= -1e-20));
    }

    #[test]
    fn fit_is_reproducible_and_respects_bounds() {
        let truth = ModelParams::reference_regime();
        let ds = exact(&truth, &[1e-4, 1e-3, 1e-2, 0.05], 0.05);
        let mut bounds = Bounds::default();
        bounds.set("retrieval_eff", Bound::Range { lo: 0.55, hi: 0.9 });
        let options = FitOptions {
            starts: 4,
            seed: 11,
            ..FitOptions::default()
        };
        let a = fit(&ds, &truth, &bounds, &options).unwrap();
        let b = fit(&ds, &truth, &bounds, &options).unwrap();
        assert_eq!(a, b);
        assert!(a.params.retrieval_eff >= 0.55 && a.params.retrieval_eff <= 0.9);
        for key in &a.free {
            let (lo, hi) = bounds.range(key).unwrap();
            let v = a.value(key).unwrap();
            assert!(v >= lo && v <= hi, "{key}");
        }
    }

    #[test]
    fn single_point_is_flagged() {
        let truth = ModelParams::reference_regime();
        let ds = exact(&truth, &[1e-3], 0.05);
        let options = FitOptions {
            starts: 2,
            ..FitOptions::default()
        };
        let r = fit(&ds, &truth, &Bounds::default(), &options).unwrap();
        assert!(r.flagged);
        assert!(r.warnings[0].contains("under-determined"));
        assert!(r.dof <= 0);
    }

    #[test]
    fn fixed_parameters_are_not_fitted() {
        let truth = ModelParams::reference_regime();
        let ds = exact(&truth, &[1e-4, 1e-3, 1e-2], 0.05);
        let mut bounds = Bounds::default();
        for key in ["bg1_coherent", "bg2_coherent", "bg1_incoherent", "bg2_incoherent"] {
            bounds.set(key, Bound::Fixed(truth.get(key).unwrap()));
        }
        let r = fit(
            &ds,
            &ModelParams {
                retrieval_eff: 0.2,
                ..truth
            },
            &bounds,
            &FitOptions {
                starts: 2,
                ..FitOptions::default()
            },
        )
        .unwrap();
        assert_eq!(r.free, vec!["retrieval_eff".to_string()]);
        assert!((r.params.retrieval_eff - 0.5).abs() < 1e-5);
        let doc = KvDocument::parse(&r.to_document_string()).unwrap();
        assert!(doc.number("retrieval_eff_se").unwrap().unwrap() > 0.0);
        assert!(r.covariance_csv().starts_with("param,retrieval_eff\n"));
    }
}

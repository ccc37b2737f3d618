//! Physical parameters of the pair-source model and the detection layouts.
//!
//! Everything downstream (analytic engine, Monte Carlo, fitter) consumes the
//! per-detector reduction in [`ChannelModel`]: for each detector, the
//! probability that a single pair photon reaches it and the Poisson mean of
//! background counts it sees in one trial.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::KvDocument;

/// Source, background and detection parameters.
///
/// `chi` is the weight ratio of successive photon-number pairs in the
/// two-mode squeezed state, so `P(n pairs) = (1 - chi) chi^n`. Coherent
/// backgrounds are quoted at `chi_ref` and scale linearly with `chi`;
/// incoherent backgrounds are write-independent and quoted per detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub chi: f64,
    pub bg1_coherent: f64,
    pub bg2_coherent: f64,
    pub bg1_incoherent: f64,
    pub bg2_incoherent: f64,
    pub chi_ref: f64,
    pub retrieval_eff: f64,
    pub eta1: f64,
    pub eta2_path: f64,
    pub eta_apd: f64,
    pub bs_transmission: f64,
    pub bs_ratio: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            chi: 0.01,
            bg1_coherent: 0.0,
            bg2_coherent: 0.0,
            bg1_incoherent: 0.0,
            bg2_incoherent: 0.0,
            chi_ref: 0.01,
            retrieval_eff: 0.5,
            eta1: 0.25,
            eta2_path: 0.5,
            eta_apd: 0.5,
            bs_transmission: 0.8,
            bs_ratio: 0.5,
        }
    }
}

/// Canonical key order of the flat parameter document.
pub const PARAM_KEYS: [&str; 12] = [
    "chi",
    "bg1_coherent",
    "bg2_coherent",
    "bg1_incoherent",
    "bg2_incoherent",
    "chi_ref",
    "retrieval_eff",
    "eta1",
    "eta2_path",
    "eta_apd",
    "bs_transmission",
    "bs_ratio",
];

impl ModelParams {
    /// Low-noise operating point with a 50% single-excitation retrieval and a
    /// field-2 background large enough that the naive `p2/p1` ratio exceeds one.
    pub fn reference_regime() -> Self {
        ModelParams {
            chi: 1.0e-3,
            bg1_coherent: 2.0e-5,
            bg2_coherent: 1.3e-3,
            bg1_incoherent: 3.0e-7,
            bg2_incoherent: 5.0e-6,
            chi_ref: 1.0e-3,
            ..ModelParams::default()
        }
    }

    pub fn with_chi(&self, chi: f64) -> Self {
        ModelParams { chi, ..*self }
    }

    /// Field-2 efficiency from the ensemble output to a click in single mode.
    pub fn eta2(&self) -> f64 {
        self.eta2_path * self.eta_apd
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        Some(match key {
            "chi" => self.chi,
            "bg1_coherent" => self.bg1_coherent,
            "bg2_coherent" => self.bg2_coherent,
            "bg1_incoherent" => self.bg1_incoherent,
            "bg2_incoherent" => self.bg2_incoherent,
            "chi_ref" => self.chi_ref,
            "retrieval_eff" => self.retrieval_eff,
            "eta1" => self.eta1,
            "eta2_path" => self.eta2_path,
            "eta_apd" => self.eta_apd,
            "bs_transmission" => self.bs_transmission,
            "bs_ratio" => self.bs_ratio,
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        let slot = match key {
            "chi" => &mut self.chi,
            "bg1_coherent" => &mut self.bg1_coherent,
            "bg2_coherent" => &mut self.bg2_coherent,
            "bg1_incoherent" => &mut self.bg1_incoherent,
            "bg2_incoherent" => &mut self.bg2_incoherent,
            "chi_ref" => &mut self.chi_ref,
            "retrieval_eff" => &mut self.retrieval_eff,
            "eta1" => &mut self.eta1,
            "eta2_path" => &mut self.eta2_path,
            "eta_apd" => &mut self.eta_apd,
            "bs_transmission" => &mut self.bs_transmission,
            "bs_ratio" => &mut self.bs_ratio,
            _ => return Err(Error::UnknownKey(key.to_string())),
        };
        *slot = value;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for key in PARAM_KEYS {
            let v = self.get(key).expect("canonical key");
            if !v.is_finite() {
                return Err(Error::param(key, "must be finite"));
            }
        }
        if !(0.0..1.0).contains(&self.chi) {
            return Err(Error::param("chi", "must lie in [0, 1)"));
        }
        if self.chi_ref <= 0.0 || self.chi_ref >= 1.0 {
            return Err(Error::param("chi_ref", "must lie in (0, 1)"));
        }
        for key in ["bg1_coherent", "bg2_coherent", "bg1_incoherent", "bg2_incoherent"] {
            if self.get(key).unwrap() < 0.0 {
                return Err(Error::param(key, "background means must be >= 0"));
            }
        }
        for key in [
            "retrieval_eff",
            "eta1",
            "eta2_path",
            "eta_apd",
            "bs_transmission",
            "bs_ratio",
        ] {
            let v = self.get(key).unwrap();
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::param(key, "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Reads a flat `key = value` document. Keys not listed in
    /// [`PARAM_KEYS`] are rejected unless `extra` accepts them.
    pub fn from_document(doc: &KvDocument, extra: &[&str]) -> Result<Self> {
        let mut params = ModelParams::default();
        for (key, _) in doc.iter() {
            if extra.contains(&key) {
                continue;
            }
            let value = doc.number(key)?.expect("key present");
            params.set(key, value)?;
        }
        params.validate()?;
        Ok(params)
    }

    pub fn to_document_string(&self) -> String {
        let mut out = String::new();
        for key in PARAM_KEYS {
            let _ = writeln!(out, "{key} = {}", crate::kv::format_float(self.get(key).unwrap()));
        }
        out
    }
}

impl FromStr for ModelParams {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelParams::from_document(&KvDocument::parse(s)?, &[])
    }
}

/// Which field-2 detection layout is installed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectionMode {
    /// D1 and a single field-2 detector D2.
    Single,
    /// D1 plus a fiber splitter feeding D2a and D2b.
    Split,
}

impl FromStr for DetectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "single" => Ok(DetectionMode::Single),
            "split" => Ok(DetectionMode::Split),
            other => Err(Error::param("mode", format!("expected single|split, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for DetectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DetectionMode::Single => "single",
            DetectionMode::Split => "split",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionConfig {
    pub mode: DetectionMode,
}

/// Click efficiencies of the installed detectors, from the ensemble output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DetectorEfficiencies {
    Single { d1: f64, d2: f64 },
    Split { d1: f64, d2a: f64, d2b: f64 },
}

impl DetectionConfig {
    pub const SINGLE: DetectionConfig = DetectionConfig {
        mode: DetectionMode::Single,
    };
    pub const SPLIT: DetectionConfig = DetectionConfig {
        mode: DetectionMode::Split,
    };

    pub fn new(mode: DetectionMode) -> Self {
        DetectionConfig { mode }
    }

    pub fn efficiencies(&self, p: &ModelParams) -> DetectorEfficiencies {
        match self.mode {
            DetectionMode::Single => DetectorEfficiencies::Single {
                d1: p.eta1,
                d2: p.eta2_path * p.eta_apd,
            },
            DetectionMode::Split => {
                let arm = p.eta2_path * p.bs_transmission * p.eta_apd;
                DetectorEfficiencies::Split {
                    d1: p.eta1,
                    d2a: arm * p.bs_ratio,
                    d2b: arm * (1.0 - p.bs_ratio),
                }
            }
        }
    }

    /// Total field-2 detection efficiency: the `eta` in `p_c = eta q_c`.
    pub fn field2_efficiency(&self, p: &ModelParams) -> f64 {
        match self.efficiencies(p) {
            DetectorEfficiencies::Single { d2, .. } => d2,
            DetectorEfficiencies::Split { d2a, d2b, .. } => d2a + d2b,
        }
    }
}

/// One detector as seen by a trial: the probability that a given pair photon
/// registers there, and the Poisson mean of background photons/dark counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Channel {
    pub pair_prob: f64,
    pub bg_mean: f64,
}

impl Channel {
    /// Probability that background alone leaves the detector silent.
    pub fn bg_silent(&self) -> f64 {
        (-self.bg_mean).exp()
    }

    /// Probability that background alone fires the detector.
    pub fn bg_click(&self) -> f64 {
        -(-self.bg_mean).exp_m1()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Field2Channels {
    Single(Channel),
    Split { a: Channel, b: Channel },
}

/// Per-trial reduction of [`ModelParams`] under a [`DetectionConfig`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelModel {
    pub chi: f64,
    pub d1: Channel,
    pub field2: Field2Channels,
}

impl ChannelModel {
    pub fn new(p: &ModelParams, config: &DetectionConfig) -> Self {
        let drive = p.chi / p.chi_ref;
        let coh1 = p.bg1_coherent * drive;
        let coh2 = p.bg2_coherent * drive;
        let eps = p.retrieval_eff;
        match config.efficiencies(p) {
            DetectorEfficiencies::Single { d1, d2 } => ChannelModel {
                chi: p.chi,
                d1: Channel {
                    pair_prob: d1,
                    bg_mean: d1 * coh1 + p.bg1_incoherent,
                },
                field2: Field2Channels::Single(Channel {
                    pair_prob: eps * d2,
                    bg_mean: d2 * coh2 + p.bg2_incoherent,
                }),
            },
            DetectorEfficiencies::Split { d1, d2a, d2b } => ChannelModel {
                chi: p.chi,
                d1: Channel {
                    pair_prob: d1,
                    bg_mean: d1 * coh1 + p.bg1_incoherent,
                },
                field2: Field2Channels::Split {
                    a: Channel {
                        pair_prob: eps * d2a,
                        bg_mean: d2a * coh2 + p.bg2_incoherent,
                    },
                    b: Channel {
                        pair_prob: eps * d2b,
                        bg_mean: d2b * coh2 + p.bg2_incoherent,
                    },
                },
            },
        }
    }

    pub fn mode(&self) -> DetectionMode {
        match self.field2 {
            Field2Channels::Single(_) => DetectionMode::Single,
            Field2Channels::Split { .. } => DetectionMode::Split,
        }
    }

    /// Field-2 arms merged into one effective detector.
    pub fn field2_combined(&self) -> Channel {
        match self.field2 {
            Field2Channels::Single(c) => c,
            Field2Channels::Split { a, b } => Channel {
                pair_prob: a.pair_prob + b.pair_prob,
                bg_mean: a.bg_mean + b.bg_mean,
            },
        }
    }
}

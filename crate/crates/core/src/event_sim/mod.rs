//! Seeded Monte Carlo generation of per-trial detector clicks.
//!
//! Every trial draws from its own generator keyed by `(seed, trial_index)`,
//! so the output is a pure function of the session spec no matter how the
//! trial range is split across threads.

mod records;
mod schedule;

pub use records::{
    read_records, sniff_format, write_records, BinaryRecordReader, CsvRecordReader, DetectionRecord, DetectorId,
    RecordFormat, RecordStream, CSV_HEADER, HEADER_LEN, MAGIC, RECORD_LEN, VERSION,
};
pub use schedule::{TrialSchedule, SCHEDULE_KEYS};

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlator::CountTable;
use crate::error::{Error, Result};
use crate::params::{ChannelModel, DetectionConfig, DetectionMode, Field2Channels, ModelParams};

/// Trials handed to one worker at a time.
const CHUNK: u64 = 1 << 15;

/// Detectors that fired in one trial, as a bit set over [`DetectorId`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ClickSet(u8);

impl ClickSet {
    pub const EMPTY: ClickSet = ClickSet(0);

    pub fn insert(&mut self, d: DetectorId) {
        self.0 |= 1 << d as u8;
    }

    pub fn contains(self, d: DetectorId) -> bool {
        self.0 & (1 << d as u8) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = DetectorId> {
        [DetectorId::D1, DetectorId::D2, DetectorId::D2a, DetectorId::D2b]
            .into_iter()
            .filter(move |d| self.contains(*d))
    }
}

pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator dedicated to one trial.
pub fn trial_rng(seed: u64, trial_index: u64) -> Xoshiro256PlusPlus {
    let key = mix64(seed ^ mix64(trial_index.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    Xoshiro256PlusPlus::seed_from_u64(key)
}

/// Precomputed per-trial sampling probabilities.
#[derive(Debug, Clone, Copy)]
pub struct TrialSampler {
    ln_chi: Option<f64>,
    d1_pair: f64,
    d1_bg: f64,
    field2: Field2Sampler,
}

#[derive(Debug, Clone, Copy)]
enum Field2Sampler {
    Single {
        pair: f64,
        bg: f64,
    },
    Split {
        pair_a: f64,
        pair_b: f64,
        bg_a: f64,
        bg_b: f64,
    },
}

impl TrialSampler {
    pub fn new(params: &ModelParams, config: &DetectionConfig) -> Result<Self> {
        params.validate()?;
        Ok(Self::from_channels(&ChannelModel::new(params, config)))
    }

    pub fn from_channels(m: &ChannelModel) -> Self {
        let field2 = match m.field2 {
            Field2Channels::Single(c) => Field2Sampler::Single {
                pair: c.pair_prob,
                bg: c.bg_click(),
            },
            Field2Channels::Split { a, b } => Field2Sampler::Split {
                pair_a: a.pair_prob,
                pair_b: b.pair_prob,
                bg_a: a.bg_click(),
                bg_b: b.bg_click(),
            },
        };
        TrialSampler {
            ln_chi: (m.chi > 0.0).then(|| m.chi.ln()),
            d1_pair: m.d1.pair_prob,
            d1_bg: m.d1.bg_click(),
            field2,
        }
    }

    /// One trial: geometric pair number, per-photon thinning and routing,
    /// then independent background counts per detector.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ClickSet {
        let u: f64 = 1.0 - rng.random::<f64>();
        let n = match self.ln_chi {
            // P(n >= k) = chi^k
            Some(l) => (u.ln() / l).floor().min(1e6) as u32,
            None => 0,
        };
        let mut clicks = ClickSet::EMPTY;
        for _ in 0..n {
            if rng.random::<f64>() < self.d1_pair {
                clicks.insert(DetectorId::D1);
            }
        }
        match self.field2 {
            Field2Sampler::Single { pair, bg } => {
                for _ in 0..n {
                    if rng.random::<f64>() < pair {
                        clicks.insert(DetectorId::D2);
                    }
                }
                if rng.random::<f64>() < self.d1_bg {
                    clicks.insert(DetectorId::D1);
                }
                if rng.random::<f64>() < bg {
                    clicks.insert(DetectorId::D2);
                }
            }
            Field2Sampler::Split {
                pair_a,
                pair_b,
                bg_a,
                bg_b,
            } => {
                for _ in 0..n {
                    let v = rng.random::<f64>();
                    if v < pair_a {
                        clicks.insert(DetectorId::D2a);
                    } else if v < pair_a + pair_b {
                        clicks.insert(DetectorId::D2b);
                    }
                }
                if rng.random::<f64>() < self.d1_bg {
                    clicks.insert(DetectorId::D1);
                }
                if rng.random::<f64>() < bg_a {
                    clicks.insert(DetectorId::D2a);
                }
                if rng.random::<f64>() < bg_b {
                    clicks.insert(DetectorId::D2b);
                }
            }
        }
        clicks
    }
}

/// Samples the clicks of a single trial.
pub fn sample_trial<R: Rng + ?Sized>(params: &ModelParams, config: &DetectionConfig, rng: &mut R) -> Result<ClickSet> {
    Ok(TrialSampler::new(params, config)?.sample(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub params: ModelParams,
    pub config: DetectionConfig,
    pub schedule: TrialSchedule,
    pub n_trials: u64,
    pub seed: u64,
}

impl SessionSpec {
    pub fn new(params: ModelParams, mode: DetectionMode, n_trials: u64, seed: u64) -> Self {
        SessionSpec {
            params,
            config: DetectionConfig::new(mode),
            schedule: TrialSchedule::default(),
            n_trials,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.schedule.validate()
    }
}

fn chunks(n_trials: u64) -> impl IndexedParallelIterator<Item = (u64, u64)> {
    let n_chunks = n_trials.div_ceil(CHUNK);
    (0..n_chunks)
        .map(|c| (c * CHUNK, ((c + 1) * CHUNK).min(n_trials)))
        .collect::<Vec<_>>()
        .into_par_iter()
}

/// Generates the full timestamped record stream of a session.
pub fn run_session(spec: &SessionSpec) -> Result<RecordStream> {
    spec.validate()?;
    let sampler = TrialSampler::new(&spec.params, &spec.config)?;
    let f1 = spec.schedule.field1_offset_ns();
    let f2 = spec.schedule.field2_offset_ns();
    let per_chunk: Vec<Vec<DetectionRecord>> = chunks(spec.n_trials)
        .map(|(lo, hi)| {
            let mut out = Vec::new();
            for t in lo..hi {
                let clicks = sampler.sample(&mut trial_rng(spec.seed, t));
                for d in clicks.iter() {
                    out.push(DetectionRecord {
                        trial_index: t,
                        detector: d,
                        offset_ns: if d == DetectorId::D1 { f1 } else { f2 },
                    });
                }
            }
            out
        })
        .collect();
    Ok(RecordStream {
        mode: spec.config.mode,
        n_trials: spec.n_trials,
        records: per_chunk.concat(),
    })
}

/// Same trials as [`run_session`], tallied straight into a count table
/// without materializing records.
pub fn simulate_counts(spec: &SessionSpec) -> Result<CountTable> {
    spec.validate()?;
    let sampler = TrialSampler::new(&spec.params, &spec.config)?;
    let mode = spec.config.mode;
    let tables: Vec<CountTable> = chunks(spec.n_trials)
        .map(|(lo, hi)| {
            let mut table = CountTable::new(mode);
            for t in lo..hi {
                table.add_trial(sampler.sample(&mut trial_rng(spec.seed, t)));
            }
            table
        })
        .collect();
    tables
        .into_iter()
        .try_fold(CountTable::new(mode), |acc, t| acc.merge(&t))
        .map_err(|e| Error::ModeMismatch(e.to_string()))
}

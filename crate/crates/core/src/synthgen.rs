//! Seeded synthetic prediction streams.
//!
//! Every case draws a length and a binary outcome, then for every prefix and
//! base model flips a coin with the accuracy `p` of the configured curve
//! (shifted by any drift segment covering the case). A correct base model
//! predicts with the sign of the true class, a wrong one with the opposite
//! sign. Prediction magnitudes are jitter only.
//!
//! Case `k` draws from its own ChaCha substream `(seed, k)`, so output does
//! not depend on generation order.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::stream::{
    aggregate_stream, BasePredictionMatrix, CaseTruth, PredictionStream, DEFAULT_EXPECTED_OUTCOME,
};
use crate::{Error, Result};

/// Per-base-model probability of predicting the correct sign, as a function
/// of the relative prefix length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AccuracyCurve {
    Monotone {
        p_start: f64,
        p_end: f64,
    },
    DropRecover {
        p_hi: f64,
        p_lo: f64,
        drop_at: f64,
        recover_at: f64,
    },
    DropNoRecover {
        p_hi: f64,
        p_lo: f64,
        drop_at: f64,
    },
    ZigZag {
        p_hi: f64,
        p_lo: f64,
    },
}

impl AccuracyCurve {
    pub fn validate(&self) -> Result<()> {
        let prob = |v: f64| (0.0..=1.0).contains(&v);
        let pos = |v: f64| v > 0.0 && v <= 1.0;
        let ok = match *self {
            AccuracyCurve::Monotone { p_start, p_end } => prob(p_start) && prob(p_end),
            AccuracyCurve::DropRecover {
                p_hi,
                p_lo,
                drop_at,
                recover_at,
            } => prob(p_hi) && prob(p_lo) && pos(drop_at) && pos(recover_at) && drop_at <= recover_at,
            AccuracyCurve::DropNoRecover { p_hi, p_lo, drop_at } => prob(p_hi) && prob(p_lo) && pos(drop_at),
            AccuracyCurve::ZigZag { p_hi, p_lo } => prob(p_hi) && prob(p_lo),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid accuracy curve {self}")))
        }
    }
}

impl fmt::Display for AccuracyCurve {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            AccuracyCurve::Monotone { p_start, p_end } => write!(f, "monotone({p_start},{p_end})"),
            AccuracyCurve::DropRecover {
                p_hi,
                p_lo,
                drop_at,
                recover_at,
            } => write!(f, "drop_recover({p_hi},{p_lo},{drop_at},{recover_at})"),
            AccuracyCurve::DropNoRecover { p_hi, p_lo, drop_at } => {
                write!(f, "drop_no_recover({p_hi},{p_lo},{drop_at})")
            }
            AccuracyCurve::ZigZag { p_hi, p_lo } => write!(f, "zigzag({p_hi},{p_lo})"),
        }
    }
}

impl FromStr for AccuracyCurve {
    type Err = Error;

    /// Parses the `Display` form, e.g. `monotone(0.55,0.95)`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse accuracy curve `{s}`"));
        let s = s.trim();
        let open = s.find('(').ok_or_else(bad)?;
        let inner = s[open + 1..].strip_suffix(')').ok_or_else(bad)?;
        let args = inner
            .split(',')
            .map(|a| a.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        let curve = match (&s[..open], args.as_slice()) {
            ("monotone", &[p_start, p_end]) => AccuracyCurve::Monotone { p_start, p_end },
            ("drop_recover", &[p_hi, p_lo, drop_at, recover_at]) => AccuracyCurve::DropRecover {
                p_hi,
                p_lo,
                drop_at,
                recover_at,
            },
            ("drop_no_recover", &[p_hi, p_lo, drop_at]) => {
                AccuracyCurve::DropNoRecover { p_hi, p_lo, drop_at }
            }
            ("zigzag", &[p_hi, p_lo]) => AccuracyCurve::ZigZag { p_hi, p_lo },
            _ => return Err(bad()),
        };
        curve.validate()?;
        Ok(curve)
    }
}

/// Accuracy of the curve at relative position `tau` of prefix `prefix`.
/// Only the zig-zag shape looks at the integer prefix.
pub fn curve_eval(curve: &AccuracyCurve, tau: f64, prefix: usize) -> f64 {
    match *curve {
        AccuracyCurve::Monotone { p_start, p_end } => p_start + (p_end - p_start) * tau,
        AccuracyCurve::DropRecover {
            p_hi,
            p_lo,
            drop_at,
            recover_at,
        } => {
            if tau < drop_at {
                p_hi
            } else if tau < recover_at {
                p_lo
            } else if recover_at >= 1.0 {
                p_hi
            } else {
                p_lo + (p_hi - p_lo) * (tau - recover_at) / (1.0 - recover_at)
            }
        }
        AccuracyCurve::DropNoRecover { p_hi, p_lo, drop_at } => {
            if tau < drop_at {
                p_hi
            } else {
                p_lo
            }
        }
        AccuracyCurve::ZigZag { p_hi, p_lo } => {
            if prefix % 2 == 1 {
                p_hi
            } else {
                p_lo
            }
        }
    }
}

/// Additive accuracy shift for cases `start_case..end_case` (0-based, end exclusive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftSegment {
    pub start_case: usize,
    pub end_case: usize,
    pub accuracy_offset: f64,
}

impl FromStr for DriftSegment {
    type Err = Error;

    /// `start:end:offset`, e.g. `500:1000:-0.3`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse drift segment `{s}` (start:end:offset)"));
        let parts: Vec<&str> = s.trim().split(':').collect();
        let [start, end, offset] = parts.as_slice() else {
            return Err(bad());
        };
        Ok(DriftSegment {
            start_case: start.trim().parse().map_err(|_| bad())?,
            end_case: end.trim().parse().map_err(|_| bad())?,
            accuracy_offset: offset.trim().parse().map_err(|_| bad())?,
        })
    }
}

impl fmt::Display for DriftSegment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}:{}",
            self.start_case, self.end_case, self.accuracy_offset
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LengthLaw {
    Constant(usize),
    Uniform { min: usize, max: usize },
}

impl LengthLaw {
    fn max_len(&self) -> usize {
        match *self {
            LengthLaw::Constant(l) => l,
            LengthLaw::Uniform { max, .. } => max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_cases: usize,
    pub deviation_rate: f64,
    pub length_law: LengthLaw,
    pub ensemble_size: usize,
    pub curve: AccuracyCurve,
    pub drift: Vec<DriftSegment>,
    /// Magnitude of the jitter of base predictions around their class anchor.
    pub noise_amplitude: f64,
    pub seed: u64,
    pub expected_outcome: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_cases: 1000,
            deviation_rate: 0.3,
            length_law: LengthLaw::Uniform { min: 5, max: 20 },
            ensemble_size: 20,
            curve: AccuracyCurve::Monotone {
                p_start: 0.55,
                p_end: 0.95,
            },
            drift: Vec::new(),
            noise_amplitude: 0.3,
            seed: 0,
            expected_outcome: DEFAULT_EXPECTED_OUTCOME,
        }
    }
}

/// Named dataset-like regimes. Deviation rates and maximum prefix lengths
/// follow the public event logs they are named after; the curves only mimic
/// the qualitative accuracy shapes.
pub const PRESETS: [&str; 4] = ["bpic12-like", "bpic17rf-like", "traffic-rf-like", "cargo-like"];

impl GeneratorConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = GeneratorConfig::default();
        let cfg = match name {
            "bpic12-like" => GeneratorConfig {
                deviation_rate: 0.25,
                length_law: LengthLaw::Uniform { min: 3, max: 48 },
                curve: AccuracyCurve::Monotone {
                    p_start: 0.55,
                    p_end: 0.9,
                },
                ..base
            },
            "bpic17rf-like" => GeneratorConfig {
                deviation_rate: 0.41,
                length_law: LengthLaw::Uniform { min: 10, max: 71 },
                curve: AccuracyCurve::DropNoRecover {
                    p_hi: 0.85,
                    p_lo: 0.6,
                    drop_at: 40.0 / 71.0,
                },
                ..base
            },
            "traffic-rf-like" => GeneratorConfig {
                deviation_rate: 0.58,
                length_law: LengthLaw::Uniform { min: 2, max: 5 },
                curve: AccuracyCurve::DropRecover {
                    p_hi: 0.8,
                    p_lo: 0.55,
                    drop_at: 0.4,
                    recover_at: 0.8,
                },
                ..base
            },
            "cargo-like" => GeneratorConfig {
                deviation_rate: 0.31,
                length_law: LengthLaw::Uniform { min: 4, max: 21 },
                curve: AccuracyCurve::ZigZag { p_hi: 0.8, p_lo: 0.6 },
                ..base
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_cases == 0 {
            return fail("n_cases must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.deviation_rate) {
            return fail(format!("deviation_rate {} outside [0, 1]", self.deviation_rate));
        }
        match self.length_law {
            LengthLaw::Constant(0) => return fail("case length must be >= 1".into()),
            LengthLaw::Uniform { min, max } if min < 1 || max < min => {
                return fail(format!("invalid length range {min}..={max}"))
            }
            _ => {}
        }
        if self.ensemble_size == 0 {
            return fail("ensemble_size must be positive".into());
        }
        self.curve.validate()?;
        if !(self.noise_amplitude > 0.0 && self.noise_amplitude <= 0.5) {
            return fail(format!(
                "noise_amplitude {} outside (0, 0.5]",
                self.noise_amplitude
            ));
        }
        if !(self.expected_outcome.is_finite() && self.expected_outcome > 0.0) {
            return fail(format!(
                "expected_outcome must be positive, got {}",
                self.expected_outcome
            ));
        }
        let mut segments = self.drift.clone();
        segments.sort_by_key(|s| s.start_case);
        for s in &segments {
            if s.start_case >= s.end_case || !s.accuracy_offset.is_finite() {
                return fail(format!("invalid drift segment {s}"));
            }
        }
        if segments.windows(2).any(|w| w[1].start_case < w[0].end_case) {
            return fail("drift segments overlap".into());
        }
        Ok(())
    }

    pub fn drift_offset(&self, case_index: usize) -> f64 {
        self.drift
            .iter()
            .find(|s| (s.start_case..s.end_case).contains(&case_index))
            .map_or(0.0, |s| s.accuracy_offset)
    }

    /// Parses a `key = value` file on top of `self`. `#` starts a comment.
    pub fn apply_kv_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (key, value) in parse_kv(&text)? {
            self.set(&key, &value)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Config(format!("`{key}` expects a number, got `{v}`")))
        };
        let int = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("`{key}` expects an integer, got `{v}`")))
        };
        match key {
            "preset" => {
                let seed = self.seed;
                let n = self.n_cases;
                *self = GeneratorConfig::preset(value)?;
                self.seed = seed;
                self.n_cases = n;
            }
            "n_cases" => self.n_cases = int(value)?,
            "deviation_rate" => self.deviation_rate = num(value)?,
            "length" => self.length_law = LengthLaw::Constant(int(value)?),
            "length_min" | "length_max" => {
                let (mut min, mut max) = match self.length_law {
                    LengthLaw::Constant(l) => (l, l),
                    LengthLaw::Uniform { min, max } => (min, max),
                };
                if key == "length_min" {
                    min = int(value)?;
                } else {
                    max = int(value)?;
                }
                self.length_law = LengthLaw::Uniform { min, max };
            }
            "ensemble_size" => self.ensemble_size = int(value)?,
            "curve" => self.curve = value.parse()?,
            "drift" => {
                self.drift = value
                    .split(';')
                    .filter(|s| !s.trim().is_empty())
                    .map(str::parse)
                    .collect::<Result<Vec<_>>>()?
            }
            "noise_amplitude" => self.noise_amplitude = num(value)?,
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| Error::Config(format!("`seed` expects a u64, got `{value}`")))?
            }
            "expected_outcome" | "A" => self.expected_outcome = num(value)?,
            other => return Err(Error::Config(format!("unknown generator key `{other}`"))),
        }
        Ok(())
    }
}

/// Splits `key = value` lines, skipping blanks and `#` comments.
pub(crate) fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: idx as u64 + 1,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Generated base predictions and ground truth, in arrival order.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub matrices: Vec<BasePredictionMatrix>,
    pub truths: Vec<CaseTruth>,
}

impl GeneratedData {
    pub fn aggregate(&self) -> Result<PredictionStream> {
        let a = self
            .matrices
            .first()
            .map_or(DEFAULT_EXPECTED_OUTCOME, |m| m.expected_outcome);
        aggregate_stream(&self.matrices, &self.truths, a)
    }
}

fn case_rng(seed: u64, case_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(case_index as u64);
    rng
}

/// Cases per block with a fixed number of deviations.
pub const DEVIATION_BLOCK: usize = 100;

/// Deviation flags: each block of [`DEVIATION_BLOCK`] consecutive cases holds
/// exactly `round(rate * block)` deviations at random positions, so every
/// block-aligned slice has the configured rate.
fn deviation_flags(config: &GeneratorConfig) -> Vec<bool> {
    let mut flags = Vec::with_capacity(config.n_cases);
    for (b, start) in (0..config.n_cases).step_by(DEVIATION_BLOCK).enumerate() {
        let size = DEVIATION_BLOCK.min(config.n_cases - start);
        let k = (config.deviation_rate * size as f64).round() as usize;
        let mut block: Vec<bool> = (0..size).map(|i| i < k).collect();
        // Case substreams use indices below 2^63; blocks use the upper half.
        let mut rng = case_rng(config.seed, (1usize << 63) | b);
        block.shuffle(&mut rng);
        flags.extend(block);
    }
    flags
}

pub fn generate(config: &GeneratorConfig) -> Result<GeneratedData> {
    config.validate()?;
    let flags = deviation_flags(config);
    let a = config.expected_outcome;
    let width = config
        .n_cases
        .to_string()
        .len()
        .max(config.length_law.max_len().to_string().len());
    let mut matrices = Vec::with_capacity(config.n_cases);
    let mut truths = Vec::with_capacity(config.n_cases);
    for (k, &deviation) in flags.iter().enumerate() {
        let mut rng = case_rng(config.seed, k);
        let l = match config.length_law {
            LengthLaw::Constant(l) => l,
            LengthLaw::Uniform { min, max } => rng.gen_range(min..=max),
        };
        let offset = config.drift_offset(k);
        let entries = (1..=l)
            .map(|j| {
                let p = (curve_eval(&config.curve, j as f64 / l as f64, j) + offset).clamp(0.0, 1.0);
                (0..config.ensemble_size)
                    .map(|_| {
                        let correct = rng.gen::<f64>() < p;
                        let jitter = rng.gen::<f64>() * config.noise_amplitude;
                        // |delta| = 1 - 2u stays in (0, 1] since u < 0.5.
                        let magnitude = 1.0 - 2.0 * jitter;
                        let positive = correct == deviation;
                        let delta = if positive { magnitude } else { -magnitude };
                        a * (1.0 + delta)
                    })
                    .collect()
            })
            .collect();
        let case_id = format!("case-{k:0width$}");
        matrices.push(BasePredictionMatrix {
            case_id: case_id.clone(),
            expected_outcome: a,
            entries,
        });
        truths.push(CaseTruth {
            case_id,
            y: if deviation { 1.0 } else { 0.0 },
            deviation,
            l,
        });
    }
    Ok(GeneratedData { matrices, truths })
}

/// Generates and aggregates in one step.
pub fn generate_stream(config: &GeneratorConfig) -> Result<PredictionStream> {
    generate(config)?.aggregate()
}

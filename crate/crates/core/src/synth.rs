//! Synthetic heat-pain protocol and electrodermal-activity generator.
//!
//! Each subject gets a calibrated pain threshold `T_P` and tolerance `T_T`,
//! from which five temperature levels follow. Every level is applied
//! `reps` times for `stimulus_secs`, in shuffled order, separated by random
//! pauses. The skin-conductance trace is a tonic level with slow drift, plus
//! one double-exponential phasic response per stimulus whose peak scales with
//! `(T_level - T_B) / (T_T - T_B)`, plus white Gaussian noise. One window is
//! cut per stimulus, starting at stimulus onset.
//!
//! The waveform is a stand-in for real recordings. The only property relied on
//! downstream is that response amplitude grows with the stimulus level.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::Rng;

/// Number of pain levels (baseline plus four heat stages).
pub const LEVELS: usize = 5;

/// How the four heat stages are spread between `T_P` and `T_T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TempMode {
    /// `T_i = T_P + (i - 1) * (T_T - T_P) / 4`, so `T_4` stops one step short of `T_T`.
    #[default]
    Verbatim,
    /// `T_i = T_P + (i - 1) * (T_T - T_P) / 3`, so `T_4 == T_T`.
    Endpoint,
}

impl TempMode {
    pub fn name(self) -> &'static str {
        match self {
            TempMode::Verbatim => "verbatim",
            TempMode::Endpoint => "endpoint",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "verbatim" => Some(TempMode::Verbatim),
            "endpoint" => Some(TempMode::Endpoint),
            _ => None,
        }
    }
}

/// Temperatures `[T_0, T_1, T_2, T_3, T_4]`; `T_0` is always the baseline.
pub fn temperature_stages(baseline: f64, pain: f64, tolerance: f64, mode: TempMode) -> Result<[f64; LEVELS]> {
    if !(pain < tolerance) {
        return Err(Error::Domain(format!(
            "pain threshold {pain} must be below tolerance {tolerance}"
        )));
    }
    let step = match mode {
        TempMode::Verbatim => (tolerance - pain) / 4.0,
        TempMode::Endpoint => (tolerance - pain) / 3.0,
    };
    let mut t = [baseline; LEVELS];
    for (i, ti) in t.iter_mut().enumerate().skip(1) {
        *ti = pain + (i - 1) as f64 * step;
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    /// Baseline skin temperature in degrees C.
    pub baseline_temp: f64,
    pub reps_per_level: usize,
    pub stimulus_secs: f64,
    /// Pause between stimuli, drawn uniformly from this range.
    pub interval_secs: (f64, f64),
    pub sample_rate: u32,
    pub window_secs: f64,
    pub temp_mode: TempMode,
    /// Per-subject `T_P ~ U(range)`.
    pub pain_threshold_range: (f64, f64),
    /// Per-subject `T_T - T_P ~ U(range)`.
    pub tolerance_offset_range: (f64, f64),
    pub rise_tau: f64,
    pub decay_tau: f64,
    /// Per-subject tonic skin-conductance level (microsiemens).
    pub tonic_range: (f64, f64),
    pub drift_amplitude: f64,
    pub drift_period_range: (f64, f64),
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            baseline_temp: 32.0,
            reps_per_level: 20,
            stimulus_secs: 4.0,
            interval_secs: (8.0, 12.0),
            sample_rate: 512,
            window_secs: 5.5,
            temp_mode: TempMode::Verbatim,
            pain_threshold_range: (40.0, 44.0),
            tolerance_offset_range: (4.0, 8.0),
            rise_tau: 0.75,
            decay_tau: 2.0,
            tonic_range: (1.9, 2.1),
            drift_amplitude: 0.1,
            drift_period_range: (200.0, 400.0),
        }
    }
}

impl ProtocolConfig {
    pub fn window_samples(&self) -> usize {
        libm::round(self.window_secs * self.sample_rate as f64) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.pain_threshold_range;
        let (olo, ohi) = self.tolerance_offset_range;
        let ok = self.baseline_temp < lo
            && lo <= hi
            && 0.0 < olo
            && olo <= ohi
            && self.reps_per_level > 0
            && self.stimulus_secs > 0.0
            && 0.0 <= self.interval_secs.0
            && self.interval_secs.0 <= self.interval_secs.1
            && self.sample_rate > 0
            && self.window_secs > 0.0
            && self.window_samples() > 0
            && 0.0 < self.rise_tau
            && self.rise_tau < self.decay_tau
            && self.tonic_range.0 <= self.tonic_range.1
            && self.drift_period_range.0 > 0.0
            && self.drift_period_range.0 <= self.drift_period_range.1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("inconsistent protocol configuration: {self:?}")))
        }
    }

    fn uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    }
}

/// One EDA window with its subject and raw pain level (0..=4).
#[derive(Debug, Clone, PartialEq)]
pub struct WindowRecord {
    pub subject_id: u16,
    pub level: u8,
    pub samples: Vec<f32>,
}

/// Calibration drawn for a subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectProfile {
    pub pain_threshold: f64,
    pub tolerance: f64,
    pub stages: [f64; LEVELS],
    pub tonic: f64,
}

/// Double-exponential skin-conductance response normalised to a unit peak.
#[derive(Debug, Clone, Copy)]
struct Response {
    rise: f64,
    decay: f64,
    norm: f64,
}

impl Response {
    fn new(rise: f64, decay: f64) -> Self {
        let peak_t = libm::log(decay / rise) * rise * decay / (decay - rise);
        let peak = libm::exp(-peak_t / decay) - libm::exp(-peak_t / rise);
        Self {
            rise,
            decay,
            norm: 1.0 / peak,
        }
    }

    fn at(&self, t: f64) -> f64 {
        if t < 0.0 {
            0.0
        } else {
            self.norm * (libm::exp(-t / self.decay) - libm::exp(-t / self.rise))
        }
    }
}

/// Generates one subject's windows: `reps_per_level` per level, in stimulus order.
///
/// Pure in `(cfg, seed, subject_id, noise, gain)`. Noise is drawn from its own
/// stream, so changing `noise` scales the same realisation.
pub fn generate_subject(
    cfg: &ProtocolConfig,
    seed: u64,
    subject_id: u16,
    noise: f64,
    gain: f64,
) -> Result<Vec<WindowRecord>> {
    Ok(generate_subject_with_profile(cfg, seed, subject_id, noise, gain)?.1)
}

pub fn generate_subject_with_profile(
    cfg: &ProtocolConfig,
    seed: u64,
    subject_id: u16,
    noise: f64,
    gain: f64,
) -> Result<(SubjectProfile, Vec<WindowRecord>)> {
    cfg.validate()?;
    if !(noise >= 0.0) || !(gain > 0.0) {
        return Err(Error::Domain(format!("noise {noise} must be >= 0 and gain {gain} > 0")));
    }
    let subject_seed = crate::derive_seed(seed, subject_id as u64);
    let mut rng = Rng::seed_from_u64(subject_seed);
    let mut noise_rng = Rng::seed_from_u64(crate::derive_seed(subject_seed, 0x4015E));

    let pain = ProtocolConfig::uniform(&mut rng, cfg.pain_threshold_range);
    let tolerance = pain + ProtocolConfig::uniform(&mut rng, cfg.tolerance_offset_range);
    let stages = temperature_stages(cfg.baseline_temp, pain, tolerance, cfg.temp_mode)?;
    let tonic = ProtocolConfig::uniform(&mut rng, cfg.tonic_range);
    let drift_period = ProtocolConfig::uniform(&mut rng, cfg.drift_period_range);
    let drift_phase = rng.random_range(0.0..core::f64::consts::TAU);

    let mut levels: Vec<u8> = (0..LEVELS as u8)
        .flat_map(|l| core::iter::repeat_n(l, cfg.reps_per_level))
        .collect();
    levels.shuffle(&mut rng);

    let rate = cfg.sample_rate as f64;
    let mut onsets = Vec::with_capacity(levels.len());
    let mut t = ProtocolConfig::uniform(&mut rng, cfg.interval_secs);
    for _ in &levels {
        onsets.push(t);
        t += cfg.stimulus_secs + ProtocolConfig::uniform(&mut rng, cfg.interval_secs);
    }
    let window = cfg.window_samples();
    let last_onset = libm::round(onsets.last().copied().unwrap_or(0.0) * rate) as usize;
    let total = last_onset + window + 1;

    let mut trace: Vec<f64> = (0..total)
        .map(|i| {
            let secs = i as f64 / rate;
            tonic + cfg.drift_amplitude * libm::sin(core::f64::consts::TAU * secs / drift_period + drift_phase)
        })
        .collect();

    let response = Response::new(cfg.rise_tau, cfg.decay_tau);
    let span = libm::ceil(12.0 * cfg.decay_tau * rate) as usize;
    for (&onset, &level) in onsets.iter().zip(&levels) {
        if level == 0 {
            continue;
        }
        let amplitude = gain * (stages[level as usize] - cfg.baseline_temp) / (tolerance - cfg.baseline_temp);
        let start = libm::round(onset * rate) as usize;
        for (i, v) in trace.iter_mut().enumerate().skip(start).take(span) {
            *v += amplitude * response.at((i - start) as f64 / rate);
        }
    }
    for v in trace.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut noise_rng);
        *v += noise * z;
    }

    let windows = onsets
        .iter()
        .zip(&levels)
        .map(|(&onset, &level)| {
            let start = libm::round(onset * rate) as usize;
            WindowRecord {
                subject_id,
                level,
                samples: trace[start..start + window].iter().map(|&v| v as f32).collect(),
            }
        })
        .collect();
    Ok((
        SubjectProfile {
            pain_threshold: pain,
            tolerance,
            stages,
            tonic,
        },
        windows,
    ))
}

/// Subjects `1..=count`, concatenated in subject order.
pub fn generate_cohort(cfg: &ProtocolConfig, seed: u64, count: u16, noise: f64, gain: f64) -> Result<Vec<WindowRecord>> {
    let mut all = Vec::with_capacity(count as usize * LEVELS * cfg.reps_per_level);
    for id in 1..=count {
        all.extend(generate_subject(cfg, seed, id, noise, gain)?);
    }
    Ok(all)
}

/// Number of windows per level in `records`.
pub fn level_counts(records: &[WindowRecord]) -> [usize; LEVELS] {
    let mut counts = [0; LEVELS];
    for r in records {
        if let Some(c) = counts.get_mut(r.level as usize) {
            *c += 1;
        }
    }
    counts
}

/// Mean of a window.
pub fn window_mean(samples: &[f32]) -> f64 {
    samples.iter().map(|&v| v as f64).sum::<f64>() / samples.len().max(1) as f64
}

/// Window mean minus the mean of its first `reference` samples.
pub fn onset_referenced_mean(samples: &[f32], reference: usize) -> f64 {
    let r = reference.clamp(1, samples.len().max(1));
    window_mean(samples) - window_mean(&samples[..r.min(samples.len())])
}

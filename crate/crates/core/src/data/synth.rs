use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::recording::Recording;
use crate::error::{Error, Result};
use crate::rng::named_rng;

/// Parameters of the synthetic multi-subject generator.
///
/// Subject, gesture and trial ids are numbered from 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_gestures: usize,
    pub trials: usize,
    pub duration_s: f64,
    pub sample_rate: f64,
    pub channels: usize,
    /// Standard deviation σ of the additive Gaussian noise.
    pub noise: f64,
    /// Subject-mixing strength α.
    pub mixing: f64,
    /// Sinusoids per gesture and channel.
    pub components: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 8,
            n_gestures: 4,
            trials: 3,
            duration_s: 1.0,
            sample_rate: 2048.0,
            channels: 8,
            noise: 0.1,
            mixing: 0.5,
            components: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("n_subjects", self.n_subjects),
            ("n_gestures", self.n_gestures),
            ("trials", self.trials),
        ] {
            if v < 2 {
                return Err(Error::invalid(field, format!("{v} must be >= 2")));
            }
        }
        if self.channels == 0 {
            return Err(Error::invalid("channels", "must be >= 1"));
        }
        if self.components == 0 {
            return Err(Error::invalid("components", "must be >= 1"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise", format!("σ = {} must be finite and >= 0", self.noise)));
        }
        if !(self.mixing >= 0.0 && self.mixing.is_finite()) {
            return Err(Error::invalid("mixing", format!("α = {} must be finite and >= 0", self.mixing)));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::invalid("sample_rate", format!("{} must be > 0", self.sample_rate)));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::invalid("duration_s", format!("{} must be > 0", self.duration_s)));
        }
        Ok(())
    }

    /// Samples per recording.
    pub fn samples(&self) -> usize {
        (self.duration_s * self.sample_rate).round() as usize
    }

    pub fn subject_ids(&self) -> Vec<u32> {
        (1..=self.n_subjects as u32).collect()
    }

    pub fn gesture_ids(&self) -> Vec<u32> {
        (1..=self.n_gestures as u32).collect()
    }
}

struct Tone {
    freq: f64,
    amp: f64,
}

/// Per-channel tones and a slow amplitude envelope of one gesture.
struct GestureSource {
    tones: Vec<Vec<Tone>>,
    envelope_freq: Vec<f64>,
    envelope_depth: Vec<f64>,
}

impl GestureSource {
    fn new(cfg: &SynthConfig, g: u32) -> Self {
        let mut rng = named_rng(cfg.seed, &format!("synth.gesture.{g}"));
        let nyquist = cfg.sample_rate / 2.0;
        let (lo, hi) = (20.0f64.min(nyquist * 0.1), 250.0f64.min(nyquist * 0.8));
        let mut tones = Vec::with_capacity(cfg.channels);
        let mut envelope_freq = Vec::with_capacity(cfg.channels);
        let mut envelope_depth = Vec::with_capacity(cfg.channels);
        for _ in 0..cfg.channels {
            tones.push(
                (0..cfg.components)
                    .map(|_| Tone {
                        freq: rng.random_range(lo..hi),
                        amp: rng.random_range(0.2..1.0),
                    })
                    .collect(),
            );
            envelope_freq.push(rng.random_range(0.5..4.0));
            envelope_depth.push(rng.random_range(0.0..0.8));
        }
        GestureSource {
            tones,
            envelope_freq,
            envelope_depth,
        }
    }

    /// `s_g(t)` for one trial as a row-major `T × D` buffer; phases depend on
    /// the trial only, so every subject shares the same latent signal.
    fn render(&self, cfg: &SynthConfig, g: u32, trial: u32) -> Vec<f64> {
        let mut rng = named_rng(cfg.seed, &format!("synth.phase.{g}.{trial}"));
        let d = cfg.channels;
        let t_len = cfg.samples();
        let mut out = vec![0.0; t_len * d];
        for c in 0..d {
            let phases: Vec<f64> = self.tones[c].iter().map(|_| rng.random_range(0.0..TAU)).collect();
            let env_phase = rng.random_range(0.0..TAU);
            for t in 0..t_len {
                let time = t as f64 / cfg.sample_rate;
                let env = 1.0 + self.envelope_depth[c] * (TAU * self.envelope_freq[c] * time + env_phase).sin();
                let s: f64 = self.tones[c]
                    .iter()
                    .zip(&phases)
                    .map(|(tone, ph)| tone.amp * (TAU * tone.freq * time + ph).sin())
                    .sum();
                out[t * d + c] = env * s;
            }
        }
        out
    }
}

/// Per-subject distortion `x ↦ diag(gain)·(I + α·R)·x + offset`.
struct SubjectShift {
    mixing: Vec<f64>,
    gain: Vec<f64>,
    offset: Vec<f64>,
}

impl SubjectShift {
    fn new(cfg: &SynthConfig, u: u32) -> Self {
        let mut rng = named_rng(cfg.seed, &format!("synth.subject.{u}"));
        let d = cfg.channels;
        let a = cfg.mixing;
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let mut mixing = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                mixing[i * d + j] = if i == j { 1.0 } else { 0.0 } + a * normal();
            }
        }
        let gain = (0..d).map(|_| 1.0 + a * 0.3 * normal()).collect();
        let offset = (0..d).map(|_| a * normal()).collect();
        SubjectShift { mixing, gain, offset }
    }
}

/// Generates `n_subjects × n_gestures × trials` recordings ordered by
/// (subject, gesture, trial). Output is fully determined by the config.
pub fn synthesize(cfg: &SynthConfig) -> Result<Vec<Recording>> {
    cfg.validate()?;
    let d = cfg.channels;
    let t_len = cfg.samples();
    let sources: Vec<GestureSource> = cfg.gesture_ids().into_iter().map(|g| GestureSource::new(cfg, g)).collect();
    let latent: Vec<Vec<Vec<f64>>> = cfg
        .gesture_ids()
        .into_iter()
        .zip(&sources)
        .map(|(g, src)| (1..=cfg.trials as u32).map(|k| src.render(cfg, g, k)).collect())
        .collect();
    let mut out = Vec::with_capacity(cfg.n_subjects * cfg.n_gestures * cfg.trials);
    for u in cfg.subject_ids() {
        let shift = SubjectShift::new(cfg, u);
        for (gi, g) in cfg.gesture_ids().into_iter().enumerate() {
            for k in 1..=cfg.trials as u32 {
                let s = &latent[gi][(k - 1) as usize];
                let mut noise_rng = named_rng(cfg.seed, &format!("synth.noise.{u}.{g}.{k}"));
                let mut signal = vec![0.0f32; t_len * d];
                for t in 0..t_len {
                    let row = &s[t * d..(t + 1) * d];
                    for i in 0..d {
                        let mixed: f64 = (0..d).map(|j| shift.mixing[i * d + j] * row[j]).sum();
                        let eps = if cfg.noise > 0.0 {
                            let z: f64 = StandardNormal.sample(&mut noise_rng);
                            cfg.noise * z
                        } else {
                            0.0
                        };
                        signal[t * d + i] = (shift.gain[i] * mixed + shift.offset[i] + eps) as f32;
                    }
                }
                out.push(Recording::new(u, g, k, cfg.sample_rate, d, signal)?);
            }
        }
    }
    Ok(out)
}

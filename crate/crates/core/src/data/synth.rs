//! Synthetic EEG with exemplar and category structure.
//!
//! Every exemplar owns a smooth spatial pattern and a temporal envelope, both
//! unit-RMS. Half of the energy of each comes from a component shared by all
//! exemplars of the category; the other half is orthogonal to it and
//! exemplar-specific. A trial is `amplitude · pattern ⊗ envelope` plus white
//! Gaussian noise whose variance is the signal power divided by `snr`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{TrialSet, CATEGORIES, EXEMPLARS, EXEMPLARS_PER_CATEGORY};
use crate::error::{Error, Result};
use crate::montage::ElectrodeMontage;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_per_exemplar: usize,
    /// Signal-to-noise power ratio per sample; `inf` gives noiseless trials.
    pub snr: f64,
    pub seed: u64,
    pub subjects: usize,
    pub frames: usize,
    pub sample_rate: f64,
    /// Signal RMS in microvolts.
    pub amplitude: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_per_exemplar: 10,
            snr: 10.0,
            seed: 0,
            subjects: 1,
            frames: 32,
            sample_rate: 62.5,
            amplitude: 5.0,
        }
    }
}

/// Gaussian width of a spatial source, in unit-sphere chord length.
const SOURCE_WIDTH: f64 = 0.35;
const SOURCES: usize = 4;

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

fn scale_to_unit_rms(v: &mut [f64]) {
    let r = rms(v);
    v.iter_mut().for_each(|x| *x /= r);
}

/// `sqrt(½)·(shared + specific⊥)` with the specific part made orthogonal
/// to the shared one, so each contributes exactly half of the energy.
fn blend(shared: &[f64], mut specific: Vec<f64>) -> Vec<f64> {
    let dot: f64 = shared.iter().zip(&specific).map(|(a, b)| a * b).sum();
    let norm: f64 = shared.iter().map(|a| a * a).sum();
    for (s, a) in specific.iter_mut().zip(shared) {
        *s -= dot / norm * a;
    }
    scale_to_unit_rms(&mut specific);
    let h = 0.5f64.sqrt();
    shared
        .iter()
        .zip(&specific)
        .map(|(a, b)| h * (a + b))
        .collect()
}

/// Zero-mean, unit-RMS sum of a few Gaussian bumps on the sphere.
fn spatial_pattern(rng: &mut ChaCha8Rng, montage: &ElectrodeMontage) -> Vec<f64> {
    let center = montage.center();
    let sources: Vec<([f64; 3], f64)> = (0..SOURCES)
        .map(|_| {
            // sources scattered over the cap around the center
            let mut s = [0.0; 3];
            loop {
                for x in s.iter_mut() {
                    *x = rng.sample::<f64, _>(StandardNormal);
                }
                let n = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt();
                s.iter_mut().for_each(|x| *x /= n);
                if s[0] * center[0] + s[1] * center[1] + s[2] * center[2] > -0.2 {
                    break;
                }
            }
            (s, rng.sample::<f64, _>(StandardNormal))
        })
        .collect();
    let mut v: Vec<f64> = montage
        .positions()
        .iter()
        .map(|p| {
            sources
                .iter()
                .map(|(s, a)| {
                    let d2 = (p[0] - s[0]).powi(2) + (p[1] - s[1]).powi(2) + (p[2] - s[2]).powi(2);
                    a * (-d2 / (2.0 * SOURCE_WIDTH * SOURCE_WIDTH)).exp()
                })
                .sum()
        })
        .collect();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    scale_to_unit_rms(&mut v);
    v
}

/// Windowed oscillation between 2 and 12 Hz with a random latency.
fn temporal_envelope(rng: &mut ChaCha8Rng, frames: usize, sample_rate: f64) -> Vec<f64> {
    let freq = rng.random_range(2.0..12.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let latency = rng.random_range(0.25..0.75) * frames as f64;
    let width = 0.3 * frames as f64;
    let mut v: Vec<f64> = (0..frames)
        .map(|t| {
            let tt = t as f64;
            let window = (-(tt - latency).powi(2) / (2.0 * width * width)).exp();
            window * (std::f64::consts::TAU * freq * tt / sample_rate + phase).sin()
        })
        .collect();
    scale_to_unit_rms(&mut v);
    v
}

/// Generates `subjects × 72 × n_per_exemplar` trials, ordered by subject,
/// exemplar, repetition. Deterministic for a fixed config.
pub fn synth_generate(montage: &ElectrodeMontage, cfg: &SynthConfig) -> Result<TrialSet> {
    if cfg.snr.is_nan() || cfg.snr <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "snr must be positive, got {}",
            cfg.snr
        )));
    }
    if cfg.n_per_exemplar == 0 || cfg.subjects == 0 || cfg.frames == 0 {
        return Err(Error::InvalidArgument(
            "n_per_exemplar, subjects and frames must be positive".into(),
        ));
    }
    let (n_ch, t) = (montage.len(), cfg.frames);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut patterns = Vec::with_capacity(EXEMPLARS);
    let mut envelopes = Vec::with_capacity(EXEMPLARS);
    for _ in 0..CATEGORIES {
        let shared_p = spatial_pattern(&mut rng, montage);
        let shared_e = temporal_envelope(&mut rng, t, cfg.sample_rate);
        for _ in 0..EXEMPLARS_PER_CATEGORY {
            patterns.push(blend(&shared_p, spatial_pattern(&mut rng, montage)));
            envelopes.push(blend(
                &shared_e,
                temporal_envelope(&mut rng, t, cfg.sample_rate),
            ));
        }
    }
    let noise_sd = cfg.amplitude / cfg.snr.sqrt();
    let n = cfg.subjects * EXEMPLARS * cfg.n_per_exemplar;
    let mut data = Vec::with_capacity(n * n_ch * t);
    let (mut category, mut exemplar, mut subject) = (Vec::new(), Vec::new(), Vec::new());
    for s in 0..cfg.subjects {
        let mut noise = ChaCha8Rng::seed_from_u64(cfg.seed);
        noise.set_stream(1 + s as u64);
        for e in 0..EXEMPLARS {
            for _ in 0..cfg.n_per_exemplar {
                for &w in &patterns[e] {
                    for &g in &envelopes[e] {
                        let z: f64 = noise.sample(StandardNormal);
                        data.push((cfg.amplitude * w * g + noise_sd * z) as f32);
                    }
                }
                category.push(e / EXEMPLARS_PER_CATEGORY);
                exemplar.push(e);
                subject.push(s);
            }
        }
    }
    TrialSet::new(
        Tensor::new(&[n, n_ch, t], data)?,
        category,
        exemplar,
        subject,
        cfg.sample_rate,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(snr: f64) -> SynthConfig {
        SynthConfig {
            n_per_exemplar: 3,
            snr,
            seed: 5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn noiseless_trials_repeat_per_exemplar() {
        let montage = ElectrodeMontage::synthetic_cap(124).unwrap();
        let set = synth_generate(&montage, &cfg(f64::INFINITY)).unwrap();
        assert_eq!(set.trials.shape(), &[216, 124, 32]);
        for i in 0..set.len() {
            let first = set
                .exemplar
                .iter()
                .position(|&e| e == set.exemplar[i])
                .unwrap();
            assert_eq!(set.trial(i), set.trial(first));
        }
        // nearest centroid over exemplars is then exact
        let centroids: Vec<&[f32]> = (0..EXEMPLARS).map(|e| set.trial(e * 3)).collect();
        for i in 0..set.len() {
            let best = (0..EXEMPLARS)
                .min_by(|&a, &b| {
                    let d = |c: &[f32]| {
                        c.iter()
                            .zip(set.trial(i))
                            .map(|(x, y)| (x - y).powi(2))
                            .sum::<f32>()
                    };
                    d(centroids[a]).total_cmp(&d(centroids[b]))
                })
                .unwrap();
            assert_eq!(best, set.exemplar[i]);
        }
    }

    #[test]
    fn measured_snr_is_close_to_requested() {
        let montage = ElectrodeMontage::synthetic_cap(124).unwrap();
        let clean = synth_generate(&montage, &cfg(f64::INFINITY)).unwrap();
        for snr in [0.5, 10.0] {
            let noisy = synth_generate(&montage, &cfg(snr)).unwrap();
            for i in (0..noisy.len()).step_by(17) {
                let (s, y) = (clean.trial(i), noisy.trial(i));
                let p_signal: f64 = s.iter().map(|&v| (v as f64).powi(2)).sum();
                let p_noise: f64 = s
                    .iter()
                    .zip(y)
                    .map(|(&a, &b)| (b as f64 - a as f64).powi(2))
                    .sum();
                let measured = p_signal / p_noise;
                assert!((measured / snr - 1.0).abs() < 0.1, "{measured} vs {snr}");
            }
        }
    }

    #[test]
    fn generation_is_reproducible_and_labels_consistent() {
        let montage = ElectrodeMontage::synthetic_cap(20).unwrap();
        let c = SynthConfig {
            subjects: 2,
            ..cfg(3.0)
        };
        let a = synth_generate(&montage, &c).unwrap();
        let b = synth_generate(&montage, &c).unwrap();
        assert_eq!(a.encode(), b.encode());
        assert!(a
            .category
            .iter()
            .zip(&a.exemplar)
            .all(|(c, e)| *c == e / 12));
        assert_eq!(a.subjects(), vec![0, 1]);
        // subjects differ only in noise
        assert_ne!(a.trial(0), a.trial(216));
        assert!(synth_generate(&montage, &cfg(0.0)).is_err());
    }

    #[test]
    fn category_component_carries_half_the_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let montage = ElectrodeMontage::synthetic_cap(64).unwrap();
        let shared = spatial_pattern(&mut rng, &montage);
        let mixed = blend(&shared, spatial_pattern(&mut rng, &montage));
        let n = shared.len() as f64;
        let proj: f64 = shared.iter().zip(&mixed).map(|(a, b)| a * b).sum::<f64>() / n;
        assert!((rms(&mixed) - 1.0).abs() < 1e-12);
        assert!((proj * proj - 0.5).abs() < 1e-12);
    }
}

//! Convolution of dry sources with their impulse responses and noise
//! mixing at a target SNR.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{compute_rir, SceneSpec};
use crate::dsp::SAMPLE_RATE;
use crate::error::{DssError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSample {
    pub mixture: Vec<f64>,
    pub target_near: Vec<f64>,
    pub target_far: Vec<f64>,
    pub spec: SceneSpec,
    pub duration_s: f64,
}

/// First `out_len` samples of the linear convolution `a * b`.
pub fn fft_convolve(a: &[f64], b: &[f64], out_len: usize) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return vec![0.0; out_len];
    }
    let full = a.len() + b.len() - 1;
    let n = full.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |x: &[f64]| {
        let mut v: Vec<Complex64> = x.iter().map(|&r| Complex64::new(r, 0.0)).collect();
        v.resize(n, Complex64::new(0.0, 0.0));
        v
    };
    let mut fa = pad(a);
    let mut fb = pad(b);
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    let scale = 1.0 / n as f64;
    (0..out_len).map(|i| if i < full { fa[i].re * scale } else { 0.0 }).collect()
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

/// Renders the labeled mixture. `dry` holds one signal per source, near
/// sources first. Output length is the shortest dry signal's length.
pub fn render_scene(spec: &SceneSpec, dry: &[Vec<f64>], noise: &[f64]) -> Result<MixtureSample> {
    if dry.len() != spec.source_count() {
        return Err(DssError::InvalidArgument(format!(
            "{} dry signals for {} sources",
            dry.len(),
            spec.source_count()
        )));
    }
    let len = dry.iter().map(Vec::len).min().unwrap_or(0);
    if len == 0 {
        return Err(DssError::InvalidArgument("dry signals must be non-empty".into()));
    }
    if noise.len() < len {
        return Err(DssError::InvalidArgument(format!("noise has {} samples, need {len}", noise.len())));
    }
    for (i, d) in dry.iter().enumerate() {
        if d.iter().all(|&v| v == 0.0) {
            return Err(DssError::InvalidArgument(format!("dry source {i} is silent")));
        }
    }
    let noise = &noise[..len];
    let noise_power = power(noise);
    if !(noise_power > 0.0) {
        return Err(DssError::InvalidArgument(format!(
            "noise is silent but an SNR of {} dB was requested",
            spec.snr_db
        )));
    }

    let mut target_near = vec![0.0; len];
    let mut target_far = vec![0.0; len];
    let n_near = spec.near_sources.len();
    for (i, (src, x)) in spec.sources().zip(dry).enumerate() {
        let h = compute_rir(spec, src)?;
        let y = fft_convolve(&x[..len], &h.samples, len);
        let acc = if i < n_near { &mut target_near } else { &mut target_far };
        for (a, v) in acc.iter_mut().zip(&y) {
            *a += v;
        }
    }
    let reverberant: Vec<f64> = target_near.iter().zip(&target_far).map(|(a, b)| a + b).collect();
    let gain = (power(&reverberant) / (noise_power * 10f64.powf(spec.snr_db / 10.0))).sqrt();
    for (f, n) in target_far.iter_mut().zip(noise) {
        *f += gain * n;
    }
    let mixture = target_near.iter().zip(&target_far).map(|(a, b)| a + b).collect();
    Ok(MixtureSample {
        mixture,
        target_near,
        target_far,
        spec: spec.clone(),
        duration_s: len as f64 / SAMPLE_RATE as f64,
    })
}

impl MixtureSample {
    /// Scales all three waveforms by `gain`, rebuilding the mixture so the
    /// identity `mixture == near + far` stays exact.
    pub fn scaled(mut self, gain: f64) -> Self {
        for v in self.target_near.iter_mut().chain(self.target_far.iter_mut()) {
            *v *= gain;
        }
        self.mixture = self.target_near.iter().zip(&self.target_far).map(|(a, b)| a + b).collect();
        self
    }
}

#[cfg(test)]
mod tests {
    use super::super::{sample_scene, sample_scene_with_counts, Environment, FarBand};
    use super::*;

    fn signal(n: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn convolution_matches_direct() {
        let a = signal(100, 1);
        let b = signal(30, 2);
        let y = fft_convolve(&a, &b, 129);
        for (i, yi) in y.iter().enumerate() {
            let direct: f64 = (0..b.len()).filter(|&j| j <= i && i - j < a.len()).map(|j| a[i - j] * b[j]).sum();
            assert!((yi - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn snr_levels_and_identity() {
        for (k, snr) in [0.0, 5.0, 10.0, 15.0, 20.0].into_iter().enumerate() {
            let mut spec = sample_scene(100 + k as u64, Environment::Indoor, FarBand::SR).unwrap();
            spec.snr_db = snr;
            let dry: Vec<Vec<f64>> = (0..spec.source_count()).map(|i| signal(8_000, 10 + i as u64)).collect();
            let noise = signal(9_000, 99);
            let m = render_scene(&spec, &dry, &noise).unwrap();
            for i in 0..m.mixture.len() {
                assert_eq!(m.mixture[i], m.target_near[i] + m.target_far[i]);
            }
            // Recover the scaled noise as far minus its reverberant part.
            let n_near = spec.near_sources.len();
            let mut rev = vec![0.0; 8_000];
            let mut far_rev = vec![0.0; 8_000];
            for (i, (src, x)) in spec.sources().zip(&dry).enumerate() {
                let y = fft_convolve(x, &compute_rir(&spec, src).unwrap().samples, 8_000);
                for j in 0..8_000 {
                    rev[j] += y[j];
                    if i >= n_near {
                        far_rev[j] += y[j];
                    }
                }
            }
            let eps: Vec<f64> = m.target_far.iter().zip(&far_rev).map(|(a, b)| a - b).collect();
            let measured = 10.0 * (power(&rev) / power(&eps)).log10();
            assert!((measured - snr).abs() < 0.1, "{measured} vs {snr}");
        }
    }

    #[test]
    fn no_near_sources_gives_zero_near_target() {
        let spec = sample_scene_with_counts(3, Environment::Outdoor, FarBand::SR, Some((0, 2))).unwrap();
        let dry = vec![signal(4_000, 1), signal(4_000, 2)];
        let m = render_scene(&spec, &dry, &signal(4_000, 3)).unwrap();
        assert!(m.target_near.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_dry_signal_reproduces_rir() {
        let spec = sample_scene_with_counts(4, Environment::Indoor, FarBand::SR, Some((1, 0))).unwrap();
        let mut dry = vec![0.0; 6_000];
        dry[0] = 1.0;
        let m = render_scene(&spec, &[dry], &signal(6_000, 5)).unwrap();
        let h = compute_rir(&spec, &spec.near_sources[0]).unwrap().samples;
        for i in 0..6_000 {
            let hi = h.get(i).copied().unwrap_or(0.0);
            assert!((m.target_near[i] - hi).abs() < 1e-12);
        }
    }

    #[test]
    fn silent_inputs_rejected() {
        let spec = sample_scene_with_counts(6, Environment::Indoor, FarBand::SR, Some((1, 0))).unwrap();
        assert!(render_scene(&spec, &[vec![0.0; 1_000]], &signal(1_000, 1)).is_err());
        assert!(render_scene(&spec, &[signal(1_000, 2)], &vec![0.0; 1_000]).is_err());
        assert!(render_scene(&spec, &[signal(1_000, 2)], &signal(10, 1)).is_err());
        assert!(render_scene(&spec, &[], &signal(1_000, 1)).is_err());
    }
}

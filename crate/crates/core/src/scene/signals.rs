//! Built-in dry-source generators: speech-like harmonic signals and
//! broadband background noise. Both are deterministic in their seed and
//! normalized to a fixed RMS.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::dsp::SAMPLE_RATE;

const TARGET_RMS: f64 = 0.05;

fn normalize(mut x: Vec<f64>) -> Vec<f64> {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        let g = TARGET_RMS / rms;
        x.iter_mut().for_each(|v| *v *= g);
    }
    x
}

struct Syllable {
    start: usize,
    len: usize,
    formants: [(f64, f64); 3],
    voiced: bool,
}

fn syllables(rng: &mut ChaCha8Rng, len: usize) -> Vec<Syllable> {
    let fs = SAMPLE_RATE as f64;
    let mut out = Vec::new();
    let mut t = (rng.gen_range(0.0..0.15) * fs) as usize;
    while t < len {
        let dur = (rng.gen_range(0.10..0.35) * fs) as usize;
        out.push(Syllable {
            start: t,
            len: dur.min(len - t),
            formants: [
                (rng.gen_range(300.0..850.0), 90.0),
                (rng.gen_range(850.0..2400.0), 120.0),
                (rng.gen_range(2200.0..3300.0), 180.0),
            ],
            voiced: rng.gen_bool(0.85),
        });
        let pause = if rng.gen_bool(0.15) { rng.gen_range(0.3..0.6) } else { rng.gen_range(0.02..0.2) };
        t += dur + (pause * fs) as usize;
    }
    out
}

/// Raised-cosine attack and release over the first and last 20% of a
/// segment.
fn envelope(i: usize, len: usize) -> f64 {
    let edge = (len / 5).max(1);
    let ramp = |k: usize| 0.5 * (1.0 - (PI * k as f64 / edge as f64).cos());
    if i < edge {
        ramp(i)
    } else if i + edge >= len {
        ramp(len - i)
    } else {
        1.0
    }
}

/// Speech-like signal: pitch-modulated harmonics shaped by per-syllable
/// formant resonances, with unvoiced bursts and pauses.
pub fn speech_signal(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = SAMPLE_RATE as f64;
    let f0_base = rng.gen_range(90.0..240.0);
    let vib_rate = rng.gen_range(0.5..3.0);
    let vib_phase = rng.gen_range(0.0..2.0 * PI);
    let vib_depth = rng.gen_range(0.05..0.15);
    let mut out = vec![0.0; len];
    for syl in syllables(&mut rng, len) {
        let glide = rng.gen_range(-0.15..0.15);
        let mut phases = vec![0.0f64; 64];
        for (j, o) in out[syl.start..syl.start + syl.len].iter_mut().enumerate() {
            let t = (syl.start + j) as f64 / fs;
            let env = envelope(j, syl.len);
            if syl.voiced {
                let f0 = f0_base
                    * (1.0 + vib_depth * (2.0 * PI * vib_rate * t + vib_phase).sin())
                    * (1.0 + glide * j as f64 / syl.len as f64);
                let mut acc = 0.0;
                for (h, ph) in phases.iter_mut().enumerate() {
                    let f = f0 * (h + 1) as f64;
                    if f > 7_000.0 {
                        break;
                    }
                    *ph += 2.0 * PI * f / fs;
                    let gain: f64 = syl.formants.iter().map(|(c, bw)| 1.0 / (1.0 + ((f - c) / bw).powi(2))).sum();
                    acc += gain / (1.0 + f / 600.0) * ph.sin();
                }
                *o += env * acc;
            } else {
                *o += env * 0.05 * rng.gen_range(-1.0..1.0);
            }
        }
    }
    normalize(out)
}

/// Shapes white noise in the frequency domain by `gain(f_hz)`.
fn shaped_noise(rng: &mut ChaCha8Rng, len: usize, gain: impl Fn(f64) -> f64) -> Vec<f64> {
    let n = len.next_power_of_two().max(2);
    let mut buf: Vec<Complex64> = (0..n).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let fs = SAMPLE_RATE as f64;
    for (k, b) in buf.iter_mut().enumerate() {
        let kk = if k <= n / 2 { k } else { n - k };
        *b *= gain(kk as f64 * fs / n as f64);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf[..len].iter().map(|c| c.re / n as f64).collect()
}

/// Background noise: pink noise plus amplitude-modulated band-limited
/// babble-like components.
pub fn noise_signal(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = SAMPLE_RATE as f64;
    let pink = normalize(shaped_noise(&mut rng, len, |f| if f < 20.0 { 0.0 } else { 1.0 / f.sqrt() }));
    let mut babble = vec![0.0; len];
    for _ in 0..3 {
        let lo = rng.gen_range(250.0..500.0);
        let hi = rng.gen_range(2_500.0..4_000.0);
        let band = normalize(shaped_noise(&mut rng, len, |f| if f >= lo && f <= hi { 1.0 } else { 0.0 }));
        let rate = rng.gen_range(2.0..6.0);
        let phase = rng.gen_range(0.0..2.0 * PI);
        for (i, (b, v)) in babble.iter_mut().zip(&band).enumerate() {
            let m = 1.0 + 0.8 * (2.0 * PI * rate * i as f64 / fs + phase).sin();
            *b += m * v;
        }
    }
    let w = rng.gen_range(0.2..0.8);
    let babble = normalize(babble);
    normalize(pink.iter().zip(&babble).map(|(p, b)| w * p + (1.0 - w) * b).collect())
}

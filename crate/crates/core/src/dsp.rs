//! STFT analysis/synthesis and power-law magnitude compression.
//!
//! Frames are centered: the signal is reflection-padded by `fft_size / 2`
//! on both ends and frame `t` covers padded samples `[t·hop, t·hop + N)`.
//! A signal of `L` samples yields `⌊L / hop⌋` frames. Synthesis uses
//! weighted overlap-add normalized by the summed squared window, which
//! reconstructs exactly wherever that sum is non-zero (always, for Hamming).

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{DssError, Result};
use crate::tensor::{Scalar, Tensor};

pub const FFT_SIZE: usize = 512;
pub const HOP: usize = 128;
pub const SAMPLE_RATE: u32 = 16_000;
pub const BINS: usize = FFT_SIZE / 2 + 1;
pub const COMPRESS_EXPONENT: f64 = 0.3;

/// One-sided complex spectrogram stored as `[frames × bins]` real and
/// imaginary planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub real: Vec<f64>,
    pub imag: Vec<f64>,
    pub frames: usize,
    pub fft_size: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn zeros(frames: usize, fft_size: usize, hop: usize) -> Self {
        let bins = fft_size / 2 + 1;
        ComplexSpectrogram {
            real: vec![0.0; frames * bins],
            imag: vec![0.0; frames * bins],
            frames,
            fft_size,
            hop,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.real.iter().zip(&self.imag).map(|(r, i)| r.hypot(*i)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.real.iter().chain(&self.imag).all(|v| v.is_finite())
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &ComplexSpectrogram, b: f64) -> ComplexSpectrogram {
        let mut out = self.clone();
        for (o, x) in out.real.iter_mut().zip(&other.real) {
            *o = a * *o + b * x;
        }
        for (o, x) in out.imag.iter_mut().zip(&other.imag) {
            *o = a * *o + b * x;
        }
        out
    }
}

/// Periodic Hamming window.
pub fn hamming(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Reusable STFT configuration with cached FFT plans.
#[derive(Clone)]
pub struct Stft {
    fft_size: usize,
    hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft")
            .field("fft_size", &self.fft_size)
            .field("hop", &self.hop)
            .finish()
    }
}

impl Default for Stft {
    fn default() -> Self {
        Stft::new(FFT_SIZE, HOP)
    }
}

impl Stft {
    pub fn new(fft_size: usize, hop: usize) -> Self {
        assert!(fft_size >= 2 && fft_size % 2 == 0 && hop > 0 && hop <= fft_size);
        let mut planner = FftPlanner::new();
        Stft {
            fft_size,
            hop,
            window: hamming(fft_size),
            forward: planner.plan_fft_forward(fft_size),
            inverse: planner.plan_fft_inverse(fft_size),
        }
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn frame_count(&self, len: usize) -> usize {
        len / self.hop
    }

    /// Longest waveform that `frames` frames can synthesize.
    pub fn max_output_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.fft_size / 2
        }
    }

    fn reflect_pad(&self, wave: &[f64]) -> Vec<f64> {
        let half = self.fft_size / 2;
        let n = wave.len();
        let mut padded = Vec::with_capacity(n + 2 * half);
        padded.extend((1..=half).rev().map(|i| wave[i]));
        padded.extend_from_slice(wave);
        padded.extend((1..=half).map(|i| wave[n - 1 - i]));
        padded
    }

    pub fn stft(&self, wave: &[f64]) -> Result<ComplexSpectrogram> {
        if wave.is_empty() {
            return Err(DssError::InvalidArgument("stft of an empty signal".into()));
        }
        if wave.len() < self.fft_size {
            return Err(DssError::InvalidArgument(format!(
                "stft needs at least {} samples, got {}",
                self.fft_size,
                wave.len()
            )));
        }
        let padded = self.reflect_pad(wave);
        let frames = self.frame_count(wave.len());
        let bins = self.bins();
        let mut spec = ComplexSpectrogram::zeros(frames, self.fft_size, self.hop);
        let mut buf = vec![Complex64::new(0.0, 0.0); self.fft_size];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.forward.get_inplace_scratch_len()];
        for t in 0..frames {
            let seg = &padded[t * self.hop..t * self.hop + self.fft_size];
            for ((b, &x), &w) in buf.iter_mut().zip(seg).zip(&self.window) {
                *b = Complex64::new(x * w, 0.0);
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..bins {
                spec.real[t * bins + k] = buf[k].re;
                spec.imag[t * bins + k] = buf[k].im;
            }
        }
        Ok(spec)
    }

    /// Real inverse FFT of one one-sided frame (imaginary parts of DC and
    /// Nyquist are ignored).
    fn irfft_frame(&self, re: &[f64], im: &[f64], buf: &mut [Complex64], scratch: &mut [Complex64]) {
        let n = self.fft_size;
        let half = n / 2;
        buf[0] = Complex64::new(re[0], 0.0);
        buf[half] = Complex64::new(re[half], 0.0);
        for k in 1..half {
            buf[k] = Complex64::new(re[k], im[k]);
            buf[n - k] = Complex64::new(re[k], -im[k]);
        }
        self.inverse.process_with_scratch(buf, scratch);
    }

    /// Summed squared window over the padded timeline.
    fn window_sum(&self, frames: usize) -> Vec<f64> {
        let mut wsum = vec![0.0; (frames.max(1) - 1) * self.hop + self.fft_size];
        for t in 0..frames {
            for (n, w) in self.window.iter().enumerate() {
                wsum[t * self.hop + n] += w * w;
            }
        }
        wsum
    }

    fn check_synthesis(&self, frames: usize, fft_size: usize, hop: usize, out_len: usize) -> Result<()> {
        if fft_size != self.fft_size || hop != self.hop {
            return Err(DssError::InvalidArgument(format!(
                "spectrogram ({fft_size}/{hop}) does not match STFT configuration ({}/{})",
                self.fft_size, self.hop
            )));
        }
        let max = self.max_output_len(frames);
        if out_len > max {
            return Err(DssError::InvalidArgument(format!(
                "requested {out_len} samples but {frames} frames synthesize at most {max}"
            )));
        }
        Ok(())
    }

    pub fn istft(&self, spec: &ComplexSpectrogram, out_len: usize) -> Result<Vec<f64>> {
        self.check_synthesis(spec.frames, spec.fft_size, spec.hop, out_len)?;
        Ok(self.synthesize(&spec.real, &spec.imag, spec.frames, out_len))
    }

    fn synthesize(&self, real: &[f64], imag: &[f64], frames: usize, out_len: usize) -> Vec<f64> {
        let n = self.fft_size;
        let bins = self.bins();
        let wsum = self.window_sum(frames);
        let mut acc = vec![0.0; wsum.len()];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.inverse.get_inplace_scratch_len()];
        let inv_n = 1.0 / n as f64;
        for t in 0..frames {
            self.irfft_frame(&real[t * bins..][..bins], &imag[t * bins..][..bins], &mut buf, &mut scratch);
            for (i, (b, w)) in buf.iter().zip(&self.window).enumerate() {
                acc[t * self.hop + i] += w * b.re * inv_n;
            }
        }
        let half = n / 2;
        (0..out_len)
            .map(|i| {
                let ws = wsum[half + i];
                if ws > 1e-10 {
                    acc[half + i] / ws
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Adjoint of [`Stft::synthesize`] with respect to the real and
    /// imaginary planes.
    fn synthesize_adjoint(&self, grad: &[f64], frames: usize) -> (Vec<f64>, Vec<f64>) {
        let n = self.fft_size;
        let half = n / 2;
        let bins = self.bins();
        let wsum = self.window_sum(frames);
        let mut gpad = vec![0.0; wsum.len()];
        for (i, g) in grad.iter().enumerate() {
            let ws = wsum[half + i];
            if ws > 1e-10 {
                gpad[half + i] = g / ws;
            }
        }
        let mut greal = vec![0.0; frames * bins];
        let mut gimag = vec![0.0; frames * bins];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.forward.get_inplace_scratch_len()];
        let inv_n = 1.0 / n as f64;
        for t in 0..frames {
            for (i, (b, w)) in buf.iter_mut().zip(&self.window).enumerate() {
                *b = Complex64::new(w * gpad[t * self.hop + i], 0.0);
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..bins {
                let c = if k == 0 || k == half { 1.0 } else { 2.0 };
                greal[t * bins + k] = c * inv_n * buf[k].re;
                gimag[t * bins + k] = if k == 0 || k == half { 0.0 } else { c * inv_n * buf[k].im };
            }
        }
        (greal, gimag)
    }

    /// Differentiable synthesis from `[frames, bins]` real and imaginary
    /// tensors.
    pub fn istft_tensor<S: Scalar>(&self, real: &Tensor<S>, imag: &Tensor<S>, out_len: usize) -> Result<Tensor<S>> {
        let bins = self.bins();
        if real.shape() != imag.shape() || real.rank() != 2 || real.dim(1) != bins {
            return Err(DssError::Shape(format!(
                "istft expects matching [frames, {bins}] planes, got {:?} and {:?}",
                real.shape(),
                imag.shape()
            )));
        }
        let frames = real.dim(0);
        self.check_synthesis(frames, self.fft_size, self.hop, out_len)?;
        let re = real.to_f64_vec();
        let im = imag.to_f64_vec();
        let wave = self.synthesize(&re, &im, frames, out_len);
        Ok(Tensor::from_op(
            wave.into_iter().map(S::cast).collect(),
            vec![out_len],
            vec![real.clone(), imag.clone()],
            Box::new(IstftBackward {
                stft: self.clone(),
                frames,
            }),
        ))
    }
}

struct IstftBackward {
    stft: Stft,
    frames: usize,
}

impl<S: Scalar> crate::tensor::Backward<S> for IstftBackward {
    fn backward(&self, _parents: &[Tensor<S>], _out: &[S], grad: &[S]) -> Vec<Option<Vec<S>>> {
        let g: Vec<f64> = grad.iter().map(|v| v.as_f64()).collect();
        let (gr, gi) = self.stft.synthesize_adjoint(&g, self.frames);
        vec![
            Some(gr.into_iter().map(S::cast).collect()),
            Some(gi.into_iter().map(S::cast).collect()),
        ]
    }
}

pub fn stft(wave: &[f64]) -> Result<ComplexSpectrogram> {
    Stft::default().stft(wave)
}

pub fn istft(spec: &ComplexSpectrogram, out_len: usize) -> Result<Vec<f64>> {
    Stft::new(spec.fft_size, spec.hop).istft(spec, out_len)
}

/// Raises magnitudes to `exponent`, keeping phase. Zero stays zero.
pub fn compress(spec: &ComplexSpectrogram, exponent: f64) -> ComplexSpectrogram {
    power_law(spec, exponent)
}

/// Exact inverse of [`compress`].
pub fn decompress(spec: &ComplexSpectrogram, exponent: f64) -> ComplexSpectrogram {
    power_law(spec, 1.0 / exponent)
}

fn power_law(spec: &ComplexSpectrogram, exponent: f64) -> ComplexSpectrogram {
    let mut out = spec.clone();
    for (r, i) in out.real.iter_mut().zip(out.imag.iter_mut()) {
        let mag = r.hypot(*i);
        if mag > 0.0 {
            let gain = mag.powf(exponent - 1.0);
            *r *= gain;
            *i *= gain;
        } else {
            *r = 0.0;
            *i = 0.0;
        }
    }
    out
}

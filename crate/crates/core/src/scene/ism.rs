//! Shoebox image-source model.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{distance, Environment, SceneSpec, SourcePlacement, SPEED_OF_SOUND};
use crate::dsp::SAMPLE_RATE;
use crate::error::{DssError, Result};

/// Length of the windowed-sinc fractional-delay kernel.
pub const KERNEL_TAPS: usize = 81;
const KERNEL_HALF: isize = (KERNEL_TAPS / 2) as isize;
const MAX_ORDER_CAP: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpulseResponse {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub source_index: usize,
}

/// One propagation path: a delayed, attenuated impulse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrival {
    pub delay_samples: f64,
    pub amplitude: f64,
    pub order: usize,
}

/// Diffuse-field (Sabine) absorption for `rt60`; a value of 1 or more
/// marks the target as unattainable.
pub fn sabine_absorption(dims: [f64; 3], rt60: f64) -> f64 {
    let [x, y, z] = dims;
    0.1611 * x * y * z / (2.0 * (x * y + x * z + y * z) * rt60)
}

/// Rejects RT60 targets that would need more than total absorption in a
/// diffuse field. Returns the Sabine absorption otherwise.
pub fn check_rt60(dims: [f64; 3], rt60: f64) -> Result<f64> {
    if !(rt60 > 0.0) {
        return Err(DssError::UnattainableRt60 { rt60, required: f64::INFINITY });
    }
    let required = sabine_absorption(dims, rt60);
    if required >= 1.0 {
        return Err(DssError::UnattainableRt60 { rt60, required });
    }
    Ok(required)
}

/// Uniform wall absorption for which the image set of `src` decays with
/// `spec.rt60` at the microphone.
///
/// Shoebox image sources do not decay like a diffuse field: in flat rooms
/// the late tail is carried by grazing paths that rarely touch floor or
/// ceiling, so diffuse-field inversions miss the target by up to a factor
/// of two. The absorption is instead found by bisection on the T20 of the
/// image energy response, with the same order cap and tail window as
/// [`estimate_rt60`].
pub fn wall_absorption(spec: &SceneSpec, src: &SourcePlacement) -> Result<f64> {
    check_rt60(spec.room_dims, spec.rt60)?;
    let max_order = max_reflection_order(spec.room_dims, spec.rt60);
    let fs = SAMPLE_RATE as f64;
    let mut paths: Vec<(f64, usize, f64)> = images(spec, src, max_order)
        .into_iter()
        .map(|(img, order)| {
            let d = distance(img, spec.mic_pos);
            (d / SPEED_OF_SOUND * fs, order, (1.0 / (4.0 * PI * d)).powi(2))
        })
        .collect();
    let direct = src.distance_to_mic / SPEED_OF_SOUND * fs;
    let tail_start = direct.round() + KERNEL_HALF as f64 + 1.0;
    paths.retain(|p| p.0 >= tail_start);
    let len = paths.iter().map(|p| p.0).fold(0.0, f64::max) as usize + 1;
    let t20 = |beta2: f64| {
        let mut energy = vec![0.0; len];
        for &(delay, order, w) in &paths {
            energy[delay as usize] += beta2.powi(order as i32) * w;
        }
        t20_from_energy(&energy, SAMPLE_RATE).unwrap_or(0.0)
    };
    // T20 grows with the energy reflection coefficient 1 - alpha; bisect
    // on its logarithm.
    let (mut lo, mut hi) = ((1e-4f64).ln(), (1.0 - 1e-6f64).ln());
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if t20(mid.exp()) < spec.rt60 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(1.0 - (0.5 * (lo + hi)).exp())
}

pub fn max_reflection_order(dims: [f64; 3], rt60: f64) -> usize {
    let min_dim = dims.iter().cloned().fold(f64::INFINITY, f64::min);
    ((SPEED_OF_SOUND * rt60 / min_dim).ceil() as usize).min(MAX_ORDER_CAP)
}

/// Image coordinates along one axis as `(coordinate, reflection count)`.
fn axis_images(s: f64, len: f64, max_order: usize) -> Vec<(f64, usize)> {
    let n_max = max_order as i64;
    let mut out = Vec::new();
    for n in -n_max..=n_max {
        for q in 0..=1i64 {
            let order = ((n - q).unsigned_abs() + n.unsigned_abs()) as usize;
            if order <= max_order {
                out.push(((1 - 2 * q) as f64 * s + 2.0 * n as f64 * len, order));
            }
        }
    }
    out
}

/// All propagation paths from `src` to the microphone, unsorted.
pub fn image_arrivals(spec: &SceneSpec, src: &SourcePlacement) -> Result<Vec<Arrival>> {
    if !spec.inside(src.pos) {
        return Err(DssError::InvalidArgument(format!("source {:?} lies outside the room", src.pos)));
    }
    let fs = SAMPLE_RATE as f64;
    let arrival = |img: [f64; 3], gain: f64, order: usize| {
        let d = distance(img, spec.mic_pos);
        Arrival {
            delay_samples: d / SPEED_OF_SOUND * fs,
            amplitude: gain / (4.0 * PI * d),
            order,
        }
    };
    match spec.env {
        Environment::Outdoor => {
            let mut out = vec![arrival(src.pos, 1.0, 0)];
            if spec.floor_reflection > 0.0 {
                out.push(arrival([src.pos[0], src.pos[1], -src.pos[2]], spec.floor_reflection, 1));
            }
            Ok(out)
        }
        Environment::Indoor => {
            let beta = (1.0 - wall_absorption(spec, src)?).sqrt();
            let max_order = max_reflection_order(spec.room_dims, spec.rt60);
            let gains: Vec<f64> = (0..=max_order).map(|o| beta.powi(o as i32)).collect();
            Ok(images(spec, src, max_order)
                .into_iter()
                .map(|(img, o)| arrival(img, gains[o], o))
                .collect())
        }
    }
}

/// Image positions of `src` with their reflection orders, up to
/// `max_order` reflections in total.
fn images(spec: &SceneSpec, src: &SourcePlacement, max_order: usize) -> Vec<([f64; 3], usize)> {
    let ax: Vec<Vec<(f64, usize)>> = (0..3).map(|i| axis_images(src.pos[i], spec.room_dims[i], max_order)).collect();
    let mut out = Vec::new();
    for &(x, ox) in &ax[0] {
        for &(y, oy) in &ax[1] {
            if ox + oy > max_order {
                continue;
            }
            for &(z, oz) in &ax[2] {
                let o = ox + oy + oz;
                if o <= max_order {
                    out.push(([x, y, z], o));
                }
            }
        }
    }
    out
}

fn hann_sinc(t: f64) -> f64 {
    let w = 0.5 * (1.0 + (2.0 * PI * t / KERNEL_TAPS as f64).cos());
    let s = if t.abs() < 1e-12 { 1.0 } else { (PI * t).sin() / (PI * t) };
    w * s
}

/// Sums fractionally delayed impulses for every arrival.
pub fn render_arrivals(arrivals: &[Arrival]) -> Vec<f64> {
    let max_delay = arrivals.iter().map(|a| a.delay_samples).fold(0.0, f64::max);
    let len = max_delay.ceil() as usize + KERNEL_HALF as usize + 2;
    let mut h = vec![0.0; len];
    for a in arrivals {
        let center = a.delay_samples.round() as isize;
        for n in (center - KERNEL_HALF).max(0)..=center + KERNEL_HALF {
            h[n as usize] += a.amplitude * hann_sinc(n as f64 - a.delay_samples);
        }
    }
    h
}

/// Second-order 100 Hz high-pass (Allen and Berkley).
/// Removes the low-frequency build-up that all-positive image amplitudes
/// produce in a dense tail.
pub fn allen_berkley_highpass(h: &mut [f64]) {
    let w = 2.0 * PI * 100.0 / SAMPLE_RATE as f64;
    let r1 = (-w).exp();
    let b1 = 2.0 * r1 * w.cos();
    let b2 = -r1 * r1;
    let a1 = -(1.0 + r1);
    let mut y = [0.0f64; 3];
    for v in h.iter_mut() {
        y[2] = y[1];
        y[1] = y[0];
        y[0] = b1 * y[1] + b2 * y[2] + *v;
        *v = y[0] + a1 * y[1] + r1 * y[2];
    }
}

/// Impulse response from `src` to the microphone. Indoor responses are
/// high-passed; outdoor responses keep their two bare arrivals.
pub fn compute_rir(spec: &SceneSpec, src: &SourcePlacement) -> Result<ImpulseResponse> {
    let arrivals = image_arrivals(spec, src)?;
    let source_index = spec.sources().position(|s| s == src).unwrap_or(0);
    let mut samples = render_arrivals(&arrivals);
    if spec.env == Environment::Indoor {
        allen_berkley_highpass(&mut samples);
    }
    Ok(ImpulseResponse {
        samples,
        sample_rate: SAMPLE_RATE,
        source_index,
    })
}

/// Backward-integrated energy decay curve in dB relative to total energy.
pub fn schroeder_curve(h: &[f64]) -> Vec<f64> {
    let energy: Vec<f64> = h.iter().map(|v| v * v).collect();
    edc_db(&energy)
}

fn edc_db(energy: &[f64]) -> Vec<f64> {
    let mut edc = vec![0.0; energy.len()];
    let mut acc = 0.0;
    for i in (0..energy.len()).rev() {
        acc += energy[i];
        edc[i] = acc;
    }
    let total = acc.max(f64::MIN_POSITIVE);
    edc.iter().map(|e| 10.0 * (e / total).max(1e-300).log10()).collect()
}

/// Least-squares slope of the −5 dB to −25 dB span of the decay curve,
/// extrapolated to 60 dB.
fn t20_from_energy(energy: &[f64], sample_rate: u32) -> Option<f64> {
    let edc = edc_db(energy);
    let start = edc.iter().position(|&v| v <= -5.0)?;
    let end = edc.iter().position(|&v| v <= -25.0)?;
    if end <= start + 1 {
        return None;
    }
    let fs = sample_rate as f64;
    let n = (end - start) as f64;
    let (mut st, mut sy, mut stt, mut sty) = (0.0, 0.0, 0.0, 0.0);
    for (i, &y) in edc[start..end].iter().enumerate() {
        let t = (start + i) as f64 / fs;
        st += t;
        sy += y;
        stt += t * t;
        sty += t * y;
    }
    let slope = (n * sty - st * sy) / (n * stt - st * st);
    (slope < 0.0).then(|| -60.0 / slope)
}

/// Schroeder RT60 (T20) of the reverberant tail: the decay is fitted after
/// the direct-sound kernel, which otherwise dominates the curve for sources
/// close to the microphone.
pub fn estimate_rt60(h: &[f64], sample_rate: u32) -> Option<f64> {
    let peak = h.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))?.0;
    let start = (peak + KERNEL_HALF as usize + 1).min(h.len());
    let energy: Vec<f64> = h[start..].iter().map(|v| v * v).collect();
    t20_from_energy(&energy, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::super::{sample_scene, FarBand, Label};
    use super::*;

    fn free_field(dist: f64) -> (SceneSpec, SourcePlacement) {
        let mic = [3.0, 3.0, 1.2];
        let src = SourcePlacement::new([3.0 + dist, 3.0, 1.2], mic);
        let spec = SceneSpec {
            room_dims: [7.0, 7.0, 2.6],
            mic_pos: mic,
            rt60: 0.5,
            env: Environment::Outdoor,
            near_sources: vec![],
            far_sources: vec![src.clone()],
            snr_db: 10.0,
            seed: 0,
            far_band: FarBand::SR,
            floor_reflection: 0.0,
        };
        (spec, src)
    }

    #[test]
    fn kernel_is_unit_at_integer_delay() {
        let h = render_arrivals(&[Arrival { delay_samples: 50.0, amplitude: 2.0, order: 0 }]);
        assert!((h[50] - 2.0).abs() < 1e-12);
        assert!(h[49].abs() < 1e-12 && h[51].abs() < 1e-12);
    }

    #[test]
    fn inverse_distance_and_delay() {
        let (s1, p1) = free_field(1.0);
        let (s2, p2) = free_field(2.0);
        let h1 = compute_rir(&s1, &p1).unwrap().samples;
        let h2 = compute_rir(&s2, &p2).unwrap().samples;
        let area = |h: &[f64]| h.iter().sum::<f64>();
        let ratio = area(&h1) / area(&h2);
        assert!((ratio - 2.0).abs() < 0.02, "{ratio}");
        let expected = 1.0 / 343.0 * 16_000.0;
        let centroid: f64 = h1.iter().enumerate().map(|(i, v)| i as f64 * v).sum::<f64>() / area(&h1);
        assert!((centroid - expected).abs() < 0.5, "{centroid} vs {expected}");
    }

    #[test]
    fn outdoor_has_two_arrivals() {
        let s = sample_scene(5, Environment::Outdoor, FarBand::SR).unwrap();
        for src in s.sources() {
            assert_eq!(image_arrivals(&s, src).unwrap().len(), 2);
        }
    }

    #[test]
    fn indoor_decay_is_monotone_and_near_target() {
        let s = sample_scene(11, Environment::Indoor, FarBand::SR).unwrap();
        let src = s.sources().next().unwrap().clone();
        let h = compute_rir(&s, &src).unwrap();
        assert!(h.samples.iter().all(|v| v.is_finite()));
        let edc = schroeder_curve(&h.samples);
        assert!(edc.windows(2).all(|w| w[1] <= w[0]));
        let est = estimate_rt60(&h.samples, 16_000).unwrap();
        assert!((est / s.rt60 - 1.0).abs() < 0.2, "rt60 {} estimated {est}", s.rt60);
        assert_eq!(src.label == Label::Near, src.distance_to_mic < 0.5);
    }

    #[test]
    fn unattainable_rt60_reports_required_absorption() {
        match check_rt60([4.5, 4.5, 2.4], 0.05) {
            Err(DssError::UnattainableRt60 { required, .. }) => assert!(required > 1.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reflection_order_is_capped() {
        assert_eq!(max_reflection_order([6.0, 6.0, 2.6], 1.0), 40);
        assert_eq!(max_reflection_order([6.0, 6.0, 2.6], 0.015), 2);
    }
}

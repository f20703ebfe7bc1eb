//! Acoustic scene sampling, image-source impulse responses and labeled
//! near/far mixture rendering.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DssError, Result};

mod corpus;
mod ism;
mod render;
mod signals;

pub use corpus::{generate_corpus, read_manifest, CorpusConfig, EnvMode, LoadedScene, ManifestRecord, Split, MANIFEST_NAME};
pub use ism::{
    check_rt60, compute_rir, estimate_rt60, image_arrivals, max_reflection_order, sabine_absorption, schroeder_curve, wall_absorption, Arrival,
    ImpulseResponse, KERNEL_TAPS,
};
pub use render::{fft_convolve, render_scene, MixtureSample};
pub use signals::{noise_signal, speech_signal};

pub const SPEED_OF_SOUND: f64 = 343.0;
/// Sources closer than this to the microphone are "near".
pub const NEAR_THRESHOLD: f64 = 0.5;
pub const SNR_LEVELS: [f64; 5] = [0.0, 5.0, 10.0, 15.0, 20.0];
pub const MAX_PLACEMENT_RETRIES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Environment {
    Indoor,
    Outdoor,
}

impl fmt::Display for Environment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Environment::Indoor => "indoor",
            Environment::Outdoor => "outdoor",
        })
    }
}

/// Far-source distance band: the seen region used for training and three
/// unseen regions held out for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FarBand {
    SR,
    UR0,
    UR1,
    UR2,
}

impl FarBand {
    pub const ALL: [FarBand; 4] = [FarBand::SR, FarBand::UR0, FarBand::UR1, FarBand::UR2];

    /// Closed distance range in meters.
    pub fn range(self) -> (f64, f64) {
        match self {
            FarBand::SR => (1.3, 1.7),
            FarBand::UR0 => (0.5, 0.8),
            FarBand::UR1 => (0.8, 1.2),
            FarBand::UR2 => (1.8, 2.2),
        }
    }
}

impl fmt::Display for FarBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for FarBand {
    type Err = DssError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().replace('-', "").as_str() {
            "SR" => Ok(FarBand::SR),
            "UR0" => Ok(FarBand::UR0),
            "UR1" => Ok(FarBand::UR1),
            "UR2" => Ok(FarBand::UR2),
            _ => Err(DssError::Config(format!("unknown far band '{s}' (expected SR, UR0, UR1 or UR2)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Near,
    Far,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourcePlacement {
    pub pos: [f64; 3],
    pub distance_to_mic: f64,
    pub label: Label,
}

impl SourcePlacement {
    pub fn new(pos: [f64; 3], mic: [f64; 3]) -> Self {
        let d = distance(pos, mic);
        SourcePlacement {
            pos,
            distance_to_mic: d,
            label: if d < NEAR_THRESHOLD { Label::Near } else { Label::Far },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub room_dims: [f64; 3],
    pub mic_pos: [f64; 3],
    pub rt60: f64,
    pub env: Environment,
    pub near_sources: Vec<SourcePlacement>,
    pub far_sources: Vec<SourcePlacement>,
    pub snr_db: f64,
    pub seed: u64,
    pub far_band: FarBand,
    /// Pressure reflection coefficient of the ground in outdoor scenes.
    pub floor_reflection: f64,
}

impl SceneSpec {
    /// Near sources first, then far sources.
    pub fn sources(&self) -> impl Iterator<Item = &SourcePlacement> {
        self.near_sources.iter().chain(&self.far_sources)
    }

    pub fn source_count(&self) -> usize {
        self.near_sources.len() + self.far_sources.len()
    }

    pub fn inside(&self, p: [f64; 3]) -> bool {
        p.iter().zip(&self.room_dims).all(|(x, l)| *x > 0.0 && x < l)
    }
}

pub fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Scene seed for item `index` of a corpus drawn from `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng.next_u64()
}

fn uniform_direction(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let z: f64 = rng.gen_range(-1.0..=1.0);
    let phi: f64 = rng.gen_range(0.0..2.0 * PI);
    let r = (1.0 - z * z).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}

fn place(
    rng: &mut ChaCha8Rng,
    room: [f64; 3],
    mic: [f64; 3],
    range: (f64, f64),
    half_open: bool,
    what: &str,
) -> Result<SourcePlacement> {
    for _ in 0..MAX_PLACEMENT_RETRIES {
        let d = if half_open {
            rng.gen_range(range.0..range.1)
        } else {
            rng.gen_range(range.0..=range.1)
        };
        let dir = uniform_direction(rng);
        let pos = [mic[0] + d * dir[0], mic[1] + d * dir[1], mic[2] + d * dir[2]];
        if pos.iter().zip(&room).all(|(x, l)| *x > 0.0 && x < l) {
            return Ok(SourcePlacement::new(pos, mic));
        }
    }
    Err(DssError::PlacementInfeasible {
        constraint: format!("{what} source at {:.2}-{:.2} m from the microphone strictly inside the room", range.0, range.1),
        retries: MAX_PLACEMENT_RETRIES,
    })
}

/// Samples a scene with uniform random geometry, RT60, SNR and source
/// counts. Deterministic in `seed`.
pub fn sample_scene(seed: u64, env: Environment, far_band: FarBand) -> Result<SceneSpec> {
    sample_scene_with_counts(seed, env, far_band, None)
}

/// Like [`sample_scene`] but with fixed `(near, far)` source counts.
pub fn sample_scene_with_counts(
    seed: u64,
    env: Environment,
    far_band: FarBand,
    counts: Option<(usize, usize)>,
) -> Result<SceneSpec> {
    if let Some((n, f)) = counts {
        if n > 3 || f > 3 || n + f == 0 {
            return Err(DssError::InvalidArgument(format!(
                "source counts ({n}, {f}) must each be in 0..=3 and not both zero"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let room = [rng.gen_range(4.5..=7.5), rng.gen_range(4.5..=7.5), rng.gen_range(2.4..=2.8)];
    let mic = [rng.gen_range(2.3..=3.7), rng.gen_range(2.3..=3.7), rng.gen_range(0.1..=1.5)];
    let rt60 = rng.gen_range(0.15..=1.0);
    let snr_db = SNR_LEVELS[rng.gen_range(0..SNR_LEVELS.len())];
    let floor_reflection = rng.gen_range(0.5..=0.99);
    let (n_near, n_far) = match counts {
        Some(c) => c,
        None => loop {
            let c = (rng.gen_range(0..=3usize), rng.gen_range(0..=3usize));
            if c.0 + c.1 > 0 {
                break c;
            }
        },
    };
    let near_sources = (0..n_near)
        .map(|_| place(&mut rng, room, mic, (0.02, NEAR_THRESHOLD), true, "near"))
        .collect::<Result<Vec<_>>>()?;
    let far_sources = (0..n_far)
        .map(|_| place(&mut rng, room, mic, far_band.range(), false, "far"))
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneSpec {
        room_dims: room,
        mic_pos: mic,
        rt60,
        env,
        near_sources,
        far_sources,
        snr_db,
        seed,
        far_band,
        floor_reflection,
    })
}

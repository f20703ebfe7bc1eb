//! Corpus generation: WAV triples plus a JSON-lines manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, noise_signal, render_scene, sample_scene_with_counts, speech_signal, Environment, FarBand, SceneSpec};
use crate::audio::{read_wav_16k, write_atomic, write_wav};
use crate::dsp::SAMPLE_RATE;
use crate::error::{DssError, Result};

pub const MANIFEST_NAME: &str = "manifest.jsonl";
/// RMS of every rendered mixture.
const MIXTURE_RMS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn segment_seconds(self) -> f64 {
        match self {
            Split::Train => 3.0,
            Split::Eval => 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvMode {
    Indoor,
    Outdoor,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub count: usize,
    pub split: Split,
    pub out_dir: PathBuf,
    pub env: EnvMode,
    /// Indoor:outdoor percentages used when `env` is mixed.
    pub ratio: (u32, u32),
    pub far_band: FarBand,
    pub seed: u64,
    /// Fixed `(near, far)` source counts; random when absent.
    #[serde(default)]
    pub counts: Option<(usize, usize)>,
    #[serde(default)]
    pub speech_dir: Option<PathBuf>,
    #[serde(default)]
    pub noise_dir: Option<PathBuf>,
}

impl CorpusConfig {
    pub fn new(count: usize, split: Split, out_dir: impl Into<PathBuf>, seed: u64) -> Self {
        CorpusConfig {
            count,
            split,
            out_dir: out_dir.into(),
            env: EnvMode::Mixed,
            ratio: (60, 40),
            far_band: FarBand::SR,
            seed,
            counts: None,
            speech_dir: None,
            noise_dir: None,
        }
    }

    /// Number of indoor scenes; the rest are outdoor. Rounding favours
    /// indoor.
    pub fn indoor_count(&self) -> usize {
        match self.env {
            EnvMode::Indoor => self.count,
            EnvMode::Outdoor => 0,
            EnvMode::Mixed => self.count - self.count * self.ratio.1 as usize / 100,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(DssError::Config("corpus count must be positive".into()));
        }
        if self.ratio.0 + self.ratio.1 != 100 {
            return Err(DssError::Config(format!(
                "mix ratio {}:{} must sum to 100",
                self.ratio.0, self.ratio.1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    pub env: Environment,
    pub far_band: FarBand,
    pub n_near: usize,
    pub n_far: usize,
    pub snr_db: f64,
    pub duration_s: f64,
    /// Paths relative to the manifest's directory.
    pub mixture: String,
    pub near: String,
    pub far: String,
    pub spec: SceneSpec,
}

/// Waveforms of one manifest entry.
#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub mixture: Vec<f64>,
    pub near: Vec<f64>,
    pub far: Vec<f64>,
}

impl ManifestRecord {
    pub fn load(&self, base: &Path) -> Result<LoadedScene> {
        let mixture = read_wav_16k(&base.join(&self.mixture))?;
        let near = read_wav_16k(&base.join(&self.near))?;
        let far = read_wav_16k(&base.join(&self.far))?;
        if near.len() != mixture.len() || far.len() != mixture.len() {
            return Err(DssError::format(base.join(&self.mixture), "waveform lengths differ within a scene"));
        }
        Ok(LoadedScene { mixture, near, far })
    }
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| DssError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(DssError::format(dir, "directory contains no .wav files"));
    }
    Ok(files)
}

/// Random `len`-sample excerpt of a file, tiled when the file is short.
fn excerpt(files: &[PathBuf], rng: &mut ChaCha8Rng, len: usize) -> Result<Vec<f64>> {
    let path = &files[rng.gen_range(0..files.len())];
    let x = read_wav_16k(path)?;
    if x.is_empty() {
        return Err(DssError::format(path, "empty audio file"));
    }
    let start = if x.len() > len { rng.gen_range(0..=x.len() - len) } else { 0 };
    Ok((0..len).map(|i| x[(start + i) % x.len()]).collect())
}

struct Sources {
    speech: Option<Vec<PathBuf>>,
    noise: Option<Vec<PathBuf>>,
}

fn render_one(cfg: &CorpusConfig, sources: &Sources, index: usize) -> Result<(ManifestRecord, [Vec<f64>; 3])> {
    let seed = derive_seed(cfg.seed, index as u64);
    let env = if index < cfg.indoor_count() { Environment::Indoor } else { Environment::Outdoor };
    let spec = sample_scene_with_counts(seed, env, cfg.far_band, cfg.counts)?;
    let len = (cfg.split.segment_seconds() * SAMPLE_RATE as f64) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_D5A7);
    let dry = (0..spec.source_count())
        .map(|_| match &sources.speech {
            Some(files) => excerpt(files, &mut rng, len),
            None => Ok(speech_signal(len, rng.gen())),
        })
        .collect::<Result<Vec<_>>>()?;
    let noise = match &sources.noise {
        Some(files) => excerpt(files, &mut rng, len)?,
        None => noise_signal(len, rng.gen()),
    };
    let sample = render_scene(&spec, &dry, &noise)?;
    let rms = (sample.mixture.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
    let sample = sample.scaled(MIXTURE_RMS / rms);

    let id = format!("{:?}_{index:05}", cfg.split).to_lowercase();
    let record = ManifestRecord {
        mixture: format!("{id}_mix.wav"),
        near: format!("{id}_near.wav"),
        far: format!("{id}_far.wav"),
        id,
        split: cfg.split,
        env,
        far_band: cfg.far_band,
        n_near: spec.near_sources.len(),
        n_far: spec.far_sources.len(),
        snr_db: spec.snr_db,
        duration_s: sample.duration_s,
        spec,
    };
    Ok((record, [sample.mixture, sample.target_near, sample.target_far]))
}

/// Renders `cfg.count` scenes into `cfg.out_dir` and writes the manifest.
/// Scene `i` is a pure function of `(cfg.seed, i)`, so output is identical
/// for any worker count.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<ManifestRecord>> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| DssError::io(&cfg.out_dir, e))?;
    let sources = Sources {
        speech: cfg.speech_dir.as_deref().map(wav_files).transpose()?,
        noise: cfg.noise_dir.as_deref().map(wav_files).transpose()?,
    };
    let records = (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let (record, [mix, near, far]) = render_one(cfg, &sources, i)?;
            write_wav(&cfg.out_dir.join(&record.mixture), &mix, SAMPLE_RATE)?;
            write_wav(&cfg.out_dir.join(&record.near), &near, SAMPLE_RATE)?;
            write_wav(&cfg.out_dir.join(&record.far), &far, SAMPLE_RATE)?;
            Ok(record)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).expect("manifest records serialize"));
        text.push('\n');
    }
    write_atomic(&cfg.out_dir.join(MANIFEST_NAME), text.as_bytes())?;
    Ok(records)
}

/// Parses a JSON-lines manifest. Returns the records and the directory
/// their paths are relative to.
pub fn read_manifest(path: &Path) -> Result<(Vec<ManifestRecord>, PathBuf)> {
    let text = fs::read_to_string(path).map_err(|e| DssError::io(path, e))?;
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| DssError::format(path, format!("line {}: {e}", i + 1))))
        .collect::<Result<Vec<ManifestRecord>>>()?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((records, base))
}

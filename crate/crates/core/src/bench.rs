//! Parameter and MAC accounting, real-time factor and attention scaling.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{core_macs, linear_rsa, quadratic_rsa, rope_softmax_quadratic, AttentionKind};
use crate::dsp::SAMPLE_RATE;
use crate::error::{DssError, Result};
use crate::model::{forward_macs, DssModel, ModelConfig};
use crate::scene::speech_signal;
use crate::tensor::gradcheck::rand_vec;
use crate::tensor::Tensor;

/// Inference runs on chunks of this length.
pub const CHUNK_SECONDS: f64 = 3.0;
pub const MIN_RTF_RUNS: usize = 20;
pub const SCALING_LENGTHS: [usize; 5] = [128, 256, 512, 1024, 2048];
/// Runs shorter than this are below what the wall clock resolves reliably.
const MIN_RUN_SECONDS: f64 = 1e-4;

pub fn count_params(cfg: &ModelConfig) -> u64 {
    crate::model::count_params(cfg) as u64
}

/// Forward MACs per second of audio when `audio_seconds` are processed in
/// 3 s chunks (the last one possibly shorter).
pub fn count_macs(cfg: &ModelConfig, audio_seconds: f64) -> Result<f64> {
    cfg.validate()?;
    if !(audio_seconds > 0.0) {
        return Err(DssError::InvalidArgument(format!("audio duration must be positive, got {audio_seconds}")));
    }
    let total = (audio_seconds * SAMPLE_RATE as f64).round() as usize;
    let chunk = (CHUNK_SECONDS * SAMPLE_RATE as f64) as usize;
    let mut macs = 0u64;
    let mut left = total;
    while left > 0 {
        let len = left.min(chunk);
        macs += forward_macs(cfg, len / cfg.hop);
        left -= len;
    }
    Ok(macs as f64 / audio_seconds)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times `f` `runs` times after `warmup` discarded calls; returns the
/// median wall-clock seconds.
fn median_seconds(runs: usize, warmup: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..warmup {
        f()?;
    }
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        f()?;
        times.push(t0.elapsed().as_secs_f64());
    }
    Ok(median(&mut times))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtfMeasurement {
    pub audio_seconds: f64,
    pub runs: usize,
    pub median_seconds: f64,
    pub rtf: f64,
}

/// Median real-time factor of `model.separate` on a synthetic signal.
pub fn measure_rtf(model: &DssModel<f32>, audio_seconds: f64, runs: usize, warmup: usize) -> Result<RtfMeasurement> {
    if runs < MIN_RTF_RUNS {
        return Err(DssError::InvalidArgument(format!("RTF needs at least {MIN_RTF_RUNS} runs, got {runs}")));
    }
    let len = (audio_seconds * SAMPLE_RATE as f64).round() as usize;
    if len < model.config().fft {
        return Err(DssError::InvalidArgument(format!("{audio_seconds} s is shorter than one analysis frame")));
    }
    let x = speech_signal(len, 0x8E7C);
    let med = median_seconds(runs, warmup, || model.separate(&x).map(|_| ()))?;
    if med < MIN_RUN_SECONDS {
        return Err(DssError::InvalidArgument(format!(
            "median run took {med:.2e} s, below timer resolution; use a longer input"
        )));
    }
    Ok(RtfMeasurement {
        audio_seconds,
        runs,
        median_seconds: med,
        rtf: med / audio_seconds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub n: usize,
    pub median_seconds: f64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingCurve {
    pub kind: AttentionKind,
    pub batch: usize,
    pub head_dim: usize,
    pub points: Vec<ScalingPoint>,
}

impl ScalingCurve {
    /// Latency ratio between two measured lengths.
    pub fn ratio(&self, hi: usize, lo: usize) -> Option<f64> {
        let at = |n| self.points.iter().find(|p| p.n == n).map(|p| p.median_seconds);
        Some(at(hi)? / at(lo)?)
    }
}

/// Times one attention core alone on random `[batch, n, head_dim]` inputs
/// for every `n` in `lengths`.
pub fn scaling_curve(kind: AttentionKind, batch: usize, head_dim: usize, lengths: &[usize], runs: usize) -> Result<ScalingCurve> {
    if runs == 0 || batch == 0 || head_dim == 0 {
        return Err(DssError::InvalidArgument("scaling curve needs positive runs, batch and head_dim".into()));
    }
    let mut points = Vec::with_capacity(lengths.len());
    for &n in lengths {
        let shape = [batch, n, head_dim];
        let numel = batch * n * head_dim;
        let mk = |seed| Tensor::<f32>::from_f64(&rand_vec(numel, seed), &shape);
        let (q, k, v) = (mk(1)?, mk(2)?, mk(3)?);
        let table = Tensor::<f32>::from_f64(&rand_vec(129 * head_dim, 4), &[129, head_dim])?;
        let med = median_seconds(runs, 2, || {
            match kind {
                AttentionKind::LinearRsa => linear_rsa(&q, &k, &v, 10_000.0)?,
                AttentionKind::QuadraticRsa => quadratic_rsa(&q, &k, &v, Some((&table, 64)))?,
                AttentionKind::RopeSoftmaxQuadratic => rope_softmax_quadratic(&q, &k, &v, 10_000.0)?,
            };
            Ok(())
        })?;
        points.push(ScalingPoint {
            n,
            median_seconds: med,
            macs: core_macs(kind, batch, n, head_dim),
        });
    }
    Ok(ScalingCurve {
        kind,
        batch,
        head_dim,
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub audio_seconds: f64,
    pub runs: usize,
    pub warmup: usize,
    pub scaling_runs: usize,
    pub scaling_lengths: Vec<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            model: ModelConfig::default(),
            seed: 0,
            audio_seconds: CHUNK_SECONDS,
            runs: MIN_RTF_RUNS,
            warmup: 2,
            scaling_runs: 20,
            scaling_lengths: SCALING_LENGTHS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: ModelConfig,
    pub params: u64,
    pub macs_per_second_audio: f64,
    pub rtf: RtfMeasurement,
    pub scaling: Vec<ScalingCurve>,
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    let model = DssModel::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let rtf = measure_rtf(&model, cfg.audio_seconds, cfg.runs, cfg.warmup)?;
    let attn = cfg.model.attention();
    let scaling = [AttentionKind::QuadraticRsa, AttentionKind::LinearRsa]
        .into_iter()
        .map(|k| scaling_curve(k, attn.heads, attn.head_dim(), &cfg.scaling_lengths, cfg.scaling_runs))
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchReport {
        model: cfg.model.clone(),
        params: count_params(&cfg.model),
        macs_per_second_audio: count_macs(&cfg.model, CHUNK_SECONDS)?,
        rtf,
        scaling,
    })
}

//! End-to-end desk-scale run: simulate, overfit, train, evaluate, bench.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{core_macs, AttentionKind};
use crate::audio::write_atomic;
use crate::bench::{count_macs, count_params, measure_rtf, scaling_curve, RtfMeasurement, ScalingCurve, SCALING_LENGTHS};
use crate::error::{DssError, Result};
use crate::eval::{evaluate, EvalReport, MetricKind, Separator};
use crate::model::{Checkpoint, DssModel, ModelConfig, Variant};
use crate::scene::{generate_corpus, CorpusConfig, FarBand, LoadedScene, Split, MANIFEST_NAME};
use crate::training::{example_loss, make_example, train, train_scenes, LossWeights, Start, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmokeConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub overfit_scenes: usize,
    pub overfit_steps: u64,
    pub steps: u64,
    pub crop_seconds: f64,
    pub lr: f64,
    pub bench_runs: usize,
}

impl Default for SmokeConfig {
    fn default() -> Self {
        SmokeConfig {
            seed: 7,
            model: ModelConfig::tiny(Variant::ProposedLinear),
            train_scenes: 20,
            eval_scenes: 10,
            overfit_scenes: 5,
            overfit_steps: 100,
            steps: 300,
            crop_seconds: 0.5,
            lr: 0.005,
            bench_runs: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn gate(name: &str, passed: bool, detail: String) -> Gate {
    Gate {
        name: name.into(),
        passed,
        detail,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverfitResult {
    pub scenes: usize,
    pub steps: u64,
    /// Mean loss over the fixed crops before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl OverfitResult {
    pub fn ratio(&self) -> f64 {
        self.final_loss / self.initial_loss
    }
}

/// Deterministic part of a smoke run; identical for equal seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmokeReport {
    pub config: SmokeConfig,
    pub overfit: OverfitResult,
    pub train_losses: Vec<f64>,
    pub eval: EvalReport,
    pub identity_eval: EvalReport,
    pub params: u64,
    pub macs_per_second_audio: f64,
    pub gates: Vec<Gate>,
}

/// Wall-clock measurements of a smoke run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmokeTiming {
    pub stage_seconds: Vec<(String, f64)>,
    pub rtf: RtfMeasurement,
    pub scaling: Vec<ScalingCurve>,
    pub gates: Vec<Gate>,
}

impl SmokeTiming {
    pub fn total_seconds(&self) -> f64 {
        self.stage_seconds.iter().map(|(_, s)| s).sum()
    }
}

pub const REPORT_NAME: &str = "smoke.json";
pub const TIMING_NAME: &str = "smoke_timing.json";

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| DssError::Stage {
        stage: name,
        source: Box::new(e),
    })
}

/// Mean loss of `model` over the first `crop` samples of every scene.
fn fixed_crop_loss(model: &DssModel<f32>, scenes: &[LoadedScene], crop: usize, w: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for s in scenes {
        let n = crop.min(s.mixture.len());
        let ex = make_example(model, &s.mixture[..n], &s.near[..n], &s.far[..n])?;
        total += example_loss(model, &ex, w)?.total.item() as f64;
    }
    Ok(total / scenes.len() as f64)
}

fn corpus(dir: &Path, count: usize, split: Split, seed: u64) -> Result<Vec<LoadedScene>> {
    let mut c = CorpusConfig::new(count, split, dir, seed);
    c.counts = Some((1, 1));
    let recs = generate_corpus(&c)?;
    recs.iter().map(|r| r.load(dir)).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| DssError::format(path, e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

/// Runs every stage under `out_dir` and writes [`REPORT_NAME`] and
/// [`TIMING_NAME`]. Gate failures are reported, not raised.
pub fn run_smoke(cfg: &SmokeConfig, out_dir: &Path) -> Result<(SmokeReport, SmokeTiming)> {
    cfg.model.validate()?;
    if cfg.overfit_scenes == 0 || cfg.overfit_scenes > cfg.train_scenes {
        return Err(DssError::Config(format!(
            "overfit_scenes must be in 1..={}, got {}",
            cfg.train_scenes, cfg.overfit_scenes
        )));
    }
    let mut times = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, times: &mut Vec<(String, f64)>| {
        times.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };
    let train_dir = out_dir.join("corpus_train");
    let eval_dir = out_dir.join("corpus_eval");

    let train_set = stage("simulate", corpus(&train_dir, cfg.train_scenes, Split::Train, cfg.seed))?;
    stage("simulate", corpus(&eval_dir, cfg.eval_scenes, Split::Eval, cfg.seed ^ 0xE7A1))?;
    lap("simulate", &mut times);

    let crop = (cfg.crop_seconds * crate::dsp::SAMPLE_RATE as f64) as usize;
    let mut tc = TrainConfig {
        batch: 1,
        steps: cfg.overfit_steps,
        seed: cfg.seed,
        crop_seconds: Some(cfg.crop_seconds),
        fixed_crops: true,
        checkpoint_every: 0,
        validate_every: 0,
        ..TrainConfig::default()
    };
    tc.optimizer.lr = cfg.lr;
    let overfit = stage("overfit", (|| {
        let subset = &train_set[..cfg.overfit_scenes];
        let init = DssModel::<f32>::new(cfg.model.clone(), cfg.seed)?;
        let initial_loss = fixed_crop_loss(&init, subset, crop, &tc.loss_weights)?;
        let start = Start::Fresh {
            model: cfg.model.clone(),
            init_seed: cfg.seed,
        };
        let rep = train_scenes(subset, start, &tc, &out_dir.join("overfit"))?;
        let final_loss = fixed_crop_loss(&rep.model, subset, crop, &tc.loss_weights)?;
        Ok(OverfitResult {
            scenes: subset.len(),
            steps: cfg.overfit_steps,
            initial_loss,
            final_loss,
        })
    })())?;
    lap("overfit", &mut times);

    tc.steps = cfg.steps;
    tc.fixed_crops = false;
    let start = Start::Fresh {
        model: cfg.model.clone(),
        init_seed: cfg.seed,
    };
    let trained = stage("train", train(&train_dir.join(MANIFEST_NAME), start, &tc, &out_dir.join("train")))?;
    lap("train", &mut times);

    let (records, base) = stage("evaluate", crate::scene::read_manifest(&eval_dir.join(MANIFEST_NAME)))?;
    let ck = stage("evaluate", Checkpoint::load(&trained.checkpoint))?;
    let eval = stage(
        "evaluate",
        evaluate(&records, &base, &[FarBand::SR], || {
            let m: DssModel<f32> = ck.to_model()?;
            Ok(Box::new(move |x: &[f64]| m.separate(x)) as Separator)
        }),
    )?;
    let identity_eval = stage(
        "evaluate",
        evaluate(&records, &base, &[FarBand::SR], || Ok(Box::new(|x: &[f64]| Ok((x.to_vec(), x.to_vec()))) as Separator)),
    )?;
    write_json(&out_dir.join("eval.json"), &eval)?;
    write_atomic(&out_dir.join("eval.txt"), eval.to_table().as_bytes())?;
    lap("evaluate", &mut times);

    let rtf = stage("bench", measure_rtf(&trained.model, crate::bench::CHUNK_SECONDS, cfg.bench_runs, 2))?;
    let attn = cfg.model.attention();
    let scaling = stage(
        "bench",
        [AttentionKind::QuadraticRsa, AttentionKind::LinearRsa]
            .into_iter()
            .map(|k| scaling_curve(k, attn.heads, attn.head_dim(), &SCALING_LENGTHS, cfg.bench_runs))
            .collect::<Result<Vec<_>>>(),
    )?;
    lap("bench", &mut times);

    let (near, far) = eval.mean_si_sdri(|_| true);
    let identity_zero = identity_eval
        .cells
        .iter()
        .flat_map(|c| [&c.near, &c.far])
        .all(|h| h.kind != MetricKind::SiSdri || h.value == 0.0);
    let doubling = [128usize, 256, 512, 1024].iter().all(|&n| {
        core_macs(AttentionKind::LinearRsa, 4, 2 * n, 12) == 2 * core_macs(AttentionKind::LinearRsa, 4, n, 12)
            && core_macs(AttentionKind::QuadraticRsa, 4, 2 * n, 12) == 4 * core_macs(AttentionKind::QuadraticRsa, 4, n, 12)
    });
    let gates = vec![
        gate("overfit_loss_halved", overfit.ratio() <= 0.5, format!("final/initial = {:.3}", overfit.ratio())),
        gate("near_si_sdri_positive", near.is_some_and(|v| v > 0.0), format!("{near:?} dB")),
        gate("far_si_sdri_positive", far.is_some_and(|v| v > 0.0), format!("{far:?} dB")),
        gate("identity_si_sdri_zero", identity_zero, String::new()),
        gate("mac_doubling_ratios", doubling, "linear x2, quadratic x4".into()),
    ];
    let ratio = |k: AttentionKind| scaling.iter().find(|c| c.kind == k).and_then(|c| c.ratio(2048, 256)).unwrap_or(f64::NAN);
    let (lin, quad) = (ratio(AttentionKind::LinearRsa), ratio(AttentionKind::QuadraticRsa));
    let timing_gates = vec![
        gate("linear_scaling", lin <= 12.0, format!("2048/256 = {lin:.2}")),
        gate("quadratic_scaling", quad >= 40.0, format!("2048/256 = {quad:.2}")),
    ];

    let report = SmokeReport {
        config: cfg.clone(),
        overfit,
        train_losses: trained.losses(),
        eval,
        identity_eval,
        params: count_params(&cfg.model),
        macs_per_second_audio: count_macs(&cfg.model, crate::bench::CHUNK_SECONDS)?,
        gates,
    };
    let timing = SmokeTiming {
        stage_seconds: times,
        rtf,
        scaling,
        gates: timing_gates,
    };
    write_json(&out_dir.join(REPORT_NAME), &report)?;
    write_json(&out_dir.join(TIMING_NAME), &timing)?;
    Ok((report, timing))
}

/// Where [`run_smoke`] leaves the trained checkpoint.
pub fn trained_checkpoint(out_dir: &Path) -> PathBuf {
    out_dir.join("train").join(crate::training::FINAL_CHECKPOINT)
}

//! Loss, optimizer and the training loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::write_atomic;
use crate::error::{DssError, Result};
use crate::model::{input_scale, Checkpoint, DssModel, ModelConfig, NamedTensor, TensorData};
use crate::scene::{read_manifest, Environment, ManifestRecord};
use crate::tensor::Scalar;

mod loss;
mod optim;

pub use loss::{dss_loss, head_loss, Components, DssLoss, LossWeights, Target};
pub use optim::{adamw_step, AdamWConfig, AdamWState, StepInfo};

pub use crate::scene::LoadedScene;

pub const METRICS_NAME: &str = "metrics.jsonl";
pub const TIMING_NAME: &str = "timing.jsonl";
pub const FINAL_CHECKPOINT: &str = "model.dssf";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub loss_weights: LossWeights,
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    /// Random excerpt length per example; whole segments when absent.
    pub crop_seconds: Option<f64>,
    /// Always crop from the start of each scene.
    pub fixed_crops: bool,
    /// Checkpoint cadence in steps (0 disables intermediate checkpoints).
    pub checkpoint_every: u64,
    /// Validation cadence in steps (0 disables validation).
    pub validate_every: u64,
    /// Share of scenes held out for validation (needs at least 10 scenes).
    pub validation_fraction: f64,
    /// Indoor:outdoor percentages to select from the manifest.
    pub env_ratio: Option<(u32, u32)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamWConfig::default(),
            loss_weights: LossWeights::default(),
            batch: 4,
            steps: 1000,
            seed: 0,
            crop_seconds: None,
            fixed_crops: false,
            checkpoint_every: 500,
            validate_every: 200,
            validation_fraction: 0.1,
            env_ratio: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        let w = &self.loss_weights;
        if w.mag < 0.0 || w.spec < 0.0 || w.time < 0.0 {
            return Err(DssError::Config("loss weights must be non-negative".into()));
        }
        if self.batch == 0 {
            return Err(DssError::Config("batch must be at least 1".into()));
        }
        if self.crop_seconds.is_some_and(|c| !(c > 0.0)) {
            return Err(DssError::Config("crop_seconds must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(DssError::Config("validation_fraction must be in [0, 1)".into()));
        }
        if let Some((a, b)) = self.env_ratio {
            if a + b != 100 {
                return Err(DssError::Config(format!("env_ratio {a}:{b} must sum to 100")));
            }
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricsRecord {
    Train {
        step: u64,
        lr: f64,
        loss: f64,
        near: Components,
        far: Components,
        grad_norm: f64,
    },
    Val {
        step: u64,
        loss: f64,
    },
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: DssModel<f32>,
    pub log: Vec<MetricsRecord>,
    pub checkpoint: PathBuf,
}

impl TrainReport {
    /// Training losses in step order.
    pub fn losses(&self) -> Vec<f64> {
        self.log
            .iter()
            .filter_map(|r| match r {
                MetricsRecord::Train { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }
}

/// Picks as many scenes as possible, in manifest order, such that the
/// indoor and outdoor shares match `ratio`.
pub fn select_by_ratio(records: &[ManifestRecord], ratio: (u32, u32)) -> Vec<ManifestRecord> {
    let indoor: Vec<_> = records.iter().filter(|r| r.env == Environment::Indoor).collect();
    let outdoor: Vec<_> = records.iter().filter(|r| r.env == Environment::Outdoor).collect();
    let cap = |avail: usize, pct: u32| if pct == 0 { usize::MAX } else { avail * 100 / pct as usize };
    let total = cap(indoor.len(), ratio.0).min(cap(outdoor.len(), ratio.1));
    let n_in = total * ratio.0 as usize / 100;
    let n_out = total - n_in;
    indoor
        .into_iter()
        .take(n_in)
        .chain(outdoor.into_iter().take(n_out))
        .cloned()
        .collect()
}

/// Model inputs and references for one training example.
pub struct Example {
    pub mixture: Vec<f64>,
    pub near: Target,
    pub far: Target,
}

/// Builds an example from aligned waveforms, normalizing all three by the
/// mixture's unit-RMS gain.
pub fn make_example<S: Scalar>(model: &DssModel<S>, mixture: &[f64], near: &[f64], far: &[f64]) -> Result<Example> {
    let g = input_scale(mixture);
    let target = |w: &[f64]| -> Result<Target> {
        let wave: Vec<f64> = w.iter().map(|v| v * g).collect();
        let spec = model.analyze(&wave)?;
        Ok(Target {
            re: spec.real,
            im: spec.imag,
            wave,
        })
    };
    Ok(Example {
        mixture: mixture.to_vec(),
        near: target(near)?,
        far: target(far)?,
    })
}

/// Forward pass and loss of one example.
pub fn example_loss<S: Scalar>(model: &DssModel<S>, ex: &Example, w: &LossWeights) -> Result<DssLoss<S>> {
    let out = model.forward(&ex.mixture)?;
    dss_loss(&out.near, &out.far, &ex.near, &ex.far, w)
}

fn crop(scene: &LoadedScene, start: usize, len: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let end = (start + len).min(scene.mixture.len());
    (
        scene.mixture[start..end].to_vec(),
        scene.near[start..end].to_vec(),
        scene.far[start..end].to_vec(),
    )
}

/// Epoch-wise deterministic shuffling of example indices.
struct Order {
    seed: u64,
    n: usize,
    epoch: Option<(u64, Vec<usize>)>,
}

impl Order {
    fn index(&mut self, position: u64) -> usize {
        let epoch = position / self.n as u64;
        if self.epoch.as_ref().map(|e| e.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch + 1);
            perm.shuffle(&mut rng);
            self.epoch = Some((epoch, perm));
        }
        self.epoch.as_ref().expect("set above").1[(position % self.n as u64) as usize]
    }
}

fn optimizer_tensors(model: &DssModel<f32>, state: &AdamWState) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    for (kind, bufs) in [("m", &state.m), ("v", &state.v)] {
        for (spec, buf) in model.specs().iter().zip(bufs) {
            out.push(NamedTensor {
                name: format!("opt.{kind}.{}", spec.name),
                shape: spec.shape.clone(),
                data: TensorData::F64(buf.clone()),
            });
        }
    }
    out
}

fn optimizer_from(ck: &Checkpoint, model: &DssModel<f32>) -> Result<AdamWState> {
    let mut state = AdamWState::zeros(model.specs().iter().map(|s| s.numel()));
    state.t = ck.step;
    for (kind, bufs) in [("m", &mut state.m), ("v", &mut state.v)] {
        for (spec, buf) in model.specs().iter().zip(bufs.iter_mut()) {
            let name = format!("opt.{kind}.{}", spec.name);
            let t = ck
                .get(&name)
                .ok_or_else(|| DssError::Config(format!("checkpoint lacks optimizer state {name}")))?;
            if t.data.len() != buf.len() {
                return Err(DssError::Config(format!("optimizer state {name} has the wrong size")));
            }
            *buf = t.data.to_vec::<f64>();
        }
    }
    Ok(state)
}

fn write_log(out_dir: &Path, log: &[MetricsRecord], timing: &[(u64, f64)]) -> Result<()> {
    let mut text = String::new();
    for r in log {
        text.push_str(&serde_json::to_string(r).expect("metrics serialize"));
        text.push('\n');
    }
    write_atomic(&out_dir.join(METRICS_NAME), text.as_bytes())?;
    let mut t = String::new();
    for (step, secs) in timing {
        t.push_str(&format!("{{\"step\":{step},\"wall_clock_s\":{secs:.3}}}\n"));
    }
    write_atomic(&out_dir.join(TIMING_NAME), t.as_bytes())
}

fn read_log(path: &Path) -> Result<Vec<MetricsRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| DssError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| DssError::format(path, e.to_string())))
        .collect()
}

fn save_checkpoint(model: &DssModel<f32>, state: &AdamWState, step: u64, cfg: &TrainConfig, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::from_model(model, step);
    ck.tensors.extend(optimizer_tensors(model, state));
    ck.extra = serde_json::json!({ "train": cfg });
    ck.save(path)
}

/// Where a run starts from.
pub enum Start {
    Fresh { model: ModelConfig, init_seed: u64 },
    Resume(PathBuf),
}

/// Trains on in-memory scenes. Writes the metrics log, intermediate
/// checkpoints (`ckpt_NNNNNN.dssf`) and the final `model.dssf` into
/// `out_dir`.
pub fn train_scenes(scenes: &[LoadedScene], start: Start, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(DssError::InvalidArgument("no training scenes".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| DssError::io(out_dir, e))?;
    let (mut model, mut state, first_step, mut log) = match start {
        Start::Fresh { model, init_seed } => {
            let m = DssModel::<f32>::new(model, init_seed)?;
            let st = AdamWState::zeros(m.specs().iter().map(|s| s.numel()));
            (m, st, 0, Vec::new())
        }
        Start::Resume(path) => {
            let ck = Checkpoint::load(&path)?;
            let m: DssModel<f32> = ck.to_model()?;
            let st = optimizer_from(&ck, &m)?;
            let log = read_log(&out_dir.join(METRICS_NAME))?
                .into_iter()
                .filter(|r| match r {
                    MetricsRecord::Train { step, .. } | MetricsRecord::Val { step, .. } => *step <= ck.step,
                })
                .collect();
            (m, st, ck.step, log)
        }
    };

    // Validation split.
    let mut ids: Vec<usize> = (0..scenes.len()).collect();
    let n_val = if cfg.validate_every > 0 && scenes.len() >= 10 {
        ((scenes.len() as f64 * cfg.validation_fraction).round() as usize).min(scenes.len() - 1)
    } else {
        0
    };
    let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    split_rng.set_stream(0);
    if n_val > 0 {
        ids.shuffle(&mut split_rng);
    }
    let (val_ids, train_ids) = ids.split_at(n_val);
    let val_ids = val_ids.to_vec();
    let mut train_ids = train_ids.to_vec();
    if n_val == 0 {
        train_ids.sort_unstable();
    }

    let fs = crate::dsp::SAMPLE_RATE as f64;
    let crop_len = |scene: &LoadedScene| -> usize {
        cfg.crop_seconds
            .map_or(scene.mixture.len(), |c| ((c * fs) as usize).min(scene.mixture.len()))
    };
    let validation = |model: &DssModel<f32>| -> Result<f64> {
        let mut acc = 0.0;
        for &i in &val_ids {
            let s = &scenes[i];
            let (m, n, f) = crop(s, 0, crop_len(s));
            let ex = make_example(model, &m, &n, &f)?;
            acc += example_loss(model, &ex, &cfg.loss_weights)?.total.item().as_f64();
        }
        Ok(acc / val_ids.len().max(1) as f64)
    };

    let mut order = Order {
        seed: cfg.seed,
        n: train_ids.len(),
        epoch: None,
    };
    let mut timing = Vec::new();
    let clock = Instant::now();
    model.set_trainable(true);
    for step in first_step..cfg.steps {
        let mut near = Components::default();
        let mut far = Components::default();
        let mut total = 0.0;
        for t in model.tensors() {
            t.zero_grad();
        }
        for j in 0..cfg.batch {
            let pos = step * cfg.batch as u64 + j as u64;
            let scene = &scenes[train_ids[order.index(pos)]];
            let len = crop_len(scene);
            let start = if cfg.fixed_crops || len >= scene.mixture.len() {
                0
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC809);
                rng.set_stream(pos);
                rng.gen_range(0..=scene.mixture.len() - len)
            };
            let (m, n, f) = crop(scene, start, len);
            let ex = make_example(&model, &m, &n, &f)?;
            let l = example_loss(&model, &ex, &cfg.loss_weights)?;
            total += l.total.item().as_f64();
            for (acc, c) in [(&mut near, l.near), (&mut far, l.far)] {
                acc.mag += c.mag / cfg.batch as f64;
                acc.spec += c.spec / cfg.batch as f64;
                acc.time += c.time / cfg.batch as f64;
            }
            l.total.scale(1.0 / cfg.batch as f64).backward()?;
        }
        let loss = total / cfg.batch as f64;
        if !loss.is_finite() {
            return Err(DssError::Numerical(format!("non-finite training loss at step {}", step + 1)));
        }
        let grads: Vec<Vec<f64>> = model
            .tensors()
            .iter()
            .map(|t| t.grad().map_or_else(|| vec![0.0; t.numel()], |g| g.iter().map(|v| v.as_f64()).collect()))
            .collect();
        let mut weights: Vec<Vec<f64>> = model.tensors().iter().map(|t| t.to_f64_vec()).collect();
        let info = adamw_step(&mut weights, &grads, &mut state, &cfg.optimizer, step)
            .map_err(|e| DssError::Numerical(format!("step {}: {e}", step + 1)))?;
        for (i, w) in weights.into_iter().enumerate() {
            model.set_values(i, w.into_iter().map(|v| v as f32).collect())?;
        }
        let done = step + 1;
        log.push(MetricsRecord::Train {
            step: done,
            lr: info.lr,
            loss,
            near,
            far,
            grad_norm: info.grad_norm,
        });
        timing.push((done, clock.elapsed().as_secs_f64()));
        log::debug!("step {done} loss {loss:.5} grad_norm {:.3}", info.grad_norm);
        if !val_ids.is_empty() && cfg.validate_every > 0 && (done % cfg.validate_every == 0 || done == cfg.steps) {
            let v = validation(&model)?;
            log::info!("step {done} validation loss {v:.5}");
            log.push(MetricsRecord::Val { step: done, loss: v });
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps {
            let path = out_dir.join(format!("ckpt_{done:06}.dssf"));
            save_checkpoint(&model, &state, done, cfg, &path)?;
            write_log(out_dir, &log, &timing)?;
        }
    }
    model.set_trainable(false);
    let path = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&model, &state, cfg.steps.max(first_step), cfg, &path)?;
    write_log(out_dir, &log, &timing)?;
    Ok(TrainReport {
        model,
        log,
        checkpoint: path,
    })
}

/// Loads the scenes of a manifest (optionally re-balanced by environment)
/// and trains on them.
pub fn train(manifest: &Path, start: Start, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    let (mut records, base) = read_manifest(manifest)?;
    if let Some(ratio) = cfg.env_ratio {
        records = select_by_ratio(&records, ratio);
    }
    if records.is_empty() {
        return Err(DssError::format(manifest, "manifest selects no scenes"));
    }
    let scenes = records.iter().map(|r| r.load(&base)).collect::<Result<Vec<_>>>()?;
    train_scenes(&scenes, start, cfg, out_dir)
}

#[cfg(test)]
mod tests;

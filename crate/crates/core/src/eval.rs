//! Separation metrics and per-scenario aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DssError, Result};
use crate::model::{Checkpoint, DssModel};
use crate::scene::{read_manifest, Environment, FarBand, ManifestRecord};

pub const SI_SDR_CAP: f64 = 60.0;
pub const SILENCE_CAP: f64 = 80.0;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant SDR in dB, clamped to `±SI_SDR_CAP`. Fails on a length
/// mismatch or an all-zero target.
pub fn si_sdr(est: &[f64], target: &[f64]) -> Result<f64> {
    if est.len() != target.len() {
        return Err(DssError::InvalidArgument(format!(
            "estimate has {} samples, target {}",
            est.len(),
            target.len()
        )));
    }
    let tt = dot(target, target);
    if tt == 0.0 {
        return Err(DssError::InvalidArgument("SI-SDR is undefined for a silent target".into()));
    }
    let alpha = dot(est, target) / tt;
    let (mut sig, mut err) = (0.0, 0.0);
    for (e, t) in est.iter().zip(target) {
        let s = alpha * t;
        sig += s * s;
        err += (s - e) * (s - e);
    }
    if err == 0.0 || sig >= err * 1e6 {
        return Ok(SI_SDR_CAP);
    }
    if sig <= err * 1e-6 {
        return Ok(-SI_SDR_CAP);
    }
    Ok(10.0 * (sig / err).log10())
}

/// How far an estimate for an absent source is below the mixture, in dB,
/// capped at `SILENCE_CAP`.
pub fn silence_suppression(est: &[f64], mixture: &[f64]) -> Result<f64> {
    let pm = dot(mixture, mixture);
    if pm == 0.0 {
        return Err(DssError::InvalidArgument("silence suppression needs a non-silent mixture".into()));
    }
    let pe = dot(est, est);
    if pe == 0.0 || pm >= pe * 1e8 {
        return Ok(SILENCE_CAP);
    }
    Ok((10.0 * (pm / pe).log10()).min(SILENCE_CAP))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// SI-SDR improvement over the unprocessed mixture.
    SiSdri,
    /// [`silence_suppression`] for cells whose target is absent.
    SilenceDb,
}

/// Per-scene scores of one head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub kind: MetricKind,
    /// SI-SDR of the estimate (SI-SDRi kind only).
    pub si_sdr: Option<f64>,
    /// SI-SDRi or silence level, depending on `kind`.
    pub value: f64,
}

fn score(est: &[f64], target: &[f64], mixture: &[f64]) -> Result<HeadScore> {
    if target.iter().all(|&v| v == 0.0) {
        return Ok(HeadScore {
            kind: MetricKind::SilenceDb,
            si_sdr: None,
            value: silence_suppression(est, mixture)?,
        });
    }
    let s = si_sdr(est, target)?;
    Ok(HeadScore {
        kind: MetricKind::SiSdri,
        si_sdr: Some(s),
        value: s - si_sdr(mixture, target)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneScore {
    pub id: String,
    pub env: Environment,
    pub far_band: FarBand,
    pub n_near: usize,
    pub n_far: usize,
    pub near: HeadScore,
    pub far: HeadScore,
}

/// Average of one head over a cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadSummary {
    pub kind: MetricKind,
    pub si_sdr: Option<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub env: Environment,
    pub far_band: FarBand,
    pub n_near: usize,
    pub n_far: usize,
    pub scenes: usize,
    pub near: HeadSummary,
    pub far: HeadSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<CellMetrics>,
    pub scenes: Vec<SceneScore>,
}

fn summarize(scores: &[&HeadScore]) -> HeadSummary {
    let n = scores.len() as f64;
    let kind = scores[0].kind;
    let si_sdr = (kind == MetricKind::SiSdri).then(|| scores.iter().map(|s| s.si_sdr.unwrap_or(0.0)).sum::<f64>() / n);
    HeadSummary {
        kind,
        si_sdr,
        value: scores.iter().map(|s| s.value).sum::<f64>() / n,
    }
}

impl EvalReport {
    /// Groups scene scores by (environment, band, #near, #far). Scenes are
    /// sorted by id first so averages do not depend on evaluation order.
    pub fn from_scores(mut scenes: Vec<SceneScore>) -> Self {
        scenes.sort_by(|a, b| a.id.cmp(&b.id));
        let mut groups: BTreeMap<(Environment, FarBand, usize, usize), Vec<&SceneScore>> = BTreeMap::new();
        for s in &scenes {
            groups.entry((s.env, s.far_band, s.n_near, s.n_far)).or_default().push(s);
        }
        let cells = groups
            .into_iter()
            .map(|((env, far_band, n_near, n_far), v)| CellMetrics {
                env,
                far_band,
                n_near,
                n_far,
                scenes: v.len(),
                near: summarize(&v.iter().map(|s| &s.near).collect::<Vec<_>>()),
                far: summarize(&v.iter().map(|s| &s.far).collect::<Vec<_>>()),
            })
            .collect();
        EvalReport { cells, scenes }
    }

    pub fn cell(&self, env: Environment, band: FarBand, n_near: usize, n_far: usize) -> Option<&CellMetrics> {
        self.cells
            .iter()
            .find(|c| c.env == env && c.far_band == band && c.n_near == n_near && c.n_far == n_far)
    }

    /// Scene-weighted mean of each head's SI-SDRi over cells where it applies.
    pub fn mean_si_sdri(&self, filter: impl Fn(&CellMetrics) -> bool) -> (Option<f64>, Option<f64>) {
        let mean = |pick: &dyn Fn(&CellMetrics) -> &HeadSummary| {
            let (mut acc, mut n) = (0.0, 0usize);
            for c in self.cells.iter().filter(|c| filter(c)) {
                let h = pick(c);
                if h.kind == MetricKind::SiSdri {
                    acc += h.value * c.scenes as f64;
                    n += c.scenes;
                }
            }
            (n > 0).then(|| acc / n as f64)
        };
        (mean(&|c| &c.near), mean(&|c| &c.far))
    }

    /// Aligned text table, one row per cell. Silence rows carry an `s`
    /// suffix.
    pub fn to_table(&self) -> String {
        let fmt = |h: &HeadSummary| match h.kind {
            MetricKind::SiSdri => format!("{:>8.2}", h.value),
            MetricKind::SilenceDb => format!("{:>7.2}s", h.value),
        };
        let mut out = String::new();
        let _ = writeln!(out, "{:<8} {:<5} {:>5} {:>6} {:>8} {:>8}", "env", "band", "#near", "#far", "near", "far");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{:<8} {:<5} {:>5} {:>6} {} {}  (n={})",
                c.env.to_string(),
                c.far_band.to_string(),
                c.n_near,
                c.n_far,
                fmt(&c.near),
                fmt(&c.far),
                c.scenes
            );
        }
        let _ = writeln!(out, "near/far: SI-SDRi in dB; 's' marks silence suppression in dB for absent targets");
        out
    }
}

/// A separator maps a mixture to (near, far) estimates.
pub type Separator = Box<dyn FnMut(&[f64]) -> Result<(Vec<f64>, Vec<f64>)>>;

/// Scores every record whose band is in `bands`. `make` builds one
/// separator per worker thread.
pub fn evaluate<F>(records: &[ManifestRecord], base: &Path, bands: &[FarBand], make: F) -> Result<EvalReport>
where
    F: Fn() -> Result<Separator> + Sync,
{
    let chosen: Vec<&ManifestRecord> = records.iter().filter(|r| bands.contains(&r.far_band)).collect();
    if chosen.is_empty() {
        return Err(DssError::InvalidArgument(format!("no scenes in bands {bands:?}")));
    }
    let scores = chosen
        .par_iter()
        .map_init(
            || None::<Separator>,
            |slot, r| -> Result<SceneScore> {
                if slot.is_none() {
                    *slot = Some(make()?);
                }
                let sep = slot.as_mut().expect("initialized above");
                let s = r.load(base)?;
                let (near, far) = sep(&s.mixture)?;
                if near.len() != s.mixture.len() || far.len() != s.mixture.len() {
                    return Err(DssError::Shape(format!("{}: separator changed the signal length", r.id)));
                }
                Ok(SceneScore {
                    id: r.id.clone(),
                    env: r.env,
                    far_band: r.far_band,
                    n_near: r.n_near,
                    n_far: r.n_far,
                    near: score(&near, &s.near, &s.mixture)?,
                    far: score(&far, &s.far, &s.mixture)?,
                })
            },
        )
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_scores(scores))
}

/// Evaluates a checkpoint on a manifest.
pub fn evaluate_checkpoint(ckpt: &Path, manifest: &Path, bands: &[FarBand]) -> Result<EvalReport> {
    let ck = Checkpoint::load(ckpt)?;
    ck.to_model::<f32>()?;
    let (records, base) = read_manifest(manifest)?;
    evaluate(&records, &base, bands, || {
        let m: DssModel<f32> = ck.to_model()?;
        Ok(Box::new(move |x: &[f64]| m.separate(x)) as Separator)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_corpus, CorpusConfig, Split, MANIFEST_NAME};
    use crate::tensor::gradcheck::rand_vec;

    #[test]
    fn si_sdr_identities() {
        let t = rand_vec(1000, 1);
        assert_eq!(si_sdr(&t, &t).unwrap(), SI_SDR_CAP);
        let t2: Vec<f64> = t.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_sdr(&t2, &t).unwrap(), SI_SDR_CAP);
        assert!(si_sdr(&t, &[0.0; 1000]).is_err());
        assert!(si_sdr(&t[..10], &t).is_err());
    }

    #[test]
    fn orthogonal_noise_at_ten_db() {
        let t = rand_vec(4096, 2);
        let r = rand_vec(4096, 3);
        let a = dot(&r, &t) / dot(&t, &t);
        let n: Vec<f64> = r.iter().zip(&t).map(|(x, y)| x - a * y).collect();
        let g = (dot(&t, &t) / dot(&n, &n) / 10.0).sqrt();
        let e: Vec<f64> = t.iter().zip(&n).map(|(x, y)| x + g * y).collect();
        assert!((si_sdr(&e, &t).unwrap() - 10.0).abs() < 1e-6);
    }

    #[test]
    fn scale_invariance() {
        let t = rand_vec(512, 4);
        let e = rand_vec(512, 5);
        let base = si_sdr(&e, &t).unwrap();
        for c in [1e-3, 0.5, 3.0, 1e4] {
            let ec: Vec<f64> = e.iter().map(|v| c * v).collect();
            assert!((si_sdr(&ec, &t).unwrap() - base).abs() < 1e-9);
        }
    }

    #[test]
    fn silence_metric() {
        let m = rand_vec(800, 6);
        assert_eq!(silence_suppression(&[0.0; 800], &m).unwrap(), SILENCE_CAP);
        assert_eq!(silence_suppression(&m, &m).unwrap(), 0.0);
        let half: Vec<f64> = m.iter().map(|v| 0.5 * v).collect();
        assert!((silence_suppression(&half, &m).unwrap() - 20.0 * 2f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn oracle_identity_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = CorpusConfig::new(6, Split::Eval, dir.path(), 8);
        c.counts = None;
        let recs = generate_corpus(&c).unwrap();
        let base = dir.path().to_path_buf();

        let identity = evaluate(&recs, &base, &[FarBand::SR], || Ok(Box::new(|x: &[f64]| Ok((x.to_vec(), x.to_vec()))) as Separator)).unwrap();
        for cell in &identity.cells {
            for h in [&cell.near, &cell.far] {
                match h.kind {
                    MetricKind::SiSdri => assert_eq!(h.value, 0.0),
                    MetricKind::SilenceDb => assert_eq!(h.value, 0.0),
                }
            }
        }

        // Oracle separator: look the targets up by mixture.
        let loaded: Vec<_> = recs.iter().map(|r| r.load(&base).unwrap()).collect();
        let lookup = loaded.clone();
        let oracle = evaluate(&recs, &base, &[FarBand::SR], move || {
            let l = lookup.clone();
            Ok(Box::new(move |x: &[f64]| {
                let s = l.iter().find(|s| s.mixture == x).expect("known mixture");
                Ok((s.near.clone(), s.far.clone()))
            }) as Separator)
        })
        .unwrap();
        for s in &oracle.scenes {
            for h in [&s.near, &s.far] {
                match h.kind {
                    MetricKind::SiSdri => assert_eq!(h.si_sdr, Some(SI_SDR_CAP)),
                    MetricKind::SilenceDb => assert_eq!(h.value, SILENCE_CAP),
                }
            }
        }

        let mut shuffled = identity.scenes.clone();
        shuffled.reverse();
        assert_eq!(EvalReport::from_scores(shuffled), identity);
        assert!(identity.to_table().contains("SR"));
        let json = serde_json::to_string(&identity).unwrap();
        assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), identity);

        let _ = std::fs::metadata(dir.path().join(MANIFEST_NAME)).unwrap();
        assert!(evaluate(&recs, &base, &[FarBand::UR2], || Ok(Box::new(|x: &[f64]| Ok((x.to_vec(), x.to_vec()))) as Separator)).is_err());
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{DssError, Result};
use crate::model::HeadOutput;
use crate::tensor::{Scalar, Tensor};

/// Floor inside the magnitude square root; applied to prediction and target
/// alike so equal inputs give exactly zero loss.
const MAG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub mag: f64,
    pub spec: f64,
    pub time: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mag: 0.9,
            spec: 0.1,
            time: 0.2,
        }
    }
}

/// Reference signal for one head: compressed spectrogram planes
/// `[frames × bins]` and the waveform, all in the normalized domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub wave: Vec<f64>,
}

/// Scalar loss terms of one head.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub mag: f64,
    pub spec: f64,
    pub time: f64,
}

#[derive(Debug, Clone)]
pub struct DssLoss<S: Scalar> {
    pub total: Tensor<S>,
    pub near: Components,
    pub far: Components,
}

fn magnitude<S: Scalar>(re: &Tensor<S>, im: &Tensor<S>) -> Result<Tensor<S>> {
    Ok(re.mul(re)?.add(&im.mul(im)?)?.add_scalar(MAG_EPS).powf(0.5))
}

fn mse<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let d = a.sub(b)?;
    Ok(d.mul(&d)?.mean_all())
}

/// Weighted loss of one head and its unweighted components.
pub fn head_loss<S: Scalar>(pred: &HeadOutput<S>, target: &Target, w: &LossWeights) -> Result<(Tensor<S>, Components)> {
    let shape = pred.re.shape().to_vec();
    let n = pred.re.numel();
    if target.re.len() != n || target.im.len() != n || pred.im.numel() != n {
        return Err(DssError::Shape(format!(
            "spectrogram sizes differ: prediction {:?}, target {}",
            shape,
            target.re.len()
        )));
    }
    if pred.wave.numel() != target.wave.len() {
        return Err(DssError::Shape(format!(
            "waveform lengths differ: prediction {}, target {}",
            pred.wave.numel(),
            target.wave.len()
        )));
    }
    let tre = Tensor::from_f64(&target.re, &shape)?;
    let tim = Tensor::from_f64(&target.im, &shape)?;
    let twave = Tensor::from_f64(&target.wave, &[target.wave.len()])?;
    let mag = mse(&magnitude(&pred.re, &pred.im)?, &magnitude(&tre, &tim)?)?;
    let spec = mse(&pred.re, &tre)?.add(&mse(&pred.im, &tim)?)?;
    let time = pred.wave.sub(&twave)?.abs().mean_all();
    let comps = Components {
        mag: mag.item().as_f64(),
        spec: spec.item().as_f64(),
        time: time.item().as_f64(),
    };
    let total = mag.scale(w.mag).add(&spec.scale(w.spec))?.add(&time.scale(w.time))?;
    Ok((total, comps))
}

/// Sum of the weighted near and far losses.
pub fn dss_loss<S: Scalar>(
    near: &HeadOutput<S>,
    far: &HeadOutput<S>,
    target_near: &Target,
    target_far: &Target,
    w: &LossWeights,
) -> Result<DssLoss<S>> {
    let (ln, cn) = head_loss(near, target_near, w)?;
    let (lf, cf) = head_loss(far, target_far, w)?;
    Ok(DssLoss {
        total: ln.add(&lf)?,
        near: cn,
        far: cf,
    })
}

impl Components {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.mag * self.mag + w.spec * self.spec + w.time * self.time
    }
}

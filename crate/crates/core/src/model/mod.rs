//! The separation network: a dilated-DenseNet encoder over the compressed
//! spectrogram, a stack of two-stage (time, then frequency) conformer
//! blocks, and two decoder heads that each predict a mask and a complex
//! residual for one target.

use std::collections::HashMap;

use crate::attention::{mhsa, MhsaWeights};
use crate::dsp::{compress, ComplexSpectrogram, Stft};
use crate::error::{DssError, Result};
use crate::tensor::{Conv2dSpec, Padding2d, Scalar, Tensor};

mod checkpoint;
mod config;
mod params;

pub use checkpoint::{Checkpoint, NamedTensor, TensorData, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, Variant};
pub use params::{count_params, init_values, param_specs, Init, ParamSpec};

const LN_EPS: f64 = 1e-5;
/// Keeps the decompression power differentiable at the origin.
const DECOMPRESS_EPS: f64 = 1e-12;

/// Compressed-domain estimate and waveform of one target, in the
/// normalized domain of [`ForwardOutput::scale`].
#[derive(Debug, Clone)]
pub struct HeadOutput<S: Scalar> {
    /// `[frames, bins]`
    pub re: Tensor<S>,
    pub im: Tensor<S>,
    /// `[samples]`
    pub wave: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<S: Scalar> {
    pub near: HeadOutput<S>,
    pub far: HeadOutput<S>,
    /// Gain applied to the mixture before analysis; waveforms in the input
    /// domain are `wave / scale`.
    pub scale: f64,
}

impl<S: Scalar> ForwardOutput<S> {
    pub fn near_wave(&self) -> Vec<f64> {
        self.near.wave.data().iter().map(|v| v.as_f64() / self.scale).collect()
    }

    pub fn far_wave(&self) -> Vec<f64> {
        self.far.wave.data().iter().map(|v| v.as_f64() / self.scale).collect()
    }
}

/// Gain that brings `x` to unit RMS (1 for silence).
pub fn input_scale(x: &[f64]) -> f64 {
    let e: f64 = x.iter().map(|v| v * v).sum();
    if e > 0.0 {
        (x.len() as f64 / e).sqrt()
    } else {
        1.0
    }
}

/// Network weights plus the configuration they belong to.
#[derive(Clone)]
pub struct DssModel<S: Scalar> {
    cfg: ModelConfig,
    specs: Vec<ParamSpec>,
    index: HashMap<String, usize>,
    tensors: Vec<Tensor<S>>,
    trainable: bool,
    stft: Stft,
}

impl<S: Scalar> std::fmt::Debug for DssModel<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DssModel")
            .field("cfg", &self.cfg)
            .field("params", &self.num_params())
            .finish()
    }
}

fn make<S: Scalar>(data: Vec<S>, shape: &[usize], trainable: bool) -> Tensor<S> {
    if trainable {
        Tensor::param(data, shape).expect("spec shapes match their data")
    } else {
        Tensor::new(data, shape).expect("spec shapes match their data")
    }
}

impl<S: Scalar> DssModel<S> {
    /// Freshly initialized weights. Deterministic in `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(&cfg);
        let values = init_values(&specs, seed)
            .into_iter()
            .map(|v| v.into_iter().map(S::cast).collect())
            .collect();
        Self::assemble(cfg, specs, values)
    }

    /// Builds a model from raw tensors given in [`param_specs`] order.
    pub fn from_values(cfg: ModelConfig, values: Vec<Vec<S>>) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(&cfg);
        if values.len() != specs.len() {
            return Err(DssError::Shape(format!("expected {} tensors, got {}", specs.len(), values.len())));
        }
        for (s, v) in specs.iter().zip(&values) {
            if v.len() != s.numel() {
                return Err(DssError::Shape(format!("{} needs {} values, got {}", s.name, s.numel(), v.len())));
            }
        }
        Self::assemble(cfg, specs, values)
    }

    fn assemble(cfg: ModelConfig, specs: Vec<ParamSpec>, values: Vec<Vec<S>>) -> Result<Self> {
        let index = specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        let tensors = specs.iter().zip(values).map(|(s, v)| make(v, &s.shape, false)).collect();
        let stft = Stft::new(cfg.fft, cfg.hop);
        Ok(DssModel {
            cfg,
            specs,
            index,
            tensors,
            trainable: false,
            stft,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Parameter tensors in [`param_specs`] order.
    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn values(&self) -> Vec<Vec<S>> {
        self.tensors.iter().map(Tensor::to_vec).collect()
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Switches between gradient-tracking leaves and plain constants.
    pub fn set_trainable(&mut self, on: bool) {
        if on != self.trainable {
            self.trainable = on;
            for (t, s) in self.tensors.iter_mut().zip(&self.specs) {
                *t = make(t.to_vec(), &s.shape, on);
            }
        }
    }

    /// Replaces tensor `i` (by spec order) with `data`.
    pub fn set_values(&mut self, i: usize, data: Vec<S>) -> Result<()> {
        let s = self
            .specs
            .get(i)
            .ok_or_else(|| DssError::InvalidArgument(format!("no parameter #{i}")))?;
        if data.len() != s.numel() {
            return Err(DssError::Shape(format!("{} needs {} values, got {}", s.name, s.numel(), data.len())));
        }
        self.tensors[i] = make(data, &s.shape, self.trainable);
        Ok(())
    }

    pub fn set_param(&mut self, name: &str, data: Vec<S>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| DssError::InvalidArgument(format!("no parameter named {name}")))?;
        self.set_values(i, data)
    }

    /// Same weights at another precision.
    pub fn cast<T: Scalar>(&self) -> DssModel<T> {
        let values = self
            .tensors
            .iter()
            .map(|t| t.data().iter().map(|v| T::cast(v.as_f64())).collect())
            .collect();
        let mut m = DssModel::<T>::assemble(self.cfg.clone(), self.specs.clone(), values).expect("same layout");
        m.set_trainable(self.trainable);
        m
    }

    fn p(&self, name: &str) -> &Tensor<S> {
        match self.index.get(name) {
            Some(&i) => &self.tensors[i],
            None => panic!("parameter {name} missing from layout"),
        }
    }

    // ---- building blocks -------------------------------------------------

    fn conv(&self, p: &str, x: &Tensor<S>, spec: Conv2dSpec) -> Result<Tensor<S>> {
        x.conv2d(self.p(&format!("{p}.w")), Some(self.p(&format!("{p}.b"))), spec)
    }

    /// Layer norm over the channel axis of `[C, T, F]`.
    fn channel_ln(&self, p: &str, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.layer_norm(0, Some((self.p(&format!("{p}.g")), self.p(&format!("{p}.b")))), LN_EPS)
    }

    /// Layer norm over the last axis.
    fn ln_last(&self, p: &str, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.layer_norm(x.rank() - 1, Some((self.p(&format!("{p}.g")), self.p(&format!("{p}.b")))), LN_EPS)
    }

    fn conv_block(&self, p: &str, x: &Tensor<S>, spec: Conv2dSpec) -> Result<Tensor<S>> {
        let y = self.conv(p, x, spec)?;
        self.channel_ln(&format!("{p}.ln"), &y)?.prelu(self.p(&format!("{p}.act.a")))
    }

    fn linear(&self, p: &str, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.matmul(self.p(&format!("{p}.w")))?.add(self.p(&format!("{p}.b")))
    }

    /// Time-dilated DenseNet: block `i` sees the concatenation of the input
    /// and all earlier block outputs; a 1×1 bottleneck merges everything.
    fn densenet(&self, p: &str, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut feats = vec![x.clone()];
        for (i, &d) in self.cfg.densenet_dilations.iter().enumerate() {
            let inp = Tensor::concat(&feats.iter().rev().collect::<Vec<_>>(), 0)?;
            let spec = Conv2dSpec {
                dilation: (d, 1),
                padding: Padding2d::causal_h(d, 1),
                ..Conv2dSpec::default()
            };
            feats.push(self.conv_block(&format!("{p}.l{i}"), &inp, spec)?);
        }
        let all = Tensor::concat(&feats.iter().rev().collect::<Vec<_>>(), 0)?;
        self.conv(&format!("{p}.out"), &all, Conv2dSpec::default())
    }

    /// `[3, T, F]` network input: real, imaginary and magnitude planes.
    pub fn input_planes(spec: &ComplexSpectrogram) -> Result<Tensor<S>> {
        let n = spec.real.len();
        let mut data = Vec::with_capacity(3 * n);
        data.extend(spec.real.iter().map(|&v| S::cast(v)));
        data.extend(spec.imag.iter().map(|&v| S::cast(v)));
        data.extend(spec.real.iter().zip(&spec.imag).map(|(r, i)| S::cast(r.hypot(*i))));
        Tensor::new(data, &[3, spec.frames, spec.bins()])
    }

    /// Encoder: `[3, T, F]` → `[C, T, (F − 1)/2]`.
    pub fn encode(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let bins = self.cfg.bins();
        if x.rank() != 3 || x.dim(0) != 3 || x.dim(2) != bins {
            return Err(DssError::Shape(format!("encoder expects [3, T, {bins}], got {:?}", x.shape())));
        }
        let h = self.conv_block("enc.in", x, Conv2dSpec::default())?;
        let h = self.densenet("enc.dense", &h)?;
        let h = h.narrow(2, 0, bins - 1)?;
        let down = Conv2dSpec {
            stride: (1, 2),
            padding: Padding2d::symmetric(0, 1),
            ..Conv2dSpec::default()
        };
        self.conv_block("enc.down", &h, down)
    }

    fn attention_weights(&self, p: &str) -> MhsaWeights<S> {
        MhsaWeights {
            wq: self.p(&format!("{p}.wq")).clone(),
            wk: self.p(&format!("{p}.wk")).clone(),
            wv: self.p(&format!("{p}.wv")).clone(),
            wo: self.p(&format!("{p}.wo")).clone(),
            bo: self.p(&format!("{p}.bo")).clone(),
            rel_table: self.param(&format!("{p}.rel")).cloned(),
        }
    }

    fn ffn(&self, p: &str, x: &Tensor<S>) -> Result<Tensor<S>> {
        let h = self.ln_last(&format!("{p}.ln"), x)?;
        let h = self.linear(&format!("{p}.l1"), &h)?.swish();
        self.linear(&format!("{p}.l2"), &h)
    }

    fn attention(&self, p: &str, x: &Tensor<S>) -> Result<Tensor<S>> {
        let h = self.ln_last(&format!("{p}.ln"), x)?;
        mhsa(&h, &self.cfg.attention(), &self.attention_weights(p))
    }

    fn conv_module(&self, p: &str, x: &Tensor<S>) -> Result<Tensor<S>> {
        let h = self.ln_last(&format!("{p}.ln"), x)?;
        let h = self.linear(&format!("{p}.pw1"), &h)?;
        let half = h.dim(h.rank() - 1) / 2;
        let parts = h.split(h.rank() - 1, &[half, half])?;
        let h = parts[0].mul(&parts[1].sigmoid())?;
        let h = h.depthwise_conv1d(self.p(&format!("{p}.dw.w")), Some(self.p(&format!("{p}.dw.b"))))?;
        let h = self.ln_last(&format!("{p}.ln2"), &h)?.swish();
        self.linear(&format!("{p}.pw2"), &h)
    }

    /// One conformer over `[B, N, C]` sequences.
    fn conformer(&self, p: &str, x: &Tensor<S>) -> Result<Tensor<S>> {
        let x = x.add(&self.ffn(&format!("{p}.ffn1"), x)?.scale(0.5))?;
        let x = x.add(&self.attention(&format!("{p}.attn"), &x)?)?;
        let x = x.add(&self.conv_module(&format!("{p}.conv"), &x)?)?;
        let x = x.add(&self.ffn(&format!("{p}.ffn2"), &x)?.scale(0.5))?;
        self.ln_last(&format!("{p}.post"), &x)
    }

    /// Pre-norm transformer layer over `[B, N, C]` sequences.
    fn transformer(&self, p: &str, x: &Tensor<S>) -> Result<Tensor<S>> {
        let x = x.add(&self.attention(&format!("{p}.attn"), x)?)?;
        x.add(&self.ffn(&format!("{p}.ffn"), &x)?)
    }

    fn stage(&self, p: &str, x: &Tensor<S>) -> Result<Tensor<S>> {
        let y = if self.cfg.variant == Variant::Roformer {
            self.transformer(p, x)?
        } else {
            self.conformer(p, x)?
        };
        y.add(x)
    }

    /// Block `index` (1-based) on `[C, T, F']`: time stage with each bin an
    /// independent sequence, then frequency stage with each frame one.
    pub fn ts_block(&self, index: usize, x: &Tensor<S>) -> Result<Tensor<S>> {
        if index == 0 || index > self.cfg.active_blocks() {
            return Err(DssError::InvalidArgument(format!("block {index} does not exist")));
        }
        if x.rank() != 3 || x.dim(0) != self.cfg.channels {
            return Err(DssError::Shape(format!("block expects [{}, T, F], got {:?}", self.cfg.channels, x.shape())));
        }
        let t = x.permute(&[2, 1, 0])?;
        let t = self.stage(&format!("blk{index}.time"), &t)?;
        let f = t.permute(&[1, 0, 2])?;
        let f = self.stage(&format!("blk{index}.freq"), &f)?;
        f.permute(&[2, 0, 1])
    }

    /// Mask or complex path: `[C, T, F']` → `[K, T, 2F' + 1]`.
    fn head_path(&self, p: &str, x: &Tensor<S>) -> Result<Tensor<S>> {
        let h = self.densenet(&format!("{p}.dense"), x)?;
        let up = Conv2dSpec {
            padding: Padding2d::symmetric(0, 1),
            ..Conv2dSpec::default()
        };
        let h = self.conv(&format!("{p}.up"), &h, up)?.pixel_shuffle_freq(2)?;
        let h = self.channel_ln(&format!("{p}.ln"), &h)?.prelu(self.p(&format!("{p}.act.a")))?;
        let body = self.conv(&format!("{p}.out"), &h, Conv2dSpec::default())?;
        let last = h.narrow(2, h.dim(2) - 1, 1)?;
        let nyq = self.conv(&format!("{p}.nyq"), &last, Conv2dSpec::default())?;
        Tensor::concat(&[&body, &nyq], 2)
    }

    /// Head `name` ("near" or "far"): mask times mixture plus complex
    /// residual, in the compressed domain. Returns `[T, F]` planes.
    pub fn decode_head(&self, name: &str, features: &Tensor<S>, mix: &ComplexSpectrogram) -> Result<(Tensor<S>, Tensor<S>)> {
        let (t, f) = (mix.frames, mix.bins());
        if features.rank() != 3 || features.dim(1) != t {
            return Err(DssError::Shape(format!("head features {:?} do not match {t} frames", features.shape())));
        }
        let mask = self
            .head_path(&format!("{name}.mask"), features)?
            .prelu(self.p(&format!("{name}.mask.final.a")))?
            .reshape(&[t, f])?;
        let cplx = self.head_path(&format!("{name}.cplx"), features)?;
        if cplx.shape() != [2, t, f] {
            return Err(DssError::Shape(format!("complex path gives {:?}, expected [2, {t}, {f}]", cplx.shape())));
        }
        let yr = Tensor::from_f64(&mix.real, &[t, f])?;
        let yi = Tensor::from_f64(&mix.imag, &[t, f])?;
        let re = mask.mul(&yr)?.add(&cplx.narrow(0, 0, 1)?.reshape(&[t, f])?)?;
        let im = mask.mul(&yi)?.add(&cplx.narrow(0, 1, 1)?.reshape(&[t, f])?)?;
        Ok((re, im))
    }

    /// Undoes the power-law compression on tensors.
    pub fn decompress_planes(&self, re: &Tensor<S>, im: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let e = self.cfg.compress_exp;
        let gain = re.mul(re)?.add(&im.mul(im)?)?.add_scalar(DECOMPRESS_EPS).powf((1.0 / e - 1.0) / 2.0);
        Ok((re.mul(&gain)?, im.mul(&gain)?))
    }

    /// Compressed spectrogram of `wave` with this model's STFT.
    pub fn analyze(&self, wave: &[f64]) -> Result<ComplexSpectrogram> {
        Ok(compress(&self.stft.stft(wave)?, self.cfg.compress_exp))
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    fn finish_head(&self, re: Tensor<S>, im: Tensor<S>, len: usize) -> Result<HeadOutput<S>> {
        let (dr, di) = self.decompress_planes(&re, &im)?;
        let wave = self.stft.istft_tensor(&dr, &di, len)?;
        Ok(HeadOutput { re, im, wave })
    }

    /// Full separation of a mixture waveform. Both outputs match the input
    /// length.
    pub fn forward(&self, mixture: &[f64]) -> Result<ForwardOutput<S>> {
        if mixture.len() < self.cfg.fft {
            return Err(DssError::InvalidArgument(format!(
                "mixture of {} samples is shorter than one {}-sample frame",
                mixture.len(),
                self.cfg.fft
            )));
        }
        let scale = input_scale(mixture);
        let scaled: Vec<f64> = mixture.iter().map(|v| v * scale).collect();
        let mix = self.analyze(&scaled)?;
        let mut h = self.encode(&Self::input_planes(&mix)?)?;
        let (near_tap, far_tap) = (self.cfg.near_tap(), self.cfg.far_tap());
        let mut near_feat = (near_tap == 0).then(|| h.clone());
        for b in 1..=self.cfg.active_blocks() {
            h = self.ts_block(b, &h)?;
            if b == near_tap {
                near_feat = Some(h.clone());
            }
        }
        debug_assert_eq!(far_tap, self.cfg.active_blocks());
        let near_feat = near_feat.expect("near tap lies within the block stack");
        let (nr, ni) = self.decode_head("near", &near_feat, &mix)?;
        drop(near_feat);
        let (fr, fi) = self.decode_head("far", &h, &mix)?;
        let near = self.finish_head(nr, ni, mixture.len())?;
        let far = self.finish_head(fr, fi, mixture.len())?;
        let out = ForwardOutput { near, far, scale };
        if !(out.near.wave.all_finite() && out.far.wave.all_finite()) {
            return Err(DssError::Numerical("non-finite separator output".into()));
        }
        Ok(out)
    }

    /// Near and far waveforms in the input's amplitude domain.
    pub fn separate(&self, mixture: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.forward(mixture)?;
        Ok((out.near_wave(), out.far_wave()))
    }

    /// Sets both heads to pass the mixture through unchanged on the near
    /// output (mask 1) and to silence on the far output (mask 0), with zero
    /// complex residual.
    pub fn make_identity(&mut self) -> Result<()> {
        for (head, m) in [("near", 1.0), ("far", 0.0)] {
            for path in ["mask.out", "mask.nyq", "cplx.out", "cplx.nyq"] {
                let w = format!("{head}.{path}.w");
                let b = format!("{head}.{path}.b");
                let nw = self.p(&w).numel();
                let nb = self.p(&b).numel();
                let bias = if path.starts_with("mask") { m } else { 0.0 };
                self.set_param(&w, vec![S::zero(); nw])?;
                self.set_param(&b, vec![S::cast(bias); nb])?;
            }
        }
        Ok(())
    }
}

/// Forward multiply-accumulates for `frames` STFT frames, counting
/// convolutions, dense layers, depthwise convolutions and attention
/// products. Mirrors the instrumented counter exactly.
pub fn forward_macs(cfg: &ModelConfig, frames: usize) -> u64 {
    let c = cfg.channels as u64;
    let t = frames as u64;
    let f = cfg.bins() as u64;
    let fr = cfg.reduced_bins() as u64;
    let dil = cfg.densenet_dilations.len() as u64;
    let dense = |w: u64| -> u64 {
        let blocks: u64 = (1..=dil).map(|i| t * w * c * c * i * 6).sum();
        blocks + t * w * c * (dil + 1) * c
    };
    let mut macs = t * f * c * 3 + dense(f) + t * fr * c * c * 3;

    let att = cfg.attention();
    let m = t * fr;
    let ffn = 2 * m * c * c * cfg.ffn_mult as u64;
    let mhsa = crate::attention::mhsa_macs(&att, fr as usize, frames) + crate::attention::mhsa_macs(&att, frames, fr as usize);
    let per_block = if cfg.variant == Variant::Roformer {
        2 * ffn + mhsa
    } else {
        let conv = m * c * 4 * c + m * 2 * c * cfg.depthwise_kernel as u64 + m * 2 * c * c;
        2 * (2 * ffn + conv) + mhsa
    };
    macs += cfg.active_blocks() as u64 * per_block;

    let path = |k: u64| dense(fr) + t * fr * 2 * c * c * 3 + t * 2 * fr * k * c + t * k * c;
    macs + 2 * (path(1) + path(2))
}


/// Central-difference spot check of `loss` against backpropagation on
/// `count` randomly drawn weights. Returns the worst relative error, with
/// differences below `1e-10` in absolute terms treated as agreement.
pub fn spot_check_gradients<F>(model: &DssModel<f64>, count: usize, seed: u64, loss: F) -> Result<f64>
where
    F: Fn(&DssModel<f64>) -> Result<Tensor<f64>>,
{
    use rand::{Rng, SeedableRng};
    const STEP: f64 = 1e-6;
    let mut m = model.clone();
    m.set_trainable(true);
    loss(&m)?.backward()?;
    let grads: Vec<Vec<f64>> = m
        .tensors()
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let mut probe = model.clone();
    probe.set_trainable(false);
    let total = model.num_params();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let mut flat = rng.gen_range(0..total);
        let mut which = 0;
        while flat >= probe.tensors()[which].numel() {
            flat -= probe.tensors()[which].numel();
            which += 1;
        }
        let base = probe.tensors()[which].to_vec();
        let mut eval = |delta: f64| -> Result<f64> {
            let mut v = base.clone();
            v[flat] += delta;
            probe.set_values(which, v)?;
            Ok(loss(&probe)?.item())
        };
        let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
        probe.set_values(which, base)?;
        let analytic = grads[which][flat];
        let diff = (analytic - numeric).abs();
        if diff > 1e-10 {
            worst = worst.max(diff / analytic.abs().max(numeric.abs()));
        }
    }
    Ok(worst)
}

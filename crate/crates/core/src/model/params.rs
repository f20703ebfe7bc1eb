//! Parameter layout implied by a [`ModelConfig`] and its deterministic
//! initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Relative-position tables start small so early attention is nearly
/// content-only.
const REL_TABLE_INIT: f64 = 0.02;
const PRELU_INIT: f64 = 0.25;

#[derive(Default)]
struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn push(&mut self, name: String, shape: &[usize], init: Init) {
        self.specs.push(ParamSpec { name, shape: shape.to_vec(), init });
    }

    fn conv(&mut self, p: &str, cout: usize, cin: usize, kh: usize, kw: usize) {
        let bound = 1.0 / ((cin * kh * kw) as f64).sqrt();
        self.push(format!("{p}.w"), &[cout, cin, kh, kw], Init::Uniform(bound));
        self.push(format!("{p}.b"), &[cout], Init::Zeros);
    }

    fn linear(&mut self, p: &str, din: usize, dout: usize) {
        self.push(format!("{p}.w"), &[din, dout], Init::Uniform(1.0 / (din as f64).sqrt()));
        self.push(format!("{p}.b"), &[dout], Init::Zeros);
    }

    fn ln(&mut self, p: &str, n: usize) {
        self.push(format!("{p}.g"), &[n], Init::Ones);
        self.push(format!("{p}.b"), &[n], Init::Zeros);
    }

    fn prelu(&mut self, p: &str, n: usize) {
        self.push(format!("{p}.a"), &[n, 1, 1], Init::Const(PRELU_INIT));
    }

    /// Conv, channel layer norm and PReLU.
    fn conv_block(&mut self, p: &str, cout: usize, cin: usize, kh: usize, kw: usize) {
        self.conv(p, cout, cin, kh, kw);
        self.ln(&format!("{p}.ln"), cout);
        self.prelu(&format!("{p}.act"), cout);
    }

    fn densenet(&mut self, p: &str, cfg: &ModelConfig) {
        let c = cfg.channels;
        for i in 0..cfg.densenet_dilations.len() {
            self.conv_block(&format!("{p}.l{i}"), c, c * (i + 1), 2, 3);
        }
        self.conv(&format!("{p}.out"), c, c * (cfg.densenet_dilations.len() + 1), 1, 1);
    }

    fn ffn(&mut self, p: &str, cfg: &ModelConfig) {
        let (c, h) = (cfg.channels, cfg.channels * cfg.ffn_mult);
        self.ln(&format!("{p}.ln"), c);
        self.linear(&format!("{p}.l1"), c, h);
        self.linear(&format!("{p}.l2"), h, c);
    }

    fn attention(&mut self, p: &str, cfg: &ModelConfig) {
        let c = cfg.channels;
        self.ln(&format!("{p}.ln"), c);
        for m in ["wq", "wk", "wv", "wo"] {
            self.push(format!("{p}.{m}"), &[c, c], Init::Uniform(1.0 / (c as f64).sqrt()));
        }
        self.push(format!("{p}.bo"), &[c], Init::Zeros);
        let att = cfg.attention();
        if att.uses_rel_table() {
            self.push(format!("{p}.rel"), &[att.rel_table_len(), att.head_dim()], Init::Uniform(REL_TABLE_INIT));
        }
    }

    fn conformer(&mut self, p: &str, cfg: &ModelConfig) {
        let c = cfg.channels;
        self.ffn(&format!("{p}.ffn1"), cfg);
        self.attention(&format!("{p}.attn"), cfg);
        self.ln(&format!("{p}.conv.ln"), c);
        self.linear(&format!("{p}.conv.pw1"), c, 4 * c);
        let k = cfg.depthwise_kernel;
        self.push(format!("{p}.conv.dw.w"), &[2 * c, k], Init::Uniform(1.0 / (k as f64).sqrt()));
        self.push(format!("{p}.conv.dw.b"), &[2 * c], Init::Zeros);
        self.ln(&format!("{p}.conv.ln2"), 2 * c);
        self.linear(&format!("{p}.conv.pw2"), 2 * c, c);
        self.ffn(&format!("{p}.ffn2"), cfg);
        self.ln(&format!("{p}.post"), c);
    }

    fn transformer(&mut self, p: &str, cfg: &ModelConfig) {
        self.attention(&format!("{p}.attn"), cfg);
        self.ffn(&format!("{p}.ffn"), cfg);
    }

    fn head_path(&mut self, p: &str, cfg: &ModelConfig, k: usize) {
        let c = cfg.channels;
        self.densenet(&format!("{p}.dense"), cfg);
        self.conv(&format!("{p}.up"), 2 * c, c, 1, 3);
        self.ln(&format!("{p}.ln"), c);
        self.prelu(&format!("{p}.act"), c);
        self.conv(&format!("{p}.out"), k, c, 1, 1);
        self.conv(&format!("{p}.nyq"), k, c, 1, 1);
    }

    fn head(&mut self, p: &str, cfg: &ModelConfig) {
        self.head_path(&format!("{p}.mask"), cfg, 1);
        self.prelu(&format!("{p}.mask.final"), 1);
        self.head_path(&format!("{p}.cplx"), cfg, 2);
    }
}

/// Every weight tensor of the network in canonical order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut b = Builder::default();
    let c = cfg.channels;
    b.conv_block("enc.in", c, 3, 1, 1);
    b.densenet("enc.dense", cfg);
    b.conv_block("enc.down", c, c, 1, 3);
    for i in 1..=cfg.active_blocks() {
        for stage in ["time", "freq"] {
            let p = format!("blk{i}.{stage}");
            if cfg.variant == super::Variant::Roformer {
                b.transformer(&p, cfg);
            } else {
                b.conformer(&p, cfg);
            }
        }
    }
    b.head("near", cfg);
    b.head("far", cfg);
    b.specs
}

pub fn count_params(cfg: &ModelConfig) -> usize {
    param_specs(cfg).iter().map(ParamSpec::numel).sum()
}

/// Initial values for `specs`. Tensor `i` draws from its own ChaCha stream,
/// so values depend only on `(seed, i)`.
pub fn init_values(specs: &[ParamSpec], seed: u64) -> Vec<Vec<f64>> {
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let n = s.numel();
            match s.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Const(v) => vec![v; n],
                Init::Uniform(bound) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(i as u64);
                    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn names_unique() {
        for v in Variant::ALL {
            let specs = param_specs(&ModelConfig::full(v));
            let mut names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
            names.sort();
            let n = names.len();
            names.dedup();
            assert_eq!(n, names.len(), "{v:?}");
        }
    }

    #[test]
    fn variants_share_everything_but_attention_internals() {
        let base = param_specs(&ModelConfig::full(Variant::BaselineQuadratic));
        let prop = param_specs(&ModelConfig::full(Variant::ProposedLinear));
        let without_rel: Vec<_> = base.iter().filter(|s| !s.name.ends_with(".rel")).cloned().collect();
        assert_eq!(without_rel, prop);
        assert_eq!(base.len() - prop.len(), 8);
        let enc_dec = |v: Vec<ParamSpec>| -> Vec<ParamSpec> { v.into_iter().filter(|s| !s.name.starts_with("blk")).collect() };
        assert_eq!(enc_dec(base), enc_dec(param_specs(&ModelConfig::full(Variant::Roformer))));
    }

    #[test]
    fn full_scale_counts() {
        let p = count_params(&ModelConfig::full(Variant::ProposedLinear));
        let b = count_params(&ModelConfig::full(Variant::BaselineQuadratic));
        let e = count_params(&ModelConfig::full(Variant::EncDecOnly));
        assert!((1_000_000..=1_700_000).contains(&p), "{p}");
        assert!(p < b && e < p, "{e} {p} {b}");
        assert_eq!(b - p, 8 * 129 * 12);
    }

    #[test]
    fn init_deterministic_and_bounded() {
        let specs = param_specs(&ModelConfig::tiny(Variant::ProposedLinear));
        let a = init_values(&specs, 3);
        assert_eq!(a, init_values(&specs, 3));
        assert_ne!(a, init_values(&specs, 4));
        for (s, v) in specs.iter().zip(&a) {
            if let Init::Uniform(bd) = s.init {
                assert!(v.iter().all(|x| x.abs() <= bd), "{}", s.name);
            }
        }
    }
}

//! Relation-aware self-attention cores and the multi-head wrapper.
//!
//! All cores take per-head tensors shaped `[B, N, d_head]` where `B` folds
//! the outer batch and the heads together.

use serde::{Deserialize, Serialize};

use crate::error::{DssError, Result};
use crate::tensor::{mac_counter, Backward, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// softmax((QKᵀ + Q⊙R)/√d)·V with a learned relative table R.
    QuadraticRsa,
    /// σ_q(rope(Q))·(σ_k(rope(K))ᵀ·V)/√d.
    LinearRsa,
    /// softmax(rope(Q)·rope(K)ᵀ/√d)·V.
    RopeSoftmaxQuadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    pub kind: AttentionKind,
    /// Relative offsets are clipped to `±max_rel_distance`.
    pub max_rel_distance: usize,
    pub rope_base: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            dim: 48,
            heads: 4,
            kind: AttentionKind::LinearRsa,
            max_rel_distance: 64,
            rope_base: 10_000.0,
        }
    }
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn rel_table_len(&self) -> usize {
        2 * self.max_rel_distance + 1
    }

    pub fn uses_rel_table(&self) -> bool {
        self.kind == AttentionKind::QuadraticRsa
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(DssError::Config(format!(
                "attention dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(DssError::Config(format!("head dim {} must be even", self.head_dim())));
        }
        if !(self.rope_base > 1.0) {
            return Err(DssError::Config(format!("rope_base must exceed 1, got {}", self.rope_base)));
        }
        Ok(())
    }
}

/// Projection weights of one multi-head attention layer. Projections act on
/// the right: `q = x·wq`.
#[derive(Debug, Clone)]
pub struct MhsaWeights<S: Scalar> {
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
    pub bo: Tensor<S>,
    /// `[2·max_rel + 1, d_head]`, shared across heads.
    pub rel_table: Option<Tensor<S>>,
}

fn rel_index(n: usize, m: usize, clip: usize) -> usize {
    let off = m as isize - n as isize;
    (off.clamp(-(clip as isize), clip as isize) + clip as isize) as usize
}

/// `out[b,n,m] = Σ_d q[b,n,d]·table[clip(m−n), d]` without gathering the
/// `[N, M, d]` relative tensor.
pub fn rel_logits<S: Scalar>(q: &Tensor<S>, table: &Tensor<S>, clip: usize) -> Result<Tensor<S>> {
    if q.rank() != 3 || table.rank() != 2 || table.dim(0) != 2 * clip + 1 || table.dim(1) != q.dim(2) {
        return Err(DssError::Shape(format!(
            "rel_logits expects q [B,N,d] and table [{}, d], got {:?} and {:?}",
            2 * clip + 1,
            q.shape(),
            table.shape()
        )));
    }
    let (b, n, d) = (q.dim(0), q.dim(1), q.dim(2));
    let qd = q.data();
    let td = table.data();
    let mut out = vec![S::zero(); b * n * n];
    for bi in 0..b {
        for i in 0..n {
            let qrow = &qd[(bi * n + i) * d..][..d];
            let orow = &mut out[(bi * n + i) * n..][..n];
            for (j, o) in orow.iter_mut().enumerate() {
                let trow = &td[rel_index(i, j, clip) * d..][..d];
                *o = qrow.iter().zip(trow).map(|(a, c)| *a * *c).sum();
            }
        }
    }
    mac_counter::add((b * n * n * d) as u64);
    Ok(Tensor::from_op(out, vec![b, n, n], vec![q.clone(), table.clone()], Box::new(RelLogitsBackward { clip })))
}

struct RelLogitsBackward {
    clip: usize,
}

impl<S: Scalar> Backward<S> for RelLogitsBackward {
    fn backward(&self, parents: &[Tensor<S>], _out: &[S], grad: &[S]) -> Vec<Option<Vec<S>>> {
        let (q, table) = (&parents[0], &parents[1]);
        let (b, n, d) = (q.dim(0), q.dim(1), q.dim(2));
        let qd = q.data();
        let td = table.data();
        let mut gq = vec![S::zero(); qd.len()];
        let mut gt = vec![S::zero(); td.len()];
        for bi in 0..b {
            for i in 0..n {
                let row = (bi * n + i) * d;
                for j in 0..n {
                    let g = grad[(bi * n + i) * n + j];
                    let r = rel_index(i, j, self.clip) * d;
                    for k in 0..d {
                        gq[row + k] += g * td[r + k];
                        gt[r + k] += g * qd[row + k];
                    }
                }
            }
        }
        mac_counter::add((2 * b * n * n * d) as u64);
        vec![Some(gq), Some(gt)]
    }
}

fn rope_tables(positions: &[usize], d: usize, base: f64) -> (Vec<f64>, Vec<f64>) {
    let half = d / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &m in positions {
        for i in 0..half {
            let theta = base.powf(-2.0 * i as f64 / d as f64);
            let (s, c) = (m as f64 * theta).sin_cos();
            cos.push(c);
            sin.push(s);
        }
    }
    (cos, sin)
}

fn rotate<S: Scalar>(x: &[S], n: usize, d: usize, cos: &[f64], sin: &[f64], sign: f64) -> Vec<S> {
    let half = d / 2;
    let mut out = vec![S::zero(); x.len()];
    for (row, (xr, or)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let p = row % n;
        for i in 0..half {
            let c = S::cast(cos[p * half + i]);
            let s = S::cast(sign * sin[p * half + i]);
            let (a, b) = (xr[2 * i], xr[2 * i + 1]);
            or[2 * i] = a * c - b * s;
            or[2 * i + 1] = a * s + b * c;
        }
    }
    out
}

/// Rotates feature pairs `(2i, 2i+1)` of `x [..., N, d]` by `positions[n]·θ_i`
/// with `θ_i = base^(−2i/d)`.
pub fn rope_apply<S: Scalar>(x: &Tensor<S>, positions: &[usize], base: f64) -> Result<Tensor<S>> {
    if x.rank() < 2 {
        return Err(DssError::Shape(format!("rope expects [..., N, d], got {:?}", x.shape())));
    }
    let d = x.dim(x.rank() - 1);
    let n = x.dim(x.rank() - 2);
    if d % 2 != 0 {
        return Err(DssError::InvalidArgument(format!("rope needs an even feature dim, got {d}")));
    }
    if positions.len() != n {
        return Err(DssError::Shape(format!("{} positions for sequence length {n}", positions.len())));
    }
    let (cos, sin) = rope_tables(positions, d, base);
    let out = rotate(x.data(), n, d, &cos, &sin, 1.0);
    Ok(Tensor::from_op(out, x.shape().to_vec(), vec![x.clone()], Box::new(RopeBackward { cos, sin, n, d })))
}

struct RopeBackward {
    cos: Vec<f64>,
    sin: Vec<f64>,
    n: usize,
    d: usize,
}

impl<S: Scalar> Backward<S> for RopeBackward {
    fn backward(&self, _parents: &[Tensor<S>], _out: &[S], grad: &[S]) -> Vec<Option<Vec<S>>> {
        vec![Some(rotate(grad, self.n, self.d, &self.cos, &self.sin, -1.0))]
    }
}

fn positions(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn check_qkv<S: Scalar>(q: &Tensor<S>, k: &Tensor<S>, v: &Tensor<S>) -> Result<()> {
    if q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(DssError::Shape(format!(
            "attention expects equal [B,N,d] q/k/v, got {:?} {:?} {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    Ok(())
}

/// Row-stochastic attention matrix softmax((QKᵀ + Q⊙R)/√d), `[B, N, N]`.
/// `rel` is the relative table and its clip distance; `None` means R ≡ 0.
pub fn quadratic_rsa_weights<S: Scalar>(q: &Tensor<S>, k: &Tensor<S>, rel: Option<(&Tensor<S>, usize)>) -> Result<Tensor<S>> {
    if q.rank() != 3 || q.shape() != k.shape() {
        return Err(DssError::Shape(format!("q/k shape mismatch: {:?} vs {:?}", q.shape(), k.shape())));
    }
    let mut logits = q.matmul_t(k, false, true)?;
    if let Some((table, clip)) = rel {
        logits = logits.add(&rel_logits(q, table, clip)?)?;
    }
    logits.scale(1.0 / (q.dim(2) as f64).sqrt()).softmax(2)
}

pub fn quadratic_rsa<S: Scalar>(q: &Tensor<S>, k: &Tensor<S>, v: &Tensor<S>, rel: Option<(&Tensor<S>, usize)>) -> Result<Tensor<S>> {
    check_qkv(q, k, v)?;
    quadratic_rsa_weights(q, k, rel)?.matmul(v)
}

/// Kernel feature maps of the linear core: softmax over features for the
/// rotated queries, softmax over the sequence for the rotated keys.
pub fn linear_feature_maps<S: Scalar>(q: &Tensor<S>, k: &Tensor<S>, rope_base: f64) -> Result<(Tensor<S>, Tensor<S>)> {
    let pos = positions(q.dim(1));
    let sq = rope_apply(q, &pos, rope_base)?.softmax(2)?;
    let sk = rope_apply(k, &pos, rope_base)?.softmax(1)?;
    Ok((sq, sk))
}

/// Linear-complexity core. The key–value contraction `[B, d, d]` is formed
/// first so cost is O(N·d²).
pub fn linear_rsa<S: Scalar>(q: &Tensor<S>, k: &Tensor<S>, v: &Tensor<S>, rope_base: f64) -> Result<Tensor<S>> {
    check_qkv(q, k, v)?;
    let (sq, sk) = linear_feature_maps(q, k, rope_base)?;
    let kv = sk.matmul_t(v, true, false)?;
    Ok(sq.matmul(&kv)?.scale(1.0 / (q.dim(2) as f64).sqrt()))
}

pub fn rope_softmax_quadratic<S: Scalar>(q: &Tensor<S>, k: &Tensor<S>, v: &Tensor<S>, rope_base: f64) -> Result<Tensor<S>> {
    check_qkv(q, k, v)?;
    let pos = positions(q.dim(1));
    let qr = rope_apply(q, &pos, rope_base)?;
    let kr = rope_apply(k, &pos, rope_base)?;
    quadratic_rsa(&qr, &kr, v, None)
}

/// Dispatches to the core selected by `cfg.kind`.
pub fn attention_core<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    cfg: &AttentionConfig,
    rel_table: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    match cfg.kind {
        AttentionKind::QuadraticRsa => quadratic_rsa(q, k, v, rel_table.map(|t| (t, cfg.max_rel_distance))),
        AttentionKind::LinearRsa => linear_rsa(q, k, v, cfg.rope_base),
        AttentionKind::RopeSoftmaxQuadratic => rope_softmax_quadratic(q, k, v, cfg.rope_base),
    }
}

/// Upper bound on attention-matrix elements materialized at once when no
/// gradient is recorded.
const SCORE_BUDGET: usize = 1 << 22;

fn split_heads<S: Scalar>(x: &Tensor<S>, heads: usize) -> Result<Tensor<S>> {
    let (b, n, c) = (x.dim(0), x.dim(1), x.dim(2));
    x.reshape(&[b, n, heads, c / heads])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b * heads, n, c / heads])
}

fn merge_heads<S: Scalar>(x: &Tensor<S>, heads: usize) -> Result<Tensor<S>> {
    let (bh, n, dh) = (x.dim(0), x.dim(1), x.dim(2));
    x.reshape(&[bh / heads, heads, n, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[bh / heads, n, heads * dh])
}

/// Multi-head self-attention on `x [B, N, C]`.
pub fn mhsa<S: Scalar>(x: &Tensor<S>, cfg: &AttentionConfig, w: &MhsaWeights<S>) -> Result<Tensor<S>> {
    cfg.validate()?;
    let c = cfg.dim;
    if x.rank() != 3 || x.dim(2) != c {
        return Err(DssError::Shape(format!("mhsa expects [B, N, {c}], got {:?}", x.shape())));
    }
    for (name, t) in [("wq", &w.wq), ("wk", &w.wk), ("wv", &w.wv), ("wo", &w.wo)] {
        if t.shape() != [c, c] {
            return Err(DssError::Shape(format!("{name} must be [{c}, {c}], got {:?}", t.shape())));
        }
    }
    if w.bo.shape() != [c] {
        return Err(DssError::Shape(format!("bo must be [{c}], got {:?}", w.bo.shape())));
    }
    let table = if cfg.uses_rel_table() {
        let t = w.rel_table.as_ref().ok_or_else(|| DssError::Shape("quadratic RSA needs a relative table".into()))?;
        if t.shape() != [cfg.rel_table_len(), cfg.head_dim()] {
            return Err(DssError::Shape(format!(
                "rel_table must be [{}, {}], got {:?}",
                cfg.rel_table_len(),
                cfg.head_dim(),
                t.shape()
            )));
        }
        Some(t)
    } else {
        None
    };

    let q = split_heads(&x.matmul(&w.wq)?, cfg.heads)?;
    let k = split_heads(&x.matmul(&w.wk)?, cfg.heads)?;
    let v = split_heads(&x.matmul(&w.wv)?, cfg.heads)?;
    let (bh, n) = (q.dim(0), q.dim(1));

    let quadratic = cfg.kind != AttentionKind::LinearRsa;
    let no_grad = !(q.requires_grad() || k.requires_grad() || v.requires_grad() || table.is_some_and(|t| t.requires_grad()));
    let chunk = (SCORE_BUDGET / (n * n).max(1)).max(1);
    let heads_out = if quadratic && no_grad && chunk < bh {
        let mut parts = Vec::new();
        let mut start = 0;
        while start < bh {
            let len = chunk.min(bh - start);
            parts.push(attention_core(
                &q.narrow(0, start, len)?,
                &k.narrow(0, start, len)?,
                &v.narrow(0, start, len)?,
                cfg,
                table,
            )?);
            start += len;
        }
        Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)?
    } else {
        attention_core(&q, &k, &v, cfg, table)?
    };
    merge_heads(&heads_out, cfg.heads)?.matmul(&w.wo)?.add(&w.bo)
}

/// Forward MACs of one attention core over `batch` sequences of length `n`
/// and head dim `d`.
pub fn core_macs(kind: AttentionKind, batch: usize, n: usize, d: usize) -> u64 {
    let (b, n, d) = (batch as u64, n as u64, d as u64);
    match kind {
        AttentionKind::QuadraticRsa => 3 * b * n * n * d,
        AttentionKind::RopeSoftmaxQuadratic => 2 * b * n * n * d,
        AttentionKind::LinearRsa => 2 * b * n * d * d,
    }
}

/// Forward MACs of [`mhsa`] on `x [batch, n, cfg.dim]`.
pub fn mhsa_macs(cfg: &AttentionConfig, batch: usize, n: usize) -> u64 {
    let c = cfg.dim as u64;
    4 * batch as u64 * n as u64 * c * c + core_macs(cfg.kind, batch * cfg.heads, n, cfg.head_dim())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, probe, rand_tensor, rand_vec};

    fn t(shape: &[usize], seed: u64) -> Tensor<f64> {
        rand_tensor(shape, seed)
    }

    fn brute_attention(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let s: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|x| q[i * d + x] * k[j * d + x]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..n {
                for x in 0..d {
                    out[i * d + x] += e[j] / z * v[j * d + x];
                }
            }
        }
        out
    }

    #[test]
    fn single_position_returns_value_row() {
        let (q, k, v) = (t(&[2, 1, 6], 1), t(&[2, 1, 6], 2), t(&[2, 1, 6], 3));
        let out = quadratic_rsa(&q, &k, &v, None).unwrap();
        for (a, b) in out.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_table_matches_brute_force() {
        let (n, d) = (9, 6);
        let (q, k, v) = (t(&[2, n, d], 4), t(&[2, n, d], 5), t(&[2, n, d], 6));
        let zero = Tensor::zeros(&[2 * 3 + 1, d]);
        let a = quadratic_rsa(&q, &k, &v, None).unwrap();
        let b = quadratic_rsa(&q, &k, &v, Some((&zero, 3))).unwrap();
        for bi in 0..2 {
            let sl = |x: &Tensor<f64>| x.data()[bi * n * d..(bi + 1) * n * d].to_vec();
            let oracle = brute_attention(&sl(&q), &sl(&k), &sl(&v), n, d);
            for (i, o) in oracle.iter().enumerate() {
                assert!((a.data()[bi * n * d + i] - o).abs() < 1e-10);
                assert!((b.data()[bi * n * d + i] - o).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn weights_rows_sum_to_one() {
        let (q, k) = (t(&[3, 7, 4], 7), t(&[3, 7, 4], 8));
        let table = t(&[5, 4], 9);
        let w = quadratic_rsa_weights(&q, &k, Some((&table, 2))).unwrap();
        for row in w.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rel_logits_matches_gathered_contraction() {
        let (b, n, d, clip) = (2, 6, 4, 2);
        let q = t(&[b, n, d], 10);
        let table = t(&[2 * clip + 1, d], 11);
        let out = rel_logits(&q, &table, clip).unwrap();
        for bi in 0..b {
            for i in 0..n {
                for j in 0..n {
                    let off = (j as i64 - i as i64).clamp(-(clip as i64), clip as i64) + clip as i64;
                    let expect: f64 = (0..d).map(|x| q.data()[(bi * n + i) * d + x] * table.data()[off as usize * d + x]).sum();
                    assert!((out.data()[(bi * n + i) * n + j] - expect).abs() < 1e-14);
                }
            }
        }
        assert!(rel_logits(&q, &t(&[4, d], 1), clip).is_err());
    }

    #[test]
    fn permutation_equivariance() {
        let (n, d) = (8, 4);
        let (q, k, v) = (t(&[1, n, d], 12), t(&[1, n, d], 13), t(&[1, n, d], 14));
        let perm = [3, 0, 7, 1, 6, 2, 5, 4];
        let permute = |x: &Tensor<f64>| {
            let mut out = vec![0.0; n * d];
            for (i, &p) in perm.iter().enumerate() {
                out[i * d..(i + 1) * d].copy_from_slice(&x.data()[p * d..(p + 1) * d]);
            }
            Tensor::new(out, &[1, n, d]).unwrap()
        };
        let base = quadratic_rsa(&q, &k, &v, None).unwrap();
        let perm_out = quadratic_rsa(&permute(&q), &permute(&k), &permute(&v), None).unwrap();
        let expected = permute(&base);
        for (a, b) in perm_out.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_identity_norm_and_relative() {
        let x = t(&[1, 1, 8], 15);
        let r0 = rope_apply(&x, &[0], 10_000.0).unwrap();
        assert_eq!(r0.data(), x.data());
        let r = rope_apply(&x, &[37], 10_000.0).unwrap();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!((norm(r.data()) - norm(x.data())).abs() < 1e-12);

        let q = t(&[1, 1, 12], 16);
        let k = t(&[1, 1, 12], 17);
        let dot = |m: usize, n: usize| {
            let a = rope_apply(&q, &[m], 10_000.0).unwrap();
            let b = rope_apply(&k, &[n], 10_000.0).unwrap();
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>()
        };
        assert!((dot(5, 3) - dot(12, 10)).abs() < 1e-10);
        assert!(rope_apply(&t(&[1, 2, 5], 1), &[0, 1], 10_000.0).is_err());
    }

    #[test]
    fn linear_association_orders_agree() {
        let (q, k, v) = (t(&[2, 11, 6], 18), t(&[2, 11, 6], 19), t(&[2, 11, 6], 20));
        let fast = linear_rsa(&q, &k, &v, 10_000.0).unwrap();
        let (sq, sk) = linear_feature_maps(&q, &k, 10_000.0).unwrap();
        let slow = sq.matmul_t(&sk, false, true).unwrap().matmul(&v).unwrap().scale(1.0 / 6f64.sqrt());
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_single_position_oracle() {
        let d = 4;
        let (q, k, v) = (t(&[1, 1, d], 21), t(&[1, 1, d], 22), t(&[1, 1, d], 23));
        let out = linear_rsa(&q, &k, &v, 10_000.0).unwrap();
        // σ_k over a single position is 1 everywhere, σ_q sums to 1, so each
        // output entry is Σ_j σq_j · v / √d = v / √d.
        for (a, b) in out.data().iter().zip(v.data()) {
            assert!((a - b / (d as f64).sqrt()).abs() < 1e-14);
        }
    }

    #[test]
    fn adversarial_inputs_stay_finite() {
        let big = |seed| Tensor::new(rand_vec(2 * 16 * 6, seed).iter().map(|v| v.signum() * 50.0).collect(), &[2, 16, 6]).unwrap();
        let (q, k, v) = (big(24), big(25), big(26));
        assert!(linear_rsa(&q, &k, &v, 10_000.0).unwrap().all_finite());
        assert!(quadratic_rsa(&q, &k, &v, None).unwrap().all_finite());
        assert!(rope_softmax_quadratic(&q, &k, &v, 10_000.0).unwrap().all_finite());
    }

    fn weights(c: usize, cfg: &AttentionConfig, seed: u64) -> MhsaWeights<f64> {
        MhsaWeights {
            wq: t(&[c, c], seed),
            wk: t(&[c, c], seed + 1),
            wv: t(&[c, c], seed + 2),
            wo: t(&[c, c], seed + 3),
            bo: t(&[c], seed + 4),
            rel_table: cfg.uses_rel_table().then(|| t(&[cfg.rel_table_len(), cfg.head_dim()], seed + 5)),
        }
    }

    #[test]
    fn zero_out_projection_gives_zero() {
        let cfg = AttentionConfig { dim: 8, heads: 2, ..Default::default() };
        let mut w = weights(8, &cfg, 30);
        w.wo = Tensor::zeros(&[8, 8]);
        w.bo = Tensor::zeros(&[8]);
        let out = mhsa(&t(&[2, 5, 8], 31), &cfg, &w).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_head_equals_direct_core() {
        for kind in [AttentionKind::QuadraticRsa, AttentionKind::LinearRsa, AttentionKind::RopeSoftmaxQuadratic] {
            let cfg = AttentionConfig { dim: 6, heads: 1, kind, max_rel_distance: 2, rope_base: 10_000.0 };
            let w = weights(6, &cfg, 40);
            let x = t(&[2, 5, 6], 41);
            let out = mhsa(&x, &cfg, &w).unwrap();
            let core = attention_core(
                &x.matmul(&w.wq).unwrap(),
                &x.matmul(&w.wk).unwrap(),
                &x.matmul(&w.wv).unwrap(),
                &cfg,
                w.rel_table.as_ref(),
            )
            .unwrap();
            let direct = core.matmul(&w.wo).unwrap().add(&w.bo).unwrap();
            for (a, b) in out.data().iter().zip(direct.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weight_shape_errors() {
        let cfg = AttentionConfig { dim: 8, heads: 2, kind: AttentionKind::QuadraticRsa, ..Default::default() };
        let mut w = weights(8, &cfg, 50);
        w.wq = Tensor::zeros(&[8, 4]);
        assert!(mhsa(&t(&[1, 3, 8], 51), &cfg, &w).is_err());
        let mut w = weights(8, &cfg, 50);
        w.rel_table = None;
        assert!(mhsa(&t(&[1, 3, 8], 51), &cfg, &w).is_err());
        assert!(AttentionConfig { dim: 6, heads: 2, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn chunked_inference_matches_single_pass() {
        let cfg = AttentionConfig { dim: 8, heads: 2, kind: AttentionKind::QuadraticRsa, max_rel_distance: 4, rope_base: 10_000.0 };
        let w = weights(8, &cfg, 60);
        let x = t(&[5, 1100, 8], 61);
        let chunked = mhsa(&x, &cfg, &w).unwrap();
        let q = split_heads(&x.matmul(&w.wq).unwrap(), 2).unwrap();
        let k = split_heads(&x.matmul(&w.wk).unwrap(), 2).unwrap();
        let v = split_heads(&x.matmul(&w.wv).unwrap(), 2).unwrap();
        let full = attention_core(&q, &k, &v, &cfg, w.rel_table.as_ref()).unwrap();
        let full = merge_heads(&full, 2).unwrap().matmul(&w.wo).unwrap().add(&w.bo).unwrap();
        assert_eq!(chunked.data(), full.data());
    }

    #[test]
    fn instrumented_macs_match_analytic() {
        for kind in [AttentionKind::QuadraticRsa, AttentionKind::LinearRsa, AttentionKind::RopeSoftmaxQuadratic] {
            let cfg = AttentionConfig { dim: 8, heads: 2, kind, max_rel_distance: 3, rope_base: 10_000.0 };
            let w = weights(8, &cfg, 70);
            let x = t(&[3, 10, 8], 71);
            mac_counter::reset();
            mhsa(&x, &cfg, &w).unwrap();
            assert_eq!(mac_counter::read(), mhsa_macs(&cfg, 3, 10), "{kind:?}");
        }
    }

    #[test]
    fn analytic_scaling_identities() {
        for n in [64, 375, 1000] {
            assert_eq!(core_macs(AttentionKind::QuadraticRsa, 4, 2 * n, 12), 4 * core_macs(AttentionKind::QuadraticRsa, 4, n, 12));
            assert_eq!(core_macs(AttentionKind::LinearRsa, 4, 2 * n, 12), 2 * core_macs(AttentionKind::LinearRsa, 4, n, 12));
        }
    }

    #[test]
    fn core_gradients() {
        let (q, k, v) = (t(&[2, 5, 4], 80), t(&[2, 5, 4], 81), t(&[2, 5, 4], 82));
        let table = t(&[5, 4], 83);
        check_gradients(&[q.clone(), k.clone(), v.clone(), table], 1e-6, |p| {
            probe(&quadratic_rsa(&p[0], &p[1], &p[2], Some((&p[3], 2))).unwrap())
        });
        check_gradients(&[q.clone(), k.clone(), v.clone()], 1e-6, |p| probe(&linear_rsa(&p[0], &p[1], &p[2], 10_000.0).unwrap()));
        check_gradients(&[q, k, v], 1e-6, |p| probe(&rope_softmax_quadratic(&p[0], &p[1], &p[2], 10_000.0).unwrap()));
        let x = t(&[2, 3, 6], 84);
        check_gradients(&[x], 1e-6, |p| probe(&rope_apply(&p[0], &[2, 9, 4], 100.0).unwrap()));
    }

    #[test]
    fn mhsa_gradients() {
        for kind in [AttentionKind::QuadraticRsa, AttentionKind::LinearRsa] {
            let cfg = AttentionConfig { dim: 8, heads: 2, kind, max_rel_distance: 2, rope_base: 10_000.0 };
            let w = weights(8, &cfg, 90);
            let mut inputs = vec![t(&[2, 4, 8], 91), w.wq, w.wk, w.wv, w.wo, w.bo];
            inputs.extend(w.rel_table);
            check_gradients(&inputs, 1e-4, |p| {
                let w = MhsaWeights {
                    wq: p[1].clone(),
                    wk: p[2].clone(),
                    wv: p[3].clone(),
                    wo: p[4].clone(),
                    bo: p[5].clone(),
                    rel_table: p.get(6).cloned(),
                };
                probe(&mhsa(&p[0], &cfg, &w).unwrap())
            });
        }
    }
}

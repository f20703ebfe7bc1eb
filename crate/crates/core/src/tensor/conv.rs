use super::linalg::{gemm, mac_counter, MatRef};
use super::{Backward, Scalar, Tensor};
use crate::error::{shape_err, DssError, Result};

/// Zero padding on the four borders of a `[C, H, W]` map.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Padding2d {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding2d {
    pub fn symmetric(h: usize, w: usize) -> Self {
        Padding2d {
            top: h,
            bottom: h,
            left: w,
            right: w,
        }
    }

    /// Causal along H (all padding before the first row), symmetric along W.
    pub fn causal_h(h: usize, w: usize) -> Self {
        Padding2d {
            top: h,
            bottom: 0,
            left: w,
            right: w,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: Padding2d,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: (1, 1),
            dilation: (1, 1),
            padding: Padding2d::default(),
            groups: 1,
        }
    }
}

#[derive(Debug, Clone)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: Conv2dSpec,
}

/// Scratch budget (elements) for one im2col block.
const COL_BUDGET: usize = 1 << 16;

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.spec.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.spec.groups
    }

    fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.spec.stride == (1, 1)
            && self.spec.padding == Padding2d::default()
            && self.spec.groups == 1
    }

    fn rows_per_block(&self) -> usize {
        (COL_BUDGET / (self.k() * self.wo).max(1)).clamp(1, self.ho)
    }

    /// Input row read by output row `r` through tap row `a`, if inside.
    #[inline]
    fn src_row(&self, r: usize, a: usize) -> Option<usize> {
        let y = (r * self.spec.stride.0 + a * self.spec.dilation.0) as isize - self.spec.padding.top as isize;
        (y >= 0 && (y as usize) < self.h).then_some(y as usize)
    }

    /// Output columns `[lo, hi)` whose tap column `b` lands inside the
    /// input, and the input column read by `lo`.
    #[inline]
    fn col_range(&self, b: usize) -> (usize, usize, usize) {
        let sw = self.spec.stride.1;
        let shift = b * self.spec.dilation.1;
        let left = self.spec.padding.left;
        let lo = if left > shift { (left - shift).div_ceil(sw) } else { 0 };
        let last = self.w - 1 + left;
        if last < shift {
            return (0, 0, 0);
        }
        let hi = ((last - shift) / sw + 1).min(self.wo);
        if lo >= hi {
            return (0, 0, 0);
        }
        (lo, hi, lo * sw + shift - left)
    }

    fn im2col<S: Scalar>(&self, x: &[S], group: usize, r0: usize, r1: usize, col: &mut Vec<S>) {
        let p = (r1 - r0) * self.wo;
        col.clear();
        col.resize(self.k() * p, S::zero());
        let cin_g = self.cin_g();
        let sw = self.spec.stride.1;
        for ci in 0..cin_g {
            let plane = &x[(group * cin_g + ci) * self.h * self.w..][..self.h * self.w];
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = ((ci * self.kh + a) * self.kw + b) * p;
                    let (lo, hi, x0) = self.col_range(b);
                    if lo == hi {
                        continue;
                    }
                    for r in r0..r1 {
                        let Some(y) = self.src_row(r, a) else { continue };
                        let dst = &mut col[row + (r - r0) * self.wo + lo..row + (r - r0) * self.wo + hi];
                        let src = &plane[y * self.w + x0..];
                        if sw == 1 {
                            dst.copy_from_slice(&src[..hi - lo]);
                        } else {
                            for (j, d) in dst.iter_mut().enumerate() {
                                *d = src[j * sw];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<S: Scalar>(&self, col: &[S], group: usize, r0: usize, r1: usize, gx: &mut [S]) {
        let p = (r1 - r0) * self.wo;
        let cin_g = self.cin_g();
        let sw = self.spec.stride.1;
        for ci in 0..cin_g {
            let base = (group * cin_g + ci) * self.h * self.w;
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = ((ci * self.kh + a) * self.kw + b) * p;
                    let (lo, hi, x0) = self.col_range(b);
                    if lo == hi {
                        continue;
                    }
                    for r in r0..r1 {
                        let Some(y) = self.src_row(r, a) else { continue };
                        let src = &col[row + (r - r0) * self.wo + lo..row + (r - r0) * self.wo + hi];
                        let dst = &mut gx[base + y * self.w + x0..];
                        for (j, v) in src.iter().enumerate() {
                            dst[j * sw] += *v;
                        }
                    }
                }
            }
        }
    }

    fn out_view(&self, group: usize, r0: usize) -> MatRef {
        MatRef {
            offset: group * self.cout_g() * self.ho * self.wo + r0 * self.wo,
            rs: self.ho * self.wo,
            cs: 1,
        }
    }

    fn weight_view(&self, group: usize) -> MatRef {
        MatRef::row_major(group * self.cout_g() * self.k(), self.k())
    }
}

struct Conv2dBackward {
    geom: Geometry,
    has_bias: bool,
}

impl<S: Scalar> Backward<S> for Conv2dBackward {
    fn backward(&self, parents: &[Tensor<S>], _out: &[S], grad: &[S]) -> Vec<Option<Vec<S>>> {
        let g = &self.geom;
        let (x, w) = (&parents[0], &parents[1]);
        let plane = g.ho * g.wo;
        let mut gx = x.requires_grad().then(|| vec![S::zero(); x.numel()]);
        let mut gw = w.requires_grad().then(|| vec![S::zero(); w.numel()]);
        let (cout_g, k) = (g.cout_g(), g.k());

        if g.pointwise() {
            // col is the input itself: [cin, h·w]
            if let Some(gw) = gw.as_mut() {
                gemm(g.cout, plane, g.cin, grad, MatRef::row_major(0, plane), x.data(), MatRef::row_major(0, plane).t(), S::zero(), gw, MatRef::row_major(0, g.cin));
            }
            if let Some(gx) = gx.as_mut() {
                gemm(g.cin, g.cout, plane, w.data(), MatRef::row_major(0, g.cin).t(), grad, MatRef::row_major(0, plane), S::zero(), gx, MatRef::row_major(0, plane));
            }
        } else {
            let rows = g.rows_per_block();
            let mut col = Vec::new();
            let mut gcol = Vec::new();
            for grp in 0..g.spec.groups {
                let mut r0 = 0;
                while r0 < g.ho {
                    let r1 = (r0 + rows).min(g.ho);
                    let p = (r1 - r0) * g.wo;
                    let gview = g.out_view(grp, r0);
                    if let Some(gw) = gw.as_mut() {
                        g.im2col(x.data(), grp, r0, r1, &mut col);
                        let beta = if r0 == 0 { S::zero() } else { S::one() };
                        gemm(cout_g, p, k, grad, gview, &col, MatRef::row_major(0, p).t(), beta, gw, g.weight_view(grp));
                    }
                    if let Some(gx) = gx.as_mut() {
                        gcol.clear();
                        gcol.resize(k * p, S::zero());
                        gemm(k, cout_g, p, w.data(), g.weight_view(grp).t(), grad, gview, S::zero(), &mut gcol, MatRef::row_major(0, p));
                        g.col2im_add(&gcol, grp, r0, r1, gx);
                    }
                    r0 = r1;
                }
            }
        }
        let mut grads = vec![gx, gw];
        if self.has_bias {
            let gb = parents[2].requires_grad().then(|| {
                (0..g.cout)
                    .map(|co| grad[co * plane..(co + 1) * plane].iter().copied().sum())
                    .collect()
            });
            grads.push(gb);
        }
        grads
    }
}

struct DepthwiseBackward {
    kernel: usize,
    has_bias: bool,
}

impl<S: Scalar> Backward<S> for DepthwiseBackward {
    fn backward(&self, parents: &[Tensor<S>], _out: &[S], grad: &[S]) -> Vec<Option<Vec<S>>> {
        let (x, w) = (&parents[0], &parents[1]);
        let shape = x.shape();
        let c = shape[shape.len() - 1];
        let n = shape[shape.len() - 2];
        let seqs = x.numel() / (n * c).max(1);
        let k = self.kernel;
        let pad = (k - 1) / 2;
        let (xd, wd) = (x.data(), w.data());
        let mut gx = x.requires_grad().then(|| vec![S::zero(); x.numel()]);
        let mut gw = w.requires_grad().then(|| vec![S::zero(); w.numel()]);
        for s in 0..seqs {
            for t in 0..n {
                let go = &grad[(s * n + t) * c..][..c];
                for j in 0..k {
                    let src = t as isize + j as isize - pad as isize;
                    if src < 0 || src as usize >= n {
                        continue;
                    }
                    let xi = (s * n + src as usize) * c;
                    if let Some(gx) = gx.as_mut() {
                        let gxs = &mut gx[xi..xi + c];
                        for ch in 0..c {
                            gxs[ch] += go[ch] * wd[ch * k + j];
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        let xs = &xd[xi..xi + c];
                        for ch in 0..c {
                            gw[ch * k + j] += go[ch] * xs[ch];
                        }
                    }
                }
            }
        }
        let mut grads = vec![gx, gw];
        if self.has_bias {
            grads.push(parents[2].requires_grad().then(|| {
                let mut gb = vec![S::zero(); c];
                for row in grad.chunks_exact(c) {
                    gb.iter_mut().zip(row).for_each(|(b, &g)| *b += g);
                }
                gb
            }));
        }
        grads
    }
}

impl<S: Scalar> Tensor<S> {
    /// 2-D cross-correlation of a `[Cin, H, W]` map with `[Cout, Cin/groups,
    /// kh, kw]` weights, plus optional `[Cout]` bias.
    pub fn conv2d(&self, weight: &Tensor<S>, bias: Option<&Tensor<S>>, spec: Conv2dSpec) -> Result<Tensor<S>> {
        if self.rank() != 3 || weight.rank() != 4 {
            return shape_err(format!(
                "conv2d expects [C, H, W] input and [Cout, Cin/g, kh, kw] weight, got {:?} and {:?}",
                self.shape(),
                weight.shape()
            ));
        }
        let (cin, h, w) = (self.dim(0), self.dim(1), self.dim(2));
        let (cout, cin_g, kh, kw) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
        let groups = spec.groups;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin_g * groups != cin {
            return shape_err(format!(
                "conv2d channels {cin}→{cout} incompatible with groups {groups} and weight {:?}",
                weight.shape()
            ));
        }
        let (sh, sw) = spec.stride;
        let (dh, dw) = spec.dilation;
        if sh == 0 || sw == 0 || dh == 0 || dw == 0 {
            return Err(DssError::InvalidArgument("conv2d stride and dilation must be positive".into()));
        }
        let ph = h + spec.padding.top + spec.padding.bottom;
        let pw = w + spec.padding.left + spec.padding.right;
        let (span_h, span_w) = (dh * (kh - 1) + 1, dw * (kw - 1) + 1);
        if kh == 0 || kw == 0 || span_h > ph || span_w > pw {
            return Err(DssError::InvalidArgument(format!(
                "conv2d kernel {kh}×{kw} with dilation {dh}×{dw} does not fit padded input {ph}×{pw}"
            )));
        }
        if let Some(b) = bias {
            if b.numel() != cout {
                return shape_err(format!("conv2d bias of length {} for {cout} outputs", b.numel()));
            }
        }
        let geom = Geometry {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho: (ph - span_h) / sh + 1,
            wo: (pw - span_w) / sw + 1,
            spec,
        };
        let plane = geom.ho * geom.wo;
        let mut out = vec![S::zero(); cout * plane];
        if geom.pointwise() {
            gemm(cout, cin, plane, weight.data(), MatRef::row_major(0, cin), self.data(), MatRef::row_major(0, plane), S::zero(), &mut out, MatRef::row_major(0, plane));
        } else {
            let rows = geom.rows_per_block();
            let mut col = Vec::new();
            for grp in 0..groups {
                let mut r0 = 0;
                while r0 < geom.ho {
                    let r1 = (r0 + rows).min(geom.ho);
                    geom.im2col(self.data(), grp, r0, r1, &mut col);
                    let p = (r1 - r0) * geom.wo;
                    gemm(
                        geom.cout_g(),
                        geom.k(),
                        p,
                        weight.data(),
                        geom.weight_view(grp),
                        &col,
                        MatRef::row_major(0, p),
                        S::zero(),
                        &mut out,
                        geom.out_view(grp, r0),
                    );
                    r0 = r1;
                }
            }
        }
        if let Some(b) = bias {
            for (co, &bv) in b.data().iter().enumerate() {
                out[co * plane..(co + 1) * plane].iter_mut().for_each(|v| *v += bv);
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            out,
            vec![cout, geom.ho, geom.wo],
            parents,
            Box::new(Conv2dBackward {
                geom,
                has_bias: bias.is_some(),
            }),
        ))
    }

    /// Depthwise 1-D convolution along the second-to-last axis of a
    /// channels-last `[..., N, C]` tensor with `[C, k]` weights (odd `k`,
    /// zero "same" padding).
    pub fn depthwise_conv1d(&self, weight: &Tensor<S>, bias: Option<&Tensor<S>>) -> Result<Tensor<S>> {
        if self.rank() < 2 || weight.rank() != 2 {
            return shape_err(format!(
                "depthwise_conv1d expects [..., N, C] and [C, k], got {:?} and {:?}",
                self.shape(),
                weight.shape()
            ));
        }
        let shape = self.shape();
        let c = shape[shape.len() - 1];
        let n = shape[shape.len() - 2];
        let (wc, k) = (weight.dim(0), weight.dim(1));
        if wc != c || k % 2 == 0 {
            return shape_err(format!("depthwise weight {:?} for {c} channels (kernel must be odd)", weight.shape()));
        }
        if let Some(b) = bias {
            if b.numel() != c {
                return shape_err("depthwise bias length mismatch");
            }
        }
        let seqs = self.numel() / (n * c).max(1);
        let pad = (k - 1) / 2;
        let (xd, wd) = (self.data(), weight.data());
        let mut out = vec![S::zero(); self.numel()];
        for s in 0..seqs {
            for t in 0..n {
                let o = &mut out[(s * n + t) * c..][..c];
                if let Some(b) = bias {
                    o.copy_from_slice(b.data());
                }
                for j in 0..k {
                    let src = t as isize + j as isize - pad as isize;
                    if src < 0 || src as usize >= n {
                        continue;
                    }
                    let xs = &xd[(s * n + src as usize) * c..][..c];
                    for ch in 0..c {
                        o[ch] += wd[ch * k + j] * xs[ch];
                    }
                }
            }
        }
        mac_counter::add((seqs * n * c * k) as u64);
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            out,
            shape.to_vec(),
            parents,
            Box::new(DepthwiseBackward {
                kernel: k,
                has_bias: bias.is_some(),
            }),
        ))
    }
}

use super::{axis_split, check_axis, numel, strides_of, Backward, Scalar, Tensor};
use crate::error::{shape_err, Result};

struct ReshapeBackward;

impl<S: Scalar> Backward<S> for ReshapeBackward {
    fn backward(&self, _parents: &[Tensor<S>], _out: &[S], grad: &[S]) -> Vec<Option<Vec<S>>> {
        vec![Some(grad.to_vec())]
    }
}

/// Gathers `src` into the permuted layout; `axes[i]` is the source axis of
/// output axis `i`.
fn permute_data<S: Scalar>(src: &[S], shape: &[usize], axes: &[usize]) -> (Vec<S>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides = strides_of(shape);
    let rank = shape.len();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 {
        return (src.to_vec(), out_shape);
    }
    if n == 0 {
        return (out, out_shape);
    }
    let gather: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    // innermost output axis handled as a strided run
    let last = rank - 1;
    let run = out_shape[last];
    let run_stride = gather[last];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let rows = n / run.max(1);
    for _ in 0..rows {
        for j in 0..run {
            out.push(src[off + j * run_stride]);
        }
        for d in (0..last).rev() {
            idx[d] += 1;
            off += gather[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= gather[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

struct PermuteBackward {
    out_shape: Vec<usize>,
    inverse: Vec<usize>,
}

impl<S: Scalar> Backward<S> for PermuteBackward {
    fn backward(&self, _parents: &[Tensor<S>], _out: &[S], grad: &[S]) -> Vec<Option<Vec<S>>> {
        vec![Some(permute_data(grad, &self.out_shape, &self.inverse).0)]
    }
}

struct ConcatBackward {
    axis: usize,
    sizes: Vec<usize>,
    out_shape: Vec<usize>,
}

impl<S: Scalar> Backward<S> for ConcatBackward {
    fn backward(&self, parents: &[Tensor<S>], _out: &[S], grad: &[S]) -> Vec<Option<Vec<S>>> {
        let (outer, total, inner) = axis_split(&self.out_shape, self.axis);
        let mut start = 0;
        let mut grads = Vec::with_capacity(parents.len());
        for (p, &len) in parents.iter().zip(&self.sizes) {
            if p.requires_grad() {
                let mut g = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let from = (o * total + start) * inner;
                    g.extend_from_slice(&grad[from..from + len * inner]);
                }
                grads.push(Some(g));
            } else {
                grads.push(None);
            }
            start += len;
        }
        grads
    }
}

struct SliceBackward {
    axis: usize,
    start: usize,
    in_shape: Vec<usize>,
    len: usize,
}

impl<S: Scalar> Backward<S> for SliceBackward {
    fn backward(&self, _parents: &[Tensor<S>], _out: &[S], grad: &[S]) -> Vec<Option<Vec<S>>> {
        let (outer, total, inner) = axis_split(&self.in_shape, self.axis);
        let mut g = vec![S::zero(); numel(&self.in_shape)];
        for o in 0..outer {
            let to = (o * total + self.start) * inner;
            let from = o * self.len * inner;
            g[to..to + self.len * inner].copy_from_slice(&grad[from..from + self.len * inner]);
        }
        vec![Some(g)]
    }
}

struct ShuffleBackward {
    factor: usize,
    in_shape: Vec<usize>,
}

/// `[C·r, T, F] → [C, T, F·r]` with `out[c, t, f·r + i] = in[i·C + c, t, f]`.
fn shuffle_freq<S: Scalar>(src: &[S], in_shape: &[usize], r: usize) -> Vec<S> {
    let (cr, t, f) = (in_shape[0], in_shape[1], in_shape[2]);
    let c = cr / r;
    let mut out = vec![S::zero(); src.len()];
    for i in 0..r {
        for ch in 0..c {
            for ti in 0..t {
                let src_row = ((i * c + ch) * t + ti) * f;
                let dst_row = (ch * t + ti) * f * r;
                for fi in 0..f {
                    out[dst_row + fi * r + i] = src[src_row + fi];
                }
            }
        }
    }
    out
}

fn unshuffle_freq<S: Scalar>(src: &[S], in_shape: &[usize], r: usize) -> Vec<S> {
    let (cr, t, f) = (in_shape[0], in_shape[1], in_shape[2]);
    let c = cr / r;
    let mut out = vec![S::zero(); src.len()];
    for i in 0..r {
        for ch in 0..c {
            for ti in 0..t {
                let src_row = ((i * c + ch) * t + ti) * f;
                let dst_row = (ch * t + ti) * f * r;
                for fi in 0..f {
                    out[src_row + fi] = src[dst_row + fi * r + i];
                }
            }
        }
    }
    out
}

impl<S: Scalar> Backward<S> for ShuffleBackward {
    fn backward(&self, _parents: &[Tensor<S>], _out: &[S], grad: &[S]) -> Vec<Option<Vec<S>>> {
        vec![Some(unshuffle_freq(grad, &self.in_shape, self.factor))]
    }
}

struct UnshuffleBackward {
    factor: usize,
    out_shape: Vec<usize>,
}

impl<S: Scalar> Backward<S> for UnshuffleBackward {
    fn backward(&self, _parents: &[Tensor<S>], _out: &[S], grad: &[S]) -> Vec<Option<Vec<S>>> {
        vec![Some(shuffle_freq(grad, &self.out_shape, self.factor))]
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        if numel(shape) != self.numel() {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape()));
        }
        Ok(self.with_shared_data(shape.to_vec(), vec![self.clone()], Box::new(ReshapeBackward)))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<S>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return shape_err(format!("invalid permutation {axes:?} for rank {rank}"));
        }
        let (data, out_shape) = permute_data(self.data(), self.shape(), axes);
        Ok(Tensor::from_op(
            data,
            out_shape.clone(),
            vec![self.clone()],
            Box::new(PermuteBackward {
                out_shape,
                inverse: inverse_axes(axes),
            }),
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<S>> {
        let mut axes: Vec<usize> = (0..self.rank()).collect();
        if a >= axes.len() || b >= axes.len() {
            return shape_err(format!("transpose axes {a},{b} out of range for {:?}", self.shape()));
        }
        axes.swap(a, b);
        self.permute(&axes)
    }

    pub fn concat(tensors: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>> {
        let first = tensors.first().ok_or_else(|| crate::error::DssError::Shape("concat of nothing".into()))?;
        check_axis(first.shape(), axis)?;
        for t in tensors {
            let ok = t.rank() == first.rank()
                && t.shape().iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return shape_err(format!("concat shapes {:?} and {:?} differ off axis {axis}", first.shape(), t.shape()));
            }
        }
        let sizes: Vec<usize> = tensors.iter().map(|t| t.dim(axis)).collect();
        let total: usize = sizes.iter().sum();
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for (t, &len) in tensors.iter().zip(&sizes) {
                let from = o * len * inner;
                out.extend_from_slice(&t.data()[from..from + len * inner]);
            }
        }
        Ok(Tensor::from_op(
            out,
            out_shape.clone(),
            tensors.iter().map(|t| (*t).clone()).collect(),
            Box::new(ConcatBackward { axis, sizes, out_shape }),
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<S>> {
        check_axis(self.shape(), axis)?;
        if start + len > self.dim(axis) {
            return shape_err(format!(
                "slice {start}..{} out of range for axis {axis} of {:?}",
                start + len,
                self.shape()
            ));
        }
        let (outer, total, inner) = axis_split(self.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * total + start) * inner;
            out.extend_from_slice(&self.data()[from..from + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(SliceBackward {
                axis,
                start,
                in_shape: self.shape().to_vec(),
                len,
            }),
        ))
    }

    /// Splits `axis` into consecutive pieces of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor<S>>> {
        check_axis(self.shape(), axis)?;
        if sizes.iter().sum::<usize>() != self.dim(axis) {
            return shape_err(format!("split sizes {sizes:?} do not cover axis {axis} of {:?}", self.shape()));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let piece = self.narrow(axis, start, len);
                start += len;
                piece
            })
            .collect()
    }

    /// Zero padding along one axis.
    pub fn pad(&self, axis: usize, before: usize, after: usize) -> Result<Tensor<S>> {
        check_axis(self.shape(), axis)?;
        if before == 0 && after == 0 {
            return Ok(self.clone());
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let total = len + before + after;
        let mut out = vec![S::zero(); outer * total * inner];
        for o in 0..outer {
            let to = (o * total + before) * inner;
            let from = o * len * inner;
            out[to..to + len * inner].copy_from_slice(&self.data()[from..from + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(
            out,
            shape.clone(),
            vec![self.clone()],
            Box::new(PadBackward {
                axis,
                before,
                in_shape: self.shape().to_vec(),
            }),
        ))
    }

    /// Sub-pixel rearrangement along the last axis of a `[C·r, T, F]` map,
    /// giving `[C, T, F·r]`.
    pub fn pixel_shuffle_freq(&self, factor: usize) -> Result<Tensor<S>> {
        if self.rank() != 3 || factor == 0 || self.dim(0) % factor != 0 {
            return shape_err(format!("pixel shuffle ×{factor} needs [C·r, T, F], got {:?}", self.shape()));
        }
        let s = self.shape();
        let out = shuffle_freq(self.data(), s, factor);
        Ok(Tensor::from_op(
            out,
            vec![s[0] / factor, s[1], s[2] * factor],
            vec![self.clone()],
            Box::new(ShuffleBackward {
                factor,
                in_shape: s.to_vec(),
            }),
        ))
    }

    /// Inverse of [`Tensor::pixel_shuffle_freq`].
    pub fn pixel_unshuffle_freq(&self, factor: usize) -> Result<Tensor<S>> {
        if self.rank() != 3 || factor == 0 || self.dim(2) % factor != 0 {
            return shape_err(format!("pixel unshuffle ×{factor} needs [C, T, F·r], got {:?}", self.shape()));
        }
        let s = self.shape();
        let out_shape = vec![s[0] * factor, s[1], s[2] / factor];
        let out = unshuffle_freq(self.data(), &out_shape, factor);
        Ok(Tensor::from_op(
            out,
            out_shape.clone(),
            vec![self.clone()],
            Box::new(UnshuffleBackward { factor, out_shape }),
        ))
    }
}

/// Padding is the adjoint of slicing: its gradient is the interior slice.
struct PadBackward {
    axis: usize,
    before: usize,
    in_shape: Vec<usize>,
}

impl<S: Scalar> Backward<S> for PadBackward {
    fn backward(&self, _parents: &[Tensor<S>], out: &[S], grad: &[S]) -> Vec<Option<Vec<S>>> {
        let (outer, len, inner) = axis_split(&self.in_shape, self.axis);
        let total = out.len() / (outer * inner).max(1);
        let mut g = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * total + self.before) * inner;
            g.extend_from_slice(&grad[from..from + len * inner]);
        }
        vec![Some(g)]
    }
}

use super::{axis_split, check_axis, Backward, Scalar, Tensor};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
enum ReduceKind {
    Sum,
    Mean,
    Variance,
}

struct ReduceBackward {
    kind: ReduceKind,
    axis: usize,
}

impl<S: Scalar> Backward<S> for ReduceBackward {
    fn backward(&self, parents: &[Tensor<S>], _out: &[S], grad: &[S]) -> Vec<Option<Vec<S>>> {
        let x = &parents[0];
        let (outer, len, inner) = axis_split(x.shape(), self.axis);
        let xd = x.data();
        let mut gx = vec![S::zero(); x.numel()];
        let inv = S::one() / S::cast(len as f64);
        for o in 0..outer {
            for i in 0..inner {
                let g = grad[o * inner + i];
                let base = o * len * inner + i;
                match self.kind {
                    ReduceKind::Sum => (0..len).for_each(|l| gx[base + l * inner] = g),
                    ReduceKind::Mean => (0..len).for_each(|l| gx[base + l * inner] = g * inv),
                    ReduceKind::Variance => {
                        let mean = (0..len).map(|l| xd[base + l * inner]).sum::<S>() * inv;
                        for l in 0..len {
                            let k = base + l * inner;
                            gx[k] = g * S::cast(2.0) * (xd[k] - mean) * inv;
                        }
                    }
                }
            }
        }
        vec![Some(gx)]
    }
}

struct SumAllBackward {
    scale: f64,
}

impl<S: Scalar> Backward<S> for SumAllBackward {
    fn backward(&self, parents: &[Tensor<S>], _out: &[S], grad: &[S]) -> Vec<Option<Vec<S>>> {
        vec![Some(vec![grad[0] * S::cast(self.scale); parents[0].numel()])]
    }
}

struct SoftmaxBackward {
    axis: usize,
}

impl<S: Scalar> Backward<S> for SoftmaxBackward {
    fn backward(&self, parents: &[Tensor<S>], out: &[S], grad: &[S]) -> Vec<Option<Vec<S>>> {
        let (outer, len, inner) = axis_split(parents[0].shape(), self.axis);
        let mut gx = vec![S::zero(); out.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let dot: S = (0..len).map(|l| grad[base + l * inner] * out[base + l * inner]).sum();
                for l in 0..len {
                    let k = base + l * inner;
                    gx[k] = out[k] * (grad[k] - dot);
                }
            }
        }
        vec![Some(gx)]
    }
}

struct LayerNormBackward {
    axis: usize,
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

impl<S: Scalar> Backward<S> for LayerNormBackward {
    fn backward(&self, parents: &[Tensor<S>], _out: &[S], grad: &[S]) -> Vec<Option<Vec<S>>> {
        let x = &parents[0];
        let gamma = parents.get(1);
        let (outer, len, inner) = axis_split(x.shape(), self.axis);
        let gd: Option<Vec<f64>> = gamma.map(|g| g.data().iter().map(|v| v.as_f64()).collect());
        let mut gx = x.requires_grad().then(|| vec![S::zero(); x.numel()]);
        let mut ggamma = vec![0.0f64; len];
        let mut gbeta = vec![0.0f64; len];
        let mut dxhat = vec![0.0f64; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let slice = o * inner + i;
                let (mut m1, mut m2) = (0.0, 0.0);
                for l in 0..len {
                    let k = base + l * inner;
                    let g = grad[k].as_f64();
                    ggamma[l] += g * self.xhat[k];
                    gbeta[l] += g;
                    let d = g * gd.as_ref().map_or(1.0, |gm| gm[l]);
                    dxhat[l] = d;
                    m1 += d;
                    m2 += d * self.xhat[k];
                }
                if let Some(gx) = gx.as_mut() {
                    m1 /= len as f64;
                    m2 /= len as f64;
                    let r = self.rstd[slice];
                    for l in 0..len {
                        let k = base + l * inner;
                        gx[k] = S::cast(r * (dxhat[l] - m1 - self.xhat[k] * m2));
                    }
                }
            }
        }
        let mut grads = vec![gx];
        if parents.len() > 1 {
            grads.push(Some(ggamma.iter().map(|&v| S::cast(v)).collect()));
            grads.push(Some(gbeta.iter().map(|&v| S::cast(v)).collect()));
        }
        grads
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

impl<S: Scalar> Tensor<S> {
    fn reduce(&self, axis: usize, kind: ReduceKind) -> Result<Tensor<S>> {
        check_axis(self.shape(), axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        if len == 0 {
            return shape_err(format!("reduction over empty axis {axis} of {:?}", self.shape()));
        }
        let x = self.data();
        let inv = S::one() / S::cast(len as f64);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let sum: S = (0..len).map(|l| x[base + l * inner]).sum();
                out[o * inner + i] = match kind {
                    ReduceKind::Sum => sum,
                    ReduceKind::Mean => sum * inv,
                    ReduceKind::Variance => {
                        let mean = sum * inv;
                        (0..len)
                            .map(|l| {
                                let d = x[base + l * inner] - mean;
                                d * d
                            })
                            .sum::<S>()
                            * inv
                    }
                };
            }
        }
        Ok(Tensor::from_op(
            out,
            reduced_shape(self.shape(), axis),
            vec![self.clone()],
            Box::new(ReduceBackward { kind, axis }),
        ))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&self, axis: usize) -> Result<Tensor<S>> {
        self.reduce(axis, ReduceKind::Sum)
    }

    pub fn mean(&self, axis: usize) -> Result<Tensor<S>> {
        self.reduce(axis, ReduceKind::Mean)
    }

    /// Population variance over `axis`.
    pub fn variance(&self, axis: usize) -> Result<Tensor<S>> {
        self.reduce(axis, ReduceKind::Variance)
    }

    pub fn sum_all(&self) -> Tensor<S> {
        let s: S = self.data().iter().copied().sum();
        Tensor::from_op(vec![s], Vec::new(), vec![self.clone()], Box::new(SumAllBackward { scale: 1.0 }))
    }

    pub fn mean_all(&self) -> Tensor<S> {
        let n = self.numel().max(1) as f64;
        let s: S = self.data().iter().copied().sum();
        Tensor::from_op(
            vec![s / S::cast(n)],
            Vec::new(),
            vec![self.clone()],
            Box::new(SumAllBackward { scale: 1.0 / n }),
        )
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor<S>> {
        check_axis(self.shape(), axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        if len == 0 {
            return shape_err("softmax over empty axis");
        }
        let x = self.data();
        let mut out = vec![S::zero(); x.len()];
        // Row-wise sweeps over contiguous `inner` slices keep the strided case
        // cache friendly; per-element arithmetic matches the inner == 1 path.
        let mut max = vec![S::neg_infinity(); inner];
        let mut total = vec![S::zero(); inner];
        for o in 0..outer {
            let xs = &x[o * len * inner..(o + 1) * len * inner];
            let os = &mut out[o * len * inner..(o + 1) * len * inner];
            max.fill(S::neg_infinity());
            total.fill(S::zero());
            for row in xs.chunks_exact(inner) {
                for (m, &v) in max.iter_mut().zip(row) {
                    *m = m.max(v);
                }
            }
            for (orow, row) in os.chunks_exact_mut(inner).zip(xs.chunks_exact(inner)) {
                for i in 0..inner {
                    let e = (row[i] - max[i]).exp();
                    orow[i] = e;
                    total[i] += e;
                }
            }
            total.iter_mut().for_each(|t| *t = S::one() / *t);
            for orow in os.chunks_exact_mut(inner) {
                for (v, &inv) in orow.iter_mut().zip(&total) {
                    *v *= inv;
                }
            }
        }
        Ok(Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], Box::new(SoftmaxBackward { axis })))
    }

    /// Normalizes each slice along `axis` to zero mean and unit variance,
    /// then applies the optional per-position affine `gamma`, `beta`
    /// (both of length `shape[axis]`).
    pub fn layer_norm(&self, axis: usize, affine: Option<(&Tensor<S>, &Tensor<S>)>, eps: f64) -> Result<Tensor<S>> {
        check_axis(self.shape(), axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        if len == 0 {
            return shape_err("layer_norm over empty axis");
        }
        if let Some((g, b)) = affine {
            if g.numel() != len || b.numel() != len {
                return shape_err(format!(
                    "layer_norm affine of length {}/{} for axis of length {len}",
                    g.numel(),
                    b.numel()
                ));
            }
        }
        let x = self.data();
        let mut xhat = vec![0.0f64; x.len()];
        let mut rstd = vec![0.0f64; outer * inner];
        let mut out = vec![S::zero(); x.len()];
        let gd: Option<(Vec<f64>, Vec<f64>)> = affine.map(|(g, b)| {
            (
                g.data().iter().map(|v| v.as_f64()).collect(),
                b.data().iter().map(|v| v.as_f64()).collect(),
            )
        });
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mean = (0..len).map(|l| x[base + l * inner].as_f64()).sum::<f64>() / len as f64;
                let var = (0..len)
                    .map(|l| {
                        let d = x[base + l * inner].as_f64() - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / len as f64;
                let r = 1.0 / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for l in 0..len {
                    let k = base + l * inner;
                    let h = (x[k].as_f64() - mean) * r;
                    xhat[k] = h;
                    out[k] = S::cast(match &gd {
                        Some((g, b)) => h * g[l] + b[l],
                        None => h,
                    });
                }
            }
        }
        let mut parents = vec![self.clone()];
        if let Some((g, b)) = affine {
            parents.push(g.clone());
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            parents,
            Box::new(LayerNormBackward { axis, xhat, rstd }),
        ))
    }
}

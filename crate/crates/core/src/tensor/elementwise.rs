use super::{numel, strides_of, Backward, Scalar, Tensor};
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    /// `x` where positive, `slope·x` otherwise; the rhs is the slope.
    Prelu,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind {
    Sigmoid,
    Tanh,
    Swish,
    /// tanh approximation
    Gelu,
    /// `x^p`; for non-integer `p` the input must be positive
    Power(f64),
    Scale(f64),
    AddScalar(f64),
    Abs,
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

impl UnaryKind {
    fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Swish => x * sigmoid(x),
            UnaryKind::Gelu => {
                let u = S::cast(GELU_K) * (x + S::cast(GELU_C) * x * x * x);
                S::cast(0.5) * x * (S::one() + u.tanh())
            }
            UnaryKind::Power(p) => {
                if p == 2.0 {
                    x * x
                } else {
                    x.powf(S::cast(p))
                }
            }
            UnaryKind::Scale(c) => x * S::cast(c),
            UnaryKind::AddScalar(c) => x + S::cast(c),
            UnaryKind::Abs => x.abs(),
        }
    }

    fn derivative<S: Scalar>(self, x: S, y: S) -> S {
        match self {
            UnaryKind::Sigmoid => y * (S::one() - y),
            UnaryKind::Tanh => S::one() - y * y,
            UnaryKind::Swish => {
                let s = sigmoid(x);
                s + x * s * (S::one() - s)
            }
            UnaryKind::Gelu => {
                let k = S::cast(GELU_K);
                let c = S::cast(GELU_C);
                let u = k * (x + c * x * x * x);
                let t = u.tanh();
                let du = k * (S::one() + S::cast(3.0) * c * x * x);
                S::cast(0.5) * (S::one() + t) + S::cast(0.5) * x * (S::one() - t * t) * du
            }
            UnaryKind::Power(p) => {
                if p == 2.0 {
                    S::cast(2.0) * x
                } else {
                    S::cast(p) * x.powf(S::cast(p - 1.0))
                }
            }
            UnaryKind::Scale(c) => S::cast(c),
            UnaryKind::AddScalar(_) => S::one(),
            UnaryKind::Abs => {
                if x > S::zero() {
                    S::one()
                } else if x < S::zero() {
                    -S::one()
                } else {
                    S::zero()
                }
            }
        }
    }
}

struct UnaryBackward {
    kind: UnaryKind,
}

impl<S: Scalar> Backward<S> for UnaryBackward {
    fn backward(&self, parents: &[Tensor<S>], out: &[S], grad: &[S]) -> Vec<Option<Vec<S>>> {
        let x = parents[0].data();
        let g = x
            .iter()
            .zip(out)
            .zip(grad)
            .map(|((&x, &y), &g)| g * self.kind.derivative(x, y))
            .collect();
        vec![Some(g)]
    }
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return shape_err(format!("shapes {a:?} and {b:?} do not broadcast")),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (zero along broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// Visits every output index with the matching input offsets.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

#[derive(Clone, Copy)]
enum Layout {
    Same,
    /// rhs is a single element
    ScalarRhs,
    /// rhs matches the trailing axes of the output and lhs equals output
    SuffixRhs(usize),
    General,
}

struct BinaryBackward {
    kind: BinaryKind,
    layout: Layout,
    out_shape: Vec<usize>,
}

fn apply_binary<S: Scalar>(kind: BinaryKind, a: S, b: S) -> S {
    match kind {
        BinaryKind::Add => a + b,
        BinaryKind::Sub => a - b,
        BinaryKind::Mul => a * b,
        BinaryKind::Prelu => {
            if a > S::zero() {
                a
            } else {
                a * b
            }
        }
    }
}

/// Partial derivatives (∂/∂a, ∂/∂b).
fn partials<S: Scalar>(kind: BinaryKind, a: S, b: S) -> (S, S) {
    match kind {
        BinaryKind::Add => (S::one(), S::one()),
        BinaryKind::Sub => (S::one(), -S::one()),
        BinaryKind::Mul => (b, a),
        BinaryKind::Prelu => {
            if a > S::zero() {
                (S::one(), S::zero())
            } else {
                (b, a)
            }
        }
    }
}

impl<S: Scalar> Backward<S> for BinaryBackward {
    fn backward(&self, parents: &[Tensor<S>], _out: &[S], grad: &[S]) -> Vec<Option<Vec<S>>> {
        let (a, b) = (&parents[0], &parents[1]);
        let (ad, bd) = (a.data(), b.data());
        let mut ga = a.requires_grad().then(|| vec![S::zero(); a.numel()]);
        let mut gb = b.requires_grad().then(|| vec![S::zero(); b.numel()]);
        let mut visit = |o: usize, ia: usize, ib: usize| {
            let (pa, pb) = partials(self.kind, ad[ia], bd[ib]);
            if let Some(ga) = ga.as_mut() {
                ga[ia] += grad[o] * pa;
            }
            if let Some(gb) = gb.as_mut() {
                gb[ib] += grad[o] * pb;
            }
        };
        match self.layout {
            Layout::Same => (0..grad.len()).for_each(|i| visit(i, i, i)),
            Layout::ScalarRhs => (0..grad.len()).for_each(|i| visit(i, i, 0)),
            Layout::SuffixRhs(nb) => (0..grad.len()).for_each(|i| visit(i, i, i % nb)),
            Layout::General => {
                let sa = broadcast_strides(a.shape(), &self.out_shape);
                let sb = broadcast_strides(b.shape(), &self.out_shape);
                for_each_broadcast(&self.out_shape, &sa, &sb, visit);
            }
        }
        vec![ga, gb]
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn unary(&self, kind: UnaryKind) -> Tensor<S> {
        let out = self.data().iter().map(|&x| kind.apply(x)).collect();
        Tensor::from_op(out, self.shape().to_vec(), vec![self.clone()], Box::new(UnaryBackward { kind }))
    }

    pub fn binary(&self, other: &Tensor<S>, kind: BinaryKind) -> Result<Tensor<S>> {
        let out_shape = broadcast_shape(self.shape(), other.shape())?;
        let (ad, bd) = (self.data(), other.data());
        let layout = if self.shape() == other.shape() {
            Layout::Same
        } else if other.numel() == 1 && self.shape() == out_shape.as_slice() {
            Layout::ScalarRhs
        } else if self.shape() == out_shape.as_slice()
            && out_shape.ends_with(other.shape())
        {
            Layout::SuffixRhs(other.numel())
        } else {
            Layout::General
        };
        let n = numel(&out_shape);
        let out: Vec<S> = match layout {
            Layout::Same => ad.iter().zip(bd).map(|(&a, &b)| apply_binary(kind, a, b)).collect(),
            Layout::ScalarRhs => ad.iter().map(|&a| apply_binary(kind, a, bd[0])).collect(),
            Layout::SuffixRhs(nb) => ad
                .iter()
                .enumerate()
                .map(|(i, &a)| apply_binary(kind, a, bd[i % nb]))
                .collect(),
            Layout::General => {
                let mut out = vec![S::zero(); n];
                let sa = broadcast_strides(self.shape(), &out_shape);
                let sb = broadcast_strides(other.shape(), &out_shape);
                for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
                    out[o] = apply_binary(kind, ad[ia], bd[ib]);
                });
                out
            }
        };
        Ok(Tensor::from_op(
            out,
            out_shape.clone(),
            vec![self.clone(), other.clone()],
            Box::new(BinaryBackward {
                kind,
                layout,
                out_shape,
            }),
        ))
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn prelu(&self, slope: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary(slope, BinaryKind::Prelu)
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn tanh(&self) -> Tensor<S> {
        self.unary(UnaryKind::Tanh)
    }

    pub fn swish(&self) -> Tensor<S> {
        self.unary(UnaryKind::Swish)
    }

    pub fn gelu(&self) -> Tensor<S> {
        self.unary(UnaryKind::Gelu)
    }

    pub fn powf(&self, p: f64) -> Tensor<S> {
        self.unary(UnaryKind::Power(p))
    }

    pub fn scale(&self, c: f64) -> Tensor<S> {
        self.unary(UnaryKind::Scale(c))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<S> {
        self.unary(UnaryKind::AddScalar(c))
    }

    pub fn abs(&self) -> Tensor<S> {
        self.unary(UnaryKind::Abs)
    }
}

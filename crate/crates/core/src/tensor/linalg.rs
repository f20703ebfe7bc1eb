use super::{numel, Backward, Scalar, Tensor};
use crate::error::{shape_err, Result};

/// Running tally of multiply-accumulate operations executed by contraction
/// kernels (matrix products, convolutions, attention contractions) on the
/// current thread. Elementwise ops, normalizations and exponentials are not
/// counted.
pub mod mac_counter {
    use std::cell::Cell;

    thread_local! {
        static MACS: Cell<u64> = const { Cell::new(0) };
    }

    pub fn reset() {
        MACS.with(|m| m.set(0));
    }

    pub fn read() -> u64 {
        MACS.with(|m| m.get())
    }

    pub(crate) fn add(n: u64) {
        MACS.with(|m| m.set(m.get() + n));
    }
}

/// Matrix view: element (i, j) lives at `offset + i*rs + j*cs`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatRef {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatRef {
    pub fn row_major(offset: usize, cols: usize) -> Self {
        MatRef { offset, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        MatRef {
            offset: self.offset,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

fn max_index(v: MatRef, rows: usize, cols: usize) -> usize {
    if rows == 0 || cols == 0 {
        return v.offset;
    }
    v.offset + (rows - 1) * v.rs + (cols - 1) * v.cs
}

/// `c ← a·b + beta·c` for an (m×k)·(k×n) product on slices, with bounds
/// checked up front.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    av: MatRef,
    b: &[S],
    bv: MatRef,
    beta: S,
    c: &mut [S],
    cv: MatRef,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = cv.offset + i * cv.rs + j * cv.cs;
                c[idx] = if beta == S::zero() { S::zero() } else { c[idx] * beta };
            }
        }
        return;
    }
    assert!(max_index(av, m, k) < a.len(), "gemm: lhs view out of bounds");
    assert!(max_index(bv, k, n) < b.len(), "gemm: rhs view out of bounds");
    assert!(max_index(cv, m, n) < c.len(), "gemm: output view out of bounds");
    mac_counter::add((m * k * n) as u64);
    // SAFETY: all three views were bounds-checked above and `c` is a unique
    // borrow, so it cannot alias `a` or `b`.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            S::one(),
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

#[derive(Clone, Debug)]
struct MatmulLayout {
    m: usize,
    k: usize,
    n: usize,
    batch: usize,
    batch_a: usize,
    batch_b: usize,
    trans_a: bool,
    trans_b: bool,
}

impl MatmulLayout {
    fn a_view(&self, bi: usize) -> MatRef {
        let off = if self.batch_a == 1 { 0 } else { bi * self.m * self.k };
        if self.trans_a {
            MatRef::row_major(off, self.m).t()
        } else {
            MatRef::row_major(off, self.k)
        }
    }

    fn b_view(&self, bi: usize) -> MatRef {
        let off = if self.batch_b == 1 { 0 } else { bi * self.k * self.n };
        if self.trans_b {
            MatRef::row_major(off, self.k).t()
        } else {
            MatRef::row_major(off, self.n)
        }
    }

    fn c_view(&self, bi: usize) -> MatRef {
        MatRef::row_major(bi * self.m * self.n, self.n)
    }
}

struct MatmulBackward {
    layout: MatmulLayout,
}

impl<S: Scalar> Backward<S> for MatmulBackward {
    fn backward(&self, parents: &[Tensor<S>], _out: &[S], grad: &[S]) -> Vec<Option<Vec<S>>> {
        let l = &self.layout;
        let (a, b) = (&parents[0], &parents[1]);
        if l.batch_b == 1 && l.batch_a > 1 && !l.trans_a {
            let rows = l.batch_a * l.m;
            let gview = MatRef::row_major(0, l.n);
            let ga = a.requires_grad().then(|| {
                let mut ga = vec![S::zero(); a.numel()];
                gemm(rows, l.n, l.k, grad, gview, b.data(), l.b_view(0).t(), S::zero(), &mut ga, MatRef::row_major(0, l.k));
                ga
            });
            let gb = b.requires_grad().then(|| {
                let mut gb = vec![S::zero(); b.numel()];
                gemm(l.k, rows, l.n, a.data(), MatRef::row_major(0, l.k).t(), grad, gview, S::zero(), &mut gb, l.b_view(0));
                gb
            });
            return vec![ga, gb];
        }
        let ga = a.requires_grad().then(|| {
            let mut ga = vec![S::zero(); a.numel()];
            for bi in 0..l.batch {
                // d op(A) = G · op(B)^T, written in A's storage layout
                let beta = if l.batch_a == 1 && bi > 0 { S::one() } else { S::zero() };
                gemm(l.m, l.n, l.k, grad, l.c_view(bi), b.data(), l.b_view(bi).t(), beta, &mut ga, l.a_view(bi));
            }
            ga
        });
        let gb = b.requires_grad().then(|| {
            let mut gb = vec![S::zero(); b.numel()];
            for bi in 0..l.batch {
                let beta = if l.batch_b == 1 && bi > 0 { S::one() } else { S::zero() };
                gemm(l.k, l.m, l.n, a.data(), l.a_view(bi).t(), grad, l.c_view(bi), beta, &mut gb, l.b_view(bi));
            }
            gb
        });
        vec![ga, gb]
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.matmul_t(other, false, false)
    }

    /// Batched product `op(self) · op(other)` over the last two axes, where
    /// `op` optionally transposes. Leading axes must match, or one side must
    /// be a plain matrix that is shared across the batch.
    pub fn matmul_t(&self, other: &Tensor<S>, trans_a: bool, trans_b: bool) -> Result<Tensor<S>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err(format!("matmul needs rank ≥ 2, got {sa:?} and {sb:?}"));
        }
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if trans_a { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if trans_b { (cb, rb) } else { (rb, cb) };
        if k != kb {
            return shape_err(format!(
                "matmul inner dimensions disagree: {sa:?}{} · {sb:?}{}",
                if trans_a { "ᵀ" } else { "" },
                if trans_b { "ᵀ" } else { "" }
            ));
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let (batch_a, batch_b) = (numel(lead_a), numel(lead_b));
        let lead: Vec<usize> = if lead_a == lead_b || lead_b.is_empty() {
            lead_a.to_vec()
        } else if lead_a.is_empty() {
            lead_b.to_vec()
        } else {
            return shape_err(format!("matmul batch axes do not broadcast: {sa:?} vs {sb:?}"));
        };
        let layout = MatmulLayout {
            m,
            k,
            n,
            batch: numel(&lead),
            batch_a,
            batch_b,
            trans_a,
            trans_b,
        };
        let mut out = vec![S::zero(); layout.batch * m * n];
        if batch_b == 1 && batch_a > 1 && !trans_a {
            // fold the batch into the row dimension: one large product
            gemm(
                batch_a * m,
                k,
                n,
                self.data(),
                MatRef::row_major(0, k),
                other.data(),
                layout.b_view(0),
                S::zero(),
                &mut out,
                MatRef::row_major(0, n),
            );
        } else {
            for bi in 0..layout.batch {
                gemm(m, k, n, self.data(), layout.a_view(bi), other.data(), layout.b_view(bi), S::zero(), &mut out, layout.c_view(bi));
            }
        }
        let mut shape = lead;
        shape.extend([m, n]);
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone(), other.clone()],
            Box::new(MatmulBackward { layout }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, probe, rand_tensor};

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn identity_product() {
        let x = rand_tensor(&[3, 4], 1);
        let mut eye = vec![0.0; 9];
        (0..3).for_each(|i| eye[i * 3 + i] = 1.0);
        let id = Tensor::<f64>::new(eye, &[3, 3]).unwrap();
        assert_eq!(id.matmul(&x).unwrap().data(), x.data());
    }

    #[test]
    fn small_known_product() {
        let a = Tensor::<f64>::new(vec![1., 2., 3., 4., 5., 6.], &[2, 3]).unwrap();
        let b = Tensor::<f64>::new(vec![7., 8., 9., 10., 11., 12.], &[3, 2]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), naive(a.data(), b.data(), 2, 3, 2).as_slice());
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn transposed_operands_match_naive() {
        let a = rand_tensor(&[2, 5, 3], 3); // used transposed: 3×5
        let b = rand_tensor(&[2, 4, 5], 4); // used transposed: 5×4
        let c = a.matmul_t(&b, true, true).unwrap();
        assert_eq!(c.shape(), &[2, 3, 4]);
        for bi in 0..2 {
            let at: Vec<f64> = (0..3).flat_map(|i| (0..5).map(move |l| (i, l))).map(|(i, l)| a.data()[bi * 15 + l * 3 + i]).collect();
            let bt: Vec<f64> = (0..5).flat_map(|l| (0..4).map(move |j| (l, j))).map(|(l, j)| b.data()[bi * 20 + j * 5 + l]).collect();
            let expect = naive(&at, &bt, 3, 5, 4);
            for (x, y) in c.data()[bi * 12..(bi + 1) * 12].iter().zip(&expect) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_errors() {
        let a = rand_tensor(&[2, 3], 1);
        let b = rand_tensor(&[2, 3], 2);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn mac_counter_counts_products() {
        mac_counter::reset();
        let a = rand_tensor(&[4, 6, 5], 1);
        let b = rand_tensor(&[5, 7], 2);
        a.matmul(&b).unwrap();
        assert_eq!(mac_counter::read(), 4 * 6 * 5 * 7);
    }

    #[test]
    fn gradients_all_layouts() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let sa: &[usize] = if ta { &[2, 4, 3] } else { &[2, 3, 4] };
            let sb: &[usize] = if tb { &[2, 5, 4] } else { &[2, 4, 5] };
            let a = rand_tensor(sa, 10);
            let b = rand_tensor(sb, 11);
            check_gradients(&[a, b], 1e-6, |p| probe(&p[0].matmul_t(&p[1], ta, tb).unwrap()));
        }
    }

    #[test]
    fn gradients_shared_operand() {
        let a = rand_tensor(&[3, 2, 4], 12);
        let b = rand_tensor(&[4, 5], 13);
        check_gradients(&[a, b], 1e-6, |p| probe(&p[0].matmul(&p[1]).unwrap()));
        let a = rand_tensor(&[4, 2], 14);
        let b = rand_tensor(&[3, 4, 5], 15);
        check_gradients(&[a, b], 1e-6, |p| probe(&p[0].matmul_t(&p[1], true, false).unwrap()));
    }
}

use super::{numel, Element, Tensor};
use crate::error::{Error, Result};

/// out[n×m] += a[n×k] · b[k×m]
fn mm_acc<T: Element>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// out[n×k] += g[n×m] · b[k×m]ᵀ
fn mm_nt_acc<T: Element>(g: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let dot: T = grow
                .iter()
                .zip(&b[p * m..(p + 1) * m])
                .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
            out[i * k + p] = out[i * k + p] + dot;
        }
    }
}

/// out[k×m] += a[n×k]ᵀ · g[n×m]
fn mm_tn_acc<T: Element>(a: &[T], g: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            for (o, &gv) in out[p * m..(p + 1) * m].iter_mut().zip(grow) {
                *o = *o + aip * gv;
            }
        }
    }
}

impl<T: Element> Tensor<T> {
    /// Matrix product over the last two axes.
    ///
    /// `self` is `[.., n, k]`. `rhs` is either a shared `[k, m]` matrix
    /// (applied to every leading index) or has the same leading axes as
    /// `self`, i.e. `[.., k, m]`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let err = || Error::shape("matmul", format!("{:?} x {:?}", self.shape(), rhs.shape()));
        if self.rank() < 2 || rhs.rank() < 2 {
            return Err(err());
        }
        let (lead, nk) = self.shape().split_at(self.rank() - 2);
        let (n, k) = (nk[0], nk[1]);
        let shared = rhs.rank() == 2;
        let (rlead, km) = rhs.shape().split_at(rhs.rank() - 2);
        if km[0] != k || (!shared && rlead != lead) {
            return Err(err());
        }
        let m = km[1];
        let batch = numel(lead);
        let mut out = vec![T::zero(); batch * n * m];
        let (a_stride, b_stride) = (n * k, if shared { 0 } else { k * m });
        for bi in 0..batch {
            mm_acc(
                &self.data()[bi * a_stride..(bi + 1) * a_stride],
                &rhs.data()[bi * b_stride..bi * b_stride + k * m],
                &mut out[bi * n * m..(bi + 1) * n * m],
                n,
                k,
                m,
            );
        }
        let mut shape = lead.to_vec();
        shape.extend([n, m]);
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Self::from_op(
            "matmul",
            shape,
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _| {
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![T::zero(); a.numel()];
                    for bi in 0..batch {
                        mm_nt_acc(
                            &g[bi * n * m..(bi + 1) * n * m],
                            &b.data()[bi * b_stride..bi * b_stride + k * m],
                            &mut ga[bi * a_stride..(bi + 1) * a_stride],
                            n,
                            k,
                            m,
                        );
                    }
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![T::zero(); b.numel()];
                    for bi in 0..batch {
                        mm_tn_acc(
                            &a.data()[bi * a_stride..(bi + 1) * a_stride],
                            &g[bi * n * m..(bi + 1) * n * m],
                            &mut gb[bi * b_stride..bi * b_stride + k * m],
                            n,
                            k,
                            m,
                        );
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Self> {
        if self.rank() < 2 {
            return Err(Error::shape("transpose", format!("{:?}", self.shape())));
        }
        let r = self.rank();
        let (n, m) = (self.shape()[r - 2], self.shape()[r - 1]);
        let batch = self.numel() / (n * m);
        let transpose = move |src: &[T], rows: usize, cols: usize| {
            let mut dst = vec![T::zero(); src.len()];
            for bi in 0..batch {
                let base = bi * rows * cols;
                for i in 0..rows {
                    for j in 0..cols {
                        dst[base + j * rows + i] = src[base + i * cols + j];
                    }
                }
            }
            dst
        };
        let data = transpose(self.data(), n, m);
        let mut shape = self.shape().to_vec();
        shape.swap(r - 2, r - 1);
        Ok(Self::from_op(
            "transpose",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(transpose(g, m, n))]),
        ))
    }

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax_lastdim(&self) -> Self {
        let n = *self.shape().last().unwrap();
        let mut out = self.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        Self::from_op(
            "softmax",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, y| {
                let mut gx = vec![T::zero(); y.len()];
                for ((gx, g), y) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot = g.iter().zip(y).fold(T::zero(), |acc, (&g, &y)| acc + g * y);
                    for ((o, &g), &y) in gx.iter_mut().zip(g).zip(y) {
                        *o = y * (g - dot);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

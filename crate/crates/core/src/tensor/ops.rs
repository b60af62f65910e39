use super::{numel, Element, Tensor};
use crate::error::{Error, Result};

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Splits a shape around `axis` into (outer, extent, inner) element counts.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl<T: Element> Tensor<T> {
    pub fn add(&self, other: &Self) -> Result<Self> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        Ok(Self::from_op(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        Ok(Self::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())]),
        ))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Self::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| {
                let ga = g.iter().zip(b.data()).map(|(&g, &b)| g * b).collect();
                let gb = g.iter().zip(a.data()).map(|(&g, &a)| g * a).collect();
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// Sum of any number of same-shape tensors, accumulated left to right.
    pub fn add_all(terms: &[Self]) -> Result<Self> {
        let first = terms
            .first()
            .ok_or_else(|| Error::Usage("add_all of an empty list".into()))?;
        let mut acc = first.clone();
        for t in &terms[1..] {
            acc = acc.add(t)?;
        }
        Ok(acc)
    }

    pub fn scale(&self, s: T) -> Self {
        let data = self.data().iter().map(|&v| v * s).collect();
        Self::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().map(|&v| v * s).collect())]),
        )
    }

    pub fn relu(&self) -> Self {
        let data = self.data().iter().map(|&v| v.max(T::zero())).collect();
        Self::from_op(
            "relu",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g, y| {
                let gx = g
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn sigmoid(&self) -> Self {
        let data = self
            .data()
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect();
        Self::from_op(
            "sigmoid",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g, y| {
                let gx = g.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect();
                vec![Some(gx)]
            }),
        )
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&self) -> Self {
        let s = self.data().iter().copied().sum();
        let n = self.numel();
        Self::from_op(
            "sum",
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Self {
        let n = T::from_usize(self.numel()).unwrap();
        self.sum().scale(T::one() / n)
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        Ok(Self::from_op(
            "reshape",
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Contiguous slab `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || len == 0 || start + len > self.shape()[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} [{start}, {}) of {:?}", start + len, self.shape()),
            ));
        }
        let (outer, extent, inner) = axis_split(self.shape(), axis);
        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let full = self.numel();
        Ok(Self::from_op(
            "narrow",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); full];
                for o in 0..outer {
                    let base = (o * extent + start) * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Joins tensors along `axis`; every other extent must agree.
    pub fn concat(parts: &[Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of an empty list".into()))?;
        if axis >= first.rank() {
            return Err(Error::shape("concat", format!("axis {axis} of {:?}", first.shape())));
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", first.shape(), p.shape()),
                ));
            }
        }
        let (outer, _, inner) = axis_split(first.shape(), axis);
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &e) in parts.iter().zip(&extents) {
                data.extend_from_slice(&p.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Self::from_op(
            "concat",
            shape,
            data,
            parts.to_vec(),
            Box::new(move |g, _| {
                let mut grads: Vec<Vec<T>> =
                    extents.iter().map(|&e| Vec::with_capacity(outer * e * inner)).collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (gp, &e) in grads.iter_mut().zip(&extents) {
                        gp.extend_from_slice(&g[offset..offset + e * inner]);
                        offset += e * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Concatenation along the channel axis of `[b, c, h, w]` maps.
    pub fn concat_channels(parts: &[Self]) -> Result<Self> {
        if parts.iter().any(|p| p.rank() != 4) {
            return Err(Error::shape("concat_channels", "expected rank-4 inputs"));
        }
        Self::concat(parts, 1)
    }

    pub fn concat_lastdim(parts: &[Self]) -> Result<Self> {
        let rank = parts.first().map_or(0, |p| p.rank());
        if rank == 0 {
            return Err(Error::Usage("concat of an empty list".into()));
        }
        Self::concat(parts, rank - 1)
    }

    /// Splits the last axis into `parts` equal pieces.
    pub fn split_lastdim(&self, parts: usize) -> Result<Vec<Self>> {
        let axis = self.rank() - 1;
        let extent = self.shape()[axis];
        if parts == 0 || !extent.is_multiple_of(parts) {
            return Err(Error::shape(
                "split_lastdim",
                format!("last extent {extent} of {:?} not divisible by {parts}", self.shape()),
            ));
        }
        let len = extent / parts;
        (0..parts).map(|i| self.narrow(axis, i * len, len)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_and_sigmoid_values() {
        assert_eq!(t(&[3], &[-1.0, 0.0, 2.0]).relu().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(t(&[1], &[0.0]).sigmoid().data(), &[0.5]);
    }

    #[test]
    fn split_rejects_odd_extent() {
        let x = t(&[1, 3], &[1.0, 2.0, 3.0]);
        assert!(matches!(x.split_lastdim(2), Err(Error::Shape { .. })));
    }

    #[test]
    fn concat_channels_layout() {
        let a = t(&[1, 1, 1, 2], &[1.0, 2.0]);
        let b = t(&[1, 2, 1, 2], &[3.0, 4.0, 5.0, 6.0]);
        let c = Tensor::concat_channels(&[a, b]).unwrap();
        assert_eq!(c.shape(), &[1, 3, 1, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn mismatched_add_reports_both_shapes() {
        let err = t(&[2], &[1.0, 2.0]).add(&t(&[1], &[1.0])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[1]"), "{msg}");
    }

    proptest! {
        #[test]
        fn split_concat_round_trip(
            outer in 1usize..4, half in 1usize..5, parts in 1usize..4, seed in any::<u64>()
        ) {
            let n = outer * half * parts;
            let data: Vec<f64> = (0..n).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 7.0).collect();
            let x = Tensor::from_vec(&[outer, half * parts], data).unwrap();
            let pieces = x.split_lastdim(parts).unwrap();
            let back = Tensor::concat_lastdim(&pieces).unwrap();
            prop_assert_eq!(back.shape(), x.shape());
            prop_assert!(back.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}

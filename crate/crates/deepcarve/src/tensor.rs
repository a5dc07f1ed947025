//! Dense row-major f64 tensors.
//!
//! Everything numeric in the crate flows through this type: images, weights,
//! activations, gradients. All math is 64-bit and accumulation order is fixed
//! (left to right in row-major order) so results are reproducible bit for bit.
//! There is no broadcasting beyond scalar-tensor; shape mismatches are errors
//! that name both shapes.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Magic bytes for the binary tensor blob used inside checkpoints.
const BLOB_MAGIC: &[u8; 4] = b"CVT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::EmptyShape);
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::ZeroDim {
            shape: shape.to_vec(),
        });
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        Tensor::fill(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Result<Tensor> {
        Tensor::fill(shape, 1.0)
    }

    pub fn fill(shape: &[usize], value: f64) -> Result<Tensor> {
        let len = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::BadShape {
                op: "from_vec",
                expected: "shape product equal to data length",
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Gaussian entries scaled by `std`, e.g. for He-style init.
    pub fn randn(shape: &[usize], std: f64, rng: &mut crate::rng::Rng) -> Result<Tensor> {
        let len = check_shape(shape)?;
        let data = (0..len).map(|_| rng.next_gaussian() * std).collect();
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Reinterprets the same flat data under a new shape of equal length.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&d, &n)) in idx.iter().zip(self.shape.iter()).enumerate() {
            debug_assert!(d < n, "index {:?} out of bounds at axis {}", idx, i);
            flat = flat * n + d;
        }
        flat
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }

    pub(crate) fn set(&mut self, idx: &[usize], value: f64) {
        let flat = self.flat_index(idx);
        self.data[flat] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let out = Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        };
        out.debug_check_finite("map");
        out
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        let out = Tensor {
            shape: self.shape.clone(),
            data,
        };
        out.debug_check_finite(op);
        Ok(out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|x| x * k)
    }

    /// 2-D matrix product, i-k-j loop order, accumulation over k ascending.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut data = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut data, m, k, n);
        let out = Tensor {
            shape: vec![m, n],
            data,
        };
        out.debug_check_finite("matmul");
        Ok(out)
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::BadShape {
                op: "transpose",
                expected: "a 2-D tensor",
                shape: self.shape.clone(),
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data,
        })
    }

    /// Sums along `axis` (the axis is removed; a 1-D input yields shape [1]).
    pub fn reduce_sum(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::AxisOutOfRange {
                op: "reduce_sum",
                axis,
                shape: self.shape.clone(),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let mid = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    data[o * inner + i] += self.data[base + i];
                }
            }
        }
        let mut shape: Vec<usize> = self
            .shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect();
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor { shape, data };
        out.debug_check_finite("reduce_sum");
        Ok(out)
    }

    pub fn reduce_mean(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::AxisOutOfRange {
                op: "reduce_mean",
                axis,
                shape: self.shape.clone(),
            });
        }
        Ok(self.reduce_sum(axis)?.scale(1.0 / self.shape[axis] as f64))
    }

    /// Scalar fold of all entries, left to right.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Mean of a 2-D feature map — the per-map "response" primitive.
    pub fn spatial_mean(&self) -> Result<f64> {
        if self.rank() != 2 {
            return Err(Error::BadShape {
                op: "spatial_mean",
                expected: "a 2-D feature map",
                shape: self.shape.clone(),
            });
        }
        Ok(self.mean())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    #[inline]
    pub(crate) fn debug_check_finite(&self, op: &str) {
        debug_assert!(self.is_finite(), "{op} produced a non-finite value");
    }

    /// Writes the blob format used inside checkpoints:
    /// "CVT1", u32 rank, u64 dims, little-endian f64 payload.
    pub fn write_blob<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(BLOB_MAGIC)?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_blob<R: Read>(r: &mut R) -> Result<Tensor> {
        let bad = |message: &str| Error::Checkpoint(format!("tensor blob: {message}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| Error::io("tensor blob magic", e))?;
        if &magic != BLOB_MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)
            .map_err(|e| Error::io("tensor blob rank", e))?;
        let rank = u32::from_le_bytes(b4) as usize;
        if rank == 0 || rank > 8 {
            return Err(bad("implausible rank"));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut b8 = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut b8)
                .map_err(|e| Error::io("tensor blob dims", e))?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        let len = check_shape(&shape)?;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut b8)
                .map_err(|e| Error::io("tensor blob payload", e))?;
            data.push(f64::from_le_bytes(b8));
        }
        Ok(Tensor { shape, data })
    }
}

/// out[m x n] += a[m x k] * b[k x n] on flat row-major slices.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += aik * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn zeros_ones_fill() {
        let z = Tensor::zeros(&[2, 3]).unwrap();
        assert_eq!(z.len(), 6);
        assert!(z.data().iter().all(|&v| v == 0.0));

        let o = Tensor::ones(&[1]).unwrap();
        assert_eq!(o.data(), &[1.0]);

        let f = Tensor::fill(&[2], 0.05).unwrap();
        assert_eq!(f.data(), &[0.05, 0.05]);
    }

    #[test]
    fn empty_and_zero_shapes_rejected() {
        assert!(matches!(Tensor::zeros(&[]), Err(Error::EmptyShape)));
        assert!(matches!(Tensor::zeros(&[2, 0]), Err(Error::ZeroDim { .. })));
    }

    #[test]
    fn add_hand_arithmetic() {
        let a = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[3, 2]).unwrap();
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_right_identity_exact_on_integers() {
        let mut rng = Rng::from_seed(5);
        let a = Tensor::from_vec(&[3, 4], (0..12).map(|_| rng.below(17) as f64).collect()).unwrap();
        let mut eye = Tensor::zeros(&[4, 4]).unwrap();
        for i in 0..4 {
            eye.set(&[i, i], 1.0);
        }
        assert_eq!(a.matmul(&eye).unwrap(), a);
    }

    #[test]
    fn reduce_mean_whole_vector() {
        let t = Tensor::from_vec(&[3], vec![2.0, 4.0, 6.0]).unwrap();
        let m = t.reduce_mean(0).unwrap();
        assert_eq!(m.shape(), &[1]);
        assert_eq!(m.data(), &[4.0]);
    }

    #[test]
    fn reduce_sum_axis_semantics() {
        // [[1,2,3],[4,5,6]]
        let t = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let rows = t.reduce_sum(0).unwrap();
        assert_eq!(rows.shape(), &[3]);
        assert_eq!(rows.data(), &[5.0, 7.0, 9.0]);
        let cols = t.reduce_sum(1).unwrap();
        assert_eq!(cols.shape(), &[2]);
        assert_eq!(cols.data(), &[6.0, 15.0]);
        assert!(matches!(
            t.reduce_sum(2),
            Err(Error::AxisOutOfRange { .. })
        ));
    }

    #[test]
    fn spatial_mean_cases() {
        let ones = Tensor::ones(&[2, 2]).unwrap();
        assert_eq!(ones.spatial_mean().unwrap(), 1.0);

        let t = Tensor::from_vec(&[2, 2], vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        assert_eq!(t.spatial_mean().unwrap(), 3.0);

        let z = Tensor::zeros(&[2, 2]).unwrap();
        assert_eq!(z.spatial_mean().unwrap(), 0.0);

        assert!(Tensor::zeros(&[2, 2, 2]).unwrap().spatial_mean().is_err());
    }

    #[test]
    fn transpose_round_trip() {
        let t = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let tt = t.transpose().unwrap();
        assert_eq!(tt.shape(), &[3, 2]);
        assert_eq!(tt.at(&[0, 1]), 4.0);
        assert_eq!(tt.transpose().unwrap(), t);
    }

    #[test]
    fn blob_round_trip() {
        let mut rng = Rng::from_seed(1);
        let t = Tensor::randn(&[3, 2, 4], 1.5, &mut rng).unwrap();
        let mut buf = Vec::new();
        t.write_blob(&mut buf).unwrap();
        let back = Tensor::read_blob(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn blob_rejects_garbage() {
        let mut buf = Vec::new();
        Tensor::ones(&[2]).unwrap().write_blob(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(Tensor::read_blob(&mut buf.as_slice()).is_err());
    }
}

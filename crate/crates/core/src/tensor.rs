//! Dense row-major `f64` tensors.
//!
//! Shapes never broadcast implicitly. Operations that need a repeated
//! operand go through [`Tensor::repeat_rows`] or [`Tensor::tile_spatial`]
//! so every expansion is visible at the call site.
//!
//! On-disk format (`.ten`): the four magic bytes `TEN1`, the rank as a
//! little-endian `u64`, one little-endian `u64` per dimension, then the
//! payload as little-endian `f64` in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{dim_err, Error, Result};
use crate::rng::Rng;

pub const MAGIC: &[u8; 4] = b"TEN1";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Parameter(format!(
                "shape {shape:?} has a zero dimension"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Parameter(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero dimension in {shape:?}");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "empty vector");
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Parameter("ragged rows".into()));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Outer product `a bᵀ` of two vectors.
    pub fn outer(a: &[f64], b: &[f64]) -> Self {
        let data = a.iter().flat_map(|&x| b.iter().map(move |&y| x * y)).collect();
        Self {
            shape: vec![a.len(), b.len()],
            data,
        }
    }

    /// I.i.d. normal entries with mean zero and standard deviation `std`.
    pub fn gaussian_init(rng: &mut Rng, shape: &[usize], std: f64) -> Result<Self> {
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::Parameter(format!("std must be positive, got {std}")));
        }
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * rng.normal()).collect();
        Self::new(shape, data)
    }

    pub fn uniform_init(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Self> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform_range(lo, hi)).collect();
        Self::new(shape, data)
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Parameter(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            acc * d + i
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().expect("rank >= 1");
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(dim_err("matmul", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: gemm(&self.data, &other.data, m, k, n),
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        Ok(Tensor {
            shape: vec![c, r],
            data: transpose_raw(&self.data, r, c),
        })
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(dim_err(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err("add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        Ok(self.sub(other)?.max_abs())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Repeats each leading row `times` times in place: `[n, k]` becomes
    /// `[n * times, k]` with row `r` copied to rows `r*times..(r+1)*times`.
    pub fn repeat_rows(&self, times: usize) -> Tensor {
        let cols = if self.rank() == 1 { self.len() } else { self.len() / self.shape[0] };
        let rows = self.len() / cols;
        let mut data = Vec::with_capacity(self.len() * times);
        for r in 0..rows {
            let row = &self.data[r * cols..(r + 1) * cols];
            for _ in 0..times {
                data.extend_from_slice(row);
            }
        }
        Tensor {
            shape: vec![rows * times, cols],
            data,
        }
    }

    /// Copies a vector `[d]` to every location of an `[h, w, d]` grid.
    pub fn tile_spatial(&self, h: usize, w: usize) -> Result<Tensor> {
        if self.rank() != 1 {
            return Err(Error::Parameter(format!(
                "tile_spatial expects a vector, got {:?}",
                self.shape
            )));
        }
        let d = self.len();
        Ok(Tensor {
            shape: vec![h, w, d],
            data: self.repeat_rows(h * w).data,
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.shape.len() as u64).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let rank = read_u64(r)? as usize;
        if rank == 0 || rank > 16 {
            return Err(Error::Format(format!("unsupported rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0 && n < (1 << 32))
            .ok_or_else(|| Error::Format(format!("bad shape {shape:?}")))?;
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Tensor::new(&shape, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        let mut r = BufReader::new(File::open(path)?);
        Tensor::read_from(&mut r)
    }
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// `c[m×n] = a[m×k] · b[k×n]`. Each output element accumulates over `k`
/// in increasing order, so results are bit-reproducible.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (&a_ik, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            for (c_ij, &b_kj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ik * b_kj;
            }
        }
    }
    c
}

/// `c[m×n] = a[k×m]ᵀ · b[k×n]`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    let mut c = vec![0.0; m * n];
    for (a_row, b_row) in a.chunks_exact(m).zip(b.chunks_exact(n)) {
        for (&a_ki, c_row) in a_row.iter().zip(c.chunks_exact_mut(n)) {
            for (c_ij, &b_kj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ki * b_kj;
            }
        }
    }
    c
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = Vec::with_capacity(m * n);
    for a_row in a.chunks_exact(k) {
        for b_row in b.chunks_exact(k) {
            let mut s = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            c.push(s);
        }
    }
    c
}

pub(crate) fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = m(&[&[1., 2.], &[3., 4.]]);
        assert_eq!(a.matmul(&Tensor::identity(2)).unwrap(), a);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let a = m(&[&[1., 2.]]);
        let b = m(&[&[3.], &[4.]]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_zero_left() {
        let mut rng = Rng::new(0);
        let b = Tensor::gaussian_init(&mut rng, &[3, 4], 1.0).unwrap();
        let c = Tensor::zeros(&[2, 3]).matmul(&b).unwrap();
        assert_eq!(c, Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn transposed_kernels_agree_with_plain_gemm() {
        let mut rng = Rng::new(3);
        let a = Tensor::gaussian_init(&mut rng, &[5, 4], 1.0).unwrap();
        let b = Tensor::gaussian_init(&mut rng, &[5, 3], 1.0).unwrap();
        let at = a.transpose().unwrap();
        let want = at.matmul(&b).unwrap();
        let got = gemm_tn(a.data(), b.data(), 5, 4, 3);
        assert!(want.data().iter().zip(&got).all(|(x, y)| (x - y).abs() < 1e-12));
        let bt = b.transpose().unwrap();
        let got = gemm_nt(at.data(), bt.data(), 4, 5, 3);
        assert!(want.data().iter().zip(&got).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn hadamard_cases() {
        let ones = Tensor::vector(&[1., 1., 1.]);
        let a = Tensor::vector(&[1., 2., 3.]);
        assert_eq!(a.hadamard(&ones).unwrap(), a);
        let p = Tensor::vector(&[1., 2.]).hadamard(&Tensor::vector(&[3., 4.])).unwrap();
        assert_eq!(p.data(), &[3., 8.]);
        let z = Tensor::vector(&[5., 6.]).hadamard(&Tensor::vector(&[0., 0.])).unwrap();
        assert_eq!(z.data(), &[0., 0.]);
        assert!(matches!(
            a.hadamard(&Tensor::vector(&[1., 2.])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn gaussian_init_contracts() {
        let a = Tensor::gaussian_init(&mut Rng::new(42), &[4], 0.02).unwrap();
        let b = Tensor::gaussian_init(&mut Rng::new(42), &[4], 0.02).unwrap();
        assert_eq!(a, b);
        let s = Tensor::gaussian_init(&mut Rng::new(1), &[2, 3], 0.5).unwrap();
        assert_eq!(s.shape(), &[2, 3]);
        assert_eq!(s.len(), 6);
        assert!(Tensor::gaussian_init(&mut Rng::new(1), &[2], 0.0).is_err());
        assert!(Tensor::gaussian_init(&mut Rng::new(1), &[2], -1.0).is_err());
    }

    #[test]
    fn gaussian_init_mean_is_near_zero() {
        // standard error of the mean is 1/sqrt(1e5) ~ 0.0032; 0.02 is > 5 sigma
        let t = Tensor::gaussian_init(&mut Rng::new(9), &[100_000], 1.0).unwrap();
        assert!(t.mean().abs() < 0.02, "mean {}", t.mean());
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn new_rejects_bad_lengths() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
    }

    #[test]
    fn tiling() {
        let v = Tensor::vector(&[1., 2.]);
        let t = v.tile_spatial(2, 3).unwrap();
        assert_eq!(t.shape(), &[2, 3, 2]);
        assert!(t.data().chunks(2).all(|c| c == [1., 2.]));
        let r = Tensor::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap().repeat_rows(2);
        assert_eq!(r.data(), &[1., 2., 1., 2., 3., 4., 3., 4.]);
    }

    #[test]
    fn reading_garbage_fails() {
        let mut bytes: &[u8] = b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00";
        assert!(matches!(Tensor::read_from(&mut bytes), Err(Error::Format(_))));
        let mut short: &[u8] = b"TEN1\x01\x00\x00\x00\x00\x00\x00\x00\x04";
        assert!(Tensor::read_from(&mut short).is_err());
    }

    fn tensor_strategy() -> impl Strategy<Value = Tensor> {
        prop::collection::vec(1usize..5, 1..4).prop_flat_map(|shape| {
            let n = shape.iter().product::<usize>();
            prop::collection::vec(any::<f64>(), n)
                .prop_map(move |data| Tensor::new(&shape, data).unwrap())
        })
    }

    fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(-10.0f64..10.0, rows * cols)
            .prop_map(move |d| Tensor::new(&[rows, cols], d).unwrap())
    }

    proptest! {
        #[test]
        fn serialization_round_trip_is_bit_exact(t in tensor_strategy()) {
            let mut buf = Vec::new();
            t.write_to(&mut buf).unwrap();
            let back = Tensor::read_from(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }

        #[test]
        fn matmul_is_associative((a, b, c) in (mat(3, 4), mat(4, 2), mat(2, 5))) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.max_abs().max(1.0);
            prop_assert!(left.max_abs_diff(&right).unwrap() <= 1e-9 * scale);
        }

        #[test]
        fn hadamard_is_associative(
            (a, b, c) in (1usize..6).prop_flat_map(|n| (mat(1, n), mat(1, n), mat(1, n)))
        ) {
            let l = a.hadamard(&b).unwrap().hadamard(&c).unwrap();
            let r = a.hadamard(&b.hadamard(&c).unwrap()).unwrap();
            // the real-number identity holds exactly only when no rounding happens;
            // integer-valued entries keep every product exact
            let ai = a.map(f64::round);
            let bi = b.map(f64::round);
            let ci = c.map(f64::round);
            let li = ai.hadamard(&bi).unwrap().hadamard(&ci).unwrap();
            let ri = ai.hadamard(&bi.hadamard(&ci).unwrap()).unwrap();
            prop_assert_eq!(li, ri);
            prop_assert!(l.max_abs_diff(&r).unwrap() <= 1e-12 * l.max_abs().max(1.0));
        }
    }
}

//! Dense row-major tensor and the numeric primitives the rest of the crate
//! is built from. Deliberately minimal: no views, no broadcasting beyond
//! what the layers below actually use.

use crate::error::{Error, Result};
use crate::num::Element;

/// Dense row-major numeric array with shape metadata.
///
/// Invariant: `shape.iter().product() == data.len()`. A rank-0 tensor
/// (empty shape) holds exactly one element and is used for scalar
/// parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidParameter {
                name: "tensor",
                reason: format!("shape {:?} needs {} elements, got {}", shape, n, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    /// Rank-2 tensor from rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Tensor {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single element of a rank-0 (or one-element) tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidParameter {
                name: "tensor",
                reason: format!("expected rank 2, got shape {:?}", self.shape),
            }),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::InvalidParameter {
                name: "tensor",
                reason: format!("expected rank 3, got shape {:?}", self.shape),
            }),
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let (r, c) = (self.shape[0], self.shape[1]);
        debug_assert!(self.rank() == 2 && i < r);
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.shape[1];
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.shape[1] + j] = v;
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::InvalidParameter {
                name: "reshape",
                reason: format!("cannot view {:?} as {:?}", self.shape, shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, a: T) -> Self {
        self.map(|v| v * a)
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.shape, other.shape, "add: shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign: shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn hadamard(&self, other: &Self) -> Self {
        assert_eq!(self.shape, other.shape, "hadamard: shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute element, or zero for an empty tensor.
    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    /// Reverse the row order of a rank-2 tensor.
    pub fn reverse_rows(&self) -> Self {
        let (r, c) = (self.shape[0], self.shape[1]);
        debug_assert_eq!(self.rank(), 2);
        let mut data = Vec::with_capacity(r * c);
        for i in (0..r).rev() {
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Column-wise concatenation of two rank-2 tensors with equal row counts.
    pub fn concat_cols(&self, other: &Self) -> Self {
        let (r, c1) = (self.shape[0], self.shape[1]);
        let c2 = other.shape[1];
        assert_eq!(r, other.shape[0], "concat_cols: row mismatch");
        let mut data = Vec::with_capacity(r * (c1 + c2));
        for i in 0..r {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Tensor {
            shape: vec![r, c1 + c2],
            data,
        }
    }

    /// Split a rank-2 tensor into its first `at` columns and the rest.
    pub fn split_cols(&self, at: usize) -> (Self, Self) {
        let (r, c) = (self.shape[0], self.shape[1]);
        assert!(at <= c, "split_cols: column {at} out of {c}");
        let mut left = Vec::with_capacity(r * at);
        let mut right = Vec::with_capacity(r * (c - at));
        for i in 0..r {
            let row = self.row(i);
            left.extend_from_slice(&row[..at]);
            right.extend_from_slice(&row[at..]);
        }
        (
            Tensor { shape: vec![r, at], data: left },
            Tensor { shape: vec![r, c - at], data: right },
        )
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn from_f64_tensor(src: &Tensor<f64>) -> Self {
        Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| T::from_f64(v)).collect(),
        }
    }
}

/// Asserts (debug builds only) that an op produced no NaN/Inf from finite
/// inputs.
#[inline]
pub fn debug_assert_finite<T: Element>(what: &str, t: &Tensor<T>) {
    debug_assert!(t.all_finite(), "{what}: non-finite value produced");
}

/// out = x @ w + b, with x: [m, n], w: [n, p], b: [p].
pub fn affine<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = x.dims2()?;
    let (wn, p) = w.dims2()?;
    if n != wn || b.len() != p {
        return Err(Error::ShapeMismatch {
            op: "affine",
            lhs: x.shape().to_vec(),
            rhs: if b.len() != p { b.shape().to_vec() } else { w.shape().to_vec() },
        });
    }
    let mut out = Tensor::zeros(&[m, p]);
    for i in 0..m {
        let orow = out.row_mut(i);
        orow.copy_from_slice(b.data());
        let xrow = &x.data()[i * n..(i + 1) * n];
        for (t, &xv) in xrow.iter().enumerate() {
            let wrow = &w.data()[t * p..(t + 1) * p];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o = *o + xv * wv;
            }
        }
    }
    debug_assert_finite("affine", &out);
    Ok(out)
}

/// a @ b with a: [m, k], b: [k, n].
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (bk, n) = b.dims2()?;
    if k != bk {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let arow = &a.data()[i * k..(i + 1) * k];
        let orow = out.row_mut(i);
        for (t, &av) in arow.iter().enumerate() {
            let brow = &b.data()[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Ok(out)
}

/// aᵀ @ b with a: [k, m], b: [k, n]. Used by backward passes for weight
/// gradients without materializing transposes.
pub fn matmul_tn<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = a.dims2()?;
    let (bk, n) = b.dims2()?;
    if k != bk {
        return Err(Error::ShapeMismatch {
            op: "matmul_tn",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    for t in 0..k {
        let arow = &a.data()[t * m..(t + 1) * m];
        let brow = &b.data()[t * n..(t + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out.data_mut()[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Ok(out)
}

/// a @ bᵀ with a: [m, k], b: [n, k]. Used by backward passes for input
/// gradients.
pub fn matmul_nt<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (n, bk) = b.dims2()?;
    if k != bk {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let arow = &a.data()[i * k..(i + 1) * k];
        let orow = out.row_mut(i);
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b.data()[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            *o = acc;
        }
    }
    Ok(out)
}

pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

/// Softmax over the valid positions of `logits`; masked positions output
/// exactly zero. Computed with max-subtraction.
pub fn softmax_masked<T: Element>(logits: &[T], valid: &[bool]) -> Result<Vec<T>> {
    assert_eq!(logits.len(), valid.len(), "softmax_masked: length mismatch");
    let mut max = None;
    for (&l, &v) in logits.iter().zip(valid) {
        if v && max.map_or(true, |m| l > m) {
            max = Some(l);
        }
    }
    let max = max.ok_or(Error::EmptyChunk)?;
    let mut out = vec![T::zero(); logits.len()];
    let mut sum = T::zero();
    for (i, (&l, &v)) in logits.iter().zip(valid).enumerate() {
        if v {
            let e = (l - max).exp();
            out[i] = e;
            sum = sum + e;
        }
    }
    for o in &mut out {
        *o = *o / sum;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_identity_left_factor() {
        let x = Tensor::from_rows(&[vec![1.0f64, 0.0], vec![0.0, 1.0]]);
        let w = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Tensor::from_vec(vec![0.0, 0.0]);
        let y = affine(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn affine_hand_evaluated() {
        let x = Tensor::from_rows(&[vec![1.0f64, 1.0]]);
        let w = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Tensor::from_vec(vec![10.0, 10.0]);
        let y = affine(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[14.0, 16.0]);
    }

    #[test]
    fn affine_zero_input_passes_bias_through() {
        let x = Tensor::<f64>::zeros(&[3, 2]);
        let w = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Tensor::from_vec(vec![5.0, -7.0]);
        let y = affine(&x, &w, &b).unwrap();
        for i in 0..3 {
            assert_eq!(y.row(i), &[5.0, -7.0]);
        }
    }

    #[test]
    fn affine_rejects_shape_mismatch() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        let w = Tensor::<f64>::zeros(&[2, 2]);
        let b = Tensor::<f64>::zeros(&[2]);
        let err = affine(&x, &w, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn affine_is_linear() {
        // affine(ax + by, W, 0) == a*affine(x) + b*affine(y)
        let mut rng = crate::rng::Rng::new(11);
        let x = rng.normal_tensor::<f64>(&[3, 4]);
        let y = rng.normal_tensor::<f64>(&[3, 4]);
        let w = rng.normal_tensor::<f64>(&[4, 2]);
        let b0 = Tensor::zeros(&[2]);
        let (a, c) = (0.7, -1.3);
        let lhs = affine(&x.scale(a).add(&y.scale(c)), &w, &b0).unwrap();
        let rhs = affine(&x, &w, &b0).unwrap().scale(a).add(&affine(&y, &w, &b0).unwrap().scale(c));
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            assert!((l - r).abs() <= 1e-6 * r.abs().max(1.0));
        }
    }

    #[test]
    fn softmax_equal_logits_is_uniform() {
        let p = softmax_masked(&[5.0f64, 5.0, 5.0], &[true; 3]).unwrap();
        for &v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form_ratio() {
        let p = softmax_masked(&[0.0f64, 2.0f64.ln()], &[true, true]).unwrap();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_single_valid_position() {
        let p = softmax_masked(&[9.0f64, 1.0], &[true, false]).unwrap();
        assert_eq!(p, vec![1.0, 0.0]);
    }

    #[test]
    fn softmax_all_masked_is_error() {
        let err = softmax_masked(&[1.0f64, 2.0], &[false, false]).unwrap_err();
        assert!(matches!(err, Error::EmptyChunk));
    }

    #[test]
    fn softmax_shift_invariant() {
        let logits = [0.3f64, -1.2, 4.0, 0.0];
        let valid = [true, false, true, true];
        let p1 = softmax_masked(&logits, &valid).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|&l| l + 123.456).collect();
        let p2 = softmax_masked(&shifted, &valid).unwrap();
        for (a, b) in p1.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let mut rng = crate::rng::Rng::new(3);
        let a = rng.normal_tensor::<f64>(&[4, 3]);
        let b = rng.normal_tensor::<f64>(&[3, 5]);
        let ab = matmul(&a, &b).unwrap();

        // matmul_tn(aT_storage, b) with aT_storage = a stored as [4,3] means
        // (aᵀ)ᵀ... check against explicit transposes instead.
        let at = transpose(&a);
        let bt = transpose(&b);
        let via_tn = matmul_tn(&at, &b).unwrap();
        let via_nt = matmul_nt(&a, &bt).unwrap();
        for (x, y) in ab.data().iter().zip(via_tn.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in ab.data().iter().zip(via_nt.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn transpose(t: &Tensor<f64>) -> Tensor<f64> {
        let (r, c) = t.dims2().unwrap();
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.set2(j, i, t.get2(i, j));
            }
        }
        out
    }

    #[test]
    fn scalar_tensor_roundtrips_shape() {
        let t = Tensor::scalar(2.5f32);
        assert_eq!(t.shape(), &[] as &[usize]);
        assert_eq!(t.len(), 1);
        assert_eq!(t.item(), 2.5);
    }
}

//! Dense row-major float tensors.
//!
//! Storage is a flat `Vec` with explicit shape metadata; there are no strided
//! views, so transposes copy. Operation order is fixed (no reduction
//! reordering), which keeps runs bit-reproducible under a fixed seed.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

fn shape_str(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join("x"))
}

impl<F: Scalar> Tensor<F> {
    /// Builds a tensor, checking that every extent is positive and that
    /// `product(shape) == data.len()`. Rank 0 with one element is a scalar.
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "new",
                detail: format!("extents must be positive, got {}", shape_str(&shape)),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "new",
                detail: format!(
                    "shape {} implies {} elements, data has {}",
                    shape_str(&shape),
                    expected,
                    data.len()
                ),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); len],
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let len: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::one(); len],
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
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

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Checked NaN/Inf detection.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || expected != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!(
                    "cannot reshape {} ({} elements) to {}",
                    shape_str(&self.shape),
                    self.data.len(),
                    shape_str(&shape)
                ),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Identity matrix of extent `n`.
    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }
}

/// Extents of the last two axes, i.e. the per-matrix dimensions of a
/// (possibly batched) rank >= 2 tensor.
fn mat_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    if shape.len() < 2 {
        return None;
    }
    let cols = shape[shape.len() - 1];
    let rows = shape[shape.len() - 2];
    let batch: usize = shape[..shape.len() - 2].iter().product();
    Some((batch, rows, cols))
}

/// `C = A @ B` for rank-2 operands with agreeing inner extents.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::Shape {
            op: "matmul",
            detail: format!(
                "expected rank-2 operands, got {} and {}",
                shape_str(&a.shape),
                shape_str(&b.shape)
            ),
        });
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            detail: format!(
                "inner extents disagree: {} vs {}",
                shape_str(&a.shape),
                shape_str(&b.shape)
            ),
        });
    }
    let mut out = vec![F::zero(); m * n];
    matmul_dispatch(&a.data, &b.data, &mut out, m, k, n);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Row-major i-k-j kernel. Accumulation order over `k` is fixed per output
/// element, so results do not depend on blocking or threading.
#[inline(always)]
fn matmul_kernel<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row.iter()) {
                *o = *o + av * bv;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matmul_kernel_avx2<F: Scalar>(
    a: &[F],
    b: &[F],
    out: &mut [F],
    m: usize,
    k: usize,
    n: usize,
) {
    matmul_kernel(a, b, out, m, k, n);
}

fn matmul_dispatch<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            // Safety: feature presence checked at runtime.
            unsafe { matmul_kernel_avx2(a, b, out, m, k, n) };
            return;
        }
    }
    matmul_kernel(a, b, out, m, k, n);
}

/// Swaps the last two axes (plain transpose for rank 2, batched otherwise).
pub fn transpose<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let (batch, rows, cols) = mat_dims(&x.shape).ok_or_else(|| Error::Shape {
        op: "transpose",
        detail: format!("expected rank >= 2, got {}", shape_str(&x.shape)),
    })?;
    let mut shape = x.shape.clone();
    let r = shape.len();
    shape.swap(r - 2, r - 1);
    let mut out = vec![F::zero(); x.data.len()];
    for bi in 0..batch {
        let src = &x.data[bi * rows * cols..(bi + 1) * rows * cols];
        let dst = &mut out[bi * rows * cols..(bi + 1) * rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                dst[j * rows + i] = src[i * cols + j];
            }
        }
    }
    Ok(Tensor { shape, data: out })
}

/// Elementwise sum of same-shape tensors.
pub fn add<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.shape != b.shape {
        return Err(Error::Shape {
            op: "add",
            detail: format!(
                "shapes disagree: {} vs {}",
                shape_str(&a.shape),
                shape_str(&b.shape)
            ),
        });
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| x + y)
        .collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

/// `a + b` where `b`'s shape is a suffix of `a`'s (e.g. a bias over the last
/// axis). `b` is repeated over the leading axes.
pub fn add_broadcast<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if b.shape.len() > a.shape.len() || !a.shape.ends_with(&b.shape) {
        return Err(Error::Shape {
            op: "add_broadcast",
            detail: format!(
                "{} is not a trailing-axes broadcast of {}",
                shape_str(&b.shape),
                shape_str(&a.shape)
            ),
        });
    }
    let span = b.data.len();
    let mut data = a.data.clone();
    for chunk in data.chunks_mut(span) {
        for (x, &y) in chunk.iter_mut().zip(&b.data) {
            *x += y;
        }
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

/// Elementwise product of same-shape tensors.
pub fn mul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.shape != b.shape {
        return Err(Error::Shape {
            op: "mul",
            detail: format!(
                "shapes disagree: {} vs {}",
                shape_str(&a.shape),
                shape_str(&b.shape)
            ),
        });
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| x * y)
        .collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub fn scale<F: Scalar>(x: &Tensor<F>, factor: F) -> Tensor<F> {
    x.map(|v| v * factor)
}

/// Arithmetic mean over one axis; the result drops that axis.
pub fn mean_axis<F: Scalar>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    if axis >= x.rank() {
        return Err(Error::Shape {
            op: "mean_axis",
            detail: format!("axis {} out of range for {}", axis, shape_str(&x.shape)),
        });
    }
    let extent = x.shape[axis];
    let outer: usize = x.shape[..axis].iter().product();
    let inner: usize = x.shape[axis + 1..].iter().product();
    let mut shape = x.shape.clone();
    shape.remove(axis);
    let mut out = vec![F::zero(); outer * inner];
    for o in 0..outer {
        for l in 0..extent {
            let src = &x.data[(o * extent + l) * inner..(o * extent + l + 1) * inner];
            let dst = &mut out[o * inner..(o + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let inv = F::one() / F::from_f64(extent as f64);
    for v in &mut out {
        *v *= inv;
    }
    Ok(Tensor { shape, data: out })
}

/// Sum of all elements.
pub fn sum_all<F: Scalar>(x: &Tensor<F>) -> F {
    let mut acc = F::zero();
    for &v in &x.data {
        acc += v;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = Tensor<f64>;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = T::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2x3]"), "{msg}");
    }

    #[test]
    fn new_rejects_zero_extent() {
        assert!(T::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn scalar_has_rank_zero() {
        let s = T::scalar(2.5);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.len(), 1);
        assert_eq!(s.item(), 2.5);
    }

    #[test]
    fn matmul_identity_is_exact() {
        let m = T::new(vec![3, 2], vec![1.0, -2.0, 0.5, 4.0, 3.0, 7.0]).unwrap();
        let i3 = T::identity(3);
        assert_eq!(matmul(&i3, &m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_example() {
        let a = T::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = T::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_identity_association_bitwise() {
        // exact-representable inputs: small integers
        let a = T::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = T::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let i = T::identity(3);
        let left = matmul(&matmul(&a, &i).unwrap(), &b).unwrap();
        let right = matmul(&a, &matmul(&i, &b).unwrap()).unwrap();
        let plain = matmul(&a, &b).unwrap();
        assert_eq!(left, plain);
        assert_eq!(right, plain);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = T::zeros(vec![2, 3]);
        let b = T::zeros(vec![4, 2]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2x3]") && msg.contains("[4x2]"), "{msg}");
    }

    #[test]
    fn transpose_involution_and_vector() {
        let m = T::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(transpose(&transpose(&m).unwrap()).unwrap(), m);
        let row = T::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let col = transpose(&row).unwrap();
        assert_eq!(col.shape(), &[3, 1]);
        assert_eq!(col.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn transpose_rank1_is_error() {
        let v = T::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(transpose(&v).is_err());
    }

    #[test]
    fn transpose_batched_swaps_last_two() {
        let x = T::new(vec![2, 2, 3], (0..12).map(|v| v as f64).collect()).unwrap();
        let t = transpose(&x).unwrap();
        assert_eq!(t.shape(), &[2, 3, 2]);
        // batch 1, row 0 of the transpose = column 0 of batch 1
        assert_eq!(t.data()[6], 6.0);
        assert_eq!(t.data()[7], 9.0);
    }

    #[test]
    fn add_zero_is_identity() {
        let x = T::new(vec![2, 2], vec![1.5, -2.0, 0.0, 9.0]).unwrap();
        let z = T::zeros(vec![2, 2]);
        assert_eq!(add(&x, &z).unwrap(), x);
    }

    #[test]
    fn add_broadcast_bias_rows() {
        let x = T::new(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = T::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = add_broadcast(&x, &b).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn add_broadcast_rejects_non_suffix() {
        let x = T::zeros(vec![2, 3]);
        let b = T::zeros(vec![2]);
        assert!(add_broadcast(&x, &b).is_err());
    }

    #[test]
    fn mean_axis_of_constant_is_constant() {
        let x = T::new(vec![4, 2], vec![3.25; 8]).unwrap();
        let m = mean_axis(&x, 0).unwrap();
        assert_eq!(m.shape(), &[2]);
        assert_eq!(m.data(), &[3.25, 3.25]);
    }

    #[test]
    fn mean_axis_middle() {
        let x = T::new(vec![2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let m = mean_axis(&x, 1).unwrap();
        assert_eq!(m.shape(), &[2, 2]);
        assert_eq!(m.data(), &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn finite_detection() {
        let mut x = T::zeros(vec![2]);
        assert!(x.all_finite());
        x.data_mut()[1] = f64::NAN;
        assert!(!x.all_finite());
    }

    #[test]
    fn f32_instantiation_works() {
        let a = Tensor::<f32>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f32>::identity(2);
        assert_eq!(matmul(&a, &b).unwrap(), a);
    }
}

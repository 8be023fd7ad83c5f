//! Dense NCHW tensors and the scalar abstraction the layers are generic over.
//!
//! Training runs in `f32`; gradient checks run the same code in `f64`.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::Debug;
use std::iter::Sum;

/// Floating point element type usable by every layer.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static
{
    /// Raw strided GEMM: `c = alpha * a * b + beta * c`.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits scalar type")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major GEMM on contiguous buffers: `c[m×n] = alpha·op(a)·op(b) + beta·c`.
///
/// `a` holds `m×k` (or `k×m` when `trans_a`), `b` holds `k×n` (or `n×k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// A batch of feature maps laid out as `[batch, channels, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    pub fn batch(&self) -> usize {
        self.shape[0]
    }
    pub fn channels(&self) -> usize {
        self.shape[1]
    }
    pub fn height(&self) -> usize {
        self.shape[2]
    }
    pub fn width(&self) -> usize {
        self.shape[3]
    }
    pub fn spatial(&self) -> (usize, usize) {
        (self.shape[2], self.shape[3])
    }
    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.plane_len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }
    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let len = self.plane_len();
        let start = (n * self.shape[1] + c) * len;
        &self.data[start..start + len]
    }
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let len = self.plane_len();
        let start = (n * self.shape[1] + c) * len;
        &mut self.data[start..start + len]
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }
    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }
    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    pub fn map(mut self, f: impl Fn(T) -> T) -> Self {
        self.data.iter_mut().for_each(|v| *v = f(*v));
        self
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a = *a + b);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    /// Copies a `[h, w]` window starting at `(y0, x0)` out of every plane.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        let [b, c, ih, iw] = self.shape;
        assert!(y0 + h <= ih && x0 + w <= iw, "crop window out of bounds");
        if (y0, x0, h, w) == (0, 0, ih, iw) {
            return self.clone();
        }
        let mut out = Tensor::zeros([b, c, h, w]);
        for n in 0..b {
            for ch in 0..c {
                let src = self.plane(n, ch);
                let dst = out.plane_mut(n, ch);
                for y in 0..h {
                    let s = (y0 + y) * iw + x0;
                    dst[y * w..(y + 1) * w].copy_from_slice(&src[s..s + w]);
                }
            }
        }
        out
    }

    /// Inverse of [`Tensor::crop`] for gradients: embeds into a zero tensor of `[h, w]`.
    pub fn uncrop(&self, h: usize, w: usize) -> Self {
        let [b, c, ch_h, ch_w] = self.shape;
        assert!(ch_h <= h && ch_w <= w);
        if (ch_h, ch_w) == (h, w) {
            return self.clone();
        }
        let mut out = Tensor::zeros([b, c, h, w]);
        for n in 0..b {
            for ch in 0..c {
                let src = self.plane(n, ch);
                let dst = out.plane_mut(n, ch);
                for y in 0..ch_h {
                    dst[y * w..y * w + ch_w].copy_from_slice(&src[y * ch_w..(y + 1) * ch_w]);
                }
            }
        }
        out
    }

    /// Stacks single-sample tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Self {
        assert!(!items.is_empty(), "cannot stack an empty list");
        let [_, c, h, w] = items[0].shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for t in items {
            assert_eq!([t.shape[1], t.shape[2], t.shape[3]], [c, h, w], "stack shape mismatch");
            data.extend_from_slice(&t.data);
        }
        Self {
            shape: [data.len() / (c * h * w), c, h, w],
            data,
        }
    }
}

/// Channel-wise concatenation of two batches with identical batch and spatial dims.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let [na, ca, ha, wa] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    assert_eq!((na, ha, wa), (nb, hb, wb), "concat: batch/spatial mismatch");
    let mut out = Tensor::zeros([na, ca + cb, ha, wa]);
    for n in 0..na {
        let dst = out.sample_mut(n);
        let split = a.sample_len();
        dst[..split].copy_from_slice(a.sample(n));
        dst[split..].copy_from_slice(b.sample(n));
    }
    out
}

/// Splits a gradient produced for [`concat_channels`] back into its two parts.
pub fn split_channels<T: Scalar>(g: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = g.shape();
    assert!(first <= c);
    let mut a = Tensor::zeros([n, first, h, w]);
    let mut b = Tensor::zeros([n, c - first, h, w]);
    let split = first * h * w;
    for i in 0..n {
        let src = g.sample(i);
        a.sample_mut(i).copy_from_slice(&src[..split]);
        b.sample_mut(i).copy_from_slice(&src[split..]);
    }
    (a, b)
}

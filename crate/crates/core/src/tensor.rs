//! Dense five-axis tensors laid out as `(N, D, H, W, C)` with channels
//! contiguous.
//!
//! The flat index of `(n, d, h, w, c)` is
//! `(((n * D + d) * H + h) * W + w) * C + c`.

use std::fmt;
use std::io::{Read, Write};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};
use crate::norm::NormPartition;

/// Element type tag used by the binary blob format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u64 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_tag(tag: u64) -> Option<Self> {
        match tag {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating point element type. Implemented for `f32` and `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    const DTYPE: DType;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion to f64")
    }

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    /// `c = alpha * a * b + beta * c` on strided row/column layouts.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );
}

fn max_offset(rows: usize, cols: usize, strides: (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    assert!(strides.0 >= 0 && strides.1 >= 0, "negative strides unsupported");
    (rows - 1) * strides.0 as usize + (cols - 1) * strides.1 as usize
}

macro_rules! impl_real {
    ($ty:ty, $dtype:expr, $gemm:path) => {
        impl Real for $ty {
            const DTYPE: DType = $dtype;

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$ty>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$ty>()]);
                <$ty>::from_le_bytes(buf)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(k == 0 || max_offset(m, k, a_strides) < a.len());
                assert!(k == 0 || max_offset(k, n, b_strides) < b.len());
                assert!(max_offset(m, n, c_strides) < c.len());
                // SAFETY: every offset touched by the kernel is bounded by
                // the `max_offset` checks above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, DType::F32, matrixmultiply::sgemm);
impl_real!(f64, DType::F64, matrixmultiply::dgemm);

/// Extents of a five-axis tensor: batch, depth, height, width, channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape5 {
    n: usize,
    d: usize,
    h: usize,
    w: usize,
    c: usize,
}

impl Shape5 {
    pub fn new(n: usize, d: usize, h: usize, w: usize, c: usize) -> Result<Self> {
        let dims = [n, d, h, w, c];
        if dims.contains(&0) {
            return Err(Error::EmptyExtent(dims));
        }
        dims.iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or(Error::Size(dims))?;
        Ok(Self { n, d, h, w, c })
    }

    /// Shape `(1, 1, 1, 1, len)`, used for per-channel vectors.
    pub fn vector(len: usize) -> Result<Self> {
        Self::new(1, 1, 1, 1, len)
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn d(&self) -> usize {
        self.d
    }
    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }
    pub fn c(&self) -> usize {
        self.c
    }

    pub fn dims(&self) -> [usize; 5] {
        [self.n, self.d, self.h, self.w, self.c]
    }

    pub fn len(&self) -> usize {
        self.n * self.d * self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of spatial sites `D * H * W` per sample.
    pub fn spatial(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn with_channels(&self, c: usize) -> Result<Self> {
        Self::new(self.n, self.d, self.h, self.w, c)
    }

    pub fn flatten(&self, idx: [usize; 5]) -> usize {
        let [n, d, h, w, c] = idx;
        debug_assert!(n < self.n && d < self.d && h < self.h && w < self.w && c < self.c);
        (((n * self.d + d) * self.h + h) * self.w + w) * self.c + c
    }

    pub fn unflatten(&self, mut flat: usize) -> [usize; 5] {
        debug_assert!(flat < self.len());
        let c = flat % self.c;
        flat /= self.c;
        let w = flat % self.w;
        flat /= self.w;
        let h = flat % self.h;
        flat /= self.h;
        let d = flat % self.d;
        let n = flat / self.d;
        [n, d, h, w, c]
    }
}

impl fmt::Display for Shape5 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(N={}, D={}, H={}, W={}, C={})",
            self.n, self.d, self.h, self.w, self.c
        )
    }
}

/// Sums `values` by recursive halving. Rounding error grows with
/// `log2(len)` instead of `len`, and the result depends only on the order
/// of `values`.
pub fn pairwise_sum<T: Real>(values: &[T]) -> T {
    const BLOCK: usize = 64;
    if values.len() <= BLOCK {
        let mut acc = T::zero();
        for &v in values {
            acc += v;
        }
        acc
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

/// Dense tensor with a fixed channels-last layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor5<T = f64> {
    shape: Shape5,
    data: Vec<T>,
}

const BLOB_MAGIC: u64 = u64::from_le_bytes(*b"VNTENSR5");
const BLOB_VERSION: u64 = 1;
const BLOB_HEADER_LEN: usize = 8 * 8;

impl<T: Real> Tensor5<T> {
    pub fn zeros(shape: Shape5) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: Shape5, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape5, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Length {
                what: "tensor data",
                expected: shape.len(),
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor by evaluating `f` at every multi-index.
    pub fn from_fn(shape: Shape5, mut f: impl FnMut([usize; 5]) -> T) -> Self {
        let data = (0..shape.len()).map(|i| f(shape.unflatten(i))).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, idx: [usize; 5]) -> T {
        self.data[self.shape.flatten(idx)]
    }

    pub fn set(&mut self, idx: [usize; 5], value: T) {
        let i = self.shape.flatten(idx);
        self.data[i] = value;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn map_binary(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.map_binary(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.map_binary(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.map_binary(other, |a, b| a * b)
    }

    pub fn sum(&self) -> T {
        pairwise_sum(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn cast<U: Real>(&self) -> Tensor5<U> {
        Tensor5 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.as_f64()).expect("castable"))
                .collect(),
        }
    }

    pub fn expect_shape(&self, expected: Shape5) -> Result<()> {
        if self.shape != expected {
            return Err(Error::Shape {
                expected,
                got: self.shape,
            });
        }
        Ok(())
    }

    /// Per-set `(sum, count)` over the sets of `partition`.
    ///
    /// Each set is summed pairwise over its members in ascending flat index
    /// order, so results do not depend on the order sets are visited in.
    pub fn reduce_over(&self, partition: &NormPartition) -> Result<Vec<(T, usize)>> {
        partition.check_covers(self.shape)?;
        let mut scratch = Vec::new();
        Ok((0..partition.set_count())
            .map(|s| {
                scratch.clear();
                scratch.extend(partition.members(s).iter().map(|&i| self.data[i as usize]));
                (pairwise_sum(&scratch), scratch.len())
            })
            .collect())
    }

    /// One-pass variant of [`reduce_over`](Self::reduce_over) using
    /// Kahan-compensated per-set accumulators in memory order.
    pub fn reduce_over_streaming(&self, partition: &NormPartition) -> Result<Vec<(T, usize)>> {
        partition.check_covers(self.shape)?;
        let sets = partition.set_count();
        let mut sum = vec![T::zero(); sets];
        let mut comp = vec![T::zero(); sets];
        for (&v, &s) in self.data.iter().zip(partition.set_of()) {
            let s = s as usize;
            let y = v - comp[s];
            let t = sum[s] + y;
            comp[s] = (t - sum[s]) - y;
            sum[s] = t;
        }
        Ok(sum
            .into_iter()
            .enumerate()
            .map(|(s, v)| (v, partition.set_size(s)))
            .collect())
    }

    /// Serializes as an 8-word little-endian header
    /// `[magic, version, N, D, H, W, C, dtype]` followed by the raw data.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(BLOB_HEADER_LEN + self.data.len() * T::DTYPE.size());
        let dims = self.shape.dims();
        for word in [BLOB_MAGIC, BLOB_VERSION]
            .into_iter()
            .chain(dims.iter().map(|&d| d as u64))
            .chain(std::iter::once(T::DTYPE.tag()))
        {
            out.extend_from_slice(&word.to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn write_blob<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&self.to_blob())?;
        Ok(())
    }

    /// Reads one blob from `input`, consuming exactly its bytes.
    pub fn read_blob<R: Read>(mut input: R) -> Result<Self> {
        let mut header = [0u8; BLOB_HEADER_LEN];
        input
            .read_exact(&mut header)
            .map_err(|e| Error::Format(format!("truncated tensor header: {e}")))?;
        let word = |i: usize| {
            let mut b = [0u8; 8];
            b.copy_from_slice(&header[i * 8..i * 8 + 8]);
            u64::from_le_bytes(b)
        };
        if word(0) != BLOB_MAGIC {
            return Err(Error::Format("bad tensor magic".into()));
        }
        if word(1) != BLOB_VERSION {
            return Err(Error::Format(format!(
                "unsupported tensor blob version {}",
                word(1)
            )));
        }
        let mut dims = [0usize; 5];
        for (i, d) in dims.iter_mut().enumerate() {
            *d = usize::try_from(word(2 + i))
                .map_err(|_| Error::Format("tensor extent exceeds usize".into()))?;
        }
        let dtype = DType::from_tag(word(7))
            .ok_or_else(|| Error::Format(format!("unknown dtype tag {}", word(7))))?;
        if dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "dtype mismatch: blob holds {dtype:?}, expected {:?}",
                T::DTYPE
            )));
        }
        let shape = Shape5::new(dims[0], dims[1], dims[2], dims[3], dims[4])
            .map_err(|e| Error::Format(format!("bad tensor shape: {e}")))?;
        let bytes = shape
            .len()
            .checked_mul(dtype.size())
            .ok_or(Error::Size(dims))?;
        let mut raw = Vec::new();
        input.by_ref().take(bytes as u64).read_to_end(&mut raw)?;
        if raw.len() != bytes {
            return Err(Error::Format(format!(
                "truncated tensor data: {} of {bytes} bytes",
                raw.len()
            )));
        }
        let data = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
        Ok(Self { shape, data })
    }
}

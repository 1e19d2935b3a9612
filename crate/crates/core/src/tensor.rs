//! Dense row-major tensors and the GEMM kernel shared by every layer.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

/// Storage scalar. 32-bit unless the `f64` feature is enabled.
#[cfg(not(feature = "f64"))]
pub type Float = f32;
#[cfg(feature = "f64")]
pub type Float = f64;

/// Checkpoint dtype code of [`Float`].
#[cfg(not(feature = "f64"))]
pub const FLOAT_DTYPE: u8 = 1;
#[cfg(feature = "f64")]
pub const FLOAT_DTYPE: u8 = 2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("invalid shape {0:?}: dimensions must be positive")]
    InvalidShape(Vec<usize>),
    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("variable does not belong to this tape")]
    ForeignVariable,
    #[error("backward already ran on this tape; call zero_grad before running it again")]
    BackwardAlreadyRun,
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Float>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(TensorError::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Float>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: Float) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn scalar(value: Float) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// I.i.d. uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: Float, hi: Float, rng: &mut R) -> Result<Self> {
        let n = check_shape(shape)?;
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Float] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Float] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Float> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Elements per leading-dimension row.
    pub fn row_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    pub fn row(&self, i: usize) -> &[Float] {
        let r = self.row_len();
        &self.data[i * r..(i + 1) * r]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [Float] {
        let r = self.row_len();
        &mut self.data[i * r..(i + 1) * r]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", self.shape, shape),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&[Float]], item_shape: &[usize]) -> Result<Self> {
        let per = check_shape(item_shape)?;
        let mut data = Vec::with_capacity(per * items.len());
        for (i, it) in items.iter().enumerate() {
            if it.len() != per {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    detail: format!("item {i} has {} elements, expected {per}", it.len()),
                });
            }
            data.extend_from_slice(it);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(item_shape);
        Tensor::new(shape, data)
    }

    /// Concatenate along the leading axis.
    pub fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Self> {
        if a.shape[1..] != b.shape[1..] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                detail: format!("{:?} vs {:?}", a.shape, b.shape),
            });
        }
        let mut shape = a.shape.clone();
        shape[0] += b.shape[0];
        let mut data = Vec::with_capacity(a.len() + b.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor::new(shape, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean of all entries, accumulated in f64.
    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Worker threads used by row-parallel GEMMs. 1 means strictly sequential.
///
/// Row blocks are independent, so results are bitwise identical for any
/// thread count; the setting only trades wall time.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

/// Strided matrix view description for [`gemm`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [Float],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn rows(data: &'a [Float], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [Float], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }
}

/// `c (m x n, row-major) = a (m x k) * b (k x n) + beta * c`, accumulated
/// in f64 whatever the storage type.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, beta: Float, c: &mut [Float]) {
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let max_index = |mr: &MatRef<'_>, r: usize, cc: usize| (r - 1) * mr.row_stride + (cc - 1) * mr.col_stride;
    if k > 0 {
        assert!(max_index(&a, m, k) < a.data.len());
        assert!(max_index(&b, k, n) < b.data.len());
    }
    let a64 = widen(a.data);
    let b64 = widen(b.data);
    let mut c64: Vec<f64> = if beta == 0.0 { vec![0.0; c.len()] } else { widen(c).into_owned() };
    let threads = threads();
    let chunk_rows = if threads > 1 && m >= 64 { m.div_ceil(threads) } else { m };
    // SAFETY: bounds asserted above; each chunk writes a disjoint row range of `c64`.
    let run = |row0: usize, rows: usize, out: &mut [f64]| unsafe {
        matrixmultiply::dgemm(
            rows,
            k,
            n,
            1.0,
            a64.as_ptr().add(row0 * a.row_stride),
            a.row_stride as isize,
            a.col_stride as isize,
            b64.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta as f64,
            out.as_mut_ptr(),
            n as isize,
            1,
        )
    };
    if chunk_rows == m {
        run(0, m, &mut c64);
    } else {
        std::thread::scope(|s| {
            for (i, out) in c64.chunks_mut(chunk_rows * n).enumerate() {
                let rows = out.len() / n;
                let run = &run;
                s.spawn(move || run(i * chunk_rows, rows, out));
            }
        });
    }
    for (d, v) in c.iter_mut().zip(c64) {
        *d = v as Float;
    }
}

#[cfg(not(feature = "f64"))]
fn widen(x: &[Float]) -> std::borrow::Cow<'_, [f64]> {
    std::borrow::Cow::Owned(x.iter().map(|&v| v as f64).collect())
}

#[cfg(feature = "f64")]
fn widen(x: &[Float]) -> std::borrow::Cow<'_, [f64]> {
    std::borrow::Cow::Borrowed(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::DataLength { .. })
        ));
        assert!(matches!(Tensor::zeros(&[2, 0]), Err(TensorError::InvalidShape(_))));
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<Float> = (0..6).map(|v| v as Float).collect(); // 2x3
        let b: Vec<Float> = (0..12).map(|v| (v as Float) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, MatRef::rows(&a, 3), MatRef::rows(&b, 4), 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: Float = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // a^T (3x2) * a (2x3)
        let mut d = vec![0.0; 9];
        gemm(3, 2, 3, MatRef::transposed(&a, 3), MatRef::rows(&a, 3), 0.0, &mut d);
        for i in 0..3 {
            for j in 0..3 {
                let want: Float = (0..2).map(|p| a[p * 3 + i] * a[p * 3 + j]).sum();
                assert_eq!(d[i * 3 + j], want);
            }
        }
    }

    #[test]
    fn threaded_gemm_is_bitwise_identical() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (m, k, n) = (257, 75, 19);
        let a = Tensor::uniform(&[m, k], -1.0, 1.0, &mut rng).unwrap();
        let b = Tensor::uniform(&[k, n], -1.0, 1.0, &mut rng).unwrap();
        let mut c1 = vec![0.0; m * n];
        let mut c4 = vec![0.0; m * n];
        set_threads(1);
        gemm(m, k, n, MatRef::rows(a.data(), k), MatRef::rows(b.data(), n), 0.0, &mut c1);
        set_threads(4);
        gemm(m, k, n, MatRef::rows(a.data(), k), MatRef::rows(b.data(), n), 0.0, &mut c4);
        set_threads(1);
        assert_eq!(c1, c4);
    }
}

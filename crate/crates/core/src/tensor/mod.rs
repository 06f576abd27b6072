//! Dense tensors and the differentiable primitives the network is built from.
//!
//! [`Tensor`] is a reference-counted, immutable, row-major buffer (NCHW for
//! 4-D) with an optional gradient slot. Every op records the operation that
//! produced its output, so [`autograd::backward`] can replay the graph in
//! reverse and populate gradients of all reachable `requires_grad` tensors.
//!
//! Ops are pure functions of their inputs; tensors never mutate after
//! creation except for the grad slot. Under debug assertions every op output
//! is scanned for non-finite values and an error is raised instead of
//! propagating NaNs silently.

pub mod autograd;
mod kernels;
#[cfg(test)]
mod op_tests;
pub mod ops;

use std::fmt;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use ops::Op;

/// Element type of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DType {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::format("ten", format!("unknown dtype code {other}"))),
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => write!(f, "f32"),
            DType::F64 => write!(f, "f64"),
        }
    }
}

/// Scalar element of a tensor: `f32` or `f64`.
pub trait Elem:
    num_traits::Float + fmt::Debug + fmt::Display + Send + Sync + 'static + std::iter::Sum
{
    const DTYPE: DType;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Elem for f32 {
    const DTYPE: DType = DType::F32;
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte f32"))
    }
}

impl Elem for f64 {
    const DTYPE: DType = DType::F64;
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte f64"))
    }
}

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(u64);

pub(crate) struct TensorInner<T: Elem> {
    id: TensorId,
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Mutex<Option<Vec<T>>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Dense n-dimensional array (row-major, NCHW for 4-D).
///
/// Cloning is cheap (reference count). The data buffer is immutable; only
/// the gradient slot can be written, by [`autograd::backward`] and
/// [`Tensor::zero_grad`].
pub struct Tensor<T: Elem> {
    inner: Arc<TensorInner<T>>,
}

impl<T: Elem> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Elem> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor<{}>(shape={:?}, requires_grad={})",
            T::DTYPE,
            self.shape(),
            self.requires_grad()
        )
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Elem> Tensor<T> {
    fn make(data: Vec<T>, shape: Vec<usize>, requires_grad: bool, op: Op<T>) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} implies {} values, got {}", shape, numel_of(&shape), data.len()),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero-sized dim in {shape:?}")));
        }
        Ok(Tensor {
            inner: Arc::new(TensorInner {
                id: TensorId(NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed)),
                shape,
                data,
                grad: Mutex::new(None),
                requires_grad,
                op,
            }),
        })
    }

    /// Leaf tensor that does not take gradients.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::make(data, shape.to_vec(), false, Op::Leaf)
    }

    /// Leaf tensor that accumulates gradients (a parameter or probed input).
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::make(data, shape.to_vec(), true, Op::Leaf)
    }

    /// Op output; `requires_grad` propagates from the inputs.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Op<T>,
        op_name: &'static str,
    ) -> Result<Self> {
        if cfg!(debug_assertions) && !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        Self::make(data, shape, requires_grad, op)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::make(vec![T::zero(); numel_of(shape)], shape.to_vec(), false, Op::Leaf)
            .expect("zeros: consistent by construction")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::make(
            vec![T::from_f64(value); numel_of(shape)],
            shape.to_vec(),
            false,
            Op::Leaf,
        )
        .expect("full: consistent by construction")
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        Self::make(vec![T::from_f64(value)], Vec::new(), false, Op::Leaf)
            .expect("scalar: consistent by construction")
    }

    pub fn from_f64_slice(values: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(values.iter().map(|&v| T::from_f64(v)).collect(), shape)
    }

    pub fn id(&self) -> TensorId {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Scalar value of a rank-0 / single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn op(&self) -> &Op<T> {
        &self.inner.op
    }

    /// Current accumulated gradient, if any backward has run.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock") = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.numel());
        let mut slot = self.inner.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi = *gi + *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Leaf copy of the data, cut from the graph.
    pub fn detach(&self) -> Tensor<T> {
        Self::make(self.inner.data.clone(), self.inner.shape.clone(), false, Op::Leaf)
            .expect("detach: consistent by construction")
    }

    /// Leaf copy converted to another element type.
    pub fn cast<U: Elem>(&self) -> Tensor<U> {
        Tensor::<U>::make(
            self.inner.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            self.inner.shape.clone(),
            false,
            Op::Leaf,
        )
        .expect("cast: consistent by construction")
    }
}

// ---------------------------------------------------------------------------
// ".ten" container: magic `MTLT`, version u32 LE, dtype code u8, ndim u8,
// dims u64 LE each, then raw little-endian values row-major.
// ---------------------------------------------------------------------------

pub const TEN_MAGIC: &[u8; 4] = b"MTLT";
pub const TEN_VERSION: u32 = 1;

pub fn write_ten<T: Elem, W: Write>(tensor: &Tensor<T>, mut out: W) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + tensor.numel() * T::DTYPE.size_bytes());
    buf.extend_from_slice(TEN_MAGIC);
    buf.extend_from_slice(&TEN_VERSION.to_le_bytes());
    buf.push(T::DTYPE.code());
    buf.push(tensor.shape().len() as u8);
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut buf);
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_exact_buf<R: Read>(input: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    input.read_exact(&mut buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format("ten", "truncated payload")
        } else {
            Error::Io(e)
        }
    })?;
    Ok(buf)
}

/// Header of a `.ten` stream: `(dtype, shape)`. Leaves the reader at the data.
pub fn read_ten_header<R: Read>(input: &mut R) -> Result<(DType, Vec<usize>)> {
    let head = read_exact_buf(input, 10)?;
    if &head[0..4] != TEN_MAGIC {
        return Err(Error::format("ten", "bad magic"));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != TEN_VERSION {
        return Err(Error::format("ten", format!("unsupported version {version}")));
    }
    let dtype = DType::from_code(head[8])?;
    let ndim = head[9] as usize;
    let dims = read_exact_buf(input, ndim * 8)?;
    let shape: Vec<usize> = dims
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    Ok((dtype, shape))
}

/// Reads a `.ten` stream; the stored dtype must match `T`.
pub fn read_ten<T: Elem, R: Read>(mut input: R) -> Result<Tensor<T>> {
    let (dtype, shape) = read_ten_header(&mut input)?;
    if dtype != T::DTYPE {
        return Err(Error::format(
            "ten",
            format!("stored dtype {dtype} does not match requested {}", T::DTYPE),
        ));
    }
    let n = numel_of(&shape);
    let raw = read_exact_buf(&mut input, n * dtype.size_bytes())?;
    let data: Vec<T> = raw
        .chunks_exact(dtype.size_bytes())
        .map(|c| T::read_le(c))
        .collect();
    Tensor::from_vec(data, &shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn shape_data_consistency_enforced() {
        assert!(Tensor::<f32>::from_vec(vec![1.0, 2.0], &[3]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![1.0, 2.0], &[2, 0]).is_err());
    }

    #[test]
    fn grad_slot_accumulates() {
        let t = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(t.grad().is_none());
        t.accumulate_grad(&[0.5, 0.5]);
        t.accumulate_grad(&[1.0, 2.0]);
        assert_eq!(t.grad().unwrap(), vec![1.5, 2.5]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn ten_round_trip_is_bit_exact() {
        let mut rng = Rng::new(17);
        let data: Vec<f32> = (0..24).map(|_| rng.uniform(-4.0, 4.0) as f32).collect();
        let t = Tensor::<f32>::from_vec(data.clone(), &[2, 3, 4]).unwrap();
        let mut bytes = Vec::new();
        write_ten(&t, &mut bytes).unwrap();
        let back = read_ten::<f32, _>(bytes.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(&data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn ten_rejects_dtype_mismatch_and_truncation() {
        let t = Tensor::<f64>::from_vec(vec![1.0; 6], &[2, 3]).unwrap();
        let mut bytes = Vec::new();
        write_ten(&t, &mut bytes).unwrap();
        assert!(read_ten::<f32, _>(bytes.as_slice()).is_err());
        assert!(read_ten::<f64, _>(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::<f64>::scalar(3.5);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 3.5);
    }
}

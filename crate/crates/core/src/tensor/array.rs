use std::io::{Read, Write};

use super::scalar::{DType, Scalar};
use super::TensorError;

const MAGIC: &[u8; 4] = b"DKTN";
const VERSION: u8 = 0x01;

/// Dense row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
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

    /// Single element of a scalar (or one-element) tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row-major flat index of a full coordinate.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Slice `[start, start + len)` along axis 1 of an `[N, C, ...]` tensor.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Self {
        let n = self.shape[0];
        let c = self.shape[1];
        let inner: usize = self.shape[2..].iter().product();
        let mut data = Vec::with_capacity(n * len * inner);
        for b in 0..n {
            let base = (b * c + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[1] = len;
        Self { shape, data }
    }

    /// Serialize in the DKTN dump format.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(8 + 8 * self.shape.len() + T::DTYPE.size() * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(T::DTYPE.code());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, TensorError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let bad = |msg: &str| TensorError::Format(msg.to_string());
        if bytes.len() < 7 || &bytes[..4] != MAGIC {
            return Err(bad("missing DKTN magic"));
        }
        if bytes[4] != VERSION {
            return Err(bad(&format!("unsupported version {}", bytes[4])));
        }
        let dtype = DType::from_code(bytes[5])
            .ok_or_else(|| bad(&format!("unknown dtype code {}", bytes[5])))?;
        if dtype != T::DTYPE {
            return Err(bad(&format!(
                "dtype mismatch: file has {dtype:?}, expected {:?}",
                T::DTYPE
            )));
        }
        let ndim = bytes[6] as usize;
        let mut pos = 7;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let chunk = bytes
                .get(pos..pos + 8)
                .ok_or_else(|| bad("truncated extents"))?;
            shape.push(u64::from_le_bytes(chunk.try_into().unwrap()) as usize);
            pos += 8;
        }
        let n: usize = shape.iter().product();
        let width = dtype.size();
        let payload = &bytes[pos..];
        if payload.len() != n * width {
            return Err(bad(&format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                n * width
            )));
        }
        let data = payload.chunks_exact(width).map(T::read_le).collect();
        Ok(Self { shape, data })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), TensorError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, TensorError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

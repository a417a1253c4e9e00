//! Dense row-major tensors of `i32` or `f32`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    I32,
    F32,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        4
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::I32 => "i32",
            DType::F32 => "f32",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dtype", content = "data", rename_all = "snake_case")]
pub enum TensorData {
    I32(Vec<i32>),
    F32(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    #[serde(flatten)]
    pub data: TensorData,
}

impl Tensor {
    pub fn zeros(shape: &[usize], dtype: DType) -> Tensor {
        let n = shape.iter().product();
        let data = match dtype {
            DType::I32 => TensorData::I32(vec![0; n]),
            DType::F32 => TensorData::F32(vec![0.0; n]),
        };
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_i32(shape: &[usize], data: Vec<i32>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor size");
        Tensor {
            shape: shape.to_vec(),
            data: TensorData::I32(data),
        }
    }

    pub fn from_f32(shape: &[usize], data: Vec<f32>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor size");
        Tensor {
            shape: shape.to_vec(),
            data: TensorData::F32(data),
        }
    }

    /// Uniform integers in `[lo, hi]`, or the same values as floats.
    pub fn random(shape: &[usize], dtype: DType, lo: i32, hi: i32, rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        match dtype {
            DType::I32 => Tensor::from_i32(shape, (0..n).map(|_| rng.gen_range(lo..=hi)).collect()),
            DType::F32 => Tensor::from_f32(
                shape,
                (0..n).map(|_| rng.gen_range(lo as f32..=hi as f32)).collect(),
            ),
        }
    }

    pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::I32(_) => DType::I32,
            TensorData::F32(_) => DType::F32,
        }
    }

    pub fn len(&self) -> usize {
        match &self.data {
            TensorData::I32(v) => v.len(),
            TensorData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    /// Element `i` widened to `f64`.
    pub fn get_f64(&self, i: usize) -> f64 {
        match &self.data {
            TensorData::I32(v) => v[i] as f64,
            TensorData::F32(v) => v[i] as f64,
        }
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (i, d)| acc * d + i)
    }

    /// Compares with `expected`: exact for `i32`, otherwise
    /// `|a - b| <= rtol * max(1, |b|)` per element. Returns the first
    /// mismatching flat index.
    pub fn first_mismatch(&self, expected: &Tensor, rtol: f64) -> Option<usize> {
        if self.shape != expected.shape || self.dtype() != expected.dtype() {
            return Some(0);
        }
        match (&self.data, &expected.data) {
            (TensorData::I32(a), TensorData::I32(b)) => a.iter().zip(b).position(|(x, y)| x != y),
            (TensorData::F32(a), TensorData::F32(b)) => a
                .iter()
                .zip(b)
                .position(|(x, y)| !close(*x as f64, *y as f64, rtol)),
            _ => Some(0),
        }
    }

    pub fn matches(&self, expected: &Tensor, rtol: f64) -> bool {
        self.first_mismatch(expected, rtol).is_none()
    }
}

pub fn close(actual: f64, expected: f64, rtol: f64) -> bool {
    if actual.is_nan() || expected.is_nan() {
        return actual.is_nan() && expected.is_nan();
    }
    (actual - expected).abs() <= rtol * expected.abs().max(1.0)
}

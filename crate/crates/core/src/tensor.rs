//! Dense row-major `f32` tensors and the `.nt` named-tensor file format.
//!
//! An `.nt` file is one JSON header line
//! `{"shape":[...],"dtype":"f32","layout":"row-major"}` followed by `\n` and the
//! raw little-endian `f32` payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Mark as a trainable parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Add `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient of length {} for tensor of length {}",
                g.len(),
                self.data.len()
            )));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Bit-level equality of shape and data.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn to_nt_bytes(&self) -> Vec<u8> {
        let header = NtHeader {
            shape: self.shape.clone(),
            dtype: "f32".into(),
            layout: "row-major".into(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.reserve(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_nt_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(".nt tensor", "header", "missing newline"))?;
        let value: serde_json::Value = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::format(".nt tensor", "header", e.to_string()))?;
        let shape = value
            .get("shape")
            .and_then(|s| s.as_array())
            .ok_or_else(|| Error::format(".nt tensor", "shape", "missing or not an array"))?
            .iter()
            .map(|d| d.as_u64().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::format(".nt tensor", "shape", "dims must be non-negative integers"))?;
        match value.get("dtype").and_then(|d| d.as_str()) {
            Some("f32") => {}
            Some(other) => {
                return Err(Error::format(
                    ".nt tensor",
                    "dtype",
                    format!("unsupported dtype {other:?}"),
                ))
            }
            None => return Err(Error::format(".nt tensor", "dtype", "missing")),
        }
        match value.get("layout").and_then(|d| d.as_str()) {
            Some("row-major") => {}
            Some(other) => {
                return Err(Error::format(
                    ".nt tensor",
                    "layout",
                    format!("unsupported layout {other:?}"),
                ))
            }
            None => return Err(Error::format(".nt tensor", "layout", "missing")),
        }
        let payload = &bytes[nl + 1..];
        let n: usize = shape.iter().product();
        if payload.len() != n * 4 {
            return Err(Error::format(
                ".nt tensor",
                "payload",
                format!("expected {} bytes, found {}", n * 4, payload.len()),
            ));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::from_vec(shape, data)
    }

    pub fn save_nt(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_nt_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_nt(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_nt_bytes(&bytes)
    }
}

#[derive(Serialize, Deserialize)]
struct NtHeader {
    shape: Vec<usize>,
    dtype: String,
    layout: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_exact() {
        let t = Tensor::from_vec(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let bytes = t.to_nt_bytes();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(
            std::str::from_utf8(&bytes[..nl]).unwrap(),
            r#"{"shape":[2,1],"dtype":"f32","layout":"row-major"}"#
        );
        assert_eq!(&bytes[nl + 1..nl + 5], &1.0f32.to_le_bytes());
    }

    #[test]
    fn bad_dtype_names_field() {
        let mut bytes = br#"{"shape":[1],"dtype":"f16","layout":"row-major"}"#.to_vec();
        bytes.push(b'\n');
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        let err = Tensor::from_nt_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { ref field, .. } if field == "dtype"), "{err}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut bytes = Tensor::zeros(&[4]).to_nt_bytes();
        bytes.pop();
        let err = Tensor::from_nt_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { ref field, .. } if field == "payload"));
    }

    #[test]
    fn shape_product_enforced() {
        assert!(Tensor::from_vec(vec![2, 2], vec![0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn nt_round_trip_is_bitwise(dims in proptest::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7F7F_FFFF)).collect();
            let t = Tensor::from_vec(dims, data).unwrap();
            let back = Tensor::from_nt_bytes(&t.to_nt_bytes()).unwrap();
            prop_assert!(t.bitwise_eq(&back));
        }
    }
}

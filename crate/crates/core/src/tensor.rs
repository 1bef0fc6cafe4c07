//! Dense row-major `f64` arrays.
//!
//! Axis conventions used across the crate:
//! - 2-D feature maps: `[channels, height, width]`
//! - spatiotemporal feature maps: `[channels, height, width, time]`
//! - volumes: `[x, y, z, frames]`

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::invalid(
                "Tensor::from_vec",
                format!("dims {dims:?} hold {n} elements but {} were given", data.len()),
            ));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
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

    /// Same data viewed with new dims.
    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                expected: self.dims,
                got: dims.to_vec(),
            });
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.dims.len());
        let mut off = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.dims).enumerate() {
            debug_assert!(ix < d, "index {ix} out of range on axis {i} (len {d})");
            off = off * d + ix;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn ensure_dims(&self, op: &'static str, expected: &[usize]) -> Result<()> {
        if self.dims != expected {
            return Err(Error::ShapeMismatch {
                op,
                expected: expected.to_vec(),
                got: self.dims.clone(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += other` elementwise; shapes must agree.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.dims, other.dims, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frame `t` of a `[C, H, W, T]` tensor, as `[C, H, W]`.
    pub fn time_slice(&self, t: usize) -> Tensor {
        let [c, h, w, len] = dims4(&self.dims);
        assert!(t < len);
        let plane = c * h * w;
        let mut out = Vec::with_capacity(plane);
        for p in 0..plane {
            out.push(self.data[p * len + t]);
        }
        Tensor {
            dims: vec![c, h, w],
            data: out,
        }
    }

    /// Stacks `[C, H, W]` frames along a new trailing time axis.
    pub fn stack_time(frames: &[Tensor]) -> Result<Tensor> {
        let first = frames
            .first()
            .ok_or_else(|| Error::invalid("stack_time", "no frames"))?;
        let plane = first.len();
        let len = frames.len();
        let mut data = vec![0.0; plane * len];
        for (t, f) in frames.iter().enumerate() {
            f.ensure_dims("stack_time", first.dims())?;
            for (p, &v) in f.data.iter().enumerate() {
                data[p * len + t] = v;
            }
        }
        let mut dims = first.dims.clone();
        dims.push(len);
        Ok(Tensor { dims, data })
    }

    /// Frames `range` of the trailing time axis.
    pub fn time_range(&self, range: std::ops::Range<usize>) -> Tensor {
        let len = *self.dims.last().expect("time_range on scalar tensor");
        assert!(range.end <= len && range.start <= range.end);
        let plane = self.data.len() / len;
        let n = range.len();
        let mut data = Vec::with_capacity(plane * n);
        for p in 0..plane {
            data.extend_from_slice(&self.data[p * len + range.start..p * len + range.end]);
        }
        let mut dims = self.dims.clone();
        *dims.last_mut().unwrap() = n;
        Tensor { dims, data }
    }
}

pub(crate) fn dims4(d: &[usize]) -> [usize; 4] {
    d.try_into()
        .unwrap_or_else(|_| panic!("expected 4-d tensor, got {d:?}"))
}

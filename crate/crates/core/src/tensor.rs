//! Dense weight containers, binary pruning masks and the reductions the
//! mask generators consume.
//!
//! Convolution weights are stored `[k][c][r][s]` row-major, so the `R×S`
//! kernel connecting input channel `c` to output channel `k` is one
//! contiguous block starting at `(k * C + c) * R * S`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a convolution weight: `k` output channels, `c` input channels,
/// `r × s` spatial kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvDims {
    pub k: usize,
    pub c: usize,
    pub r: usize,
    pub s: usize,
}

impl ConvDims {
    pub const fn new(k: usize, c: usize, r: usize, s: usize) -> Self {
        ConvDims { k, c, r, s }
    }

    pub const fn len(&self) -> usize {
        self.k * self.c * self.r * self.s
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of weights in one `R×S` kernel.
    pub const fn kernel_len(&self) -> usize {
        self.r * self.s
    }

    /// Number of `R×S` kernels in the layer.
    pub const fn kernel_count(&self) -> usize {
        self.k * self.c
    }

    /// Flat offset of the first weight of kernel `(k, c)`.
    pub const fn kernel_offset(&self, k: usize, c: usize) -> usize {
        (k * self.c + c) * self.kernel_len()
    }

    pub const fn index(&self, k: usize, c: usize, r: usize, s: usize) -> usize {
        self.kernel_offset(k, c) + r * self.s + s
    }

    pub fn to_vec(self) -> Vec<usize> {
        vec![self.k, self.c, self.r, self.s]
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 || self.c == 0 || self.r == 0 || self.s == 0 {
            return Err(Error::InvalidShape {
                dims: self.to_vec(),
                reason: "every dimension must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// Common view over the weight containers so masking and sparsity
/// accounting can treat conv and FC layers alike.
pub trait Tensor: Sized {
    fn shape(&self) -> Vec<usize>;
    fn values(&self) -> &[f64];
    /// Same shape, new payload. The payload length must match.
    fn with_values(&self, values: Vec<f64>) -> Self;
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// Weight tensor of a convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeight {
    dims: ConvDims,
    values: Vec<f64>,
}

impl ConvWeight {
    pub fn new(dims: ConvDims, values: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        if values.len() != dims.len() {
            return Err(Error::InvalidShape {
                dims: dims.to_vec(),
                reason: format!("expected {} values, got {}", dims.len(), values.len()),
            });
        }
        check_finite(&values)?;
        Ok(ConvWeight { dims, values })
    }

    pub fn zeros(dims: ConvDims) -> Result<Self> {
        Self::new(dims, vec![0.0; dims.len()])
    }

    pub fn dims(&self) -> ConvDims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// The `R×S` weights of kernel `(k, c)`.
    pub fn kernel(&self, k: usize, c: usize) -> &[f64] {
        let off = self.dims.kernel_offset(k, c);
        &self.values[off..off + self.dims.kernel_len()]
    }

    pub fn get(&self, k: usize, c: usize, r: usize, s: usize) -> f64 {
        self.values[self.dims.index(k, c, r, s)]
    }
}

impl Tensor for ConvWeight {
    fn shape(&self) -> Vec<usize> {
        self.dims.to_vec()
    }

    fn values(&self) -> &[f64] {
        &self.values
    }

    fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        ConvWeight {
            dims: self.dims,
            values,
        }
    }
}

/// Weight matrix of a fully connected layer. Rows index input neurons,
/// columns index output neurons, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FcWeight {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl FcWeight {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidShape {
                dims: vec![rows, cols],
                reason: "rows and cols must be at least 1".into(),
            });
        }
        if values.len() != rows * cols {
            return Err(Error::InvalidShape {
                dims: vec![rows, cols],
                reason: format!("expected {} values, got {}", rows * cols, values.len()),
            });
        }
        check_finite(&values)?;
        Ok(FcWeight { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }
}

impl Tensor for FcWeight {
    fn shape(&self) -> Vec<usize> {
        vec![self.rows, self.cols]
    }

    fn values(&self) -> &[f64] {
        &self.values
    }

    fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        FcWeight {
            rows: self.rows,
            cols: self.cols,
            values,
        }
    }
}

/// Binary keep/prune mask congruent with one weight tensor.
/// `true` keeps the weight, `false` prunes it.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PruneMask {
    dims: Vec<usize>,
    bits: Vec<bool>,
}

impl PruneMask {
    pub fn ones(dims: &[usize]) -> Self {
        PruneMask {
            dims: dims.to_vec(),
            bits: vec![true; dims.iter().product()],
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        PruneMask {
            dims: dims.to_vec(),
            bits: vec![false; dims.iter().product()],
        }
    }

    pub fn from_bits(dims: &[usize], bits: Vec<bool>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if bits.len() != len {
            return Err(Error::InvalidShape {
                dims: dims.to_vec(),
                reason: format!("expected {len} mask bits, got {}", bits.len()),
            });
        }
        Ok(PruneMask {
            dims: dims.to_vec(),
            bits,
        })
    }

    /// All-ones mask shaped like `w`.
    pub fn keep_all<T: Tensor>(w: &T) -> Self {
        Self::ones(&w.shape())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub(crate) fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn pruned(&self) -> usize {
        self.len() - self.kept()
    }

    /// Fraction of pruned positions.
    pub fn zero_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.pruned() as f64 / self.len() as f64
    }

    pub(crate) fn ensure_congruent(&self, dims: &[usize]) -> Result<()> {
        if self.dims != dims {
            return Err(Error::ShapeMismatch {
                expected: dims.to_vec(),
                found: self.dims.clone(),
            });
        }
        Ok(())
    }

    /// Zero every pruned position of `values` in place.
    pub(crate) fn zero_pruned(&self, values: &mut [f64]) {
        debug_assert_eq!(values.len(), self.bits.len());
        for (v, &keep) in values.iter_mut().zip(&self.bits) {
            if !keep {
                *v = 0.0;
            }
        }
    }
}

/// Largest weight magnitude of each `R×S` kernel, as a `K×C` matrix stored
/// row-major (entry `k * C + c`).
pub fn kernel_max(w: &ConvWeight) -> Vec<f64> {
    w.values()
        .chunks_exact(w.dims().kernel_len())
        .map(|kernel| kernel.iter().fold(0.0_f64, |m, v| m.max(v.abs())))
        .collect()
}

/// Masked copy of `w`. Pruned positions become `+0.0`; `w` is untouched.
pub fn apply_mask<T: Tensor>(w: &T, m: &PruneMask) -> Result<T> {
    m.ensure_congruent(&w.shape())?;
    let values = w
        .values()
        .iter()
        .zip(m.bits())
        .map(|(&v, &keep)| if keep { v } else { 0.0 })
        .collect();
    Ok(w.with_values(values))
}

/// Fraction of exactly-zero entries across all `tensors`.
///
/// Accidental zeros in unpruned weights are counted too, so a dense
/// network reports a small nonzero sparsity.
pub fn measured_sparsity<'a, I>(tensors: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let (zeros, total) = tensors.into_iter().fold((0usize, 0usize), |(z, t), vals| {
        (z + vals.iter().filter(|&&v| v == 0.0).count(), t + vals.len())
    });
    if total == 0 {
        return Err(Error::Empty("measured_sparsity needs at least one entry"));
    }
    Ok(zeros as f64 / total as f64)
}

//! Storage formats for layers whose mask no longer changes, and a
//! multiply-accumulate counter.
//!
//! * [`CkSparseLayer`] keeps only the surviving `R×S` kernels of a CK-pruned
//!   layer plus their `(k, c)` indices.
//! * [`WindowSparseLayer`] gives every kernel exactly `max_non_zero`
//!   `(position, value)` slots, so its size depends only on the layer shape
//!   and the cap. Unused slots hold position [`SENTINEL`].
//!
//! Both serialise little-endian: magic, `u32` version, then the fields in
//! declaration order.

use crate::container::Reader;
use crate::error::{Error, Result};
use crate::masking::is_kernel_uniform;
use crate::tensor::{ConvDims, ConvWeight, PruneMask, Tensor};
use crate::trainer::{ActShape, Layer, ToyModel};

pub const CK_MAGIC: &[u8; 4] = b"CKSP";
pub const WINDOW_MAGIC: &[u8; 4] = b"WNSP";
pub const VERSION: u32 = 1;
/// Position marking an unused window slot. Bounds `R·S` to 255.
pub const SENTINEL: u8 = 255;
/// Largest layer, in weights, a buffer may declare. A CK buffer with no
/// surviving kernels is tiny whatever its dims, so decoding must not trust
/// them blindly.
pub const MAX_LAYER_LEN: usize = 1 << 26;

fn dims_ok(dims: &ConvDims) -> Result<()> {
    if dims.k == 0 || dims.c == 0 || dims.r == 0 || dims.s == 0 {
        return Err(Error::format(format!("degenerate dims {:?}", dims.to_vec())));
    }
    let len = dims.k.checked_mul(dims.c).and_then(|n| n.checked_mul(dims.r)).and_then(|n| n.checked_mul(dims.s));
    if !len.is_some_and(|n| n <= MAX_LAYER_LEN) {
        return Err(Error::format(format!("dims {:?} exceed {MAX_LAYER_LEN} weights", dims.to_vec())));
    }
    Ok(())
}

fn read_dims(r: &mut Reader<'_>) -> Result<ConvDims> {
    let d = ConvDims::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    dims_ok(&d)?;
    Ok(d)
}

fn write_dims(out: &mut Vec<u8>, d: &ConvDims) {
    for v in [d.k, d.c, d.r, d.s] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
}

/// Surviving kernels of a CK-pruned conv layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CkSparseLayer {
    pub dims: ConvDims,
    /// `(k, c)` pairs, strictly ascending in `(c, k)` order.
    pub surviving_kernels: Vec<(usize, usize)>,
    /// One `R×S` block per surviving kernel, in list order.
    pub payload: Vec<f64>,
}

impl CkSparseLayer {
    pub fn validate(&self) -> Result<()> {
        dims_ok(&self.dims)?;
        let d = self.dims;
        for (i, &(k, c)) in self.surviving_kernels.iter().enumerate() {
            if k >= d.k || c >= d.c {
                return Err(Error::format(format!("kernel ({k}, {c}) out of range")));
            }
            if i > 0 {
                let (pk, pc) = self.surviving_kernels[i - 1];
                if (pc, pk) >= (c, k) {
                    return Err(Error::format(format!("kernel ({k}, {c}) out of order")));
                }
            }
        }
        if self.payload.len() != self.surviving_kernels.len() * d.kernel_len() {
            return Err(Error::format(format!(
                "payload has {} values for {} kernels of {}",
                self.payload.len(),
                self.surviving_kernels.len(),
                d.kernel_len()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + 8 * self.surviving_kernels.len() + 8 * self.payload.len());
        out.extend_from_slice(CK_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        write_dims(&mut out, &self.dims);
        out.extend_from_slice(&(self.surviving_kernels.len() as u32).to_le_bytes());
        for &(k, c) in &self.surviving_kernels {
            out.extend_from_slice(&(k as u32).to_le_bytes());
            out.extend_from_slice(&(c as u32).to_le_bytes());
        }
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(CK_MAGIC)?;
        r.expect_version(VERSION)?;
        let dims = read_dims(&mut r)?;
        let count = r.u32()? as usize;
        if count > dims.kernel_count() || count > r.remaining() / 8 {
            return Err(Error::format(format!("kernel count {count} exceeds layer or buffer")));
        }
        let surviving_kernels = (0..count)
            .map(|_| Ok((r.u32()? as usize, r.u32()? as usize)))
            .collect::<Result<Vec<_>>>()?;
        let n = count * dims.kernel_len();
        if n > r.remaining() / 8 || n * 8 != r.remaining() {
            return Err(Error::format(format!("payload of {n} values does not match {} bytes", r.remaining())));
        }
        let payload = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let layer = CkSparseLayer {
            dims,
            surviving_kernels,
            payload,
        };
        layer.validate()?;
        Ok(layer)
    }
}

/// Pack the kernels kept by a kernel-uniform mask.
pub fn compress_ck(w: &ConvWeight, m: &PruneMask) -> Result<CkSparseLayer> {
    m.ensure_congruent(&w.shape())?;
    let d = w.dims();
    if !is_kernel_uniform(m, d) {
        return Err(Error::format("mask is not kernel-uniform"));
    }
    let mut surviving_kernels = Vec::new();
    let mut payload = Vec::new();
    for c in 0..d.c {
        for k in 0..d.k {
            if m.bits()[d.kernel_offset(k, c)] {
                surviving_kernels.push((k, c));
                payload.extend_from_slice(w.kernel(k, c));
            }
        }
    }
    Ok(CkSparseLayer {
        dims: d,
        surviving_kernels,
        payload,
    })
}

/// Dense tensor with zeros everywhere but the stored kernels.
pub fn decompress_ck(s: &CkSparseLayer) -> Result<ConvWeight> {
    s.validate()?;
    let d = s.dims;
    let mut values = vec![0.0; d.len()];
    for (block, &(k, c)) in s.payload.chunks_exact(d.kernel_len()).zip(&s.surviving_kernels) {
        let off = d.kernel_offset(k, c);
        values[off..off + d.kernel_len()].copy_from_slice(block);
    }
    ConvWeight::new(d, values).map_err(|e| Error::format(e.to_string()))
}

/// One `(position, value)` slot of a window-sparse kernel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowSlot {
    pub position: u8,
    pub value: f64,
}

impl WindowSlot {
    pub const EMPTY: WindowSlot = WindowSlot {
        position: SENTINEL,
        value: 0.0,
    };
}

/// Window-pruned conv layer with a fixed `max_non_zero` slots per kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSparseLayer {
    pub dims: ConvDims,
    pub max_non_zero: usize,
    /// `K·C·max_non_zero` slots, kernels in `[k][c]` order.
    pub slots: Vec<WindowSlot>,
}

impl WindowSparseLayer {
    pub fn validate(&self) -> Result<()> {
        dims_ok(&self.dims)?;
        let d = self.dims;
        if d.kernel_len() > SENTINEL as usize {
            return Err(Error::format(format!("kernel of {} weights exceeds the slot range", d.kernel_len())));
        }
        if self.max_non_zero == 0 || self.max_non_zero > d.kernel_len() {
            return Err(Error::format(format!("max_non_zero {} outside [1, {}]", self.max_non_zero, d.kernel_len())));
        }
        if self.slots.len() != d.kernel_count() * self.max_non_zero {
            return Err(Error::format(format!("expected {} slots, found {}", d.kernel_count() * self.max_non_zero, self.slots.len())));
        }
        for (kc, kernel) in self.slots.chunks_exact(self.max_non_zero).enumerate() {
            let used = kernel.iter().take_while(|s| s.position != SENTINEL).count();
            if kernel[used..].iter().any(|s| s.position != SENTINEL) {
                return Err(Error::format(format!("kernel {kc}: slot after sentinel")));
            }
            for (i, s) in kernel[..used].iter().enumerate() {
                if s.position as usize >= d.kernel_len() {
                    return Err(Error::format(format!("kernel {kc}: position {} out of range", s.position)));
                }
                if i > 0 && kernel[i - 1].position >= s.position {
                    return Err(Error::format(format!("kernel {kc}: positions not ascending")));
                }
                if !s.value.is_finite() {
                    return Err(Error::format(format!("kernel {kc}: non-finite value")));
                }
            }
        }
        Ok(())
    }

    /// Serialised size; depends only on dims and `max_non_zero`.
    pub fn byte_len(dims: ConvDims, max_non_zero: usize) -> usize {
        4 + 4 + 16 + 4 + dims.kernel_count() * max_non_zero * 9
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::byte_len(self.dims, self.max_non_zero));
        out.extend_from_slice(WINDOW_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        write_dims(&mut out, &self.dims);
        out.extend_from_slice(&(self.max_non_zero as u32).to_le_bytes());
        for s in &self.slots {
            out.push(s.position);
            out.extend_from_slice(&s.value.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(WINDOW_MAGIC)?;
        r.expect_version(VERSION)?;
        let dims = read_dims(&mut r)?;
        let max_non_zero = r.u32()? as usize;
        let n = dims
            .kernel_count()
            .checked_mul(max_non_zero)
            .filter(|n| n.checked_mul(9) == Some(r.remaining()))
            .ok_or_else(|| Error::format("slot count does not match buffer"))?;
        let slots = (0..n)
            .map(|_| Ok(WindowSlot { position: r.u8()?, value: r.f64()? }))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let layer = WindowSparseLayer {
            dims,
            max_non_zero,
            slots,
        };
        layer.validate()?;
        Ok(layer)
    }
}

/// Pack every kernel into `max_non_zero` slots. Fails if a kernel keeps
/// more weights than that.
pub fn compress_window(w: &ConvWeight, m: &PruneMask, max_non_zero: usize) -> Result<WindowSparseLayer> {
    m.ensure_congruent(&w.shape())?;
    let d = w.dims();
    if d.kernel_len() > SENTINEL as usize {
        return Err(Error::format(format!("kernel of {} weights exceeds the slot range", d.kernel_len())));
    }
    if max_non_zero == 0 || max_non_zero > d.kernel_len() {
        return Err(Error::format(format!("max_non_zero {max_non_zero} outside [1, {}]", d.kernel_len())));
    }
    let mut slots = Vec::with_capacity(d.kernel_count() * max_non_zero);
    for (kc, (vals, bits)) in w
        .values()
        .chunks_exact(d.kernel_len())
        .zip(m.bits().chunks_exact(d.kernel_len()))
        .enumerate()
    {
        let start = slots.len();
        slots.extend(
            bits.iter()
                .zip(vals)
                .enumerate()
                .filter(|(_, (&keep, _))| keep)
                .map(|(pos, (_, &value))| WindowSlot {
                    position: pos as u8,
                    value,
                }),
        );
        let used = slots.len() - start;
        if used > max_non_zero {
            return Err(Error::format(format!(
                "kernel {kc} keeps {used} weights, more than {max_non_zero}"
            )));
        }
        slots.resize(start + max_non_zero, WindowSlot::EMPTY);
    }
    Ok(WindowSparseLayer {
        dims: d,
        max_non_zero,
        slots,
    })
}

pub fn decompress_window(s: &WindowSparseLayer) -> Result<ConvWeight> {
    s.validate()?;
    let d = s.dims;
    let mut values = vec![0.0; d.len()];
    for (kc, kernel) in s.slots.chunks_exact(s.max_non_zero).enumerate() {
        for slot in kernel.iter().take_while(|s| s.position != SENTINEL) {
            values[kc * d.kernel_len() + slot.position as usize] = slot.value;
        }
    }
    ConvWeight::new(d, values).map_err(|e| Error::format(e.to_string()))
}

/// Multiply-accumulate counts for one forward pass of a single sample.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MacCount {
    pub dense_macs: u64,
    pub sparse_macs: u64,
    /// `(layer index, dense, sparse)` for every parametric layer.
    pub per_layer: Vec<(usize, u64, u64)>,
}

/// Dense MACs are the standard counts (`K·C·R·S·H·W` per conv with
/// zero-padded borders, `rows·cols` per FC). Sparse MACs scale each layer by
/// its surviving-weight fraction, i.e. kept weights times output positions.
pub fn multiply_count(model: &ToyModel) -> MacCount {
    let shapes = model.shapes();
    let mut out = MacCount::default();
    for (i, layer) in model.layers().iter().enumerate() {
        let (dense, sparse) = match layer {
            Layer::Conv(p) => {
                let positions = match shapes[i + 1] {
                    ActShape::Map { h, w, .. } => (h * w) as u64,
                    ActShape::Flat(_) => 1,
                };
                (p.mask.len() as u64 * positions, p.mask.kept() as u64 * positions)
            }
            Layer::Fc(p) => (p.mask.len() as u64, p.mask.kept() as u64),
            _ => continue,
        };
        out.dense_macs += dense;
        out.sparse_macs += sparse;
        out.per_layer.push((i, dense, sparse));
    }
    out
}

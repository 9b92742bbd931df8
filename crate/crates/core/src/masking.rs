//! Mask generators for every pruning granularity.
//!
//! All generators prune by magnitude within a locale: a kernel for window
//! pruning, an input-channel column of kernels for CK pruning, the whole
//! matrix (or its tiles) for FC pruning. Ties are always broken towards the
//! lowest index, so the output is a deterministic function of the weights.

use crate::error::{Error, Result};
use crate::tensor::{apply_mask, kernel_max, ConvDims, ConvWeight, FcWeight, PruneMask, Tensor};

/// Slack added before flooring `size * threshold`, so thresholds such as
/// `5/9` or `0.29` land on the intended integer despite representation error.
const COUNT_EPS: f64 = 1e-9;

/// How many elements of one locale a threshold asks for.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocaleSelection {
    pub locale_size: usize,
    pub target_threshold: f64,
    pub max_non_zero: Option<usize>,
}

impl LocaleSelection {
    pub fn new(locale_size: usize, target_threshold: f64, max_non_zero: Option<usize>) -> Self {
        LocaleSelection {
            locale_size,
            target_threshold,
            max_non_zero,
        }
    }
}

fn floor_count(size: usize, threshold: f64) -> usize {
    let n = (size as f64 * threshold + COUNT_EPS).floor();
    if n <= 0.0 {
        0
    } else {
        (n as usize).min(size)
    }
}

/// Number of elements to prune from a locale:
/// `max(floor(size * threshold), size - max_non_zero)`, clamped to `[0, size]`.
pub fn prune_count(sel: &LocaleSelection) -> usize {
    let by_threshold = floor_count(sel.locale_size, sel.target_threshold);
    let by_cap = sel
        .max_non_zero
        .map_or(0, |cap| sel.locale_size.saturating_sub(cap));
    by_threshold.max(by_cap).min(sel.locale_size)
}

/// Indices of `scores` sorted ascending by `(score, index)`.
fn ascending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order
}

/// Prune the smallest-magnitude weights inside every `R×S` kernel.
pub fn window_mask(w: &ConvWeight, threshold: f64, max_non_zero: Option<usize>) -> PruneMask {
    let dims = w.dims();
    let n = prune_count(&LocaleSelection::new(dims.kernel_len(), threshold, max_non_zero));
    let mut mask = PruneMask::keep_all(w);
    let bits = mask.bits_mut();
    for (kernel, kbits) in w
        .values()
        .chunks_exact(dims.kernel_len())
        .zip(bits.chunks_exact_mut(dims.kernel_len()))
    {
        let mags: Vec<f64> = kernel.iter().map(|v| v.abs()).collect();
        for &i in &ascending(&mags)[..n] {
            kbits[i] = false;
        }
    }
    mask
}

/// Prune whole kernels, selected per input channel by their largest weight
/// magnitude.
///
/// Each input channel `c` ranks its `K` kernels by `kernel_max` and prunes
/// `floor(K * t)` of them. The layer as a whole prunes `floor(K * C * t)`
/// kernels: the few left over after the per-channel floors go to the
/// channels whose next-ranked kernel is smallest (ties to the lowest `c`).
/// With `max_non_zero` set, no channel keeps more than that many kernels.
pub fn ck_mask(w: &ConvWeight, threshold: f64, max_non_zero: Option<usize>) -> PruneMask {
    let dims = w.dims();
    let (k_count, c_count) = (dims.k, dims.c);
    let kmax = kernel_max(w);

    let orders: Vec<Vec<usize>> = (0..c_count)
        .map(|c| {
            let column: Vec<f64> = (0..k_count).map(|k| kmax[k * c_count + c]).collect();
            ascending(&column)
        })
        .collect();

    let base = floor_count(k_count, threshold);
    let total = floor_count(k_count * c_count, threshold);
    let mut per_column = vec![base; c_count];
    let extra = total.saturating_sub(base * c_count);
    if extra > 0 && base < k_count {
        let next: Vec<f64> = orders
            .iter()
            .enumerate()
            .map(|(c, order)| kmax[order[base] * c_count + c])
            .collect();
        for &c in &ascending(&next)[..extra] {
            per_column[c] += 1;
        }
    }

    let cap = max_non_zero.map_or(0, |m| k_count.saturating_sub(m));
    let mut mask = PruneMask::keep_all(w);
    let bits = mask.bits_mut();
    let klen = dims.kernel_len();
    for (c, order) in orders.iter().enumerate() {
        let n = per_column[c].max(cap).min(k_count);
        for &k in &order[..n] {
            let off = dims.kernel_offset(k, c);
            bits[off..off + klen].fill(false);
        }
    }
    mask
}

/// Window pruning at `threshold * window_fraction`, then whole kernels
/// removed in ascending order of their post-window `kernel_max` until the
/// layer's mask sparsity reaches `threshold`.
///
/// A kernel is never removed if it is the last one with survivors in its
/// input channel. A window fraction of exactly 1 is plain window pruning and
/// exactly 0 is plain CK pruning. `max_non_zero` only caps the window phase.
pub fn combined_mask(
    w: &ConvWeight,
    threshold: f64,
    window_fraction: f64,
    max_non_zero: Option<usize>,
) -> PruneMask {
    if window_fraction >= 1.0 {
        return window_mask(w, threshold, max_non_zero);
    }
    if window_fraction <= 0.0 {
        return ck_mask(w, threshold, None);
    }
    let dims = w.dims();
    let mut mask = window_mask(w, threshold * window_fraction, max_non_zero);
    let windowed = apply_mask(w, &mask).expect("window mask matches its tensor");
    let kmax = kernel_max(&windowed);

    let total = dims.len();
    let target = (threshold * total as f64 - COUNT_EPS).ceil().max(0.0) as usize;
    let mut zeros = mask.pruned();
    let klen = dims.kernel_len();
    let bits = mask.bits_mut();
    let survivors = |bits: &[bool], kc: usize| bits[kc * klen..(kc + 1) * klen].iter().filter(|&&b| b).count();

    let mut alive = vec![0usize; dims.c];
    for kc in 0..dims.kernel_count() {
        if survivors(bits, kc) > 0 {
            alive[kc % dims.c] += 1;
        }
    }

    for kc in ascending(&kmax) {
        if zeros >= target {
            break;
        }
        let c = kc % dims.c;
        let live = survivors(bits, kc);
        if live == 0 || alive[c] <= 1 {
            continue;
        }
        bits[kc * klen..(kc + 1) * klen].fill(false);
        zeros += live;
        alive[c] -= 1;
    }
    mask
}

/// Fine FC pruning without the column-coverage repair.
pub fn fc_fine_mask_unrepaired(w: &FcWeight, threshold: f64) -> PruneMask {
    let n = floor_count(w.values().len(), threshold);
    let mags: Vec<f64> = w.values().iter().map(|v| v.abs()).collect();
    let mut mask = PruneMask::keep_all(w);
    let bits = mask.bits_mut();
    for &i in &ascending(&mags)[..n] {
        bits[i] = false;
    }
    mask
}

/// Prune the smallest-magnitude weights across the whole FC matrix, then
/// restore coverage of every output column.
pub fn fc_fine_mask(w: &FcWeight, threshold: f64) -> PruneMask {
    let mask = fc_fine_mask_unrepaired(w, threshold);
    ensure_column_coverage(&mask, w).expect("mask generated from w")
}

/// Block FC pruning without the column-coverage repair.
pub fn fc_block_mask_unrepaired(w: &FcWeight, threshold: f64, block: usize) -> Result<PruneMask> {
    if !(1..=4).contains(&block) {
        return Err(Error::config(format!("FC block size must lie in [1, 4], got {block}")));
    }
    let (rows, cols) = (w.rows(), w.cols());
    let tile_rows = rows.div_ceil(block);
    let tile_cols = cols.div_ceil(block);
    let tile_of = |i: usize, j: usize| (i / block) * tile_cols + j / block;

    let mut sums = vec![0.0; tile_rows * tile_cols];
    for i in 0..rows {
        for j in 0..cols {
            sums[tile_of(i, j)] += w.get(i, j).abs();
        }
    }
    let n = floor_count(sums.len(), threshold);
    let mut pruned = vec![false; sums.len()];
    for &t in &ascending(&sums)[..n] {
        pruned[t] = true;
    }

    let mut mask = PruneMask::keep_all(w);
    let bits = mask.bits_mut();
    for i in 0..rows {
        for j in 0..cols {
            if pruned[tile_of(i, j)] {
                bits[i * cols + j] = false;
            }
        }
    }
    Ok(mask)
}

/// Prune whole `block × block` tiles by the sum of their weight magnitudes.
/// Tiles on a ragged edge are smaller and scored by their actual sum.
pub fn fc_block_mask(w: &FcWeight, threshold: f64, block: usize) -> Result<PruneMask> {
    let mask = fc_block_mask_unrepaired(w, threshold, block)?;
    ensure_column_coverage(&mask, w)
}

/// Output channels of a conv mask whose kernels are all pruned.
pub fn dead_channels(conv_mask: &PruneMask) -> Result<Vec<usize>> {
    let dims = conv_mask.dims();
    if dims.len() != 4 {
        return Err(Error::InvalidShape {
            dims: dims.to_vec(),
            reason: "expected a [k][c][r][s] conv mask".into(),
        });
    }
    let per_channel = dims[1] * dims[2] * dims[3];
    Ok(conv_mask
        .bits()
        .chunks_exact(per_channel)
        .enumerate()
        .filter(|(_, bits)| bits.iter().all(|&b| !b))
        .map(|(k, _)| k)
        .collect())
}

/// FC mask zeroing the input rows fed by output channels of the last conv
/// layer whose kernels are all pruned. Row `k * neurons_per_channel + n`
/// carries neuron `n` of channel `k`.
pub fn conv_driven_fc_elimination(
    last_conv_mask: &PruneMask,
    fc: &FcWeight,
    neurons_per_channel: usize,
) -> Result<PruneMask> {
    let dead = dead_channels(last_conv_mask)?;
    let k_count = last_conv_mask.dims()[0];
    if fc.rows() != k_count * neurons_per_channel {
        return Err(Error::ShapeMismatch {
            expected: vec![k_count * neurons_per_channel, fc.cols()],
            found: fc.shape(),
        });
    }
    let cols = fc.cols();
    let mut mask = PruneMask::keep_all(fc);
    let bits = mask.bits_mut();
    for k in dead {
        let start = k * neurons_per_channel * cols;
        bits[start..start + neurons_per_channel * cols].fill(false);
    }
    Ok(mask)
}

fn require_matrix(m: &PruneMask) -> Result<(usize, usize)> {
    match *m.dims() {
        [rows, cols] => Ok((rows, cols)),
        _ => Err(Error::InvalidShape {
            dims: m.dims().to_vec(),
            reason: "expected a [rows][cols] FC mask".into(),
        }),
    }
}

/// Columns of an FC mask with no surviving entry.
pub fn column_coverage_violations(m: &PruneMask) -> Result<Vec<usize>> {
    let (rows, cols) = require_matrix(m)?;
    Ok((0..cols)
        .filter(|&j| (0..rows).all(|i| !m.bits()[i * cols + j]))
        .collect())
}

/// Restore the largest-magnitude entry (lowest row on ties) of every column
/// that has no surviving entry. Other bits are unchanged.
pub fn ensure_column_coverage(m: &PruneMask, w: &FcWeight) -> Result<PruneMask> {
    m.ensure_congruent(&w.shape())?;
    let cols = w.cols();
    let mut out = m.clone();
    for j in column_coverage_violations(m)? {
        let best = (0..w.rows())
            .reduce(|best, i| if w.get(i, j).abs() > w.get(best, j).abs() { i } else { best })
            .expect("rows >= 1");
        out.bits_mut()[best * cols + j] = true;
    }
    Ok(out)
}

/// Bitwise AND: a position pruned in either mask stays pruned.
pub fn monotone_and(prev: &PruneMask, next: &PruneMask) -> Result<PruneMask> {
    prev.ensure_congruent(next.dims())?;
    let bits = prev.bits().iter().zip(next.bits()).map(|(&a, &b)| a && b).collect();
    PruneMask::from_bits(prev.dims(), bits)
}

/// Whether every `R×S` kernel of a conv mask is either fully kept or fully
/// pruned.
pub fn is_kernel_uniform(m: &PruneMask, dims: ConvDims) -> bool {
    m.dims() == dims.to_vec().as_slice()
        && m
            .bits()
            .chunks_exact(dims.kernel_len())
            .all(|k| k.iter().all(|&b| b == k[0]))
}

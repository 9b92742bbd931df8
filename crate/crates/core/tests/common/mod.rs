//! Independent reference implementations used as test oracles.
//!
//! Mask oracles decide every bit by counting how many competitors rank
//! before it (score, then index), so they share no sorting code with the
//! library. The reference forward pass is a direct loop transcription of
//! the layer math.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sparsetrain::tensor::{ConvDims, ConvWeight, FcWeight, PruneMask};
use sparsetrain::trainer::{ActShape, Layer, Params, ToyModel};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Values that are either continuous or drawn from a coarse grid, so ties
/// and exact zeros show up often.
pub fn values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    if rng.random_bool(0.5) {
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    } else {
        (0..n).map(|_| f64::from(rng.random_range(-4i32..=4)) * 0.5).collect()
    }
}

/// Largest `n ≤ size` with `n ≤ size·t` (up to 1e-9 representation slack).
pub fn count(size: usize, t: f64) -> usize {
    (0..=size).rev().find(|&n| n as f64 <= size as f64 * t + 1e-9).unwrap_or(0)
}

pub fn capped(size: usize, t: f64, cap: Option<usize>) -> usize {
    let by_cap = cap.map_or(0, |m| size.saturating_sub(m));
    count(size, t).max(by_cap).min(size)
}

/// Position of `i` in ascending (score, index) order.
pub fn rank(scores: &[f64], i: usize) -> usize {
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s < scores[i] || (s == scores[i] && j < i))
        .count()
}

pub fn oracle_window(w: &[f64], d: ConvDims, t: f64, cap: Option<usize>) -> Vec<bool> {
    let klen = d.r * d.s;
    let n = capped(klen, t, cap);
    let mut out = Vec::with_capacity(w.len());
    for kernel in w.chunks(klen) {
        let mags: Vec<f64> = kernel.iter().map(|v| v.abs()).collect();
        out.extend((0..klen).map(|i| rank(&mags, i) >= n));
    }
    out
}

/// `[k][c]` max |w| of each kernel.
pub fn kmax(w: &[f64], d: ConvDims) -> Vec<f64> {
    w.chunks(d.r * d.s)
        .map(|k| k.iter().fold(0.0f64, |m, v| if v.abs() > m { v.abs() } else { m }))
        .collect()
}

fn column(km: &[f64], d: ConvDims, c: usize) -> Vec<f64> {
    (0..d.k).map(|k| km[k * d.c + c]).collect()
}

/// Every column prunes `floor(K·t)` kernels; the layer-wide remainder of
/// `floor(K·C·t)` goes to the columns whose next candidate is smallest.
pub fn oracle_ck(w: &[f64], d: ConvDims, t: f64, cap: Option<usize>) -> Vec<bool> {
    let km = kmax(w, d);
    let base = count(d.k, t);
    let extra = count(d.k * d.c, t).saturating_sub(base * d.c);
    let mut per_column = vec![base; d.c];
    if extra > 0 {
        let next: Vec<f64> = (0..d.c)
            .map(|c| {
                let col = column(&km, d, c);
                let k = (0..d.k).find(|&k| rank(&col, k) == base).unwrap();
                col[k]
            })
            .collect();
        for c in 0..d.c {
            if rank(&next, c) < extra {
                per_column[c] += 1;
            }
        }
    }
    let floor = cap.map_or(0, |m| d.k.saturating_sub(m));
    let mut kernel_kept = vec![true; d.k * d.c];
    for c in 0..d.c {
        let col = column(&km, d, c);
        let n = per_column[c].max(floor).min(d.k);
        for k in 0..d.k {
            if rank(&col, k) < n {
                kernel_kept[k * d.c + c] = false;
            }
        }
    }
    expand(&kernel_kept, d)
}

fn expand(kernel_kept: &[bool], d: ConvDims) -> Vec<bool> {
    kernel_kept.iter().flat_map(|&b| std::iter::repeat_n(b, d.r * d.s)).collect()
}

/// Window phase at `t·wf`, then whole kernels in ascending post-window
/// kernel max until the layer holds `ceil(t·N)` zeros. Empty kernels and
/// the last live kernel of a column are passed over.
pub fn oracle_combined(w: &[f64], d: ConvDims, t: f64, wf: f64, cap: Option<usize>) -> Vec<bool> {
    if wf >= 1.0 {
        return oracle_window(w, d, t, cap);
    }
    if wf <= 0.0 {
        return oracle_ck(w, d, t, None);
    }
    let klen = d.r * d.s;
    let mut bits = oracle_window(w, d, t * wf, cap);
    let masked: Vec<f64> = w.iter().zip(&bits).map(|(&v, &b)| if b { v } else { 0.0 }).collect();
    let km = kmax(&masked, d);
    let total = w.len() as f64;
    let needed = (t * total - 1e-9).ceil().max(0.0) as usize;
    let live = |bits: &[bool], kc: usize| bits[kc * klen..(kc + 1) * klen].iter().filter(|&&b| b).count();

    let n = d.k * d.c;
    for r in 0..n {
        let zeros = bits.iter().filter(|&&b| !b).count();
        if zeros >= needed {
            break;
        }
        let kc = (0..n).find(|&i| rank(&km, i) == r).unwrap();
        let c = kc % d.c;
        let column_live = (0..d.k).filter(|&k| live(&bits, k * d.c + c) > 0).count();
        if live(&bits, kc) == 0 || column_live <= 1 {
            continue;
        }
        bits[kc * klen..(kc + 1) * klen].fill(false);
    }
    bits
}

/// For every column without a survivor, restore its largest |w| (first
/// row on ties).
pub fn oracle_coverage(bits: &mut [bool], w: &[f64], rows: usize, cols: usize) {
    for j in 0..cols {
        if (0..rows).any(|i| bits[i * cols + j]) {
            continue;
        }
        let col: Vec<f64> = (0..rows).map(|i| -w[i * cols + j].abs()).collect();
        let best = (0..rows).find(|&i| rank(&col, i) == 0).unwrap();
        bits[best * cols + j] = true;
    }
}

pub fn oracle_fc_fine(w: &[f64], rows: usize, cols: usize, t: f64) -> Vec<bool> {
    let mags: Vec<f64> = w.iter().map(|v| v.abs()).collect();
    let n = count(w.len(), t);
    let mut bits: Vec<bool> = (0..w.len()).map(|i| rank(&mags, i) >= n).collect();
    oracle_coverage(&mut bits, w, rows, cols);
    bits
}

pub fn oracle_fc_block(w: &[f64], rows: usize, cols: usize, t: f64, block: usize) -> Vec<bool> {
    let tr = rows.div_ceil(block);
    let tc = cols.div_ceil(block);
    let mut sums = Vec::new();
    for a in 0..tr {
        for b in 0..tc {
            let mut s = 0.0;
            for i in a * block..((a + 1) * block).min(rows) {
                for j in b * block..((b + 1) * block).min(cols) {
                    s += w[i * cols + j].abs();
                }
            }
            sums.push(s);
        }
    }
    let n = count(sums.len(), t);
    let mut bits = vec![true; w.len()];
    for i in 0..rows {
        for j in 0..cols {
            if rank(&sums, (i / block) * tc + j / block) < n {
                bits[i * cols + j] = false;
            }
        }
    }
    oracle_coverage(&mut bits, w, rows, cols);
    bits
}

/// Counts multiplies whose weight operand is nonzero.
#[derive(Default)]
pub struct Counter {
    pub multiplies: u64,
}

fn conv_ref(p: &Params<ConvWeight>, x: &[f64], c: usize, h: usize, w: usize, ctr: &mut Counter) -> Vec<f64> {
    let d = p.weight.dims();
    let (pr, ps) = ((d.r / 2) as isize, (d.s / 2) as isize);
    let mut out = vec![0.0; d.k * h * w];
    for k in 0..d.k {
        for y in 0..h {
            for z in 0..w {
                let mut acc = p.bias[k];
                for ci in 0..c {
                    for r in 0..d.r {
                        for s in 0..d.s {
                            let wv = p.weight.get(k, ci, r, s);
                            if wv != 0.0 {
                                ctr.multiplies += 1;
                            }
                            let iy = y as isize + r as isize - pr;
                            let iz = z as isize + s as isize - ps;
                            let xv = if iy < 0 || iz < 0 || iy >= h as isize || iz >= w as isize {
                                0.0
                            } else {
                                x[(ci * h + iy as usize) * w + iz as usize]
                            };
                            acc += wv * xv;
                        }
                    }
                }
                out[(k * h + y) * w + z] = acc;
            }
        }
    }
    out
}

/// Logits of a single sample, counting weight multiplies on the way. Zero
/// padding taps count: a padded convolution executes them.
pub fn reference_forward(model: &ToyModel, x: &[f64], ctr: &mut Counter) -> Vec<f64> {
    let mut shape = model.input_shape();
    let mut a = x.to_vec();
    for layer in model.layers() {
        match (layer, shape) {
            (Layer::Conv(p), ActShape::Map { c, h, w }) => {
                a = conv_ref(p, &a, c, h, w, ctr);
                shape = ActShape::Map { c: p.weight.dims().k, h, w };
            }
            (Layer::Relu, _) => a.iter_mut().for_each(|v| *v = v.max(0.0)),
            (Layer::AvgPool { size }, ActShape::Map { c, h, w }) => {
                let (oh, ow) = (h / size, w / size);
                let mut out = vec![0.0; c * oh * ow];
                for ci in 0..c {
                    for y in 0..oh {
                        for z in 0..ow {
                            let mut s = 0.0;
                            for dy in 0..*size {
                                for dz in 0..*size {
                                    s += a[(ci * h + y * size + dy) * w + z * size + dz];
                                }
                            }
                            out[(ci * oh + y) * ow + z] = s / (size * size) as f64;
                        }
                    }
                }
                a = out;
                shape = ActShape::Map { c, h: oh, w: ow };
            }
            (Layer::Flatten, s) => shape = ActShape::Flat(s.len()),
            (Layer::Fc(p), ActShape::Flat(_)) => {
                let (rows, cols) = (p.weight.rows(), p.weight.cols());
                let mut out = p.bias.clone();
                for j in 0..cols {
                    for i in 0..rows {
                        let wv = p.weight.get(i, j);
                        if wv != 0.0 {
                            ctr.multiplies += 1;
                        }
                        out[j] += a[i] * wv;
                    }
                }
                a = out;
                shape = ActShape::Flat(cols);
            }
            (l, s) => panic!("{} cannot take {s:?}", l.name()),
        }
    }
    a
}

/// A model with random weights, biases and (optionally) random masks,
/// masks already applied.
pub struct ModelShape {
    pub channels: usize,
    pub size: usize,
    pub conv3: usize,
    pub conv1: usize,
    pub pool: usize,
    pub classes: usize,
}

pub fn random_model(rng: &mut ChaCha8Rng, s: &ModelShape, keep: Option<f64>) -> ToyModel {
    let normal = Normal::new(0.0, 0.5).unwrap();
    let draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> { (0..n).map(|_| normal.sample(rng)).collect() };
    let d1 = ConvDims::new(s.conv3, s.channels, 3, 3);
    let d2 = ConvDims::new(s.conv1, s.conv3, 1, 1);
    let side = s.size / s.pool;
    let fc_in = s.conv1 * side * side;

    let conv = |d: ConvDims, rng: &mut ChaCha8Rng| {
        let mut p = Params::new(ConvWeight::new(d, draw(d.len(), rng)).unwrap(), draw(d.k, rng));
        if let Some(f) = keep {
            p.mask = PruneMask::from_bits(&d.to_vec(), (0..d.len()).map(|_| rng.random_bool(f)).collect()).unwrap();
        }
        p
    };
    let c1 = conv(d1, rng);
    let c2 = conv(d2, rng);
    let mut fc = Params::new(
        FcWeight::new(fc_in, s.classes, draw(fc_in * s.classes, rng)).unwrap(),
        draw(s.classes, rng),
    );
    if let Some(f) = keep {
        fc.mask = PruneMask::from_bits(&[fc_in, s.classes], (0..fc_in * s.classes).map(|_| rng.random_bool(f)).collect()).unwrap();
    }
    let mut model = ToyModel::from_layers(
        ActShape::Map { c: s.channels, h: s.size, w: s.size },
        vec![
            Layer::Conv(c1),
            Layer::Relu,
            Layer::Conv(c2),
            Layer::Relu,
            Layer::AvgPool { size: s.pool },
            Layer::Flatten,
            Layer::Fc(fc),
        ],
    )
    .unwrap();
    model.apply_masks();
    model
}

pub fn random_input(rng: &mut ChaCha8Rng, model: &ToyModel, batch: usize) -> (Vec<f64>, Vec<usize>) {
    let n = model.input_shape().len() * batch;
    let classes = model.n_classes();
    let x = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let y = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    (x, y)
}

//! Raw numeric kernels on flat `f64` slices.
//!
//! Shared by the typed operation API and the graph forward pass so both
//! compute bit-identical values. Feature maps are `[c][y][x]` flat;
//! convolution weights are `[m][n][dy][dx]` flat with `m` the input
//! channel and `n` the output channel.

#[inline]
pub(crate) fn chw(_c: usize, h: usize, w: usize, ch: usize, y: usize, x: usize) -> usize {
    (ch * h + y) * w + x
}

/// Same-padded cross-correlation with zero borders.
///
/// Feature maps here are wide and spatially tiny, so the kernel gathers
/// each pixel's padded receptive field into a contiguous row first and
/// reduces every output to one straight dot product; per-tap loop setup
/// would otherwise dominate on 1x1 and 2x2 maps.
pub(crate) fn conv2d(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    c_out: usize,
    k: usize,
) -> Vec<f64> {
    let r = (k / 2) as isize;
    let kk = k * k;
    let q = c_in * kk;
    let hw = h * w;

    // Patch rows ordered (m, dy, dx), zero where the window leaves the
    // image; the ordering fixes the accumulation order per output.
    let mut patches = vec![0.0; hw * q];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let row = &mut patches[(y as usize * w + x as usize) * q..][..q];
            let mut idx = 0;
            for m in 0..c_in {
                let plane = &input[m * hw..(m + 1) * hw];
                for dy in 0..k as isize {
                    let iy = y + dy - r;
                    for dx in 0..k as isize {
                        let ix = x + dx - r;
                        if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            row[idx] = plane[(iy * w as isize + ix) as usize];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }

    // Weights regrouped per output channel in the same (m, dy, dx) order.
    let mut wrows = vec![0.0; c_out * q];
    for m in 0..c_in {
        for n in 0..c_out {
            let src = &weights[(m * c_out + n) * kk..][..kk];
            wrows[n * q + m * kk..n * q + (m + 1) * kk].copy_from_slice(src);
        }
    }

    let mut out = vec![0.0; c_out * hw];
    for n in 0..c_out {
        let wrow = &wrows[n * q..(n + 1) * q];
        for i in 0..hw {
            let prow = &patches[i * q..(i + 1) * q];
            out[n * hw + i] = dot(wrow, prow);
        }
    }
    out
}

/// Four-lane unrolled dot product; independent accumulators break the
/// floating add latency chain, with a fixed summation order.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut rest = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        rest += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + rest
}

pub(crate) fn bias_chw(input: &[f64], bias: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(input.len());
    for (c, b) in bias.iter().enumerate() {
        for i in 0..h * w {
            out.push(input[c * h * w + i] + b);
        }
    }
    out
}

pub(crate) fn leaky_relu(input: &[f64], alpha: f64) -> Vec<f64> {
    input
        .iter()
        .map(|&v| if v >= 0.0 { v } else { alpha * v })
        .collect()
}

pub(crate) fn relu(input: &[f64]) -> Vec<f64> {
    input.iter().map(|&v| v.max(0.0)).collect()
}

/// 2x2 average pooling, stride 2.
pub(crate) fn avg_pool2(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                let mut acc = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += input[chw(c, h, w, ch, 2 * y + dy, 2 * x + dx)];
                    }
                }
                out[chw(c, ho, wo, ch, y, x)] = acc / 4.0;
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest2(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                out[chw(c, ho, wo, ch, y, x)] = input[chw(c, h, w, ch, y / 2, x / 2)];
            }
        }
    }
    out
}

pub(crate) fn linear(x: &[f64], weight: &[f64], bias: &[f64], out_dim: usize, in_dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_dim);
    for o in 0..out_dim {
        let mut acc = bias[o];
        for (i, xi) in x.iter().enumerate() {
            acc += weight[o * in_dim + i] * xi;
        }
        out.push(acc);
    }
    out
}

pub(crate) fn global_avg_pool(input: &[f64], c: usize, hw: usize) -> Vec<f64> {
    (0..c)
        .map(|ch| input[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect()
}

/// Eq. 1 style weight modulation: scale every weight by its input
/// channel's scale.
pub(crate) fn modulate(weights: &[f64], c_in: usize, c_out: usize, kk: usize, s: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(weights.len());
    for m in 0..c_in {
        for n in 0..c_out {
            let base = (m * c_out + n) * kk;
            for p in 0..kk {
                out.push(weights[base + p] * s[m]);
            }
        }
    }
    out
}

/// Per-output-channel sums of squares, the demodulation denominators
/// before the epsilon shift.
pub(crate) fn demod_sums(weights: &[f64], c_in: usize, c_out: usize, kk: usize) -> Vec<f64> {
    let mut sums = vec![0.0; c_out];
    for m in 0..c_in {
        for n in 0..c_out {
            let base = (m * c_out + n) * kk;
            for p in 0..kk {
                let v = weights[base + p];
                sums[n] += v * v;
            }
        }
    }
    sums
}

/// Eq. 2 style weight normalization.
pub(crate) fn demodulate(weights: &[f64], c_in: usize, c_out: usize, kk: usize, eps: f64) -> Vec<f64> {
    let sums = demod_sums(weights, c_in, c_out, kk);
    let denom: Vec<f64> = sums.iter().map(|s| (s + eps).sqrt()).collect();
    let mut out = Vec::with_capacity(weights.len());
    for m in 0..c_in {
        for n in 0..c_out {
            let base = (m * c_out + n) * kk;
            for p in 0..kk {
                out.push(weights[base + p] / denom[n]);
            }
        }
    }
    out
}

/// Foreground-masked compositing: convolution output on foreground cells,
/// untouched input elsewhere.
pub(crate) fn mask_mix(conv: &[f64], orig: &[f64], mask: &[bool], c: usize) -> Vec<f64> {
    let hw = mask.len();
    let mut out = Vec::with_capacity(conv.len());
    for ch in 0..c {
        for (i, &fg) in mask.iter().enumerate() {
            out.push(if fg { conv[ch * hw + i] } else { orig[ch * hw + i] });
        }
    }
    out
}

pub(crate) fn zero_background(input: &[f64], mask: &[bool], c: usize) -> Vec<f64> {
    let hw = mask.len();
    let mut out = Vec::with_capacity(input.len());
    for ch in 0..c {
        for (i, &fg) in mask.iter().enumerate() {
            out.push(if fg { input[ch * hw + i] } else { 0.0 });
        }
    }
    out
}

/// Channel means over foreground cells.
pub(crate) fn masked_mean(input: &[f64], mask: &[bool], c: usize) -> Vec<f64> {
    let hw = mask.len();
    let count = mask.iter().filter(|&&b| b).count() as f64;
    (0..c)
        .map(|ch| {
            let mut acc = 0.0;
            for (i, &fg) in mask.iter().enumerate() {
                if fg {
                    acc += input[ch * hw + i];
                }
            }
            acc / count
        })
        .collect()
}

/// Squared distance from a center vector to every pixel's feature column.
pub(crate) fn sq_dist_field(center: &[f64], f: &[f64], hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; hw];
    for (ch, cv) in center.iter().enumerate() {
        for (i, o) in out.iter_mut().enumerate() {
            let d = cv - f[ch * hw + i];
            *o += d * d;
        }
    }
    out
}

/// Numerically stabilized softmax; `active` optionally restricts the
/// normalization to a subset (inactive entries become exactly zero).
pub(crate) fn softmax(x: &[f64], active: Option<&[bool]>) -> Vec<f64> {
    let included = |i: usize| active.map_or(true, |a| a[i]);
    let mut max = f64::NEG_INFINITY;
    for (i, &v) in x.iter().enumerate() {
        if included(i) && v > max {
            max = v;
        }
    }
    let mut out = vec![0.0; x.len()];
    let mut sum = 0.0;
    for (i, &v) in x.iter().enumerate() {
        if included(i) {
            let e = (v - max).exp();
            out[i] = e;
            sum += e;
        }
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

pub(crate) fn sum_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn l1_mean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

pub(crate) fn clamp01(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.clamp(0.0, 1.0)).collect()
}

/// Max-pool downsampling of a boolean mask: a cell is foreground when any
/// covered pixel is.
pub(crate) fn downsample_mask_bits(bits: &[bool], h: usize, w: usize, factor: usize) -> Vec<bool> {
    let (ho, wo) = (h / factor, w / factor);
    let mut out = vec![false; ho * wo];
    for y in 0..h {
        for x in 0..w {
            if bits[y * w + x] {
                out[(y / factor) * wo + x / factor] = true;
            }
        }
    }
    out
}

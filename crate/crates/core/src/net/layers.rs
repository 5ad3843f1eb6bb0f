//! Forward and reverse-mode kernels for the fixed layer set of the autoencoder.
//!
//! All tensors describe a single image in channel-major layout
//! (`channel * height * width + y * width + x`). Gradient kernels accumulate
//! into caller-provided weight/bias buffers.

use super::Real;

/// `c = a * b + beta * c` where `a` is logically `m x k` and `b` is `k x n`.
///
/// `a_t` / `b_t` mean the operand is stored transposed (row-major `k x m` / `n x k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index matrixmultiply touches.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries whose forward ReLU output was not positive.
pub fn relu_backward<T: Real>(d: &mut [T], out: &[T]) {
    for (g, &o) in d.iter_mut().zip(out) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

fn im2col3x3<T: Real>(input: &[T], cin: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut cols = vec![T::zero(); cin * 9 * hw];
    for ci in 0..cin {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im3x3<T: Real>(cols: &[T], cin: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); cin * hw];
    for ci in 0..cin {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, &s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, &s)| *d += s),
                    }
                }
            }
        }
    }
    out
}

/// Convolutions with at most this many output channels skip im2col: a skinny GEMM
/// would spend its time writing and re-reading the column buffer.
const DIRECT_MAX_COUT: usize = 8;

/// Output positions along one axis that tap offset `d` (in `-1..=1`) can reach.
fn tap_range(d: isize, n: usize) -> std::ops::Range<usize> {
    match d {
        -1 => 1..n,
        0 => 0..n,
        _ => 0..n - 1,
    }
}

/// Calls `f(tap, output_row_range, input_row_range)` for every tap and valid output row.
fn for_each_tap_row(h: usize, w: usize, mut f: impl FnMut(usize, std::ops::Range<usize>, std::ops::Range<usize>)) {
    for ky in 0..3 {
        for kx in 0..3 {
            let (dy, dx) = (ky as isize - 1, kx as isize - 1);
            let xr = tap_range(dx, w);
            for y in tap_range(dy, h) {
                let sy = (y as isize + dy) as usize;
                let sx = (xr.start as isize + dx) as usize;
                f(
                    ky * 3 + kx,
                    y * w + xr.start..y * w + xr.end,
                    sy * w + sx..sy * w + sx + xr.len(),
                );
            }
        }
    }
}

fn dot_lanes<T: Real>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 16;
    let mut acc = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// 3x3 convolution, stride 1, zero padding 1. `weight` is `cout x (cin * 9)`.
///
/// Returns the output and the im2col buffer needed by the backward pass (empty for
/// narrow outputs, which are computed directly from the input).
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_forward<T: Real>(
    input: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: &[T],
    cout: usize,
) -> (Vec<T>, Vec<T>) {
    let hw = h * w;
    let mut out = vec![T::zero(); cout * hw];
    for (co, plane) in out.chunks_exact_mut(hw).enumerate() {
        plane.fill(bias[co]);
    }
    if cout <= DIRECT_MAX_COUT {
        for ci in 0..cin {
            let src = &input[ci * hw..][..hw];
            for (co, dst) in out.chunks_exact_mut(hw).enumerate() {
                let wk = &weight[(co * cin + ci) * 9..][..9];
                for_each_tap_row(h, w, |tap, o, i| {
                    let wv = wk[tap];
                    dst[o].iter_mut().zip(&src[i]).for_each(|(d, &s)| *d += wv * s);
                });
            }
        }
        return (out, Vec::new());
    }
    let cols = im2col3x3(input, cin, h, w);
    gemm(cout, cin * 9, hw, weight, false, &cols, false, T::one(), &mut out);
    (out, cols)
}

/// Accumulates weight/bias gradients and optionally returns the input gradient.
///
/// `cols` is the buffer returned by [`conv3x3_forward`]; when it is empty the
/// forward input is read instead.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward<T: Real>(
    d_out: &[T],
    cols: &[T],
    input: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    d_weight: &mut [T],
    d_bias: &mut [T],
    want_input: bool,
) -> Option<Vec<T>> {
    let hw = h * w;
    for (db, plane) in d_bias.iter_mut().zip(d_out.chunks_exact(hw)) {
        *db += plane.iter().copied().sum::<T>();
    }
    if cols.is_empty() {
        let mut d_in = want_input.then(|| vec![T::zero(); cin * hw]);
        for ci in 0..cin {
            let src = &input[ci * hw..][..hw];
            for (co, g) in d_out.chunks_exact(hw).enumerate() {
                let base = (co * cin + ci) * 9;
                for_each_tap_row(h, w, |tap, o, i| {
                    d_weight[base + tap] += dot_lanes(&g[o.clone()], &src[i.clone()]);
                    if let Some(d_in) = d_in.as_mut() {
                        let wv = weight[base + tap];
                        d_in[ci * hw..][i]
                            .iter_mut()
                            .zip(&g[o])
                            .for_each(|(d, &s)| *d += wv * s);
                    }
                });
            }
        }
        return d_in;
    }
    gemm(cout, hw, cin * 9, d_out, false, cols, true, T::one(), d_weight);
    if !want_input {
        return None;
    }
    let mut d_cols = vec![T::zero(); cin * 9 * hw];
    gemm(cin * 9, cout, hw, weight, true, d_out, false, T::zero(), &mut d_cols);
    Some(col2im3x3(&d_cols, cin, h, w))
}

/// 2x2 max pooling with stride 2 on even dimensions. Returns output and argmax offsets.
pub fn maxpool2_forward<T: Real>(input: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    debug_assert!(h.is_multiple_of(2) && w.is_multiple_of(2));
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * x + dx;
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Real>(d_out: &[T], arg: &[u32], input_len: usize) -> Vec<T> {
    let mut d_in = vec![T::zero(); input_len];
    for (&g, &i) in d_out.iter().zip(arg) {
        d_in[i as usize] += g;
    }
    d_in
}

/// Cached state of the spatial-attention branch.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    c: usize,
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
    arg_max: Vec<u32>,
}

/// Source taps of a x2 bilinear upsample (half-pixel centers, edge clamped).
fn upsample_taps(dst: usize, src: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// `upsample(maxpool(x) + avgpool(x))` with 2x2 windows, stride 2, ceil mode,
/// upsampled by 2 with bilinear interpolation and evaluated on the input grid.
pub fn attention_forward<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, AttentionCache) {
    let (ph, pw) = (h.div_ceil(2), w.div_ceil(2));
    let mut pooled = vec![T::zero(); c * ph * pw];
    let mut arg_max = vec![0u32; c * ph * pw];
    for ch in 0..c {
        let base = ch * h * w;
        for py in 0..ph {
            for px in 0..pw {
                let mut best = base + 2 * py * w + 2 * px;
                let mut sum = T::zero();
                let mut count = 0;
                for y in 2 * py..(2 * py + 2).min(h) {
                    for xx in 2 * px..(2 * px + 2).min(w) {
                        let i = base + y * w + xx;
                        sum += x[i];
                        count += 1;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                let o = (ch * ph + py) * pw + px;
                pooled[o] = x[best] + sum / T::from_usize(count).unwrap();
                arg_max[o] = best as u32;
            }
        }
    }
    let ty = upsample_taps(h, ph);
    let tx = upsample_taps(w, pw);
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let src = &pooled[ch * ph * pw..][..ph * pw];
        let dst = &mut out[ch * h * w..][..h * w];
        for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::from_f64(ly).unwrap();
            for (xx, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::from_f64(lx).unwrap();
                let top = src[y0 * pw + x0] * (T::one() - lx) + src[y0 * pw + x1] * lx;
                let bot = src[y1 * pw + x0] * (T::one() - lx) + src[y1 * pw + x1] * lx;
                dst[y * w + xx] = top * (T::one() - ly) + bot * ly;
            }
        }
    }
    (
        out,
        AttentionCache {
            c,
            h,
            w,
            ph,
            pw,
            arg_max,
        },
    )
}

/// Gradient of [`attention_forward`]'s output with respect to its input.
pub fn attention_backward<T: Real>(d_out: &[T], cache: &AttentionCache) -> Vec<T> {
    let AttentionCache { c, h, w, ph, pw, .. } = *cache;
    let ty = upsample_taps(h, ph);
    let tx = upsample_taps(w, pw);
    let mut d_pooled = vec![T::zero(); c * ph * pw];
    for ch in 0..c {
        let src = &d_out[ch * h * w..][..h * w];
        let dst = &mut d_pooled[ch * ph * pw..][..ph * pw];
        for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::from_f64(ly).unwrap();
            for (xx, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::from_f64(lx).unwrap();
                let g = src[y * w + xx];
                let (gt, gb) = (g * (T::one() - ly), g * ly);
                dst[y0 * pw + x0] += gt * (T::one() - lx);
                dst[y0 * pw + x1] += gt * lx;
                dst[y1 * pw + x0] += gb * (T::one() - lx);
                dst[y1 * pw + x1] += gb * lx;
            }
        }
    }
    let mut d_in = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let base = ch * h * w;
        for py in 0..ph {
            for px in 0..pw {
                let o = (ch * ph + py) * pw + px;
                let g = d_pooled[o];
                d_in[cache.arg_max[o] as usize] += g;
                let ys = 2 * py..(2 * py + 2).min(h);
                let xs = 2 * px..(2 * px + 2).min(w);
                let share = g / T::from_usize(ys.len() * xs.len()).unwrap();
                for y in ys {
                    for xx in xs.clone() {
                        d_in[base + y * w + xx] += share;
                    }
                }
            }
        }
    }
    d_in
}

/// Per-pixel dense layer: `weight` is `cout x cin`, input is `cin x pixels`.
pub fn linear_forward<T: Real>(x: &[T], cin: usize, pixels: usize, weight: &[T], bias: &[T], cout: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cout * pixels];
    for (co, row) in out.chunks_exact_mut(pixels).enumerate() {
        row.fill(bias[co]);
    }
    gemm(cout, cin, pixels, weight, false, x, false, T::one(), &mut out);
    out
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    d_out: &[T],
    x: &[T],
    cin: usize,
    pixels: usize,
    weight: &[T],
    cout: usize,
    d_weight: &mut [T],
    d_bias: &mut [T],
) -> Vec<T> {
    gemm(cout, pixels, cin, d_out, false, x, true, T::one(), d_weight);
    for (db, row) in d_bias.iter_mut().zip(d_out.chunks_exact(pixels)) {
        *db += row.iter().copied().sum::<T>();
    }
    let mut d_x = vec![T::zero(); cin * pixels];
    gemm(cin, cout, pixels, weight, true, d_out, false, T::zero(), &mut d_x);
    d_x
}

/// 2x2 transposed convolution with stride 2 (exact x2 upsampling).
///
/// `weight` is `cin x (cout * 4)` with taps ordered `co * 4 + dy * 2 + dx`.
pub fn deconv2x2_forward<T: Real>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: &[T],
    cout: usize,
) -> Vec<T> {
    let hw = h * w;
    let mut taps = vec![T::zero(); cout * 4 * hw];
    gemm(cout * 4, cin, hw, weight, true, x, false, T::zero(), &mut taps);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); cout * oh * ow];
    for co in 0..cout {
        let plane = &mut out[co * oh * ow..][..oh * ow];
        for dy in 0..2 {
            for dx in 0..2 {
                let src = &taps[(co * 4 + dy * 2 + dx) * hw..][..hw];
                for y in 0..h {
                    let row = &mut plane[(2 * y + dy) * ow..][..ow];
                    for xx in 0..w {
                        row[2 * xx + dx] = src[y * w + xx] + bias[co];
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn deconv2x2_backward<T: Real>(
    d_out: &[T],
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    d_weight: &mut [T],
    d_bias: &mut [T],
) -> Vec<T> {
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut d_taps = vec![T::zero(); cout * 4 * hw];
    for co in 0..cout {
        let plane = &d_out[co * oh * ow..][..oh * ow];
        d_bias[co] += plane.iter().copied().sum::<T>();
        for dy in 0..2 {
            for dx in 0..2 {
                let dst = &mut d_taps[(co * 4 + dy * 2 + dx) * hw..][..hw];
                for y in 0..h {
                    let row = &plane[(2 * y + dy) * ow..][..ow];
                    for xx in 0..w {
                        dst[y * w + xx] = row[2 * xx + dx];
                    }
                }
            }
        }
    }
    gemm(cin, hw, cout * 4, x, false, &d_taps, true, T::one(), d_weight);
    let mut d_x = vec![T::zero(); cin * hw];
    gemm(cin, cout * 4, hw, weight, false, &d_taps, false, T::zero(), &mut d_x);
    d_x
}

//! Raw numeric kernels behind the tape ops.
//!
//! All kernels take flat row-major slices plus explicit dimensions and are
//! deterministic: accumulation order is fixed by the loop structure, so
//! repeated runs are bit-identical. The hot inner loops run over the
//! fastest-varying axis as contiguous slice zips so they auto-vectorize.

use alloc::vec;
use alloc::vec::Vec;

/// Dot product with eight independent accumulators.
///
/// The lane split hides FP add latency; the combination order is fixed, so
/// the result is reproducible (it is not the same rounding as a naive
/// left-to-right sum, which is fine: nothing depends on that ordering).
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        acc[0] += xa[0] * xb[0];
        acc[1] += xa[1] * xb[1];
        acc[2] += xa[2] * xb[2];
        acc[3] += xa[3] * xb[3];
        acc[4] += xa[4] * xb[4];
        acc[5] += xa[5] * xb[5];
        acc[6] += xa[6] * xb[6];
        acc[7] += xa[7] * xb[7];
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (xa, xb) in ca.remainder().iter().zip(cb.remainder()) {
        s += xa * xb;
    }
    s
}

/// y += a * x, elementwise.
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// 2-D cross-correlation.
///
/// `input` is `[c_in, h, w]`, `kernel` is `[c_out, c_in, kh, kw]`,
/// `bias` (when given) is `[c_out]`. Zero padding on all sides. Returns the
/// `[c_out, oh, ow]` output; the caller has validated dimensions.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    c_out: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let oh = conv_out_dim(h, kh, stride, padding).unwrap();
    let ow = conv_out_dim(w, kw, stride, padding).unwrap();
    let mut out = vec![0.0; c_out * oh * ow];
    for co in 0..c_out {
        let out_plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        if let Some(b) = bias {
            out_plane.fill(b[co]);
        }
        for ci in 0..c_in {
            let in_plane = &input[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = kernel[((co * c_in + ci) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let in_row = &in_plane[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                        accumulate_row(out_row, in_row, wv, kx, stride, padding, w);
                    }
                }
            }
        }
    }
    out
}

/// out_row[ox] += wv * in_row[ox*stride + kx - padding] over the valid range.
fn accumulate_row(
    out_row: &mut [f64],
    in_row: &[f64],
    wv: f64,
    kx: usize,
    stride: usize,
    padding: usize,
    w: usize,
) {
    // Valid ox: 0 <= ox*stride + kx - padding < w.
    let lo = padding.saturating_sub(kx).div_ceil(stride).min(out_row.len());
    let hi = if w + padding > kx {
        ((w + padding - kx - 1) / stride + 1).min(out_row.len())
    } else {
        lo
    };
    if stride == 1 {
        let off = (lo + kx) as isize - padding as isize;
        axpy(
            &mut out_row[lo..hi],
            wv,
            &in_row[off as usize..off as usize + (hi - lo)],
        );
    } else {
        for ox in lo..hi {
            let ix = ox * stride + kx - padding;
            out_row[ox] += wv * in_row[ix];
        }
    }
}

/// Backward pass of [`conv2d_forward`].
///
/// Accumulates (does not overwrite) into whichever gradient buffers are
/// provided; each must already have the matching length.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    dout: &[f64],
    input: &[f64],
    kernel: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    mut dinput: Option<&mut [f64]>,
    mut dkernel: Option<&mut [f64]>,
    mut dbias: Option<&mut [f64]>,
) {
    let oh = conv_out_dim(h, kh, stride, padding).unwrap();
    let ow = conv_out_dim(w, kw, stride, padding).unwrap();
    for co in 0..c_out {
        let dout_plane = &dout[co * oh * ow..(co + 1) * oh * ow];
        if let Some(db) = dbias.as_deref_mut() {
            let mut s = 0.0;
            for &g in dout_plane {
                s += g;
            }
            db[co] += s;
        }
        for ci in 0..c_in {
            let in_plane = &input[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let kidx = ((co * c_in + ci) * kh + ky) * kw + kx;
                    let wv = kernel[kidx];
                    let mut dk_acc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let iy = iy as usize;
                        let dout_row = &dout_plane[oy * ow..(oy + 1) * ow];
                        let lo = padding.saturating_sub(kx).div_ceil(stride).min(ow);
                        let hi = if w + padding > kx {
                            ((w + padding - kx - 1) / stride + 1).min(ow)
                        } else {
                            lo
                        };
                        if dkernel.is_some() {
                            let in_row = &in_plane[iy * w..(iy + 1) * w];
                            if stride == 1 {
                                let off = lo + kx - padding;
                                dk_acc += dot(&dout_row[lo..hi], &in_row[off..off + (hi - lo)]);
                            } else {
                                for ox in lo..hi {
                                    dk_acc += dout_row[ox] * in_row[ox * stride + kx - padding];
                                }
                            }
                        }
                        if let Some(di) = dinput.as_deref_mut() {
                            let di_row = &mut di[ci * h * w + iy * w..ci * h * w + (iy + 1) * w];
                            if stride == 1 {
                                let off = lo + kx - padding;
                                axpy(&mut di_row[off..off + (hi - lo)], wv, &dout_row[lo..hi]);
                            } else {
                                for ox in lo..hi {
                                    di_row[ox * stride + kx - padding] += wv * dout_row[ox];
                                }
                            }
                        }
                    }
                    if let Some(dk) = dkernel.as_deref_mut() {
                        dk[kidx] += dk_acc;
                    }
                }
            }
        }
    }
}

/// Max pooling over non-overlapping `window x window` cells.
///
/// Cells sticking out past the high edge shrink to the in-bounds part
/// (equivalent to padding with negative infinity). Ties keep the lowest
/// linear input index. Returns the output and per-cell argmax as flat
/// indices into `input`.
pub fn max_pool2d_forward(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    window: usize,
) -> (Vec<f64>, Vec<u32>, usize, usize) {
    let oh = h.div_ceil(window);
    let ow = w.div_ceil(window);
    let mut out = vec![0.0; c * oh * ow];
    let mut arg = vec![0u32; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0u32;
                for ky in 0..window {
                    let iy = oy * window + ky;
                    if iy >= h {
                        break;
                    }
                    for kx in 0..window {
                        let ix = ox * window + kx;
                        if ix >= w {
                            break;
                        }
                        let idx = (ci * h + iy) * w + ix;
                        let v = input[idx];
                        if v > best {
                            best = v;
                            best_idx = idx as u32;
                        }
                    }
                }
                let o = (ci * oh + oy) * ow + ox;
                out[o] = best;
                arg[o] = best_idx;
            }
        }
    }
    (out, arg, oh, ow)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample2d_forward(input: &[f64], c: usize, h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            let in_row = &input[(ci * h + oy / factor) * w..(ci * h + oy / factor + 1) * w];
            let out_row = &mut out[(ci * oh + oy) * ow..(ci * oh + oy) * ow + ow];
            for (ox, o) in out_row.iter_mut().enumerate() {
                *o = in_row[ox / factor];
            }
        }
    }
    out
}

/// Backward pass of [`upsample2d_forward`]: sums each factor x factor block.
pub fn upsample2d_backward(
    dout: &[f64],
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
    dinput: &mut [f64],
) {
    let (oh, ow) = (h * factor, w * factor);
    for ci in 0..c {
        for oy in 0..oh {
            let dout_row = &dout[(ci * oh + oy) * ow..(ci * oh + oy) * ow + ow];
            let di_row = &mut dinput[(ci * h + oy / factor) * w..(ci * h + oy / factor + 1) * w];
            for (ox, g) in dout_row.iter().enumerate() {
                di_row[ox / factor] += g;
            }
        }
    }
}

/// Fully connected layer applied to each row: out = input . weight^T + bias.
///
/// `input` is `[rows, f_in]`, `weight` is `[f_out, f_in]`, `bias` `[f_out]`.
pub fn linear_forward(
    input: &[f64],
    rows: usize,
    f_in: usize,
    weight: &[f64],
    f_out: usize,
    bias: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; rows * f_out];
    for r in 0..rows {
        let in_row = &input[r * f_in..(r + 1) * f_in];
        let out_row = &mut out[r * f_out..(r + 1) * f_out];
        for (o, out_v) in out_row.iter_mut().enumerate() {
            *out_v = bias[o] + dot(in_row, &weight[o * f_in..(o + 1) * f_in]);
        }
    }
    out
}

/// Backward pass of [`linear_forward`]; accumulates into the given buffers.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    dout: &[f64],
    input: &[f64],
    weight: &[f64],
    rows: usize,
    f_in: usize,
    f_out: usize,
    mut dinput: Option<&mut [f64]>,
    mut dweight: Option<&mut [f64]>,
    mut dbias: Option<&mut [f64]>,
) {
    for r in 0..rows {
        let dout_row = &dout[r * f_out..(r + 1) * f_out];
        let in_row = &input[r * f_in..(r + 1) * f_in];
        if let Some(di) = dinput.as_deref_mut() {
            let di_row = &mut di[r * f_in..(r + 1) * f_in];
            for (o, &g) in dout_row.iter().enumerate() {
                axpy(di_row, g, &weight[o * f_in..(o + 1) * f_in]);
            }
        }
        if let Some(dw) = dweight.as_deref_mut() {
            for (o, &g) in dout_row.iter().enumerate() {
                axpy(&mut dw[o * f_in..(o + 1) * f_in], g, in_row);
            }
        }
        if let Some(db) = dbias.as_deref_mut() {
            for (o, &g) in dout_row.iter().enumerate() {
                db[o] += g;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference convolution: six explicit loops, no shortcuts.
    #[allow(clippy::too_many_arguments)]
    fn conv2d_oracle(
        input: &[f64],
        c_in: usize,
        h: usize,
        w: usize,
        kernel: &[f64],
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Vec<f64> {
        let oh = conv_out_dim(h, kh, stride, padding).unwrap();
        let ow = conv_out_dim(w, kw, stride, padding).unwrap();
        let mut out = vec![0.0; c_out * oh * ow];
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                    continue;
                                }
                                acc += input[(ci * h + iy as usize) * w + ix as usize]
                                    * kernel[((co * c_in + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn pseudo(vals: &mut [f64], seed: u64) {
        // Cheap deterministic filler, spread over roughly [-1, 1].
        let mut x = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
        for v in vals {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            *v = (x >> 11) as f64 / (1u64 << 52) as f64 - 1.0;
        }
    }

    #[test]
    fn conv_matches_loop_oracle_across_shapes() {
        let cases = [
            (1usize, 3usize, 3usize, 1usize, 3usize, 3usize, 1usize, 0usize),
            (2, 5, 5, 3, 3, 3, 1, 1),
            (3, 7, 6, 2, 5, 5, 1, 2),
            (2, 8, 8, 4, 5, 5, 2, 2),
            (1, 4, 9, 2, 3, 5, 2, 1),
            (2, 6, 6, 2, 2, 2, 2, 0),
        ];
        for (i, &(c_in, h, w, c_out, kh, kw, stride, padding)) in cases.iter().enumerate() {
            let mut input = vec![0.0; c_in * h * w];
            let mut kernel = vec![0.0; c_out * c_in * kh * kw];
            pseudo(&mut input, 17 + i as u64);
            pseudo(&mut kernel, 91 + i as u64);
            let got = conv2d_forward(
                &input, c_in, h, w, &kernel, c_out, kh, kw, None, stride, padding,
            );
            let want = conv2d_oracle(&input, c_in, h, w, &kernel, c_out, kh, kw, stride, padding);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "case {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_all_ones_times_two() {
        // 3x3 ones, single 1x1 kernel [2] -> all twos.
        let input = vec![1.0; 9];
        let out = conv2d_forward(&input, 1, 3, 3, &[2.0], 1, 1, 1, None, 1, 0);
        assert_eq!(out, vec![2.0; 9]);
    }

    #[test]
    fn conv_identity_kernel_recovers_input() {
        // 3x3 kernel with centre 1: with padding 1 this is the identity map.
        let input = vec![1.0, 2.0, 3.0, 4.0];
        let mut kernel = vec![0.0; 9];
        kernel[4] = 1.0;
        let out = conv2d_forward(&input, 1, 2, 2, &kernel, 1, 3, 3, None, 1, 1);
        assert_eq!(out, input);
    }

    #[test]
    fn conv_sum_kernel_single_output() {
        // [[1,2],[3,4]] * all-ones 2x2 kernel, no padding -> [10].
        let input = vec![1.0, 2.0, 3.0, 4.0];
        let out = conv2d_forward(&input, 1, 2, 2, &[1.0; 4], 1, 2, 2, None, 1, 0);
        assert_eq!(out, vec![10.0]);
    }

    #[test]
    fn conv_bias_is_added_per_channel() {
        let input = vec![0.0; 4];
        let out = conv2d_forward(
            &input,
            1,
            2,
            2,
            &[1.0, 1.0],
            2,
            1,
            1,
            Some(&[5.0, -3.0]),
            1,
            0,
        );
        assert_eq!(out, vec![5.0, 5.0, 5.0, 5.0, -3.0, -3.0, -3.0, -3.0]);
    }

    #[test]
    fn pool_basic_and_ties() {
        // [[1,2],[3,4]] window 2 -> [[4]] with argmax at flat index 3.
        let (out, arg, oh, ow) = max_pool2d_forward(&[1.0, 2.0, 3.0, 4.0], 1, 2, 2, 2);
        assert_eq!((out.as_slice(), oh, ow), (&[4.0][..], 1, 1));
        assert_eq!(arg, vec![3]);

        // All equal: the tie goes to the lowest linear index.
        let (out, arg, _, _) = max_pool2d_forward(&[7.0; 4], 1, 2, 2, 2);
        assert_eq!(out, vec![7.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn pool_ragged_edges_use_valid_elements_only() {
        // 3x3 with window 2: bottom and right cells shrink.
        let input: Vec<f64> = (1..=9).map(f64::from).collect();
        let (out, arg, oh, ow) = max_pool2d_forward(&input, 1, 3, 3, 2);
        assert_eq!((oh, ow), (2, 2));
        assert_eq!(out, vec![5.0, 6.0, 8.0, 9.0]);
        assert_eq!(arg, vec![4, 5, 7, 8]);
    }

    #[test]
    fn pool_negative_values_not_clamped() {
        // High-side padding must act as -inf, not zero.
        let (out, _, _, _) = max_pool2d_forward(&[-5.0, -2.0, -9.0], 1, 1, 3, 2);
        assert_eq!(out, vec![-2.0, -9.0]);
    }

    #[test]
    fn upsample_factors() {
        let input = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(upsample2d_forward(&input, 1, 2, 2, 1), input);
        let up = upsample2d_forward(&input, 1, 2, 2, 2);
        #[rustfmt::skip]
        let want = vec![
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(up, want);
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let dout = vec![1.0; 16];
        let mut di = vec![0.0; 4];
        upsample2d_backward(&dout, 1, 2, 2, 2, &mut di);
        assert_eq!(di, vec![4.0; 4]);
    }

    #[test]
    fn linear_matches_by_hand() {
        // w = [[2]], b = [1], x = [3] -> 7.
        assert_eq!(linear_forward(&[3.0], 1, 1, &[2.0], 1, &[1.0]), vec![7.0]);

        // Identity weight, zero bias.
        let eye = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(
            linear_forward(&[5.0, -2.0], 1, 2, &eye, 2, &[0.0, 0.0]),
            vec![5.0, -2.0]
        );

        // Two rows, rectangular weight.
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // [2 out, 3 in]
        let x = [1.0, 0.0, -1.0, 0.5, 0.5, 0.5];
        let out = linear_forward(&x, 2, 3, &w, 2, &[10.0, 20.0]);
        assert_eq!(out, vec![10.0 - 2.0, 20.0 - 2.0, 10.0 + 3.0, 20.0 + 7.5]);
    }

    #[test]
    fn linear_backward_matches_by_hand() {
        // Single row: out = W x + b, dout = g.
        let x = [1.0, 2.0];
        let w = [3.0, 4.0, 5.0, 6.0]; // [[3,4],[5,6]]
        let g = [1.0, 10.0];
        let mut dx = vec![0.0; 2];
        let mut dw = vec![0.0; 4];
        let mut db = vec![0.0; 2];
        linear_backward(
            &g,
            &x,
            &w,
            1,
            2,
            2,
            Some(&mut dx),
            Some(&mut dw),
            Some(&mut db),
        );
        // dx = W^T g = [3*1+5*10, 4*1+6*10].
        assert_eq!(dx, vec![53.0, 64.0]);
        // dW = g x^T.
        assert_eq!(dw, vec![1.0, 2.0, 10.0, 20.0]);
        assert_eq!(db, vec![1.0, 10.0]);
    }

    #[test]
    fn dot_and_axpy_agree_with_naive() {
        let mut a = vec![0.0; 37];
        let mut b = vec![0.0; 37];
        pseudo(&mut a, 3);
        pseudo(&mut b, 4);
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);

        let mut y = b.clone();
        axpy(&mut y, 0.5, &a);
        for i in 0..37 {
            assert_eq!(y[i], b[i] + 0.5 * a[i]);
        }
    }
}

//! Direct 2D convolution kernels (forward and both backward directions).
//!
//! Loops are ordered so the innermost runs contiguously over the output
//! row, which keeps the stride-1 case vectorizable. Zero padding is
//! handled by clipping the output index range instead of branching per
//! element.

/// Output extent for one spatial dimension.
pub(crate) fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Valid output range [lo, hi] such that `o*stride + k - pad` stays inside
/// `[0, limit)`. Returns None when empty.
#[inline]
fn out_range(limit: usize, kernel_off: usize, stride: usize, pad: usize, o_max: usize) -> Option<(usize, usize)> {
    let s = stride as isize;
    let shift = kernel_off as isize - pad as isize;
    // o*s + shift >= 0  =>  o >= ceil(-shift / s)
    let lo = (-shift).div_euclid(s) + if (-shift).rem_euclid(s) != 0 { 1 } else { 0 };
    let lo = lo.max(0) as usize;
    // o*s + shift <= limit-1
    let hi = (limit as isize - 1 - shift).div_euclid(s);
    if hi < lo as isize {
        return None;
    }
    let hi = (hi as usize).min(o_max);
    if lo > hi {
        None
    } else {
        Some((lo, hi))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn forward(
    inp: &[f64],
    (n, cin, h, w): (usize, usize, usize, usize),
    wts: &[f64],
    (cout, kh, kw): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
    out: &mut [f64],
    (oh, ow): (usize, usize),
) {
    for b in 0..n {
        let in_img = &inp[b * cin * h * w..(b + 1) * cin * h * w];
        let out_img = &mut out[b * cout * oh * ow..(b + 1) * cout * oh * ow];
        for co in 0..cout {
            let out_ch = &mut out_img[co * oh * ow..(co + 1) * oh * ow];
            out_ch.iter_mut().for_each(|v| *v = bias[co]);
            for ci in 0..cin {
                let in_ch = &in_img[ci * h * w..(ci + 1) * h * w];
                for ky in 0..kh {
                    let Some((oy_lo, oy_hi)) = out_range(h, ky, stride, pad, oh - 1) else {
                        continue;
                    };
                    for kx in 0..kw {
                        let wv = wts[((co * cin + ci) * kh + ky) * kw + kx];
                        let Some((ox_lo, ox_hi)) = out_range(w, kx, stride, pad, ow - 1) else {
                            continue;
                        };
                        for oy in oy_lo..=oy_hi {
                            let iy = oy * stride + ky - pad;
                            let in_row = &in_ch[iy * w..(iy + 1) * w];
                            let out_row = &mut out_ch[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                let off = ox_lo + kx - pad;
                                let len = ox_hi + 1 - ox_lo;
                                let src = &in_row[off..off + len];
                                let dst = &mut out_row[ox_lo..ox_lo + len];
                                for i in 0..len {
                                    dst[i] += wv * src[i];
                                }
                            } else {
                                for ox in ox_lo..=ox_hi {
                                    let ix = ox * stride + kx - pad;
                                    out_row[ox] += wv * in_row[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_input(
    gout: &[f64],
    (n, cin, h, w): (usize, usize, usize, usize),
    wts: &[f64],
    (cout, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    gin: &mut [f64],
    (oh, ow): (usize, usize),
) {
    for b in 0..n {
        let go_img = &gout[b * cout * oh * ow..(b + 1) * cout * oh * ow];
        let gi_img = &mut gin[b * cin * h * w..(b + 1) * cin * h * w];
        for ci in 0..cin {
            let gi_ch = &mut gi_img[ci * h * w..(ci + 1) * h * w];
            for co in 0..cout {
                let go_ch = &go_img[co * oh * ow..(co + 1) * oh * ow];
                for ky in 0..kh {
                    let Some((oy_lo, oy_hi)) = out_range(h, ky, stride, pad, oh - 1) else {
                        continue;
                    };
                    for kx in 0..kw {
                        let wv = wts[((co * cin + ci) * kh + ky) * kw + kx];
                        let Some((ox_lo, ox_hi)) = out_range(w, kx, stride, pad, ow - 1) else {
                            continue;
                        };
                        for oy in oy_lo..=oy_hi {
                            let iy = oy * stride + ky - pad;
                            let gi_row = &mut gi_ch[iy * w..(iy + 1) * w];
                            let go_row = &go_ch[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                let off = ox_lo + kx - pad;
                                let len = ox_hi + 1 - ox_lo;
                                let dst = &mut gi_row[off..off + len];
                                let src = &go_row[ox_lo..ox_lo + len];
                                for i in 0..len {
                                    dst[i] += wv * src[i];
                                }
                            } else {
                                for ox in ox_lo..=ox_hi {
                                    let ix = ox * stride + kx - pad;
                                    gi_row[ix] += wv * go_row[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_weight(
    gout: &[f64],
    inp: &[f64],
    (n, cin, h, w): (usize, usize, usize, usize),
    (cout, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    gw: &mut [f64],
    (oh, ow): (usize, usize),
) {
    for b in 0..n {
        let in_img = &inp[b * cin * h * w..(b + 1) * cin * h * w];
        let go_img = &gout[b * cout * oh * ow..(b + 1) * cout * oh * ow];
        for co in 0..cout {
            let go_ch = &go_img[co * oh * ow..(co + 1) * oh * ow];
            for ci in 0..cin {
                let in_ch = &in_img[ci * h * w..(ci + 1) * h * w];
                for ky in 0..kh {
                    let Some((oy_lo, oy_hi)) = out_range(h, ky, stride, pad, oh - 1) else {
                        continue;
                    };
                    for kx in 0..kw {
                        let Some((ox_lo, ox_hi)) = out_range(w, kx, stride, pad, ow - 1) else {
                            continue;
                        };
                        let mut acc = 0.0;
                        for oy in oy_lo..=oy_hi {
                            let iy = oy * stride + ky - pad;
                            let in_row = &in_ch[iy * w..(iy + 1) * w];
                            let go_row = &go_ch[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                let off = ox_lo + kx - pad;
                                let len = ox_hi + 1 - ox_lo;
                                let a = &in_row[off..off + len];
                                let g = &go_row[ox_lo..ox_lo + len];
                                for i in 0..len {
                                    acc += a[i] * g[i];
                                }
                            } else {
                                for ox in ox_lo..=ox_hi {
                                    let ix = ox * stride + kx - pad;
                                    acc += in_row[ix] * go_row[ox];
                                }
                            }
                        }
                        gw[((co * cin + ci) * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
}

pub(crate) fn backward_bias(gout: &[f64], n: usize, cout: usize, spatial: usize, gb: &mut [f64]) {
    for b in 0..n {
        for co in 0..cout {
            let base = (b * cout + co) * spatial;
            let mut acc = 0.0;
            for v in &gout[base..base + spatial] {
                acc += v;
            }
            gb[co] += acc;
        }
    }
}

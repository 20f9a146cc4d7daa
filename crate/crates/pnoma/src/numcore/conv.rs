//! Raw 2-D convolution kernels shared by the forward and adjoint graph ops.
//!
//! All buffers are row-major `[channels, height, width]` for activations and
//! `[out_ch, in_ch, k, k]` for weights. The three entry points form an
//! adjoint triple: for fixed weights, `conv_dx` is the transpose of
//! `conv_fwd` as a linear map, and `conv_dw` completes the trilinear form.

/// Output spatial extent of a strided convolution (floor semantics).
pub(crate) fn out_dim(inp: usize, k: usize, stride: usize, pad: usize) -> usize {
    (inp + 2 * pad - k) / stride + 1
}

/// `out[co, oh, ow] = bias[co] + sum x[ci, oh*s+kh-p, ow*s+kw-p] * w[co, ci, kh, kw]`
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_fwd(
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    wgt: &[f64],
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let oh = out_dim(h, k, stride, pad);
    let ow = out_dim(w, k, stride, pad);
    debug_assert_eq!(out.len(), co * oh * ow);
    for co_i in 0..co {
        let b = bias.map_or(0.0, |bv| bv[co_i]);
        for oh_i in 0..oh {
            for ow_i in 0..ow {
                let mut acc = b;
                for ci_i in 0..ci {
                    let x_ch = &x[ci_i * h * w..(ci_i + 1) * h * w];
                    let w_base = ((co_i * ci + ci_i) * k) * k;
                    for kh in 0..k {
                        let ih = (oh_i * stride + kh) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let row = ih as usize * w;
                        for kw in 0..k {
                            let iw = (ow_i * stride + kw) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            acc += x_ch[row + iw as usize] * wgt[w_base + kh * k + kw];
                        }
                    }
                }
                out[(co_i * oh + oh_i) * ow + ow_i] = acc;
            }
        }
    }
}

/// Adjoint of `conv_fwd` with respect to the input activation.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_dx(
    dy: &[f64],
    co: usize,
    oh: usize,
    ow: usize,
    wgt: &[f64],
    ci: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
    dx: &mut [f64],
) {
    debug_assert_eq!(dx.len(), ci * h * w);
    for co_i in 0..co {
        for oh_i in 0..oh {
            for ow_i in 0..ow {
                let g = dy[(co_i * oh + oh_i) * ow + ow_i];
                if g == 0.0 {
                    continue;
                }
                for ci_i in 0..ci {
                    let w_base = ((co_i * ci + ci_i) * k) * k;
                    for kh in 0..k {
                        let ih = (oh_i * stride + kh) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kw in 0..k {
                            let iw = (ow_i * stride + kw) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            dx[(ci_i * h + ih as usize) * w + iw as usize] +=
                                g * wgt[w_base + kh * k + kw];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `conv_fwd` with respect to the weights.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_dw(
    dy: &[f64],
    co: usize,
    oh: usize,
    ow: usize,
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dw: &mut [f64],
) {
    debug_assert_eq!(dw.len(), co * ci * k * k);
    for co_i in 0..co {
        for oh_i in 0..oh {
            for ow_i in 0..ow {
                let g = dy[(co_i * oh + oh_i) * ow + ow_i];
                if g == 0.0 {
                    continue;
                }
                for ci_i in 0..ci {
                    let w_base = ((co_i * ci + ci_i) * k) * k;
                    for kh in 0..k {
                        let ih = (oh_i * stride + kh) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kw in 0..k {
                            let iw = (ow_i * stride + kw) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            dw[w_base + kh * k + kw] +=
                                g * x[(ci_i * h + ih as usize) * w + iw as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel sum of an upstream gradient (adjoint of the bias add).
pub(crate) fn conv_db(dy: &[f64], co: usize, spatial: usize, db: &mut [f64]) {
    debug_assert_eq!(db.len(), co);
    for co_i in 0..co {
        db[co_i] += dy[co_i * spatial..(co_i + 1) * spatial].iter().sum::<f64>();
    }
}

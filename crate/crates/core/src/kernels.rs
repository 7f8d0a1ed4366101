//! Batched NCHW convolution and pooling loops.
//!
//! Convolution is cross-correlation (no kernel flip) with zero padding.
//! Pooling ignores padded positions: max-pool never selects them and
//! avg-pool divides by the number of in-bounds elements.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub dilation: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool2dParams {
    pub size: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dims4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

fn out_extent(len: usize, pad: usize, span: usize, stride: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < span || stride == 0 {
        None
    } else {
        Some((padded - span) / stride + 1)
    }
}

pub(crate) fn conv_out_hw(h: usize, w: usize, kh: usize, kw: usize, p: &Conv2dParams) -> Option<(usize, usize)> {
    let span_h = p.dilation * (kh - 1) + 1;
    let span_w = p.dilation * (kw - 1) + 1;
    Some((
        out_extent(h, p.pad_h, span_h, p.stride)?,
        out_extent(w, p.pad_w, span_w, p.stride)?,
    ))
}

pub(crate) fn pool_out_hw(h: usize, w: usize, p: &Pool2dParams) -> Option<(usize, usize)> {
    if p.size == 0 || p.padding >= p.size {
        return None;
    }
    Some((
        out_extent(h, p.padding, p.size, p.stride)?,
        out_extent(w, p.padding, p.size, p.stride)?,
    ))
}

#[inline]
fn src_index(o: usize, k: usize, stride: usize, dilation: usize, pad: usize, len: usize) -> Option<usize> {
    let pos = (o * stride + k * dilation) as isize - pad as isize;
    if pos < 0 || pos as usize >= len {
        None
    } else {
        Some(pos as usize)
    }
}

/// `x`: [n, ci, h, w], `k`: [co, ci, kh, kw] → [n, co, ho, wo].
pub(crate) fn conv2d_forward(
    x: &[f64],
    xd: Dims4,
    k: &[f64],
    co: usize,
    kh: usize,
    kw: usize,
    p: &Conv2dParams,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; xd.n * co * ho * wo];
    for b in 0..xd.n {
        for o in 0..co {
            let out_base = (b * co + o) * ho * wo;
            for i in 0..xd.c {
                let x_base = (b * xd.c + i) * xd.h * xd.w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wgt = k[((o * xd.c + i) * kh + ky) * kw + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        for oy in 0..ho {
                            let Some(iy) = src_index(oy, ky, p.stride, p.dilation, p.pad_h, xd.h) else {
                                continue;
                            };
                            let row = x_base + iy * xd.w;
                            let orow = out_base + oy * wo;
                            for ox in 0..wo {
                                if let Some(ix) = src_index(ox, kx, p.stride, p.dilation, p.pad_w, xd.w) {
                                    out[orow + ox] += wgt * x[row + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (d_input, d_kernel) for upstream gradient `g` of shape [n, co, ho, wo].
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    xd: Dims4,
    k: &[f64],
    co: usize,
    kh: usize,
    kw: usize,
    p: &Conv2dParams,
    ho: usize,
    wo: usize,
    g: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    for b in 0..xd.n {
        for o in 0..co {
            let g_base = (b * co + o) * ho * wo;
            for i in 0..xd.c {
                let x_base = (b * xd.c + i) * xd.h * xd.w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let k_idx = ((o * xd.c + i) * kh + ky) * kw + kx;
                        let wgt = k[k_idx];
                        let mut acc = 0.0;
                        for oy in 0..ho {
                            let Some(iy) = src_index(oy, ky, p.stride, p.dilation, p.pad_h, xd.h) else {
                                continue;
                            };
                            let row = x_base + iy * xd.w;
                            let grow = g_base + oy * wo;
                            for ox in 0..wo {
                                if let Some(ix) = src_index(ox, kx, p.stride, p.dilation, p.pad_w, xd.w) {
                                    let gv = g[grow + ox];
                                    acc += gv * x[row + ix];
                                    dx[row + ix] += gv * wgt;
                                }
                            }
                        }
                        dk[k_idx] += acc;
                    }
                }
            }
        }
    }
    (dx, dk)
}

fn pool_window(
    x: &[f64],
    base: usize,
    h: usize,
    w: usize,
    oy: usize,
    ox: usize,
    p: &Pool2dParams,
    mut visit: impl FnMut(usize, f64),
) {
    for ky in 0..p.size {
        let Some(iy) = src_index(oy, ky, p.stride, 1, p.padding, h) else {
            continue;
        };
        for kx in 0..p.size {
            if let Some(ix) = src_index(ox, kx, p.stride, 1, p.padding, w) {
                let idx = base + iy * w + ix;
                visit(idx, x[idx]);
            }
        }
    }
}

/// Index of the first maximum within each window.
fn max_index(x: &[f64], base: usize, h: usize, w: usize, oy: usize, ox: usize, p: &Pool2dParams) -> usize {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    pool_window(x, base, h, w, oy, ox, p, |idx, v| {
        if best.0 == usize::MAX || v > best.1 {
            best = (idx, v);
        }
    });
    best.0
}

pub(crate) fn max_pool_forward(x: &[f64], d: Dims4, p: &Pool2dParams, ho: usize, wo: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(d.n * d.c * ho * wo);
    for nc in 0..d.n * d.c {
        let base = nc * d.h * d.w;
        for oy in 0..ho {
            for ox in 0..wo {
                out.push(x[max_index(x, base, d.h, d.w, oy, ox, p)]);
            }
        }
    }
    out
}

pub(crate) fn max_pool_backward(x: &[f64], d: Dims4, p: &Pool2dParams, ho: usize, wo: usize, g: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    for nc in 0..d.n * d.c {
        let base = nc * d.h * d.w;
        for oy in 0..ho {
            for ox in 0..wo {
                let idx = max_index(x, base, d.h, d.w, oy, ox, p);
                dx[idx] += g[(nc * ho + oy) * wo + ox];
            }
        }
    }
    dx
}

pub(crate) fn avg_pool_forward(x: &[f64], d: Dims4, p: &Pool2dParams, ho: usize, wo: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(d.n * d.c * ho * wo);
    for nc in 0..d.n * d.c {
        let base = nc * d.h * d.w;
        for oy in 0..ho {
            for ox in 0..wo {
                let (mut sum, mut count) = (0.0, 0usize);
                pool_window(x, base, d.h, d.w, oy, ox, p, |_, v| {
                    sum += v;
                    count += 1;
                });
                out.push(sum / count as f64);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(x: &[f64], d: Dims4, p: &Pool2dParams, ho: usize, wo: usize, g: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    for nc in 0..d.n * d.c {
        let base = nc * d.h * d.w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut members = Vec::with_capacity(p.size * p.size);
                pool_window(x, base, d.h, d.w, oy, ox, p, |idx, _| members.push(idx));
                let share = g[(nc * ho + oy) * wo + ox] / members.len() as f64;
                for idx in members {
                    dx[idx] += share;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_is_cross_correlation() {
        // 1x1x3x3 input, 1x1x2x2 kernel, no padding: top-left output is
        // x00*k00 + x01*k01 + x10*k10 + x11*k11 (no flip).
        let x: Vec<f64> = (1..=9).map(f64::from).collect();
        let k = vec![1.0, 2.0, 3.0, 4.0];
        let p = Conv2dParams {
            stride: 1,
            pad_h: 0,
            pad_w: 0,
            dilation: 1,
        };
        let d = Dims4 { n: 1, c: 1, h: 3, w: 3 };
        let out = conv2d_forward(&x, d, &k, 1, 2, 2, &p, 2, 2);
        assert_eq!(out, vec![37.0, 47.0, 67.0, 77.0]);
    }

    #[test]
    fn dilated_output_extent() {
        let p = Conv2dParams {
            stride: 1,
            pad_h: 2,
            pad_w: 2,
            dilation: 2,
        };
        assert_eq!(conv_out_hw(6, 6, 3, 3, &p), Some((6, 6)));
        let p = Conv2dParams {
            stride: 2,
            pad_h: 1,
            pad_w: 1,
            dilation: 1,
        };
        assert_eq!(conv_out_hw(6, 6, 3, 3, &p), Some((3, 3)));
    }

    #[test]
    fn avg_pool_excludes_padding() {
        let x = vec![4.0; 4];
        let d = Dims4 { n: 1, c: 1, h: 2, w: 2 };
        let p = Pool2dParams {
            size: 3,
            stride: 1,
            padding: 1,
        };
        assert_eq!(avg_pool_forward(&x, d, &p, 2, 2), vec![4.0; 4]);
    }
}

//! Direct 2-D convolution kernels (forward and backward), CHW layout.

/// Half-open output range `[lo, hi)` such that for every `o` in the range,
/// `o*stride + k - pad` is a valid input coordinate in `[0, in_len)`.
#[inline]
fn out_range(pad: usize, k: usize, in_len: usize, stride: usize, out_len: usize) -> (usize, usize) {
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let max_excl = in_len as isize + pad as isize - k as isize;
    if max_excl <= 0 {
        return (0, 0);
    }
    let hi = (((max_excl - 1) as usize) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

pub(crate) struct ConvDims {
    pub ic: usize,
    pub h: usize,
    pub w: usize,
    pub oc: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn forward(input: &[f64], weight: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.oc * d.oh * d.ow];
    for oc in 0..d.oc {
        let out_c = &mut out[oc * d.oh * d.ow..][..d.oh * d.ow];
        for ic in 0..d.ic {
            let in_c = &input[ic * d.h * d.w..][..d.h * d.w];
            for ky in 0..d.kh {
                let (oy0, oy1) = out_range(d.pad_top, ky, d.h, d.stride, d.oh);
                for kx in 0..d.kw {
                    let (ox0, ox1) = out_range(d.pad_left, kx, d.w, d.stride, d.ow);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let wv = weight[((oc * d.ic + ic) * d.kh + ky) * d.kw + kx];
                    for oy in oy0..oy1 {
                        let iy = oy * d.stride + ky - d.pad_top;
                        let in_row = &in_c[iy * d.w..][..d.w];
                        let out_row = &mut out_c[oy * d.ow..][..d.ow];
                        if d.stride == 1 {
                            let ix0 = ox0 + kx - d.pad_left;
                            let n = ox1 - ox0;
                            for (o, i) in out_row[ox0..ox1].iter_mut().zip(&in_row[ix0..ix0 + n]) {
                                *o += wv * *i;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                let ix = ox * d.stride + kx - d.pad_left;
                                out_row[ox] += wv * in_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients with respect to input and weight given the output gradient.
pub(crate) fn backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    d: &ConvDims,
) -> (Vec<f64>, Vec<f64>) {
    let mut d_input = vec![0.0; d.ic * d.h * d.w];
    let mut d_weight = vec![0.0; d.oc * d.ic * d.kh * d.kw];
    for oc in 0..d.oc {
        let g_c = &grad_out[oc * d.oh * d.ow..][..d.oh * d.ow];
        for ic in 0..d.ic {
            let in_c = &input[ic * d.h * d.w..][..d.h * d.w];
            let din_c = &mut d_input[ic * d.h * d.w..][..d.h * d.w];
            for ky in 0..d.kh {
                let (oy0, oy1) = out_range(d.pad_top, ky, d.h, d.stride, d.oh);
                for kx in 0..d.kw {
                    let (ox0, ox1) = out_range(d.pad_left, kx, d.w, d.stride, d.ow);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let widx = ((oc * d.ic + ic) * d.kh + ky) * d.kw + kx;
                    let wv = weight[widx];
                    let mut wacc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * d.stride + ky - d.pad_top;
                        let in_row = &in_c[iy * d.w..][..d.w];
                        let din_row = &mut din_c[iy * d.w..][..d.w];
                        let g_row = &g_c[oy * d.ow..][..d.ow];
                        if d.stride == 1 {
                            let ix0 = ox0 + kx - d.pad_left;
                            let n = ox1 - ox0;
                            for ((di, g), i) in din_row[ix0..ix0 + n]
                                .iter_mut()
                                .zip(&g_row[ox0..ox1])
                                .zip(&in_row[ix0..ix0 + n])
                            {
                                *di += wv * *g;
                                wacc += *g * *i;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                let ix = ox * d.stride + kx - d.pad_left;
                                din_row[ix] += wv * g_row[ox];
                                wacc += g_row[ox] * in_row[ix];
                            }
                        }
                    }
                    d_weight[widx] += wacc;
                }
            }
        }
    }
    (d_input, d_weight)
}

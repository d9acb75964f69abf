//! Direct 2D cross-correlation kernels used by the tape's conv2d op.
//!
//! Accumulation order per output element is fixed (in-channel, then kernel
//! row, then kernel column), so results are bit-reproducible run to run.
//! The 3x3/stride-1/pad-1 case the network uses everywhere gets a row-wise
//! fast path that the compiler can vectorize.

/// Validated conv geometry shared by forward and backward.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn out_dim(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

impl ConvDims {
    fn is_k3s1p1(&self) -> bool {
        self.kh == 3 && self.kw == 3 && self.stride == 1 && self.pad == 1 && self.w >= 2
    }

    fn is_k1s1p0(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output-column range `lo..hi` for a kernel column `kx`, i.e. the
    /// columns whose input sample `ox*stride + kx - pad` is in bounds.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(self.stride) };
        if kx > self.w - 1 + self.pad {
            return (0, 0);
        }
        let hi = ((self.w - 1 + self.pad - kx) / self.stride + 1).min(self.ow);
        (lo, hi.max(lo))
    }
}

pub(crate) fn forward(d: &ConvDims, inp: &[f64], ker: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; d.co * d.oh * d.ow];
    let plane = d.oh * d.ow;
    for o in 0..d.co {
        let out_plane = &mut out[o * plane..(o + 1) * plane];
        out_plane.fill(bias[o]);
        for i in 0..d.ci {
            let ip = &inp[i * d.h * d.w..(i + 1) * d.h * d.w];
            let kbase = (o * d.ci + i) * d.kh * d.kw;
            let ksub = &ker[kbase..kbase + d.kh * d.kw];
            if d.is_k3s1p1() {
                k3_forward_plane(out_plane, ip, ksub, d.h, d.w);
            } else if d.is_k1s1p0() {
                let wgt = ksub[0];
                for (o_, i_) in out_plane.iter_mut().zip(ip) {
                    *o_ += wgt * *i_;
                }
            } else {
                general_forward_plane(out_plane, ip, ksub, d);
            }
        }
    }
    out
}

fn k3_forward_plane(out: &mut [f64], inp: &[f64], k: &[f64], h: usize, w: usize) {
    for ky in 0..3usize {
        let (k0, k1, k2) = (k[ky * 3], k[ky * 3 + 1], k[ky * 3 + 2]);
        for oy in 0..h {
            let iy = oy as isize + ky as isize - 1;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let irow = &inp[iy as usize * w..iy as usize * w + w];
            let orow = &mut out[oy * w..oy * w + w];
            orow[0] += k1 * irow[0] + k2 * irow[1];
            for x in 1..w - 1 {
                orow[x] += k0 * irow[x - 1] + k1 * irow[x] + k2 * irow[x + 1];
            }
            orow[w - 1] += k0 * irow[w - 2] + k1 * irow[w - 1];
        }
    }
}

fn general_forward_plane(out: &mut [f64], inp: &[f64], ksub: &[f64], d: &ConvDims) {
    for ky in 0..d.kh {
        for kx in 0..d.kw {
            let wgt = ksub[ky * d.kw + kx];
            let (lo, hi) = d.col_range(kx);
            if lo >= hi {
                continue;
            }
            for oy in 0..d.oh {
                let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                let irow = &inp[iy as usize * d.w..iy as usize * d.w + d.w];
                let orow = &mut out[oy * d.ow..oy * d.ow + d.ow];
                if d.stride == 1 {
                    let ibase = lo + kx - d.pad;
                    for (o_, i_) in orow[lo..hi].iter_mut().zip(&irow[ibase..ibase + hi - lo]) {
                        *o_ += wgt * *i_;
                    }
                } else {
                    for ox in lo..hi {
                        let ix = ox * d.stride + kx - d.pad;
                        orow[ox] += wgt * irow[ix];
                    }
                }
            }
        }
    }
}

/// Gradients of the cross-correlation. `need_gin`/`need_gker` skip work for
/// inputs that do not require gradients; the bias gradient is always cheap.
pub(crate) fn backward(
    d: &ConvDims,
    inp: &[f64],
    ker: &[f64],
    gout: &[f64],
    need_gin: bool,
    need_gker: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let plane = d.oh * d.ow;

    let mut gbias = vec![0.0; d.co];
    for (o, gb) in gbias.iter_mut().enumerate() {
        *gb = gout[o * plane..(o + 1) * plane].iter().sum();
    }

    let gin = need_gin.then(|| {
        let mut gin = vec![0.0; d.ci * d.h * d.w];
        for i in 0..d.ci {
            let gip_range = i * d.h * d.w..(i + 1) * d.h * d.w;
            for o in 0..d.co {
                let gop = &gout[o * plane..(o + 1) * plane];
                let kbase = (o * d.ci + i) * d.kh * d.kw;
                let ksub = &ker[kbase..kbase + d.kh * d.kw];
                let gip = &mut gin[gip_range.clone()];
                if d.is_k3s1p1() {
                    k3_backward_input_plane(gip, gop, ksub, d.h, d.w);
                } else if d.is_k1s1p0() {
                    let wgt = ksub[0];
                    for (g_, o_) in gip.iter_mut().zip(gop) {
                        *g_ += wgt * *o_;
                    }
                } else {
                    general_backward_input_plane(gip, gop, ksub, d);
                }
            }
        }
        gin
    });

    let gker = need_gker.then(|| {
        let mut gker = vec![0.0; d.co * d.ci * d.kh * d.kw];
        for o in 0..d.co {
            let gop = &gout[o * plane..(o + 1) * plane];
            for i in 0..d.ci {
                let ip = &inp[i * d.h * d.w..(i + 1) * d.h * d.w];
                let kbase = (o * d.ci + i) * d.kh * d.kw;
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let (lo, hi) = d.col_range(kx);
                        if lo >= hi {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in 0..d.oh {
                            let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let irow = &ip[iy as usize * d.w..iy as usize * d.w + d.w];
                            let grow = &gop[oy * d.ow..oy * d.ow + d.ow];
                            if d.stride == 1 {
                                let ibase = lo + kx - d.pad;
                                acc += grow[lo..hi]
                                    .iter()
                                    .zip(&irow[ibase..ibase + hi - lo])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            } else {
                                for ox in lo..hi {
                                    let ix = ox * d.stride + kx - d.pad;
                                    acc += grow[ox] * irow[ix];
                                }
                            }
                        }
                        gker[kbase + ky * d.kw + kx] = acc;
                    }
                }
            }
        }
        gker
    });

    (gin, gker, gbias)
}

/// d/d(input) of the k3s1p1 correlation: correlation of `gout` with the
/// 180-degree-rotated kernel.
fn k3_backward_input_plane(gin: &mut [f64], gout: &[f64], k: &[f64], h: usize, w: usize) {
    for ky in 0..3usize {
        let (k0, k1, k2) = (k[ky * 3], k[ky * 3 + 1], k[ky * 3 + 2]);
        for oy in 0..h {
            let iy = oy as isize + ky as isize - 1;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let grow = &gout[oy * w..oy * w + w];
            let irow = &mut gin[iy as usize * w..iy as usize * w + w];
            irow[0] += k0 * grow[1] + k1 * grow[0];
            for x in 1..w - 1 {
                irow[x] += k0 * grow[x + 1] + k1 * grow[x] + k2 * grow[x - 1];
            }
            irow[w - 1] += k1 * grow[w - 1] + k2 * grow[w - 2];
        }
    }
}

fn general_backward_input_plane(gin: &mut [f64], gout: &[f64], ksub: &[f64], d: &ConvDims) {
    for ky in 0..d.kh {
        for kx in 0..d.kw {
            let wgt = ksub[ky * d.kw + kx];
            let (lo, hi) = d.col_range(kx);
            if lo >= hi {
                continue;
            }
            for oy in 0..d.oh {
                let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                let irow = &mut gin[iy as usize * d.w..iy as usize * d.w + d.w];
                let grow = &gout[oy * d.ow..oy * d.ow + d.ow];
                if d.stride == 1 {
                    let ibase = lo + kx - d.pad;
                    for (i_, g_) in irow[ibase..ibase + hi - lo].iter_mut().zip(&grow[lo..hi]) {
                        *i_ += wgt * *g_;
                    }
                } else {
                    for ox in lo..hi {
                        let ix = ox * d.stride + kx - d.pad;
                        irow[ix] += wgt * grow[ox];
                    }
                }
            }
        }
    }
}

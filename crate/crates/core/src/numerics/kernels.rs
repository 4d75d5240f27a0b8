//! Raw loops behind the tape primitives. Every reduction runs in a fixed
//! index order so results are bit-reproducible.

/// `out[m×p] += a[m×n] · b[n×p]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let out_row = &mut out[i * p..(i + 1) * p];
        let a_row = &a[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[m×n] += g[m×p] · b[n×p]ᵀ`
pub(crate) fn matmul_a_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let g_row = &g[i * p..(i + 1) * p];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, o) in out_row.iter_mut().enumerate() {
            *o += dot(g_row, &b[kk * p..(kk + 1) * p]);
        }
    }
}

/// `out[n×p] += a[m×n]ᵀ · g[m×p]`
pub(crate) fn matmul_at_b_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let g_row = &g[i * p..(i + 1) * p];
        let a_row = &a[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let out_row = &mut out[kk * p..(kk + 1) * p];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += aik * gv;
            }
        }
    }
}

/// Dot product with four interleaved partial sums, combined in fixed order.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let chunks = n / 4;
    let mut acc = [0.0f64; 4];
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_len: usize,
}

impl ConvDims {
    /// Output positions `lo..hi` whose tap `k` lands inside the input.
    #[inline]
    fn valid(&self, k: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(k).div_ceil(self.stride);
        let hi = (self.len + self.padding).saturating_sub(k).div_ceil(self.stride).min(self.out_len);
        (lo, hi.max(lo))
    }
}

/// Unfolds `x` into `[out_len × c_in·kernel]` patches, zero in the padding.
fn im2col(x: &[f64], d: &ConvDims) -> Vec<f64> {
    let width = d.c_in * d.kernel;
    let mut cols = vec![0.0; d.out_len * width];
    for ci in 0..d.c_in {
        let x_row = &x[ci * d.len..(ci + 1) * d.len];
        for k in 0..d.kernel {
            let (lo, hi) = d.valid(k);
            for o in lo..hi {
                cols[o * width + ci * d.kernel + k] = x_row[o * d.stride + k - d.padding];
            }
        }
    }
    cols
}

pub(crate) fn conv1d_forward(x: &[f64], w: &[f64], b: &[f64], d: &ConvDims) -> Vec<f64> {
    let width = d.c_in * d.kernel;
    let cols = im2col(x, d);
    let mut out_t = vec![0.0; d.out_len * d.c_out];
    matmul_a_bt_acc(&cols, w, &mut out_t, d.out_len, d.c_out, width);
    let mut out = vec![0.0; d.c_out * d.out_len];
    for co in 0..d.c_out {
        for o in 0..d.out_len {
            out[co * d.out_len + o] = out_t[o * d.c_out + co] + b[co];
        }
    }
    out
}

/// Accumulates input, weight and bias gradients for one convolution.
pub(crate) fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    d: &ConvDims,
    gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let width = d.c_in * d.kernel;
    if let Some(gb) = gb {
        for co in 0..d.c_out {
            gb[co] += grad_out[co * d.out_len..(co + 1) * d.out_len].iter().sum::<f64>();
        }
    }
    if let Some(gw) = gw {
        let cols = im2col(x, d);
        matmul_acc(grad_out, &cols, gw, d.c_out, d.out_len, width);
    }
    if let Some(gx) = gx {
        let mut gcols = vec![0.0; d.out_len * width];
        matmul_at_b_acc(grad_out, w, &mut gcols, d.c_out, d.out_len, width);
        for ci in 0..d.c_in {
            let gx_row = &mut gx[ci * d.len..(ci + 1) * d.len];
            for k in 0..d.kernel {
                let (lo, hi) = d.valid(k);
                for o in lo..hi {
                    gx_row[o * d.stride + k - d.padding] += gcols[o * width + ci * d.kernel + k];
                }
            }
        }
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax of one row, max-subtracted.
pub(crate) fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

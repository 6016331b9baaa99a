//! Raw numeric kernels on slices. No shape bookkeeping beyond what the
//! caller passes in. Matrix products go through `matrixmultiply`, whose
//! blocking is fixed for a given size, so results are bit-reproducible.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transpose {
    No,
    Yes,
}

/// `c (+)= op(a) · op(b)` with `op(a)` of shape `m×k` and `op(b)` of shape `k×n`.
///
/// `a` is stored as `m×k` (or `k×m` when transposed), `b` as `k×n` (or `n×k`).
/// When `accumulate` is false `c` is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    n: usize,
    k: usize,
    a: &[f32],
    ta: Transpose,
    b: &[f32],
    tb: Transpose,
    c: &mut [f32],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm lhs length");
    assert_eq!(b.len(), k * n, "gemm rhs length");
    assert_eq!(c.len(), m * n, "gemm output length");
    let (rsa, csa) = match ta {
        Transpose::No => (k as isize, 1),
        Transpose::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Transpose::No => (n as isize, 1),
        Transpose::Yes => (1, k as isize),
    };
    if !accumulate {
        c.iter_mut().for_each(|v| *v = 0.0);
    }
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the strides describe `a` (m×k), `b` (k×n) and `c` (m×n) within
    // the bounds asserted above, and `c` does not alias the inputs.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution over an NHWC map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.cin
    }

    pub fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }

    /// True when the im2col matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds input patches into a `rows × (k·k·cin)` matrix, zero-padded.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let plen = g.patch_len();
    let mut cols = vec![0.0f32; g.rows() * plen];
    let mut row = 0;
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let dst = &mut cols[row * plen..(row + 1) * plen];
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let off = (ky * g.k + kx) * g.cin;
                        dst[off..off + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let plen = g.patch_len();
    let mut row = 0;
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let src = &cols[row * plen..(row + 1) * plen];
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let off = (ky * g.k + kx) * g.cin;
                        for (d, s) in dx[dst..dst + g.cin].iter_mut().zip(&src[off..off + g.cin]) {
                            *d += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Align-corners source coordinates for resampling `src` samples onto `dst`
/// samples: per output index, the lower neighbour, upper neighbour and the
/// weight of the upper neighbour.
pub fn bilinear_sample_indices(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            if src == dst {
                return (i, i, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, (pos - lo as f64) as f32)
        })
        .collect()
}

/// `a + t·(b − a)`: exact at `t = 0` and on constant inputs.
#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

/// Align-corners bilinear resize of an NHWC buffer.
pub fn bilinear_forward(x: &[f32], n: usize, h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f32> {
    let ys = bilinear_sample_indices(h, oh);
    let xs = bilinear_sample_indices(w, ow);
    let mut out = vec![0.0f32; n * oh * ow * c];
    for b in 0..n {
        let base = b * h * w * c;
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let dst = ((b * oh + oy) * ow + ox) * c;
                let p00 = base + (y0 * w + x0) * c;
                let p01 = base + (y0 * w + x1) * c;
                let p10 = base + (y1 * w + x0) * c;
                let p11 = base + (y1 * w + x1) * c;
                for ch in 0..c {
                    let top = lerp(x[p00 + ch], x[p01 + ch], fx);
                    let bottom = lerp(x[p10 + ch], x[p11 + ch], fx);
                    out[dst + ch] = lerp(top, bottom, fy);
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bilinear_backward(
    dout: &[f32],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f32],
) {
    let ys = bilinear_sample_indices(h, oh);
    let xs = bilinear_sample_indices(w, ow);
    for b in 0..n {
        let base = b * h * w * c;
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let src = ((b * oh + oy) * ow + ox) * c;
                let targets = [
                    (base + (y0 * w + x0) * c, (1.0 - fy) * (1.0 - fx)),
                    (base + (y0 * w + x1) * c, (1.0 - fy) * fx),
                    (base + (y1 * w + x0) * c, fy * (1.0 - fx)),
                    (base + (y1 * w + x1) * c, fy * fx),
                ];
                for (p, wt) in targets {
                    if wt == 0.0 {
                        continue;
                    }
                    for ch in 0..c {
                        dx[p + ch] += wt * dout[src + ch];
                    }
                }
            }
        }
    }
}

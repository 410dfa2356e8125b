//! Raw NCHW kernels used by the graph ops. Convolutions lower to im2col plus a
//! single-threaded GEMM so results are bit-reproducible.

/// `c = a · b + beta · c` for row-major operands; `ta`/`tb` read the stored
/// matrix transposed (`a` stored `k×m`, `b` stored `n×k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths match the m/k/n extents asserted above and the
    // strides describe row-major layouts inside those slices.
    unsafe {
        matrixmultiply::dgemm(
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a strided, zero-padded square-kernel correlation from a
/// `channels × height × width` plane stack to `out_h × out_w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// `None` when the kernel does not fit.
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        let ph = height + 2 * padding;
        let pw = width + 2 * padding;
        if stride == 0 || kernel == 0 || ph < kernel || pw < kernel {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_h: (ph - kernel) / stride + 1,
            out_w: (pw - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds one image (`C×H×W`) into `(C·K·K) × (OH·OW)` columns.
pub fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let ocols = g.col_cols();
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ocols..(row + 1) * ocols];
                for oh in 0..g.out_h {
                    let ih = (oh * s + ki) as isize - p;
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * s + kj) as isize - p;
                        *v = if iw < 0 || iw >= g.width as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image.
pub fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let ocols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ocols..(row + 1) * ocols];
                for oh in 0..g.out_h {
                    let ih = (oh * s + ki) as isize - p;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    let line = &src[oh * g.out_w..(oh + 1) * g.out_w];
                    for (ow, v) in line.iter().enumerate() {
                        let iw = (ow * s + kj) as isize - p;
                        if iw >= 0 && iw < g.width as isize {
                            dst[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `x: N×C×H×W`, `w: O×C×K×K` → `N×O×OH×OW`.
pub fn conv2d_forward(x: &[f64], n: usize, g: &ConvGeom, w: &[f64], out_ch: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let in_sz = g.channels * g.height * g.width;
    let out_sz = out_ch * g.col_cols();
    let mut out = vec![0.0; n * out_sz];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.col_rows() * g.col_cols()]
    };
    for i in 0..n {
        let img = &x[i * in_sz..(i + 1) * in_sz];
        let y = &mut out[i * out_sz..(i + 1) * out_sz];
        if let Some(b) = bias {
            for (o, row) in y.chunks_mut(g.col_cols()).enumerate() {
                row.fill(b[o]);
            }
        }
        let src: &[f64] = if g.is_pointwise() {
            img
        } else {
            im2col(img, g, &mut cols);
            &cols
        };
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(out_ch, g.col_rows(), g.col_cols(), w, false, src, false, beta, y);
    }
    out
}

/// Gradients of [`conv2d_forward`]; each output is produced only when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    w: &[f64],
    out_ch: usize,
    dy: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let in_sz = g.channels * g.height * g.width;
    let out_sz = out_ch * g.col_cols();
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dw = want_dw.then(|| vec![0.0; w.len()]);
    let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
    for i in 0..n {
        let dyi = &dy[i * out_sz..(i + 1) * out_sz];
        if let Some(dw) = dw.as_mut() {
            let img = &x[i * in_sz..(i + 1) * in_sz];
            let src: &[f64] = if g.is_pointwise() {
                img
            } else {
                im2col(img, g, &mut cols);
                &cols
            };
            gemm(out_ch, g.col_cols(), g.col_rows(), dyi, false, src, true, 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx[i * in_sz..(i + 1) * in_sz];
            if g.is_pointwise() {
                gemm(g.col_rows(), out_ch, g.col_cols(), w, true, dyi, false, 1.0, dxi);
            } else {
                gemm(g.col_rows(), out_ch, g.col_cols(), w, true, dyi, false, 0.0, &mut cols);
                col2im(&cols, g, dxi);
            }
        }
    }
    (dx, dw)
}

/// Transposed convolution. `g` describes the *forward* correlation that maps
/// the output planes (`g.channels` = output channels) back onto the input
/// (`g.out_h × g.out_w`), so `x: N×Cin×OH×OW`, `w: Cin×Cout×K×K`.
pub fn conv_transpose2d_forward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    w: &[f64],
    in_ch: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let in_sz = in_ch * g.col_cols();
    let out_plane = g.height * g.width;
    let out_sz = g.channels * out_plane;
    let mut out = vec![0.0; n * out_sz];
    let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
    for i in 0..n {
        let xi = &x[i * in_sz..(i + 1) * in_sz];
        let y = &mut out[i * out_sz..(i + 1) * out_sz];
        gemm(g.col_rows(), in_ch, g.col_cols(), w, true, xi, false, 0.0, &mut cols);
        col2im(&cols, g, y);
        if let Some(b) = bias {
            for (o, plane) in y.chunks_mut(out_plane).enumerate() {
                plane.iter_mut().for_each(|v| *v += b[o]);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    w: &[f64],
    in_ch: usize,
    dy: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let in_sz = in_ch * g.col_cols();
    let out_sz = g.channels * g.height * g.width;
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dw = want_dw.then(|| vec![0.0; w.len()]);
    let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
    for i in 0..n {
        im2col(&dy[i * out_sz..(i + 1) * out_sz], g, &mut cols);
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx[i * in_sz..(i + 1) * in_sz];
            gemm(in_ch, g.col_rows(), g.col_cols(), w, false, &cols, false, 0.0, dxi);
        }
        if let Some(dw) = dw.as_mut() {
            let xi = &x[i * in_sz..(i + 1) * in_sz];
            gemm(in_ch, g.col_cols(), g.col_rows(), xi, false, &cols, true, 1.0, dw);
        }
    }
    (dx, dw)
}

/// Per-channel sum over batch and spatial positions (bias gradients).
pub fn channel_sums(dy: &[f64], n: usize, ch: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; ch];
    for i in 0..n {
        for (c, acc) in out.iter_mut().enumerate() {
            let start = (i * ch + c) * plane;
            *acc += dy[start..start + plane].iter().sum::<f64>();
        }
    }
    out
}

/// 2×2/stride-2 max pooling over `planes` planes of `h×w`. Returns the pooled
/// values and, per output, the flat input offset of the winning element
/// (first maximum in row-major order).
pub fn max_pool2x2(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Instance normalization statistics and output. Returns `(y, xhat, inv_std)`.
pub fn instance_norm_forward(
    x: &[f64],
    n: usize,
    ch: usize,
    plane: usize,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv = vec![0.0; n * ch];
    for i in 0..n {
        for c in 0..ch {
            let s = (i * ch + c) * plane;
            let xs = &x[s..s + plane];
            let mean = xs.iter().sum::<f64>() / plane as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv[i * ch + c] = is;
            for (k, v) in xs.iter().enumerate() {
                let h = (v - mean) * is;
                xhat[s + k] = h;
                y[s + k] = gain[c] * h + bias[c];
            }
        }
    }
    (y, xhat, inv)
}

/// Returns `(dx, dgain, dbias)`.
#[allow(clippy::too_many_arguments)]
pub fn instance_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    n: usize,
    ch: usize,
    plane: usize,
    gain: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; dy.len()];
    let mut dgain = vec![0.0; ch];
    let mut dbias = vec![0.0; ch];
    let m = plane as f64;
    for i in 0..n {
        for c in 0..ch {
            let s = (i * ch + c) * plane;
            let d = &dy[s..s + plane];
            let h = &xhat[s..s + plane];
            let mut sum_d = 0.0;
            let mut sum_dh = 0.0;
            for k in 0..plane {
                sum_d += d[k];
                sum_dh += d[k] * h[k];
            }
            dgain[c] += sum_dh;
            dbias[c] += sum_d;
            let g = gain[c];
            let is = inv_std[i * ch + c];
            for k in 0..plane {
                dx[s + k] = g * is / m * (m * d[k] - sum_d - h[k] * sum_dh);
            }
        }
    }
    (dx, dgain, dbias)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop correlation used as an oracle for the lowered kernel.
    fn naive_conv(x: &[f64], n: usize, g: &ConvGeom, w: &[f64], out_ch: usize, b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; n * out_ch * g.out_h * g.out_w];
        for i in 0..n {
            for o in 0..out_ch {
                for oh in 0..g.out_h {
                    for ow in 0..g.out_w {
                        let mut acc = b[o];
                        for c in 0..g.channels {
                            for ki in 0..g.kernel {
                                for kj in 0..g.kernel {
                                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                                    let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                                    if ih < 0 || iw < 0 || ih >= g.height as isize || iw >= g.width as isize {
                                        continue;
                                    }
                                    let xv = x[((i * g.channels + c) * g.height + ih as usize) * g.width + iw as usize];
                                    let wv = w[((o * g.channels + c) * g.kernel + ki) * g.kernel + kj];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((i * out_ch + o) * g.out_h + oh) * g.out_w + ow] = acc;
                    }
                }
            }
        }
        out
    }

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn lowered_conv_matches_direct_loops() {
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
            let g = ConvGeom::new(2, 5, 5, 3, stride, pad).unwrap();
            let x = lcg(1, 2 * 5 * 5);
            let w = lcg(2, 3 * 2 * 9);
            let b = lcg(3, 3);
            let fast = conv2d_forward(&x, 1, &g, &w, 3, Some(&b));
            let slow = naive_conv(&x, 1, &g, &w, 3, &b);
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(3, 6, 5, 3, 2, 1).unwrap();
        let img = lcg(5, 3 * 6 * 5);
        let cols_r = lcg(6, g.col_rows() * g.col_cols());
        let mut cols = vec![0.0; cols_r.len()];
        im2col(&img, &g, &mut cols);
        let mut back = vec![0.0; img.len()];
        col2im(&cols_r, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&cols_r).map(|(a, b)| a * b).sum();
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pool_tie_goes_to_first() {
        let x = [5.0, 5.0, 0.0, 0.0];
        let (v, a) = max_pool2x2(&x, 1, 2, 2);
        assert_eq!(v, vec![5.0]);
        assert_eq!(a, vec![0]);
    }
}

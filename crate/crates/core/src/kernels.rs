//! Raw NCHW kernels: im2col convolution, transposed convolution, padding and pooling.
//!
//! All functions take flat slices plus explicit geometry; shape checking lives in
//! the graph layer.

use crate::par;
use crate::tensor::{gemm_ex, Layout};

/// Geometry of a 2-D convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Output size of a convolution, `None` if the window does not fit.
    pub fn conv(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        let ph = height + 2 * pad;
        let pw = width + 2 * pad;
        if ph < kernel || pw < kernel || stride == 0 {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
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
}

/// Unfold one `[C, H, W]` sample into `[C*k*k, OH*OW]` columns (zero padding).
pub fn im2col(input: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let k = g.kernel;
    let l = g.out_h * g.out_w;
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold `[C*k*k, OH*OW]` columns back onto a `[C, H, W]` sample, accumulating.
pub fn col2im(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let k = g.kernel;
    let l = g.out_h * g.out_w;
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let srow = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution forward. `weight: [O, C*k*k]`, output `[B, O, OH, OW]`.
pub fn conv2d_forward(
    input: &[f64],
    batch: usize,
    g: &ConvGeom,
    weight: &[f64],
    out_channels: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let in_per = g.channels * g.height * g.width;
    let l = g.col_cols();
    let mut out = vec![0.0; batch * out_channels * l];
    par::for_each_chunk_mut(&mut out, out_channels * l, |b, o| {
        let mut cols = vec![0.0; g.col_rows() * l];
        im2col(&input[b * in_per..(b + 1) * in_per], g, &mut cols);
        gemm_ex(
            out_channels,
            g.col_rows(),
            l,
            weight,
            Layout::N,
            &cols,
            Layout::N,
            o,
            0.0,
        );
        if let Some(bias) = bias {
            for (oc, row) in o.chunks_mut(l).enumerate() {
                let bv = bias[oc];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    out
}

/// Gradients of a batched convolution. Returns `(d_input, d_weight, d_bias)`;
/// each is only computed when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &[f64],
    batch: usize,
    g: &ConvGeom,
    weight: &[f64],
    out_channels: usize,
    grad_out: &[f64],
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let in_per = g.channels * g.height * g.width;
    let l = g.col_cols();
    let rows = g.col_rows();
    let out_per = out_channels * l;

    let d_input = want_input.then(|| {
        let mut dx = vec![0.0; batch * in_per];
        par::for_each_chunk_mut(&mut dx, in_per, |b, dxb| {
            let mut dcols = vec![0.0; rows * l];
            gemm_ex(
                rows,
                out_channels,
                l,
                weight,
                Layout::T,
                &grad_out[b * out_per..(b + 1) * out_per],
                Layout::N,
                &mut dcols,
                0.0,
            );
            col2im(&dcols, g, dxb);
        });
        dx
    });

    let d_weight = want_weight.then(|| {
        let partial = par::map_range(batch, |b| {
            let mut cols = vec![0.0; rows * l];
            im2col(&input[b * in_per..(b + 1) * in_per], g, &mut cols);
            let mut dw = vec![0.0; out_channels * rows];
            gemm_ex(
                out_channels,
                l,
                rows,
                &grad_out[b * out_per..(b + 1) * out_per],
                Layout::N,
                &cols,
                Layout::T,
                &mut dw,
                0.0,
            );
            dw
        });
        sum_in_order(partial)
    });

    let d_bias = want_bias.then(|| {
        let mut db = vec![0.0; out_channels];
        for b in 0..batch {
            for (oc, row) in grad_out[b * out_per..(b + 1) * out_per]
                .chunks(l)
                .enumerate()
            {
                db[oc] += row.iter().sum::<f64>();
            }
        }
        db
    });

    (d_input, d_weight, d_bias)
}

/// Geometry of a transposed convolution: `in_h × in_w` upsampled to `out_h × out_w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTransposeGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvTransposeGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        in_h: usize,
        in_w: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Option<Self> {
        let oh = ((in_h - 1) * stride + kernel + output_pad).checked_sub(2 * pad)?;
        let ow = ((in_w - 1) * stride + kernel + output_pad).checked_sub(2 * pad)?;
        Some(Self {
            in_channels,
            out_channels,
            in_h,
            in_w,
            kernel,
            stride,
            pad,
            out_h: oh,
            out_w: ow,
        })
    }

    /// The equivalent forward-convolution geometry whose col2im scatters onto the output.
    fn as_conv(&self) -> ConvGeom {
        ConvGeom {
            channels: self.out_channels,
            height: self.out_h,
            width: self.out_w,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
            out_h: self.in_h,
            out_w: self.in_w,
        }
    }
}

/// Transposed convolution forward. `weight: [I, O*k*k]`.
pub fn conv_transpose2d_forward(
    input: &[f64],
    batch: usize,
    g: &ConvTransposeGeom,
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let cg = g.as_conv();
    let in_per = g.in_channels * g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let out_per = g.out_channels * out_plane;
    let l = g.in_h * g.in_w;
    let rows = cg.col_rows();
    let mut out = vec![0.0; batch * out_per];
    par::for_each_chunk_mut(&mut out, out_per, |b, o| {
        let mut cols = vec![0.0; rows * l];
        gemm_ex(
            rows,
            g.in_channels,
            l,
            weight,
            Layout::T,
            &input[b * in_per..(b + 1) * in_per],
            Layout::N,
            &mut cols,
            0.0,
        );
        col2im(&cols, &cg, o);
        if let Some(bias) = bias {
            for (oc, plane) in o.chunks_mut(out_plane).enumerate() {
                let bv = bias[oc];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward(
    input: &[f64],
    batch: usize,
    g: &ConvTransposeGeom,
    weight: &[f64],
    grad_out: &[f64],
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let cg = g.as_conv();
    let in_per = g.in_channels * g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let out_per = g.out_channels * out_plane;
    let l = g.in_h * g.in_w;
    let rows = cg.col_rows();

    let unfold = |b: usize| {
        let mut cols = vec![0.0; rows * l];
        im2col(&grad_out[b * out_per..(b + 1) * out_per], &cg, &mut cols);
        cols
    };

    let d_input = want_input.then(|| {
        let mut dx = vec![0.0; batch * in_per];
        par::for_each_chunk_mut(&mut dx, in_per, |b, dxb| {
            let cols = unfold(b);
            gemm_ex(
                g.in_channels,
                rows,
                l,
                weight,
                Layout::N,
                &cols,
                Layout::N,
                dxb,
                0.0,
            );
        });
        dx
    });

    let d_weight = want_weight.then(|| {
        let partial = par::map_range(batch, |b| {
            let cols = unfold(b);
            let mut dw = vec![0.0; g.in_channels * rows];
            gemm_ex(
                g.in_channels,
                l,
                rows,
                &input[b * in_per..(b + 1) * in_per],
                Layout::N,
                &cols,
                Layout::T,
                &mut dw,
                0.0,
            );
            dw
        });
        sum_in_order(partial)
    });

    let d_bias = want_bias.then(|| {
        let mut db = vec![0.0; g.out_channels];
        for b in 0..batch {
            for (oc, plane) in grad_out[b * out_per..(b + 1) * out_per]
                .chunks(out_plane)
                .enumerate()
            {
                db[oc] += plane.iter().sum::<f64>();
            }
        }
        db
    });

    (d_input, d_weight, d_bias)
}

fn sum_in_order(parts: Vec<Vec<f64>>) -> Vec<f64> {
    let mut it = parts.into_iter();
    let mut acc = it.next().unwrap_or_default();
    for p in it {
        acc.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
    }
    acc
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// Reflection padding of every plane in `[planes, H, W]` by `p` pixels.
pub fn reflect_pad(input: &[f64], planes: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; planes * ph * pw];
    par::for_each_chunk_mut(&mut out, ph * pw, |c, o| {
        let src = &input[c * h * w..(c + 1) * h * w];
        for y in 0..ph {
            let sy = reflect(y as isize - p as isize, h);
            for x in 0..pw {
                let sx = reflect(x as isize - p as isize, w);
                o[y * pw + x] = src[sy * w + sx];
            }
        }
    });
    out
}

/// Adjoint of [`reflect_pad`]: accumulate padded gradients back onto the source planes.
pub fn reflect_pad_backward(grad: &[f64], planes: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; planes * h * w];
    par::for_each_chunk_mut(&mut out, h * w, |c, o| {
        let src = &grad[c * ph * pw..(c + 1) * ph * pw];
        for y in 0..ph {
            let sy = reflect(y as isize - p as isize, h);
            for x in 0..pw {
                let sx = reflect(x as isize - p as isize, w);
                o[sy * w + sx] += src[y * pw + x];
            }
        }
    });
    out
}

/// 2×2 stride-2 max pooling over `[planes, H, W]`; returns values and flat argmax indices.
pub fn max_pool2(input: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    let mut arg = vec![0usize; planes * oh * ow];
    for c in 0..planes {
        let base = c * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = base + (2 * y + dy) * w + 2 * x + dx;
                        if input[i] > best {
                            best = input[i];
                            bi = i;
                        }
                    }
                }
                let o = (c * oh + y) * ow + x;
                out[o] = best;
                arg[o] = bi;
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(input: &[f64], g: &ConvGeom, weight: &[f64], out_channels: usize) -> Vec<f64> {
        let k = g.kernel;
        let mut out = vec![0.0; out_channels * g.out_h * g.out_w];
        for o in 0..out_channels {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut s = 0.0;
                    for c in 0..g.channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0
                                    || ix < 0
                                    || iy >= g.height as isize
                                    || ix >= g.width as isize
                                {
                                    continue;
                                }
                                s += input[(c * g.height + iy as usize) * g.width + ix as usize]
                                    * weight[((o * g.channels + c) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[(o * g.out_h + oy) * g.out_w + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        let g = ConvGeom::conv(3, 9, 7, 4, 2, 1).unwrap();
        let input: Vec<f64> = (0..3 * 9 * 7)
            .map(|i| ((i * 7) % 13) as f64 - 6.0)
            .collect();
        let weight: Vec<f64> = (0..5 * 3 * 16)
            .map(|i| ((i * 5) % 11) as f64 * 0.1)
            .collect();
        let got = conv2d_forward(&input, 1, &g, &weight, 5, None);
        let want = direct_conv(&input, &g, &weight, 5);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn conv_output_sizes() {
        let g = ConvGeom::conv(3, 256, 256, 4, 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (128, 128));
        assert!(ConvGeom::conv(3, 2, 2, 4, 1, 0).is_none());
        let t = ConvTransposeGeom::new(8, 4, 16, 16, 3, 2, 1, 1).unwrap();
        assert_eq!((t.out_h, t.out_w), (32, 32));
    }

    #[test]
    fn transpose_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_transpose(y)> with shared weights
        let cg = ConvGeom::conv(2, 8, 8, 3, 2, 1).unwrap();
        let tg = ConvTransposeGeom::new(3, 2, cg.out_h, cg.out_w, 3, 2, 1, 1).unwrap();
        assert_eq!((tg.out_h, tg.out_w), (8, 8));
        let x: Vec<f64> = (0..2 * 64).map(|i| (i as f64 * 0.3).sin()).collect();
        let y: Vec<f64> = (0..3 * cg.out_h * cg.out_w)
            .map(|i| (i as f64 * 0.7).cos())
            .collect();
        // conv weight [3, 2*9]; transposed weight [in=3, out=2*9] is the same buffer
        let w: Vec<f64> = (0..3 * 18).map(|i| (i as f64 * 0.13).sin()).collect();
        let cx = conv2d_forward(&x, 1, &cg, &w, 3, None);
        let ty = conv_transpose2d_forward(&y, 1, &tg, &w, None);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&ty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn reflect_pad_matches_numpy_convention() {
        // [1 2 3] padded by 2 -> [3 2 1 2 3 2 1]
        let x: Vec<f64> = (1..=9).map(f64::from).collect();
        let out = reflect_pad(&x, 1, 3, 3, 2);
        assert_eq!(&out[2 * 7..3 * 7], &[3.0, 2.0, 1.0, 2.0, 3.0, 2.0, 1.0]);
        // row 0 of the padded plane mirrors source row 2
        assert_eq!(&out[..7], &[9.0, 8.0, 7.0, 8.0, 9.0, 8.0, 7.0]);
    }

    #[test]
    fn reflect_pad_backward_is_adjoint() {
        let (h, w, p) = (4, 5, 2);
        let x: Vec<f64> = (0..h * w).map(|i| (i as f64).sin()).collect();
        let gy: Vec<f64> = (0..(h + 2 * p) * (w + 2 * p))
            .map(|i| (i as f64 * 0.5).cos())
            .collect();
        let px = reflect_pad(&x, 1, h, w, p);
        let gx = reflect_pad_backward(&gy, 1, h, w, p);
        let lhs: f64 = px.iter().zip(&gy).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}

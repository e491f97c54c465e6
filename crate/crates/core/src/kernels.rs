//! Low-level numeric kernels shared by the graph ops: matrix products,
//! im2col lowering for convolutions and bilinear resampling tables.

/// `c = a·b + beta·c` where `a` is `m×k` and `b` is `k×n`, each optionally
/// stored transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Rows of the lowered matrix: one per (channel, kernel row, kernel col).
    pub fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Columns of the lowered matrix: one per output location.
    pub fn locations(&self) -> usize {
        self.n * self.out_h * self.out_w
    }
}

/// Lower `x` (NCHW) into a `patch_len × locations` matrix.
pub fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let cols_n = g.locations();
    let plane_out = g.out_h * g.out_w;
    let mut cols = vec![0.0; g.patch_len() * cols_n];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let base = n * plane_out + oh * g.out_w;
                        let src_row = &src[ih as usize * g.w..(ih as usize + 1) * g.w];
                        for ow in 0..g.out_w {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst[base + ow] = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add a lowered matrix back into NCHW.
pub fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let cols_n = g.locations();
    let plane_out = g.out_h * g.out_w;
    let mut x = vec![0.0; g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.n {
                    let dst = &mut x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let base = n * plane_out + oh * g.out_w;
                        for ow in 0..g.out_w {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst[ih as usize * g.w + iw as usize] += src[base + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[C', N·P]` (channel-major) to `[N, C', P]`.
pub fn channel_major_to_nchw(m: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; m.len()];
    for ci in 0..c {
        for ni in 0..n {
            let src = &m[(ci * n + ni) * plane..(ci * n + ni + 1) * plane];
            out[(ni * c + ci) * plane..(ni * c + ci + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

/// `[N, C', P]` to `[C', N·P]`.
pub fn nchw_to_channel_major(x: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let src = &x[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
            out[(ci * n + ni) * plane..(ci * n + ni + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

/// One output coordinate's two source taps and weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

/// Half-pixel (align-corners = false) sampling taps for resizing one axis
/// from `input` to `output` samples.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let w1 = src - i0 as f64;
            Tap { i0, i1, w0: 1.0 - w1, w1 }
        })
        .collect()
}

/// Resize every `h×w` plane of `x` to `out_h×out_w`.
pub fn resize_planes(x: &[f64], planes: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = vec![0.0; planes * out_h * out_w];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, y) in ty.iter().enumerate() {
            for (ox, xx) in tx.iter().enumerate() {
                dst[oy * out_w + ox] = y.w0 * (xx.w0 * src[y.i0 * w + xx.i0] + xx.w1 * src[y.i0 * w + xx.i1])
                    + y.w1 * (xx.w0 * src[y.i1 * w + xx.i0] + xx.w1 * src[y.i1 * w + xx.i1]);
            }
        }
    }
    out
}

/// Transpose of [`resize_planes`].
pub fn resize_planes_adjoint(
    dy: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &dy[p * out_h * out_w..(p + 1) * out_h * out_w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, y) in ty.iter().enumerate() {
            for (ox, xx) in tx.iter().enumerate() {
                let g = src[oy * out_w + ox];
                dst[y.i0 * w + xx.i0] += y.w0 * xx.w0 * g;
                dst[y.i0 * w + xx.i1] += y.w0 * xx.w1 * g;
                dst[y.i1 * w + xx.i0] += y.w1 * xx.w0 * g;
                dst[y.i1 * w + xx.i1] += y.w1 * xx.w1 * g;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3x2 storage of a^T
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut c1 = vec![0.0; 4];
        let mut c2 = vec![0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, 0.0, &mut c1);
        gemm(2, 3, 2, &at, true, &b, false, 0.0, &mut c2);
        assert_eq!(c1, vec![4.0, 5.0, 10.0, 11.0]);
        assert_eq!(c1, c2);
    }

    #[test]
    fn taps_double_resolution() {
        let taps = bilinear_taps(2, 4);
        assert_eq!(taps[0], Tap { i0: 0, i1: 1, w0: 1.0, w1: 0.0 });
        assert_eq!(taps[1], Tap { i0: 0, i1: 1, w0: 0.75, w1: 0.25 });
        assert_eq!(taps[2], Tap { i0: 0, i1: 1, w0: 0.25, w1: 0.75 });
        assert_eq!(taps[3].i0, 1);
    }

    #[test]
    fn layout_permutations_invert() {
        let x: Vec<f64> = (0..24).map(f64::from).collect();
        let m = nchw_to_channel_major(&x, 2, 3, 4);
        assert_eq!(channel_major_to_nchw(&m, 2, 3, 4), x);
    }
}

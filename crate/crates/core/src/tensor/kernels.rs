//! Dense kernels behind the tape ops.
//!
//! `gemm` wraps `matrixmultiply::sgemm`, which is single-threaded and whose
//! per-element accumulation order depends only on the inner dimension. Work
//! is split across images (never across an inner dimension), so parallel and
//! sequential runs agree bit for bit.

use crate::exec;

/// `c = a · b + beta · c` for row-major `a: [m,k]`, `b: [k,n]`, `c: [m,n]`.
/// `ta`/`tb` read the operand as its transpose of a row-major buffer.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe buffers whose lengths were checked above.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 3×3 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * 9
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Unfold one `[C,H,W]` image into `[C·9, Ho·Wo]` patch columns.
pub fn im2col(img: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let p = g.out_pixels();
    for c in 0..g.channels {
        let plane = &img[c * g.in_pixels()..(c + 1) * g.in_pixels()];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(c * 9 + ky * 3 + kx) * p..(c * 9 + ky * 3 + kx + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in dst.iter_mut().enumerate() {
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

/// Adjoint of [`im2col`]: scatter-add patch columns back into an image.
pub fn col2im_add(col: &[f32], g: &ConvGeom, img: &mut [f32]) {
    let p = g.out_pixels();
    for c in 0..g.channels {
        let plane = &mut img[c * g.in_pixels()..(c + 1) * g.in_pixels()];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(c * 9 + ky * 3 + kx) * p..(c * 9 + ky * 3 + kx + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            plane[base + ix as usize] += row[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution for a batch `x: [M,C,H,W]`, kernels `[F,C,3,3]`.
pub fn conv2d_forward(x: &[f32], k: &[f32], g: &ConvGeom, batch: usize) -> Vec<f32> {
    let out_len = g.filters * g.out_pixels();
    let mut out = vec![0.0f32; batch * out_len];
    let in_len = g.channels * g.in_pixels();
    exec::for_each_chunk_mut(&mut out, out_len, |i, dst| {
        let mut col = vec![0.0f32; g.col_rows() * g.out_pixels()];
        im2col(&x[i * in_len..(i + 1) * in_len], g, &mut col);
        gemm(
            g.filters,
            g.col_rows(),
            g.out_pixels(),
            k,
            false,
            &col,
            false,
            0.0,
            dst,
        );
    });
    out
}

/// Images per partial kernel-gradient accumulator. Fixed so the reduction
/// tree does not depend on the thread count.
const DK_GROUP: usize = 8;

/// Kernel gradient `Σ_i dOut_i · col_iᵀ` for a batch.
pub fn conv2d_backward_kernel(x: &[f32], dout: &[f32], g: &ConvGeom, batch: usize) -> Vec<f32> {
    let in_len = g.channels * g.in_pixels();
    let out_len = g.filters * g.out_pixels();
    let klen = g.filters * g.col_rows();
    let groups = batch.div_ceil(DK_GROUP);
    let partials = exec::map_range(groups, |grp| {
        let mut acc = vec![0.0f32; klen];
        let mut col = vec![0.0f32; g.col_rows() * g.out_pixels()];
        for i in grp * DK_GROUP..((grp + 1) * DK_GROUP).min(batch) {
            im2col(&x[i * in_len..(i + 1) * in_len], g, &mut col);
            gemm(
                g.filters,
                g.out_pixels(),
                g.col_rows(),
                &dout[i * out_len..(i + 1) * out_len],
                false,
                &col,
                true,
                1.0,
                &mut acc,
            );
        }
        acc
    });
    let mut dk = vec![0.0f32; klen];
    for p in &partials {
        dk.iter_mut().zip(p).for_each(|(d, v)| *d += v);
    }
    dk
}

/// Input gradient `col2im(Kᵀ · dOut_i)` for a batch.
pub fn conv2d_backward_input(k: &[f32], dout: &[f32], g: &ConvGeom, batch: usize) -> Vec<f32> {
    let in_len = g.channels * g.in_pixels();
    let out_len = g.filters * g.out_pixels();
    let mut dx = vec![0.0f32; batch * in_len];
    exec::for_each_chunk_mut(&mut dx, in_len, |i, dst| {
        let mut dcol = vec![0.0f32; g.col_rows() * g.out_pixels()];
        gemm(
            g.col_rows(),
            g.filters,
            g.out_pixels(),
            k,
            true,
            &dout[i * out_len..(i + 1) * out_len],
            false,
            0.0,
            &mut dcol,
        );
        col2im_add(&dcol, g, dst);
    });
    dx
}

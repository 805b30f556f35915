//! im2col convolution kernels shared by the forward and backward passes.

use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.in_channels * self.height * self.width
    }
}

/// Unfolds one sample into a `(C*kh*kw, out_h*out_w)` matrix.
fn im2col<T: Real>(g: &ConvGeometry, input: &[T], col: &mut [T]) {
    let plane = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let src = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
fn col2im_add<T: Real>(g: &ConvGeometry, col: &[T], grad_input: &mut [T]) {
    let plane = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let dst = &mut grad_input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[base + ix as usize] = dst[base + ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Real>(g: &ConvGeometry, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let plane = g.out_plane();
    let k = g.patch_len();
    let mut out = vec![T::zero(); g.batch * g.out_channels * plane];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    for n in 0..g.batch {
        let sample = &input[n * g.in_sample()..(n + 1) * g.in_sample()];
        let dst = &mut out[n * g.out_channels * plane..(n + 1) * g.out_channels * plane];
        for (o, row) in dst.chunks_mut(plane).enumerate() {
            row.fill(bias[o]);
        }
        let patches: &[T] = if g.is_pointwise() {
            sample
        } else {
            im2col(g, sample, &mut col);
            &col
        };
        T::gemm(
            g.out_channels,
            k,
            plane,
            T::one(),
            weight,
            (k as isize, 1),
            patches,
            (plane as isize, 1),
            T::one(),
            dst,
            (plane as isize, 1),
        );
    }
    out
}

/// Accumulates whichever of the three gradients are requested.
pub(crate) fn backward<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    mut grad_input: Option<&mut [T]>,
    mut grad_weight: Option<&mut [T]>,
    mut grad_bias: Option<&mut [T]>,
) {
    let plane = g.out_plane();
    let k = g.patch_len();
    let pointwise = g.is_pointwise();
    let mut col = vec![T::zero(); if pointwise { 0 } else { k * plane }];
    let mut dcol = vec![T::zero(); if pointwise { 0 } else { k * plane }];
    for n in 0..g.batch {
        let sample = &input[n * g.in_sample()..(n + 1) * g.in_sample()];
        let dout = &grad_out[n * g.out_channels * plane..(n + 1) * g.out_channels * plane];
        if let Some(db) = grad_bias.as_deref_mut() {
            for (o, row) in dout.chunks(plane).enumerate() {
                db[o] = row.iter().fold(db[o], |acc, &v| acc + v);
            }
        }
        if let Some(dw) = grad_weight.as_deref_mut() {
            let patches: &[T] = if pointwise {
                sample
            } else {
                im2col(g, sample, &mut col);
                &col
            };
            // dW += dOut * patches^T
            T::gemm(
                g.out_channels,
                plane,
                k,
                T::one(),
                dout,
                (plane as isize, 1),
                patches,
                (1, plane as isize),
                T::one(),
                dw,
                (k as isize, 1),
            );
        }
        if let Some(dx) = grad_input.as_deref_mut() {
            let dst = &mut dx[n * g.in_sample()..(n + 1) * g.in_sample()];
            if pointwise {
                // dX += W^T * dOut
                T::gemm(
                    k,
                    g.out_channels,
                    plane,
                    T::one(),
                    weight,
                    (1, k as isize),
                    dout,
                    (plane as isize, 1),
                    T::one(),
                    dst,
                    (plane as isize, 1),
                );
            } else {
                T::gemm(
                    k,
                    g.out_channels,
                    plane,
                    T::one(),
                    weight,
                    (1, k as isize),
                    dout,
                    (plane as isize, 1),
                    T::zero(),
                    &mut dcol,
                    (plane as isize, 1),
                );
                col2im_add(g, &dcol, dst);
            }
        }
    }
}

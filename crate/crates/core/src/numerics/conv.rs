//! im2col kernels shared by 2-D and 3-D convolution (2-D is depth 1).

use super::{gemm, Real};

/// Upper bound on im2col scratch, in elements, per batch chunk.
const COLS_BUDGET: usize = 1 << 23;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_depth: usize,
    pub kernel: usize,
    pub stride_depth: usize,
    pub stride: usize,
    pub pad_depth: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_depth(&self) -> usize {
        (self.depth + 2 * self.pad_depth - self.kernel_depth) / self.stride_depth + 1
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn in_size(&self) -> usize {
        self.in_channels * self.depth * self.height * self.width
    }

    fn out_positions(&self) -> usize {
        self.out_depth() * self.out_height() * self.out_width()
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_depth * self.kernel * self.kernel
    }

    fn chunk(&self) -> usize {
        (COLS_BUDGET / (self.patch_len() * self.out_positions()).max(1)).max(1)
    }
}

/// Writes one sample's patches into columns `[col0, col0 + positions)` of a
/// `patch_len × total_cols` matrix.
fn im2col<T: Real>(g: &ConvGeometry, input: &[T], cols: &mut [T], col0: usize, total_cols: usize) {
    let (od, oh, ow) = (g.out_depth(), g.out_height(), g.out_width());
    let (d, h, w) = (g.depth, g.height, g.width);
    let mut row = 0;
    for c in 0..g.in_channels {
        for kz in 0..g.kernel_depth {
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let dst = &mut cols[row * total_cols + col0..row * total_cols + col0 + od * oh * ow];
                    let mut p = 0;
                    for z in 0..od {
                        let iz = (z * g.stride_depth + kz) as isize - g.pad_depth as isize;
                        for y in 0..oh {
                            let iy = (y * g.stride + ky) as isize - g.pad as isize;
                            let run = &mut dst[p..p + ow];
                            p += ow;
                            if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                                run.fill(T::zero());
                                continue;
                            }
                            let base = ((c * d + iz as usize) * h + iy as usize) * w;
                            for (x, slot) in run.iter_mut().enumerate() {
                                let ix = (x * g.stride + kx) as isize - g.pad as isize;
                                *slot = if ix < 0 || ix >= w as isize {
                                    T::zero()
                                } else {
                                    input[base + ix as usize]
                                };
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Inverse scatter of [`im2col`], accumulating into `grad_input`.
fn col2im<T: Real>(
    g: &ConvGeometry,
    cols: &[T],
    col0: usize,
    total_cols: usize,
    grad_input: &mut [T],
) {
    let (od, oh, ow) = (g.out_depth(), g.out_height(), g.out_width());
    let (d, h, w) = (g.depth, g.height, g.width);
    let mut row = 0;
    for c in 0..g.in_channels {
        for kz in 0..g.kernel_depth {
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let src = &cols[row * total_cols + col0..row * total_cols + col0 + od * oh * ow];
                    let mut p = 0;
                    for z in 0..od {
                        let iz = (z * g.stride_depth + kz) as isize - g.pad_depth as isize;
                        for y in 0..oh {
                            let iy = (y * g.stride + ky) as isize - g.pad as isize;
                            let run = &src[p..p + ow];
                            p += ow;
                            if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base = ((c * d + iz as usize) * h + iy as usize) * w;
                            for (x, v) in run.iter().enumerate() {
                                let ix = (x * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    grad_input[base + ix as usize] += *v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Batched convolution forward. `input` holds `batch` samples.
pub fn conv_forward<T: Real>(
    g: &ConvGeometry,
    batch: usize,
    input: &[T],
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let positions = g.out_positions();
    let patch = g.patch_len();
    let oc = g.out_channels;
    let mut out = vec![T::zero(); batch * oc * positions];
    let chunk = g.chunk();
    let mut cols = vec![T::zero(); patch * positions * chunk.min(batch)];
    let mut prod = vec![T::zero(); oc * positions * chunk.min(batch)];
    let mut start = 0;
    while start < batch {
        let nb = chunk.min(batch - start);
        let total = nb * positions;
        for b in 0..nb {
            let n = start + b;
            im2col(g, &input[n * g.in_size()..(n + 1) * g.in_size()], &mut cols, b * positions, total);
        }
        gemm(oc, patch, total, weight, false, &cols[..patch * total], false, &mut prod[..oc * total], false);
        for b in 0..nb {
            let n = start + b;
            for o in 0..oc {
                let src = &prod[o * total + b * positions..o * total + (b + 1) * positions];
                let dst = &mut out[(n * oc + o) * positions..(n * oc + o + 1) * positions];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *s + bias[o];
                }
            }
        }
        start += nb;
    }
    out
}

/// Gradients of a batched convolution. Returns `(d_input, d_weight, d_bias)`;
/// `d_input` is only computed when requested.
pub fn conv_backward<T: Real>(
    g: &ConvGeometry,
    batch: usize,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    want_input_grad: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let positions = g.out_positions();
    let patch = g.patch_len();
    let oc = g.out_channels;
    let mut d_weight = vec![T::zero(); oc * patch];
    let mut d_bias = vec![T::zero(); oc];
    let mut d_input = want_input_grad.then(|| vec![T::zero(); batch * g.in_size()]);
    let chunk = g.chunk();
    let cap = chunk.min(batch);
    let mut cols = vec![T::zero(); patch * positions * cap];
    let mut dprod = vec![T::zero(); oc * positions * cap];
    let mut start = 0;
    while start < batch {
        let nb = chunk.min(batch - start);
        let total = nb * positions;
        for b in 0..nb {
            let n = start + b;
            im2col(g, &input[n * g.in_size()..(n + 1) * g.in_size()], &mut cols, b * positions, total);
            for o in 0..oc {
                let src = &grad_out[(n * oc + o) * positions..(n * oc + o + 1) * positions];
                dprod[o * total + b * positions..o * total + (b + 1) * positions].copy_from_slice(src);
                d_bias[o] += src.iter().copied().sum::<T>();
            }
        }
        gemm(oc, total, patch, &dprod[..oc * total], false, &cols[..patch * total], true, &mut d_weight, true);
        if let Some(d_in) = d_input.as_mut() {
            gemm(patch, oc, total, weight, true, &dprod[..oc * total], false, &mut cols[..patch * total], false);
            for b in 0..nb {
                let n = start + b;
                col2im(g, &cols[..patch * total], b * positions, total, &mut d_in[n * g.in_size()..(n + 1) * g.in_size()]);
            }
        }
        start += nb;
    }
    (d_input, d_weight, d_bias)
}

//! Spatial kernels over token grids: depthwise pooling convolution and the
//! patch extraction used by convolutional stems.
//!
//! Tokens are stored as `[B, H·W, C]` with the grid flattened row-major.
//! Depthwise pooling uses "same" zero padding: a kernel of extent `k` pads
//! `(k − 1) / 2` cells before and the remainder after, so a stride `s`
//! produces `⌈H/s⌉ × ⌈W/s⌉` outputs for any kernel size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meter;
use crate::tensor::{Scalar, Tensor};

/// Height and width of a token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w }
    }

    pub fn square(side: usize) -> Self {
        Self { h: side, w: side }
    }

    pub fn tokens(self) -> usize {
        self.h * self.w
    }

    /// Output grid of a same-padded strided pooling.
    pub fn pooled(self, stride: (usize, usize)) -> Self {
        Self {
            h: self.h.div_ceil(stride.0),
            w: self.w.div_ceil(stride.1),
        }
    }
}

struct DwGeometry {
    batch: usize,
    channels: usize,
    kh: usize,
    kw: usize,
    pad_top: usize,
    pad_left: usize,
    input: Grid,
    output: Grid,
}

fn dw_geometry<T: Scalar>(
    x: &Tensor<T>,
    grid: Grid,
    kernel: &Tensor<T>,
    stride: (usize, usize),
) -> Result<DwGeometry> {
    let [batch, n, channels] = *x.shape() else {
        return Err(Error::dim(
            "depthwise_conv_pool",
            x.shape(),
            &[grid.h, grid.w],
        ));
    };
    if n != grid.tokens() {
        return Err(Error::dim(
            "depthwise_conv_pool",
            x.shape(),
            &[grid.h, grid.w],
        ));
    }
    let [kh, kw, kc] = *kernel.shape() else {
        return Err(Error::dim("depthwise_conv_pool", x.shape(), kernel.shape()));
    };
    if kc != channels || stride.0 == 0 || stride.1 == 0 {
        return Err(Error::dim("depthwise_conv_pool", x.shape(), kernel.shape()));
    }
    let (pad_top, pad_left) = ((kh - 1) / 2, (kw - 1) / 2);
    // Padded extent is h + kh - 1 >= kh, so any kernel fits the padded input.
    Ok(DwGeometry {
        batch,
        channels,
        kh,
        kw,
        pad_top,
        pad_left,
        input: grid,
        output: grid.pooled(stride),
    })
}

/// Visits every in-bounds tap as `(input token, output token, kernel tap)`.
fn for_each_tap(g: &DwGeometry, stride: (usize, usize), mut f: impl FnMut(usize, usize, usize)) {
    for oy in 0..g.output.h {
        for ox in 0..g.output.w {
            let out_tok = oy * g.output.w + ox;
            for i in 0..g.kh {
                let Some(iy) = (oy * stride.0 + i).checked_sub(g.pad_top) else {
                    continue;
                };
                if iy >= g.input.h {
                    continue;
                }
                for j in 0..g.kw {
                    let Some(ix) = (ox * stride.1 + j).checked_sub(g.pad_left) else {
                        continue;
                    };
                    if ix >= g.input.w {
                        continue;
                    }
                    f(iy * g.input.w + ix, out_tok, i * g.kw + j);
                }
            }
        }
    }
}

/// Per-channel strided convolution over the token grid.
///
/// Returns the pooled tokens and their grid.
pub fn depthwise_conv_pool<T: Scalar>(
    x: &Tensor<T>,
    grid: Grid,
    kernel: &Tensor<T>,
    stride: (usize, usize),
) -> Result<(Tensor<T>, Grid)> {
    let g = dw_geometry(x, grid, kernel, stride)?;
    let c = g.channels;
    let n_in = g.input.tokens();
    let n_out = g.output.tokens();
    meter::add_macs((g.batch * n_out * g.kh * g.kw * c) as u64);
    let mut out = vec![T::zero(); g.batch * n_out * c];
    let (xs, ks) = (x.data(), kernel.data());
    for b in 0..g.batch {
        let xb = &xs[b * n_in * c..(b + 1) * n_in * c];
        let ob = &mut out[b * n_out * c..(b + 1) * n_out * c];
        for_each_tap(&g, stride, |in_tok, out_tok, tap| {
            let src = &xb[in_tok * c..(in_tok + 1) * c];
            let k = &ks[tap * c..(tap + 1) * c];
            let dst = &mut ob[out_tok * c..(out_tok + 1) * c];
            for ((d, &v), &w) in dst.iter_mut().zip(src).zip(k) {
                *d += v * w;
            }
        });
    }
    Ok((Tensor::from_parts(vec![g.batch, n_out, c], out), g.output))
}

/// VJP of [`depthwise_conv_pool`]; returns `(dx, dkernel)`.
pub fn depthwise_conv_pool_vjp<T: Scalar>(
    x: &Tensor<T>,
    grid: Grid,
    kernel: &Tensor<T>,
    stride: (usize, usize),
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = dw_geometry(x, grid, kernel, stride)?;
    let c = g.channels;
    let n_in = g.input.tokens();
    let n_out = g.output.tokens();
    if dy.shape() != [g.batch, n_out, c] {
        return Err(Error::dim(
            "depthwise_conv_pool_vjp",
            dy.shape(),
            &[g.batch, n_out, c],
        ));
    }
    meter::add_macs(2 * (g.batch * n_out * g.kh * g.kw * c) as u64);
    let mut dx = vec![T::zero(); x.numel()];
    let mut dk = vec![T::zero(); kernel.numel()];
    let (xs, ks, gs) = (x.data(), kernel.data(), dy.data());
    for b in 0..g.batch {
        let xb = &xs[b * n_in * c..(b + 1) * n_in * c];
        let gb = &gs[b * n_out * c..(b + 1) * n_out * c];
        let dxb = &mut dx[b * n_in * c..(b + 1) * n_in * c];
        for_each_tap(&g, stride, |in_tok, out_tok, tap| {
            let grad = &gb[out_tok * c..(out_tok + 1) * c];
            for ch in 0..c {
                dxb[in_tok * c + ch] += grad[ch] * ks[tap * c + ch];
                dk[tap * c + ch] += grad[ch] * xb[in_tok * c + ch];
            }
        });
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(kernel.shape().to_vec(), dk),
    ))
}

/// Geometry of a dense convolution stem lowered to patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PatchGeometry {
    pub fn output_side(&self, side: usize) -> Result<usize> {
        let padded = side + 2 * self.padding;
        if self.kernel == 0 || self.stride == 0 || padded < self.kernel {
            return Err(Error::dim(
                "im2col",
                &[side, side],
                &[self.kernel, self.kernel],
            ));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }
}

/// Extracts `k×k×C` patches from `[B, H, W, C]` images, giving
/// `[B, H_out·W_out, k·k·C]` ordered (row, column, channel).
pub fn im2col<T: Scalar>(images: &Tensor<T>, geo: PatchGeometry) -> Result<(Tensor<T>, Grid)> {
    let [b, h, w, c] = *images.shape() else {
        return Err(Error::dim("im2col", images.shape(), &[0, 0, 0, 0]));
    };
    let (oh, ow) = (geo.output_side(h)?, geo.output_side(w)?);
    let k = geo.kernel;
    let width = k * k * c;
    let mut out = vec![T::zero(); b * oh * ow * width];
    let src = images.data();
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ((bi * oh + oy) * ow + ox) * width;
                for i in 0..k {
                    let Some(iy) = (oy * geo.stride + i).checked_sub(geo.padding) else {
                        continue;
                    };
                    if iy >= h {
                        continue;
                    }
                    for j in 0..k {
                        let Some(ix) = (ox * geo.stride + j).checked_sub(geo.padding) else {
                            continue;
                        };
                        if ix >= w {
                            continue;
                        }
                        let s = ((bi * h + iy) * w + ix) * c;
                        let d = base + (i * k + j) * c;
                        out[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![b, oh * ow, width], out),
        Grid::new(oh, ow),
    ))
}

/// VJP of [`im2col`]: scatters patch cotangents back onto the image.
pub fn im2col_vjp<T: Scalar>(
    image_shape: &[usize],
    geo: PatchGeometry,
    dcols: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [b, h, w, c] = *image_shape else {
        return Err(Error::dim("im2col_vjp", image_shape, dcols.shape()));
    };
    let (oh, ow) = (geo.output_side(h)?, geo.output_side(w)?);
    let k = geo.kernel;
    let width = k * k * c;
    if dcols.shape() != [b, oh * ow, width] {
        return Err(Error::dim(
            "im2col_vjp",
            dcols.shape(),
            &[b, oh * ow, width],
        ));
    }
    let mut out = vec![T::zero(); b * h * w * c];
    let g = dcols.data();
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ((bi * oh + oy) * ow + ox) * width;
                for i in 0..k {
                    let Some(iy) = (oy * geo.stride + i).checked_sub(geo.padding) else {
                        continue;
                    };
                    if iy >= h {
                        continue;
                    }
                    for j in 0..k {
                        let Some(ix) = (ox * geo.stride + j).checked_sub(geo.padding) else {
                            continue;
                        };
                        if ix >= w {
                            continue;
                        }
                        let s = ((bi * h + iy) * w + ix) * c;
                        let d = base + (i * k + j) * c;
                        for ch in 0..c {
                            out[s + ch] += g[d + ch];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(image_shape.to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delta_kernel(k: usize, c: usize) -> Tensor<f64> {
        let centre = (k - 1) / 2 * k + (k - 1) / 2;
        Tensor::from_fn(&[k, k, c], |i| if i / c == centre { 1.0 } else { 0.0 })
    }

    #[test]
    fn delta_kernel_unit_stride_is_identity() {
        let x = Tensor::<f64>::from_fn(&[2, 20, 3], |i| (i as f64).cos());
        let (y, g) = depthwise_conv_pool(&x, Grid::new(4, 5), &delta_kernel(3, 3), (1, 1)).unwrap();
        assert_eq!(g, Grid::new(4, 5));
        assert_eq!(y, x);
    }

    #[test]
    fn mean_kernel_stride_two_averages_blocks() {
        let x = Tensor::<f64>::from_fn(&[1, 16, 1], |i| i as f64);
        let k = Tensor::<f64>::full(&[2, 2, 1], 0.25);
        let (y, g) = depthwise_conv_pool(&x, Grid::square(4), &k, (2, 2)).unwrap();
        assert_eq!(g, Grid::square(2));
        // blocks {0,1,4,5}, {2,3,6,7}, {8,9,12,13}, {10,11,14,15}
        assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn ceil_output_grid() {
        assert_eq!(Grid::new(7, 5).pooled((2, 2)), Grid::new(4, 3));
        let x = Tensor::<f64>::zeros(&[1, 35, 2]);
        let (_, g) = depthwise_conv_pool(&x, Grid::new(7, 5), &delta_kernel(3, 2), (2, 2)).unwrap();
        assert_eq!(g, Grid::new(4, 3));
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 15, 2]);
        assert!(depthwise_conv_pool(&x, Grid::square(4), &delta_kernel(3, 2), (1, 1)).is_err());
    }

    #[test]
    fn non_overlapping_patches() {
        let img = Tensor::<f64>::from_fn(&[1, 4, 4, 1], |i| i as f64);
        let geo = PatchGeometry {
            kernel: 2,
            stride: 2,
            padding: 0,
        };
        let (cols, g) = im2col(&img, geo).unwrap();
        assert_eq!(g, Grid::square(2));
        assert_eq!(&cols.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&cols.data()[12..], &[10.0, 11.0, 14.0, 15.0]);
    }
}

//! im2col/col2im kernels for 3D convolution and its transpose.
//!
//! Both operators share one geometry: an "image" volume of `channels`
//! channels and a grid of kernel placements ("columns"). A forward
//! convolution gathers image -> columns and multiplies by the weights; a
//! transposed convolution multiplies first and scatters columns -> image.

use super::Real;
use crate::error::{Error, Result};

/// Output extent of a strided convolution along one axis.
pub fn conv_out_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of a strided transposed convolution along one axis.
pub fn conv_transpose_out_extent(
    extent: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Option<usize> {
    if stride == 0 || extent == 0 {
        return None;
    }
    ((extent - 1) * stride + kernel).checked_sub(2 * pad).filter(|&e| e > 0)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub image: [usize; 3],
    pub kernel: [usize; 3],
    pub cols: [usize; 3],
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    pub fn image_len(&self) -> usize {
        self.channels * self.image.iter().product::<usize>()
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    pub fn col_count(&self) -> usize {
        self.cols.iter().product()
    }

    /// Precomputes, per kernel offset and output coordinate, the source index
    /// along one axis (or `usize::MAX` when it falls into the padding).
    fn axis_table(&self, axis: usize) -> Vec<usize> {
        let (k, o, n) = (self.kernel[axis], self.cols[axis], self.image[axis]);
        let mut table = vec![usize::MAX; k * o];
        for ki in 0..k {
            for oi in 0..o {
                let pos = (oi * self.stride + ki) as isize - self.pad as isize;
                if pos >= 0 && (pos as usize) < n {
                    table[ki * o + oi] = pos as usize;
                }
            }
        }
        table
    }

    pub fn im2col<T: Real>(&self, image: &[T], cols: &mut [T]) {
        debug_assert_eq!(image.len(), self.image_len());
        debug_assert_eq!(cols.len(), self.col_rows() * self.col_count());
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.cols;
        let [_, ih, iw] = self.image;
        let (td, th, tw) = (self.axis_table(0), self.axis_table(1), self.axis_table(2));
        let plane = self.image.iter().product::<usize>();
        let ncols = self.col_count();
        let mut row = 0;
        for c in 0..self.channels {
            let src = &image[c * plane..(c + 1) * plane];
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let dst = &mut cols[row * ncols..(row + 1) * ncols];
                        let mut j = 0;
                        for z in 0..od {
                            let sz = td[a * od + z];
                            for y in 0..oh {
                                let sy = th[b * oh + y];
                                if sz == usize::MAX || sy == usize::MAX {
                                    dst[j..j + ow].iter_mut().for_each(|v| *v = T::zero());
                                    j += ow;
                                    continue;
                                }
                                let base = (sz * ih + sy) * iw;
                                for x in 0..ow {
                                    let sx = tw[e * ow + x];
                                    dst[j] = if sx == usize::MAX {
                                        T::zero()
                                    } else {
                                        src[base + sx]
                                    };
                                    j += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Scatter-adds columns back into `image` (adjoint of `im2col`).
    pub fn col2im<T: Real>(&self, cols: &[T], image: &mut [T]) {
        debug_assert_eq!(image.len(), self.image_len());
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.cols;
        let [_, ih, iw] = self.image;
        let (td, th, tw) = (self.axis_table(0), self.axis_table(1), self.axis_table(2));
        let plane = self.image.iter().product::<usize>();
        let ncols = self.col_count();
        let mut row = 0;
        for c in 0..self.channels {
            let dst = &mut image[c * plane..(c + 1) * plane];
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let src = &cols[row * ncols..(row + 1) * ncols];
                        let mut j = 0;
                        for z in 0..od {
                            let sz = td[a * od + z];
                            for y in 0..oh {
                                let sy = th[b * oh + y];
                                if sz == usize::MAX || sy == usize::MAX {
                                    j += ow;
                                    continue;
                                }
                                let base = (sz * ih + sy) * iw;
                                for x in 0..ow {
                                    let sx = tw[e * ow + x];
                                    if sx != usize::MAX {
                                        dst[base + sx] = dst[base + sx] + src[j];
                                    }
                                    j += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

fn check_rank5(op: &'static str, what: &str, shape: &[usize]) -> Result<()> {
    if shape.len() != 5 {
        return Err(Error::shape(
            op,
            format!("{what} must be rank 5, got {shape:?}"),
        ));
    }
    Ok(())
}

/// Validated shapes of a convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvPlan {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Geometry whose image side is the *larger* volume: the input for a
    /// forward convolution, the output for a transposed one.
    pub geom: Geometry,
}

impl ConvPlan {
    pub fn forward(
        input: &[usize],
        weight: &[usize],
        bias: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        const OP: &str = "conv3d";
        check_rank5(OP, "input", input)?;
        check_rank5(OP, "weight", weight)?;
        if weight[1] != input[1] {
            return Err(Error::shape(
                OP,
                format!(
                    "input has {} channels but weight expects {}",
                    input[1], weight[1]
                ),
            ));
        }
        if bias != [weight[0]] {
            return Err(Error::shape(
                OP,
                format!("bias {bias:?} must be [{}]", weight[0]),
            ));
        }
        let mut cols = [0; 3];
        for ax in 0..3 {
            cols[ax] = conv_out_extent(input[2 + ax], weight[2 + ax], stride, pad).ok_or_else(
                || {
                    Error::shape(
                        OP,
                        format!(
                            "axis {ax}: extent {} with kernel {} stride {stride} pad {pad} is empty",
                            input[2 + ax],
                            weight[2 + ax]
                        ),
                    )
                },
            )?;
        }
        Ok(ConvPlan {
            batch: input[0],
            in_channels: input[1],
            out_channels: weight[0],
            geom: Geometry {
                channels: input[1],
                image: [input[2], input[3], input[4]],
                kernel: [weight[2], weight[3], weight[4]],
                cols,
                stride,
                pad,
            },
        })
    }

    pub fn transpose(
        input: &[usize],
        weight: &[usize],
        bias: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        const OP: &str = "conv_transpose3d";
        check_rank5(OP, "input", input)?;
        check_rank5(OP, "weight", weight)?;
        if weight[0] != input[1] {
            return Err(Error::shape(
                OP,
                format!(
                    "input has {} channels but weight expects {}",
                    input[1], weight[0]
                ),
            ));
        }
        if bias != [weight[1]] {
            return Err(Error::shape(
                OP,
                format!("bias {bias:?} must be [{}]", weight[1]),
            ));
        }
        let mut image = [0; 3];
        for ax in 0..3 {
            image[ax] = conv_transpose_out_extent(input[2 + ax], weight[2 + ax], stride, pad)
                .ok_or_else(|| {
                    Error::shape(
                        OP,
                        format!(
                            "axis {ax}: extent {} with kernel {} stride {stride} pad {pad} is empty",
                            input[2 + ax],
                            weight[2 + ax]
                        ),
                    )
                })?;
        }
        Ok(ConvPlan {
            batch: input[0],
            in_channels: input[1],
            out_channels: weight[1],
            geom: Geometry {
                channels: weight[1],
                image,
                kernel: [weight[2], weight[3], weight[4]],
                cols: [input[2], input[3], input[4]],
                stride,
                pad,
            },
        })
    }

    pub fn forward_output_shape(&self) -> Vec<usize> {
        let [d, h, w] = self.geom.cols;
        vec![self.batch, self.out_channels, d, h, w]
    }

    pub fn transpose_output_shape(&self) -> Vec<usize> {
        let [d, h, w] = self.geom.image;
        vec![self.batch, self.out_channels, d, h, w]
    }
}

pub(crate) fn conv3d_forward<T: Real>(plan: &ConvPlan, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let g = &plan.geom;
    let (rows, ncols) = (g.col_rows(), g.col_count());
    let co = plan.out_channels;
    let mut cols = vec![T::zero(); rows * ncols];
    let mut out = vec![T::zero(); plan.batch * co * ncols];
    for n in 0..plan.batch {
        g.im2col(&x[n * g.image_len()..(n + 1) * g.image_len()], &mut cols);
        let y = &mut out[n * co * ncols..(n + 1) * co * ncols];
        for (c, chunk) in y.chunks_mut(ncols).enumerate() {
            chunk.iter_mut().for_each(|v| *v = b[c]);
        }
        T::gemm(
            co, rows, ncols, T::one(), w, rows as isize, 1, &cols, ncols as isize, 1, T::one(), y,
            ncols as isize, 1,
        );
    }
    out
}

/// Returns (dx, dw, db) for a forward convolution.
pub(crate) fn conv3d_backward<T: Real>(
    plan: &ConvPlan,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let g = &plan.geom;
    let (rows, ncols) = (g.col_rows(), g.col_count());
    let co = plan.out_channels;
    let mut cols = vec![T::zero(); rows * ncols];
    let mut dcols = vec![T::zero(); rows * ncols];
    let mut dw = vec![T::zero(); co * rows];
    let mut db = vec![T::zero(); co];
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    for n in 0..plan.batch {
        let img = &x[n * g.image_len()..(n + 1) * g.image_len()];
        let dyn_ = &dy[n * co * ncols..(n + 1) * co * ncols];
        for (c, chunk) in dyn_.chunks(ncols).enumerate() {
            db[c] = db[c] + chunk.iter().copied().sum::<T>();
        }
        g.im2col(img, &mut cols);
        // dW[co, rows] += dY[co, P] · cols[rows, P]^T
        T::gemm(
            co, ncols, rows, T::one(), dyn_, ncols as isize, 1, &cols, 1, ncols as isize,
            T::one(), &mut dw, rows as isize, 1,
        );
        if let Some(dx) = dx.as_mut() {
            // dcols[rows, P] = W[co, rows]^T · dY[co, P]
            T::gemm(
                rows, co, ncols, T::one(), w, 1, rows as isize, dyn_, ncols as isize, 1, T::zero(),
                &mut dcols, ncols as isize, 1,
            );
            g.col2im(&dcols, &mut dx[n * g.image_len()..(n + 1) * g.image_len()]);
        }
    }
    (dx, dw, db)
}

pub(crate) fn conv_transpose3d_forward<T: Real>(
    plan: &ConvPlan,
    x: &[T],
    w: &[T],
    b: &[T],
) -> Vec<T> {
    let g = &plan.geom;
    let (rows, ncols) = (g.col_rows(), g.col_count());
    let ci = plan.in_channels;
    let mut cols = vec![T::zero(); rows * ncols];
    let mut out = vec![T::zero(); plan.batch * g.image_len()];
    let plane = g.image.iter().product::<usize>();
    for n in 0..plan.batch {
        let xn = &x[n * ci * ncols..(n + 1) * ci * ncols];
        // cols[rows, P] = W[ci, rows]^T · X[ci, P]
        T::gemm(
            rows, ci, ncols, T::one(), w, 1, rows as isize, xn, ncols as isize, 1, T::zero(),
            &mut cols, ncols as isize, 1,
        );
        let y = &mut out[n * g.image_len()..(n + 1) * g.image_len()];
        for (c, chunk) in y.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = b[c]);
        }
        g.col2im(&cols, y);
    }
    out
}

/// Returns (dx, dw, db) for a transposed convolution.
pub(crate) fn conv_transpose3d_backward<T: Real>(
    plan: &ConvPlan,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let g = &plan.geom;
    let (rows, ncols) = (g.col_rows(), g.col_count());
    let ci = plan.in_channels;
    let co = plan.out_channels;
    let plane = g.image.iter().product::<usize>();
    let mut cols = vec![T::zero(); rows * ncols];
    let mut dw = vec![T::zero(); ci * rows];
    let mut db = vec![T::zero(); co];
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    for n in 0..plan.batch {
        let dyn_ = &dy[n * g.image_len()..(n + 1) * g.image_len()];
        for (c, chunk) in dyn_.chunks(plane).enumerate() {
            db[c] = db[c] + chunk.iter().copied().sum::<T>();
        }
        g.im2col(dyn_, &mut cols);
        let xn = &x[n * ci * ncols..(n + 1) * ci * ncols];
        // dW[ci, rows] += X[ci, P] · cols[rows, P]^T
        T::gemm(
            ci, ncols, rows, T::one(), xn, ncols as isize, 1, &cols, 1, ncols as isize, T::one(),
            &mut dw, rows as isize, 1,
        );
        if let Some(dx) = dx.as_mut() {
            // dX[ci, P] = W[ci, rows] · cols[rows, P]
            T::gemm(
                ci, rows, ncols, T::one(), w, rows as isize, 1, &cols, ncols as isize, 1, T::zero(),
                &mut dx[n * ci * ncols..(n + 1) * ci * ncols], ncols as isize, 1,
            );
        }
    }
    (dx, dw, db)
}

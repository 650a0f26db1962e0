//! Forward and backward kernels for the detector's layers. Activations are
//! `(channels, height, width)` arrays.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};

use crate::geometry::Rect;

/// 3x3, stride 1, zero padding 1. Row `c * 9 + ky * 3 + kx` of the result
/// holds input channel `c` shifted by `(ky - 1, kx - 1)`.
pub fn im2col3(input: ArrayView3<f64>) -> Array2<f64> {
    let (c, h, w) = input.dim();
    let mut cols = Array2::<f64>::zeros((c * 9, h * w));
    for ch in 0..c {
        let plane = input.index_axis(Axis(0), ch);
        for ky in 0..3 {
            for kx in 0..3 {
                let mut row = cols.row_mut(ch * 9 + ky * 3 + kx);
                let row = row.as_slice_mut().expect("standard layout");
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = plane.row(sy as usize);
                    let dst = &mut row[y * w..(y + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            *d = src[sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`].
pub fn col2im3(cols: ArrayView2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        let mut plane = out.index_axis_mut(Axis(0), ch);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = cols.row(ch * 9 + ky * 3 + kx);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let mut dst = plane.row_mut(sy as usize);
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += row[y * w + x];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `weight`: `(c_out, c_in * k)`; `cols`: `(c_in * k, h * w)`.
pub fn linear_map(
    weight: ArrayView2<f64>,
    bias: ArrayView1<f64>,
    cols: ArrayView2<f64>,
    h: usize,
    w: usize,
) -> Array3<f64> {
    let mut out = weight.dot(&cols);
    out += &bias.insert_axis(Axis(1));
    out.into_shape_with_order((weight.nrows(), h, w))
        .expect("conv output shape")
}

/// Gradients of [`linear_map`] with respect to weight and bias, plus the
/// gradient of `cols` when requested.
pub fn linear_map_backward(
    weight: ArrayView2<f64>,
    cols: ArrayView2<f64>,
    grad_out: ArrayView3<f64>,
    need_input: bool,
) -> (Array2<f64>, Array1<f64>, Option<Array2<f64>>) {
    let (c_out, h, w) = grad_out.dim();
    let g = grad_out.to_shape((c_out, h * w)).expect("contiguous gradient");
    let grad_w = g.dot(&cols.t());
    let grad_b = g.sum_axis(Axis(1));
    let grad_cols = need_input.then(|| weight.t().dot(&g));
    (grad_w, grad_b, grad_cols)
}

pub fn relu_inplace(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes gradient entries where the forward output was not positive.
pub fn relu_backward(grad: &mut Array3<f64>, output: &Array3<f64>) {
    ndarray::Zip::from(grad).and(output).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}

/// 2x2 max pool, stride 2. Returns the pooled map and, per output element,
/// the flat index of the winning input element. Odd trailing rows/columns
/// are dropped. Ties go to the first element in row-major order.
pub fn maxpool2(input: ArrayView3<f64>) -> (Array3<f64>, Vec<usize>) {
    let (c, h, w) = input.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (iy, ix) = (2 * y + dy, 2 * x + dx);
                        let v = input[[ch, iy, ix]];
                        if v > best {
                            best = v;
                            best_idx = (ch * h + iy) * w + ix;
                        }
                    }
                }
                out[[ch, y, x]] = best;
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

/// Routes pooled gradients back to the winning inputs.
pub fn maxpool2_backward(grad_out: ArrayView3<f64>, argmax: &[usize], in_dim: (usize, usize, usize)) -> Array3<f64> {
    let mut grad = Array3::<f64>::zeros(in_dim);
    let flat = grad.as_slice_mut().expect("standard layout");
    for (g, &idx) in grad_out.iter().zip(argmax) {
        flat[idx] += g;
    }
    grad
}

/// Feature-map cells `[start, end)` along one axis covered by the image-space
/// interval `[lo, hi)`, widened to at least one cell.
fn footprint(lo: f64, hi: f64, stride: f64, cells: usize) -> (usize, usize) {
    let max_start = cells.saturating_sub(1) as f64;
    let start = (lo / stride).floor().clamp(0.0, max_start) as usize;
    let end = ((hi / stride).ceil().max(0.0) as usize).clamp(start + 1, cells);
    (start, end)
}

/// Max-pools the feature-map footprint of `rect` (image coordinates) onto an
/// `out x out` grid. Bin `i` along an axis covers cells
/// `start + floor(i * n / out) .. start + ceil((i + 1) * n / out)`, which is
/// never empty. Returns the pooled values and each bin's argmax flat index.
pub fn roi_pool(feature: ArrayView3<f64>, rect: &Rect, stride: f64, out: usize) -> (Array3<f64>, Vec<usize>) {
    let (c, h, w) = feature.dim();
    let (x0, x1) = footprint(rect.x_min, rect.x_max, stride, w);
    let (y0, y1) = footprint(rect.y_min, rect.y_max, stride, h);
    let (nx, ny) = (x1 - x0, y1 - y0);
    let bins = |start: usize, n: usize, i: usize| (start + i * n / out, start + ((i + 1) * n).div_ceil(out));
    let mut pooled = Array3::<f64>::zeros((c, out, out));
    let mut arg = Vec::with_capacity(c * out * out);
    for ch in 0..c {
        let plane = feature.index_axis(Axis(0), ch);
        for by in 0..out {
            let (ys, ye) = bins(y0, ny, by);
            for bx in 0..out {
                let (xs, xe) = bins(x0, nx, bx);
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for (dy, row) in plane.slice(s![ys..ye, xs..xe]).outer_iter().enumerate() {
                    for (dx, &v) in row.iter().enumerate() {
                        if v > best {
                            best = v;
                            best_idx = (ch * h + ys + dy) * w + xs + dx;
                        }
                    }
                }
                pooled[[ch, by, bx]] = best;
                arg.push(best_idx);
            }
        }
    }
    (pooled, arg)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

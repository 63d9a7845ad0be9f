//! Convolution primitives shared by training and explanation.
//!
//! Forward runs as im2col + GEMM; the data-backward pass is the matching
//! GEMM + col2im scatter. Both are exposed as free functions over plain
//! arrays so relevance rules can run them with modified weights or inputs.

use ndarray::{Array1, Array2, Array3, Array4};

/// Output spatial size for one dimension.
pub fn out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding).saturating_sub(kernel) / stride + 1
}

/// `dot` may hand back non-standard strides for degenerate shapes; force
/// standard layout so downstream reshapes and slice views hold.
fn into_standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        let dim = a.dim();
        Array2::from_shape_vec(dim, a.iter().copied().collect()).expect("same element count")
    }
}

/// Unfold `(C, H, W)` into a `(C*kh*kw, H_out*W_out)` matrix.
pub fn im2col(
    x: &Array3<f64>,
    kernel: (usize, usize),
    stride: usize,
    padding: usize,
) -> Array2<f64> {
    let (channels, height, width) = x.dim();
    let (kh, kw) = kernel;
    let h_out = out_dim(height, kh, stride, padding);
    let w_out = out_dim(width, kw, stride, padding);
    let mut col = Array2::<f64>::zeros((channels * kh * kw, h_out * w_out));
    let xs = x.as_slice().expect("standard layout");
    let cs = col.as_slice_mut().expect("standard layout");
    for c in 0..channels {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let row_base = row * h_out * w_out;
                for ho in 0..h_out {
                    let r = (ho * stride + ki) as isize - padding as isize;
                    if r < 0 || r >= height as isize {
                        continue;
                    }
                    let x_base = c * height * width + r as usize * width;
                    let col_base = row_base + ho * w_out;
                    for wo in 0..w_out {
                        let cc = (wo * stride + kj) as isize - padding as isize;
                        if cc < 0 || cc >= width as isize {
                            continue;
                        }
                        cs[col_base + wo] = xs[x_base + cc as usize];
                    }
                }
            }
        }
    }
    col
}

/// Fold a `(C*kh*kw, H_out*W_out)` matrix back onto `(C, H, W)`,
/// accumulating overlapping contributions.
pub fn col2im(
    col: &Array2<f64>,
    input_dim: (usize, usize, usize),
    kernel: (usize, usize),
    stride: usize,
    padding: usize,
) -> Array3<f64> {
    let (channels, height, width) = input_dim;
    let (kh, kw) = kernel;
    let h_out = out_dim(height, kh, stride, padding);
    let w_out = out_dim(width, kw, stride, padding);
    let mut x = Array3::<f64>::zeros(input_dim);
    let xs = x.as_slice_mut().expect("standard layout");
    let cs = col.as_slice().expect("standard layout");
    for c in 0..channels {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let row_base = row * h_out * w_out;
                for ho in 0..h_out {
                    let r = (ho * stride + ki) as isize - padding as isize;
                    if r < 0 || r >= height as isize {
                        continue;
                    }
                    let x_base = c * height * width + r as usize * width;
                    let col_base = row_base + ho * w_out;
                    for wo in 0..w_out {
                        let cc = (wo * stride + kj) as isize - padding as isize;
                        if cc < 0 || cc >= width as isize {
                            continue;
                        }
                        xs[x_base + cc as usize] += cs[col_base + wo];
                    }
                }
            }
        }
    }
    x
}

/// `y = conv(x, weight) + bias`, weight laid out `(C_out, C_in, kh, kw)`.
pub fn conv_forward(
    x: &Array3<f64>,
    weight: &Array4<f64>,
    bias: Option<&Array1<f64>>,
    stride: usize,
    padding: usize,
) -> Array3<f64> {
    let (c_out, c_in, kh, kw) = weight.dim();
    debug_assert_eq!(c_in, x.dim().0, "input channel mismatch");
    let h_out = out_dim(x.dim().1, kh, stride, padding);
    let w_out = out_dim(x.dim().2, kw, stride, padding);
    let col = im2col(x, (kh, kw), stride, padding);
    let w_mat = weight
        .view()
        .into_shape_with_order((c_out, c_in * kh * kw))
        .expect("contiguous weight");
    let mut out = into_standard(w_mat.dot(&col));
    if let Some(b) = bias {
        for (mut row, &bv) in out.rows_mut().into_iter().zip(b.iter()) {
            row.mapv_inplace(|v| v + bv);
        }
    }
    out.into_shape_with_order((c_out, h_out, w_out))
        .expect("contiguous output")
}

/// Gradient of the convolution output with respect to its input.
pub fn conv_backward_data(
    grad_out: &Array3<f64>,
    weight: &Array4<f64>,
    input_dim: (usize, usize, usize),
    stride: usize,
    padding: usize,
) -> Array3<f64> {
    let (c_out, c_in, kh, kw) = weight.dim();
    let (_, h_out, w_out) = grad_out.dim();
    let g = grad_out
        .view()
        .into_shape_with_order((c_out, h_out * w_out))
        .expect("contiguous grad");
    let w_mat = weight
        .view()
        .into_shape_with_order((c_out, c_in * kh * kw))
        .expect("contiguous weight");
    let grad_col = into_standard(w_mat.t().dot(&g));
    col2im(&grad_col, input_dim, (kh, kw), stride, padding)
}

/// Gradients of the convolution output with respect to weight and bias.
pub fn conv_backward_params(
    x: &Array3<f64>,
    grad_out: &Array3<f64>,
    weight_dim: (usize, usize, usize, usize),
    stride: usize,
    padding: usize,
) -> (Array4<f64>, Array1<f64>) {
    let (c_out, c_in, kh, kw) = weight_dim;
    let (_, h_out, w_out) = grad_out.dim();
    let col = im2col(x, (kh, kw), stride, padding);
    let g = grad_out
        .view()
        .into_shape_with_order((c_out, h_out * w_out))
        .expect("contiguous grad");
    let grad_w = into_standard(g.dot(&col.t()));
    let grad_b = g.sum_axis(ndarray::Axis(1));
    (
        grad_w
            .into_shape_with_order((c_out, c_in, kh, kw))
            .expect("contiguous"),
        grad_b,
    )
}

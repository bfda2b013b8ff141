//! Raw array kernels behind the differentiable conv / pooling ops.
//!
//! All image tensors are NCHW, convolution weights are `[out, in, k, k]`,
//! stride is always 1 and padding is symmetric zero padding.

use ndarray::{s, Array2, Array4, ArrayD, ArrayView2, ArrayView3, Axis, Ix4, IxDyn};
use rayon::prelude::*;
use std::sync::atomic::{AtomicBool, Ordering};

static SERIAL: AtomicBool = AtomicBool::new(false);

/// Force every kernel onto the calling thread.
///
/// Kernels produce identical bits either way; this only removes worker
/// threads so deterministic runs have a single execution order.
pub fn set_serial(serial: bool) {
    SERIAL.store(serial, Ordering::SeqCst);
}

pub fn is_serial() -> bool {
    SERIAL.load(Ordering::SeqCst)
}

fn as4(a: &ArrayD<f64>) -> ndarray::ArrayView4<'_, f64> {
    a.view()
        .into_dimensionality::<Ix4>()
        .expect("expected a rank-4 NCHW tensor")
}

fn per_sample<F>(n: usize, f: F) -> Vec<Array2<f64>>
where
    F: Fn(usize) -> Array2<f64> + Sync + Send,
{
    if is_serial() || n == 1 {
        (0..n).map(f).collect()
    } else {
        (0..n).into_par_iter().map(f).collect()
    }
}

/// Unfold one CHW sample into a `[c*k*k, ho*wo]` patch matrix.
fn im2col(x: ArrayView3<f64>, k: usize, pad: usize, ho: usize, wo: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut col = Array2::<f64>::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let mut dst = col.row_mut(row);
                for oi in 0..ho {
                    let ii = oi + ki;
                    if ii < pad || ii - pad >= h {
                        continue;
                    }
                    let ii = ii - pad;
                    for oj in 0..wo {
                        let jj = oj + kj;
                        if jj < pad || jj - pad >= w {
                            continue;
                        }
                        dst[oi * wo + oj] = x[[ci, ii, jj - pad]];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back into a CHW grid.
fn col2im(
    col: ArrayView2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    // returned as [c, h*w] so per_sample can stay Array2-typed
    let mut out = Array2::<f64>::zeros((c, h * w));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = col.row((ci * k + ki) * k + kj);
                for oi in 0..ho {
                    let ii = oi + ki;
                    if ii < pad || ii - pad >= h {
                        continue;
                    }
                    let ii = ii - pad;
                    for oj in 0..wo {
                        let jj = oj + kj;
                        if jj < pad || jj - pad >= w {
                            continue;
                        }
                        out[[ci, ii * w + jj - pad]] += row[oi * wo + oj];
                    }
                }
            }
        }
    }
    out
}

pub fn conv_out_hw(h: usize, w: usize, k: usize, pad: usize) -> (usize, usize) {
    assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
    (h + 2 * pad - k + 1, w + 2 * pad - k + 1)
}

/// y = conv(x, w)
pub fn conv2d(x: &ArrayD<f64>, w: &ArrayD<f64>, pad: usize) -> ArrayD<f64> {
    let x = as4(x);
    let w = as4(w);
    let (n, c, h, wd) = x.dim();
    let (o, wc, k, k2) = w.dim();
    assert_eq!(c, wc, "conv2d channel mismatch: input {c}, weight {wc}");
    assert_eq!(k, k2, "conv2d expects square kernels");
    let (ho, wo) = conv_out_hw(h, wd, k, pad);
    let wmat = w.to_shape((o, c * k * k)).expect("weight reshape").to_owned();
    let outs = per_sample(n, |i| {
        let col = im2col(x.index_axis(Axis(0), i), k, pad, ho, wo);
        wmat.dot(&col)
    });
    stack4(outs, o, ho, wo)
}

/// Gradient of conv2d with respect to its input (a transposed convolution).
pub fn conv2d_input_grad(
    gy: &ArrayD<f64>,
    w: &ArrayD<f64>,
    pad: usize,
    in_hw: (usize, usize),
) -> ArrayD<f64> {
    let gy = as4(gy);
    let w = as4(w);
    let (n, o, ho, wo) = gy.dim();
    let (wo_, c, k, _) = w.dim();
    assert_eq!(o, wo_, "conv2d_input_grad channel mismatch");
    let (h, wd) = in_hw;
    assert_eq!(conv_out_hw(h, wd, k, pad), (ho, wo), "conv2d_input_grad shape mismatch");
    let wmat_t = w.to_shape((o, c * k * k)).expect("weight reshape").t().to_owned();
    let outs = per_sample(n, |i| {
        let g = gy.index_axis(Axis(0), i);
        let g = g.to_shape((o, ho * wo)).expect("grad reshape");
        let col = wmat_t.dot(&g);
        col2im(col.view(), c, h, wd, k, pad, ho, wo)
    });
    stack4(outs, c, h, wd)
}

/// Gradient of conv2d with respect to its weight, summed over the batch.
pub fn conv2d_weight_grad(x: &ArrayD<f64>, gy: &ArrayD<f64>, pad: usize, k: usize) -> ArrayD<f64> {
    let x = as4(x);
    let gy = as4(gy);
    let (n, c, h, wd) = x.dim();
    let (n2, o, ho, wo) = gy.dim();
    assert_eq!(n, n2, "conv2d_weight_grad batch mismatch");
    assert_eq!(conv_out_hw(h, wd, k, pad), (ho, wo), "conv2d_weight_grad shape mismatch");
    let parts = per_sample(n, |i| {
        let col = im2col(x.index_axis(Axis(0), i), k, pad, ho, wo);
        let g = gy.index_axis(Axis(0), i);
        let g = g.to_shape((o, ho * wo)).expect("grad reshape");
        g.dot(&col.t())
    });
    let mut acc = Array2::<f64>::zeros((o, c * k * k));
    for p in parts {
        acc += &p;
    }
    acc.into_shape_with_order(IxDyn(&[o, c, k, k]))
        .expect("weight grad reshape")
}

fn stack4(parts: Vec<Array2<f64>>, c: usize, h: usize, w: usize) -> ArrayD<f64> {
    let n = parts.len();
    let mut out = Array4::<f64>::zeros((n, c, h, w));
    for (i, p) in parts.into_iter().enumerate() {
        let p = p.into_shape_with_order((c, h, w)).expect("sample reshape");
        out.slice_mut(s![i, .., .., ..]).assign(&p);
    }
    out.into_dyn()
}

/// Sum over non-overlapping `f×f` cells.
pub fn sum_pool(x: &ArrayD<f64>, f: usize) -> ArrayD<f64> {
    let x = as4(x);
    let (n, c, h, w) = x.dim();
    assert!(h % f == 0 && w % f == 0, "sum_pool: {h}x{w} not divisible by {f}");
    let mut out = Array4::<f64>::zeros((n, c, h / f, w / f));
    for ((b, ch, i, j), v) in x.indexed_iter() {
        out[[b, ch, i / f, j / f]] += *v;
    }
    out.into_dyn()
}

/// Nearest-neighbour upsampling by an integer factor (replicates each pixel).
pub fn upsample_nearest(x: &ArrayD<f64>, f: usize) -> ArrayD<f64> {
    let x = as4(x);
    let (n, c, h, w) = x.dim();
    Array4::from_shape_fn((n, c, h * f, w * f), |(b, ch, i, j)| x[[b, ch, i / f, j / f]]).into_dyn()
}

/// Keep the top-left pixel of each `f×f` cell.
pub fn subsample(x: &ArrayD<f64>, f: usize) -> ArrayD<f64> {
    let x = as4(x);
    let (n, c, h, w) = x.dim();
    assert!(h % f == 0 && w % f == 0, "subsample: {h}x{w} not divisible by {f}");
    Array4::from_shape_fn((n, c, h / f, w / f), |(b, ch, i, j)| x[[b, ch, i * f, j * f]]).into_dyn()
}

/// Adjoint of [`subsample`]: place each value at the top-left of a zero `f×f` cell.
pub fn zero_upsample(x: &ArrayD<f64>, f: usize) -> ArrayD<f64> {
    let x = as4(x);
    let (n, c, h, w) = x.dim();
    Array4::from_shape_fn((n, c, h * f, w * f), |(b, ch, i, j)| {
        if i % f == 0 && j % f == 0 {
            x[[b, ch, i / f, j / f]]
        } else {
            0.0
        }
    })
    .into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn naive_conv(x: &ArrayD<f64>, w: &ArrayD<f64>, pad: usize) -> ArrayD<f64> {
        let x = as4(x);
        let w = as4(w);
        let (n, c, h, wd) = x.dim();
        let (o, _, k, _) = w.dim();
        let (ho, wo) = conv_out_hw(h, wd, k, pad);
        Array4::from_shape_fn((n, o, ho, wo), |(b, oc, i, j)| {
            let mut acc = 0.0;
            for ci in 0..c {
                for ki in 0..k {
                    for kj in 0..k {
                        let ii = (i + ki) as isize - pad as isize;
                        let jj = (j + kj) as isize - pad as isize;
                        if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd {
                            acc += x[[b, ci, ii as usize, jj as usize]] * w[[oc, ci, ki, kj]];
                        }
                    }
                }
            }
            acc
        })
        .into_dyn()
    }

    fn ramp(shape: &[usize], scale: f64) -> ArrayD<f64> {
        let len: usize = shape.iter().product();
        Array::from_shape_fn(IxDyn(shape), |_| 0.0)
            + &Array::from_iter((0..len).map(|i| ((i * 7919 % 31) as f64 - 15.0) * scale))
                .into_shape_with_order(IxDyn(shape))
                .unwrap()
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = ramp(&[2, 3, 5, 4], 0.1);
        let w = ramp(&[4, 3, 3, 3], 0.05);
        for pad in [0, 1, 2] {
            let a = conv2d(&x, &w, pad);
            let b = naive_conv(&x, &w, pad);
            assert_eq!(a.shape(), b.shape());
            for (u, v) in a.iter().zip(b.iter()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn input_and_weight_grads_are_adjoints() {
        // <conv(x, w), g> = <x, dconv_x(g, w)> = <w, dconv_w(x, g)>
        let x = ramp(&[2, 3, 6, 5], 0.1);
        let w = ramp(&[2, 3, 3, 3], 0.07);
        let g = ramp(&[2, 2, 6, 5], 0.03);
        let y = conv2d(&x, &w, 1);
        let lhs: f64 = (&y * &g).sum();
        let gx = conv2d_input_grad(&g, &w, 1, (6, 5));
        let gw = conv2d_weight_grad(&x, &g, 1, 3);
        assert!((lhs - (&x * &gx).sum()).abs() < 1e-10);
        assert!((lhs - (&w * &gw).sum()).abs() < 1e-10);
    }

    #[test]
    fn pooling_pairs_are_adjoints() {
        let x = ramp(&[1, 2, 4, 6], 0.2);
        let y = ramp(&[1, 2, 2, 3], 0.3);
        assert!(((&sum_pool(&x, 2) * &y).sum() - (&x * &upsample_nearest(&y, 2)).sum()).abs() < 1e-12);
        assert!(((&subsample(&x, 2) * &y).sum() - (&x * &zero_upsample(&y, 2)).sum()).abs() < 1e-12);
    }

    #[test]
    fn serial_and_parallel_agree_bitwise() {
        let x = ramp(&[4, 3, 6, 6], 0.1);
        let w = ramp(&[5, 3, 3, 3], 0.05);
        set_serial(true);
        let a = conv2d(&x, &w, 1);
        set_serial(false);
        let b = conv2d(&x, &w, 1);
        assert_eq!(a, b);
    }
}

//! Valid-padding, stride-1 convolutions (cross-correlation, no kernel flip).
//!
//! Both variants lower to an im2col matrix per sample and one gemm. `conv1d`
//! is `conv2d` with a unit-height kernel over a unit-height image.

use crate::error::{Error, Result};
use crate::scalar::{MatMut, MatRef, Scalar};
use crate::tensor::Tensor;

/// Gradients produced by a convolution backward pass.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    /// `None` when the caller asked to skip the input gradient.
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Geometry> {
    let (&[batch, cin, h, w], &[cout, wcin, kh, kw]) = (input.shape(), weight.shape()) else {
        return Err(Error::Shape(format!(
            "conv2d expects input [B,Cin,H,W] and weight [Cout,Cin,kh,kw], got {:?} and {:?}",
            input.shape(),
            weight.shape()
        )));
    };
    if wcin != cin {
        return Err(Error::Shape(format!(
            "conv2d input has {cin} channels but weight expects {wcin}"
        )));
    }
    if h < kh || w < kw {
        return Err(Error::Shape(format!(
            "conv2d input {h}x{w} is smaller than kernel {kh}x{kw}"
        )));
    }
    if let Some(bias) = bias.filter(|b| b.shape() != [cout]) {
        return Err(Error::Shape(format!(
            "conv2d bias shape {:?} does not match {cout} output channels",
            bias.shape()
        )));
    }
    Ok(Geometry { batch, cin, h, w, cout, kh, kw, oh: h - kh + 1, ow: w - kw + 1 })
}

fn im2col<T: Scalar>(g: &Geometry, x: &[T], col: &mut [T]) {
    let p = g.positions();
    for c in 0..g.cin {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * p;
                for oy in 0..g.oh {
                    let src = (c * g.h + oy + i) * g.w + j;
                    let dst = row + oy * g.ow;
                    col[dst..dst + g.ow].copy_from_slice(&x[src..src + g.ow]);
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &Geometry, col: &[T], x: &mut [T]) {
    let p = g.positions();
    for c in 0..g.cin {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * p;
                for oy in 0..g.oh {
                    let dst = (c * g.h + oy + i) * g.w + j;
                    let src = row + oy * g.ow;
                    for (d, &s) in x[dst..dst + g.ow].iter_mut().zip(&col[src..src + g.ow]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `input [B,Cin,H,W]`, `weight [Cout,Cin,kh,kw]`, `bias [Cout]` →
/// `[B,Cout,H-kh+1,W-kw+1]`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let g = geometry(input, weight, Some(bias))?;
    let (k, p) = (g.patch(), g.positions());
    let mut out = Tensor::zeros(&[g.batch, g.cout, g.oh, g.ow]);
    let mut col = vec![T::zero(); k * p];
    let out_stride = g.cout * p;
    for b in 0..g.batch {
        im2col(&g, input.item(b), &mut col);
        let dst = &mut out.data_mut()[b * out_stride..(b + 1) * out_stride];
        for (co, row) in dst.chunks_exact_mut(p).enumerate() {
            row.fill(bias.data()[co]);
        }
        T::gemm(
            g.cout,
            k,
            p,
            T::one(),
            MatRef::row_major(weight.data(), k),
            MatRef::row_major(&col, p),
            T::one(),
            MatMut::row_major(dst, p),
        );
    }
    Ok(out)
}

/// Backward pass for [`conv2d_forward`].
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let g = geometry(input, weight, None)?;
    if grad_out.shape() != [g.batch, g.cout, g.oh, g.ow] {
        return Err(Error::Shape(format!(
            "conv2d grad_out {:?} does not match output [{}, {}, {}, {}]",
            grad_out.shape(),
            g.batch,
            g.cout,
            g.oh,
            g.ow
        )));
    }
    let (k, p) = (g.patch(), g.positions());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[g.cout]);
    let mut gx = need_input_grad.then(|| Tensor::zeros(input.shape()));
    let mut col = vec![T::zero(); k * p];
    let mut gcol = vec![T::zero(); k * p];
    for b in 0..g.batch {
        let go = grad_out.item(b);
        for (co, row) in go.chunks_exact(p).enumerate() {
            gb.data_mut()[co] += row.iter().copied().sum();
        }
        im2col(&g, input.item(b), &mut col);
        T::gemm(
            g.cout,
            p,
            k,
            T::one(),
            MatRef::row_major(go, p),
            MatRef::transposed(&col, p),
            T::one(),
            MatMut::row_major(gw.data_mut(), k),
        );
        if let Some(gx) = gx.as_mut() {
            T::gemm(
                k,
                g.cout,
                p,
                T::one(),
                MatRef::transposed(weight.data(), k),
                MatRef::row_major(go, p),
                T::zero(),
                MatMut::row_major(&mut gcol, p),
            );
            let stride = g.cin * g.h * g.w;
            col2im_add(&g, &gcol, &mut gx.data_mut()[b * stride..(b + 1) * stride]);
        }
    }
    Ok(ConvGrads { input: gx, weight: gw, bias: gb })
}

fn lift_1d<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (&[b, cin, l], &[cout, wcin, k]) = (input.shape(), weight.shape()) else {
        return Err(Error::Shape(format!(
            "conv1d expects input [B,Cin,L] and weight [Cout,Cin,k], got {:?} and {:?}",
            input.shape(),
            weight.shape()
        )));
    };
    Ok((
        input.clone().reshape(&[b, cin, 1, l])?,
        weight.clone().reshape(&[cout, wcin, 1, k])?,
    ))
}

/// `input [B,Cin,L]`, `weight [Cout,Cin,k]` → `[B,Cout,L-k+1]`.
pub fn conv1d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (x, w) = lift_1d(input, weight)?;
    let out = conv2d_forward(&x, &w, bias)?;
    let s = out.shape().to_vec();
    out.reshape(&[s[0], s[1], s[3]])
}

pub fn conv1d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let (x, w) = lift_1d(input, weight)?;
    let go = match grad_out.shape() {
        &[b, c, l] => grad_out.clone().reshape(&[b, c, 1, l])?,
        s => return Err(Error::Shape(format!("conv1d grad_out must be 3-D, got {s:?}"))),
    };
    let g = conv2d_backward(&x, &w, &go, need_input_grad)?;
    Ok(ConvGrads {
        input: g.input.map(|t| t.reshape(input.shape())).transpose()?,
        weight: g.weight.reshape(weight.shape())?,
        bias: g.bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop cross-correlation.
    fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let [bn, cin, h, wd] = x.shape().try_into().unwrap();
        let [cout, _, kh, kw] = w.shape().try_into().unwrap();
        let (oh, ow) = (h - kh + 1, wd - kw + 1);
        let mut out = vec![0.0; bn * cout * oh * ow];
        for n in 0..bn {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[co];
                        for c in 0..cin {
                            for i in 0..kh {
                                for j in 0..kw {
                                    acc += x.data()[((n * cin + c) * h + oy + i) * wd + ox + j]
                                        * w.data()[((co * cin + c) * kh + i) * kw + j];
                                }
                            }
                        }
                        out[((n * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn first_layer_shape() {
        let x = Tensor::<f32>::zeros(&[1, 1, 18, 64]);
        let w = Tensor::zeros(&[16, 1, 5, 11]);
        let y = conv2d_forward(&x, &w, &Tensor::zeros(&[16])).unwrap();
        assert_eq!(y.shape(), &[1, 16, 14, 54]);
    }

    #[test]
    fn all_ones_sums_kernel() {
        let x = Tensor::<f64>::full(&[1, 1, 2, 11], 1.0);
        let w = Tensor::full(&[1, 1, 2, 11], 1.0);
        let y = conv2d_forward(&x, &w, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 22.0);
    }

    #[test]
    fn matches_naive_loops() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 6, 7], |i| ((i * 37) % 11) as f64 - 5.0);
        let w = Tensor::from_fn(&[4, 3, 3, 2], |i| ((i * 13) % 7) as f64 * 0.25 - 0.7);
        let b = Tensor::from_fn(&[4], |i| i as f64 * 0.1);
        let y = conv2d_forward(&x, &w, &b).unwrap();
        let want = naive_conv2d(&x, &w, &b);
        for (a, e) in y.data().iter().zip(&want) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_larger_than_input_is_an_error() {
        let x = Tensor::<f64>::zeros(&[1, 1, 4, 64]);
        let w = Tensor::zeros(&[16, 1, 5, 11]);
        let err = conv2d_forward(&x, &w, &Tensor::zeros(&[16])).unwrap_err();
        assert!(err.to_string().contains("4x64"), "{err}");
    }

    #[test]
    fn channel_mismatch_names_dimensions() {
        let x = Tensor::<f64>::zeros(&[1, 2, 8, 8]);
        let w = Tensor::zeros(&[4, 3, 3, 3]);
        let err = conv2d_forward(&x, &w, &Tensor::zeros(&[4])).unwrap_err();
        assert!(err.to_string().contains("2 channels"), "{err}");
    }

    #[test]
    fn conv1d_identity_kernel_trims_edges() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 9], |i| (i as f64).powi(2));
        let w = Tensor::new(&[1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let y = conv1d_forward(&x, &w, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.data(), &x.data()[1..8]);
    }

    #[test]
    fn conv1d_filter_stack_lengths() {
        let mut x = Tensor::<f32>::zeros(&[1, 1, 134]);
        let mut lens = vec![];
        for (cin, cout) in [(1, 16), (16, 16), (16, 1)] {
            x = conv1d_forward(&x, &Tensor::zeros(&[cout, cin, 3]), &Tensor::zeros(&[cout])).unwrap();
            lens.push(x.shape()[2]);
        }
        assert_eq!(lens, vec![132, 130, 128]);
    }

    #[test]
    fn backward_can_skip_input_gradient() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 2, 2], 1.0);
        let go = Tensor::full(&[1, 1, 2, 2], 1.0);
        let g = conv2d_backward(&x, &w, &go, false).unwrap();
        assert!(g.input.is_none());
        assert_eq!(g.bias.data(), &[4.0]);
        assert_eq!(g.weight.data(), &[4.0; 4]);
    }
}

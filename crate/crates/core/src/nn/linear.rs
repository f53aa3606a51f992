use crate::error::{Error, Result};
use crate::scalar::{MatMut, MatRef, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn dims<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (&[b, f], &[g, wf]) = (input.shape(), weight.shape()) else {
        return Err(Error::Shape(format!(
            "linear expects input [B,F] and weight [G,F], got {:?} and {:?}",
            input.shape(),
            weight.shape()
        )));
    };
    if f != wf {
        return Err(Error::Shape(format!(
            "linear input has {f} features but weight expects {wf}"
        )));
    }
    Ok((b, f, g))
}

/// `x·Wᵀ + b` with `x [B,F]`, `W [G,F]`, `b [G]`.
pub fn linear_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, f, g) = dims(input, weight)?;
    if bias.shape() != [g] {
        return Err(Error::Shape(format!(
            "linear bias shape {:?} does not match {g} outputs",
            bias.shape()
        )));
    }
    let mut out = Tensor::zeros(&[b, g]);
    for row in out.data_mut().chunks_exact_mut(g) {
        row.copy_from_slice(bias.data());
    }
    T::gemm(
        b,
        f,
        g,
        T::one(),
        MatRef::row_major(input.data(), f),
        MatRef::transposed(weight.data(), f),
        T::one(),
        MatMut::row_major(out.data_mut(), g),
    );
    Ok(out)
}

pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (b, f, g) = dims(input, weight)?;
    if grad_out.shape() != [b, g] {
        return Err(Error::Shape(format!(
            "linear grad_out {:?} does not match output [{b}, {g}]",
            grad_out.shape()
        )));
    }
    let mut gx = Tensor::zeros(&[b, f]);
    T::gemm(
        b,
        g,
        f,
        T::one(),
        MatRef::row_major(grad_out.data(), g),
        MatRef::row_major(weight.data(), f),
        T::zero(),
        MatMut::row_major(gx.data_mut(), f),
    );
    let mut gw = Tensor::zeros(&[g, f]);
    T::gemm(
        g,
        b,
        f,
        T::one(),
        MatRef::transposed(grad_out.data(), g),
        MatRef::row_major(input.data(), f),
        T::zero(),
        MatMut::row_major(gw.data_mut(), f),
    );
    let mut gb = Tensor::zeros(&[g]);
    for row in grad_out.data().chunks_exact(g) {
        for (acc, &v) in gb.data_mut().iter_mut().zip(row) {
            *acc += v;
        }
    }
    Ok(LinearGrads { input: gx, weight: gw, bias: gb })
}

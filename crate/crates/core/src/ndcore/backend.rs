//! The primitive set the attention pipelines are written against.
//!
//! [`Eager`] evaluates directly on [`NdArray`]s; [`crate::ndcore::Tape`]
//! records the same primitives for reverse-mode differentiation.

use std::marker::PhantomData;

use crate::error::Result;
use crate::rope::{self, RopeParams};

use super::array::{NdArray, Real};
use super::attention;
use super::ops;

pub trait Backend {
    type Elem: Real;
    type T: Clone;

    fn lift(&self, a: &NdArray<Self::Elem>) -> Self::T;
    fn shape_of<'a>(&self, t: &'a Self::T) -> &'a [usize];

    fn matmul(&self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn reshape(&self, a: &Self::T, shape: &[usize]) -> Result<Self::T>;
    fn add(&self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn scale(&self, a: &Self::T, s: f64) -> Self::T;
    fn slice_last(&self, a: &Self::T, start: usize, len: usize) -> Result<Self::T>;
    fn concat_last(&self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn shift_seq(&self, a: &Self::T) -> Result<Self::T>;
    fn repeat_heads(&self, a: &Self::T, n: usize) -> Result<Self::T>;
    fn group_mean(&self, a: &Self::T, n: usize) -> Result<Self::T>;
    fn causal_conv1d(&self, x: &Self::T, kernel: &Self::T, groups: usize) -> Result<Self::T>;
    fn l2_normalize(&self, x: &Self::T, eps: f64) -> Result<Self::T>;
    fn mul_head_exp(&self, x: &Self::T, beta: &Self::T) -> Result<Self::T>;
    fn rope(&self, x: &Self::T, positions: &[usize], p: &RopeParams) -> Result<Self::T>;
    /// Per-head `softmax(scale · q kᵀ) v` on `[S, B, H, D]` operands, kv heads
    /// shared by runs of consecutive query heads.
    fn attend(&self, q: &Self::T, k: &Self::T, v: &Self::T, scale: f64, causal: bool) -> Result<Self::T>;
}

#[derive(Debug, Clone, Copy)]
pub struct Eager<F = f64>(PhantomData<F>);

impl<F> Eager<F> {
    pub const fn new() -> Self {
        Self(PhantomData)
    }
}

impl<F> Default for Eager<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Backend for Eager<F> {
    type Elem = F;
    type T = NdArray<F>;

    fn lift(&self, a: &NdArray<F>) -> NdArray<F> {
        a.clone()
    }

    fn shape_of<'a>(&self, t: &'a NdArray<F>) -> &'a [usize] {
        t.shape()
    }

    fn matmul(&self, a: &NdArray<F>, b: &NdArray<F>) -> Result<NdArray<F>> {
        ops::matmul(a, b)
    }

    fn reshape(&self, a: &NdArray<F>, shape: &[usize]) -> Result<NdArray<F>> {
        a.reshape(shape)
    }

    fn add(&self, a: &NdArray<F>, b: &NdArray<F>) -> Result<NdArray<F>> {
        ops::add(a, b)
    }

    fn scale(&self, a: &NdArray<F>, s: f64) -> NdArray<F> {
        ops::scale(a, F::of(s))
    }

    fn slice_last(&self, a: &NdArray<F>, start: usize, len: usize) -> Result<NdArray<F>> {
        ops::slice_last(a, start, len)
    }

    fn concat_last(&self, a: &NdArray<F>, b: &NdArray<F>) -> Result<NdArray<F>> {
        ops::concat_last(a, b)
    }

    fn shift_seq(&self, a: &NdArray<F>) -> Result<NdArray<F>> {
        ops::shift_seq(a)
    }

    fn repeat_heads(&self, a: &NdArray<F>, n: usize) -> Result<NdArray<F>> {
        ops::repeat_heads(a, n)
    }

    fn group_mean(&self, a: &NdArray<F>, n: usize) -> Result<NdArray<F>> {
        ops::group_mean(a, n)
    }

    fn causal_conv1d(&self, x: &NdArray<F>, kernel: &NdArray<F>, groups: usize) -> Result<NdArray<F>> {
        ops::causal_conv1d(x, kernel, groups)
    }

    fn l2_normalize(&self, x: &NdArray<F>, eps: f64) -> Result<NdArray<F>> {
        ops::l2_normalize_heads(x, F::of(eps))
    }

    fn mul_head_exp(&self, x: &NdArray<F>, beta: &NdArray<F>) -> Result<NdArray<F>> {
        ops::mul_head_exp(x, beta)
    }

    fn rope(&self, x: &NdArray<F>, positions: &[usize], p: &RopeParams) -> Result<NdArray<F>> {
        rope::rope_apply(x, positions, p)
    }

    fn attend(
        &self,
        q: &NdArray<F>,
        k: &NdArray<F>,
        v: &NdArray<F>,
        scale: f64,
        causal: bool,
    ) -> Result<NdArray<F>> {
        attention::attend(q, k, v, F::of(scale), causal)
    }
}

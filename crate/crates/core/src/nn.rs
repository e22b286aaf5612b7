//! Dense-layer building blocks with hand-written backward passes.
//!
//! Linear weights use the `[out, in]` layout so pretrained matrices load
//! without transposition.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x · wᵀ + b` for `x: [rows, in]`, `w: [out, in]`.
pub fn linear<T: Scalar>(
    x: ArrayView2<T>,
    w: ArrayView2<T>,
    b: Option<ArrayView1<T>>,
) -> Array2<T> {
    let mut y = x.dot(&w.t());
    if let Some(b) = b {
        y += &b;
    }
    y
}

/// Gradient of `linear` w.r.t. its input.
pub fn linear_backward_input<T: Scalar>(dy: ArrayView2<T>, w: ArrayView2<T>) -> Array2<T> {
    dy.dot(&w)
}

/// Gradients of `linear` w.r.t. weight and bias.
pub fn linear_backward_params<T: Scalar>(
    x: ArrayView2<T>,
    dy: ArrayView2<T>,
) -> (Array2<T>, Array1<T>) {
    (dy.t().dot(&x), dy.sum_axis(Axis(0)))
}

pub struct LayerNormCache<T> {
    pub normalized: Array2<T>,
    pub inv_std: Array1<T>,
}

pub fn layer_norm<T: Scalar>(
    x: ArrayView2<T>,
    gamma: ArrayView1<T>,
    beta: ArrayView1<T>,
) -> (Array2<T>, LayerNormCache<T>) {
    let width = T::lit(x.ncols() as f64);
    let eps = T::lit(LAYER_NORM_EPS);
    let mut normalized = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / width;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / width;
        *s = T::one() / (var + eps).sqrt();
        let r = *s;
        row.mapv_inplace(|v| v * r);
    }
    let y = &normalized * &gamma + &beta;
    (y, LayerNormCache { normalized, inv_std })
}

/// Input gradient of `layer_norm`.
pub fn layer_norm_backward<T: Scalar>(
    dy: ArrayView2<T>,
    gamma: ArrayView1<T>,
    cache: &LayerNormCache<T>,
) -> Array2<T> {
    let width = T::lit(dy.ncols() as f64);
    let dxhat = &dy * &gamma;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, g), xh), &s) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(cache.normalized.rows())
        .zip(cache.inv_std.iter())
    {
        let sum_g = g.sum();
        let sum_gx = g.dot(&xh);
        Zip::from(&mut out)
            .and(&g)
            .and(&xh)
            .for_each(|o, &gi, &xi| *o = s / width * (width * gi - sum_g - xi * sum_gx));
    }
    dx
}

/// Gradients of `layer_norm` w.r.t. gamma and beta.
pub fn layer_norm_backward_params<T: Scalar>(
    dy: ArrayView2<T>,
    cache: &LayerNormCache<T>,
) -> (Array1<T>, Array1<T>) {
    ((&dy * &cache.normalized).sum_axis(Axis(0)), dy.sum_axis(Axis(0)))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_K) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let c = T::lit(GELU_C);
    let k = T::lit(GELU_K);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

/// `x · sigmoid(1.702 x)`, the activation of the OpenAI CLIP checkpoints.
#[inline]
pub fn quick_gelu<T: Scalar>(x: T) -> T {
    x * sigmoid(T::lit(1.702) * x)
}

#[inline]
pub fn quick_gelu_grad<T: Scalar>(x: T) -> T {
    let a = T::lit(1.702);
    let s = sigmoid(a * x);
    s + x * a * s * (T::one() - s)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(scores: &mut Array2<T>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Stable `ln Σ exp(v)`.
pub fn log_sum_exp<T: Scalar>(values: impl Iterator<Item = T> + Clone) -> T {
    let max = values.clone().fold(T::neg_infinity(), |m, v| m.max(v));
    if max == T::neg_infinity() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<T>().ln()
}

/// Returns `v / ‖v‖` and `‖v‖`.
pub fn l2_normalize<T: Scalar>(v: ArrayView1<T>) -> (Array1<T>, T) {
    let norm = v.dot(&v).sqrt();
    if norm == T::zero() {
        return (v.to_owned(), norm);
    }
    (v.mapv(|x| x / norm), norm)
}

/// Gradient through `y = v / ‖v‖` given `y`, `‖v‖` and `dy`.
pub fn l2_normalize_backward<T: Scalar>(y: ArrayView1<T>, norm: T, dy: ArrayView1<T>) -> Array1<T> {
    let proj = y.dot(&dy);
    Zip::from(&y).and(&dy).map_collect(|&yi, &gi| (gi - yi * proj) / norm)
}

//! Dense `f32` tensors and the handful of kernels the rest of the crate needs.
//!
//! Storage is row-major. Every reduction sums over the input index in
//! ascending order, so two kernels that visit the same non-zero terms in the
//! same order produce bit-identical results.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        assert!(!data.is_empty(), "empty vector tensor");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        self.map(|x| x * factor)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "elementwise operands {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Index of the largest element; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }
}

/// Lowest index among the maxima of `values`. NaN never wins.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] || values[best].is_nan() && !v.is_nan() {
            best = i;
        }
    }
    best
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::dim(format!(
            "tensor rank must be 1..=4, got shape {:?}",
            shape
        )));
    }
    if shape.contains(&0) {
        return Err(Error::dim(format!("zero-sized dimension in {:?}", shape)));
    }
    Ok(())
}

/// `out[j] = bias[j] + sum_i weights[j, i] * input[i]` with `weights` stored `m x n`.
pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = dense_dims(input, weights, bias)?;
    let x = input.data();
    let w = weights.data();
    let mut out = Vec::with_capacity(m);
    for j in 0..m {
        let row = &w[j * n..(j + 1) * n];
        let mut acc = 0.0f32;
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        out.push(bias.data()[j] + acc);
    }
    Ok(Tensor::vector(out))
}

fn dense_dims(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    if weights.shape().len() != 2 {
        return Err(Error::dim(format!(
            "dense weights must be 2-D, got {:?}",
            weights.shape()
        )));
    }
    let (m, n) = (weights.shape()[0], weights.shape()[1]);
    if input.len() != n {
        return Err(Error::dim(format!(
            "input {:?} does not match weights {:?}",
            input.shape(),
            weights.shape()
        )));
    }
    if bias.len() != m {
        return Err(Error::dim(format!(
            "bias {:?} does not match weights {:?}",
            bias.shape(),
            weights.shape()
        )));
    }
    Ok((m, n))
}

/// Transpose an `m x n` matrix into `n x m` so that each input's fan-out is contiguous.
pub fn transpose(weights: &Tensor) -> Result<Tensor> {
    if weights.shape().len() != 2 {
        return Err(Error::dim(format!(
            "transpose needs a 2-D tensor, got {:?}",
            weights.shape()
        )));
    }
    let (m, n) = (weights.shape()[0], weights.shape()[1]);
    let w = weights.data();
    let mut out = vec![0.0f32; m * n];
    for j in 0..m {
        for i in 0..n {
            out[i * m + j] = w[j * n + i];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Dense layer over column-major (`n x m`) weights that skips zero inputs.
///
/// Bit-identical to [`dense_forward`] on the untransposed weights whenever all
/// weights are finite: each output accumulates the same non-zero products in
/// the same ascending input order, and the skipped terms are exact zeros.
pub fn dense_forward_sparse(input: &[f32], weights_t: &[f32], bias: &[f32], out: &mut [f32]) {
    let m = bias.len();
    debug_assert_eq!(weights_t.len(), input.len() * m);
    debug_assert_eq!(out.len(), m);
    out.fill(0.0);
    for (i, &x) in input.iter().enumerate() {
        if x != 0.0 {
            axpy(x, &weights_t[i * m..(i + 1) * m], out);
        }
    }
    for (o, b) in out.iter_mut().zip(bias) {
        *o = b + *o;
    }
}

/// `acc += alpha * x`. Uses 256-bit vectors when the CPU has them; the
/// multiply and add stay separate, so results do not depend on the CPU.
#[inline]
pub fn axpy(alpha: f32, x: &[f32], acc: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    if acc.len() >= 32 && std::is_x86_feature_detected!("avx") {
        // SAFETY: AVX support was just checked.
        unsafe { axpy_avx(alpha, x, acc) };
        return;
    }
    axpy_plain(alpha, x, acc);
}

#[inline(always)]
fn axpy_plain(alpha: f32, x: &[f32], acc: &mut [f32]) {
    for (a, &xi) in acc.iter_mut().zip(x) {
        *a += xi * alpha;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn axpy_avx(alpha: f32, x: &[f32], acc: &mut [f32]) {
    axpy_plain(alpha, x, acc);
}

/// Output spatial size of a valid (unpadded) convolution.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input < kernel {
        None
    } else {
        Some((input - kernel) / stride + 1)
    }
}

/// Valid 2-D cross-correlation of a `C x H x W` input with `K x C x kh x kw` kernels.
pub fn conv2d_forward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Result<Tensor> {
    let geom = ConvGeometry::new(input.shape(), kernels.shape(), stride)?;
    if bias.len() != geom.out_channels {
        return Err(Error::dim(format!(
            "conv bias {:?} does not match kernels {:?}",
            bias.shape(),
            kernels.shape()
        )));
    }
    let x = input.data();
    let k = kernels.data();
    let ConvGeometry {
        in_channels: c_in,
        in_h: h,
        in_w: w,
        out_channels: c_out,
        kh,
        kw,
        out_h,
        out_w,
        stride: s,
    } = geom;
    let mut out = vec![0.0f32; c_out * out_h * out_w];
    for oc in 0..c_out {
        let kbase = oc * c_in * kh * kw;
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = 0.0f32;
                for ic in 0..c_in {
                    for ky in 0..kh {
                        let xrow = ic * h * w + (oy * s + ky) * w + ox * s;
                        let krow = kbase + (ic * kh + ky) * kw;
                        for kx in 0..kw {
                            acc += k[krow + kx] * x[xrow + kx];
                        }
                    }
                }
                out[(oc * out_h + oy) * out_w + ox] = bias.data()[oc] + acc;
            }
        }
    }
    Tensor::new(vec![c_out, out_h, out_w], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn new(input_shape: &[usize], kernel_shape: &[usize], stride: usize) -> Result<Self> {
        if input_shape.len() != 3 || kernel_shape.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d needs a C x H x W input and K x C x kh x kw kernels, got {:?} and {:?}",
                input_shape, kernel_shape
            )));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be positive".to_string()));
        }
        let (c_in, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
        let (c_out, kc, kh, kw) = (
            kernel_shape[0],
            kernel_shape[1],
            kernel_shape[2],
            kernel_shape[3],
        );
        if kc != c_in {
            return Err(Error::dim(format!(
                "input {:?} has {} channels but kernels {:?} expect {}",
                input_shape, c_in, kernel_shape, kc
            )));
        }
        let (out_h, out_w) = match (
            conv_output_size(h, kh, stride),
            conv_output_size(w, kw, stride),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::dim(format!(
                    "kernel {:?} larger than input {:?}",
                    kernel_shape, input_shape
                )))
            }
        };
        Ok(ConvGeometry {
            in_channels: c_in,
            in_h: h,
            in_w: w,
            out_channels: c_out,
            kh,
            kw,
            out_h,
            out_w,
            stride,
        })
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.out_channels, self.out_h, self.out_w]
    }
}

/// Adds the contribution of a single unit-valued input at flat index `src`
/// to every output position whose receptive field covers it.
pub fn conv2d_scatter(
    geom: &ConvGeometry,
    kernels: &[f32],
    src: usize,
    weight: f32,
    out: &mut [f32],
) {
    let plane = geom.in_h * geom.in_w;
    let ic = src / plane;
    let y = (src % plane) / geom.in_w;
    let x = src % geom.in_w;
    let s = geom.stride;
    // output rows oy with oy*s <= y < oy*s + kh
    let oy_lo = if y + 1 > geom.kh {
        (y + 1 - geom.kh).div_ceil(s)
    } else {
        0
    };
    let oy_hi = (y / s).min(geom.out_h - 1);
    let ox_lo = if x + 1 > geom.kw {
        (x + 1 - geom.kw).div_ceil(s)
    } else {
        0
    };
    let ox_hi = (x / s).min(geom.out_w - 1);
    if oy_lo > oy_hi || ox_lo > ox_hi {
        return;
    }
    let ksize = geom.kh * geom.kw;
    for oc in 0..geom.out_channels {
        let kbase = (oc * geom.in_channels + ic) * ksize;
        let obase = oc * geom.out_h * geom.out_w;
        for oy in oy_lo..=oy_hi {
            let ky = y - oy * s;
            for ox in ox_lo..=ox_hi {
                let kx = x - ox * s;
                out[obase + oy * geom.out_w + ox] += weight * kernels[kbase + ky * geom.kw + kx];
            }
        }
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_in_place(x: &mut [f32]) {
    for v in x {
        *v = v.max(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1, 1], vec![1.0]).is_err());
    }

    #[test]
    fn dense_identity() {
        let out = dense_forward(
            &Tensor::vector(vec![1.0, 2.0]),
            &t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]),
            &Tensor::vector(vec![0.0, 0.0]),
        )
        .unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    #[test]
    fn dense_zero_input_passes_bias() {
        let out = dense_forward(
            &Tensor::vector(vec![0.0, 0.0]),
            &t(&[2, 2], &[5.0, -2.0, 7.0, 1.5]),
            &Tensor::vector(vec![3.0, -1.0]),
        )
        .unwrap();
        assert_eq!(out.data(), &[3.0, -1.0]);
    }

    #[test]
    fn dense_row_sum() {
        let out = dense_forward(
            &Tensor::vector(vec![1.0, 1.0, 1.0]),
            &t(&[1, 3], &[1.0, 2.0, 3.0]),
            &Tensor::vector(vec![0.0]),
        )
        .unwrap();
        assert_eq!(out.data(), &[6.0]);
    }

    #[test]
    fn dense_shape_error_names_both_shapes() {
        let err = dense_forward(
            &Tensor::vector(vec![1.0, 2.0, 3.0]),
            &t(&[2, 2], &[1.0; 4]),
            &Tensor::vector(vec![0.0, 0.0]),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn conv_all_ones() {
        let out = conv2d_forward(
            &Tensor::full(&[1, 3, 3], 1.0),
            &Tensor::full(&[1, 1, 2, 2], 1.0),
            &Tensor::vector(vec![0.0]),
            1,
        )
        .unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv_stride_two_shape() {
        let out = conv2d_forward(
            &Tensor::full(&[1, 4, 4], 1.0),
            &Tensor::full(&[1, 1, 2, 2], 1.0),
            &Tensor::vector(vec![0.0]),
            2,
        )
        .unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
    }

    #[test]
    fn conv_kernel_too_large() {
        let err = conv2d_forward(
            &Tensor::full(&[1, 2, 2], 1.0),
            &Tensor::full(&[1, 1, 3, 3], 1.0),
            &Tensor::vector(vec![0.0]),
            1,
        );
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu(&Tensor::vector(vec![-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        assert!(relu(&Tensor::vector(vec![-3.0, -0.5]))
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let pos = Tensor::vector(vec![0.0, 1.0, 4.5]);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.0, 3.0, 1.0, 3.0]), 1);
        assert_eq!(argmax(&[f32::NAN, 1.0]), 1);
    }

    #[test]
    fn scatter_matches_dense_conv() {
        let geom = ConvGeometry::new(&[2, 7, 6], &[3, 2, 3, 2], 2).unwrap();
        let kernels: Vec<f32> = (0..36).map(|i| (i as f32 * 0.37).sin()).collect();
        let ktensor = Tensor::new(vec![3, 2, 3, 2], kernels.clone()).unwrap();
        let bias = Tensor::zeros(&[3]);
        for src in 0..(2 * 7 * 6) {
            let mut input = Tensor::zeros(&[2, 7, 6]);
            input.data_mut()[src] = 1.0;
            let want = conv2d_forward(&input, &ktensor, &bias, 2).unwrap();
            let mut got = vec![0.0; want.len()];
            conv2d_scatter(&geom, &kernels, src, 1.0, &mut got);
            assert_eq!(got, want.data(), "src {src}");
        }
    }
}

//! Strided convolutional encoder, average pooling and linear projector with
//! hand-written backward passes.

use ndarray::{Array1, Array2, Array3, ArrayView2};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub canvas: usize,
    /// Output channels of each stride-2 convolution; the last entry is D.
    pub channels: Vec<usize>,
    /// Projector output width F.
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            canvas: 64,
            channels: vec![8, 16, 32],
            embed_dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("at least one conv layer")
    }

    /// Spatial side of the feature map (R = S).
    pub fn grid(&self) -> usize {
        self.canvas >> self.channels.len()
    }

    /// Source pixels per feature cell along one axis.
    pub fn cell(&self) -> usize {
        1 << self.channels.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `[out, in, 4, 4]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub conv: Vec<ConvLayer>,
    /// `[F, D]`
    pub proj_weight: Tensor,
    /// `[F]`
    pub proj_bias: Tensor,
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let mut in_ch = 1;
        let mut conv = Vec::with_capacity(cfg.channels.len());
        for &out_ch in &cfg.channels {
            let fan_in = in_ch * KERNEL * KERNEL;
            conv.push(ConvLayer {
                weight: Tensor::he_normal(&[out_ch, in_ch, KERNEL, KERNEL], fan_in, rng),
                bias: Tensor::zeros(&[out_ch]),
            });
            in_ch = out_ch;
        }
        let d = cfg.feature_dim();
        let f = cfg.embed_dim;
        EncoderParams {
            conv,
            proj_weight: Tensor::glorot_uniform(&[f, d], d, f, rng),
            proj_bias: Tensor::zeros(&[f]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            conv: self
                .conv
                .iter()
                .map(|l| ConvLayer {
                    weight: l.weight.zeros_like(),
                    bias: l.bias.zeros_like(),
                })
                .collect(),
            proj_weight: self.proj_weight.zeros_like(),
            proj_bias: self.proj_bias.zeros_like(),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (k, l) in self.conv.iter().enumerate() {
            out.push((format!("conv{k}.weight"), &l.weight));
            out.push((format!("conv{k}.bias"), &l.bias));
        }
        out.push(("proj.weight".into(), &self.proj_weight));
        out.push(("proj.bias".into(), &self.proj_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (k, l) in self.conv.iter_mut().enumerate() {
            out.push((format!("conv{k}.weight"), &mut l.weight));
            out.push((format!("conv{k}.bias"), &mut l.bias));
        }
        out.push(("proj.weight".into(), &mut self.proj_weight));
        out.push(("proj.bias".into(), &mut self.proj_bias));
        out
    }

    pub fn embed_dim(&self) -> usize {
        self.proj_weight.shape[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.proj_weight.shape[1]
    }

    fn check_finite(&self) -> Result<()> {
        if self.tensors().iter().all(|(_, t)| t.is_finite()) {
            Ok(())
        } else {
            Err(Error::NumericOverflow("encoder parameters".into()))
        }
    }
}

/// Valid output columns `x` for kernel offset `k` given input extent `n`:
/// those with `0 <= STRIDE·x + k - PAD < n`.
fn out_range(k: usize, n: usize, out_n: usize) -> std::ops::Range<usize> {
    let lo = PAD.saturating_sub(k).div_ceil(STRIDE);
    // STRIDE·x + k - PAD <= n - 1
    let hi = if n + PAD > k {
        ((n + PAD - 1 - k) / STRIDE + 1).min(out_n)
    } else {
        0
    };
    lo..hi.max(lo)
}

/// Patch matrix `[in·K·K, oh·ow]`; out-of-bounds taps are zero.
fn im2col(input: &Array3<f64>) -> Array2<f64> {
    let (in_ch, h, w) = input.dim();
    let (oh, ow) = (h / STRIDE, w / STRIDE);
    let src = input.as_slice().expect("standard layout");
    let mut cols = vec![0.0; in_ch * KERNEL * KERNEL * oh * ow];
    for i in 0..in_ch {
        let chan = &src[i * h * w..(i + 1) * h * w];
        for ky in 0..KERNEL {
            let ys = out_range(ky, h, oh);
            for kx in 0..KERNEL {
                let xs = out_range(kx, w, ow);
                let row = ((i * KERNEL + ky) * KERNEL + kx) * oh * ow;
                for y in ys.clone() {
                    let iy = STRIDE * y + ky - PAD;
                    let dst = &mut cols[row + y * ow..row + (y + 1) * ow];
                    for x in xs.clone() {
                        dst[x] = chan[iy * w + STRIDE * x + kx - PAD];
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((in_ch * KERNEL * KERNEL, oh * ow), cols).expect("shape matches")
}

/// Adjoint of [`im2col`].
fn col2im(cols: &Array2<f64>, in_ch: usize, h: usize, w: usize) -> Array3<f64> {
    let (oh, ow) = (h / STRIDE, w / STRIDE);
    let src = cols.as_slice().expect("standard layout");
    let mut out = vec![0.0; in_ch * h * w];
    for i in 0..in_ch {
        let chan = &mut out[i * h * w..(i + 1) * h * w];
        for ky in 0..KERNEL {
            let ys = out_range(ky, h, oh);
            for kx in 0..KERNEL {
                let xs = out_range(kx, w, ow);
                let row = ((i * KERNEL + ky) * KERNEL + kx) * oh * ow;
                for y in ys.clone() {
                    let iy = STRIDE * y + ky - PAD;
                    let g = &src[row + y * ow..row + (y + 1) * ow];
                    for x in xs.clone() {
                        chan[iy * w + STRIDE * x + kx - PAD] += g[x];
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((in_ch, h, w), out).expect("shape matches")
}

fn weight_matrix(layer: &ConvLayer) -> ArrayView2<'_, f64> {
    let out_ch = layer.weight.shape[0];
    ArrayView2::from_shape((out_ch, layer.weight.len() / out_ch), &layer.weight.data).expect("rank-4 weight")
}

fn conv_forward(input: &Array3<f64>, layer: &ConvLayer) -> Array3<f64> {
    let (_, h, w) = input.dim();
    let out_ch = layer.weight.shape[0];
    let (oh, ow) = (h / STRIDE, w / STRIDE);
    let mut out = weight_matrix(layer).dot(&im2col(input));
    for (mut row, b) in out.outer_iter_mut().zip(&layer.bias.data) {
        row += *b;
    }
    out.into_shape_with_order((out_ch, oh, ow)).expect("shape matches")
}

/// Accumulates weight/bias gradients and returns the input gradient.
fn conv_backward(
    input: &Array3<f64>,
    layer: &ConvLayer,
    grad_out: &Array3<f64>,
    grad_layer: &mut ConvLayer,
    want_input_grad: bool,
) -> Option<Array3<f64>> {
    let (in_ch, h, w) = input.dim();
    let (out_ch, oh, ow) = grad_out.dim();
    let g = grad_out.view().into_shape_with_order((out_ch, oh * ow)).expect("standard layout");
    for (o, row) in g.outer_iter().enumerate() {
        grad_layer.bias.data[o] += row.sum();
    }
    let gw = g.dot(&im2col(input).t());
    for (a, b) in grad_layer.weight.data.iter_mut().zip(gw.iter()) {
        *a += b;
    }
    want_input_grad.then(|| col2im(&weight_matrix(layer).t().dot(&g), in_ch, h, w))
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Array3<f64>,
    pub pre: Vec<Array3<f64>>,
    pub post: Vec<Array3<f64>>,
    pub pooled: Array1<f64>,
    pub projected: Array1<f64>,
    pub norm: f64,
    pub z: Array1<f64>,
}

impl ForwardTrace {
    /// Feature map `y` (D × R × S).
    pub fn y(&self) -> &Array3<f64> {
        self.post.last().expect("at least one conv layer")
    }
}

pub fn forward(params: &EncoderParams, view: &Array2<f64>) -> Result<ForwardTrace> {
    let (h, w) = view.dim();
    if h != w || h % (1 << params.conv.len()) != 0 {
        return Err(Error::contract(format!("view of shape {h}x{w} does not fit the encoder")));
    }
    let input = view
        .clone()
        .into_shape_with_order((1, h, w))
        .expect("same element count");
    let mut pre = Vec::with_capacity(params.conv.len());
    let mut post: Vec<Array3<f64>> = Vec::with_capacity(params.conv.len());
    for layer in &params.conv {
        let a = conv_forward(post.last().unwrap_or(&input), layer);
        post.push(a.mapv(|v| v.max(0.0)));
        pre.push(a);
    }
    let y = post.last().expect("at least one conv layer");
    let (d, r, s) = y.dim();
    if d != params.feature_dim() {
        return Err(Error::contract("projector width does not match feature channels"));
    }
    let cells = (r * s) as f64;
    let pooled: Array1<f64> = y
        .outer_iter()
        .map(|chan| chan.iter().sum::<f64>() / cells)
        .collect();
    let f = params.embed_dim();
    let wt = &params.proj_weight.data;
    let projected: Array1<f64> = (0..f)
        .map(|k| {
            params.proj_bias.data[k]
                + wt[k * d..(k + 1) * d]
                    .iter()
                    .zip(pooled.iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        })
        .collect();
    if !projected.iter().all(|v| v.is_finite()) {
        params.check_finite()?;
        return Err(Error::NumericOverflow("encoder activations".into()));
    }
    let norm = projected.dot(&projected).sqrt();
    if norm < NORM_EPS {
        return Err(Error::DegenerateEmbedding);
    }
    let z = &projected / norm;
    Ok(ForwardTrace {
        input,
        pre,
        post,
        pooled,
        projected,
        norm,
        z,
    })
}

/// Back-propagates partials of a scalar loss w.r.t. the feature map `y` and
/// the normalized embedding `z`. Returns parameter gradients and the gradient
/// w.r.t. the input view.
pub fn backward(
    params: &EncoderParams,
    trace: &ForwardTrace,
    grad_y: &Array3<f64>,
    grad_z: &Array1<f64>,
) -> Result<(EncoderParams, Array2<f64>)> {
    let mut grads = params.zeros_like();
    let input_grad = backward_into(params, trace, grad_y, grad_z, &mut grads, true)?;
    Ok((grads, input_grad.expect("requested")))
}

/// Like [`backward`] but accumulates into `grads`; skips the input gradient
/// unless asked for it.
pub fn backward_into(
    params: &EncoderParams,
    trace: &ForwardTrace,
    grad_y: &Array3<f64>,
    grad_z: &Array1<f64>,
    grads: &mut EncoderParams,
    want_input_grad: bool,
) -> Result<Option<Array2<f64>>> {
    let y = trace.y();
    if grad_y.dim() != y.dim() || grad_z.len() != trace.z.len() {
        return Err(Error::contract("gradient shapes do not match the forward trace"));
    }
    let (d, r, s) = y.dim();
    let f = trace.z.len();

    // z = u / |u|  =>  du = (gz - z (z·gz)) / |u|
    let zg = trace.z.dot(grad_z);
    let grad_u: Array1<f64> = (grad_z - &(&trace.z * zg)) / trace.norm;

    let wt = &params.proj_weight.data;
    let mut grad_pooled = Array1::<f64>::zeros(d);
    for k in 0..f {
        let gu = grad_u[k];
        grads.proj_bias.data[k] += gu;
        for j in 0..d {
            grads.proj_weight.data[k * d + j] += gu * trace.pooled[j];
            grad_pooled[j] += gu * wt[k * d + j];
        }
    }

    let cells = (r * s) as f64;
    let mut grad = grad_y.clone();
    for (j, mut chan) in grad.outer_iter_mut().enumerate() {
        let share = grad_pooled[j] / cells;
        chan.mapv_inplace(|v| v + share);
    }

    let layers = params.conv.len();
    for l in (0..layers).rev() {
        // ReLU
        grad.zip_mut_with(&trace.pre[l], |g, &p| {
            if p <= 0.0 {
                *g = 0.0;
            }
        });
        let input = if l == 0 { &trace.input } else { &trace.post[l - 1] };
        let need_in = l > 0 || want_input_grad;
        match conv_backward(input, &params.conv[l], &grad, &mut grads.conv[l], need_in) {
            Some(g) => grad = g,
            None => return Ok(None),
        }
    }
    let (_, h, w) = grad.dim();
    Ok(Some(
        grad.into_shape_with_order((h, w)).expect("single input channel"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::Array;
    use rand::Rng as _;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            canvas: 16,
            channels: vec![3, 4],
            embed_dim: 3,
        }
    }

    fn random_view(n: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::stream(seed, "view");
        Array::from_shape_fn((n, n), |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn output_shapes_and_unit_norm() {
        let cfg = EncoderConfig::default();
        let params = EncoderParams::init(&cfg, &mut rng::stream(1, rng::INIT));
        let trace = forward(&params, &random_view(64, 2)).unwrap();
        assert_eq!(trace.y().dim(), (32, 8, 8));
        assert_eq!(trace.z.len(), 32);
        assert!((trace.z.dot(&trace.z).sqrt() - 1.0).abs() < 1e-6);
        for (d, chan) in trace.y().outer_iter().enumerate() {
            let mean = chan.iter().sum::<f64>() / 64.0;
            assert!((mean - trace.pooled[d]).abs() < 1e-12);
        }
        let again = forward(&params, &random_view(64, 2)).unwrap();
        assert_eq!(again.z, trace.z);
    }

    #[test]
    fn zero_params_are_degenerate() {
        let cfg = small_cfg();
        let params = EncoderParams::init(&cfg, &mut rng::stream(1, rng::INIT)).zeros_like();
        assert!(matches!(
            forward(&params, &random_view(16, 1)),
            Err(Error::DegenerateEmbedding)
        ));
    }

    #[test]
    fn wrong_view_size_is_rejected() {
        let params = EncoderParams::init(&small_cfg(), &mut rng::stream(1, rng::INIT));
        assert!(matches!(
            forward(&params, &random_view(15, 1)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = small_cfg();
        let params = EncoderParams::init(&cfg, &mut rng::stream(3, rng::INIT));
        let trace = forward(&params, &random_view(16, 4)).unwrap();
        let (g, gi) = backward(
            &params,
            &trace,
            &Array3::zeros(trace.y().dim()),
            &Array1::zeros(trace.z.len()),
        )
        .unwrap();
        assert!(g.tensors().iter().all(|(_, t)| t.data.iter().all(|v| *v == 0.0)));
        assert!(gi.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn normalization_gradient_is_orthogonal_to_z() {
        let cfg = small_cfg();
        let params = EncoderParams::init(&cfg, &mut rng::stream(3, rng::INIT));
        let trace = forward(&params, &random_view(16, 4)).unwrap();
        // A pure radial upstream gradient (along z) has no effect.
        let (g, _) = backward(&params, &trace, &Array3::zeros(trace.y().dim()), &trace.z).unwrap();
        assert!(g.proj_bias.data.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let cfg = small_cfg();
        let params = EncoderParams::init(&cfg, &mut rng::stream(3, rng::INIT));
        let trace = forward(&params, &random_view(16, 4)).unwrap();
        let err = backward(&params, &trace, &Array3::zeros((1, 1, 1)), &trace.z);
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}

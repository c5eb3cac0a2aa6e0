//! Layers with explicit forward/backward passes.
//!
//! Forward passes take `&self` and return whatever the backward pass needs;
//! backward passes take `&mut self` and accumulate into the parameter
//! gradient buffers. Running batch-norm statistics are only touched by
//! [`BatchNorm2d::absorb`].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::conv::{self, ConvGeom};
use crate::numerics::tensor::{Param, Tensor};

/// Forward-pass mode for layers whose behaviour differs between training
/// and inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Anything holding parameters and persistent buffers.
pub trait Module {
    /// Every trainable parameter, with a dotted path name.
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    /// Every persisted tensor (parameter values and buffers), read-only.
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));

    /// Every persisted tensor (parameter values and buffers), mutable.
    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut total = 0;
        self.visit_params("", &mut |_, p| total += p.value.numel());
        total
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

// ---------------------------------------------------------------------------

/// 2-d convolution with square kernels, weights `(out, in, k, k)`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = [out_channels, in_channels, kernel, kernel];
        Self {
            weight: Param::new(kaiming(&shape, in_channels * kernel * kernel, rng)),
            bias: Param::new(Tensor::zeros(&[out_channels])),
            stride,
            padding,
        }
    }

    pub fn from_weights(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let [o, ..] = weight.shape()[..] else {
            return Err(Error::shape("conv2d", weight.shape(), &[], "weight must be 4-d"));
        };
        bias.expect_shape("conv2d bias", &[o])?;
        Ok(Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            stride,
            padding,
        })
    }

    fn geom(&self, x: &Tensor) -> Result<ConvGeom> {
        ConvGeom::new("conv2d", x.shape(), self.weight.value.shape(), self.stride, self.padding)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.geom(x)?;
        Ok(conv::conv2d_forward(x, &self.weight.value, Some(&self.bias.value), &g))
    }

    /// Backward pass given the forward input `x`; returns the input gradient.
    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let g = self.geom(x)?;
        grad_out.expect_shape("conv2d backward", &g.output_shape())?;
        conv::conv2d_backward_weight(x, grad_out, &mut self.weight.grad, &g);
        conv::channel_sums(grad_out, &mut self.bias.grad);
        Ok(conv::conv2d_backward_input(grad_out, &self.weight.value, &g))
    }
}

impl Module for Conv2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight.value);
        f(&join(prefix, "bias"), &self.bias.value);
    }
    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight.value);
        f(&join(prefix, "bias"), &mut self.bias.value);
    }
}

// ---------------------------------------------------------------------------

/// Transposed convolution, weights `(in, out, k, k)`, no padding.
///
/// The forward pass is the input-adjoint of a [`Conv2d`] with the same
/// weight tensor, so output extent is `(H - 1) * stride + k`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = [in_channels, out_channels, kernel, kernel];
        let fan_in = (in_channels * kernel * kernel / (stride * stride)).max(1);
        Self {
            weight: Param::new(kaiming(&shape, fan_in, rng)),
            bias: Param::new(Tensor::zeros(&[out_channels])),
            stride,
        }
    }

    pub fn from_weights(weight: Tensor, bias: Tensor, stride: usize) -> Result<Self> {
        let [_, o, ..] = weight.shape()[..] else {
            return Err(Error::shape("conv2d_transpose", weight.shape(), &[], "weight must be 4-d"));
        };
        bias.expect_shape("conv2d_transpose bias", &[o])?;
        Ok(Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            stride,
        })
    }

    /// Geometry of the adjoint convolution mapping the output back to `x`.
    fn geom(&self, x: &Tensor) -> Result<ConvGeom> {
        let (n, c, h, w) = x.dims4("conv2d_transpose")?;
        let ws = self.weight.value.shape();
        let [c_in, c_out, k, _] = ws[..] else {
            return Err(Error::shape("conv2d_transpose", x.shape(), ws, "weight must be 4-d"));
        };
        if c != c_in {
            return Err(Error::shape(
                "conv2d_transpose",
                x.shape(),
                ws,
                format!("input has {c} channels, weight expects {c_in}"),
            ));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("conv2d_transpose stride must be positive".into()));
        }
        let ho = (h - 1) * self.stride + k;
        let wo = (w - 1) * self.stride + k;
        ConvGeom::new("conv2d_transpose", &[n, c_out, ho, wo], ws, self.stride, 0)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.geom(x)?;
        let mut out = conv::conv2d_backward_input(x, &self.weight.value, &g);
        let plane = g.h * g.w;
        let od = out.data_mut();
        for n in 0..g.n {
            for c in 0..g.c_in {
                let b = self.bias.value.data()[c];
                let base = (n * g.c_in + c) * plane;
                od[base..base + plane].iter_mut().for_each(|v| *v += b);
            }
        }
        Ok(out)
    }

    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let g = self.geom(x)?;
        grad_out.expect_shape("conv2d_transpose backward", &[g.n, g.c_in, g.h, g.w])?;
        // <g, T(x; W)> = <C(g; W), x>, so the weight gradient is the conv
        // weight gradient with the roles of input and output swapped.
        conv::conv2d_backward_weight(grad_out, x, &mut self.weight.grad, &g);
        conv::channel_sums(grad_out, &mut self.bias.grad);
        Ok(conv::conv2d_forward(grad_out, &self.weight.value, None, &g))
    }
}

impl Module for ConvTranspose2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight.value);
        f(&join(prefix, "bias"), &self.bias.value);
    }
    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight.value);
        f(&join(prefix, "bias"), &mut self.bias.value);
    }
}

// ---------------------------------------------------------------------------

/// 2x2 max pooling with stride 2. Returns the output and, for every output
/// element, the flat input index that won (first row-major maximum).
pub fn maxpool2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = x.dims4("maxpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("maxpool2", x.shape(), &[2, 2], "spatial dims must be even"));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut argmax = vec![0usize; n * c * ho * wo];
    let xd = x.data();
    let od = out.data_mut();
    for plane in 0..n * c {
        let ib = plane * h * w;
        let ob = plane * ho * wo;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = ib + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ib + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                od[ob + oy * wo + ox] = xd[best];
                argmax[ob + oy * wo + ox] = best;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2_backward(argmax: &[usize], input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let mut gin = Tensor::zeros(input_shape);
    let gd = gin.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gd[idx] += g;
    }
    gin
}

// ---------------------------------------------------------------------------

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Backward of [`relu`] given its forward *output*; the subgradient at 0 is 0.
pub fn relu_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    output
        .zip_map(grad_out, |y, g| if y > 0.0 { g } else { 0.0 })
        .expect("relu_backward shapes")
}

// ---------------------------------------------------------------------------

/// Per-channel batch normalisation with affine parameters.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

/// What the batch-norm backward pass needs from its forward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    mode: Mode,
    normalized: Tensor,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    count: usize,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[channels], 1.0)),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.numel()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, BnCache)> {
        let (n, c, h, w) = x.dims4("batchnorm")?;
        if c != self.channels() {
            return Err(Error::shape(
                "batchnorm",
                x.shape(),
                self.gamma.value.shape(),
                format!("input has {c} channels, layer has {}", self.channels()),
            ));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("batchnorm epsilon must be positive".into()));
        }
        if mode == Mode::Train && n < 2 {
            return Err(Error::InvalidArgument(
                "batchnorm in training mode needs a batch of at least 2".into(),
            ));
        }
        let plane = h * w;
        let count = n * plane;
        let xd = x.data();
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        let b = (i * c + ch) * plane;
                        s += xd[b..b + plane].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut v = 0.0;
                    for i in 0..n {
                        let b = (i * c + ch) * plane;
                        v += xd[b..b + plane].iter().map(|x| (x - m) * (x - m)).sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = v / count as f64;
                }
                (mean, var)
            }
            Mode::Inference => (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut normalized = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        {
            let nd = normalized.data_mut();
            let od = out.data_mut();
            for i in 0..n {
                for ch in 0..c {
                    let b = (i * c + ch) * plane;
                    let (g, bt) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
                    for j in b..b + plane {
                        let v = (xd[j] - mean[ch]) * inv_std[ch];
                        nd[j] = v;
                        od[j] = g * v + bt;
                    }
                }
            }
        }
        Ok((
            out,
            BnCache {
                mode,
                normalized,
                inv_std,
                batch_mean: mean,
                batch_var: var,
                count,
            },
        ))
    }

    /// Folds the batch statistics of a training-mode forward pass into the
    /// running estimates. Inference-mode caches are ignored.
    pub fn absorb(&mut self, cache: &BnCache) {
        if cache.mode != Mode::Train {
            return;
        }
        let m = self.momentum;
        let unbias = cache.count as f64 / (cache.count as f64 - 1.0).max(1.0);
        for ch in 0..self.channels() {
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = (1.0 - m) * *rm + m * cache.batch_mean[ch];
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = (1.0 - m) * *rv + m * cache.batch_var[ch] * unbias;
        }
    }

    pub fn backward(&mut self, cache: &BnCache, grad_out: &Tensor) -> Result<Tensor> {
        grad_out.expect_same_shape("batchnorm backward", &cache.normalized)?;
        let (n, c, h, w) = grad_out.dims4("batchnorm backward")?;
        let plane = h * w;
        let gd = grad_out.data();
        let xh = cache.normalized.data();
        let mut gin = Tensor::zeros(grad_out.shape());
        let id = gin.data_mut();
        for ch in 0..c {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for i in 0..n {
                let b = (i * c + ch) * plane;
                for j in b..b + plane {
                    sum_g += gd[j];
                    sum_gx += gd[j] * xh[j];
                }
            }
            self.gamma.grad.data_mut()[ch] += sum_gx;
            self.beta.grad.data_mut()[ch] += sum_g;
            let gamma = self.gamma.value.data()[ch];
            let scale = gamma * cache.inv_std[ch];
            match cache.mode {
                Mode::Train => {
                    let m = cache.count as f64;
                    let (mg, mgx) = (sum_g / m, sum_gx / m);
                    for i in 0..n {
                        let b = (i * c + ch) * plane;
                        for j in b..b + plane {
                            id[j] = scale * (gd[j] - mg - xh[j] * mgx);
                        }
                    }
                }
                Mode::Inference => {
                    for i in 0..n {
                        let b = (i * c + ch) * plane;
                        for j in b..b + plane {
                            id[j] = scale * gd[j];
                        }
                    }
                }
            }
        }
        Ok(gin)
    }
}

impl Module for BatchNorm2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "gamma"), &self.gamma.value);
        f(&join(prefix, "beta"), &self.beta.value);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }
    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "gamma"), &mut self.gamma.value);
        f(&join(prefix, "beta"), &mut self.beta.value);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

// ---------------------------------------------------------------------------

/// Fully connected layer, weights `(out, in)`; inputs `(N, in)`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::new(kaiming(&[outputs, inputs], inputs, rng)),
            bias: Param::new(Tensor::zeros(&[outputs])),
        }
    }

    pub fn from_weights(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (o, _) = weight.dims2("dense")?;
        bias.expect_shape("dense bias", &[o])?;
        Ok(Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
        })
    }

    fn dims(&self) -> (usize, usize) {
        let s = self.weight.value.shape();
        (s[0], s[1])
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = x.dims2("dense")?;
        let (o, i) = self.dims();
        if d != i {
            return Err(Error::shape(
                "dense",
                x.shape(),
                self.weight.value.shape(),
                format!("input width {d} != layer input width {i}"),
            ));
        }
        let wd = self.weight.value.data();
        let bd = self.bias.value.data();
        let mut out = Tensor::zeros(&[n, o]);
        for r in 0..n {
            let xr = x.item_slice(r);
            let orow = out.item_slice_mut(r);
            for k in 0..o {
                let wr = &wd[k * i..(k + 1) * i];
                orow[k] = bd[k] + wr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Ok(out)
    }

    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let (n, _) = x.dims2("dense backward")?;
        let (o, i) = self.dims();
        grad_out.expect_shape("dense backward", &[n, o])?;
        let mut gin = Tensor::zeros(&[n, i]);
        for r in 0..n {
            let xr = x.item_slice(r);
            let gr = grad_out.item_slice(r);
            {
                let gw = self.weight.grad.data_mut();
                for k in 0..o {
                    let g = gr[k];
                    for (w, &xv) in gw[k * i..(k + 1) * i].iter_mut().zip(xr) {
                        *w += g * xv;
                    }
                }
            }
            for k in 0..o {
                self.bias.grad.data_mut()[k] += gr[k];
            }
            let wd = self.weight.value.data();
            let gi = gin.item_slice_mut(r);
            for k in 0..o {
                let g = gr[k];
                for (dst, &w) in gi.iter_mut().zip(&wd[k * i..(k + 1) * i]) {
                    *dst += g * w;
                }
            }
        }
        Ok(gin)
    }
}

impl Module for Dense {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight.value);
        f(&join(prefix, "bias"), &self.bias.value);
    }
    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight.value);
        f(&join(prefix, "bias"), &mut self.bias.value);
    }
}

// ---------------------------------------------------------------------------

/// Row-wise softmax of an `(N, L)` tensor, with max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (n, _) = logits.dims2("softmax")?;
    let mut out = logits.clone();
    for r in 0..n {
        softmax_in_place(out.item_slice_mut(r));
    }
    Ok(out)
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Concatenates two `(N, C, H, W)` tensors along channels.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, ca, h, w) = a.dims4("concat")?;
    let (nb, cb, hb, wb) = b.dims4("concat")?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape("concat", a.shape(), b.shape(), "batch/spatial dims differ"));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * ca * plane..(i + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[i * cb * plane..(i + 1) * cb * plane]);
    }
    Tensor::new(vec![n, ca + cb, h, w], data)
}

/// Inverse of [`concat_channels`]: splits off the first `ca` channels.
pub fn split_channels(t: &Tensor, ca: usize) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = t.dims4("split")?;
    if ca == 0 || ca >= c {
        return Err(Error::InvalidArgument(format!("cannot split {c} channels at {ca}")));
    }
    let cb = c - ca;
    let plane = h * w;
    let mut a = Vec::with_capacity(n * ca * plane);
    let mut b = Vec::with_capacity(n * cb * plane);
    for i in 0..n {
        let base = i * c * plane;
        a.extend_from_slice(&t.data()[base..base + ca * plane]);
        b.extend_from_slice(&t.data()[base + ca * plane..base + c * plane]);
    }
    Ok((
        Tensor::new(vec![n, ca, h, w], a)?,
        Tensor::new(vec![n, cb, h, w], b)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t4(shape: [usize; 4], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_of_ones_has_center_nine() {
        let conv = Conv2d::from_weights(Tensor::full(&[1, 1, 3, 3], 1.0), Tensor::zeros(&[1]), 1, 1)
            .unwrap();
        let y = conv.forward(&Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut w = Tensor::zeros(&[2, 2, 3, 3]);
        w.data_mut()[4] = 1.0;
        w.data_mut()[(2 + 1) * 9 + 4] = 1.0;
        let conv = Conv2d::from_weights(w, Tensor::zeros(&[2]), 1, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[2, 2, 5, 4], |_| rng.gen_range(-1.0..1.0));
        assert_eq!(conv.forward(&x).unwrap(), x);
    }

    #[test]
    fn conv_rejects_channel_mismatch_naming_both_shapes() {
        let conv = Conv2d::from_weights(Tensor::zeros(&[4, 3, 3, 3]), Tensor::zeros(&[4]), 1, 1)
            .unwrap();
        let err = conv.forward(&Tensor::zeros(&[1, 2, 8, 8])).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 8, 8]") && err.contains("[4, 3, 3, 3]"), "{err}");
    }

    #[test]
    fn conv_output_size_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new(1, 2, 3, 2, 1, &mut rng);
        let y = conv.forward(&Tensor::zeros(&[1, 1, 16, 12])).unwrap();
        assert_eq!(y.shape(), &[1, 2, 8, 6]);
        assert!(Conv2d::new(1, 1, 3, 1, 0, &mut rng)
            .forward(&Tensor::zeros(&[1, 1, 2, 2]))
            .is_err());
    }

    #[test]
    fn transpose_replicates_into_blocks() {
        let up = ConvTranspose2d::from_weights(Tensor::full(&[1, 1, 2, 2], 1.0), Tensor::zeros(&[1]), 2)
            .unwrap();
        let y = up.forward(&t4([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        #[rustfmt::skip]
        let expected = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(y.data(), &expected);
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (stride, k, h) in [(2, 2, 4), (1, 3, 5), (2, 3, 5)] {
            let w = Tensor::from_fn(&[3, 2, k, k], |_| rng.gen_range(-1.0..1.0));
            let x = Tensor::from_fn(&[2, 2, h * stride + k - stride, h * stride + k - stride], |_| {
                rng.gen_range(-1.0..1.0)
            });
            let conv = Conv2d::from_weights(w.clone(), Tensor::zeros(&[3]), stride, 0).unwrap();
            let cx = conv.forward(&x).unwrap();
            let y = Tensor::from_fn(cx.shape(), |_| rng.gen_range(-1.0..1.0));
            let up = ConvTranspose2d::from_weights(w, Tensor::zeros(&[2]), stride).unwrap();
            let ty = up.forward(&y).unwrap();
            assert_eq!(ty.shape(), x.shape());
            let (lhs, rhs) = (cx.dot(&y), x.dot(&ty));
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn maxpool_basics_and_tie_break() {
        let (y, arg) = maxpool2(&t4([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);

        let x = Tensor::full(&[1, 1, 4, 4], 0.5);
        let (y, arg) = maxpool2(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
        let g = maxpool2_backward(&arg, x.shape(), &Tensor::full(y.shape(), 1.0));
        #[rustfmt::skip]
        let expected = [
            1.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 0.0,
            1.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(g.data(), &expected);
        assert!(maxpool2(&Tensor::zeros(&[1, 1, 3, 4])).is_err());
    }

    #[test]
    fn relu_values() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = relu(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&y, &Tensor::full(&[3], 1.0));
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
        let p = Tensor::new(vec![2], vec![0.5, 3.0]).unwrap();
        assert_eq!(relu(&p), p);
    }

    #[test]
    fn batchnorm_identity_on_standardized_input() {
        // Two samples per channel at +-1: mean 0, biased variance 1.
        let x = t4([2, 1, 1, 2], &[1.0, -1.0, -1.0, 1.0]);
        let mut bn = BatchNorm2d::new(1);
        bn.eps = 1e-12;
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn batchnorm_constant_channel_gives_bias() {
        let mut bn = BatchNorm2d::new(1);
        bn.beta.value.data_mut()[0] = 0.7;
        let (y, _) = bn.forward(&Tensor::full(&[3, 1, 2, 2], 4.2), Mode::Train).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn batchnorm_train_rejects_single_example() {
        let bn = BatchNorm2d::new(2);
        assert!(bn.forward(&Tensor::zeros(&[1, 2, 4, 4]), Mode::Train).is_err());
        assert!(bn.forward(&Tensor::zeros(&[1, 2, 4, 4]), Mode::Inference).is_ok());
    }

    #[test]
    fn batchnorm_train_standardizes_and_updates_running_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn(&[4, 2, 3, 3], |_| rng.gen_range(2.0..6.0));
        let mut bn = BatchNorm2d::new(2);
        let (y, cache) = bn.forward(&x, Mode::Train).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|i| y.data()[(i * 2 + ch) * 9..(i * 2 + ch + 1) * 9].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
        bn.absorb(&cache);
        assert!(bn.running_mean.data()[0] > 0.1);
        let before = bn.running_mean.clone();
        let (_, inf_cache) = bn.forward(&x, Mode::Inference).unwrap();
        bn.absorb(&inf_cache);
        assert_eq!(bn.running_mean, before);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let p = softmax(&Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap()).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap()).unwrap();
        assert!((p.data()[0] - 1.0).abs() < 1e-9 && p.data()[1].abs() < 1e-9);
        assert!(p.is_finite());
    }

    #[test]
    fn concat_split_round_trip() {
        let a = Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64);
        let b = Tensor::from_fn(&[2, 3, 2, 2], |i| 100.0 + i as f64);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 4, 2, 2]);
        let (a2, b2) = split_channels(&c, 1).unwrap();
        assert_eq!((a2, b2), (a, b));
    }
}

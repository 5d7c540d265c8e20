//! Minimal CPU convolution layers with hand-written backward passes.
//!
//! Tensors are single samples laid out `channels x rows x cols`. Batches are
//! processed by looping over samples and accumulating into a gradient buffer
//! that has the same structure as the parameters (see [`Parameterized`]).

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

/// A view of one named parameter tensor.
#[derive(Debug, Clone)]
pub struct NamedTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// Anything that owns trainable tensors.
///
/// `tensors` and `tensors_mut` must enumerate the same tensors in the same
/// order; optimizers and checkpoints rely on it.
pub trait Parameterized {
    fn tensors(&self) -> Vec<NamedTensor<'_>>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn zero_(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    fn scale_(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Copy values from `other`, which must have identical structure.
    fn copy_from(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src = other.tensors();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            dst.copy_from_slice(s.data);
        }
    }
}

fn prefixed<'a>(prefix: &str, tensors: Vec<NamedTensor<'a>>) -> Vec<NamedTensor<'a>> {
    tensors
        .into_iter()
        .map(|mut t| {
            t.name = format!("{prefix}.{}", t.name);
            t
        })
        .collect()
}

/// Concatenate the tensors of several sub-modules under dotted prefixes.
pub fn collect_tensors<'a>(parts: Vec<(&str, Vec<NamedTensor<'a>>)>) -> Vec<NamedTensor<'a>> {
    parts
        .into_iter()
        .flat_map(|(p, t)| prefixed(p, t))
        .collect()
}

/// 2-D convolution with square kernel and "same"-style padding (`kernel / 2`).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `out x (in * k * k)`, ready for GEMM against an im2col matrix.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// What a convolution needs to remember for its backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f64>,
    in_shape: (usize, usize, usize),
}

impl Conv2d {
    /// Fan-in scaled uniform init (He); biases start at zero.
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = Array2::from_shape_fn((out_channels, fan_in), |_| {
            rng.random_range(-bound..bound)
        });
        Self {
            weight,
            bias: Array1::zeros(out_channels),
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
            ..*self
        }
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn output_dims(&self, rows: usize, cols: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (rows + 2 * p - self.kernel) / self.stride + 1,
            (cols + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.output_dims(h, w);
        let k = self.kernel;
        let p = self.pad() as isize;
        let st = self.stride;
        let mut cols = Array2::<f64>::zeros((c * k * k, oh * ow));
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let cs = cols.as_slice_mut().expect("fresh array");
        let n = oh * ow;
        for ci in 0..c {
            let plane = &xs[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut cs[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * st) as isize + ki as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * st) as isize + kj as isize - p;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, in_shape: (usize, usize, usize)) -> Array3<f64> {
        let (c, h, w) = in_shape;
        let (oh, ow) = self.output_dims(h, w);
        let k = self.kernel;
        let p = self.pad() as isize;
        let st = self.stride;
        let n = oh * ow;
        let mut x = Array3::<f64>::zeros(in_shape);
        let xs = x.as_slice_mut().expect("fresh array");
        let cs = cols.as_slice().expect("standard layout");
        for ci in 0..c {
            let plane = &mut xs[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &cs[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * st) as isize + ki as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * st) as isize + kj as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, x: &Array3<f64>) -> Result<(Array3<f64>, ConvCache)> {
        let (c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (oh, ow) = self.output_dims(h, w);
        let cols = self.im2col(x);
        let mut out = Array2::<f64>::zeros((self.out_channels, oh * ow));
        for (mut row, b) in out.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row.fill(*b);
        }
        general_mat_mul(1.0, &self.weight, &cols, 1.0, &mut out);
        let out = out
            .into_shape_with_order((self.out_channels, oh, ow))
            .expect("conv output reshape");
        Ok((
            out,
            ConvCache {
                cols,
                in_shape: (c, h, w),
            },
        ))
    }

    /// Accumulates parameter gradients into `grad`; returns the input gradient
    /// when `need_input_grad` is set.
    pub fn backward(
        &self,
        cache: &ConvCache,
        dy: &Array3<f64>,
        grad: &mut Conv2d,
        need_input_grad: bool,
    ) -> Option<Array3<f64>> {
        let (oc, oh, ow) = dy.dim();
        let dy = dy.as_standard_layout();
        let dy2: ArrayView2<f64> = dy
            .view()
            .into_shape_with_order((oc, oh * ow))
            .expect("dy reshape");
        general_mat_mul(1.0, &dy2, &cache.cols.t(), 1.0, &mut grad.weight);
        grad.bias += &dy2.sum_axis(Axis(1));
        if !need_input_grad {
            return None;
        }
        let mut dcols = Array2::<f64>::zeros(cache.cols.raw_dim());
        general_mat_mul(1.0, &self.weight.t(), &dy2, 0.0, &mut dcols);
        Some(self.col2im(&dcols, cache.in_shape))
    }
}

impl Parameterized for Conv2d {
    fn tensors(&self) -> Vec<NamedTensor<'_>> {
        vec![
            NamedTensor {
                name: "weight".into(),
                shape: vec![self.out_channels, self.in_channels, self.kernel, self.kernel],
                data: self.weight.as_slice().expect("standard layout"),
            },
            NamedTensor {
                name: "bias".into(),
                shape: vec![self.out_channels],
                data: self.bias.as_slice().expect("standard layout"),
            },
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

pub fn relu_(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zero the gradient wherever the (post-ReLU) activation was clipped.
pub fn relu_backward_(dy: &mut Array3<f64>, activation: &Array3<f64>) {
    dy.zip_mut_with(activation, |g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(k, r, q)| x[[k, r / 2, q / 2]])
}

pub fn upsample2_backward(dy: &Array3<f64>) -> Array3<f64> {
    let (c, h2, w2) = dy.dim();
    let mut dx = Array3::<f64>::zeros((c, h2 / 2, w2 / 2));
    for ((k, r, q), v) in dy.indexed_iter() {
        dx[[k, r / 2, q / 2]] += v;
    }
    dx
}

/// Concatenate along channels.
pub fn concat_channels(parts: &[&Array3<f64>]) -> Result<Array3<f64>> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views)
        .map_err(|e| Error::Shape(format!("channel concat: {e}")))
}

/// Split a channel-concatenated gradient back into its parts.
pub fn split_channels(x: &Array3<f64>, widths: &[usize]) -> Vec<Array3<f64>> {
    let mut start = 0;
    widths
        .iter()
        .map(|&w| {
            let part = x.slice(s![start..start + w, .., ..]).to_owned();
            start += w;
            part
        })
        .collect()
}

/// A chain of convolutions, each followed by ReLU except optionally the last.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub layers: Vec<Conv2d>,
    pub relu_last: bool,
}

#[derive(Debug, Clone)]
pub struct StackCache {
    convs: Vec<ConvCache>,
    outputs: Vec<Array3<f64>>,
}

/// One layer of a [`ConvStack`]: `(out_channels, kernel, stride)`.
pub type LayerSpec = (usize, usize, usize);

impl ConvStack {
    pub fn new<R: Rng>(in_channels: usize, specs: &[LayerSpec], relu_last: bool, rng: &mut R) -> Self {
        let mut c = in_channels;
        let layers = specs
            .iter()
            .map(|&(out, k, s)| {
                let l = Conv2d::new(c, out, k, s, rng);
                c = out;
                l
            })
            .collect();
        Self { layers, relu_last }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Conv2d::zeros_like).collect(),
            relu_last: self.relu_last,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_channels)
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    fn has_relu(&self, i: usize) -> bool {
        i + 1 < self.layers.len() || self.relu_last
    }

    pub fn forward(&self, x: &Array3<f64>) -> Result<(Array3<f64>, StackCache)> {
        let mut convs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (mut y, c) = layer.forward(&cur)?;
            if self.has_relu(i) {
                relu_(&mut y);
            }
            convs.push(c);
            outputs.push(y.clone());
            cur = y;
        }
        Ok((cur, StackCache { convs, outputs }))
    }

    pub fn infer(&self, x: &Array3<f64>) -> Result<Array3<f64>> {
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (mut y, _) = layer.forward(&cur)?;
            if self.has_relu(i) {
                relu_(&mut y);
            }
            cur = y;
        }
        Ok(cur)
    }

    pub fn backward(
        &self,
        cache: &StackCache,
        dy: &Array3<f64>,
        grad: &mut ConvStack,
        need_input_grad: bool,
    ) -> Option<Array3<f64>> {
        let mut d = dy.clone();
        for i in (0..self.layers.len()).rev() {
            if self.has_relu(i) {
                relu_backward_(&mut d, &cache.outputs[i]);
            }
            let want = i > 0 || need_input_grad;
            match self.layers[i].backward(&cache.convs[i], &d, &mut grad.layers[i], want) {
                Some(next) => d = next,
                None => return None,
            }
        }
        Some(d)
    }
}

impl Parameterized for ConvStack {
    fn tensors(&self) -> Vec<NamedTensor<'_>> {
        let names: Vec<String> = (0..self.layers.len()).map(|i| format!("conv{i}")).collect();
        collect_tensors(
            self.layers
                .iter()
                .zip(&names)
                .map(|(l, n)| (n.as_str(), l.tensors()))
                .collect(),
        )
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

/// SGD with momentum and L2 weight decay, PyTorch semantics:
/// `v = mu * v + (g + wd * p); p -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step<P: Parameterized>(&mut self, params: &mut P, grads: &P) {
        let grads = grads.tensors();
        let mut params = params.tensors_mut();
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        assert_eq!(self.velocity.len(), params.len(), "optimizer bound to another model");
        for ((p, g), v) in params.iter_mut().zip(&grads).zip(&mut self.velocity) {
            for ((pi, gi), vi) in p.iter_mut().zip(g.data).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *pi;
                *pi -= self.lr * *vi;
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(layer: &Conv2d, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let (oh, ow) = layer.output_dims(h, w);
        let k = layer.kernel;
        let p = (k / 2) as isize;
        Array3::from_shape_fn((layer.out_channels, oh, ow), |(o, r, q)| {
            let mut acc = layer.bias[o];
            for ci in 0..c {
                for ki in 0..k {
                    for kj in 0..k {
                        let iy = (r * layer.stride + ki) as isize - p;
                        let ix = (q * layer.stride + kj) as isize - p;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += layer.weight[[o, (ci * k + ki) * k + kj]]
                                * x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s) in &[(3, 1), (3, 2), (1, 1), (5, 2)] {
            let layer = Conv2d::new(3, 4, k, s, &mut rng);
            let x = Array3::from_shape_fn((3, 7, 6), |_| rng.random_range(-1.0..1.0));
            let (y, _) = layer.forward(&x).unwrap();
            let want = naive_conv(&layer, &x);
            assert_eq!(y.dim(), want.dim());
            for (a, b) in y.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_wrong_channel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = Conv2d::new(3, 4, 3, 1, &mut rng);
        assert!(layer.forward(&Array3::zeros((2, 4, 4))).is_err());
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <dy, conv(x) - b> == <conv_backward(dy), x> for the linear part.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = Conv2d::new(2, 3, 3, 2, &mut rng);
        let x = Array3::from_shape_fn((2, 9, 8), |_| rng.random_range(-1.0..1.0));
        let (y, cache) = layer.forward(&x).unwrap();
        let dy = Array3::from_shape_fn(y.raw_dim(), |_| rng.random_range(-1.0..1.0));
        let mut g = layer.zeros_like();
        let dx = layer.backward(&cache, &dy, &mut g, true).unwrap();
        let mut lhs = 0.0;
        for ((o, r, q), v) in dy.indexed_iter() {
            lhs += v * (y[[o, r, q]] - layer.bias[o]);
        }
        let rhs: f64 = dx.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let x = Array3::from_shape_fn((1, 2, 2), |(_, r, c)| (r * 2 + c) as f64);
        let up = upsample2(&x);
        assert_eq!(up[[0, 3, 3]], 3.0);
        let back = upsample2_backward(&Array3::ones((1, 4, 4)));
        assert!(back.iter().all(|&v| v == 4.0));
    }

    #[test]
    fn sgd_matches_reference_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut layer = Conv2d::new(1, 1, 1, 1, &mut rng);
        let w0 = layer.weight[[0, 0]];
        let mut g = layer.zeros_like();
        g.weight[[0, 0]] = 0.5;
        let mut opt = Sgd::new(0.1, 0.9, 0.01);
        opt.step(&mut layer, &g);
        let v1 = 0.5 + 0.01 * w0;
        let w1 = w0 - 0.1 * v1;
        assert!((layer.weight[[0, 0]] - w1).abs() < 1e-15);
        opt.step(&mut layer, &g);
        let v2 = 0.9 * v1 + 0.5 + 0.01 * w1;
        assert!((layer.weight[[0, 0]] - (w1 - 0.1 * v2)).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}

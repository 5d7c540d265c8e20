//! The relational region proposal network: an encoder with two output scales,
//! two decoders whose outputs are concatenated, and a 1x1 sigmoid head that
//! produces an attention map over the feature grid.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::BoundingBox;
use crate::error::{Error, Result};
use crate::features::FeatureVolume;
use crate::grid::{GridDims, ImageDims};
use crate::nn::{
    self, collect_tensors, concat_channels, split_channels, upsample2, upsample2_backward,
    ConvCache, ConvStack, Conv2d, LayerSpec, NamedTensor, Parameterized, Sgd, StackCache,
};

/// Probability clamp used by the attention loss.
pub const BCE_EPS: f64 = 1e-7;

/// Weight of the attention loss in the total loss.
pub const DEFAULT_LAMBDA: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub values: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetMap {
    pub values: Array2<f64>,
}

impl AttentionMap {
    pub fn dims(&self) -> GridDims {
        let (rows, cols) = self.values.dim();
        GridDims { rows, cols }
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Channel widths per block. Layer counts are fixed at 3 / 5 / 6.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RrpnConfig {
    pub encoder: Vec<usize>,
    pub decoder1: Vec<usize>,
    pub decoder2: Vec<usize>,
}

impl Default for RrpnConfig {
    fn default() -> Self {
        Self {
            encoder: vec![64, 64, 96],
            decoder1: vec![64, 64, 48, 48, 32],
            decoder2: vec![96, 96, 64, 64, 48, 32],
        }
    }
}

impl RrpnConfig {
    pub fn validate(&self) -> Result<()> {
        let lens = [
            ("model.rrpn.encoder", self.encoder.len(), 3),
            ("model.rrpn.decoder1", self.decoder1.len(), 5),
            ("model.rrpn.decoder2", self.decoder2.len(), 6),
        ];
        for (field, got, want) in lens {
            if got != want {
                return Err(Error::config(field, format!("expected {want} layer widths, got {got}")));
            }
        }
        if self
            .encoder
            .iter()
            .chain(&self.decoder1)
            .chain(&self.decoder2)
            .any(|&w| w == 0)
        {
            return Err(Error::config("model.rrpn", "layer widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rrpn {
    /// Encoder layers 1-2, full resolution (first encoder output).
    pub enc_full: ConvStack,
    /// Encoder layer 3, stride 2 (second encoder output).
    pub enc_half: ConvStack,
    pub dec1: ConvStack,
    /// First three decoder-2 layers at half resolution.
    pub dec2_low: ConvStack,
    /// Last three decoder-2 layers after nearest-neighbour upsampling.
    pub dec2_high: ConvStack,
    pub att: Conv2d,
}

#[derive(Debug, Clone)]
pub struct RrpnCache {
    enc_full: StackCache,
    enc_half: StackCache,
    dec1: StackCache,
    dec2_low: StackCache,
    dec2_high: StackCache,
    att: ConvCache,
}

fn specs(widths: &[usize], strides: &[usize]) -> Vec<LayerSpec> {
    widths.iter().zip(strides).map(|(&w, &s)| (w, 3, s)).collect()
}

impl Rrpn {
    pub fn new<R: Rng>(in_channels: usize, cfg: &RrpnConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let e = &cfg.encoder;
        let d1 = &cfg.decoder1;
        let d2 = &cfg.decoder2;
        let enc_full = ConvStack::new(in_channels, &specs(&e[..2], &[1, 1]), true, rng);
        let enc_half = ConvStack::new(e[1], &specs(&e[2..], &[2]), true, rng);
        let dec1 = ConvStack::new(e[1], &specs(d1, &[1; 5]), true, rng);
        let dec2_low = ConvStack::new(e[2], &specs(&d2[..3], &[1; 3]), true, rng);
        let dec2_high = ConvStack::new(d2[2], &specs(&d2[3..], &[1; 3]), true, rng);
        let att = Conv2d::new(d1[4] + d2[5], 1, 1, 1, rng);
        Ok(Self {
            enc_full,
            enc_half,
            dec1,
            dec2_low,
            dec2_high,
            att,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            enc_full: self.enc_full.zeros_like(),
            enc_half: self.enc_half.zeros_like(),
            dec1: self.dec1.zeros_like(),
            dec2_low: self.dec2_low.zeros_like(),
            dec2_high: self.dec2_high.zeros_like(),
            att: self.att.zeros_like(),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.enc_full.in_channels()
    }

    fn check(&self, volume: &FeatureVolume) -> Result<()> {
        if volume.channels() != self.in_channels() {
            return Err(Error::Shape(format!(
                "attention network expects {} input channels, volume has {}",
                self.in_channels(),
                volume.channels()
            )));
        }
        let d = volume.dims();
        if d.rows % 2 != 0 || d.cols % 2 != 0 {
            return Err(Error::Shape(format!("grid {}x{} must have even sides", d.rows, d.cols)));
        }
        Ok(())
    }

    /// Pre-sigmoid logits and the cache needed by [`Rrpn::backward`].
    pub fn forward_logits(&self, volume: &FeatureVolume) -> Result<(Array2<f64>, RrpnCache)> {
        self.check(volume)?;
        let (full, c_full) = self.enc_full.forward(&volume.values)?;
        let (half, c_half) = self.enc_half.forward(&full)?;
        let (d1, c_d1) = self.dec1.forward(&full)?;
        let (low, c_low) = self.dec2_low.forward(&half)?;
        let (d2, c_high) = self.dec2_high.forward(&upsample2(&low))?;
        let joined = concat_channels(&[&d1, &d2])?;
        let (logits, c_att) = self.att.forward(&joined)?;
        let logits = logits.index_axis_move(Axis(0), 0);
        Ok((
            logits,
            RrpnCache {
                enc_full: c_full,
                enc_half: c_half,
                dec1: c_d1,
                dec2_low: c_low,
                dec2_high: c_high,
                att: c_att,
            },
        ))
    }

    pub fn forward(&self, volume: &FeatureVolume) -> Result<AttentionMap> {
        let (logits, _) = self.forward_logits(volume)?;
        Ok(AttentionMap {
            values: logits.mapv(nn::sigmoid),
        })
    }

    /// Back-propagate `dlogits`, accumulating into `grad`. Returns the
    /// gradient with respect to the input volume.
    pub fn backward(&self, cache: &RrpnCache, dlogits: &Array2<f64>, grad: &mut Rrpn) -> Array3<f64> {
        let dy = dlogits.clone().insert_axis(Axis(0));
        let djoined = self
            .att
            .backward(&cache.att, &dy, &mut grad.att, true)
            .expect("input grad requested");
        let parts = split_channels(
            &djoined,
            &[self.dec1.out_channels(), self.dec2_high.out_channels()],
        );
        let dup = self
            .dec2_high
            .backward(&cache.dec2_high, &parts[1], &mut grad.dec2_high, true)
            .expect("input grad requested");
        let dlow = upsample2_backward(&dup);
        let dhalf = self
            .dec2_low
            .backward(&cache.dec2_low, &dlow, &mut grad.dec2_low, true)
            .expect("input grad requested");
        let mut dfull = self
            .dec1
            .backward(&cache.dec1, &parts[0], &mut grad.dec1, true)
            .expect("input grad requested");
        dfull += &self
            .enc_half
            .backward(&cache.enc_half, &dhalf, &mut grad.enc_half, true)
            .expect("input grad requested");
        self.enc_full
            .backward(&cache.enc_full, &dfull, &mut grad.enc_full, true)
            .expect("input grad requested")
    }
}

impl Parameterized for Rrpn {
    fn tensors(&self) -> Vec<NamedTensor<'_>> {
        collect_tensors(vec![
            ("enc_full", self.enc_full.tensors()),
            ("enc_half", self.enc_half.tensors()),
            ("dec1", self.dec1.tensors()),
            ("dec2_low", self.dec2_low.tensors()),
            ("dec2_high", self.dec2_high.tensors()),
            ("att", self.att.tensors()),
        ])
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.enc_full.tensors_mut();
        out.extend(self.enc_half.tensors_mut());
        out.extend(self.dec1.tensors_mut());
        out.extend(self.dec2_low.tensors_mut());
        out.extend(self.dec2_high.tensors_mut());
        out.extend(self.att.tensors_mut());
        out
    }
}

pub fn rrpn_forward(volume: &FeatureVolume, params: &Rrpn) -> Result<AttentionMap> {
    params.forward(volume)
}

/// Peak-1 axis-aligned Gaussian in continuous grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianBump {
    pub cx: f64,
    pub cy: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
}

impl GaussianBump {
    /// Centred on the box centre with sigma equal to a quarter of the box
    /// extent per axis, all in grid units.
    pub fn from_box(b: &BoundingBox, image: ImageDims, grid: GridDims) -> Result<Self> {
        if !b.is_inside(image.width as f64, image.height as f64) {
            return Err(Error::InvalidArgument(format!(
                "box {:?} is not a valid box inside the {}x{} image",
                <[f64; 4]>::from(*b),
                image.width,
                image.height
            )));
        }
        if b.width() <= 0.0 || b.height() <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "degenerate box {:?} has zero width or height",
                <[f64; 4]>::from(*b)
            )));
        }
        let (sx, sy) = grid.scale(image);
        let (px, py) = b.center();
        let (cx, cy) = grid.to_grid(image, px, py);
        Ok(Self {
            cx,
            cy,
            sigma_x: b.width() * sx / 4.0,
            sigma_y: b.height() * sy / 4.0,
        })
    }

    pub fn eval(&self, gx: f64, gy: f64) -> f64 {
        let dx = (gx - self.cx) / self.sigma_x;
        let dy = (gy - self.cy) / self.sigma_y;
        (-0.5 * (dx * dx + dy * dy)).exp()
    }

    pub fn rasterize(&self, grid: GridDims) -> TargetMap {
        TargetMap {
            values: Array2::from_shape_fn((grid.rows, grid.cols), |(r, c)| {
                self.eval(c as f64, r as f64)
            }),
        }
    }
}

/// Ground-truth attention map for one object box.
pub fn gaussian_target(b: &BoundingBox, image: ImageDims, grid: GridDims) -> Result<TargetMap> {
    Ok(GaussianBump::from_box(b, image, grid)?.rasterize(grid))
}

fn check_same_dims(pred: &Array2<f64>, target: &Array2<f64>) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "attention {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    Ok(())
}

fn bce(p: f64, t: f64) -> f64 {
    let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
}

/// Mean pixel-wise binary cross-entropy with `p` clamped to `[eps, 1 - eps]`.
pub fn attention_loss(pred: &AttentionMap, target: &TargetMap) -> Result<f64> {
    check_same_dims(&pred.values, &target.values)?;
    let n = pred.values.len() as f64;
    let sum: f64 = pred
        .values
        .iter()
        .zip(target.values.iter())
        .map(|(&p, &t)| bce(p, t))
        .sum();
    Ok(sum / n)
}

/// Gradient of [`attention_loss`] with respect to the attention values.
pub fn attention_loss_grad(pred: &AttentionMap, target: &TargetMap) -> Result<Array2<f64>> {
    check_same_dims(&pred.values, &target.values)?;
    let n = pred.values.len() as f64;
    let mut g = pred.values.clone();
    g.zip_mut_with(&target.values, |p, &t| {
        *p = if *p < BCE_EPS || *p > 1.0 - BCE_EPS {
            0.0
        } else {
            (*p - t) / (*p * (1.0 - *p)) / n
        };
    });
    Ok(g)
}

/// Gradient of [`attention_loss`] with respect to the pre-sigmoid logits.
pub fn attention_loss_grad_logits(pred: &AttentionMap, target: &TargetMap) -> Result<Array2<f64>> {
    check_same_dims(&pred.values, &target.values)?;
    let n = pred.values.len() as f64;
    let mut g = pred.values.clone();
    g.zip_mut_with(&target.values, |p, &t| {
        *p = if *p < BCE_EPS || *p > 1.0 - BCE_EPS {
            0.0
        } else {
            (*p - t) / n
        };
    });
    Ok(g)
}

/// `det_loss + lambda * att_loss`.
pub fn total_loss(det_loss: f64, att_loss: f64, lambda: f64) -> Result<f64> {
    if !det_loss.is_finite() || !att_loss.is_finite() || !lambda.is_finite() {
        return Err(Error::Numerical(format!(
            "total loss inputs det={det_loss} att={att_loss} lambda={lambda}"
        )));
    }
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(det_loss + lambda * att_loss)
}

/// One SGD step of `lambda * L_att` over a batch of precomputed volumes.
///
/// Returns the mean attention loss measured before the step. With
/// `lambda == 0` the parameters are left untouched (weight decay included).
pub fn train_rrpn_step(
    batch: &[(FeatureVolume, TargetMap)],
    params: &mut Rrpn,
    optimizer: &mut Sgd,
    lambda: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut grad = params.zeros_like();
    let mut loss = 0.0;
    let scale = lambda / batch.len() as f64;
    for (volume, target) in batch {
        let (logits, cache) = params.forward_logits(volume)?;
        let pred = AttentionMap {
            values: logits.mapv(nn::sigmoid),
        };
        loss += attention_loss(&pred, target)?;
        if lambda > 0.0 {
            let g = attention_loss_grad_logits(&pred, target)? * scale;
            params.backward(&cache, &g, &mut grad);
        }
    }
    loss /= batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!(
            "attention loss {loss} over a batch of {} (max |logit| diagnostics unavailable)",
            batch.len()
        )));
    }
    if lambda > 0.0 {
        if !grad.all_finite() {
            return Err(Error::Numerical("attention gradients".into()));
        }
        optimizer.step(params, &grad);
    }
    Ok(loss)
}

//! Typed, standalone operations of the feature-transformation module.
//!
//! These mirror the pieces wired together inside the network forward pass
//! and are usable (and testable) on their own: weight modulation and
//! normalization, foreground-masked convolution, relation maps, the
//! distillation and total losses, and mask downsampling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gift::kernels;
use crate::gift::network::Site;
use crate::raster::{BinaryMask, LinearImage};

/// A `C x H x W` feature map, flat `[c][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "feature map buffer has {} values, expected {}",
                values.len(),
                channels * height * width
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("feature map has a non-finite value".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn constant(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            values: vec![value; channels * height * width],
        }
    }
}

/// Base convolution weights, flat `[m][n][dy][dx]` with `m` input
/// channels, `n` output channels, and an odd spatial kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub base: Vec<f64>,
}

impl ConvWeights {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        base: Vec<f64>,
    ) -> Result<Self> {
        if kernel % 2 == 0 || kernel == 0 {
            return Err(Error::Shape(format!("kernel size {kernel} must be odd")));
        }
        if base.len() != in_channels * out_channels * kernel * kernel {
            return Err(Error::Shape(format!(
                "weight buffer has {} values, expected {}",
                base.len(),
                in_channels * out_channels * kernel * kernel
            )));
        }
        if base.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("weights have a non-finite value".into()));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            base,
        })
    }

    /// 1x1 identity channel mixing.
    pub fn identity(channels: usize) -> Self {
        let mut base = vec![0.0; channels * channels];
        for m in 0..channels {
            base[m * channels + m] = 1.0;
        }
        Self {
            in_channels: channels,
            out_channels: channels,
            kernel: 1,
            base,
        }
    }
}

/// Softmax-normalized per-pixel similarities to the averaged foreground
/// feature; entries sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationMap {
    pub values: Vec<f64>,
}

impl RelationMap {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `[out][in]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearLayer {
    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::Shape(format!(
                "linear layer [{out_dim}x{in_dim}] got {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::Shape(format!(
                "linear layer expects {} inputs, got {}",
                self.in_dim,
                x.len()
            )));
        }
        Ok(kernels::linear(
            x,
            &self.weight,
            &self.bias,
            self.out_dim,
            self.in_dim,
        ))
    }
}

/// Three shared trunk layers plus one site-specific head each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub trunk: [LinearLayer; 3],
    pub heads: BTreeMap<Site, LinearLayer>,
}

/// Channelwise spatial mean of the bottleneck feature map.
pub fn global_pool(f: &FeatureMap) -> Vec<f64> {
    kernels::global_avg_pool(&f.values, f.channels, f.height * f.width)
}

/// Runs the shared rectified trunk and the site head to produce the
/// modulation scale vector for that site.
pub fn predict_scales(fe: &[f64], mlp: &MlpParams, site: Site) -> Result<Vec<f64>> {
    let head = mlp.heads.get(&site).ok_or_else(|| {
        Error::Config(format!("no head for site {site}; configured sites: {:?}",
            mlp.heads.keys().collect::<Vec<_>>()))
    })?;
    let mut x = fe.to_vec();
    for layer in &mlp.trunk {
        x = kernels::relu(&layer.apply(&x)?);
    }
    head.apply(&x)
}

/// Scales each weight by its input channel's modulation scale.
pub fn modulate(w: &ConvWeights, s: &[f64]) -> Result<ConvWeights> {
    if s.len() != w.in_channels {
        return Err(Error::Shape(format!(
            "scale vector has {} entries for {} input channels",
            s.len(),
            w.in_channels
        )));
    }
    let base = kernels::modulate(&w.base, w.in_channels, w.out_channels, w.kernel * w.kernel, s);
    Ok(ConvWeights {
        base,
        ..w.clone()
    })
}

/// Normalizes modulated weights per output channel:
/// `w / sqrt(sum_{m,p} w^2 + eps)`.
pub fn demodulate(w: &ConvWeights, eps: f64) -> Result<ConvWeights> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {eps}")));
    }
    let base = kernels::demodulate(&w.base, w.in_channels, w.out_channels, w.kernel * w.kernel, eps);
    Ok(ConvWeights {
        base,
        ..w.clone()
    })
}

/// Convolves the full map with the normalized weights (same padding) and
/// composites: foreground cells take the convolution output, background
/// cells stay bit-identical to the input.
pub fn gift_apply(f: &FeatureMap, mask_ds: &BinaryMask, w: &ConvWeights) -> Result<FeatureMap> {
    if mask_ds.width() != f.width || mask_ds.height() != f.height {
        return Err(Error::Shape(format!(
            "mask is {}x{} but feature map is {}x{}",
            mask_ds.width(),
            mask_ds.height(),
            f.width,
            f.height
        )));
    }
    if w.in_channels != f.channels || w.out_channels != f.channels {
        return Err(Error::Shape(format!(
            "foreground transform needs {0}->{0} channels, weights are {1}->{2}",
            f.channels, w.in_channels, w.out_channels
        )));
    }
    let conv = kernels::conv2d(
        &f.values,
        f.channels,
        f.height,
        f.width,
        &w.base,
        w.out_channels,
        w.kernel,
    );
    let values = kernels::mask_mix(&conv, &f.values, mask_ds.bits(), f.channels);
    FeatureMap::new(f.channels, f.height, f.width, values)
}

/// Per-pixel similarity to the averaged foreground feature:
/// `R[i] = softmax_i(-gamma * ||f_bar - f[i]||^2)` with a max-subtracted
/// softmax over all pixels.
pub fn relation_map(f: &FeatureMap, mask_ds: &BinaryMask, gamma: f64) -> Result<RelationMap> {
    if !(gamma > 0.0) {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    if mask_ds.width() != f.width || mask_ds.height() != f.height {
        return Err(Error::Shape(format!(
            "mask is {}x{} but feature map is {}x{}",
            mask_ds.width(),
            mask_ds.height(),
            f.width,
            f.height
        )));
    }
    if mask_ds.count_true() == 0 {
        return Err(Error::Precondition(
            "relation map needs at least one foreground cell".into(),
        ));
    }
    let hw = f.height * f.width;
    let center = kernels::masked_mean(&f.values, mask_ds.bits(), f.channels);
    let dist = kernels::sq_dist_field(&center, &f.values, hw);
    let logits: Vec<f64> = dist.iter().map(|d| -gamma * d).collect();
    Ok(RelationMap {
        values: kernels::softmax(&logits, None),
    })
}

/// Squared L2 distance between two relation maps.
pub fn distill_loss(a: &RelationMap, b: &RelationMap) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "relation maps have {} and {} pixels",
            a.len(),
            b.len()
        )));
    }
    Ok(kernels::sum_sq_diff(&a.values, &b.values))
}

/// Harmonization objective: mean absolute error plus the weighted sum of
/// per-level distillation losses.
pub fn total_loss(
    pred: &LinearImage,
    gt: &LinearImage,
    distill_losses: &[f64],
    lambda: f64,
) -> Result<f64> {
    if !pred.same_size(gt) {
        return Err(Error::Shape(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let l1 = kernels::l1_mean(pred.pixels(), gt.pixels());
    Ok(l1 + lambda * distill_losses.iter().sum::<f64>())
}

/// Max-pooling mask reduction to feature resolution: a cell is foreground
/// when any covered pixel is.
pub fn downsample_mask(mask: &BinaryMask, factor: usize) -> Result<BinaryMask> {
    if ![1, 2, 4, 8].contains(&factor) {
        return Err(Error::Config(format!(
            "downsample factor {factor} not in {{1, 2, 4, 8}}"
        )));
    }
    if mask.width() % factor != 0 || mask.height() % factor != 0 {
        return Err(Error::Shape(format!(
            "mask {}x{} not divisible by {factor}",
            mask.width(),
            mask.height()
        )));
    }
    let bits = kernels::downsample_mask_bits(mask.bits(), mask.height(), mask.width(), factor);
    BinaryMask::new(mask.width() / factor, mask.height() / factor, bits)
}

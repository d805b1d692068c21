//! The two-branch toy network: a four-block encoder, three-block decoder
//! with skip connections, GIFT modules at configurable sites, and the
//! distillation-aware loss assembly.
//!
//! Spatial layout for an `H x W` input (`H`, `W` divisible by 8):
//! encoder blocks run conv -> leaky relu -> 2x average pool (no pool in
//! the last block), so block outputs sit at `H/2, H/4, H/8, H/8`. Skip
//! connections reuse each of the first three blocks' pre-pool
//! activations. Decoder blocks run 2x nearest upsample -> concat skip ->
//! conv -> leaky relu, ending in a 1x1 projection clamped to `[0, 1]`.
//!
//! The global feature is the channel mean of the raw bottleneck map; an
//! MLP (three shared rectified layers, one linear head per site) predicts
//! the per-input-channel scales that modulate each site's base weights.
//! GIFT sites transform block outputs in place: encoder sites feed the
//! relation-distillation targets (the bottleneck site also feeds the
//! decoder), decoder sites sit on the image path.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gift::graph::{Graph, NodeId};
use crate::gift::kernels;
use crate::gift::ops::{LinearLayer, MlpParams};
use crate::raster::{BinaryMask, LinearImage};
use crate::util::fnv1a64;

pub const CHECKPOINT_VERSION: &str = "gift-checkpoint/1";

/// Placement of a GIFT module.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Site {
    E1,
    E2,
    E3,
    E4,
    D1,
    D2,
    D3,
}

impl Site {
    pub const ALL: [Site; 7] = [
        Site::E1,
        Site::E2,
        Site::E3,
        Site::E4,
        Site::D1,
        Site::D2,
        Site::D3,
    ];

    fn label(self) -> &'static str {
        match self {
            Site::E1 => "e1",
            Site::E2 => "e2",
            Site::E3 => "e3",
            Site::E4 => "e4",
            Site::D1 => "d1",
            Site::D2 => "d2",
            Site::D3 => "d3",
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GiftConfig {
    pub encoder_channels: [usize; 4],
    pub decoder_channels: [usize; 3],
    /// Block convolution kernel (odd).
    pub kernel: usize,
    /// GIFT site convolution kernel (odd).
    pub site_kernel: usize,
    pub mlp_hidden: usize,
    pub gift_sites: BTreeSet<Site>,
    pub gamma: f64,
    pub lambda: f64,
    pub eps: f64,
    pub leaky_slope: f64,
    /// When set, the GIFT convolution sees zeroed background features
    /// instead of the full map.
    pub zero_background_input: bool,
    /// When set, Eq. 3's normalization runs over background pixels only.
    pub relation_background_only: bool,
}

impl Default for GiftConfig {
    fn default() -> Self {
        Self {
            encoder_channels: [8, 16, 32, 64],
            decoder_channels: [16, 8, 4],
            kernel: 3,
            site_kernel: 1,
            mlp_hidden: 16,
            gift_sites: [Site::E1, Site::E2, Site::E3, Site::E4, Site::D2, Site::D3]
                .into_iter()
                .collect(),
            gamma: 0.01,
            lambda: 0.001,
            eps: 1e-8,
            leaky_slope: 0.2,
            zero_background_input: false,
            relation_background_only: false,
        }
    }
}

impl GiftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        for k in [self.kernel, self.site_kernel] {
            if k == 0 || k % 2 == 0 {
                return Err(Error::Config(format!("kernel size {k} must be odd")));
            }
        }
        if self.encoder_channels.iter().any(|&c| c == 0)
            || self.decoder_channels.iter().any(|&c| c == 0)
            || self.mlp_hidden == 0
        {
            return Err(Error::Config("channel counts must be at least 1".into()));
        }
        Ok(())
    }

    /// The reconstruction branch: same backbone, no GIFT sites.
    pub fn without_gift(&self) -> GiftConfig {
        GiftConfig {
            gift_sites: BTreeSet::new(),
            ..self.clone()
        }
    }

    /// Channel count of the feature map a site transforms.
    pub fn site_channels(&self, site: Site) -> usize {
        match site {
            Site::E1 => self.encoder_channels[0],
            Site::E2 => self.encoder_channels[1],
            Site::E3 => self.encoder_channels[2],
            Site::E4 => self.encoder_channels[3],
            Site::D1 => self.decoder_channels[0],
            Site::D2 => self.decoder_channels[1],
            Site::D3 => self.decoder_channels[2],
        }
    }

    /// Downsampling factor between the input image and each encoder
    /// level's feature map.
    pub fn encoder_mask_factors() -> [usize; 4] {
        [2, 4, 8, 8]
    }

    fn decoder_mask_factors() -> [usize; 3] {
        [4, 2, 1]
    }

    /// Fingerprint of everything the parameter layout depends on; lets
    /// the forward pass verify config/parameter agreement without
    /// rebuilding the layout.
    fn layout_key(&self) -> u64 {
        use std::fmt::Write;
        let mut s = String::with_capacity(64);
        let _ = write!(
            s,
            "{:?}|{:?}|{}|{}|{}|",
            self.encoder_channels, self.decoder_channels, self.kernel, self.site_kernel,
            self.mlp_hidden
        );
        for site in &self.gift_sites {
            let _ = write!(s, "{site},");
        }
        fnv1a64(s.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum InitKind {
    UniformFanIn(usize),
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
struct SegmentSpec {
    name: String,
    dims: Vec<usize>,
    init: InitKind,
}

fn segment_layout(cfg: &GiftConfig) -> Vec<SegmentSpec> {
    let [c1, c2, c3, c4] = cfg.encoder_channels;
    let [d1, d2, d3] = cfg.decoder_channels;
    let k = cfg.kernel;
    let conv = |name: &str, m: usize, n: usize, kk: usize| SegmentSpec {
        name: name.into(),
        dims: vec![m, n, kk, kk],
        init: InitKind::UniformFanIn(m * kk * kk),
    };
    let bias = |name: &str, c: usize, v: f64| SegmentSpec {
        name: name.into(),
        dims: vec![c],
        init: InitKind::Constant(v),
    };
    let lin = |name: &str, out: usize, inp: usize| SegmentSpec {
        name: name.into(),
        dims: vec![out, inp],
        init: InitKind::UniformFanIn(inp),
    };

    // Small positive biases keep rectified units initially alive; with
    // fan-in-scaled weights the deep preactivations would otherwise
    // collapse onto the activation kinks.
    let mut specs = vec![
        conv("enc1.w", 3, c1, k),
        bias("enc1.b", c1, 0.05),
        conv("enc2.w", c1, c2, k),
        bias("enc2.b", c2, 0.05),
        conv("enc3.w", c2, c3, k),
        bias("enc3.b", c3, 0.05),
        conv("enc4.w", c3, c4, k),
        bias("enc4.b", c4, 0.05),
        conv("dec1.w", c4 + c3, d1, k),
        bias("dec1.b", d1, 0.05),
        conv("dec2.w", d1 + c2, d2, k),
        bias("dec2.b", d2, 0.05),
        conv("dec3.w", d2 + c1, d3, k),
        bias("dec3.b", d3, 0.05),
        conv("final.w", d3, 3, 1),
        // Mid-gray output bias; the projection itself starts at the same
        // fan-in scale as every other layer.
        bias("final.b", 3, 0.5),
    ];
    if !cfg.gift_sites.is_empty() {
        let h = cfg.mlp_hidden;
        specs.push(lin("mlp.fc1.w", h, c4));
        specs.push(bias("mlp.fc1.b", h, 0.1));
        specs.push(lin("mlp.fc2.w", h, h));
        specs.push(bias("mlp.fc2.b", h, 0.1));
        specs.push(lin("mlp.fc3.w", h, h));
        specs.push(bias("mlp.fc3.b", h, 0.1));
        for site in &cfg.gift_sites {
            let m = cfg.site_channels(*site);
            specs.push(lin(&format!("site.{site}.head.w"), m, h));
            // Head bias 1 starts the scales near an identity modulation.
            specs.push(bias(&format!("site.{site}.head.b"), m, 1.0));
            specs.push(conv(&format!("site.{site}.base"), m, m, cfg.site_kernel));
        }
    }
    specs
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// All learnable parameters as named segments over one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    segments: Vec<Segment>,
    data: Vec<f64>,
    layout_key: u64,
}

impl ParamSet {
    /// Initializes weights uniformly scaled by fan-in; each segment draws
    /// from its own stream keyed by name, so shared segments match across
    /// configurations that differ only in GIFT sites.
    pub fn init(cfg: &GiftConfig, seed: u64) -> ParamSet {
        let specs = segment_layout(cfg);
        let mut segments = Vec::with_capacity(specs.len());
        let mut data = Vec::new();
        for spec in specs {
            let len: usize = spec.dims.iter().product();
            let offset = data.len();
            match spec.init {
                InitKind::Constant(v) => data.extend(std::iter::repeat(v).take(len)),
                InitKind::UniformFanIn(fan_in) => {
                    // Kaiming-style bound: keeps activation scale roughly
                    // constant through the rectified stack.
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(fnv1a64(spec.name.as_bytes()));
                    data.extend((0..len).map(|_| rng.gen_range(-bound..bound)));
                }
            }
            segments.push(Segment {
                name: spec.name,
                dims: spec.dims,
                offset,
                len,
            });
        }
        ParamSet {
            segments,
            data,
            layout_key: cfg.layout_key(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    fn segment(&self, name: &str) -> Result<&Segment> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Config(format!("no parameter segment named {name:?}")))
    }

    pub fn segment_values(&self, name: &str) -> Result<&[f64]> {
        let s = self.segment(name)?;
        Ok(&self.data[s.offset..s.offset + s.len])
    }

    pub fn segment_values_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let s = self.segment(name)?.clone();
        Ok(&mut self.data[s.offset..s.offset + s.len])
    }

    /// Maps a flat parameter index back to its segment and local offset.
    pub fn locate(&self, index: usize) -> Option<(&str, usize)> {
        self.segments
            .iter()
            .find(|s| index >= s.offset && index < s.offset + s.len)
            .map(|s| (s.name.as_str(), index - s.offset))
    }

    fn matches_layout(&self, cfg: &GiftConfig) -> Result<()> {
        if self.layout_key != cfg.layout_key() {
            return Err(Error::Config(
                "parameter layout does not match the network configuration".into(),
            ));
        }
        Ok(())
    }
}

/// The network: configuration plus parameters. The same struct serves as
/// the harmonization branch (with GIFT sites) and the reconstruction
/// branch (without).
#[derive(Debug, Clone, PartialEq)]
pub struct GiftNetwork {
    pub config: GiftConfig,
    pub params: ParamSet,
    pub seed: u64,
}

impl GiftNetwork {
    pub fn init(config: GiftConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamSet::init(&config, seed);
        Ok(Self {
            config,
            params,
            seed,
        })
    }

    pub fn forward(&self, image: &LinearImage, mask: &BinaryMask) -> Result<ForwardTrace> {
        forward(&self.config, &self.params, image, mask)
    }

    /// Forward pass returning the harmonized image.
    pub fn harmonize(&self, image: &LinearImage, mask: &BinaryMask) -> Result<LinearImage> {
        Ok(self.forward(image, mask)?.prediction())
    }

    /// Relation maps of the four encoder levels, as plain values. Used to
    /// freeze the reconstruction branch's targets.
    pub fn encoder_relations(
        &self,
        image: &LinearImage,
        mask: &BinaryMask,
    ) -> Result<[Vec<f64>; 4]> {
        let mut trace = self.forward(image, mask)?;
        let mut out: [Vec<f64>; 4] = Default::default();
        for level in 0..4 {
            let node = trace.relation_node(level)?;
            out[level] = trace.graph.values(node).to_vec();
        }
        Ok(out)
    }

    /// Total loss of one sample against frozen reconstruction relations.
    pub fn loss(
        &self,
        composite: &LinearImage,
        real: &LinearImage,
        mask: &BinaryMask,
        recon_relations: &[Vec<f64>; 4],
    ) -> Result<LossBreakdown> {
        let mut trace = self.forward(composite, mask)?;
        let losses = trace.attach_losses(real, recon_relations, self.config.lambda)?;
        Ok(losses.breakdown(&trace))
    }

    /// Loss plus the gradient of the total loss with respect to every
    /// parameter, flat and aligned with `params.data()`.
    pub fn loss_and_grad(
        &self,
        composite: &LinearImage,
        real: &LinearImage,
        mask: &BinaryMask,
        recon_relations: &[Vec<f64>; 4],
    ) -> Result<(LossBreakdown, Vec<f64>)> {
        let mut trace = self.forward(composite, mask)?;
        let losses = trace.attach_losses(real, recon_relations, self.config.lambda)?;
        let breakdown = losses.breakdown(&trace);
        let grad = trace.parameter_gradient(losses.total);
        Ok((breakdown, grad))
    }

    /// The MLP as a standalone typed value (present when any site is
    /// configured).
    pub fn mlp_params(&self) -> Result<MlpParams> {
        if self.config.gift_sites.is_empty() {
            return Err(Error::Config("network has no GIFT sites".into()));
        }
        let layer = |w_name: &str, b_name: &str, out: usize, inp: usize| -> Result<LinearLayer> {
            LinearLayer::new(
                inp,
                out,
                self.params.segment_values(w_name)?.to_vec(),
                self.params.segment_values(b_name)?.to_vec(),
            )
        };
        let h = self.config.mlp_hidden;
        let c4 = self.config.encoder_channels[3];
        let trunk = [
            layer("mlp.fc1.w", "mlp.fc1.b", h, c4)?,
            layer("mlp.fc2.w", "mlp.fc2.b", h, h)?,
            layer("mlp.fc3.w", "mlp.fc3.b", h, h)?,
        ];
        let mut heads = std::collections::BTreeMap::new();
        for site in &self.config.gift_sites {
            let m = self.config.site_channels(*site);
            heads.insert(
                *site,
                layer(
                    &format!("site.{site}.head.w"),
                    &format!("site.{site}.head.b"),
                    m,
                    h,
                )?,
            );
        }
        Ok(MlpParams { trunk, heads })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION.to_string(),
            seed: self.seed,
            config: self.config.clone(),
            segments: self
                .params
                .segments
                .iter()
                .map(|s| CheckpointSegment {
                    name: s.name.clone(),
                    dims: s.dims.clone(),
                    values: self.params.data[s.offset..s.offset + s.len].to_vec(),
                })
                .collect(),
        };
        let text = serde_json::to_string(&file)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CheckpointFile = serde_json::from_str(&text)?;
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {:?} is not {CHECKPOINT_VERSION:?}",
                file.version
            )));
        }
        file.config.validate()?;
        let mut net = GiftNetwork::init(file.config, file.seed)?;
        let expected: Vec<(String, Vec<usize>)> = net
            .params
            .segments
            .iter()
            .map(|s| (s.name.clone(), s.dims.clone()))
            .collect();
        let got: Vec<(String, Vec<usize>)> = file
            .segments
            .iter()
            .map(|s| (s.name.clone(), s.dims.clone()))
            .collect();
        if expected != got {
            return Err(Error::Config(
                "checkpoint segments do not match the stored configuration".into(),
            ));
        }
        for seg in &file.segments {
            let dst = net.params.segment_values_mut(&seg.name)?;
            if dst.len() != seg.values.len() {
                return Err(Error::Config(format!(
                    "segment {:?} has {} values, expected {}",
                    seg.name,
                    seg.values.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(&seg.values);
        }
        Ok(net)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointSegment {
    name: String,
    dims: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: String,
    seed: u64,
    config: GiftConfig,
    segments: Vec<CheckpointSegment>,
}

/// Per-sample loss values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_har: f64,
    pub l_dis: [f64; 4],
}

/// A completed forward pass: the graph plus the node ids needed to attach
/// losses and pull gradients.
pub struct ForwardTrace {
    pub(crate) graph: Graph,
    param_nodes: Vec<NodeId>,
    pred: NodeId,
    pred_raw: NodeId,
    encoder_features: [NodeId; 4],
    decoder_features: [NodeId; 3],
    site_scales: BTreeMap<Site, NodeId>,
    level_masks: [Vec<bool>; 4],
    relation_nodes: [Option<NodeId>; 4],
    kink_margin: f64,
    gamma: f64,
    relation_background_only: bool,
    width: usize,
    height: usize,
}

pub struct AttachedLosses {
    pub total: NodeId,
    pub l_har: NodeId,
    pub l_dis: [NodeId; 4],
}

impl AttachedLosses {
    pub fn breakdown(&self, trace: &ForwardTrace) -> LossBreakdown {
        LossBreakdown {
            total: trace.graph.scalar(self.total),
            l_har: trace.graph.scalar(self.l_har),
            l_dis: [
                trace.graph.scalar(self.l_dis[0]),
                trace.graph.scalar(self.l_dis[1]),
                trace.graph.scalar(self.l_dis[2]),
                trace.graph.scalar(self.l_dis[3]),
            ],
        }
    }
}

impl ForwardTrace {
    /// The clamped output image.
    pub fn prediction(&self) -> LinearImage {
        let v = self.graph.values(self.pred);
        let (w, h) = (self.width, self.height);
        let mut pixels = vec![0.0; w * h * 3];
        for c in 0..3 {
            for i in 0..w * h {
                pixels[i * 3 + c] = v[c * w * h + i];
            }
        }
        LinearImage::from_pixels(w, h, pixels).expect("clamped output is in range")
    }

    /// Pre-clamp output values; used by gradient-check fixtures to verify
    /// the clamp is inactive.
    pub fn raw_prediction_values(&self) -> &[f64] {
        self.graph.values(self.pred_raw)
    }

    /// Values of the (possibly GIFT-transformed) encoder feature map at
    /// one of the four levels.
    pub fn encoder_feature(&self, level: usize) -> &[f64] {
        self.graph.values(self.encoder_features[level])
    }

    /// Values of the decoder feature map at one of the three levels.
    pub fn decoder_feature(&self, level: usize) -> &[f64] {
        self.graph.values(self.decoder_features[level])
    }

    /// The foreground mask at an encoder level's feature resolution.
    pub fn level_mask(&self, level: usize) -> &[bool] {
        &self.level_masks[level]
    }

    /// The predicted modulation scales of an active site.
    pub fn site_scales(&self, site: Site) -> Option<&[f64]> {
        self.site_scales.get(&site).map(|&id| self.graph.values(id))
    }

    /// Smallest |preactivation| across every rectified unit of this
    /// pass. Finite-difference checks need this to clear the step size,
    /// otherwise the differences straddle an activation kink.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    /// Relation map node for one encoder level, created on first use.
    pub fn relation_node(&mut self, level: usize) -> Result<NodeId> {
        if let Some(id) = self.relation_nodes[level] {
            return Ok(id);
        }
        let f = self.encoder_features[level];
        let mask = &self.level_masks[level];
        let center = self.graph.masked_mean(f, mask)?;
        let dist = self.graph.sq_dist_field(center, f)?;
        let logits = self.graph.scale(dist, -self.gamma);
        let active = if self.relation_background_only {
            Some(mask.iter().map(|&b| !b).collect::<Vec<bool>>())
        } else {
            None
        };
        let node = self.graph.softmax(logits, active)?;
        self.relation_nodes[level] = Some(node);
        Ok(node)
    }

    /// Builds the total loss: `L1(pred, gt) + lambda * sum_l L_dis^l`
    /// against frozen reconstruction-branch relation targets.
    pub fn attach_losses(
        &mut self,
        gt: &LinearImage,
        recon_relations: &[Vec<f64>; 4],
        lambda: f64,
    ) -> Result<AttachedLosses> {
        if (gt.width(), gt.height()) != (self.width, self.height) {
            return Err(Error::Shape(format!(
                "ground truth is {}x{} but the forward pass ran on {}x{}",
                gt.width(),
                gt.height(),
                self.width,
                self.height
            )));
        }
        let gt_leaf = {
            let chw = image_to_chw(gt);
            self.graph.leaf(vec![3, self.height, self.width], chw)
        };
        let l_har = self.graph.l1_mean(self.pred, gt_leaf)?;

        let mut l_dis = [0; 4];
        for level in 0..4 {
            let r = self.relation_node(level)?;
            let n = self.graph.values(r).len();
            if recon_relations[level].len() != n {
                return Err(Error::Shape(format!(
                    "reconstruction relation map at level {} has {} entries, expected {n}",
                    level + 1,
                    recon_relations[level].len()
                )));
            }
            let target = self
                .graph
                .leaf(vec![n], recon_relations[level].clone());
            l_dis[level] = self.graph.sum_sq_diff(r, target)?;
        }
        let dis_sum = self.graph.sum_scalars(&l_dis)?;
        let weighted = self.graph.scale(dis_sum, lambda);
        let total = self.graph.sum_scalars(&[l_har, weighted])?;
        Ok(AttachedLosses {
            total,
            l_har,
            l_dis,
        })
    }

    /// Reconstruction objective only: `L1(pred, gt)`.
    pub fn attach_reconstruction_loss(&mut self, gt: &LinearImage) -> Result<NodeId> {
        if (gt.width(), gt.height()) != (self.width, self.height) {
            return Err(Error::Shape(format!(
                "ground truth is {}x{} but the forward pass ran on {}x{}",
                gt.width(),
                gt.height(),
                self.width,
                self.height
            )));
        }
        let chw = image_to_chw(gt);
        let gt_leaf = self.graph.leaf(vec![3, self.height, self.width], chw);
        self.graph.l1_mean(self.pred, gt_leaf)
    }

    /// Gradient of a scalar node with respect to every parameter, flat
    /// and aligned with the originating `ParamSet`.
    pub fn parameter_gradient(&self, loss: NodeId) -> Vec<f64> {
        let grads = self.graph.backward(loss);
        let mut out = Vec::new();
        for &id in &self.param_nodes {
            out.extend_from_slice(&grads[id]);
        }
        out
    }

    pub fn loss_value(&self, loss: NodeId) -> f64 {
        self.graph.scalar(loss)
    }
}

fn image_to_chw(image: &LinearImage) -> Vec<f64> {
    let (w, h) = (image.width(), image.height());
    let px = image.pixels();
    let mut chw = vec![0.0; 3 * w * h];
    for i in 0..w * h {
        for c in 0..3 {
            chw[c * w * h + i] = px[i * 3 + c];
        }
    }
    chw
}

/// Runs the network forward. The image sides must be divisible by 8 (the
/// three 2x downsamplings), and the mask must match the image.
pub fn forward(
    cfg: &GiftConfig,
    params: &ParamSet,
    image: &LinearImage,
    mask: &BinaryMask,
) -> Result<ForwardTrace> {
    cfg.validate()?;
    params.matches_layout(cfg)?;
    let (w, h) = (image.width(), image.height());
    if w % 8 != 0 || h % 8 != 0 {
        return Err(Error::Shape(format!(
            "image sides must be divisible by 8, got {w}x{h}"
        )));
    }
    if !mask.matches_image(image) {
        return Err(Error::Shape(format!(
            "mask is {}x{} but image is {}x{}",
            mask.width(),
            mask.height(),
            w,
            h
        )));
    }

    let mut graph = Graph::new();
    let mut param_nodes = Vec::with_capacity(params.segments.len());
    for seg in &params.segments {
        let values = params.data[seg.offset..seg.offset + seg.len].to_vec();
        param_nodes.push(graph.leaf(seg.dims.clone(), values));
    }
    let node = |name: &str| -> Result<NodeId> {
        params
            .segments
            .iter()
            .position(|s| s.name == name)
            .map(|i| param_nodes[i])
            .ok_or_else(|| Error::Config(format!("missing parameter segment {name:?}")))
    };

    let level_masks: [Vec<bool>; 4] = {
        let f = GiftConfig::encoder_mask_factors();
        [
            kernels::downsample_mask_bits(mask.bits(), h, w, f[0]),
            kernels::downsample_mask_bits(mask.bits(), h, w, f[1]),
            kernels::downsample_mask_bits(mask.bits(), h, w, f[2]),
            kernels::downsample_mask_bits(mask.bits(), h, w, f[3]),
        ]
    };

    let mut x = graph.leaf(vec![3, h, w], image_to_chw(image));
    let mut kink_margin = f64::INFINITY;

    // Encoder: conv -> leaky -> pool (last block keeps its resolution);
    // pre-pool activations feed the decoder skips.
    let mut skips = Vec::with_capacity(3);
    let mut raw_encoder = [0; 4];
    for l in 1..=4 {
        let wn = node(&format!("enc{l}.w"))?;
        let bn = node(&format!("enc{l}.b"))?;
        let conv = graph.conv2d(x, wn)?;
        let biased = graph.bias_chw(conv, bn)?;
        track_margin(&mut kink_margin, graph.values(biased));
        let act = graph.leaky_relu(biased, cfg.leaky_slope);
        if l < 4 {
            skips.push(act);
            x = graph.avg_pool2(act)?;
        } else {
            x = act;
        }
        raw_encoder[l - 1] = x;
    }

    // Global guidance from the raw bottleneck, then the shared MLP trunk.
    let trunk_out = if cfg.gift_sites.is_empty() {
        None
    } else {
        let fe = graph.global_avg_pool(raw_encoder[3])?;
        let mut t = fe;
        for i in 1..=3 {
            let wn = node(&format!("mlp.fc{i}.w"))?;
            let bn = node(&format!("mlp.fc{i}.b"))?;
            let lin = graph.linear(t, wn, bn)?;
            track_margin(&mut kink_margin, graph.values(lin));
            t = graph.relu(lin);
        }
        Some(t)
    };

    let apply_site = |graph: &mut Graph,
                      f: NodeId,
                      site: Site,
                      mask_bits: &[bool]|
     -> Result<(NodeId, NodeId)> {
        let trunk = trunk_out.expect("sites imply an MLP trunk");
        let head_w = node(&format!("site.{site}.head.w"))?;
        let head_b = node(&format!("site.{site}.head.b"))?;
        let scales = graph.linear(trunk, head_w, head_b)?;
        let base = node(&format!("site.{site}.base"))?;
        let modulated = graph.modulate(base, scales)?;
        let normalized = graph.demodulate(modulated, cfg.eps)?;
        let conv_in = if cfg.zero_background_input {
            graph.zero_background(f, mask_bits)?
        } else {
            f
        };
        let conv = graph.conv2d(conv_in, normalized)?;
        Ok((graph.mask_mix(conv, f, mask_bits)?, scales))
    };

    // Encoder sites transform block outputs; they feed the relation maps,
    // and the bottleneck site also feeds the decoder.
    let mut site_scales = BTreeMap::new();
    let mut encoder_features = raw_encoder;
    for (idx, site) in [Site::E1, Site::E2, Site::E3, Site::E4].into_iter().enumerate() {
        if cfg.gift_sites.contains(&site) {
            let (transformed, scales) =
                apply_site(&mut graph, raw_encoder[idx], site, &level_masks[idx])?;
            encoder_features[idx] = transformed;
            site_scales.insert(site, scales);
        }
    }

    // Decoder: upsample -> concat skip -> conv -> leaky, sites in place.
    let mut y = encoder_features[3];
    let mut decoder_features = [0; 3];
    let dec_factors = GiftConfig::decoder_mask_factors();
    for l in 1..=3 {
        let up = graph.upsample2(y)?;
        let cat = graph.concat_channels(up, skips[3 - l])?;
        let wn = node(&format!("dec{l}.w"))?;
        let bn = node(&format!("dec{l}.b"))?;
        let conv = graph.conv2d(cat, wn)?;
        let biased = graph.bias_chw(conv, bn)?;
        track_margin(&mut kink_margin, graph.values(biased));
        let mut act = graph.leaky_relu(biased, cfg.leaky_slope);
        let site = [Site::D1, Site::D2, Site::D3][l - 1];
        if cfg.gift_sites.contains(&site) {
            let bits = kernels::downsample_mask_bits(mask.bits(), h, w, dec_factors[l - 1]);
            let (transformed, scales) = apply_site(&mut graph, act, site, &bits)?;
            act = transformed;
            site_scales.insert(site, scales);
        }
        decoder_features[l - 1] = act;
        y = act;
    }

    let final_w = node("final.w")?;
    let final_b = node("final.b")?;
    let proj = graph.conv2d(y, final_w)?;
    let pred_raw = graph.bias_chw(proj, final_b)?;
    let pred = graph.clamp01(pred_raw);

    Ok(ForwardTrace {
        graph,
        param_nodes,
        pred,
        pred_raw,
        encoder_features,
        decoder_features,
        site_scales,
        level_masks,
        relation_nodes: [None; 4],
        kink_margin,
        gamma: cfg.gamma,
        relation_background_only: cfg.relation_background_only,
        width: w,
        height: h,
    })
}

fn track_margin(margin: &mut f64, preactivations: &[f64]) {
    for v in preactivations {
        *margin = margin.min(v.abs());
    }
}

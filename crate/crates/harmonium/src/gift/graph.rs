//! A small operation graph with eager forward values and exact
//! reverse-mode gradient accumulation.
//!
//! Nodes are appended in topological order; `backward` walks them in
//! reverse and routes each node's gradient to its parents. Shapes:
//! feature maps carry dims `[c, h, w]`, vectors `[n]`, convolution
//! weights `[m, n_out, k, k]` (flattened `[m][n][dy][dx]`), scalars `[]`.

use crate::error::{Error, Result};
use crate::gift::kernels;

pub(crate) type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d,
    BiasChw,
    LeakyRelu { alpha: f64 },
    Relu,
    AvgPool2,
    UpsampleNearest2,
    ConcatChannels,
    Linear,
    GlobalAvgPool,
    Modulate,
    Demodulate { eps: f64 },
    MaskMix { mask: Vec<bool> },
    ZeroBackground { mask: Vec<bool> },
    MaskedMean { mask: Vec<bool> },
    SqDistField,
    Scale { factor: f64 },
    Softmax { active: Option<Vec<bool>> },
    SumSqDiff,
    L1Mean,
    Clamp01,
    SumScalars,
}

#[derive(Debug)]
struct Node {
    dims: Vec<usize>,
    values: Vec<f64>,
    parents: Vec<NodeId>,
    op: Op,
}

#[derive(Debug, Default)]
pub(crate) struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].values
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].values.len(), 1);
        self.nodes[id].values[0]
    }

    fn push(&mut self, dims: Vec<usize>, values: Vec<f64>, parents: Vec<NodeId>, op: Op) -> NodeId {
        debug_assert_eq!(dims.iter().product::<usize>(), values.len());
        self.nodes.push(Node {
            dims,
            values,
            parents,
            op,
        });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, dims: Vec<usize>, values: Vec<f64>) -> NodeId {
        self.push(dims, values, vec![], Op::Leaf)
    }

    fn chw_dims(&self, id: NodeId, what: &str) -> Result<(usize, usize, usize)> {
        match self.nodes[id].dims[..] {
            [c, h, w] => Ok((c, h, w)),
            ref other => Err(Error::Shape(format!(
                "{what} expected a [c, h, w] node, got dims {other:?}"
            ))),
        }
    }

    fn weight_dims(&self, id: NodeId, what: &str) -> Result<(usize, usize, usize)> {
        match self.nodes[id].dims[..] {
            [m, n, k, k2] if k == k2 => Ok((m, n, k)),
            ref other => Err(Error::Shape(format!(
                "{what} expected a [m, n, k, k] weight node, got dims {other:?}"
            ))),
        }
    }

    pub fn conv2d(&mut self, input: NodeId, weights: NodeId) -> Result<NodeId> {
        let (c_in, h, w) = self.chw_dims(input, "conv2d input")?;
        let (m, n, k) = self.weight_dims(weights, "conv2d weights")?;
        if m != c_in {
            return Err(Error::Shape(format!(
                "conv2d weights expect {m} input channels, feature map has {c_in}"
            )));
        }
        if k % 2 == 0 {
            return Err(Error::Shape(format!("kernel size {k} must be odd")));
        }
        let values = kernels::conv2d(
            &self.nodes[input].values,
            c_in,
            h,
            w,
            &self.nodes[weights].values,
            n,
            k,
        );
        Ok(self.push(vec![n, h, w], values, vec![input, weights], Op::Conv2d))
    }

    pub fn bias_chw(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.chw_dims(input, "bias input")?;
        if self.nodes[bias].dims[..] != [c] {
            return Err(Error::Shape(format!(
                "bias dims {:?} do not match {c} channels",
                self.nodes[bias].dims
            )));
        }
        let values = kernels::bias_chw(&self.nodes[input].values, &self.nodes[bias].values, h, w);
        Ok(self.push(vec![c, h, w], values, vec![input, bias], Op::BiasChw))
    }

    pub fn leaky_relu(&mut self, input: NodeId, alpha: f64) -> NodeId {
        let values = kernels::leaky_relu(&self.nodes[input].values, alpha);
        let dims = self.nodes[input].dims.clone();
        self.push(dims, values, vec![input], Op::LeakyRelu { alpha })
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let values = kernels::relu(&self.nodes[input].values);
        let dims = self.nodes[input].dims.clone();
        self.push(dims, values, vec![input], Op::Relu)
    }

    pub fn avg_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.chw_dims(input, "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "avg_pool2 needs even spatial dims, got {h}x{w}"
            )));
        }
        let values = kernels::avg_pool2(&self.nodes[input].values, c, h, w);
        Ok(self.push(vec![c, h / 2, w / 2], values, vec![input], Op::AvgPool2))
    }

    pub fn upsample2(&mut self, input: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.chw_dims(input, "upsample2")?;
        let values = kernels::upsample_nearest2(&self.nodes[input].values, c, h, w);
        Ok(self.push(
            vec![c, 2 * h, 2 * w],
            values,
            vec![input],
            Op::UpsampleNearest2,
        ))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ca, ha, wa) = self.chw_dims(a, "concat lhs")?;
        let (cb, hb, wb) = self.chw_dims(b, "concat rhs")?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::Shape(format!(
                "concat spatial mismatch: {ha}x{wa} vs {hb}x{wb}"
            )));
        }
        let mut values = self.nodes[a].values.clone();
        values.extend_from_slice(&self.nodes[b].values);
        Ok(self.push(
            vec![ca + cb, ha, wa],
            values,
            vec![a, b],
            Op::ConcatChannels,
        ))
    }

    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let in_dim = match self.nodes[x].dims[..] {
            [n] => n,
            ref other => {
                return Err(Error::Shape(format!(
                    "linear input must be a vector, got dims {other:?}"
                )))
            }
        };
        let (out_dim, w_in) = match self.nodes[weight].dims[..] {
            [o, i] => (o, i),
            ref other => {
                return Err(Error::Shape(format!(
                    "linear weight must be [out, in], got dims {other:?}"
                )))
            }
        };
        if w_in != in_dim || self.nodes[bias].dims[..] != [out_dim] {
            return Err(Error::Shape(format!(
                "linear shapes incompatible: x[{in_dim}], w[{out_dim},{w_in}], b{:?}",
                self.nodes[bias].dims
            )));
        }
        let values = kernels::linear(
            &self.nodes[x].values,
            &self.nodes[weight].values,
            &self.nodes[bias].values,
            out_dim,
            in_dim,
        );
        Ok(self.push(vec![out_dim], values, vec![x, weight, bias], Op::Linear))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.chw_dims(input, "global_avg_pool")?;
        let values = kernels::global_avg_pool(&self.nodes[input].values, c, h * w);
        Ok(self.push(vec![c], values, vec![input], Op::GlobalAvgPool))
    }

    pub fn modulate(&mut self, weights: NodeId, scales: NodeId) -> Result<NodeId> {
        let (m, n, k) = self.weight_dims(weights, "modulate")?;
        if self.nodes[scales].dims[..] != [m] {
            return Err(Error::Shape(format!(
                "scale vector dims {:?} do not match {m} input channels",
                self.nodes[scales].dims
            )));
        }
        let values = kernels::modulate(
            &self.nodes[weights].values,
            m,
            n,
            k * k,
            &self.nodes[scales].values,
        );
        Ok(self.push(vec![m, n, k, k], values, vec![weights, scales], Op::Modulate))
    }

    pub fn demodulate(&mut self, weights: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n, k) = self.weight_dims(weights, "demodulate")?;
        let values = kernels::demodulate(&self.nodes[weights].values, m, n, k * k, eps);
        Ok(self.push(vec![m, n, k, k], values, vec![weights], Op::Demodulate { eps }))
    }

    pub fn mask_mix(&mut self, conv: NodeId, orig: NodeId, mask: &[bool]) -> Result<NodeId> {
        let (c, h, w) = self.chw_dims(conv, "mask_mix conv")?;
        let (co, ho, wo) = self.chw_dims(orig, "mask_mix orig")?;
        if (c, h, w) != (co, ho, wo) || mask.len() != h * w {
            return Err(Error::Shape(format!(
                "mask_mix shapes incompatible: conv [{c},{h},{w}], orig [{co},{ho},{wo}], mask {}",
                mask.len()
            )));
        }
        let values = kernels::mask_mix(&self.nodes[conv].values, &self.nodes[orig].values, mask, c);
        Ok(self.push(
            vec![c, h, w],
            values,
            vec![conv, orig],
            Op::MaskMix {
                mask: mask.to_vec(),
            },
        ))
    }

    pub fn zero_background(&mut self, input: NodeId, mask: &[bool]) -> Result<NodeId> {
        let (c, h, w) = self.chw_dims(input, "zero_background")?;
        if mask.len() != h * w {
            return Err(Error::Shape(format!(
                "mask has {} cells for a {h}x{w} map",
                mask.len()
            )));
        }
        let values = kernels::zero_background(&self.nodes[input].values, mask, c);
        Ok(self.push(
            vec![c, h, w],
            values,
            vec![input],
            Op::ZeroBackground {
                mask: mask.to_vec(),
            },
        ))
    }

    pub fn masked_mean(&mut self, input: NodeId, mask: &[bool]) -> Result<NodeId> {
        let (c, h, w) = self.chw_dims(input, "masked_mean")?;
        if mask.len() != h * w {
            return Err(Error::Shape(format!(
                "mask has {} cells for a {h}x{w} map",
                mask.len()
            )));
        }
        if !mask.iter().any(|&b| b) {
            return Err(Error::Precondition(
                "masked_mean needs at least one foreground cell".into(),
            ));
        }
        let values = kernels::masked_mean(&self.nodes[input].values, mask, c);
        Ok(self.push(
            vec![c],
            values,
            vec![input],
            Op::MaskedMean {
                mask: mask.to_vec(),
            },
        ))
    }

    pub fn sq_dist_field(&mut self, center: NodeId, f: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.chw_dims(f, "sq_dist_field map")?;
        if self.nodes[center].dims[..] != [c] {
            return Err(Error::Shape(format!(
                "center dims {:?} do not match {c} channels",
                self.nodes[center].dims
            )));
        }
        let values =
            kernels::sq_dist_field(&self.nodes[center].values, &self.nodes[f].values, h * w);
        Ok(self.push(vec![h * w], values, vec![center, f], Op::SqDistField))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let values = self.nodes[input].values.iter().map(|v| v * factor).collect();
        let dims = self.nodes[input].dims.clone();
        self.push(dims, values, vec![input], Op::Scale { factor })
    }

    pub fn softmax(&mut self, input: NodeId, active: Option<Vec<bool>>) -> Result<NodeId> {
        let n = self.nodes[input].values.len();
        if let Some(a) = &active {
            if a.len() != n {
                return Err(Error::Shape(format!(
                    "softmax subset has {} flags for {n} entries",
                    a.len()
                )));
            }
            if !a.iter().any(|&b| b) {
                return Err(Error::Precondition("softmax subset is empty".into()));
            }
        }
        let values = kernels::softmax(&self.nodes[input].values, active.as_deref());
        let dims = self.nodes[input].dims.clone();
        Ok(self.push(dims, values, vec![input], Op::Softmax { active }))
    }

    pub fn sum_sq_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].values.len() != self.nodes[b].values.len() {
            return Err(Error::Shape(format!(
                "sum_sq_diff length mismatch: {} vs {}",
                self.nodes[a].values.len(),
                self.nodes[b].values.len()
            )));
        }
        let v = kernels::sum_sq_diff(&self.nodes[a].values, &self.nodes[b].values);
        Ok(self.push(vec![], vec![v], vec![a, b], Op::SumSqDiff))
    }

    pub fn l1_mean(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].values.len() != self.nodes[b].values.len() {
            return Err(Error::Shape(format!(
                "l1_mean length mismatch: {} vs {}",
                self.nodes[a].values.len(),
                self.nodes[b].values.len()
            )));
        }
        let v = kernels::l1_mean(&self.nodes[a].values, &self.nodes[b].values);
        Ok(self.push(vec![], vec![v], vec![a, b], Op::L1Mean))
    }

    pub fn clamp01(&mut self, input: NodeId) -> NodeId {
        let values = kernels::clamp01(&self.nodes[input].values);
        let dims = self.nodes[input].dims.clone();
        self.push(dims, values, vec![input], Op::Clamp01)
    }

    pub fn sum_scalars(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let mut v = 0.0;
        for &t in terms {
            if !self.nodes[t].dims.is_empty() {
                return Err(Error::Shape("sum_scalars takes scalar nodes".into()));
            }
            v += self.nodes[t].values[0];
        }
        Ok(self.push(vec![], vec![v], terms.to_vec(), Op::SumScalars))
    }

    /// Reverse-mode gradients of the scalar `root` with respect to every
    /// node; returns one gradient buffer per node.
    pub fn backward(&self, root: NodeId) -> Vec<Vec<f64>> {
        assert!(
            self.nodes[root].dims.is_empty(),
            "backward root must be a scalar node"
        );
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.values.len()])
            .collect();
        grads[root][0] = 1.0;

        for id in (0..=root).rev() {
            let g = std::mem::take(&mut grads[id]);
            if g.iter().all(|&v| v == 0.0) {
                grads[id] = g;
                continue;
            }
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d => {
                    let (input, weights) = (node.parents[0], node.parents[1]);
                    let (c_in, h, w) = match self.nodes[input].dims[..] {
                        [c, h, w] => (c, h, w),
                        _ => unreachable!(),
                    };
                    let (_, c_out, k) = match self.nodes[weights].dims[..] {
                        [m, n, k, _] => (m, n, k),
                        _ => unreachable!(),
                    };
                    let r = (k / 2) as isize;
                    let kk = k * k;
                    let wv = &self.nodes[weights].values;
                    let iv = &self.nodes[input].values;
                    for n in 0..c_out {
                        for m in 0..c_in {
                            let wbase = (m * c_out + n) * kk;
                            for y in 0..h as isize {
                                for x in 0..w as isize {
                                    let go = g[kernels::chw(c_out, h, w, n, y as usize, x as usize)];
                                    if go == 0.0 {
                                        continue;
                                    }
                                    for dy in 0..k as isize {
                                        let yy = y + dy - r;
                                        if yy < 0 || yy >= h as isize {
                                            continue;
                                        }
                                        for dx in 0..k as isize {
                                            let xx = x + dx - r;
                                            if xx < 0 || xx >= w as isize {
                                                continue;
                                            }
                                            let widx = wbase + (dy * k as isize + dx) as usize;
                                            let iidx = kernels::chw(
                                                c_in, h, w, m, yy as usize, xx as usize,
                                            );
                                            grads[input][iidx] += go * wv[widx];
                                            grads[weights][widx] += go * iv[iidx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::BiasChw => {
                    let (input, bias) = (node.parents[0], node.parents[1]);
                    let c = self.nodes[bias].values.len();
                    let hw = node.values.len() / c;
                    for ch in 0..c {
                        for i in 0..hw {
                            grads[input][ch * hw + i] += g[ch * hw + i];
                            grads[bias][ch] += g[ch * hw + i];
                        }
                    }
                }
                Op::LeakyRelu { alpha } => {
                    let input = node.parents[0];
                    for (i, &x) in self.nodes[input].values.iter().enumerate() {
                        grads[input][i] += if x >= 0.0 { g[i] } else { alpha * g[i] };
                    }
                }
                Op::Relu => {
                    let input = node.parents[0];
                    for (i, &x) in self.nodes[input].values.iter().enumerate() {
                        if x > 0.0 {
                            grads[input][i] += g[i];
                        }
                    }
                }
                Op::AvgPool2 => {
                    let input = node.parents[0];
                    let (c, h, w) = match self.nodes[input].dims[..] {
                        [c, h, w] => (c, h, w),
                        _ => unreachable!(),
                    };
                    let (ho, wo) = (h / 2, w / 2);
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                grads[input][kernels::chw(c, h, w, ch, y, x)] +=
                                    g[kernels::chw(c, ho, wo, ch, y / 2, x / 2)] / 4.0;
                            }
                        }
                    }
                }
                Op::UpsampleNearest2 => {
                    let input = node.parents[0];
                    let (c, h, w) = match self.nodes[input].dims[..] {
                        [c, h, w] => (c, h, w),
                        _ => unreachable!(),
                    };
                    let (ho, wo) = (2 * h, 2 * w);
                    for ch in 0..c {
                        for y in 0..ho {
                            for x in 0..wo {
                                grads[input][kernels::chw(c, h, w, ch, y / 2, x / 2)] +=
                                    g[kernels::chw(c, ho, wo, ch, y, x)];
                            }
                        }
                    }
                }
                Op::ConcatChannels => {
                    let (a, b) = (node.parents[0], node.parents[1]);
                    let la = self.nodes[a].values.len();
                    for i in 0..la {
                        grads[a][i] += g[i];
                    }
                    for i in 0..self.nodes[b].values.len() {
                        grads[b][i] += g[la + i];
                    }
                }
                Op::Linear => {
                    let (x, weight, bias) = (node.parents[0], node.parents[1], node.parents[2]);
                    let in_dim = self.nodes[x].values.len();
                    let out_dim = node.values.len();
                    let wv = &self.nodes[weight].values;
                    let xv = &self.nodes[x].values;
                    for o in 0..out_dim {
                        grads[bias][o] += g[o];
                        for i in 0..in_dim {
                            grads[x][i] += g[o] * wv[o * in_dim + i];
                            grads[weight][o * in_dim + i] += g[o] * xv[i];
                        }
                    }
                }
                Op::GlobalAvgPool => {
                    let input = node.parents[0];
                    let c = node.values.len();
                    let hw = self.nodes[input].values.len() / c;
                    for ch in 0..c {
                        for i in 0..hw {
                            grads[input][ch * hw + i] += g[ch] / hw as f64;
                        }
                    }
                }
                Op::Modulate => {
                    let (weights, scales) = (node.parents[0], node.parents[1]);
                    let (m, n, k) = match self.nodes[weights].dims[..] {
                        [m, n, k, _] => (m, n, k),
                        _ => unreachable!(),
                    };
                    let kk = k * k;
                    let wv = &self.nodes[weights].values;
                    let sv = &self.nodes[scales].values;
                    for mm in 0..m {
                        for nn in 0..n {
                            let base = (mm * n + nn) * kk;
                            for p in 0..kk {
                                grads[weights][base + p] += g[base + p] * sv[mm];
                                grads[scales][mm] += g[base + p] * wv[base + p];
                            }
                        }
                    }
                }
                Op::Demodulate { eps } => {
                    let weights = node.parents[0];
                    let (m, n, k) = match self.nodes[weights].dims[..] {
                        [m, n, k, _] => (m, n, k),
                        _ => unreachable!(),
                    };
                    let kk = k * k;
                    let wv = &self.nodes[weights].values;
                    let sums = kernels::demod_sums(wv, m, n, kk);
                    // For each output channel: out = w / sqrt(S + eps);
                    // d out[i]/d w[j] = delta_ij / d - w_i w_j / d^3.
                    for nn in 0..n {
                        let denom = (sums[nn] + eps).sqrt();
                        let mut dot = 0.0;
                        for mm in 0..m {
                            let base = (mm * n + nn) * kk;
                            for p in 0..kk {
                                dot += g[base + p] * wv[base + p];
                            }
                        }
                        let d3 = denom * denom * denom;
                        for mm in 0..m {
                            let base = (mm * n + nn) * kk;
                            for p in 0..kk {
                                grads[weights][base + p] +=
                                    g[base + p] / denom - wv[base + p] * dot / d3;
                            }
                        }
                    }
                }
                Op::MaskMix { mask } => {
                    let (conv, orig) = (node.parents[0], node.parents[1]);
                    let hw = mask.len();
                    let c = node.values.len() / hw;
                    for ch in 0..c {
                        for (i, &fg) in mask.iter().enumerate() {
                            if fg {
                                grads[conv][ch * hw + i] += g[ch * hw + i];
                            } else {
                                grads[orig][ch * hw + i] += g[ch * hw + i];
                            }
                        }
                    }
                }
                Op::ZeroBackground { mask } => {
                    let input = node.parents[0];
                    let hw = mask.len();
                    let c = node.values.len() / hw;
                    for ch in 0..c {
                        for (i, &fg) in mask.iter().enumerate() {
                            if fg {
                                grads[input][ch * hw + i] += g[ch * hw + i];
                            }
                        }
                    }
                }
                Op::MaskedMean { mask } => {
                    let input = node.parents[0];
                    let hw = mask.len();
                    let c = node.values.len();
                    let count = mask.iter().filter(|&&b| b).count() as f64;
                    for ch in 0..c {
                        for (i, &fg) in mask.iter().enumerate() {
                            if fg {
                                grads[input][ch * hw + i] += g[ch] / count;
                            }
                        }
                    }
                }
                Op::SqDistField => {
                    let (center, f) = (node.parents[0], node.parents[1]);
                    let c = self.nodes[center].values.len();
                    let hw = node.values.len();
                    let cv = &self.nodes[center].values;
                    let fv = &self.nodes[f].values;
                    for ch in 0..c {
                        for i in 0..hw {
                            let diff = cv[ch] - fv[ch * hw + i];
                            grads[center][ch] += g[i] * 2.0 * diff;
                            grads[f][ch * hw + i] -= g[i] * 2.0 * diff;
                        }
                    }
                }
                Op::Scale { factor } => {
                    let input = node.parents[0];
                    for i in 0..g.len() {
                        grads[input][i] += g[i] * factor;
                    }
                }
                Op::Softmax { active } => {
                    let input = node.parents[0];
                    let out = &node.values;
                    let included = |i: usize| active.as_ref().map_or(true, |a| a[i]);
                    let mut dot = 0.0;
                    for i in 0..out.len() {
                        dot += g[i] * out[i];
                    }
                    for i in 0..out.len() {
                        if included(i) {
                            grads[input][i] += out[i] * (g[i] - dot);
                        }
                    }
                }
                Op::SumSqDiff => {
                    let (a, b) = (node.parents[0], node.parents[1]);
                    let av = &self.nodes[a].values;
                    let bv = &self.nodes[b].values;
                    for i in 0..av.len() {
                        let d = 2.0 * (av[i] - bv[i]) * g[0];
                        grads[a][i] += d;
                        grads[b][i] -= d;
                    }
                }
                Op::L1Mean => {
                    let (a, b) = (node.parents[0], node.parents[1]);
                    let av = &self.nodes[a].values;
                    let bv = &self.nodes[b].values;
                    let scale = g[0] / av.len() as f64;
                    for i in 0..av.len() {
                        // Subgradient 0 at exact ties.
                        let s = if av[i] > bv[i] {
                            1.0
                        } else if av[i] < bv[i] {
                            -1.0
                        } else {
                            0.0
                        };
                        grads[a][i] += s * scale;
                        grads[b][i] -= s * scale;
                    }
                }
                Op::Clamp01 => {
                    let input = node.parents[0];
                    for (i, &x) in self.nodes[input].values.iter().enumerate() {
                        if (0.0..=1.0).contains(&x) {
                            grads[input][i] += g[i];
                        }
                    }
                }
                Op::SumScalars => {
                    for &p in &node.parents {
                        grads[p][0] += g[0];
                    }
                }
            }
            grads[id] = g;
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Central finite differences of a scalar-valued graph builder with
    /// respect to one leaf's entries.
    fn fd_grad<F>(build: F, leaf_values: &[f64], h: f64) -> Vec<f64>
    where
        F: Fn(&[f64]) -> f64,
    {
        let mut grads = Vec::with_capacity(leaf_values.len());
        let mut point = leaf_values.to_vec();
        for i in 0..point.len() {
            let orig = point[i];
            point[i] = orig + h;
            let fp = build(&point);
            point[i] = orig - h;
            let fm = build(&point);
            point[i] = orig;
            grads.push((fp - fm) / (2.0 * h));
        }
        grads
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-6);
            assert!(rel <= tol, "entry {i}: {x} vs {y} (rel {rel})");
        }
    }

    #[test]
    fn conv2d_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (c_in, c_out, h, w, k) = (3, 2, 5, 4, 3);
        let input = randn(&mut rng, c_in * h * w);
        let weights = randn(&mut rng, c_in * c_out * k * k);

        let mut g = Graph::new();
        let x = g.leaf(vec![c_in, h, w], input.clone());
        let wn = g.leaf(vec![c_in, c_out, k, k], weights.clone());
        let out = g.conv2d(x, wn).unwrap();

        // Naive quadruple loop, independent of the kernel implementation.
        let r = (k / 2) as isize;
        for n in 0..c_out {
            for y in 0..h as isize {
                for x_ in 0..w as isize {
                    let mut acc = 0.0;
                    for m in 0..c_in {
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let (yy, xx) = (y + dy, x_ + dx);
                                if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                let widx = (m * c_out + n) * k * k
                                    + ((dy + r) as usize) * k
                                    + (dx + r) as usize;
                                acc += weights[widx]
                                    * input[(m * h + yy as usize) * w + xx as usize];
                            }
                        }
                    }
                    let got = g.values(out)[(n * h + y as usize) * w + x_ as usize];
                    assert!((got - acc).abs() <= 1e-10, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (c_in, c_out, h, w, k) = (2, 3, 4, 4, 3);
        let input = randn(&mut rng, c_in * h * w);
        let weights = randn(&mut rng, c_in * c_out * k * k);
        let target = randn(&mut rng, c_out * h * w);

        let run = |iv: &[f64], wv: &[f64]| -> (Graph, NodeId, NodeId, NodeId) {
            let mut g = Graph::new();
            let x = g.leaf(vec![c_in, h, w], iv.to_vec());
            let wn = g.leaf(vec![c_in, c_out, k, k], wv.to_vec());
            let y = g.conv2d(x, wn).unwrap();
            let t = g.leaf(vec![c_out, h, w], target.clone());
            let loss = g.sum_sq_diff(y, t).unwrap();
            (g, loss, x, wn)
        };

        let (g, loss, x, wn) = run(&input, &weights);
        let grads = g.backward(loss);

        let fd_input = fd_grad(|iv| {
            let (g, l, _, _) = run(iv, &weights);
            g.scalar(l)
        }, &input, 1e-5);
        let fd_weights = fd_grad(|wv| {
            let (g, l, _, _) = run(&input, wv);
            g.scalar(l)
        }, &weights, 1e-5);

        assert_close(&grads[x], &fd_input, 1e-6);
        assert_close(&grads[wn], &fd_weights, 1e-6);
    }

    #[test]
    fn pool_upsample_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = randn(&mut rng, 2 * 4 * 4);
        let other = randn(&mut rng, 2 * 8 * 8);
        let target = randn(&mut rng, 3 * 4 * 4);

        let run = |iv: &[f64]| -> (Graph, NodeId, NodeId) {
            let mut g = Graph::new();
            let x = g.leaf(vec![2, 4, 4], iv.to_vec());
            let up = g.upsample2(x).unwrap();
            let o = g.leaf(vec![2, 8, 8], other.clone());
            let cat = g.concat_channels(up, o).unwrap();
            let mixed = g.leaky_relu(cat, 0.2);
            let pooled = g.avg_pool2(mixed).unwrap();
            // 4 channels at 4x4; take a sq-diff against 3 channels worth
            // by pooling channels via another conv-free path: just use
            // the first 3*16 entries through slicing into a leaf target.
            let t = g.leaf(vec![4, 4, 4], {
                let mut tv = target.clone();
                tv.extend(vec![0.0; 16]);
                tv
            });
            let loss = g.sum_sq_diff(pooled, t).unwrap();
            (g, loss, x)
        };
        let (g, loss, x) = run(&input);
        let grads = g.backward(loss);
        let fd = fd_grad(|iv| {
            let (g, l, _) = run(iv);
            g.scalar(l)
        }, &input, 1e-5);
        assert_close(&grads[x], &fd, 1e-6);
    }

    #[test]
    fn modulate_demodulate_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (m, n, k) = (3, 2, 3);
        let weights = randn(&mut rng, m * n * k * k);
        let scales: Vec<f64> = (0..m).map(|_| rng.gen_range(0.5..1.5)).collect();
        let target = randn(&mut rng, m * n * k * k);

        let run = |wv: &[f64], sv: &[f64]| -> (Graph, NodeId, NodeId, NodeId) {
            let mut g = Graph::new();
            let w = g.leaf(vec![m, n, k, k], wv.to_vec());
            let s = g.leaf(vec![m], sv.to_vec());
            let modded = g.modulate(w, s).unwrap();
            let demod = g.demodulate(modded, 1e-8).unwrap();
            let t = g.leaf(vec![m, n, k, k], target.clone());
            let loss = g.sum_sq_diff(demod, t).unwrap();
            (g, loss, w, s)
        };
        let (g, loss, w, s) = run(&weights, &scales);
        let grads = g.backward(loss);
        let fd_w = fd_grad(|wv| {
            let (g, l, _, _) = run(wv, &scales);
            g.scalar(l)
        }, &weights, 1e-5);
        let fd_s = fd_grad(|sv| {
            let (g, l, _, _) = run(&weights, sv);
            g.scalar(l)
        }, &scales, 1e-5);
        assert_close(&grads[w], &fd_w, 1e-5);
        assert_close(&grads[s], &fd_s, 1e-5);
    }

    #[test]
    fn relation_pipeline_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (c, h, w) = (3, 2, 2);
        let f = randn(&mut rng, c * h * w);
        let mask = vec![true, false, true, false];
        let target = vec![0.25; 4];

        let run = |fv: &[f64]| -> (Graph, NodeId, NodeId) {
            let mut g = Graph::new();
            let fm = g.leaf(vec![c, h, w], fv.to_vec());
            let center = g.masked_mean(fm, &mask).unwrap();
            let dist = g.sq_dist_field(center, fm).unwrap();
            let logits = g.scale(dist, -0.5);
            let r = g.softmax(logits, None).unwrap();
            let t = g.leaf(vec![4], target.clone());
            let loss = g.sum_sq_diff(r, t).unwrap();
            (g, loss, fm)
        };
        let (g, loss, fm) = run(&f);
        let grads = g.backward(loss);
        let fd = fd_grad(|fv| {
            let (g, l, _) = run(fv);
            g.scalar(l)
        }, &f, 1e-6);
        assert_close(&grads[fm], &fd, 1e-5);
    }

    #[test]
    fn linear_and_activations_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&mut rng, 4);
        let w = randn(&mut rng, 3 * 4);
        let b = randn(&mut rng, 3);
        let target = randn(&mut rng, 3);

        let run = |xv: &[f64], wv: &[f64], bv: &[f64]| -> (Graph, NodeId, [NodeId; 3]) {
            let mut g = Graph::new();
            let xn = g.leaf(vec![4], xv.to_vec());
            let wn = g.leaf(vec![3, 4], wv.to_vec());
            let bn = g.leaf(vec![3], bv.to_vec());
            let y = g.linear(xn, wn, bn).unwrap();
            let a = g.relu(y);
            let t = g.leaf(vec![3], target.clone());
            let loss = g.sum_sq_diff(a, t).unwrap();
            (g, loss, [xn, wn, bn])
        };
        let (g, loss, ids) = run(&x, &w, &b);
        let grads = g.backward(loss);
        let fd_x = fd_grad(|v| { let (g, l, _) = run(v, &w, &b); g.scalar(l) }, &x, 1e-6);
        let fd_w = fd_grad(|v| { let (g, l, _) = run(&x, v, &b); g.scalar(l) }, &w, 1e-6);
        let fd_b = fd_grad(|v| { let (g, l, _) = run(&x, &w, v); g.scalar(l) }, &b, 1e-6);
        assert_close(&grads[ids[0]], &fd_x, 1e-6);
        assert_close(&grads[ids[1]], &fd_w, 1e-6);
        assert_close(&grads[ids[2]], &fd_b, 1e-6);
    }

    #[test]
    fn l1_subgradient_is_zero_at_ties() {
        let mut g = Graph::new();
        let a = g.leaf(vec![3], vec![0.5, 0.2, 0.9]);
        let b = g.leaf(vec![3], vec![0.5, 0.1, 1.0]);
        let loss = g.l1_mean(a, b).unwrap();
        let grads = g.backward(loss);
        assert_eq!(grads[a], vec![0.0, 1.0 / 3.0, -1.0 / 3.0]);
    }

    #[test]
    fn clamp_passes_gradient_only_in_range() {
        let mut g = Graph::new();
        let x = g.leaf(vec![3], vec![-0.5, 0.5, 1.5]);
        let c = g.clamp01(x);
        let t = g.leaf(vec![3], vec![0.0; 3]);
        let loss = g.sum_sq_diff(c, t).unwrap();
        let grads = g.backward(loss);
        assert_eq!(grads[x][0], 0.0);
        assert!((grads[x][1] - 1.0).abs() < 1e-12); // 2 * 0.5
        assert_eq!(grads[x][2], 0.0);
    }

    #[test]
    fn mask_ops_route_gradients() {
        let mask = vec![true, false];
        let mut g = Graph::new();
        let conv = g.leaf(vec![1, 1, 2], vec![2.0, 3.0]);
        let orig = g.leaf(vec![1, 1, 2], vec![5.0, 7.0]);
        let mixed = g.mask_mix(conv, orig, &mask).unwrap();
        assert_eq!(g.values(mixed), &[2.0, 7.0]);
        let t = g.leaf(vec![1, 1, 2], vec![0.0, 0.0]);
        let loss = g.sum_sq_diff(mixed, t).unwrap();
        let grads = g.backward(loss);
        assert_eq!(grads[conv], vec![4.0, 0.0]);
        assert_eq!(grads[orig], vec![0.0, 14.0]);
    }

    #[test]
    fn softmax_values_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let x = randn(&mut rng, 8);
            let mut g = Graph::new();
            let xn = g.leaf(vec![8], x);
            let s = g.softmax(xn, None).unwrap();
            let sum: f64 = g.values(s).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }
}

//! Invariant and gradient verification suites, runnable from the CLI.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gift::network::{GiftConfig, GiftNetwork};
use crate::gift::ops::{
    self, ConvWeights, FeatureMap, RelationMap,
};
use crate::gift::train::synthetic_pairs;
use crate::raster::BinaryMask;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub parameter_count: usize,
    pub max_rel_err: f64,
    pub worst_segment: String,
    pub kink_margin: f64,
    pub elapsed_secs: f64,
}

/// Compares analytic gradients of the total loss against central finite
/// differences over every parameter of the network.
///
/// The fixture is built to keep the loss smooth at the evaluation point:
/// the target image is dark so no pixel of the mid-gray initial
/// prediction ties with it, and the pre-clamp outputs are checked to sit
/// strictly inside the clamp range.
pub fn gradient_check(
    config: &GiftConfig,
    size: usize,
    seed: u64,
    h: f64,
) -> Result<GradCheckReport> {
    let start = Instant::now();
    let net = GiftNetwork::init(config.clone(), seed)?;
    let recon = GiftNetwork::init(config.without_gift(), seed.wrapping_add(1))?;

    let pair = synthetic_pairs(1, size, seed.wrapping_add(2))
        .into_iter()
        .next()
        .expect("one pair requested");
    let composite = pair.composite;
    let mask = pair.mask;

    // Dark target: the initial prediction starts near mid-gray, so the L1
    // term has no ties and a healthy kink margin.
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let mut gt = crate::raster::LinearImage::new(size, size)?;
    for y in 0..size {
        for x in 0..size {
            gt.set(
                x,
                y,
                [
                    rng.gen_range(0.08..0.25),
                    rng.gen_range(0.08..0.25),
                    rng.gen_range(0.08..0.25),
                ],
            );
        }
    }

    let targets = recon.encoder_relations(&gt, &mask)?;

    // Fixture guards: no raw output near a clamp boundary (pixels deep in
    // the clamp are fine, their gradient is zero on both sides of the
    // difference), no L1 ties, rectifier units away from their kinks.
    // Degenerate fixtures are rejected rather than silently producing
    // false mismatches; pinned seeds satisfy these.
    let kink_margin;
    {
        let trace = net.forward(&composite, &mask)?;
        kink_margin = trace.kink_margin();
        let boundary_margin = trace
            .raw_prediction_values()
            .iter()
            .map(|v| v.abs().min((v - 1.0).abs()))
            .fold(f64::INFINITY, f64::min);
        if boundary_margin <= 5e-3 {
            return Err(Error::Precondition(format!(
                "gradient-check fixture degenerate: a raw output sits {boundary_margin:.2e} \
                 from a clamp boundary"
            )));
        }
        let pred = trace.prediction();
        let min_gap = pred
            .pixels()
            .iter()
            .zip(gt.pixels())
            .map(|(a, b)| (a - b).abs())
            .fold(f64::INFINITY, f64::min);
        if min_gap <= 1e-3 {
            return Err(Error::Precondition(format!(
                "gradient-check fixture degenerate: min |pred - gt| = {min_gap:.2e}"
            )));
        }
        // A central difference of +-h crosses a rectifier kink only when
        // |preact| < |dpreact/dtheta| * h, and the co-factors here stay
        // near 1; 4h leaves a 3x safety factor.
        if trace.kink_margin() <= 4.0 * h {
            return Err(Error::Precondition(format!(
                "gradient-check fixture degenerate: a rectified unit sits {:.2e} from its kink",
                trace.kink_margin()
            )));
        }
    }

    let (_, analytic) = net.loss_and_grad(&composite, &gt, &mask, &targets)?;

    let mut scratch = net.clone();
    let mut max_rel_err = 0.0f64;
    let mut worst_index = 0usize;
    for i in 0..analytic.len() {
        let orig = scratch.params.data()[i];
        scratch.params.data_mut()[i] = orig + h;
        let plus = scratch.loss(&composite, &gt, &mask, &targets)?.total;
        scratch.params.data_mut()[i] = orig - h;
        let minus = scratch.loss(&composite, &gt, &mask, &targets)?.total;
        scratch.params.data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * h);
        let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-6);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }

    let worst_segment = net
        .params
        .locate(worst_index)
        .map(|(name, off)| format!("{name}[{off}]"))
        .unwrap_or_else(|| "?".into());
    Ok(GradCheckReport {
        parameter_count: analytic.len(),
        max_rel_err,
        worst_segment,
        kink_margin,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

/// Runs the invariant and gradient suites; every entry reports pass/fail
/// with a numeric detail line.
pub fn run_selftest(seed: u64) -> Vec<Check> {
    let mut checks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Relation maps normalize, flatten under tiny gamma, and match the
    // two-pixel closed form.
    {
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let c = rng.gen_range(1..5);
            let side = [2usize, 4][rng.gen_range(0..2)];
            let values: Vec<f64> = (0..c * side * side)
                .map(|_| rng.gen_range(-2.0..2.0))
                .collect();
            let f = FeatureMap::new(c, side, side, values).unwrap();
            let mut mask = BinaryMask::filled(side, side, false).unwrap();
            mask.set(rng.gen_range(0..side), rng.gen_range(0..side), true);
            let r = ops::relation_map(&f, &mask, 0.01).unwrap();
            worst = worst.max((r.values.iter().sum::<f64>() - 1.0).abs());
        }
        checks.push(Check::new(
            "relation-map-normalization",
            worst <= 1e-6,
            format!("max |sum - 1| = {worst:.3e} over 200 random maps"),
        ));
    }
    {
        let values: Vec<f64> = (0..3 * 16).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let f = FeatureMap::new(3, 4, 4, values).unwrap();
        let mut mask = BinaryMask::filled(4, 4, false).unwrap();
        mask.set(1, 2, true);
        let r = ops::relation_map(&f, &mask, 1e-12).unwrap();
        let worst = r
            .values
            .iter()
            .map(|v| (v - 1.0 / 16.0).abs())
            .fold(0.0, f64::max);
        checks.push(Check::new(
            "relation-map-uniform-limit",
            worst <= 1e-9,
            format!("max deviation from uniform at gamma=1e-12: {worst:.3e}"),
        ));
    }
    {
        let f = FeatureMap::new(1, 1, 2, vec![0.5, -0.5]).unwrap();
        let mut mask = BinaryMask::filled(2, 1, false).unwrap();
        mask.set(0, 0, true);
        let r = ops::relation_map(&f, &mask, 0.01).unwrap();
        let err = (r.values[0] - 0.5025).abs().max((r.values[1] - 0.4975).abs());
        checks.push(Check::new(
            "relation-map-closed-form",
            err <= 1e-4,
            format!("softmax(0, -0.01) error = {err:.3e}"),
        ));
    }

    // Demodulation: per-channel sums hit S/(S+eps); scaling the
    // modulated weights leaves the normalized weights unchanged.
    {
        let eps = 1e-8;
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let (m, n, k) = (rng.gen_range(1..5), rng.gen_range(1..5), 3);
            let base: Vec<f64> = (0..m * n * k * k)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let w = ConvWeights::new(m, n, k, base).unwrap();
            let d = ops::demodulate(&w, eps).unwrap();
            for nn in 0..n {
                let mut s_orig = 0.0;
                let mut s_norm = 0.0;
                for mm in 0..m {
                    for p in 0..k * k {
                        let idx = (mm * n + nn) * k * k + p;
                        s_orig += w.base[idx] * w.base[idx];
                        s_norm += d.base[idx] * d.base[idx];
                    }
                }
                worst = worst.max((s_norm - s_orig / (s_orig + eps)).abs());
            }
        }
        checks.push(Check::new(
            "demodulation-sum-identity",
            worst <= 1e-6,
            format!("max |sum - S/(S+eps)| = {worst:.3e}"),
        ));
    }
    {
        let base: Vec<f64> = (0..4 * 3 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = ConvWeights::new(4, 3, 3, base).unwrap();
        let reference = ops::demodulate(&w, 1e-8).unwrap();
        let mut worst = 0.0f64;
        for c in [0.5, 2.0, 10.0] {
            let scaled = ConvWeights {
                base: w.base.iter().map(|v| c * v).collect(),
                ..w.clone()
            };
            let d = ops::demodulate(&scaled, 1e-8).unwrap();
            for (a, b) in d.base.iter().zip(&reference.base) {
                worst = worst.max((a - b).abs());
            }
        }
        checks.push(Check::new(
            "demodulation-scale-invariance",
            worst <= 1e-6,
            format!("max drift across c in {{0.5, 2, 10}}: {worst:.3e}"),
        ));
    }

    // Foreground compositing leaves background features bit-identical.
    {
        let values: Vec<f64> = (0..3 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = FeatureMap::new(3, 4, 4, values).unwrap();
        let base: Vec<f64> = (0..3 * 3 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = ConvWeights::new(3, 3, 3, base).unwrap();
        let bits: Vec<bool> = (0..16).map(|i| i % 3 == 0).collect();
        let mask = BinaryMask::new(4, 4, bits).unwrap();
        let out = ops::gift_apply(&f, &mask, &w).unwrap();
        let mut ok = true;
        for c in 0..3 {
            for i in 0..16 {
                if !mask.bits()[i] && out.values[c * 16 + i] != f.values[c * 16 + i] {
                    ok = false;
                }
            }
        }
        checks.push(Check::new(
            "gift-background-identity",
            ok,
            "background features bit-identical under masked transform".into(),
        ));
    }

    // Identical images through weight-shared branches distill to zero.
    {
        let cfg = GiftConfig {
            encoder_channels: [4, 6, 8, 10],
            decoder_channels: [8, 6, 4],
            mlp_hidden: 6,
            ..GiftConfig::default()
        }
        .without_gift();
        let net = GiftNetwork::init(cfg, seed.wrapping_add(9)).unwrap();
        let pair = synthetic_pairs(1, 16, seed.wrapping_add(10)).remove(0);
        let targets = net.encoder_relations(&pair.real, &pair.mask).unwrap();
        let loss = net
            .loss(&pair.real, &pair.real, &pair.mask, &targets)
            .unwrap();
        let ok = loss.l_dis == [0.0; 4];
        checks.push(Check::new(
            "relation-distillation-zero-case",
            ok,
            format!("per-level distillation losses: {:?}", loss.l_dis),
        ));
    }

    // Uniform-vs-one-hot distillation arithmetic.
    {
        let uniform = RelationMap {
            values: vec![0.25; 4],
        };
        let one_hot = RelationMap {
            values: vec![1.0, 0.0, 0.0, 0.0],
        };
        let loss = ops::distill_loss(&uniform, &one_hot).unwrap();
        checks.push(Check::new(
            "distillation-arithmetic",
            (loss - 0.75).abs() <= 1e-12,
            format!("uniform vs one-hot over 4 pixels: {loss}"),
        ));
    }

    // Determinism of the forward pass.
    {
        let cfg = GiftConfig {
            encoder_channels: [4, 6, 8, 10],
            decoder_channels: [8, 6, 4],
            mlp_hidden: 6,
            ..GiftConfig::default()
        };
        let net = GiftNetwork::init(cfg, seed.wrapping_add(11)).unwrap();
        let pair = synthetic_pairs(1, 16, seed.wrapping_add(12)).remove(0);
        let a = net.harmonize(&pair.composite, &pair.mask).unwrap();
        let b = net.harmonize(&pair.composite, &pair.mask).unwrap();
        checks.push(Check::new(
            "forward-determinism",
            a == b,
            "two forward passes agree bit-for-bit".into(),
        ));
    }

    // Analytic gradients against central finite differences on a reduced
    // configuration (the acceptance suite runs the full toy widths). The
    // fixture seed is pinned: gradient correctness is seed-independent,
    // but the fixture must keep every rectified unit clear of its kink,
    // which the pinned seed guarantees (see the guards in
    // `gradient_check`).
    {
        let cfg = GiftConfig {
            encoder_channels: [4, 6, 8, 10],
            decoder_channels: [8, 6, 4],
            mlp_hidden: 6,
            ..GiftConfig::default()
        };
        match gradient_check(&cfg, 8, 3, 1e-4) {
            Ok(report) => checks.push(Check::new(
                "gradient-check",
                report.max_rel_err <= 1e-4,
                format!(
                    "max rel err {:.3e} over {} parameters (worst {}), {:.1}s",
                    report.max_rel_err,
                    report.parameter_count,
                    report.worst_segment,
                    report.elapsed_secs
                ),
            )),
            Err(e) => checks.push(Check::new("gradient-check", false, e.to_string())),
        }
    }

    checks
}

//! Two-stage toy training: pretrain and freeze the reconstruction branch,
//! then train the harmonization branch with the distillation-aware total
//! loss by plain full-batch gradient descent. Everything is seeded and
//! single-threaded, so trajectories are bit-reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gift::network::GiftNetwork;
use crate::raster::{BinaryMask, LinearImage};

/// One synthetic training sample.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub composite: LinearImage,
    pub real: LinearImage,
    pub mask: BinaryMask,
}

/// Loss trajectories of a training run. Entry 0 is the loss at the
/// initial parameters; entry `k` the loss after `k` updates.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub total_loss: Vec<f64>,
    pub l_har: Vec<f64>,
}

/// Smooth low-frequency image with channel values inside `(lo, hi)`:
/// per-channel base colors spanning most of the range plus gentle ramps.
fn smooth_image(rng: &mut ChaCha8Rng, size: usize, lo: f64, hi: f64) -> LinearImage {
    let span = hi - lo;
    let base = [
        lo + rng.gen_range(0.05..0.75) * span,
        lo + rng.gen_range(0.05..0.75) * span,
        lo + rng.gen_range(0.05..0.75) * span,
    ];
    let mut img = LinearImage::new(size, size).unwrap();
    for y in 0..size {
        for x in 0..size {
            let fx = x as f64 / size as f64;
            let fy = y as f64 / size as f64;
            img.set(
                x,
                y,
                [
                    (base[0] + 0.35 * span * fx).clamp(lo, hi),
                    (base[1] + 0.35 * span * fy).clamp(lo, hi),
                    (base[2] + 0.25 * span * fx * fy).clamp(lo, hi),
                ],
            );
        }
    }
    img
}

fn rect_mask(rng: &mut ChaCha8Rng, size: usize) -> BinaryMask {
    let x0 = rng.gen_range(0..size / 2);
    let y0 = rng.gen_range(0..size / 2);
    let x1 = rng.gen_range(x0 + 1..=size.min(x0 + size / 2 + 1));
    let y1 = rng.gen_range(y0 + 1..=size.min(y0 + size / 2 + 1));
    let mut mask = BinaryMask::filled(size, size, false).unwrap();
    for y in y0..y1 {
        for x in x0..x1 {
            mask.set(x, y, true);
        }
    }
    mask
}

/// Synthetic (composite, real, mask) pairs: real images are smooth
/// gradients, composites shift the foreground by a global per-channel
/// gain and offset.
pub fn synthetic_pairs(count: usize, size: usize, seed: u64) -> Vec<TrainingPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(crate::util::fnv1a64(b"synthetic-pairs"));
    (0..count)
        .map(|_| {
            let real = smooth_image(&mut rng, size, 0.1, 0.9);
            let mask = rect_mask(&mut rng, size);
            let gain = [
                rng.gen_range(0.75..1.25),
                rng.gen_range(0.75..1.25),
                rng.gen_range(0.75..1.25),
            ];
            let offset = [
                rng.gen_range(-0.12..0.12),
                rng.gen_range(-0.12..0.12),
                rng.gen_range(-0.12..0.12),
            ];
            let mut composite = real.clone();
            for y in 0..size {
                for x in 0..size {
                    if mask.get(x, y) {
                        let p = real.get(x, y);
                        composite.set(
                            x,
                            y,
                            [
                                (p[0] * gain[0] + offset[0]).clamp(0.0, 1.0),
                                (p[1] * gain[1] + offset[1]).clamp(0.0, 1.0),
                                (p[2] * gain[2] + offset[2]).clamp(0.0, 1.0),
                            ],
                        );
                    }
                }
            }
            TrainingPair {
                composite,
                real,
                mask,
            }
        })
        .collect()
}

/// Trains a site-free network to reconstruct the real images under L1
/// and returns it frozen (by value; nothing mutates it afterwards).
pub fn pretrain_reconstruction(
    mut net: GiftNetwork,
    reals: &[LinearImage],
    steps: usize,
    lr: f64,
) -> Result<GiftNetwork> {
    if !net.config.gift_sites.is_empty() {
        return Err(Error::Config(
            "the reconstruction branch must not carry GIFT sites".into(),
        ));
    }
    if reals.is_empty() {
        return Err(Error::Precondition("no reconstruction samples".into()));
    }
    let n = reals.len() as f64;
    let masks: Vec<BinaryMask> = reals
        .iter()
        .map(|img| BinaryMask::filled(img.width(), img.height(), true).unwrap())
        .collect();
    for step in 0..steps {
        let mut grad = vec![0.0; net.params.len()];
        let mut loss_sum = 0.0;
        for (img, mask) in reals.iter().zip(&masks) {
            let mut trace = net.forward(img, mask)?;
            let loss = trace.attach_reconstruction_loss(img)?;
            loss_sum += trace.loss_value(loss);
            let g = trace.parameter_gradient(loss);
            for (acc, gi) in grad.iter_mut().zip(&g) {
                *acc += gi / n;
            }
        }
        if !loss_sum.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite reconstruction loss at step {step}"
            )));
        }
        for (p, g) in net.params.data_mut().iter_mut().zip(&grad) {
            *p -= lr * g;
        }
    }
    Ok(net)
}

/// Plain gradient descent on the total loss with the reconstruction
/// branch frozen. Relation targets are computed once per pair up front
/// since the frozen branch never changes.
pub fn toy_train(
    net: &mut GiftNetwork,
    recon: &GiftNetwork,
    pairs: &[TrainingPair],
    steps: usize,
    lr: f64,
) -> Result<TrainResult> {
    if pairs.is_empty() {
        return Err(Error::Precondition("no training pairs".into()));
    }
    let targets: Vec<[Vec<f64>; 4]> = pairs
        .iter()
        .map(|p| recon.encoder_relations(&p.real, &p.mask))
        .collect::<Result<_>>()?;

    let n = pairs.len() as f64;
    let mut total_loss = Vec::with_capacity(steps + 1);
    let mut l_har = Vec::with_capacity(steps + 1);

    for step in 0..=steps {
        let mut grad = vec![0.0; net.params.len()];
        let mut step_total = 0.0;
        let mut step_har = 0.0;
        let last = step == steps;
        for (pair, target) in pairs.iter().zip(&targets) {
            if last {
                let breakdown = net.loss(&pair.composite, &pair.real, &pair.mask, target)?;
                step_total += breakdown.total / n;
                step_har += breakdown.l_har / n;
            } else {
                let (breakdown, g) =
                    net.loss_and_grad(&pair.composite, &pair.real, &pair.mask, target)?;
                step_total += breakdown.total / n;
                step_har += breakdown.l_har / n;
                for (acc, gi) in grad.iter_mut().zip(&g) {
                    *acc += gi / n;
                }
            }
        }
        if !step_total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite total loss at step {step}; aborting training"
            )));
        }
        total_loss.push(step_total);
        l_har.push(step_har);
        if !last {
            for (p, g) in net.params.data_mut().iter_mut().zip(&grad) {
                *p -= lr * g;
            }
        }
    }

    Ok(TrainResult { total_loss, l_har })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gift::network::GiftConfig;

    fn tiny_config() -> GiftConfig {
        GiftConfig {
            encoder_channels: [4, 4, 6, 8],
            decoder_channels: [6, 4, 4],
            mlp_hidden: 6,
            ..GiftConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_gives_flat_trajectory() {
        let cfg = tiny_config();
        let recon = GiftNetwork::init(cfg.without_gift(), 2).unwrap();
        let mut net = GiftNetwork::init(cfg, 1).unwrap();
        let pairs = synthetic_pairs(3, 8, 5);
        let result = toy_train(&mut net, &recon, &pairs, 5, 0.0).unwrap();
        assert_eq!(result.total_loss.len(), 6);
        for w in result.total_loss.windows(2) {
            assert_eq!(w[0], w[1]);
        }
    }

    #[test]
    fn same_seed_gives_identical_trajectories() {
        let cfg = tiny_config();
        let run = || {
            let recon = pretrain_reconstruction(
                GiftNetwork::init(cfg.without_gift(), 2).unwrap(),
                &synthetic_pairs(3, 8, 5)
                    .into_iter()
                    .map(|p| p.real)
                    .collect::<Vec<_>>(),
                3,
                0.05,
            )
            .unwrap();
            let mut net = GiftNetwork::init(cfg.clone(), 1).unwrap();
            let pairs = synthetic_pairs(3, 8, 5);
            toy_train(&mut net, &recon, &pairs, 4, 0.05).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.total_loss, b.total_loss);
        assert_eq!(a.l_har, b.l_har);
    }

    #[test]
    fn synthetic_pairs_are_valid_and_background_preserving() {
        let pairs = synthetic_pairs(8, 16, 11);
        assert_eq!(pairs.len(), 8);
        for p in &pairs {
            assert!(p.mask.count_true() > 0);
            for y in 0..16 {
                for x in 0..16 {
                    if !p.mask.get(x, y) {
                        assert_eq!(p.composite.get(x, y), p.real.get(x, y));
                    }
                }
            }
        }
    }

    #[test]
    fn training_reduces_loss_on_a_small_run() {
        let cfg = tiny_config();
        let pairs = synthetic_pairs(4, 8, 3);
        let reals: Vec<LinearImage> = pairs.iter().map(|p| p.real.clone()).collect();
        let recon = pretrain_reconstruction(
            GiftNetwork::init(cfg.without_gift(), 2).unwrap(),
            &reals,
            20,
            0.1,
        )
        .unwrap();
        let mut net = GiftNetwork::init(cfg, 1).unwrap();
        let result = toy_train(&mut net, &recon, &pairs, 30, 0.1).unwrap();
        let first = result.total_loss[0];
        let last = *result.total_loss.last().unwrap();
        assert!(
            last < first,
            "loss did not improve: {first} -> {last}"
        );
    }
}

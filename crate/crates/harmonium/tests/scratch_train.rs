// Temporary training calibration; deleted before commit.
use std::time::Instant;

use harmonium::gift::{
    pretrain_reconstruction, synthetic_pairs, toy_train, GiftConfig, GiftNetwork,
};
use harmonium::raster::LinearImage;

#[test]
#[ignore]
fn calibrate_training() {
    let config = GiftConfig::default();
    let pairs = synthetic_pairs(16, 8, 0xACCE07);
    let reals: Vec<LinearImage> = pairs.iter().map(|p| p.real.clone()).collect();

    for (recon_lr, lr) in [(0.05, 0.05), (0.1, 0.1), (0.1, 0.2), (0.1, 0.3)] {
        let t = Instant::now();
        let recon = pretrain_reconstruction(
            GiftNetwork::init(config.without_gift(), 101).unwrap(),
            &reals,
            150,
            recon_lr,
        )
        .unwrap();
        let mut net = GiftNetwork::init(config.clone(), 100).unwrap();
        match toy_train(&mut net, &recon, &pairs, 200, lr) {
            Ok(result) => {
                let initial = result.l_har[0];
                let final_har = *result.l_har.last().unwrap();
                println!(
                    "recon_lr {recon_lr} lr {lr}: L_har {initial:.5} -> {final_har:.5} \
                     ({:.1}% of initial), total {:.5} -> {:.5}, {:.1}s",
                    100.0 * final_har / initial,
                    result.total_loss[0],
                    result.total_loss.last().unwrap(),
                    t.elapsed().as_secs_f64()
                );
            }
            Err(e) => println!("recon_lr {recon_lr} lr {lr}: FAILED {e}"),
        }
    }
}

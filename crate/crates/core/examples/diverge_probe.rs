//! Scratch probe: watch loss components and parameter magnitudes while the
//! alignment variant trains, to see what blows up first.

use imbdg_core::data::{generate_synthetic, SyntheticSpec};
use imbdg_core::trainer::{lodo_splits, run_training, TrainConfig, Variant};

fn main() {
    let spec = SyntheticSpec::appendix_template(7);
    let ds = generate_synthetic(&spec, 7).unwrap();
    let (train, val, _) = lodo_splits(&ds, 2, 0, 5, 0).unwrap();
    let mut cfg = TrainConfig { variant: Variant::BodaCoupled, ..TrainConfig::default() };
    cfg.seed = 12345;
    for epochs in [10, 20, 30, 40, 45, 50, 55, 60] {
        cfg.epochs = epochs;
        match run_training(&cfg, &train, &val) {
            Ok(result) => {
                let last = result.history.last().unwrap();
                let max_w = result
                    .params
                    .layers()
                    .iter()
                    .flat_map(|l| l.weight.data().iter().chain(l.bias.iter()))
                    .fold(0.0f64, |m, v| m.max(v.abs()));
                eprintln!(
                    "epoch {:>3}: ce {:>9.4} aux {:>10.4} total {:>10.4} train_f1 {:.3} max|param| {:>10.3} skipped {}",
                    epochs, last.ce_loss, last.aux_loss, last.total_loss, last.train_f1_micro, max_w,
                    result.skipped_anchors
                );
            }
            Err(e) => {
                eprintln!("epoch {epochs}: DIVERGED: {e}");
                break;
            }
        }
    }
}

//! Scratch probe for the benchmark's directional behavior. Not part of the
//! published surface; run with `cargo run --example bench_probe --release`.

use imbdg_core::data::{generate_synthetic, SyntheticSpec};
use imbdg_core::trainer::{cross_validate, TrainConfig, Variant};

fn main() {
    let t0 = std::time::Instant::now();
    let spec = SyntheticSpec::appendix_template(7);
    let ds = generate_synthetic(&spec, 7).unwrap();
    eprintln!("dataset: {} samples, gen in {:?}", ds.len(), t0.elapsed());

    let seeds: Vec<u64> = std::env::args()
        .nth(1)
        .map(|s| (0..s.parse::<u64>().unwrap()).collect())
        .unwrap_or_else(|| vec![0]);

    for variant in [Variant::Erm, Variant::BodaDecoupled, Variant::BodaCoupled] {
        let mut macro_sum = 0.0;
        let mut micro_sum = 0.0;
        let mut src_micro_sum = 0.0;
        let mut n = 0.0;
        for &seed in &seeds {
            let cfg = TrainConfig { variant, ..TrainConfig::default() };
            let t = std::time::Instant::now();
            let outcome = cross_validate(&cfg, &ds, 5, 2, seed, 5).unwrap();
            let agg = &outcome.aggregate.metrics;
            eprintln!(
                "{:>15} seed {seed}: target macro {:.4}±{:.4} micro {:.4} | src micro {:.4} macro {:.4} | {:?}",
                variant.as_str(),
                agg["target_test_f1_macro"].mean,
                agg["target_test_f1_macro"].std,
                agg["target_test_f1_micro"].mean,
                agg["source_val_f1_micro"].mean,
                agg["source_val_f1_macro"].mean,
                t.elapsed()
            );
            macro_sum += agg["target_test_f1_macro"].mean;
            micro_sum += agg["target_test_f1_micro"].mean;
            src_micro_sum += agg["source_val_f1_micro"].mean;
            n += 1.0;
        }
        eprintln!(
            "{:>15} OVERALL: target macro {:.4} micro {:.4} src micro {:.4}",
            variant.as_str(),
            macro_sum / n,
            micro_sum / n,
            src_micro_sum / n
        );
    }
    eprintln!("total {:?}", t0.elapsed());
}

//! Trains the one-to-many model and the module ablations on a reduced
//! benchmark and compares them with the tuned one-to-one baseline.

use vic::experiment::{benchmark_train_config, train_and_evaluate, tuned_o2o, BenchmarkConfig, EvalConfig, Variant, O2O_THRESHOLDS};
use vic::training::TrainConfig;

fn main() -> vic::Result<()> {
    let seed = 0;
    let bench = BenchmarkConfig {
        videos: 8,
        train_videos: 12,
        ..BenchmarkConfig::default()
    };
    let test = bench.eval_set(seed)?;
    let train = bench.train_set(seed)?;
    let eval = EvalConfig::default();

    let base = tuned_o2o(&test, &O2O_THRESHOLDS, &eval)?;
    println!("{:<14} WRAE {:>7.2}%  (threshold {})", "o2o", base.report.wrae, base.threshold);

    let cfg = TrainConfig {
        epochs: 10,
        ..benchmark_train_config(seed)
    };
    for v in Variant::GRID {
        let (_, r) = train_and_evaluate(&v.apply(&cfg), &train, &test, &eval)?;
        println!("{:<14} WRAE {:>7.2}%  MAE {:>6.2}", v.name(), r.wrae, r.mae);
    }
    Ok(())
}

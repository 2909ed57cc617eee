//! Video-level metrics: a hand-checked WRAE, then a tuned one-to-one
//! baseline scored on simulated scenes with its density breakdown.

use vic::experiment::{tuned_o2o, BenchmarkConfig, EvalConfig, O2O_THRESHOLDS};
use vic::metrics::{mae_mse, wrae, MseConvention, VideoResult};

fn main() -> vic::Result<()> {
    let hand = vec![
        VideoResult {
            id: "short".into(),
            predicted: 110,
            ground_truth: 100,
            length: 10,
        },
        VideoResult {
            id: "long".into(),
            predicted: 190,
            ground_truth: 200,
            length: 30,
        },
    ];
    let (mae, rmse) = mae_mse(&hand, MseConvention::Root)?;
    println!("hand case: MAE {mae}, RMSE {rmse}, WRAE {}%", wrae(&hand)?);

    let bench = BenchmarkConfig {
        videos: 8,
        ..BenchmarkConfig::default()
    };
    let seqs = bench.eval_set(0)?;
    let eval = EvalConfig::default();
    let tuned = tuned_o2o(&seqs, &O2O_THRESHOLDS, &eval)?;
    for (t, w) in &tuned.sweep {
        println!("O2O threshold {t}: WRAE {w:.2}%");
    }
    let r = &tuned.report;
    println!("best threshold {}: MAE {:.2}, RMSE {:.2}, WRAE {:.2}%", tuned.threshold, r.mae, r.mse, r.wrae);
    for b in &r.buckets {
        println!("  {}: {} videos, MAE {:.2}", b.label(), b.videos, b.mae);
    }
    for v in &r.videos {
        println!("  {} predicted {} of {}", v.id, v.predicted, v.ground_truth);
    }

    let dir = std::env::temp_dir().join("vic-example-report");
    std::fs::create_dir_all(&dir).map_err(|e| vic::Error::io(&dir, e))?;
    r.write_json(&dir.join("report.json"))?;
    r.write_svg(&dir.join("density.svg"))?;
    println!("report in {}", dir.display());
    Ok(())
}

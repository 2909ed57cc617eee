//! Trains the full matcher on a few simulated scenes, checks its gradients
//! against finite differences and saves a checkpoint.

use vic::checkpoint::Checkpoint;
use vic::simulator::{generate, SimConfig};
use vic::training::{build_examples, grad_check, train_on_examples, TrainConfig};

fn main() -> vic::Result<()> {
    let scenes = (0..4)
        .map(|k| {
            generate(&SimConfig {
                num_frames: 45,
                group_rate: 0.15 + 0.1 * k as f64,
                occlusion_dropout: 0.2,
                seed: 100 + k,
                ..SimConfig::default()
            })
        })
        .collect::<vic::Result<Vec<_>>>()?;
    let cfg = TrainConfig {
        epochs: 8,
        ..TrainConfig::default()
    };
    let examples = build_examples(&scenes, &cfg)?;
    println!("{} frame pairs", examples.len());

    let init = vic::model::ModelParams::init(&cfg.model, cfg.seed)?;
    let check = grad_check(&init, &cfg, &examples[..1], 1e-5, 100, 0)?;
    println!(
        "gradient check: max relative error {:.2e} over {} coordinates",
        check.max_rel_error, check.checked
    );

    let outcome = train_on_examples(&examples, &cfg, Some(init))?;
    println!("epoch      l_ot     l_cls      l_kl   l_total");
    for e in &outcome.curve {
        println!("{:>5} {:>9.4} {:>9.4} {:>9.4} {:>9.4}", e.epoch, e.l_ot, e.l_cls, e.l_kl, e.l_total);
    }

    let path = std::env::temp_dir().join("vic-example-checkpoint.json");
    Checkpoint::new(&outcome.params, &cfg, outcome.steps, None).save(&path)?;
    let restored = Checkpoint::load(&path)?.params()?;
    assert_eq!(restored, outcome.params);
    println!("{} steps, checkpoint at {}", outcome.steps, path.display());
    Ok(())
}

//! Runs the attention encoder on one frame pair and inspects the four
//! sub-blocks of every head plus the averaged cross-frame block.

use vic::dataset::sample_pairs;
use vic::featurizer::{embed_frame, FeaturizerParams};
use vic::icg;
use vic::model::{ModelConfig, ModelParams};
use vic::simulator::{generate, SimConfig};

fn main() -> vic::Result<()> {
    let seq = generate(&SimConfig {
        num_frames: 10,
        group_rate: 0.15,
        seed: 2,
        ..SimConfig::default()
    })?;
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg, 0)?;
    let feat = FeaturizerParams {
        projection: params.featurizer.clone(),
        d_pe: cfg.d_pe,
    };

    let pairs = sample_pairs(&seq, 3.0)?;
    let (prev, curr) = pairs[0];
    let out = icg::run(&embed_frame(prev, &feat)?, &embed_frame(curr, &feat)?, &params.icg, &cfg.icg)?;
    println!("m = {}, n = {}", prev.len(), curr.len());

    for (layer, maps) in out.maps.iter().enumerate() {
        for h in 0..maps.heads.len() {
            let b = maps.blocks(h);
            let worst = maps.heads[h]
                .rows()
                .into_iter()
                .map(|r| (r.sum() - 1.0).abs())
                .fold(0.0, f64::max);
            println!(
                "layer {layer} head {h}: prev {:?} cls {:?} match {:?} curr {:?}, max |row sum - 1| {worst:.1e}",
                b.prev.dim(),
                b.cls.dim(),
                b.matched.dim(),
                b.curr.dim()
            );
            assert_eq!(b.reassemble(), maps.heads[h]);
        }
    }

    // Each current pedestrian's attention mass on the previous frame.
    let mass: Vec<String> = out.abar.rows().into_iter().map(|r| format!("{:.2}", r.sum())).collect();
    println!("A_match row mass: {}", mass.join(" "));
    println!("context-informed tokens: prev {:?}, curr {:?}", out.prev.dim(), out.curr.dim());
    Ok(())
}

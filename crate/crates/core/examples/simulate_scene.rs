//! Generates one synthetic scene, summarizes it and writes it as JSONL.

use vic::dataset::{ground_truth_total, load_sequence, write_sequence};
use vic::simulator::{descriptor_stats, generate, SimConfig};

fn main() -> vic::Result<()> {
    let cfg = SimConfig {
        num_frames: 60,
        group_rate: 0.3,
        occlusion_dropout: 0.2,
        seed: 7,
        ..SimConfig::default()
    };
    let seq = generate(&cfg)?;
    let sizes: Vec<usize> = seq.frames.iter().map(|f| f.len()).collect();
    println!(
        "{} frames, {} to {} pedestrians per frame",
        seq.frames.len(),
        sizes.iter().min().unwrap(),
        sizes.iter().max().unwrap()
    );

    let stats = descriptor_stats(&seq)?;
    println!(
        "descriptor cosine: same group {:.3} over {} pairs, different groups {:.3} over {} pairs",
        stats.within_mean, stats.within_pairs, stats.between_mean, stats.between_pairs
    );

    // Occluded pedestrians drop out and return, so the two totals part ways.
    for sigma in [1.0, 3.0, 6.0] {
        let gt = ground_truth_total(&seq, sigma)?;
        println!(
            "sigma {sigma}: {} sampled frames, unique {} vs first frame plus inflows {}",
            gt.sampled_frames, gt.unique, gt.pairwise
        );
    }

    let path = std::env::temp_dir().join("vic-example-scene.jsonl");
    write_sequence(&seq, &path)?;
    let back = load_sequence(&path, Some(cfg.descriptor_dim))?;
    assert_eq!(back.frames, seq.frames);
    println!("wrote {}", path.display());
    Ok(())
}

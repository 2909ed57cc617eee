//! Group labels for a simulated pair and the entropic transport plan between
//! the two frames' tokens.

use ndarray::Array2;
use vic::baselines::cosine_similarity;
use vic::dataset::{derive_flow_labels, sample_pairs};
use vic::featurizer::frame_inputs;
use vic::simulator::{generate, SimConfig};
use vic::training::{build_group_labels, sinkhorn, GroupAnchor};

fn main() -> vic::Result<()> {
    let seq = generate(&SimConfig {
        num_frames: 10,
        group_rate: 0.2,
        seed: 4,
        ..SimConfig::default()
    })?;
    let pairs = sample_pairs(&seq, 3.0)?;
    let (prev, curr) = pairs[1];
    let gt = derive_flow_labels(prev, curr)?;
    println!(
        "{} shared identities, inflow {}, outflow {}",
        gt.shared_pairs.len(),
        gt.inflow_count,
        gt.outflow_count
    );
    for radius in [0.02, 0.1, 0.2] {
        let y = build_group_labels(prev, curr, &gt, radius, GroupAnchor::Curr)?;
        println!("radius {radius}: {} positive pairs", y.positives());
    }

    let a = frame_inputs(prev, 16, 16)?;
    let b = frame_inputs(curr, 16, 16)?;
    let cost = cosine_similarity(&a, &b)?.mapv(|s| 1.0 - s);
    let (m, n) = cost.dim();
    let mu = vec![1.0 / m as f64; m];
    let nu = vec![1.0 / n as f64; n];
    for eps in [0.5, 0.05] {
        let sol = sinkhorn(&cost, &mu, &nu, eps, 5000, 1e-9)?;
        let spread = sol.plan.iter().filter(|&&v| v > 0.1 / (m * n) as f64).count();
        println!(
            "eps {eps}: {} iterations, residual {:.1e}, cost {:.4}, {spread} of {} cells carry mass",
            sol.iterations,
            sol.residual,
            (&sol.plan * &cost).sum(),
            m * n
        );
    }
    let uniform = sinkhorn(&Array2::ones((m, n)), &mu, &nu, 0.1, 100, 1e-12)?;
    println!("uniform cost gives the product plan: {:.3e}", uniform.plan[[0, 0]] - mu[0] * nu[0]);
    Ok(())
}

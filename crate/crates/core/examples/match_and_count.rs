//! One-to-many decoding versus one-to-one assignment on a hand-written
//! probability matrix, and the flow counts each implies.

use ndarray::array;
use vic::baselines::hungarian;
use vic::ompm::{aggregate_video, check_constraints, count_flows, decode_matches, CountMode, MatchMode, MatchProbabilities};

fn main() -> vic::Result<()> {
    // Previous pedestrians 0 and 1 walk together; 2 leaves. Current 2 is new.
    let p = MatchProbabilities::new(array![
        [0.92, 0.71, 0.05],
        [0.64, 0.88, 0.10],
        [0.08, 0.12, 0.20],
    ])?;

    let o2m = decode_matches(&p, 0.5, 2);
    println!("O2M pairs (prev, curr): {:?}", o2m.pairs());
    println!("  O2M constraints hold: {}", check_constraints(&o2m, MatchMode::O2M, 2).satisfied);
    println!("  O2O constraints hold: {}", check_constraints(&o2m, MatchMode::O2O, 1).satisfied);

    let assignment = hungarian(&p.0.mapv(|v| 1.0 - v))?;
    println!("O2O assignment: {:?}", assignment.pairs);

    for mode in [CountMode::Dedup, CountMode::Literal] {
        let c = count_flows(&p, mode, 0.5);
        println!("{mode:?}: inflow {}, outflow {}, shared {}", c.inflow, c.outflow, c.shared);
    }

    let n0 = 3;
    let inflows = [count_flows(&p, CountMode::Dedup, 0.5).inflow, 2, 0, 1];
    println!("video total = {n0} + {inflows:?} = {}", aggregate_video(n0, &inflows));
    Ok(())
}

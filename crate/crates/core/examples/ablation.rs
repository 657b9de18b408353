//! Runs the ablation arms for a few seeds and prints one CSV row per seed.
//!
//! `cargo run --release -p unite-core --example ablation -- 3`

use std::time::Instant;

use unite::experiment::{run_ablations, AblationResult, ExperimentConfig};

fn main() -> unite::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    println!("{}", AblationResult::CSV_HEADER);
    for seed in 0..seeds {
        let t = Instant::now();
        let r = run_ablations(ExperimentConfig::desk(seed))?;
        println!("{}  # {:.1}s", r.csv_row(), t.elapsed().as_secs_f64());
    }
    Ok(())
}

//! Trains the full model and its modules-off baseline on the same corpus and
//! compares test mAP and convergence.
//!
//! `cargo run --release --example paired_benchmark -- [seed] [train_scenes] [epochs]`

use hoi_query::experiment::{run_pair, BenchmarkConfig};

fn main() -> hoi_query::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u64>().expect("numeric argument"));
    let seed = args.next().unwrap_or(1);
    let mut bench = BenchmarkConfig::default();
    if let Some(n) = args.next() {
        bench.train_scenes = n as usize;
    }
    if let Some(e) = args.next() {
        bench.train.epochs = e as usize;
    }
    let p = run_pair(seed, &bench)?;
    for arm in [&p.enhanced, &p.baseline] {
        println!(
            "{:<9} full {:.4}  rare {:.4}  non-rare {:.4}  convergence epoch {:?}",
            arm.label, arm.test.map_full, arm.test.map_rare, arm.test.map_nonrare, arm.convergence_epoch
        );
    }
    println!("gain: full {:+.4}  rare {:+.4}  non-rare {:+.4}", p.gain_full(), p.gain_rare(), p.gain_nonrare());
    Ok(())
}

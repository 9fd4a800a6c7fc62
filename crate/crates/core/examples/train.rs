//! Trains a hierarchy on a small lattice and prints the ESS trace.
//!
//! `cargo run --release --example train -- [L] [k] [l] [dtau] [epochs-per-stage] [batch]`

use han_rdm::lattice::ModelParams;
use han_rdm::training::{Stage, TrainConfig, Trainer};

fn main() -> han_rdm::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let chain: usize = arg(0, "4").parse().unwrap();
    let k: usize = arg(1, "2").parse().unwrap();
    let l: usize = arg(2, "1").parse().unwrap();
    let dtau: f64 = arg(3, "0.4").parse().unwrap();
    let epochs: usize = arg(4, "500").parse().unwrap();
    let batch: usize = arg(5, "256").parse().unwrap();

    let params = ModelParams::new(1.0, 1.0, dtau, chain, k, l)?;
    let mut config = TrainConfig::desk();
    config.batch_size = batch;
    config.stages = [3e-3, 1e-3, 1e-4, 1e-5].iter().map(|&lr| Stage { lr, epochs }).collect();
    config.ess_interval = (epochs / 2).max(1);

    let mut trainer = Trainer::new(params, config)?;
    let report = trainer.run()?;
    for (epoch, ess) in report.ess_trace() {
        println!("epoch {epoch:>6}  ess {ess:.4}");
    }
    println!("final ess {:.4} after {:.1} s", report.final_ess, report.wall_seconds);
    Ok(())
}

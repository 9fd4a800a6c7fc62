//! The full file-based workflow on a small configuration.
//!
//! `cargo run --release --example pipeline -- [config.toml]`

use han_rdm::pipeline::{cmd_entropy, cmd_estimate, cmd_oracle, cmd_train, RunConfig, RunOptions};

fn main() -> han_rdm::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cfg = match std::env::args().nth(1) {
        Some(path) => RunConfig::load(path.as_ref())?,
        None => {
            let mut cfg = RunConfig::from_toml(han_rdm::verify::TINY_CONFIG)?;
            let root = std::env::temp_dir().join("han-rdm-pipeline-example");
            cfg.paths.checkpoints = root.join("checkpoints");
            cfg.paths.weights = root.join("weights");
            cfg.paths.reports = root.join("reports");
            cfg
        }
    };
    let opts = RunOptions { jobs: 1, force: false };
    for (point, action) in cmd_train(&cfg, opts)? {
        println!("train {}: {action:?}", point.name());
    }
    cmd_estimate(&cfg, opts)?;
    cmd_oracle(&cfg)?;
    for row in cmd_entropy(&cfg)? {
        println!("{row:?}");
    }
    println!("outputs in {}", cfg.paths.reports.display());
    Ok(())
}

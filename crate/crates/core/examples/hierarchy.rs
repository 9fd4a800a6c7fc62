//! Prints the hierarchical decomposition of a lattice.
//!
//! `cargo run --example hierarchy -- [L] [k] [l]`

use han_rdm::han::build_hierarchy;
use han_rdm::lattice::ModelParams;

fn main() -> han_rdm::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let chain = args.first().copied().unwrap_or(8);
    let k = args.get(1).copied().unwrap_or(2);
    let l = args.get(2).copied().unwrap_or(2);
    let plan = build_hierarchy(&ModelParams::new(1.0, 1.0, 0.2, chain, k, l)?)?;
    print!("{}", plan.dump());
    println!(
        "{} groups, {} distinct networks, {} network spins, {} heatbath spins",
        plan.groups().len(),
        plan.net_shapes().len(),
        plan.net_spin_count(),
        plan.heatbath_count()
    );
    Ok(())
}

//! Classical couplings and the energy of a random configuration.
//!
//! `cargo run --example couplings -- [dtau] [L] [k]`

use han_rdm::lattice::{couplings, energy, ModelParams, SpinConfig};
use rand::{Rng, SeedableRng};

fn main() -> han_rdm::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let dtau = args.first().copied().unwrap_or(0.2);
    let chain = args.get(1).map_or(8, |&x| x as usize);
    let k = args.get(2).map_or(2, |&x| x as usize);

    let params = ModelParams::new(1.0, 1.0, dtau, chain, k, 1)?;
    let c = couplings(&params)?;
    println!("dtau = {dtau}: J_s = {:.10}, J_tau = {:.10}", c.j_s, c.j_tau);
    println!("lattice {} x {} (m = {}, beta = {})", params.m() + 1, chain, params.m(), params.beta());

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let mut config = SpinConfig::new(params.m(), chain)?;
    for r in 0..=params.m() {
        for col in 0..chain {
            config.set(r, col, if rng.random::<bool>() { 1 } else { -1 });
        }
    }
    println!("random configuration energy {:.6}", energy(&config, &c));
    println!("all-up energy {:.6}", energy(&SpinConfig::from_spins(params.m(), chain, vec![1; (params.m() + 1) * chain])?, &c));
    Ok(())
}

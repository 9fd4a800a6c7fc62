//! A masked autoregressive network: conditionals, sampling and normalization.

use han_rdm::autoreg::{all_assignments, MaskedNet};
use rand::SeedableRng;

fn main() -> han_rdm::Result<()> {
    let (n_ctx, n_out) = (3, 5);
    let net = MaskedNet::new(n_ctx, n_out, 4 * n_out, 1)?;
    println!("{} inputs, {} outputs, {} hidden, {} parameters", net.n_in(), net.n_out(), net.hidden(), net.n_params());
    println!("output order {:?}", net.order());

    let ctx = [1i8, -1, 1];
    let total: f64 = all_assignments(n_out).map(|s| net.log_prob(&ctx, &s).exp()).sum();
    println!("sum of q over all {} assignments: {total:.15}", 1 << n_out);

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    for _ in 0..4 {
        let g = net.sample_group(&ctx, &mut rng);
        println!("sample {:?}  log q = {:.6}", g.spins, g.log_q);
    }
    Ok(())
}

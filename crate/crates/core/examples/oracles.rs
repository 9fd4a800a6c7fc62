//! Exact references: enumeration, transfer matrix, ground state and CFT.

use han_rdm::lattice::ModelParams;
use han_rdm::oracle::{cft_entropy, enumerate_rdm, exact_ground_state_rdm, transfer_matrix_rdm};
use han_rdm::spectral::EntropyOrder;

fn main() -> han_rdm::Result<()> {
    let small = ModelParams::new(1.0, 1.0, 0.4, 4, 1, 2)?;
    let (a, b) = (enumerate_rdm(&small)?, transfer_matrix_rdm(&small)?);
    let diff = (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).map(|(i, j)| (a.rho.get(i, j) - b.rho.get(i, j)).abs()).fold(0.0, f64::max);
    println!("L=4 k=1 l=2: enumeration vs transfer matrix max |diff| = {diff:.2e}");

    println!("\nclassical approach to the ground state, L=8 l=2, dtau=0.2");
    for k in [2, 4, 6, 8] {
        let rdm = transfer_matrix_rdm(&ModelParams::new(1.0, 1.0, 0.2, 8, k, 2)?)?;
        let s = han_rdm::estimator::analyze(&rdm.rho, &[EntropyOrder::VonNeumann])?.1[0].value;
        println!("  k = {k}: S_vN = {s:.6}");
    }

    println!("\nground state at h = J = 1, L = 8");
    for l in 1..=4 {
        let gs = exact_ground_state_rdm(8, l, 1.0, 1.0)?;
        let cft = cft_entropy(8, l, EntropyOrder::VonNeumann, None)?;
        println!("  l = {l}: S_vN = {:.6}  S_2 = {:.6}  CFT {cft:.6}", gs.von_neumann, gs.entropy(EntropyOrder::Renyi(2.0))?);
    }
    Ok(())
}

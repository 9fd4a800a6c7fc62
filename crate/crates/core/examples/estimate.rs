//! Trains a small hierarchy, estimates the reduced density matrix by
//! importance sampling and compares it with the transfer-matrix value.

use han_rdm::estimator::{estimate_rdm, EstimatorConfig};
use han_rdm::lattice::{couplings, ModelParams};
use han_rdm::oracle::transfer_matrix_rdm;
use han_rdm::spectral::EntropyOrder;
use han_rdm::training::{train, TrainConfig};

fn main() -> han_rdm::Result<()> {
    let params = ModelParams::new(1.0, 1.0, 0.4, 4, 2, 1)?;
    let (report, nets) = train(&params, &TrainConfig::desk())?;
    println!("trained in {:.1} s, ESS {:.3}", report.wall_seconds, report.final_ess);

    let plan = han_rdm::han::build_hierarchy(&params)?;
    let config = EstimatorConfig { n_samples: 100_000, bootstrap: 200, ..EstimatorConfig::default() };
    let (est, _) = estimate_rdm(&plan, &nets, &couplings(&params)?, &config, 1)?;
    let exact = transfer_matrix_rdm(&params)?;

    for mu in 0..2 {
        for nu in 0..2 {
            println!(
                "rho[{mu}{nu}] = {:.6} +- {:.6}   exact {:.6}",
                est.rho.get(mu, nu),
                est.err.get(mu, nu),
                exact.rho.get(mu, nu)
            );
        }
    }
    let s = est.von_neumann();
    let exact_s = han_rdm::estimator::analyze(&exact.rho, &[EntropyOrder::VonNeumann])?.1[0].value;
    println!("S_vN = {:.6} +- {:.6}   exact {exact_s:.6}", s.value, s.error);
    Ok(())
}

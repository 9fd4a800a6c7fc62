//! Acceptance checks. Each returns an [`Outcome`] with the measured figures;
//! none of them panics on a failed comparison.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;

use crate::autoreg::{all_assignments, MaskedNet};
use crate::error::Result;
use crate::estimator::{self, EstimatorConfig};
use crate::extrapolate::{fit_combined, EntropySeries, SeriesPoint};
use crate::han::heatbath_logprob;
use crate::lattice::{couplings, energy, BasisState, CouplingSet, ModelParams, Site, SpinConfig};
use crate::oracle::{self, enumerate_rdm, transfer_matrix_rdm};
use crate::pipeline::{self, RunConfig, RunOptions};
use crate::rng;
use crate::spectral::{self, EntropyOrder, Spectrum};
use crate::training::{loss_batch, sample_batch, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Outcome {
    pub fn line(&self) -> String {
        format!(
            "[{}] criterion {:>2} {:<28} {} ({:.1} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.seconds
        )
    }
}

fn timed(id: u32, name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Outcome {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(x) => x,
        Err(e) => (false, format!("error: {e}")),
    };
    Outcome { id, name, passed, detail, seconds: start.elapsed().as_secs_f64() }
}

/// Enumeration and transfer matrix agree on every small lattice.
pub fn oracle_cross_validation() -> Outcome {
    timed(1, "oracle cross-validation", || {
        let mut worst: f64 = 0.0;
        for (chain, k) in [(3, 1), (3, 2), (4, 1)] {
            for l in 1..chain {
                let p = ModelParams::new(1.0, 1.0, 0.4, chain, k, l)?;
                let (a, b) = (enumerate_rdm(&p)?, transfer_matrix_rdm(&p)?);
                for (x, y) in a.rho.data().iter().zip(b.rho.data()) {
                    worst = worst.max(((x - y) / y).abs());
                }
                // relative deviation of Z_{μν} from the difference of logs
                for (x, y) in a.log_z_elements.data().iter().zip(b.log_z_elements.data()) {
                    worst = worst.max((x - y).exp_m1().abs());
                }
            }
        }
        Ok((worst <= 1e-10, format!("max relative deviation {worst:.2e} (tol 1e-10)")))
    })
}

/// Heatbath conditionals equal Boltzmann flip ratios.
pub fn heatbath_exactness() -> Outcome {
    timed(2, "heatbath exactness", || {
        let mut r = rng::stream(2, &[]);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let c = CouplingSet::from_raw(r.random_range(0.2..2.0), r.random_range(0.2..2.0), r.random_range(0.05..0.8))?;
            let spins = (0..9).map(|_| if r.random::<bool>() { 1 } else { -1 }).collect();
            let mut cfg = SpinConfig::from_spins(2, 3, spins)?;
            let site = Site::new(1, 1);
            cfg.set(1, 1, 1);
            let (lp_up, e_up) = (heatbath_logprob(&cfg, site, &c)?, energy(&cfg, &c));
            cfg.set(1, 1, -1);
            let (lp_dn, e_dn) = (heatbath_logprob(&cfg, site, &c)?, energy(&cfg, &c));
            let boltzmann_up = 1.0 / (1.0 + (e_up - e_dn).exp());
            worst = worst.max((lp_up.exp() - boltzmann_up).abs()).max((lp_up.exp() + lp_dn.exp() - 1.0).abs());
        }
        Ok((worst <= 1e-12, format!("max deviation {worst:.2e} over 1000 neighbourhoods (tol 1e-12)")))
    })
}

/// Backpropagated gradient against central differences on a 6-spin net.
pub fn gradient_correctness() -> Outcome {
    timed(3, "gradient correctness", || {
        let mut net = MaskedNet::new(3, 6, 18, 31)?;
        net.perturb(0.3, 32);
        let mut r = rng::stream(3, &[]);
        let rand_spins = |r: &mut rng::Rng, n: usize| -> Vec<i8> { (0..n).map(|_| if r.random::<bool>() { 1 } else { -1 }).collect() };
        let data: Vec<(Vec<i8>, Vec<i8>, f64)> =
            (0..8).map(|_| (rand_spins(&mut r, 3), rand_spins(&mut r, 6), r.random_range(-1.0..1.0))).collect();
        let batch: Vec<(&[i8], &[i8], f64)> = data.iter().map(|(c, s, w)| (c.as_slice(), s.as_slice(), *w)).collect();
        let grad = net.grad_loss(&batch)?;
        let objective = |n: &MaskedNet| batch.iter().map(|(c, s, w)| w * n.log_prob(c, s)).sum::<f64>();
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        let mut fd = vec![0.0; grad.len()];
        for j in 0..grad.len() {
            let mut plus = net.clone();
            plus.params_mut()[j] += h;
            let mut minus = net.clone();
            minus.params_mut()[j] -= h;
            fd[j] = (objective(&plus) - objective(&minus)) / (2.0 * h);
            scale = scale.max(fd[j].abs());
        }
        for j in 0..grad.len() {
            worst = worst.max((grad[j] - fd[j]).abs() / fd[j].abs().max(1e-2 * scale));
        }
        Ok((worst <= 1e-4, format!("max relative error {worst:.2e} over {} parameters (tol 1e-4)", grad.len())))
    })
}

/// Exhaustive normalization of random nets over groups of up to 12 spins.
pub fn normalization() -> Outcome {
    timed(4, "normalization", || {
        let mut worst: f64 = 0.0;
        for n_out in 1..=12 {
            let mut net = MaskedNet::new(5, n_out, 2 * n_out, 40 + n_out as u64)?;
            net.perturb(0.5, n_out as u64);
            let mut r = rng::stream(4, &[n_out as u64]);
            let ctx: Vec<i8> = (0..5).map(|_| if r.random::<bool>() { 1 } else { -1 }).collect();
            let total: f64 = all_assignments(n_out).map(|s| net.log_prob(&ctx, &s).exp()).sum();
            worst = worst.max((total - 1.0).abs());
        }
        Ok((worst <= 1e-8, format!("max |sum - 1| = {worst:.2e} for groups of 1..12 spins (tol 1e-8)")))
    })
}

/// Reference lattice of the stochastic checks.
pub fn reference_params() -> ModelParams {
    ModelParams::new(1.0, 1.0, 0.4, 4, 2, 1).expect("valid")
}

/// Training schedule of the stochastic checks on the reference lattice.
pub fn reference_training() -> TrainConfig {
    TrainConfig { seed: 2024, ..TrainConfig::desk() }
}

/// Per-pair variational bound after every training stage.
pub fn variational_bound() -> Outcome {
    timed(5, "variational bound", || {
        let p = reference_params();
        let c = couplings(&p)?;
        let exact = transfer_matrix_rdm(&p)?;
        let tc = reference_training();
        let mut trainer = Trainer::new(p, tc.clone())?;
        let d = p.rdm_dim();
        let mut ok = true;
        let mut worst = f64::INFINITY;
        for (si, stage) in tc.stages.iter().enumerate() {
            trainer.run_epochs(stage.epochs)?;
            for i in 0..d {
                for j in 0..d {
                    let (mu, nu) = (BasisState::from_index(i, p.subsystem)?, BasisState::from_index(j, p.subsystem)?);
                    let batch = sample_batch(trainer.plan(), trainer.nets(), &c, Some((&mu, &nu)), 4096, tc.seed, &[50, si as u64, i as u64, j as u64]);
                    let loss = loss_batch(trainer.plan(), trainer.nets(), &batch)?;
                    let se = loss.f_std / (batch.len() as f64).sqrt();
                    let bound = -exact.log_z_elements.get(i, j);
                    let margin = (loss.f_mean - bound) / se.max(f64::MIN_POSITIVE);
                    worst = worst.min(margin);
                    ok &= loss.f_mean >= bound - 3.0 * se;
                }
            }
        }
        Ok((ok, format!("min (F_q + ln Z)/se = {worst:.2} over {} stages x {} pairs (must be >= -3)", tc.stages.len(), d * d)))
    })
}

/// Importance-sampled matrix against the transfer matrix at `N_s = 10^6`.
pub fn nis_correctness() -> Outcome {
    nis_correctness_with(1_000_000, 800)
}

pub fn nis_correctness_with(n_samples: usize, bootstrap: usize) -> Outcome {
    timed(6, "NIS correctness", || {
        let p = reference_params();
        let c = couplings(&p)?;
        let exact = transfer_matrix_rdm(&p)?;
        let mut trainer = Trainer::new(p, reference_training())?;
        trainer.run()?;
        let config = EstimatorConfig { n_samples, bootstrap, ..Default::default() };
        let (est, _) = estimator::estimate_rdm(trainer.plan(), trainer.nets(), &c, &config, 6)?;
        let d = p.rdm_dim();
        let (mut max_pull, mut max_rel): (f64, f64) = (0.0, 0.0);
        for i in 0..d {
            for j in 0..d {
                let (x, y) = (est.rho.get(i, j), exact.rho.get(i, j));
                max_pull = max_pull.max((x - y).abs() / est.err.get(i, j));
                max_rel = max_rel.max(((x - y) / y).abs());
            }
        }
        let min_ess = est.ess.data().iter().copied().fold(f64::INFINITY, f64::min);
        let ok = max_pull <= 3.0 && max_rel <= 0.01 && min_ess >= 0.05;
        Ok((ok, format!("max |dev|/sigma {max_pull:.2} (<= 3), max rel dev {max_rel:.2e} (<= 1e-2), min ESS {min_ess:.3} (>= 0.05)")))
    })
}

fn random_spectrum(r: &mut rng::Rng, d: usize) -> Spectrum {
    let raw: Vec<f64> = (0..d).map(|_| -r.random::<f64>().max(1e-300).ln()).collect();
    let total: f64 = raw.iter().sum();
    let mut eigenvalues: Vec<f64> = raw.iter().map(|x| x / total).collect();
    eigenvalues.sort_by(|a, b| b.total_cmp(a));
    Spectrum { eigenvalues, errors: None }
}

/// Closed-form entropy identities.
pub fn entropy_identities() -> Outcome {
    timed(7, "entropy identities", || {
        let mut worst_id: f64 = 0.0;
        for l in 1..=4 {
            let d = 1usize << l;
            let mut pure = vec![0.0; d];
            pure[0] = 1.0;
            let pure = Spectrum { eigenvalues: pure, errors: None };
            let flat = Spectrum { eigenvalues: vec![1.0 / d as f64; d], errors: None };
            let target = l as f64 * std::f64::consts::LN_2;
            for o in [EntropyOrder::VonNeumann, EntropyOrder::Renyi(0.5), EntropyOrder::Renyi(2.0), EntropyOrder::Renyi(3.0)] {
                worst_id = worst_id.max(spectral::entropy(&pure, o)?.value.abs());
                worst_id = worst_id.max((spectral::entropy(&flat, o)?.value - target).abs());
            }
        }
        let mut r = rng::stream(7, &[]);
        let (mut worst_limit, mut monotone): (f64, bool) = (0.0, true);
        let orders = [0.5, 1.0, 1.001, 2.0, 3.0, 4.0, 5.0];
        for t in 0..100 {
            let sp = random_spectrum(&mut r, 2 + t % 15);
            let vn = spectral::von_neumann(&sp, spectral::EIGEN_FLOOR).value;
            worst_limit = worst_limit.max((spectral::renyi(&sp, 1.001)?.value - vn).abs());
            let values: Vec<f64> = orders
                .iter()
                .map(|&n| if n == 1.0 { Ok(vn) } else { spectral::renyi(&sp, n).map(|e| e.value) })
                .collect::<Result<_>>()?;
            monotone &= values.windows(2).all(|w| w[1] <= w[0] + 1e-12);
        }
        let ok = worst_id <= 1e-12 && worst_limit <= 5e-3 && monotone;
        Ok((ok, format!("identities {worst_id:.1e}, |S_1.001 - S| <= {worst_limit:.1e} (tol 5e-3), monotone in n: {monotone}")))
    })
}

fn synthetic(s: f64, a1: f64, sigma: f64) -> EntropySeries {
    let terms = [(0.4, -0.3, 0.9), (0.3, -0.25, 0.8), (0.2, -0.2, 0.7)];
    let points = terms
        .iter()
        .flat_map(|&(dtau, b, c)| {
            (2..=8).map(move |k| SeriesPoint { dtau, k: k as f64, value: s + a1 * dtau * dtau + b * (-c * k as f64).exp(), error: sigma })
        })
        .collect();
    EntropySeries { order: EntropyOrder::VonNeumann, l: 1, points }
}

/// Exact recovery and pull distribution of the combined fit.
pub fn extrapolation_recovery() -> Outcome {
    timed(8, "extrapolation recovery", || {
        let clean = synthetic(0.55, 0.4, 1e-3);
        let recovered = (fit_combined(&clean)?.s - 0.55).abs();
        let sigma = 2e-3;
        let mut r = rng::stream(8, &[]);
        let mut pulls = Vec::with_capacity(500);
        for _ in 0..500 {
            let mut noisy = synthetic(0.55, 0.4, sigma);
            for p in &mut noisy.points {
                let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut r);
                p.value += sigma * z;
            }
            let f = fit_combined(&noisy)?;
            pulls.push((f.s - 0.55) / f.stat_err);
        }
        let mean = pulls.iter().sum::<f64>() / 500.0;
        let sd = (pulls.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / 499.0).sqrt();
        let ok = recovered <= 1e-8 && mean.abs() <= 0.1 && (0.85..=1.15).contains(&sd);
        Ok((ok, format!("noiseless |dS| {recovered:.1e} (tol 1e-8); pulls mean {mean:+.3} (|.| <= 0.1), std {sd:.3} in [0.85, 1.15]")))
    })
}

/// Exact finite-`k` data at `L = 8` extrapolated to the ground state.
pub fn physics_closure() -> Outcome {
    timed(9, "noise-free physics closure", || {
        let sys = oracle::QuantumSystem::new(8, 1.0, 1.0)?;
        let mut details = Vec::new();
        let mut ok = true;
        for l in [1, 2] {
            let mut points = Vec::new();
            for dtau in [0.4, 0.3, 0.2] {
                for k in 2..=8 {
                    let p = ModelParams::new(1.0, 1.0, dtau, 8, k, l)?;
                    let rho = transfer_matrix_rdm(&p)?.rho;
                    let s = spectral::von_neumann(&spectral::eigh(&rho)?, spectral::EIGEN_FLOOR).value;
                    points.push(SeriesPoint { dtau, k: k as f64, value: s, error: 1e-4 });
                }
            }
            let fit = fit_combined(&EntropySeries { order: EntropyOrder::VonNeumann, l, points })?;
            let exact = oracle::from_system(&sys, l)?.von_neumann;
            let rel = (fit.s - exact) / exact;
            ok &= rel.abs() <= 0.01;
            details.push(format!("l={l}: S {:.5} vs {exact:.5} ({:+.2}%)", fit.s, 100.0 * rel));
        }
        Ok((ok, format!("{} (tol 1%)", details.join(", "))))
    })
}

/// Run configuration of the scaled-down stochastic pipeline.
pub fn headline_config(root: &Path) -> RunConfig {
    let toml = r#"
        seed = 77
        [model]
        chain = 8
        subsystems = [1]
        dtau = [0.4, 0.3, 0.2]
        k = [2, 3, 4, 5, 6]
        [training]
        batch_size = 256
        stages = [{ lr = 0.003, epochs = 1000 }, { lr = 0.001, epochs = 1000 }, { lr = 0.0001, epochs = 500 }, { lr = 0.00001, epochs = 500 }]
        ess_interval = 500
        ess_samples = 256
        [estimator]
        n_samples = 1000000
        bootstrap = 800
    "#;
    let mut c = RunConfig::from_toml(toml).expect("valid config");
    c.paths.checkpoints = root.join("checkpoints");
    c.paths.weights = root.join("weights");
    c.paths.reports = root.join("reports");
    c
}

/// Full stochastic pipeline at `L = 8` against exact diagonalization.
pub fn scaled_headline(root: &Path, jobs: usize) -> Outcome {
    timed(10, "scaled-down headline", || {
        let cfg = headline_config(root);
        let opts = RunOptions { jobs, force: false };
        pipeline::cmd_train(&cfg, opts)?;
        pipeline::cmd_estimate(&cfg, opts)?;
        pipeline::cmd_entropy(&cfg)?;
        let ex = pipeline::cmd_extrapolate(&cfg)?;
        let fit = ex.fits.iter().find(|f| f.order == EntropyOrder::VonNeumann && f.l == 1).expect("fitted");
        let exact = ex.exact.iter().find(|e| e.0 == 1).expect("computed").1;
        let pull = (fit.s - exact) / fit.total_err;
        Ok((
            pull.abs() <= 3.0,
            format!(
                "S {:.5} +- {:.5} (stat {:.1e}, sys {:.1e}) vs exact {exact:.5}: {pull:+.2} sigma (<= 3)",
                fit.s, fit.total_err, fit.stat_err, fit.sys_err
            ),
        ))
    })
}

/// CFT closed form at `L = 32`, `l = 5`.
pub fn cft_formula() -> Outcome {
    timed(11, "CFT formula", || {
        let v = oracle::cft_entropy(32, 5, EntropyOrder::VonNeumann, None)?;
        Ok(((v - 0.7401).abs() <= 1e-4, format!("S(32, 5) = {v:.6} (0.7401 +- 1e-4)")))
    })
}

/// Configuration of the bundled tiny fixture.
pub const TINY_CONFIG: &str = include_str!("../fixtures/tiny.toml");

/// Two independent single-worker runs of the tiny fixture.
pub fn reproducibility(root: &Path) -> Outcome {
    timed(12, "reproducibility", || {
        let run = |dir: &Path| -> Result<Vec<(String, Vec<u8>)>> {
            let mut cfg = RunConfig::from_toml(TINY_CONFIG)?;
            cfg.paths.checkpoints = dir.join("checkpoints");
            cfg.paths.weights = dir.join("weights");
            cfg.paths.reports = dir.join("reports");
            let opts = RunOptions { jobs: 1, force: false };
            pipeline::cmd_train(&cfg, opts)?;
            pipeline::cmd_estimate(&cfg, opts)?;
            let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&cfg.paths.reports)?
                .map(|e| {
                    let e = e?;
                    Ok((e.file_name().to_string_lossy().into_owned(), fs::read(e.path())?))
                })
                .collect::<Result<_>>()?;
            files.sort();
            Ok(files)
        };
        let (a, b) = (run(&root.join("a"))?, run(&root.join("b"))?);
        let csvs = a.iter().filter(|f| f.0.ends_with(".csv")).count();
        let ok = csvs > 0 && a == b;
        Ok((ok, format!("{csvs} CSV files, identical: {}", a == b)))
    })
}

/// Every criterion; the multi-hour pipeline only with `slow`.
pub fn run_all(scratch: &Path, slow: bool, jobs: usize) -> Vec<Outcome> {
    let mut out = vec![
        oracle_cross_validation(),
        heatbath_exactness(),
        gradient_correctness(),
        normalization(),
        variational_bound(),
        nis_correctness(),
        entropy_identities(),
        extrapolation_recovery(),
        physics_closure(),
    ];
    if slow {
        out.push(scaled_headline(&scratch.join("headline"), jobs));
    }
    out.push(cft_formula());
    out.push(reproducibility(&scratch.join("repro")));
    out
}

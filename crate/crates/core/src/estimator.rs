//! Neural importance sampling of the reduced density matrix.
//!
//! For every boundary pair `(μ_A, ν_A)` the hierarchy draws `N_s`
//! configurations and records `log ŵ = −Ẽ − log q`. The mean weight estimates
//! `Z_{μ_A,ν_A}` up to a factor shared by all elements, so the matrix is
//! normalized by its own trace. Errors come from a bootstrap that resamples
//! every weight stream and repeats the whole analysis per replica.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autoreg::MaskedNet;
use crate::error::{Error, Result};
use crate::han::HierarchyPlan;
use crate::io;
use crate::lattice::{BasisState, CouplingSet};
use crate::rng;
use crate::spectral::{self, EntropyOrder, EntropyValue, Matrix, Spectrum};
use crate::training::{ess, sample_batch, BatchSample};

const TAG_ESTIMATE: u64 = 3;
const TAG_BOOTSTRAP: u64 = 4;

/// Upper bound on resampling units per weight stream.
pub const MAX_BLOCKS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Samples per matrix element.
    pub n_samples: usize,
    /// Bootstrap replicas.
    pub bootstrap: usize,
    /// ESS below which an element is flagged.
    pub ess_floor: f64,
    /// Rényi orders reported alongside the von Neumann entropy.
    pub renyi_orders: Vec<f64>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { n_samples: 1_000_000, bootstrap: 800, ess_floor: 1e-4, renyi_orders: vec![2.0, 3.0, 4.0, 5.0] }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidParams("n_samples must be >= 1".into()));
        }
        if self.bootstrap < 2 {
            return Err(Error::InvalidParams("bootstrap needs at least two replicas".into()));
        }
        for &n in &self.renyi_orders {
            spectral::renyi(&Spectrum { eigenvalues: vec![1.0], errors: None }, n)?;
        }
        Ok(())
    }

    pub fn orders(&self) -> Vec<EntropyOrder> {
        std::iter::once(EntropyOrder::VonNeumann)
            .chain(self.renyi_orders.iter().map(|&n| EntropyOrder::Renyi(n)))
            .collect()
    }
}

/// `ln Σ exp(x)` with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Importance weights of one matrix element.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStats {
    pub mu: usize,
    pub nu: usize,
    pub log_weights: Vec<f64>,
    /// `ln(mean ŵ)`.
    pub log_mean: f64,
    pub ess: f64,
    pub low_ess: bool,
}

impl WeightStats {
    pub fn from_log_weights(mu: usize, nu: usize, log_weights: Vec<f64>, ess_floor: f64) -> Result<Self> {
        if !log_weights.iter().any(|w| w.is_finite()) {
            return Err(Error::Divergence(format!("element ({mu}, {nu}) has no finite weights")));
        }
        let log_mean = log_sum_exp(&log_weights) - (log_weights.len() as f64).ln();
        let e = ess(&log_weights);
        let low_ess = !(e >= ess_floor);
        if low_ess {
            log::warn!("element ({mu}, {nu}): ESS {e:.2e} below floor {ess_floor:e}");
        }
        Ok(Self { mu, nu, log_weights, log_mean, ess: e, low_ess })
    }

    pub fn n(&self) -> usize {
        self.log_weights.len()
    }
}

/// Samples `Z_{μ_A,ν_A}` with `n` configurations.
pub fn estimate_partition(
    plan: &HierarchyPlan,
    nets: &[MaskedNet],
    mu: &BasisState,
    nu: &BasisState,
    c: &CouplingSet,
    n: usize,
    seed: u64,
    ess_floor: f64,
) -> Result<WeightStats> {
    plan.check_nets(nets)?;
    if n == 0 {
        return Err(Error::InvalidParams("n_samples must be >= 1".into()));
    }
    let path = [TAG_ESTIMATE, mu.index() as u64, nu.index() as u64];
    let batch = sample_batch(plan, nets, c, Some((mu, nu)), n, seed, &path);
    let lw = batch.iter().map(BatchSample::log_weight).collect();
    WeightStats::from_log_weights(mu.index(), nu.index(), lw, ess_floor)
}

/// Samples every element of `ρ_A`; `streams[i·d + j]` holds element `(i, j)`.
pub fn sample_all(
    plan: &HierarchyPlan,
    nets: &[MaskedNet],
    c: &CouplingSet,
    n: usize,
    seed: u64,
    ess_floor: f64,
) -> Result<Vec<WeightStats>> {
    let l = plan.subsystem();
    let d = 1usize << l;
    let mut out = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            let (mu, nu) = (BasisState::from_index(i, l)?, BasisState::from_index(j, l)?);
            out.push(estimate_partition(plan, nets, &mu, &nu, c, n, seed, ess_floor)?);
        }
    }
    Ok(out)
}

/// Trace-normalized matrix from per-element log mean weights.
pub fn normalize(log_means: &Matrix) -> Matrix {
    let d = log_means.dim();
    let diag: Vec<f64> = (0..d).map(|i| log_means.get(i, i)).collect();
    let log_trace = log_sum_exp(&diag);
    Matrix::from_fn(d, |i, j| (log_means.get(i, j) - log_trace).exp())
}

/// `(ρ + ρᵀ)/2`.
pub fn symmetrized(rho: &Matrix) -> Matrix {
    Matrix::from_fn(rho.dim(), |i, j| 0.5 * (rho.get(i, j) + rho.get(j, i)))
}

/// Largest deviation from a symmetry, in units of the combined error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymmetryCheck {
    pub max_abs: f64,
    pub max_sigma: f64,
    /// Set when `max_sigma` exceeds 4.
    pub flagged: bool,
}

fn symmetry_check(rho: &Matrix, err: &Matrix, partner: impl Fn(usize, usize) -> (usize, usize)) -> SymmetryCheck {
    let d = rho.dim();
    let (mut max_abs, mut max_sigma): (f64, f64) = (0.0, 0.0);
    for i in 0..d {
        for j in 0..d {
            let (a, b) = partner(i, j);
            let diff = (rho.get(i, j) - rho.get(a, b)).abs();
            let sigma = err.get(i, j).hypot(err.get(a, b));
            max_abs = max_abs.max(diff);
            if diff > 0.0 {
                max_sigma = max_sigma.max(if sigma > 0.0 { diff / sigma } else { f64::INFINITY });
            }
        }
    }
    SymmetryCheck { max_abs, max_sigma, flagged: max_sigma > 4.0 }
}

/// Matrix, spectrum and entropies with bootstrap errors.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrixEstimate {
    pub l: usize,
    /// `ln(mean ŵ)` per element.
    pub raw: Matrix,
    /// Normalized, unsymmetrized.
    pub rho_raw: Matrix,
    /// Normalized and symmetrized.
    pub rho: Matrix,
    /// Bootstrap standard deviation of `rho`.
    pub err: Matrix,
    /// Bootstrap standard deviation of `rho_raw`.
    pub err_raw: Matrix,
    pub ess: Matrix,
    pub spectrum: Spectrum,
    pub entropies: Vec<EntropyValue>,
    pub transpose_check: SymmetryCheck,
    pub z2_check: SymmetryCheck,
    pub n_samples: usize,
    pub seed: u64,
    pub low_ess: bool,
}

impl DensityMatrixEstimate {
    pub fn entropy(&self, order: EntropyOrder) -> Option<EntropyValue> {
        self.entropies.iter().find(|e| e.order == order).copied()
    }

    pub fn von_neumann(&self) -> EntropyValue {
        self.entropy(EntropyOrder::VonNeumann).expect("always computed")
    }
}

/// One weight stream collapsed into at most [`MAX_BLOCKS`] blocks.
struct Blocks {
    log_sums: Vec<f64>,
    counts: Vec<f64>,
}

impl Blocks {
    fn new(lw: &[f64]) -> Self {
        let size = lw.len().div_ceil(MAX_BLOCKS);
        let log_sums = lw.chunks(size).map(log_sum_exp).collect();
        let counts = lw.chunks(size).map(|c| c.len() as f64).collect();
        Self { log_sums, counts }
    }

    fn resample(&self, r: &mut rng::Rng, buf: &mut Vec<f64>) -> f64 {
        let nb = self.log_sums.len();
        buf.clear();
        let mut count = 0.0;
        for _ in 0..nb {
            let b = r.random_range(0..nb);
            buf.push(self.log_sums[b]);
            count += self.counts[b];
        }
        log_sum_exp(buf) - count.ln()
    }
}

/// Spectrum and entropies of a normalized, symmetrized matrix.
pub fn analyze(rho: &Matrix, orders: &[EntropyOrder]) -> Result<(Spectrum, Vec<EntropyValue>)> {
    let spectrum = spectral::eigh(rho)?;
    let entropies = orders.iter().map(|&o| spectral::entropy(&spectrum, o)).collect::<Result<Vec<_>>>()?;
    Ok((spectrum, entropies))
}

fn std_dev(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let shift = xs[0];
    let mean = xs.iter().map(|x| x - shift).sum::<f64>() / n;
    (xs.iter().map(|x| (x - shift - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Assembles `ρ_A` from weight streams and attaches bootstrap errors.
pub fn assemble(streams: &[WeightStats], l: usize, config: &EstimatorConfig, seed: u64) -> Result<DensityMatrixEstimate> {
    config.validate()?;
    let d = 1usize << l;
    if streams.len() != d * d {
        return Err(Error::Shape(format!("expected {} weight streams, got {}", d * d, streams.len())));
    }
    let orders = config.orders();
    let raw = Matrix::from_fn(d, |i, j| streams[i * d + j].log_mean);
    let rho_raw = normalize(&raw);
    let rho = symmetrized(&rho_raw);
    let (mut spectrum, mut entropies) = analyze(&rho, &orders)?;

    let blocks: Vec<Blocks> = streams.iter().map(|s| Blocks::new(&s.log_weights)).collect();
    let b = config.bootstrap;
    let mut r = rng::stream(seed, &[TAG_BOOTSTRAP]);
    let mut buf = Vec::new();
    let mut raw_reps = vec![Vec::with_capacity(b); d * d];
    let mut sym_reps = vec![Vec::with_capacity(b); d * d];
    let mut eig_reps = vec![Vec::with_capacity(b); d];
    let mut ent_reps = vec![Vec::with_capacity(b); orders.len()];
    for _ in 0..b {
        let lm: Vec<f64> = blocks.iter().map(|bl| bl.resample(&mut r, &mut buf)).collect();
        let rep_raw = normalize(&Matrix::from_rows(d, lm)?);
        let rep = symmetrized(&rep_raw);
        for e in 0..d * d {
            raw_reps[e].push(rep_raw.data()[e]);
            sym_reps[e].push(rep.data()[e]);
        }
        let (sp, ent) = analyze(&rep, &orders)?;
        for (k, v) in sp.eigenvalues.iter().enumerate() {
            eig_reps[k].push(*v);
        }
        for (k, v) in ent.iter().enumerate() {
            ent_reps[k].push(v.value);
        }
    }
    let err_raw = Matrix::from_rows(d, raw_reps.iter().map(|x| std_dev(x)).collect())?;
    let err = Matrix::from_rows(d, sym_reps.iter().map(|x| std_dev(x)).collect())?;
    spectrum.errors = Some(eig_reps.iter().map(|x| std_dev(x)).collect());
    for (e, reps) in entropies.iter_mut().zip(&ent_reps) {
        e.error = std_dev(reps);
    }
    let transpose_check = symmetry_check(&rho_raw, &err_raw, |i, j| (j, i));
    if transpose_check.flagged {
        log::warn!("raw estimate is asymmetric by {:.1} sigma", transpose_check.max_sigma);
    }
    let z2_check = symmetry_check(&rho, &err, |i, j| (d - 1 - i, d - 1 - j));
    Ok(DensityMatrixEstimate {
        l,
        raw,
        rho_raw,
        rho,
        err,
        err_raw,
        ess: Matrix::from_fn(d, |i, j| streams[i * d + j].ess),
        spectrum,
        entropies,
        transpose_check,
        z2_check,
        n_samples: streams.iter().map(WeightStats::n).min().unwrap_or(0),
        seed,
        low_ess: streams.iter().any(|s| s.low_ess),
    })
}

/// Samples and assembles the full matrix from one trained hierarchy.
pub fn estimate_rdm(
    plan: &HierarchyPlan,
    nets: &[MaskedNet],
    c: &CouplingSet,
    config: &EstimatorConfig,
    seed: u64,
) -> Result<(DensityMatrixEstimate, Vec<WeightStats>)> {
    config.validate()?;
    let streams = sample_all(plan, nets, c, config.n_samples, seed, config.ess_floor)?;
    let est = assemble(&streams, plan.subsystem(), config, seed)?;
    Ok((est, streams))
}

/// `mu,nu,value,error,ess` rows labelled by basis bitstrings.
pub fn matrix_csv(header: &str, l: usize, rho: &Matrix, err: Option<&Matrix>, ess: Option<&Matrix>) -> String {
    let d = rho.dim();
    let mut s = String::from(header);
    s.push_str("mu,nu,value,error,ess\n");
    for i in 0..d {
        for j in 0..d {
            let label = |x| BasisState::from_index(x, l).map(|b| b.label()).unwrap_or_default();
            let cell = |m: Option<&Matrix>| m.map(|m| io::fmt_f64(m.get(i, j))).unwrap_or_default();
            s.push_str(&format!("{},{},{},{},{}\n", label(i), label(j), io::fmt_f64(rho.get(i, j)), cell(err), cell(ess)));
        }
    }
    s
}

/// `kind,index,value,error` rows for eigenvalues and entropies.
pub fn spectrum_csv(header: &str, spectrum: &Spectrum, entropies: &[EntropyValue]) -> String {
    let mut s = String::from(header);
    s.push_str("kind,index,value,error\n");
    for (i, v) in spectrum.eigenvalues.iter().enumerate() {
        let e = spectrum.errors.as_ref().map(|e| io::fmt_f64(e[i])).unwrap_or_default();
        s.push_str(&format!("eigenvalue,{i},{},{e}\n", io::fmt_f64(*v)));
    }
    for e in entropies {
        s.push_str(&format!("{},{},{},{}\n", e.order.label(), e.order.as_f64(), io::fmt_f64(e.value), io::fmt_f64(e.error)));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoreg::all_assignments;
    use crate::han::{build_hierarchy, SamplerScratch};
    use crate::lattice::{couplings, energy, ModelParams, SpinConfig};
    use crate::oracle::{enumerate_rdm, transfer_matrix_rdm};
    use crate::training::{Stage, TrainConfig, Trainer};

    fn cfg(b: usize) -> EstimatorConfig {
        EstimatorConfig { bootstrap: b, ..Default::default() }
    }

    #[test]
    fn constant_weights_give_exact_matrix_and_zero_errors() {
        let logz = [[0.0, -1.0], [-1.0, 0.5]];
        let streams: Vec<WeightStats> = (0..4)
            .map(|e| WeightStats::from_log_weights(e / 2, e % 2, vec![logz[e / 2][e % 2]; 50_000], 1e-4).unwrap())
            .collect();
        let est = assemble(&streams, 1, &cfg(200), 1).unwrap();
        let tr = 1.0 + 0.5f64.exp();
        assert!((est.rho.get(0, 1) - (-1.0f64).exp() / tr).abs() < 1e-15);
        assert_eq!(est.rho.trace(), 1.0);
        assert!(est.err.data().iter().all(|&e| e == 0.0));
        assert!(est.entropies.iter().all(|e| e.error == 0.0));
        assert!(est.ess.data().iter().all(|&e| (e - 1.0).abs() < 1e-12));
    }

    #[test]
    fn global_shift_is_harmless() {
        let mut r = rng::stream(3, &[]);
        let lw: Vec<Vec<f64>> = (0..4).map(|_| (0..2000).map(|_| r.random_range(-3.0..0.0)).collect()).collect();
        let build = |shift: f64| {
            let s: Vec<WeightStats> = lw
                .iter()
                .enumerate()
                .map(|(e, w)| WeightStats::from_log_weights(e / 2, e % 2, w.iter().map(|x| x + shift).collect(), 0.0).unwrap())
                .collect();
            assemble(&s, 1, &cfg(100), 5).unwrap()
        };
        let (a, b) = (build(0.0), build(-512.0));
        for (x, y) in a.rho.data().iter().zip(b.rho.data()) {
            assert!((x - y).abs() < 1e-13);
        }
        for (x, y) in a.err.data().iter().zip(b.err.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetrize_is_a_projection() {
        let m = Matrix::from_rows(2, vec![0.6, 0.1, 0.3, 0.4]).unwrap();
        let s = symmetrized(&m);
        assert_eq!(s.max_asymmetry(), 0.0);
        assert_eq!(symmetrized(&s), s);
    }

    #[test]
    fn trace_error_vanishes() {
        let mut r = rng::stream(8, &[]);
        let streams: Vec<WeightStats> = (0..16)
            .map(|e| WeightStats::from_log_weights(e / 4, e % 4, (0..500).map(|_| r.random_range(-2.0..1.0)).collect(), 0.0).unwrap())
            .collect();
        let est = assemble(&streams, 2, &cfg(100), 2).unwrap();
        let sum: f64 = est.spectrum.eigenvalues.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!((est.rho.trace() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn importance_weights_are_unbiased_under_enumeration() {
        let p = ModelParams::new(1.0, 1.0, 0.4, 3, 1, 1).unwrap();
        let c = couplings(&p).unwrap();
        let plan = build_hierarchy(&p).unwrap();
        let nets = plan.init_nets(2, 21).unwrap();
        let exact = enumerate_rdm(&p).unwrap();
        let sites: Vec<_> = plan.groups().iter().flat_map(|g| g.sites.clone()).collect();
        let b_cols: Vec<usize> = plan.groups()[0].sites.iter().map(|s| s.col).collect();
        let mut scratch = SamplerScratch::default();
        for i in 0..2 {
            for j in 0..2 {
                let (mu, nu) = (BasisState::from_index(i, 1).unwrap(), BasisState::from_index(j, 1).unwrap());
                let mut z = 0.0;
                for spins in all_assignments(sites.len()) {
                    let mut cfg = SpinConfig::new(plan.m(), plan.cols()).unwrap();
                    plan.fix_boundary(&mut cfg, &mu, &nu);
                    for (s, v) in sites.iter().zip(&spins) {
                        cfg.set(s.row, s.col, *v);
                    }
                    for &col in &b_cols {
                        cfg.set(plan.m(), col, cfg.get(0, col));
                    }
                    let lq = plan.log_q(&nets, &cfg, &c, &mut scratch);
                    z += lq.exp() * (-energy(&cfg, &c) - lq).exp();
                }
                let want = exact.log_z_elements.get(i, j);
                assert!((z.ln() - want).abs() < 1e-12 * want.abs());
            }
        }
    }

    fn trained(p: &ModelParams) -> (crate::han::HierarchyPlan, Vec<MaskedNet>) {
        let tc = TrainConfig {
            batch_size: 256,
            stages: vec![Stage { lr: 3e-3, epochs: 400 }, Stage { lr: 1e-3, epochs: 200 }],
            ess_interval: 0,
            ess_samples: 64,
            hidden_factor: 2,
            ..TrainConfig::desk()
        };
        let mut t = Trainer::new(*p, tc).unwrap();
        t.run().unwrap();
        (t.plan().clone(), t.into_nets())
    }

    #[test]
    fn trained_estimate_matches_transfer_matrix() {
        let p = ModelParams::new(1.0, 1.0, 0.4, 4, 1, 1).unwrap();
        let c = couplings(&p).unwrap();
        let (plan, nets) = trained(&p);
        let exact = transfer_matrix_rdm(&p).unwrap();
        let config = EstimatorConfig { n_samples: 40_000, bootstrap: 200, ..Default::default() };
        let (est, _) = estimate_rdm(&plan, &nets, &c, &config, 11).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let dev = (est.rho.get(i, j) - exact.rho.get(i, j)).abs();
                assert!(dev < 4.0 * est.err.get(i, j), "({i},{j}): {dev} vs {}", est.err.get(i, j));
            }
        }
        assert!(!est.transpose_check.flagged);
        assert!(!est.low_ess);

        // doubling the sample count shrinks errors by about √2
        let double = EstimatorConfig { n_samples: 80_000, ..config };
        let (est2, _) = estimate_rdm(&plan, &nets, &c, &double, 11).unwrap();
        let ratio = est.err.get(0, 1) / est2.err.get(0, 1);
        assert!((ratio / 2f64.sqrt() - 1.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn csv_layout() {
        let m = Matrix::from_rows(2, vec![0.75, 0.125, 0.125, 0.25]).unwrap();
        let csv = matrix_csv("# oracle=true\n", 1, &m, None, None);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines, ["# oracle=true", "mu,nu,value,error,ess", "0,0,7.5e-1,,", "0,1,1.25e-1,,", "1,0,1.25e-1,,", "1,1,2.5e-1,,"]);
    }
}

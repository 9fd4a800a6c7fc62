//! Exact references: brute-force enumeration and transfer-matrix evaluation
//! of the classical reduced density matrix, exact diagonalization of the
//! quantum chain, and closed-form CFT entropies.

use rand::Rng;

use crate::error::{Error, Result};
use crate::lattice::{couplings, energy, CouplingSet, ModelParams, SpinConfig};
use crate::spectral::{self, EntropyOrder, Matrix, Spectrum};

/// Non-universal constant of the critical von Neumann entropy.
pub const B1: f64 = 0.478558;

/// Largest number of free spins [`enumerate_rdm`] will sum over.
pub const ENUMERATION_CAP: usize = 26;

/// Largest chain length for dense transfer-matrix products.
pub const TRANSFER_CAP: usize = 10;

/// Exact classical reduced density matrix at finite `(m, Δτ)`.
#[derive(Debug, Clone)]
pub struct ClassicalRdm {
    pub l: usize,
    /// Normalized `ρ_A`, unit trace.
    pub rho: Matrix,
    /// `ln Z_{μ_A,ν_A}` per element.
    pub log_z_elements: Matrix,
    /// `ln Z` (trace over `μ = ν`).
    pub log_z: f64,
}

fn row_spin(state: usize, col: usize, cols: usize) -> i8 {
    if state >> (cols - 1 - col) & 1 == 1 {
        1
    } else {
        -1
    }
}

fn finish(l: usize, log_z_el: Matrix) -> ClassicalRdm {
    let d = log_z_el.dim();
    let diag_max = (0..d).map(|i| log_z_el.get(i, i)).fold(f64::NEG_INFINITY, f64::max);
    let trace: f64 = (0..d).map(|i| (log_z_el.get(i, i) - diag_max).exp()).sum();
    let log_z = diag_max + trace.ln();
    let rho = Matrix::from_fn(d, |i, j| (log_z_el.get(i, j) - log_z).exp());
    ClassicalRdm { l, rho, log_z_elements: log_z_el, log_z }
}

/// Sums `exp(−Ẽ)` over every completion of each `(μ_A, ν_A)` pair.
pub fn enumerate_rdm(params: &ModelParams) -> Result<ClassicalRdm> {
    let c = couplings(params)?;
    let (cols, l, m) = (params.chain, params.subsystem, params.m());
    let free = cols * (m + 1) - cols - l;
    if free > ENUMERATION_CAP {
        return Err(Error::SizeCap(format!("{free} free spins exceed the cap of {ENUMERATION_CAP}")));
    }
    let b_bits = cols - l;
    let inner_bits = cols * (m - 1);
    let d = 1usize << l;
    let mut cfg = SpinConfig::new(m, cols)?;
    // the all-up configuration bounds every energy from below
    let e_ref = energy(&cfg, &c);
    let mut log_z_el = Matrix::zeros(d);
    for mu in 0..d {
        for nu in 0..d {
            let mut sum = 0.0;
            for b in 0..1usize << b_bits {
                for inner in 0..1usize << inner_bits {
                    for col in 0..l {
                        cfg.set(0, col, row_spin(mu, col, l));
                        cfg.set(m, col, row_spin(nu, col, l));
                    }
                    for col in l..cols {
                        let s = row_spin(b, col - l, b_bits);
                        cfg.set(0, col, s);
                        cfg.set(m, col, s);
                    }
                    for bit in 0..inner_bits {
                        let s = if inner >> bit & 1 == 1 { 1 } else { -1 };
                        cfg.set(1 + bit / cols, bit % cols, s);
                    }
                    sum += (e_ref - energy(&cfg, &c)).exp();
                }
            }
            log_z_el.set(mu, nu, sum.ln() - e_ref);
        }
    }
    Ok(finish(l, log_z_el))
}

/// Dense transfer-matrix ingredients for one set of couplings.
#[derive(Debug, Clone)]
pub struct TransferMatrix {
    pub cols: usize,
    /// `T[r, r'] = exp(J_τ Σ_j r_j r'_j)`.
    pub step: Matrix,
    /// `exp(J_s Σ_j r_j r_{j+1})` per row state.
    pub diag_full: Vec<f64>,
    /// Square root of `diag_full` (half couplings on rows `0` and `m`).
    pub diag_half: Vec<f64>,
}

impl TransferMatrix {
    pub fn new(cols: usize, c: &CouplingSet) -> Result<Self> {
        if cols > TRANSFER_CAP {
            return Err(Error::SizeCap(format!("L = {cols} exceeds the transfer-matrix cap of {TRANSFER_CAP}")));
        }
        let dim = 1usize << cols;
        let overlap = |a: usize, b: usize| (cols as i32 - 2 * (a ^ b).count_ones() as i32) as f64;
        let step = Matrix::from_fn(dim, |a, b| (c.j_tau * overlap(a, b)).exp());
        let bonds = |r: usize| -> f64 {
            (0..cols).map(|j| (row_spin(r, j, cols) * row_spin(r, (j + 1) % cols, cols)) as f64).sum()
        };
        let diag_full: Vec<f64> = (0..dim).map(|r| (c.j_s * bonds(r)).exp()).collect();
        let diag_half = diag_full.iter().map(|x| x.sqrt()).collect();
        Ok(Self { cols, step, diag_full, diag_half })
    }

    /// `M = D_half (T D_full)^{m−1} T D_half` as `(matrix, ln scale)`.
    pub fn chain(&self, m: usize) -> (Matrix, f64) {
        let dh = &self.diag_half;
        // A = D_half T D_half, so M = A^m
        let a = Matrix::from_fn(self.step.dim(), |i, j| dh[i] * self.step.get(i, j) * dh[j]);
        let mut base = a;
        let mut base_log = normalize(&mut base);
        let mut acc: Option<(Matrix, f64)> = None;
        let mut e = m;
        while e > 0 {
            if e & 1 == 1 {
                acc = Some(match acc {
                    None => (base.clone(), base_log),
                    Some((x, lx)) => {
                        let mut p = x.matmul(&base);
                        let s = normalize(&mut p);
                        (p, lx + base_log + s)
                    }
                });
            }
            e >>= 1;
            if e > 0 {
                let mut sq = base.matmul(&base);
                let s = normalize(&mut sq);
                base = sq;
                base_log = 2.0 * base_log + s;
            }
        }
        acc.expect("m >= 1")
    }
}

/// Divides by the largest entry and returns its log.
fn normalize(m: &mut Matrix) -> f64 {
    let mx = m.max_abs();
    m.scale(1.0 / mx);
    mx.ln()
}

/// Exact `ρ_A` via the transfer matrix and a partial trace over subsystem B.
pub fn transfer_matrix_rdm(params: &ModelParams) -> Result<ClassicalRdm> {
    let c = couplings(params)?;
    let tm = TransferMatrix::new(params.chain, &c)?;
    let (chain, log_scale) = tm.chain(params.m());
    Ok(reduce(&chain, log_scale, params.chain, params.subsystem))
}

/// Partial trace of a full-row matrix with `μ_B = ν_B`.
pub fn reduce(chain: &Matrix, log_scale: f64, cols: usize, l: usize) -> ClassicalRdm {
    let (d, nb) = (1usize << l, 1usize << (cols - l));
    let log_z_el = Matrix::from_fn(d, |a, b| {
        let s: f64 = (0..nb).map(|x| chain.get(a * nb + x, b * nb + x)).sum();
        s.ln() + log_scale
    });
    finish(l, log_z_el)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroundStateSolver {
    DenseJacobi,
    Lanczos,
}

/// Transverse-field Ising chain with periodic bonds.
#[derive(Debug, Clone)]
pub struct QuantumSystem {
    pub chain: usize,
    pub j: f64,
    pub h: f64,
    pub ground_energy: f64,
    pub ground_state: Vec<f64>,
    /// `E_1 − E_0`.
    pub gap: f64,
}

impl QuantumSystem {
    pub fn new(chain: usize, j: f64, h: f64) -> Result<Self> {
        let solver = if chain <= 10 { GroundStateSolver::DenseJacobi } else { GroundStateSolver::Lanczos };
        Self::with_solver(chain, j, h, solver)
    }

    pub fn with_solver(chain: usize, j: f64, h: f64, solver: GroundStateSolver) -> Result<Self> {
        if !(2..=12).contains(&chain) {
            return Err(Error::SizeCap(format!("chain length {chain} outside [2, 12]")));
        }
        if !(j >= 0.0 && h >= 0.0 && j.is_finite() && h.is_finite()) {
            return Err(Error::InvalidParams("J and h must be non-negative".into()));
        }
        let mut sys = Self { chain, j, h, ground_energy: 0.0, ground_state: Vec::new(), gap: 0.0 };
        let (e0, e1, psi) = match solver {
            GroundStateSolver::DenseJacobi => sys.solve_dense()?,
            GroundStateSolver::Lanczos => sys.solve_lanczos()?,
        };
        sys.ground_energy = e0;
        sys.gap = e1 - e0;
        sys.ground_state = psi;
        Ok(sys)
    }

    pub fn dim(&self) -> usize {
        1 << self.chain
    }

    fn diagonal(&self, state: usize) -> f64 {
        let l = self.chain;
        let bonds: i32 = (0..l)
            .map(|i| (row_spin(state, i, l) * row_spin(state, (i + 1) % l, l)) as i32)
            .sum();
        -self.j * bonds as f64
    }

    /// Dense Hamiltonian in the σᶻ product basis.
    pub fn dense_hamiltonian(&self) -> Matrix {
        let dim = self.dim();
        let mut hm = Matrix::zeros(dim);
        for s in 0..dim {
            hm.set(s, s, self.diagonal(s));
            for i in 0..self.chain {
                let t = s ^ (1 << i);
                hm.set(s, t, hm.get(s, t) - self.h);
            }
        }
        hm
    }

    /// `y = H x` without forming `H`.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        for s in 0..self.dim() {
            let mut acc = self.diagonal(s) * x[s];
            for i in 0..self.chain {
                acc -= self.h * x[s ^ (1 << i)];
            }
            y[s] = acc;
        }
    }

    fn solve_dense(&self) -> Result<(f64, f64, Vec<f64>)> {
        let r = spectral::jacobi(&self.dense_hamiltonian(), true)?;
        let mut idx: Vec<usize> = (0..r.values.len()).collect();
        idx.sort_by(|&a, &b| r.values[a].total_cmp(&r.values[b]));
        let v = r.vectors.expect("requested");
        let psi = (0..self.dim()).map(|s| v.get(s, idx[0])).collect();
        Ok((r.values[idx[0]], r.values[idx[1]], psi))
    }

    fn solve_lanczos(&self) -> Result<(f64, f64, Vec<f64>)> {
        let dim = self.dim();
        let max_iter = dim.min(300);
        let mut r = crate::rng::stream(0x1a9c, &[self.chain as u64]);
        let mut q: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let n0 = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        q.iter_mut().for_each(|x| *x /= n0);
        let mut basis: Vec<Vec<f64>> = vec![q];
        let (mut alpha, mut beta) = (Vec::new(), Vec::new());
        let mut w = vec![0.0; dim];
        let mut last = (f64::NAN, f64::NAN);
        loop {
            let k = basis.len() - 1;
            self.apply(&basis[k], &mut w);
            let a: f64 = w.iter().zip(&basis[k]).map(|(x, y)| x * y).sum();
            alpha.push(a);
            // full reorthogonalization, twice
            for _ in 0..2 {
                for b in &basis {
                    let proj: f64 = w.iter().zip(b).map(|(x, y)| x * y).sum();
                    w.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
                }
            }
            let bnorm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            let steps = alpha.len();
            let done = steps >= max_iter || bnorm < 1e-12;
            if steps >= 2 && (steps % 10 == 0 || done) {
                let t = Matrix::from_fn(steps, |i, j| {
                    if i == j {
                        alpha[i]
                    } else if i + 1 == j {
                        beta[i]
                    } else if j + 1 == i {
                        beta[j]
                    } else {
                        0.0
                    }
                });
                let res = spectral::jacobi(&t, true)?;
                let mut idx: Vec<usize> = (0..steps).collect();
                idx.sort_by(|&a, &b| res.values[a].total_cmp(&res.values[b]));
                let (e0, e1) = (res.values[idx[0]], res.values[idx[1]]);
                let converged = (e0 - last.0).abs() < 1e-13 * e0.abs().max(1.0)
                    && (e1 - last.1).abs() < 1e-11 * e1.abs().max(1.0);
                last = (e0, e1);
                if converged || done {
                    let v = res.vectors.expect("requested");
                    let mut psi = vec![0.0; dim];
                    for (i, b) in basis.iter().enumerate().take(steps) {
                        let c = v.get(i, idx[0]);
                        psi.iter_mut().zip(b).for_each(|(p, x)| *p += c * x);
                    }
                    let n = psi.iter().map(|x| x * x).sum::<f64>().sqrt();
                    psi.iter_mut().for_each(|x| *x /= n);
                    return Ok((e0, e1, psi));
                }
            }
            if done {
                return Err(Error::Fit("Lanczos broke down before two Ritz values were available".into()));
            }
            beta.push(bnorm);
            basis.push(w.iter().map(|x| x / bnorm).collect());
        }
    }

    /// Reduced density matrix of the first `l` sites.
    pub fn reduced_density_matrix(&self, l: usize) -> Result<Matrix> {
        if l == 0 || l > self.chain {
            return Err(Error::InvalidParams(format!("subsystem length {l} outside [1, {}]", self.chain)));
        }
        let (d, nb) = (1usize << l, 1usize << (self.chain - l));
        let psi = &self.ground_state;
        Ok(Matrix::from_fn(d, |a, b| (0..nb).map(|x| psi[a * nb + x] * psi[b * nb + x]).sum()))
    }
}

/// Exact quantum ground-state `ρ_A` and its entropies.
#[derive(Debug, Clone)]
pub struct GroundStateRdm {
    pub rho: Matrix,
    pub spectrum: Spectrum,
    pub von_neumann: f64,
    pub ground_energy: f64,
    pub gap: f64,
    /// Set when the two lowest levels are numerically degenerate.
    pub degenerate: bool,
}

impl GroundStateRdm {
    pub fn entropy(&self, order: EntropyOrder) -> Result<f64> {
        Ok(spectral::entropy(&self.spectrum, order)?.value)
    }
}

pub fn exact_ground_state_rdm(chain: usize, l: usize, j: f64, h: f64) -> Result<GroundStateRdm> {
    from_system(&QuantumSystem::new(chain, j, h)?, l)
}

pub fn from_system(sys: &QuantumSystem, l: usize) -> Result<GroundStateRdm> {
    let rho = sys.reduced_density_matrix(l)?;
    let spectrum = spectral::eigh(&rho)?;
    let von_neumann = spectral::von_neumann(&spectrum, spectral::EIGEN_FLOOR).value;
    let degenerate = sys.gap < 1e-9 * sys.ground_energy.abs().max(1.0);
    if degenerate {
        log::warn!("ground state of L = {} is degenerate (gap {:e})", sys.chain, sys.gap);
    }
    Ok(GroundStateRdm { rho, spectrum, von_neumann, ground_energy: sys.ground_energy, gap: sys.gap, degenerate })
}

fn chord(chain: usize, l: usize) -> f64 {
    let (big, small) = (chain as f64, l as f64);
    (big / std::f64::consts::PI * (std::f64::consts::PI * small / big).sin()).ln()
}

/// Critical-chain CFT entropy. Von Neumann uses [`B1`] unless `b_n` is given;
/// Rényi orders require `b_n`.
pub fn cft_entropy(chain: usize, l: usize, order: EntropyOrder, b_n: Option<f64>) -> Result<f64> {
    if l == 0 || l >= chain {
        return Err(Error::InvalidParams(format!("l = {l} outside [1, {}]", chain.saturating_sub(1))));
    }
    match order {
        EntropyOrder::VonNeumann => Ok(chord(chain, l) / 6.0 + b_n.unwrap_or(B1)),
        EntropyOrder::Renyi(n) => {
            let b = b_n.ok_or_else(|| Error::InvalidParams("Rényi CFT entropy needs b_n".into()))?;
            Ok((1.0 + 1.0 / n) / 12.0 * chord(chain, l) + b)
        }
    }
}

/// One-parameter fit of the CFT offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnFit {
    pub b_n: f64,
    pub error: f64,
    pub chi2_dof: f64,
}

/// Weighted least-squares estimate of `b_n` from `(l, value, error)` points.
pub fn fit_bn(chain: usize, order: EntropyOrder, points: &[(usize, f64, f64)]) -> Result<BnFit> {
    if points.len() < 2 {
        return Err(Error::Fit("fit_bn needs at least two points".into()));
    }
    let mut resid = Vec::with_capacity(points.len());
    for &(l, y, e) in points {
        if !(e > 0.0) {
            return Err(Error::Fit("errors must be positive".into()));
        }
        resid.push((y - cft_entropy(chain, l, order, Some(0.0))?, 1.0 / (e * e)));
    }
    let wsum: f64 = resid.iter().map(|r| r.1).sum();
    let b = resid.iter().map(|r| r.0 * r.1).sum::<f64>() / wsum;
    let chi2: f64 = resid.iter().map(|r| (r.0 - b).powi(2) * r.1).sum();
    Ok(BnFit { b_n: b, error: wsum.sqrt().recip(), chi2_dof: chi2 / (points.len() - 1) as f64 })
}

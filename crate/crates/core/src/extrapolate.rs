//! Zero-temperature and continuum extrapolation of entropies.
//!
//! At fixed `Δτ` the finite-`k` entropies approach their limit exponentially,
//! `y(k) = a + b e^{−c k}`. The combined fit ties the limits together with a
//! shared continuum value and a `Δτ²` correction:
//!
//! ```text
//! y_Δτ(k) = S + a₁ Δτ² + b_Δτ e^{−c_Δτ k}
//! ```
//!
//! Refitting with an extra `a₂ Δτ³` term gives the systematic error on `S`.

use crate::error::{Error, Result};
use crate::io;
use crate::spectral::{self, EntropyOrder, Matrix};

pub const MAX_ITERATIONS: usize = 200;
const LAMBDA_START: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesPoint {
    pub dtau: f64,
    pub k: f64,
    pub value: f64,
    pub error: f64,
}

/// Entropies of one order and subsystem over a `(Δτ, k)` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropySeries {
    pub order: EntropyOrder,
    pub l: usize,
    pub points: Vec<SeriesPoint>,
}

impl EntropySeries {
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if !(p.error > 0.0) || !p.value.is_finite() {
                return Err(Error::Fit(format!("point {i} needs a finite value and a positive error")));
            }
            if self.points[..i].iter().any(|q| q.dtau == p.dtau && q.k == p.k) {
                return Err(Error::Fit(format!("duplicate point (dtau {}, k {})", p.dtau, p.k)));
            }
        }
        Ok(())
    }

    /// Distinct `Δτ` values, descending.
    pub fn dtaus(&self) -> Vec<f64> {
        let mut d: Vec<f64> = Vec::new();
        for p in &self.points {
            if !d.contains(&p.dtau) {
                d.push(p.dtau);
            }
        }
        d.sort_by(|a, b| b.total_cmp(a));
        d
    }

    pub fn at_dtau(&self, dtau: f64) -> Vec<SeriesPoint> {
        let mut v: Vec<SeriesPoint> = self.points.iter().filter(|p| p.dtau == dtau).copied().collect();
        v.sort_by(|a, b| a.k.total_cmp(&b.k));
        v
    }
}

/// Converged weighted least-squares fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LmFit {
    pub params: Vec<f64>,
    pub cov: Matrix,
    pub chi2: f64,
    pub iterations: usize,
}

impl LmFit {
    pub fn error(&self, i: usize) -> f64 {
        self.cov.get(i, i).max(0.0).sqrt()
    }
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
fn solve(a: &Matrix, b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| a.get(i, j)).chain([b[i]]).collect()).collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))?;
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            for c in col..=n {
                m[r][c] -= f * m[col][c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| m[i][j] * x[j]).sum();
        x[i] = (m[i][n] - s) / m[i][i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Moore–Penrose inverse of a symmetric positive semi-definite matrix.
fn pseudo_inverse(a: &Matrix) -> Result<Matrix> {
    let n = a.dim();
    let r = spectral::jacobi(a, true)?;
    let v = r.vectors.expect("requested");
    let max = r.values.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let cut = 1e-12 * max;
    let mut out = Matrix::zeros(n);
    for (k, &lam) in r.values.iter().enumerate() {
        if lam > cut {
            for i in 0..n {
                for j in 0..n {
                    out.set(i, j, out.get(i, j) + v.get(i, k) * v.get(j, k) / lam);
                }
            }
        }
    }
    Ok(out)
}

/// Levenberg–Marquardt on `n_points` residuals `(y_i − f_i(p)) / σ_i`.
///
/// Points with infinite `σ` carry no weight. `admissible` rejects steps that
/// leave the parameter domain.
pub fn levenberg_marquardt(
    model: impl Fn(&[f64], usize) -> f64,
    y: &[f64],
    sigma: &[f64],
    p0: Vec<f64>,
    admissible: impl Fn(&[f64]) -> bool,
) -> Result<LmFit> {
    let n = y.len();
    let np = p0.len();
    let weight: Vec<f64> = sigma.iter().map(|s| if s.is_finite() { 1.0 / s } else { 0.0 }).collect();
    let residuals = |p: &[f64]| -> Vec<f64> { (0..n).map(|i| (y[i] - model(p, i)) * weight[i]).collect() };
    let chi2_of = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>();
    let jacobian = |p: &[f64]| -> Vec<Vec<f64>> {
        // ∂r_i/∂p_j by central differences
        let mut jac = vec![vec![0.0; np]; n];
        let mut q = p.to_vec();
        for j in 0..np {
            let h = 1e-6 * p[j].abs().max(1e-3);
            q[j] = p[j] + h;
            let up: Vec<f64> = (0..n).map(|i| model(&q, i)).collect();
            q[j] = p[j] - h;
            let down: Vec<f64> = (0..n).map(|i| model(&q, i)).collect();
            q[j] = p[j];
            for i in 0..n {
                jac[i][j] = -(up[i] - down[i]) / (2.0 * h) * weight[i];
            }
        }
        jac
    };
    let normal = |jac: &[Vec<f64>], r: &[f64]| {
        let a = Matrix::from_fn(np, |a, b| (0..n).map(|i| jac[i][a] * jac[i][b]).sum());
        let g: Vec<f64> = (0..np).map(|a| -(0..n).map(|i| jac[i][a] * r[i]).sum::<f64>()).collect();
        (a, g)
    };

    let mut p = p0;
    if !admissible(&p) {
        return Err(Error::Fit("initial parameters are not admissible".into()));
    }
    let mut r = residuals(&p);
    let mut chi2 = chi2_of(&r);
    if !chi2.is_finite() {
        return Err(Error::Fit("non-finite residuals at the starting point".into()));
    }
    let mut lambda = LAMBDA_START;
    for it in 1..=MAX_ITERATIONS {
        let jac = jacobian(&p);
        let (a, g) = normal(&jac, &r);
        let scale = (0..np).map(|i| a.get(i, i)).fold(0.0f64, f64::max).max(1e-300);
        let mut accepted = false;
        let mut small_step = false;
        while lambda < 1e16 {
            let damped = Matrix::from_fn(np, |i, j| {
                if i == j {
                    a.get(i, i) + lambda * (a.get(i, i) + 1e-12 * scale)
                } else {
                    a.get(i, j)
                }
            });
            let Some(delta) = solve(&damped, &g) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = p.iter().zip(&delta).map(|(x, d)| x + d).collect();
            small_step = delta.iter().zip(&p).all(|(d, x)| d.abs() <= 1e-10 * (x.abs() + 1e-10));
            if admissible(&trial) {
                let rt = residuals(&trial);
                let ct = chi2_of(&rt);
                if ct.is_finite() && ct <= chi2 {
                    let gain = chi2 - ct;
                    p = trial;
                    r = rt;
                    chi2 = ct;
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = true;
                    if gain <= 1e-10 * chi2.max(1e-300) {
                        small_step = true;
                    }
                    break;
                }
            }
            if small_step {
                break;
            }
            lambda *= 10.0;
        }
        if small_step || !accepted || chi2 < 1e-28 {
            let jac = jacobian(&p);
            let (a, _) = normal(&jac, &r);
            let cov = pseudo_inverse(&a)?;
            return Ok(LmFit { params: p, cov, chi2, iterations: it });
        }
    }
    Err(Error::Fit(format!("no convergence after {MAX_ITERATIONS} iterations")))
}

/// `χ² / (N − n_params)` of a model against weighted data.
pub fn chi2_dof(points: &[(f64, f64, f64)], model: impl Fn(f64) -> f64, n_params: usize) -> Result<f64> {
    let used = points.iter().filter(|p| p.2.is_finite()).count();
    if used <= n_params {
        return Err(Error::Fit(format!("{used} points leave no degrees of freedom for {n_params} parameters")));
    }
    let chi2: f64 = points
        .iter()
        .filter(|p| p.2.is_finite())
        .map(|&(x, y, s)| ((y - model(x)) / s).powi(2))
        .sum();
    Ok(chi2 / (used - n_params) as f64)
}

/// Exponential approach `a + b e^{−c k}` at one `Δτ`.
#[derive(Debug, Clone, PartialEq)]
pub struct KFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub errors: [f64; 3],
    pub chi2_dof: f64,
}

fn initial_decay(points: &[SeriesPoint]) -> (f64, f64, f64) {
    let last = points.last().expect("non-empty");
    let a0 = last.value;
    // ln|Δy/Δk| is linear in k with slope −c
    let diffs: Vec<(f64, f64)> = points
        .windows(2)
        .filter_map(|w| {
            let d = (w[1].value - w[0].value) / (w[1].k - w[0].k);
            (d != 0.0).then(|| (0.5 * (w[0].k + w[1].k), d.abs().ln()))
        })
        .collect();
    let mut c0 = 1.0;
    if diffs.len() >= 2 {
        let n = diffs.len() as f64;
        let (mx, my) = (diffs.iter().map(|d| d.0).sum::<f64>() / n, diffs.iter().map(|d| d.1).sum::<f64>() / n);
        let sxy: f64 = diffs.iter().map(|d| (d.0 - mx) * (d.1 - my)).sum();
        let sxx: f64 = diffs.iter().map(|d| (d.0 - mx).powi(2)).sum();
        let slope = sxy / sxx;
        if slope < 0.0 && slope.is_finite() {
            c0 = -slope;
        }
    }
    let first = points[0];
    let b0 = (first.value - a0) * (c0 * first.k).exp();
    (a0, b0, c0)
}

fn k_model(p: &[f64], k: f64) -> f64 {
    p[0] + p[1] * (-p[2] * k).exp()
}

/// Fits `a + b e^{−c k}` to one `Δτ` slice.
pub fn fit_k_single(points: &[SeriesPoint]) -> Result<KFit> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.k.total_cmp(&b.k));
    let distinct = pts.windows(2).filter(|w| w[0].k != w[1].k).count() + usize::from(!pts.is_empty());
    if distinct < 4 {
        return Err(Error::Fit(format!("need at least 4 distinct k, got {distinct}")));
    }
    let (a0, b0, c0) = initial_decay(&pts);
    let y: Vec<f64> = pts.iter().map(|p| p.value).collect();
    let s: Vec<f64> = pts.iter().map(|p| p.error).collect();
    let fit = levenberg_marquardt(|p, i| k_model(p, pts[i].k), &y, &s, vec![a0, b0, c0], |p| p[2] > 0.0)?;
    let data: Vec<(f64, f64, f64)> = pts.iter().map(|p| (p.k, p.value, p.error)).collect();
    let chi2_dof = chi2_dof(&data, |k| k_model(&fit.params, k), 3)?;
    Ok(KFit {
        a: fit.params[0],
        b: fit.params[1],
        c: fit.params[2],
        errors: [fit.error(0), fit.error(1), fit.error(2)],
        chi2_dof,
    })
}

/// Per-`Δτ` decay parameters of a combined fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayTerm {
    pub dtau: f64,
    pub b: f64,
    pub c: f64,
    pub b_err: f64,
    pub c_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub order: EntropyOrder,
    pub l: usize,
    pub s: f64,
    pub stat_err: f64,
    pub a1: f64,
    pub a1_err: f64,
    pub decay: Vec<DecayTerm>,
    pub cov: Matrix,
    pub chi2_dof: f64,
    /// Continuum value of the cubic variant.
    pub s_cubic: f64,
    pub a2: f64,
    pub a2_err: f64,
    pub sys_err: f64,
    pub total_err: f64,
}

impl FitResult {
    /// Model value of the quadratic fit.
    pub fn predict(&self, dtau: f64, k: f64) -> Option<f64> {
        let d = self.decay.iter().find(|d| d.dtau == dtau)?;
        Some(self.s + self.a1 * dtau * dtau + d.b * (-d.c * k).exp())
    }
}

fn combined_model(p: &[f64], cubic: bool, slot: usize, dtau: f64, k: f64) -> f64 {
    let base = if cubic { 3 } else { 2 };
    let mut y = p[0] + p[1] * dtau * dtau + p[base + 2 * slot] * (-p[base + 2 * slot + 1] * k).exp();
    if cubic {
        y += p[2] * dtau.powi(3);
    }
    y
}

fn decays_positive(p: &[f64], base: usize) -> bool {
    p[base..].chunks(2).all(|bc| bc[1] > 0.0)
}

/// Simultaneous fit over every `Δτ`, with the cubic variant for the systematic error.
pub fn fit_combined(series: &EntropySeries) -> Result<FitResult> {
    series.validate()?;
    let dtaus = series.dtaus();
    if dtaus.len() < 2 {
        return Err(Error::Fit("the continuum extrapolation needs at least two values of dtau".into()));
    }
    let slot_of = |d: f64| dtaus.iter().position(|&x| x == d).expect("listed");
    let mut starts = Vec::with_capacity(dtaus.len());
    for &d in &dtaus {
        let pts = series.at_dtau(d);
        if pts.len() < 3 {
            return Err(Error::Fit(format!("dtau {d} has {} points, need at least 3", pts.len())));
        }
        let kf = fit_k_single(&pts).ok().filter(|f| f.a.is_finite() && f.c > 0.0);
        let (a, b, c) = match kf {
            Some(f) => (f.a, f.b, f.c),
            None => initial_decay(&pts),
        };
        starts.push((d, a, b, c, pts.iter().map(|p| p.error).fold(f64::INFINITY, f64::min)));
    }
    // straight line of the limits against Δτ²
    let finite: Vec<_> = starts.iter().filter(|s| s.4.is_finite()).collect();
    let (s0, a10) = if finite.len() >= 2 {
        let n = finite.len() as f64;
        let mx = finite.iter().map(|s| s.0 * s.0).sum::<f64>() / n;
        let my = finite.iter().map(|s| s.1).sum::<f64>() / n;
        let sxx: f64 = finite.iter().map(|s| (s.0 * s.0 - mx).powi(2)).sum();
        let slope = finite.iter().map(|s| (s.0 * s.0 - mx) * (s.1 - my)).sum::<f64>() / sxx;
        (my - slope * mx, slope)
    } else {
        (starts.iter().find(|s| s.4.is_finite()).unwrap_or(&starts[0]).1, 0.0)
    };

    let pts = &series.points;
    let y: Vec<f64> = pts.iter().map(|p| p.value).collect();
    let sig: Vec<f64> = pts.iter().map(|p| p.error).collect();
    let slots: Vec<usize> = pts.iter().map(|p| slot_of(p.dtau)).collect();
    let n_eff = pts.iter().filter(|p| p.error.is_finite()).count();
    let p_eff = starts.iter().filter(|s| s.4.is_finite()).count();

    let mut p0 = vec![s0, a10];
    for s in &starts {
        p0.extend([s.2, s.3]);
    }
    let quad = levenberg_marquardt(
        |p, i| combined_model(p, false, slots[i], pts[i].dtau, pts[i].k),
        &y,
        &sig,
        p0.clone(),
        |p| decays_positive(p, 2),
    )?;
    let dof = n_eff as i64 - 2 - 2 * p_eff as i64;
    if dof <= 0 {
        return Err(Error::Fit(format!("{n_eff} points leave no degrees of freedom")));
    }

    let mut c0 = vec![quad.params[0], quad.params[1], 0.0];
    c0.extend_from_slice(&quad.params[2..]);
    let cubic = levenberg_marquardt(
        |p, i| combined_model(p, true, slots[i], pts[i].dtau, pts[i].k),
        &y,
        &sig,
        c0,
        |p| decays_positive(p, 3),
    )?;

    let decay = dtaus
        .iter()
        .enumerate()
        .map(|(i, &dtau)| DecayTerm {
            dtau,
            b: quad.params[2 + 2 * i],
            c: quad.params[3 + 2 * i],
            b_err: quad.error(2 + 2 * i),
            c_err: quad.error(3 + 2 * i),
        })
        .collect();
    let stat_err = quad.error(0);
    let sys_err = (cubic.params[0] - quad.params[0]).abs();
    Ok(FitResult {
        order: series.order,
        l: series.l,
        s: quad.params[0],
        stat_err,
        a1: quad.params[1],
        a1_err: quad.error(1),
        decay,
        cov: quad.cov.clone(),
        chi2_dof: quad.chi2 / dof as f64,
        s_cubic: cubic.params[0],
        a2: cubic.params[2],
        a2_err: cubic.error(2),
        sys_err,
        total_err: stat_err.hypot(sys_err),
    })
}

/// Fit report CSV: one row per fit.
pub fn fit_report_csv(header: &str, fits: &[FitResult]) -> String {
    let mut s = String::from(header);
    s.push_str("quantity,l,S,stat_err,sys_err,total_err,chi2_dof,parameters\n");
    for f in fits {
        let mut params = vec![
            format!("a1={}", io::fmt_f64(f.a1)),
            format!("a1_err={}", io::fmt_f64(f.a1_err)),
            format!("S_cubic={}", io::fmt_f64(f.s_cubic)),
            format!("a2={}", io::fmt_f64(f.a2)),
        ];
        for d in &f.decay {
            params.push(format!("b[{}]={}", d.dtau, io::fmt_f64(d.b)));
            params.push(format!("c[{}]={}", d.dtau, io::fmt_f64(d.c)));
        }
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            f.order.label(),
            f.l,
            io::fmt_f64(f.s),
            io::fmt_f64(f.stat_err),
            io::fmt_f64(f.sys_err),
            io::fmt_f64(f.total_err),
            io::fmt_f64(f.chi2_dof),
            params.join(";")
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand_distr::{Distribution, StandardNormal};

    fn single(a: f64, b: f64, c: f64, ks: impl Iterator<Item = usize>) -> Vec<SeriesPoint> {
        ks.map(|k| SeriesPoint { dtau: 0.3, k: k as f64, value: a + b * (-c * k as f64).exp(), error: 1e-3 }).collect()
    }

    pub(crate) fn synthetic(s: f64, a1: f64, terms: &[(f64, f64, f64)], ks: std::ops::RangeInclusive<usize>) -> EntropySeries {
        let mut points = Vec::new();
        for &(dtau, b, c) in terms {
            for k in ks.clone() {
                let value = s + a1 * dtau * dtau + b * (-c * k as f64).exp();
                points.push(SeriesPoint { dtau, k: k as f64, value, error: 1e-3 });
            }
        }
        EntropySeries { order: EntropyOrder::VonNeumann, l: 1, points }
    }

    const TERMS: [(f64, f64, f64); 3] = [(0.4, -0.3, 0.9), (0.3, -0.25, 0.8), (0.2, -0.2, 0.7)];

    #[test]
    fn single_fit_recovers_exact_model() {
        let f = fit_k_single(&single(0.7, -0.3, 0.9, 2..=8)).unwrap();
        assert!((f.a - 0.7).abs() < 1e-8 && (f.b + 0.3).abs() < 1e-8 && (f.c - 0.9).abs() < 1e-8, "{f:?}");
        assert!(f.chi2_dof < 1e-12);
        assert!(fit_k_single(&single(0.7, -0.3, 0.9, 2..=4)).is_err());
    }

    #[test]
    fn constant_data_fits_its_mean() {
        let mut pts = single(0.5, 0.0, 1.0, 2..=8);
        pts[3].error = 2e-3;
        let f = fit_k_single(&pts).unwrap();
        assert!((f.a - 0.5).abs() < 1e-12);
        assert!(f.b.abs() <= f.errors[1].max(1e-12), "{f:?}");
        assert!(f.errors[0] > 0.0 && f.errors[0].is_finite());
    }

    #[test]
    fn combined_fit_recovers_exact_model() {
        let f = fit_combined(&synthetic(0.55, 0.4, &TERMS, 2..=8)).unwrap();
        assert!((f.s - 0.55).abs() < 1e-8, "{}", f.s);
        assert!((f.a1 - 0.4).abs() < 1e-7);
        assert!(f.sys_err < 1e-7);
        assert!(f.a2.abs() < 1e-6);
        assert!(f.chi2_dof < 1e-10);
        assert!(f.decay.iter().all(|d| d.c > 0.0));
    }

    #[test]
    fn combined_fit_rejects_single_dtau() {
        assert!(fit_combined(&synthetic(0.55, 0.4, &TERMS[..1], 2..=8)).is_err());
    }

    #[test]
    fn shifting_k_leaves_s_unchanged() {
        let mut shifted = synthetic(0.55, 0.4, &TERMS, 2..=8);
        shifted.points.iter_mut().for_each(|p| p.k += 3.0);
        let (a, b) = (fit_combined(&synthetic(0.55, 0.4, &TERMS, 2..=8)).unwrap(), fit_combined(&shifted).unwrap());
        assert!((a.s - b.s).abs() < 1e-6);
        assert!((a.decay[0].b - b.decay[0].b).abs() > 1e-3);
    }

    #[test]
    fn infinite_errors_drop_a_slice() {
        let mut four = TERMS.to_vec();
        four.push((0.25, 0.5, 1.1));
        let mut s = synthetic(0.55, 0.4, &four, 2..=8);
        // corrupt and then disown the extra slice
        for p in s.points.iter_mut().filter(|p| p.dtau == 0.25) {
            p.value += 0.3;
            p.error = f64::INFINITY;
        }
        let f = fit_combined(&s).unwrap();
        let reference = fit_combined(&synthetic(0.55, 0.4, &TERMS, 2..=8)).unwrap();
        assert!((f.s - reference.s).abs() < 1e-6);
    }

    #[test]
    fn chi2_dof_limits() {
        let pts: Vec<(f64, f64, f64)> = (0..5).map(|i| (i as f64, 2.0 * i as f64, 0.5)).collect();
        assert_eq!(chi2_dof(&pts, |x| 2.0 * x, 2).unwrap(), 0.0);
        let off: Vec<(f64, f64, f64)> = pts.iter().map(|p| (p.0, p.1 + 0.5, 0.5)).collect();
        assert!((chi2_dof(&off, |x| 2.0 * x, 2).unwrap() - 5.0 / 3.0).abs() < 1e-14);
        assert!(chi2_dof(&pts[..2], |x| x, 2).is_err());
    }

    #[test]
    fn single_fit_pulls_are_standard_normal() {
        let clean = single(0.7, -0.3, 0.9, 2..=8);
        let sigma = 2e-3;
        let mut r = rng::stream(4, &[]);
        let pulls: Vec<f64> = (0..500)
            .map(|_| {
                let noisy: Vec<SeriesPoint> = clean
                    .iter()
                    .map(|p| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        SeriesPoint { value: p.value + sigma * z, error: sigma, ..*p }
                    })
                    .collect();
                let f = fit_k_single(&noisy).unwrap();
                (f.a - 0.7) / f.errors[0]
            })
            .collect();
        let mean = pulls.iter().sum::<f64>() / 500.0;
        let sd = (pulls.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / 499.0).sqrt();
        assert!(mean.abs() <= 0.1 && (0.85..=1.15).contains(&sd), "mean {mean}, sd {sd}");
    }
}

//! Symmetric eigensolver and entanglement entropies.

use crate::error::{Error, Result};

/// Default floor below which eigenvalues are dropped from entropy sums.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Dense square matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(f(i, j));
            }
        }
        Self { n, data }
    }

    pub fn from_rows(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Shape(format!("expected {} entries, got {}", n * n, data.len())));
        }
        Ok(Self { n, data })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.n, |i, j| self.get(j, i))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |a, &x| a.max(x.abs()))
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for j in i + 1..self.n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.n, other.n);
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let row = &mut out[i * n..(i + 1) * n];
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                let b = &other.data[k * n..(k + 1) * n];
                for (r, &bv) in row.iter_mut().zip(b) {
                    *r += a * bv;
                }
            }
        }
        Matrix { n, data: out }
    }

    /// `P·A·Pᵀ` for the permutation `perm` (new index `i` takes old `perm[i]`).
    pub fn permuted(&self, perm: &[usize]) -> Matrix {
        Matrix::from_fn(self.n, |i, j| self.get(perm[i], perm[j]))
    }

    fn off_diagonal_norm(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j {
                    s += self.get(i, j).powi(2);
                }
            }
        }
        s.sqrt()
    }

    fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Eigenvalues in descending order with optional bootstrap errors.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    pub errors: Option<Vec<f64>>,
}

/// Outcome of a Jacobi eigen-decomposition.
#[derive(Debug, Clone)]
pub struct JacobiResult {
    /// Unsorted eigenvalues (diagonal of the rotated matrix).
    pub values: Vec<f64>,
    /// Column `i` is the eigenvector of `values[i]`, when requested.
    pub vectors: Option<Matrix>,
    /// Off-diagonal Frobenius norm after each sweep.
    pub off_norms: Vec<f64>,
}

const MAX_SWEEPS: usize = 100;

fn check_symmetric(a: &Matrix) -> Result<()> {
    let tol = 1e-12 * a.max_abs().max(1.0);
    let asym = a.max_asymmetry();
    if asym > tol || asym.is_nan() {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

/// Cyclic Jacobi rotations until the off-diagonal norm falls below
/// `1e-14 · ‖A‖_F`.
pub fn jacobi(a: &Matrix, want_vectors: bool) -> Result<JacobiResult> {
    check_symmetric(a)?;
    let n = a.dim();
    let mut m = Matrix::from_fn(n, |i, j| 0.5 * (a.get(i, j) + a.get(j, i)));
    let mut v = want_vectors.then(|| Matrix::identity(n));
    let target = 1e-14 * m.frobenius();
    let mut off_norms = Vec::new();
    let mut off = m.off_diagonal_norm();
    while off > target && off_norms.len() < MAX_SWEEPS {
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m.get(k, p), m.get(k, q));
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let (mpk, mqk) = (m.get(p, k), m.get(q, k));
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                if let Some(v) = v.as_mut() {
                    for k in 0..n {
                        let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                        v.set(k, p, c * vkp - s * vkq);
                        v.set(k, q, s * vkp + c * vkq);
                    }
                }
            }
        }
        off = m.off_diagonal_norm();
        off_norms.push(off);
    }
    if off > target.max(1e-300) && off > 1e-13 * m.frobenius() {
        return Err(Error::Fit(format!("Jacobi did not converge (off-diagonal {off:e})")));
    }
    Ok(JacobiResult { values: (0..n).map(|i| m.get(i, i)).collect(), vectors: v, off_norms })
}

/// Eigenvalues of a real symmetric matrix, sorted descending.
pub fn eigh(a: &Matrix) -> Result<Spectrum> {
    let mut values = jacobi(a, false)?.values;
    values.sort_by(|x, y| y.total_cmp(x));
    Ok(Spectrum { eigenvalues: values, errors: None })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EntropyOrder {
    VonNeumann,
    Renyi(f64),
}

impl EntropyOrder {
    /// `n`, with von Neumann reported as 1.
    pub fn as_f64(&self) -> f64 {
        match self {
            Self::VonNeumann => 1.0,
            Self::Renyi(n) => *n,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::VonNeumann => "von_neumann".into(),
            Self::Renyi(n) => format!("renyi_{n}"),
        }
    }
}

/// Entropy in natural-log units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyValue {
    pub order: EntropyOrder,
    pub value: f64,
    pub error: f64,
}

/// `S = −Σ λ ln λ` over eigenvalues above `floor`.
pub fn von_neumann(sp: &Spectrum, floor: f64) -> EntropyValue {
    let value = -sp.eigenvalues.iter().filter(|&&l| l > floor).map(|&l| l * l.ln()).sum::<f64>();
    EntropyValue { order: EntropyOrder::VonNeumann, value, error: 0.0 }
}

/// `S_n = ln(Σ λⁿ)/(1−n)` over eigenvalues above the default floor.
pub fn renyi(sp: &Spectrum, n: f64) -> Result<EntropyValue> {
    if !(n > 0.0) || !n.is_finite() || n == 1.0 {
        return Err(Error::InvalidParams(format!("Rényi order must be positive and != 1, got {n}")));
    }
    let sum: f64 = sp.eigenvalues.iter().filter(|&&l| l > EIGEN_FLOOR).map(|&l| l.powf(n)).sum();
    Ok(EntropyValue { order: EntropyOrder::Renyi(n), value: sum.ln() / (1.0 - n), error: 0.0 })
}

pub fn entropy(sp: &Spectrum, order: EntropyOrder) -> Result<EntropyValue> {
    match order {
        EntropyOrder::VonNeumann => Ok(von_neumann(sp, EIGEN_FLOOR)),
        EntropyOrder::Renyi(n) => renyi(sp, n),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_symmetric(n: usize, seed: u64) -> Matrix {
        let mut r = rng::stream(seed, &[]);
        let mut m = Matrix::zeros(n);
        for i in 0..n {
            for j in i..n {
                let x = r.random_range(-1.0..1.0);
                m.set(i, j, x);
                m.set(j, i, x);
            }
        }
        m
    }

    fn random_spectrum(n: usize, r: &mut impl Rng) -> Spectrum {
        let mut v: Vec<f64> = (0..n).map(|_| r.random::<f64>().powi(3)).collect();
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        v.sort_by(|a, b| b.total_cmp(a));
        Spectrum { eigenvalues: v, errors: None }
    }

    /// det(A − λI) by Gaussian elimination with partial pivoting.
    fn char_poly(a: &Matrix, lambda: f64) -> f64 {
        let n = a.dim();
        let mut m: Vec<Vec<f64>> =
            (0..n).map(|i| (0..n).map(|j| a.get(i, j) - if i == j { lambda } else { 0.0 }).collect()).collect();
        let mut det = 1.0;
        for c in 0..n {
            let p = (c..n).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
            if m[p][c] == 0.0 {
                return 0.0;
            }
            if p != c {
                m.swap(p, c);
                det = -det;
            }
            det *= m[c][c];
            for r in c + 1..n {
                let f = m[r][c] / m[c][c];
                for k in c..n {
                    m[r][k] -= f * m[c][k];
                }
            }
        }
        det
    }

    /// Roots of the characteristic polynomial by grid scan plus bisection.
    fn char_poly_roots(a: &Matrix) -> Vec<f64> {
        let bound = (0..a.dim()).map(|i| (0..a.dim()).map(|j| a.get(i, j).abs()).sum::<f64>()).fold(0.0, f64::max);
        let steps = 40_000;
        let mut roots = Vec::new();
        let mut prev_x = -bound - 1e-3;
        let mut prev_f = char_poly(a, prev_x);
        for s in 1..=steps {
            let x = -bound - 1e-3 + (2.0 * bound + 2e-3) * s as f64 / steps as f64;
            let f = char_poly(a, x);
            if prev_f.signum() != f.signum() {
                let (mut lo, mut hi, mut flo) = (prev_x, x, prev_f);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    let fm = char_poly(a, mid);
                    if fm.signum() == flo.signum() {
                        lo = mid;
                        flo = fm;
                    } else {
                        hi = mid;
                    }
                }
                roots.push(0.5 * (lo + hi));
            }
            prev_x = x;
            prev_f = f;
        }
        roots.sort_by(|x, y| y.total_cmp(x));
        roots
    }

    #[test]
    fn scaled_identity() {
        let sp = eigh(&Matrix::from_fn(8, |i, j| if i == j { 0.125 } else { 0.0 })).unwrap();
        assert!(sp.eigenvalues.iter().all(|&x| (x - 0.125).abs() < 1e-16));
    }

    #[test]
    fn two_by_two_closed_form() {
        let (a, b) = (0.7, -0.2);
        let sp = eigh(&Matrix::from_rows(2, vec![a, b, b, a]).unwrap()).unwrap();
        assert!((sp.eigenvalues[0] - (a - b)).abs() < 1e-15);
        assert!((sp.eigenvalues[1] - (a + b)).abs() < 1e-15);
    }

    #[test]
    fn agrees_with_characteristic_polynomial() {
        for seed in 0..20 {
            let m = random_symmetric(4, seed);
            let roots = char_poly_roots(&m);
            assert_eq!(roots.len(), 4);
            let sp = eigh(&m).unwrap();
            for (x, y) in sp.eigenvalues.iter().zip(&roots) {
                assert!((x - y).abs() < 1e-10, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn off_diagonal_norm_decreases_per_sweep() {
        let r = jacobi(&random_symmetric(12, 3), true).unwrap();
        assert!(r.off_norms.windows(2).all(|w| w[1] <= w[0]));
        assert!(*r.off_norms.last().unwrap() < 1e-14 * 12.0);
        // eigenvectors reconstruct the matrix
        let m = random_symmetric(12, 3);
        let v = r.vectors.unwrap();
        for i in 0..12 {
            for j in 0..12 {
                let x: f64 = (0..12).map(|k| v.get(i, k) * r.values[k] * v.get(j, k)).sum();
                assert!((x - m.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn asymmetric_rejected() {
        let m = Matrix::from_rows(2, vec![1.0, 0.5, 0.4, 1.0]).unwrap();
        assert!(matches!(eigh(&m), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn entropy_identities() {
        let pure = Spectrum { eigenvalues: vec![1.0, 0.0, 0.0, 0.0], errors: None };
        assert_eq!(von_neumann(&pure, EIGEN_FLOOR).value, 0.0);
        assert_eq!(renyi(&pure, 2.0).unwrap().value, 0.0);
        for l in 1..=5 {
            let d = 1usize << l;
            let uni = Spectrum { eigenvalues: vec![1.0 / d as f64; d], errors: None };
            let expect = l as f64 * std::f64::consts::LN_2;
            assert!((von_neumann(&uni, EIGEN_FLOOR).value - expect).abs() < 1e-12);
            for n in [0.5, 2.0, 3.0, 9.0] {
                assert!((renyi(&uni, n).unwrap().value - expect).abs() < 1e-12);
            }
        }
        assert!(renyi(&pure, 1.0).is_err());
        assert!(renyi(&pure, -2.0).is_err());
    }

    #[test]
    fn renyi_approaches_von_neumann() {
        let mut r = rng::stream(44, &[]);
        for _ in 0..100 {
            let sp = random_spectrum(16, &mut r);
            let s = von_neumann(&sp, EIGEN_FLOOR).value;
            assert!((renyi(&sp, 1.001).unwrap().value - s).abs() <= 5e-3);
        }
    }

    #[test]
    fn noise_eigenvalues_excluded() {
        let sp = Spectrum { eigenvalues: vec![0.9, 0.1 + 1e-13, -1e-13], errors: None };
        assert!(von_neumann(&sp, EIGEN_FLOOR).value.is_finite());
        assert!(renyi(&sp, 0.5).unwrap().value.is_finite());
    }

    proptest! {
        #[test]
        fn renyi_non_increasing_in_order(seed in any::<u64>()) {
            let mut r = rng::stream(seed, &[]);
            let sp = random_spectrum(8, &mut r);
            let orders = [0.3, 0.7, 1.0, 1.5, 2.0, 3.0, 5.0, 9.0];
            let vals: Vec<f64> = orders.iter().map(|&n| if n == 1.0 {
                von_neumann(&sp, EIGEN_FLOOR).value
            } else {
                renyi(&sp, n).unwrap().value
            }).collect();
            for w in vals.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
        }

        #[test]
        fn entropies_basis_independent(seed in any::<u64>()) {
            let mut r = rng::stream(seed, &[]);
            let a = random_symmetric(8, seed);
            // A·Aᵀ is PSD; normalize to unit trace
            let mut rho = a.matmul(&a.transpose());
            let t = rho.trace();
            rho.scale(1.0 / t);
            let mut perm: Vec<usize> = (0..8).collect();
            for i in (1..8).rev() {
                perm.swap(i, r.random_range(0..=i));
            }
            let s1 = eigh(&rho).unwrap();
            let s2 = eigh(&rho.permuted(&perm)).unwrap();
            prop_assert!((von_neumann(&s1, EIGEN_FLOOR).value - von_neumann(&s2, EIGEN_FLOOR).value).abs() < 1e-12);
            prop_assert!((renyi(&s1, 2.0).unwrap().value - renyi(&s2, 2.0).unwrap().value).abs() < 1e-12);
        }
    }
}

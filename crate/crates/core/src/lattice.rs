//! Quantum-to-classical mapping of the transverse-field Ising chain.
//!
//! A chain of `L` spins at inverse temperature `β = m·Δτ` maps onto an
//! anisotropic classical Ising model on an `(m+1) × L` grid: periodic in
//! columns (space), open in rows (imaginary time). Rows `0` and `m` carry the
//! bra/ket product states of a density-matrix element, and their horizontal
//! bonds enter with half weight.

use crate::error::{Error, Result};

/// Physical and lattice parameters of one run.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelParams {
    /// Ising coupling `J`.
    pub j: f64,
    /// Transverse field `h`.
    pub h: f64,
    /// Imaginary-time step `Δτ`.
    pub dtau: f64,
    /// Chain length `L`.
    pub chain: usize,
    /// Temporal multiplier, `m = k·L`.
    pub k: usize,
    /// Length `l` of subsystem A (the first `l` sites).
    pub subsystem: usize,
}

impl ModelParams {
    pub fn new(j: f64, h: f64, dtau: f64, chain: usize, k: usize, subsystem: usize) -> Result<Self> {
        let p = Self { j, h, dtau, chain, k, subsystem };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if !(self.j > 0.0 && self.j.is_finite()) {
            return bad(format!("J must be positive, got {}", self.j));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return bad(format!("h must be positive, got {}", self.h));
        }
        if !(self.dtau > 0.0 && self.dtau.is_finite()) {
            return bad(format!("dtau must be positive, got {}", self.dtau));
        }
        if self.chain < 2 {
            return bad(format!("chain length must be >= 2, got {}", self.chain));
        }
        if self.k < 1 {
            return bad("k must be >= 1".into());
        }
        if self.subsystem < 1 || self.subsystem >= self.chain {
            return bad(format!(
                "subsystem length must lie in [1, {}], got {}",
                self.chain - 1,
                self.subsystem
            ));
        }
        Ok(())
    }

    /// Number of time slices `m = k·L`.
    pub fn m(&self) -> usize {
        self.k * self.chain
    }

    pub fn beta(&self) -> f64 {
        self.m() as f64 * self.dtau
    }

    /// Dimension `2^l` of the reduced density matrix.
    pub fn rdm_dim(&self) -> usize {
        1 << self.subsystem
    }
}

/// Anisotropic classical couplings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingSet {
    /// Spatial (horizontal) coupling `J_s = Δτ·J`.
    pub j_s: f64,
    /// Temporal (vertical) coupling `J_τ = artanh(exp(-2Δτh))`.
    pub j_tau: f64,
}

impl CouplingSet {
    pub fn from_raw(j: f64, h: f64, dtau: f64) -> Result<Self> {
        let x = dtau * h;
        if !(x > 0.0 && x.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "dtau*h must be positive, got {x} (temporal coupling would diverge)"
            )));
        }
        let t = (-2.0 * x).exp();
        let j_tau = 0.5 * ((1.0 + t) / (1.0 - t)).ln();
        Ok(Self { j_s: dtau * j, j_tau })
    }
}

/// Couplings of the classical model equivalent to `params`.
pub fn couplings(params: &ModelParams) -> Result<CouplingSet> {
    params.validate()?;
    CouplingSet::from_raw(params.j, params.h, params.dtau)
}

/// A lattice site `(row, col)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    pub row: usize,
    pub col: usize,
}

impl Site {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// Role a site plays in hierarchical sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SiteRole {
    BoundaryATop,
    BoundaryABottom,
    BoundaryBShared,
    CutLine,
    SquareCross,
    Heatbath,
}

/// Full classical configuration on the `(m+1) × L` grid, stored row-major as ±1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SpinConfig {
    rows: usize,
    cols: usize,
    spins: Vec<i8>,
}

impl SpinConfig {
    /// All-up configuration with `m` time slices and `cols` sites per row.
    pub fn new(m: usize, cols: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Shape("need at least two rows (m >= 1)".into()));
        }
        if cols < 2 {
            return Err(Error::Shape("need at least two columns".into()));
        }
        Ok(Self { rows: m + 1, cols, spins: vec![1; (m + 1) * cols] })
    }

    pub fn from_spins(m: usize, cols: usize, spins: Vec<i8>) -> Result<Self> {
        let mut c = Self::new(m, cols)?;
        if spins.len() != c.spins.len() {
            return Err(Error::Shape(format!(
                "expected {} spins, got {}",
                c.spins.len(),
                spins.len()
            )));
        }
        if spins.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::Shape("spins must be +1 or -1".into()));
        }
        c.spins = spins;
        Ok(c)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Index `m` of the last row.
    pub fn m(&self) -> usize {
        self.rows - 1
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> i8 {
        self.spins[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, s: i8) {
        debug_assert!(s == 1 || s == -1);
        self.spins[row * self.cols + col] = s;
    }

    #[inline]
    pub fn at(&self, site: Site) -> i8 {
        self.get(site.row, site.col)
    }

    pub fn spins(&self) -> &[i8] {
        &self.spins
    }

    pub fn row(&self, row: usize) -> &[i8] {
        &self.spins[row * self.cols..(row + 1) * self.cols]
    }

    /// Global spin flip.
    pub fn z2_flip(&self) -> Self {
        Self { spins: self.spins.iter().map(|s| -s).collect(), ..*self }
    }

    /// Cyclic shift of every row by `shift` columns.
    pub fn translate(&self, shift: usize) -> Self {
        let mut out = self.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(r, (c + shift) % self.cols, self.get(r, c));
            }
        }
        out
    }

    /// True when columns `l..L` of rows `0` and `m` agree.
    pub fn shares_boundary_b(&self, l: usize) -> bool {
        let m = self.m();
        (l..self.cols).all(|c| self.get(0, c) == self.get(m, c))
    }
}

/// Classical energy `Ẽ(s)` of a configuration.
///
/// Vertical bonds carry `J_τ`; horizontal bonds carry `J_s` in the interior
/// rows and `J_s/2` in rows `0` and `m`. Columns wrap, so for `L = 2` each row
/// counts the single pair twice.
pub fn energy(config: &SpinConfig, c: &CouplingSet) -> f64 {
    let (rows, cols) = (config.rows, config.cols);
    let mut vertical = 0i64;
    for r in 0..rows - 1 {
        let (a, b) = (config.row(r), config.row(r + 1));
        vertical += a.iter().zip(b).map(|(&x, &y)| (x * y) as i64).sum::<i64>();
    }
    let horizontal_row = |r: usize| -> i64 {
        let s = config.row(r);
        (0..cols).map(|j| (s[j] * s[(j + 1) % cols]) as i64).sum()
    };
    let inner: i64 = (1..rows - 1).map(horizontal_row).sum();
    let edge = horizontal_row(0) + horizontal_row(rows - 1);
    -c.j_tau * vertical as f64 - c.j_s * inner as f64 - 0.5 * c.j_s * edge as f64
}

/// Local field on an interior site: `Ẽ(flip) − Ẽ(s) = 2·s·h_loc`.
pub fn local_field(config: &SpinConfig, site: Site, c: &CouplingSet) -> Result<f64> {
    if site.row == 0 || site.row >= config.m() || site.col >= config.cols {
        return Err(Error::Shape(format!(
            "local field requires an interior site, got ({}, {})",
            site.row, site.col
        )));
    }
    Ok(local_field_unchecked(config, site, c))
}

#[inline]
pub(crate) fn local_field_unchecked(config: &SpinConfig, site: Site, c: &CouplingSet) -> f64 {
    let Site { row, col } = site;
    let cols = config.cols;
    let vertical = config.get(row - 1, col) + config.get(row + 1, col);
    let horizontal = config.get(row, (col + cols - 1) % cols) + config.get(row, (col + 1) % cols);
    c.j_tau * vertical as f64 + c.j_s * horizontal as f64
}

/// Product state of subsystem A: site 0 is the most significant bit and
/// spin `+1` maps to binary digit 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BasisState {
    bits: Vec<i8>,
}

impl BasisState {
    pub fn from_bits(bits: Vec<i8>) -> Result<Self> {
        if bits.is_empty() || bits.len() > 30 {
            return Err(Error::InvalidParams(format!("basis length {} out of range", bits.len())));
        }
        if bits.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::InvalidParams("basis bits must be +1 or -1".into()));
        }
        Ok(Self { bits })
    }

    pub fn from_index(index: usize, l: usize) -> Result<Self> {
        if l == 0 || l > 30 || index >= (1usize << l) {
            return Err(Error::InvalidParams(format!("index {index} out of range for l = {l}")));
        }
        let bits = (0..l)
            .map(|site| if index >> (l - 1 - site) & 1 == 1 { 1 } else { -1 })
            .collect();
        Ok(Self { bits })
    }

    pub fn index(&self) -> usize {
        self.bits.iter().fold(0, |acc, &s| (acc << 1) | usize::from(s == 1))
    }

    pub fn bits(&self) -> &[i8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Bitstring label, `1` for +1 and `0` for −1.
    pub fn label(&self) -> String {
        self.bits.iter().map(|&s| if s == 1 { '1' } else { '0' }).collect()
    }
}

pub fn state_to_index(b: &BasisState) -> usize {
    b.index()
}

pub fn index_to_state(i: usize, l: usize) -> Result<BasisState> {
    BasisState::from_index(i, l)
}

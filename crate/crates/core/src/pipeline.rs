//! Run configuration and the train → estimate → entropy → extrapolate chain.
//!
//! Every command works on the grid `subsystems × dtau × k` of one
//! [`RunConfig`] and writes its outputs below the configured directories.
//! Seeds of each grid point derive from the master seed, so a single-worker
//! rerun reproduces every file byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{self, EstimatorConfig, WeightStats};
use crate::extrapolate::{self, EntropySeries, FitResult, SeriesPoint};
use crate::han::build_hierarchy;
use crate::io::{self, WeightStream};
use crate::lattice::{couplings, ModelParams};
use crate::oracle::{self, TRANSFER_CAP};
use crate::rng;
use crate::spectral::EntropyOrder;
use crate::svg::{Plot, Series, Style};
use crate::training::{TrainConfig, Trainer};

const TAG_TRAIN: u64 = 10;
const TAG_ESTIMATE: u64 = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelGrid {
    #[serde(default = "one")]
    pub j: f64,
    #[serde(default = "one")]
    pub h: f64,
    pub chain: usize,
    pub subsystems: Vec<usize>,
    pub dtau: Vec<f64>,
    pub k: Vec<usize>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub checkpoints: PathBuf,
    pub weights: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { checkpoints: "runs/checkpoints".into(), weights: "runs/weights".into(), reports: "runs/reports".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelGrid,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub paths: Paths,
}

/// One `(l, Δτ, k)` point of the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub params: ModelParams,
}

impl GridPoint {
    pub fn name(&self) -> String {
        let p = &self.params;
        format!("L{}_l{}_k{}_dt{}", p.chain, p.subsystem, p.k, p.dtau)
    }

    fn tags(&self) -> [u64; 3] {
        let p = &self.params;
        [p.subsystem as u64, p.k as u64, p.dtau.to_bits()]
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::InvalidParams(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
        let mut c = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut c.paths.checkpoints, &mut c.paths.weights, &mut c.paths.reports] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.subsystems.is_empty() || m.dtau.is_empty() || m.k.is_empty() {
            return Err(Error::InvalidParams("model grids must be non-empty".into()));
        }
        for p in self.grid()? {
            p.params.validate()?;
        }
        self.training.validate()?;
        self.estimator.validate()
    }

    /// Short hash of the effective configuration, output locations excluded.
    pub fn hash(&self) -> String {
        let canonical = Self { paths: Paths::default(), ..self.clone() };
        io::content_id(canonical.to_toml().as_bytes())
    }

    pub fn grid(&self) -> Result<Vec<GridPoint>> {
        let m = &self.model;
        let mut out = Vec::new();
        for &l in &m.subsystems {
            for &dtau in &m.dtau {
                for &k in &m.k {
                    out.push(GridPoint { params: ModelParams::new(m.j, m.h, dtau, m.chain, k, l)? });
                }
            }
        }
        Ok(out)
    }

    pub fn checkpoint_path(&self, p: &GridPoint) -> PathBuf {
        self.paths.checkpoints.join(format!("{}.ckpt", p.name()))
    }

    pub fn weights_dir(&self, p: &GridPoint) -> PathBuf {
        self.paths.weights.join(p.name())
    }

    pub fn report(&self, file: &str) -> PathBuf {
        self.paths.reports.join(file)
    }

    fn header(&self, extra: &[(&str, String)]) -> String {
        let mut pairs = vec![("config", self.hash()), ("seed", self.seed.to_string())];
        pairs.extend(extra.iter().cloned());
        io::header_line(&pairs)
    }

    /// Header for tables that span the grid, tagged with a digest of every checkpoint id.
    fn grid_header(&self) -> Result<String> {
        let mut ids = String::new();
        for p in self.grid()? {
            match fs::read(self.checkpoint_path(&p)) {
                Ok(bytes) => ids.push_str(&io::content_id(&bytes)),
                Err(_) => ids.push_str("none"),
            }
        }
        Ok(self.header(&[("checkpoints", io::content_id(ids.as_bytes()))]))
    }

    fn train_config(&self, p: &GridPoint) -> TrainConfig {
        let mut path = vec![TAG_TRAIN];
        path.extend(p.tags());
        TrainConfig { seed: rng::derive(self.seed, &path), ..self.training.clone() }
    }

    fn estimate_seed(&self, p: &GridPoint) -> u64 {
        let mut path = vec![TAG_ESTIMATE];
        path.extend(p.tags());
        rng::derive(self.seed, &path)
    }
}

/// Runtime options shared by all commands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub jobs: usize,
    pub force: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { jobs: 1, force: false }
    }
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidParams(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn write(path: &Path, text: &str) -> Result<()> {
    io::write_atomic(path, text.as_bytes())
}

/// What a command did at one grid point.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Trained { final_ess: f64 },
    Skipped,
    Estimated,
}

/// Trains every grid point that has no checkpoint yet (all with `force`).
pub fn cmd_train(cfg: &RunConfig, opts: RunOptions) -> Result<Vec<(GridPoint, Action)>> {
    let grid = cfg.grid()?;
    with_pool(opts.jobs, || {
        use rayon::prelude::*;
        grid.par_iter()
            .map(|p| {
                let path = cfg.checkpoint_path(p);
                if path.exists() && !opts.force {
                    return Ok((*p, Action::Skipped));
                }
                log::info!("training {}", p.name());
                let mut trainer = Trainer::new(p.params, cfg.train_config(p))?;
                let report = trainer.run()?;
                let id = io::save_checkpoint(&path, &p.params, trainer.nets())?;
                let header = cfg.header(&[("checkpoint", id), ("point", p.name())]);
                write(&cfg.report(&format!("{}_train.csv", p.name())), &report.to_csv(&header))?;
                Ok((*p, Action::Trained { final_ess: report.final_ess }))
            })
            .collect::<Result<Vec<_>>>()
    })?
}

fn stream_path(cfg: &RunConfig, p: &GridPoint, mu: usize, nu: usize) -> PathBuf {
    cfg.weights_dir(p).join(format!("mu{mu}_nu{nu}.wts"))
}

fn write_estimate(cfg: &RunConfig, p: &GridPoint, est: &estimator::DensityMatrixEstimate, ckpt: &str) -> Result<()> {
    let header = cfg.header(&[("checkpoint", ckpt.to_string()), ("point", p.name()), ("n_samples", est.n_samples.to_string())]);
    let l = p.params.subsystem;
    write(&cfg.report(&format!("{}_rho.csv", p.name())), &estimator::matrix_csv(&header, l, &est.rho, Some(&est.err), Some(&est.ess)))?;
    write(&cfg.report(&format!("{}_spectrum.csv", p.name())), &estimator::spectrum_csv(&header, &est.spectrum, &est.entropies))
}

/// Samples every matrix element at every grid point from its checkpoint.
pub fn cmd_estimate(cfg: &RunConfig, opts: RunOptions) -> Result<Vec<(GridPoint, Action)>> {
    let grid = cfg.grid()?;
    with_pool(opts.jobs, || {
        use rayon::prelude::*;
        grid.par_iter()
            .map(|p| {
                let ckpt = io::load_checkpoint(&cfg.checkpoint_path(p))?;
                ckpt.header.check(&p.params)?;
                let plan = build_hierarchy(&p.params)?;
                let c = couplings(&p.params)?;
                let seed = cfg.estimate_seed(p);
                log::info!("estimating {}", p.name());
                let (est, streams) = estimator::estimate_rdm(&plan, &ckpt.nets, &c, &cfg.estimator, seed)?;
                for s in &streams {
                    WeightStream {
                        header: io::LatticeHeader::of(&p.params),
                        mu: s.mu,
                        nu: s.nu,
                        seed,
                        log_weights: s.log_weights.clone(),
                    }
                    .save(&stream_path(cfg, p, s.mu, s.nu))?;
                }
                write_estimate(cfg, p, &est, &ckpt.id)?;
                Ok((*p, Action::Estimated))
            })
            .collect::<Result<Vec<_>>>()
    })?
}

/// Entropy of one grid point and order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyRow {
    pub l: usize,
    pub dtau: f64,
    pub k: usize,
    pub order: EntropyOrder,
    pub value: f64,
    pub error: f64,
}

fn order_from_n(n: f64) -> EntropyOrder {
    if n == 1.0 {
        EntropyOrder::VonNeumann
    } else {
        EntropyOrder::Renyi(n)
    }
}

/// Re-analyses the stored weight streams and tabulates entropies.
pub fn cmd_entropy(cfg: &RunConfig) -> Result<Vec<EntropyRow>> {
    let mut rows = Vec::new();
    for p in cfg.grid()? {
        let d = p.params.rdm_dim();
        let mut streams = Vec::with_capacity(d * d);
        for mu in 0..d {
            for nu in 0..d {
                let ws = WeightStream::load(&stream_path(cfg, &p, mu, nu))?;
                ws.header.check(&p.params)?;
                streams.push(WeightStats::from_log_weights(mu, nu, ws.log_weights, cfg.estimator.ess_floor)?);
            }
        }
        let est = estimator::assemble(&streams, p.params.subsystem, &cfg.estimator, cfg.estimate_seed(&p))?;
        for e in &est.entropies {
            rows.push(EntropyRow { l: p.params.subsystem, dtau: p.params.dtau, k: p.params.k, order: e.order, value: e.value, error: e.error });
        }
    }
    let mut csv = cfg.grid_header()?;
    csv.push_str("l,dtau,k,n,value,error\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{},{},{}\n", r.l, r.dtau, r.k, r.order.as_f64(), io::fmt_f64(r.value), io::fmt_f64(r.error)));
    }
    write(&cfg.report("entropies.csv"), &csv)?;
    Ok(rows)
}

/// Reads a table written by [`cmd_entropy`].
pub fn read_entropies(path: &Path) -> Result<Vec<EntropyRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    let bad = |line: &str| Error::Format(format!("bad entropy row: {line}"));
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("l,"))
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(line));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
            Ok(EntropyRow {
                l: f[0].parse().map_err(|_| bad(line))?,
                dtau: num(f[1])?,
                k: f[2].parse().map_err(|_| bad(line))?,
                order: order_from_n(num(f[3])?),
                value: num(f[4])?,
                error: num(f[5])?,
            })
        })
        .collect()
}

/// Groups entropy rows into one series per `(l, order)`.
pub fn series_from_rows(rows: &[EntropyRow]) -> Vec<EntropySeries> {
    let mut map: BTreeMap<(usize, u64), EntropySeries> = BTreeMap::new();
    for r in rows {
        map.entry((r.l, r.order.as_f64().to_bits()))
            .or_insert_with(|| EntropySeries { order: r.order, l: r.l, points: Vec::new() })
            .points
            .push(SeriesPoint { dtau: r.dtau, k: r.k as f64, value: r.value, error: r.error });
    }
    map.into_values().collect()
}

/// Extrapolated results with the exact references they are plotted against.
#[derive(Debug, Clone, PartialEq)]
pub struct Extrapolation {
    pub fits: Vec<FitResult>,
    /// Exact ground-state von Neumann entropy per `l`, when the chain is small enough.
    pub exact: Vec<(usize, f64)>,
}

/// Combined fits for every `(l, order)` with CSV and SVG output.
pub fn cmd_extrapolate(cfg: &RunConfig) -> Result<Extrapolation> {
    let rows = read_entropies(&cfg.report("entropies.csv"))?;
    let series = series_from_rows(&rows);
    let fits = series.iter().map(extrapolate::fit_combined).collect::<Result<Vec<_>>>()?;
    write(&cfg.report("fits.csv"), &extrapolate::fit_report_csv(&cfg.grid_header()?, &fits))?;

    let chain = cfg.model.chain;
    let exact: Vec<(usize, f64)> = if chain <= 12 {
        let sys = oracle::QuantumSystem::new(chain, cfg.model.j, cfg.model.h)?;
        let mut ls = cfg.model.subsystems.clone();
        ls.sort_unstable();
        ls.into_iter().map(|l| Ok((l, oracle::from_system(&sys, l)?.von_neumann))).collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    // entropy against k, one panel per (l, order)
    let mut curves = cfg.grid_header()?;
    curves.push_str("quantity,l,dtau,k,value,error,model\n");
    for (s, f) in series.iter().zip(&fits) {
        let mut plot = Plot::new(format!("{} l={}", s.order.label(), s.l), "k", "entropy");
        for dtau in s.dtaus() {
            let pts = s.at_dtau(dtau);
            for p in &pts {
                let model = f.predict(dtau, p.k).unwrap_or(f64::NAN);
                curves.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    s.order.label(),
                    s.l,
                    dtau,
                    p.k,
                    io::fmt_f64(p.value),
                    io::fmt_f64(p.error),
                    io::fmt_f64(model)
                ));
            }
            plot.series.push(Series::new(format!("dtau={dtau}"), Style::Markers, pts.iter().map(|p| (p.k, p.value, p.error)).collect()));
            let (k0, k1) = (pts[0].k, pts[pts.len() - 1].k);
            let line = (0..=40).map(|i| k0 + (k1 - k0) * i as f64 / 40.0).map(|k| (k, f.predict(dtau, k).unwrap_or(f64::NAN), 0.0)).collect();
            plot.series.push(Series::new(format!("fit dtau={dtau}"), Style::Line, line));
        }
        let (k0, k1) = (s.points.iter().map(|p| p.k).fold(f64::INFINITY, f64::min), s.points.iter().map(|p| p.k).fold(0.0, f64::max));
        plot.series.push(Series::new("S continuum", Style::Dashed, vec![(k0, f.s, 0.0), (k1, f.s, 0.0)]));
        write(&cfg.report(&format!("entropy_vs_k_{}_l{}.svg", s.order.label(), s.l)), &plot.render())?;
    }
    write(&cfg.report("extrapolation_k.csv"), &curves)?;

    // von Neumann against l with the CFT curve
    let vn: Vec<&FitResult> = fits.iter().filter(|f| f.order == EntropyOrder::VonNeumann).collect();
    let cft: Vec<(f64, f64, f64)> = (0..=100)
        .map(|i| 1.0 + (chain as f64 - 2.0) * i as f64 / 100.0)
        .map(|x| {
            let chord = (chain as f64 / std::f64::consts::PI * (std::f64::consts::PI * x / chain as f64).sin()).ln();
            (x, chord / 6.0 + oracle::B1, 0.0)
        })
        .collect();
    let mut table = cfg.grid_header()?;
    table.push_str("l,S,total_err,cft,exact\n");
    for f in &vn {
        let ex = exact.iter().find(|e| e.0 == f.l).map(|e| e.1).unwrap_or(f64::NAN);
        let c = oracle::cft_entropy(chain, f.l, EntropyOrder::VonNeumann, None)?;
        table.push_str(&format!("{},{},{},{},{}\n", f.l, io::fmt_f64(f.s), io::fmt_f64(f.total_err), io::fmt_f64(c), io::fmt_f64(ex)));
    }
    write(&cfg.report("entropy_vs_l.csv"), &table)?;
    let mut plot = Plot::new(format!("von Neumann entropy, L={chain}"), "l", "S")
        .with(Series::new("extrapolated", Style::Markers, vn.iter().map(|f| (f.l as f64, f.s, f.total_err)).collect()))
        .with(Series::new("CFT", Style::Dashed, cft));
    if !exact.is_empty() {
        plot.series.push(Series::new("exact", Style::Line, exact.iter().map(|&(l, s)| (l as f64, s, 0.0)).collect()));
    }
    write(&cfg.report("entropy_vs_l.svg"), &plot.render())?;

    // S_n against n per l
    let mut plot = Plot::new("Renyi entropies", "n", "S_n");
    for l in &cfg.model.subsystems {
        let mut pts: Vec<(f64, f64, f64)> = fits.iter().filter(|f| f.l == *l).map(|f| (f.order.as_f64(), f.s, f.total_err)).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        plot.series.push(Series::new(format!("l={l}"), Style::Markers, pts));
    }
    write(&cfg.report("renyi_vs_n.svg"), &plot.render())?;
    Ok(Extrapolation { fits, exact })
}

/// Exact classical matrices per grid point and exact ground-state entropies.
pub fn cmd_oracle(cfg: &RunConfig) -> Result<()> {
    let orders = cfg.estimator.orders();
    if cfg.model.chain <= TRANSFER_CAP {
        for p in cfg.grid()? {
            let exact = oracle::transfer_matrix_rdm(&p.params)?;
            let header = cfg.header(&[("oracle", "true".into()), ("point", p.name())]);
            write(
                &cfg.report(&format!("{}_rho_oracle.csv", p.name())),
                &estimator::matrix_csv(&header, p.params.subsystem, &exact.rho, None, None),
            )?;
        }
    } else {
        log::warn!("L = {} exceeds the transfer-matrix cap; skipping classical references", cfg.model.chain);
    }
    if cfg.model.chain <= 12 {
        let sys = oracle::QuantumSystem::new(cfg.model.chain, cfg.model.j, cfg.model.h)?;
        let mut csv = cfg.header(&[("oracle", "true".into())]);
        csv.push_str("l,n,value\n");
        for &l in &cfg.model.subsystems {
            let gs = oracle::from_system(&sys, l)?;
            for &o in &orders {
                csv.push_str(&format!("{l},{},{}\n", o.as_f64(), io::fmt_f64(gs.entropy(o)?)));
            }
            let header = cfg.header(&[("oracle", "true".into()), ("ground_state_l", l.to_string())]);
            write(&cfg.report(&format!("ground_state_l{l}_rho_oracle.csv")), &estimator::matrix_csv(&header, l, &gs.rho, None, None))?;
        }
        write(&cfg.report("ground_state_entropies_oracle.csv"), &csv)?;
    }
    Ok(())
}

/// Plain-text summary of fits against the references.
pub fn cmd_report(cfg: &RunConfig) -> Result<String> {
    let ex = cmd_extrapolate(cfg)?;
    let mut s = cfg.grid_header()?;
    s.push_str(&format!("L={}  J={}  h={}\n", cfg.model.chain, cfg.model.j, cfg.model.h));
    s.push_str("quantity          l   S            stat       sys        total      chi2/dof  exact\n");
    for f in &ex.fits {
        let exact = if f.order == EntropyOrder::VonNeumann {
            ex.exact.iter().find(|e| e.0 == f.l).map(|e| format!("{:.6}", e.1)).unwrap_or_default()
        } else {
            String::new()
        };
        s.push_str(&format!(
            "{:<16} {:>2}   {:<12.6} {:<10.2e} {:<10.2e} {:<10.2e} {:<9.3} {}\n",
            f.order.label(),
            f.l,
            f.s,
            f.stat_err,
            f.sys_err,
            f.total_err,
            f.chi2_dof,
            exact
        ));
    }
    write(&cfg.report("summary.txt"), &s)?;
    Ok(s)
}

//! Self-sampled (backward) KL training of a hierarchy.
//!
//! Each epoch draws one batch: random boundary states `(μ_A, ν_A)`, then a
//! configuration from the current networks. The loss is the batch mean of
//! `F = Ẽ + log q`, and its gradient is estimated with the score function
//! `mean[(F − F̄) ∇ log q]`. All networks share one Adam state.
//!
//! Work is cut into fixed-size chunks with their own random streams and
//! gradients are reduced in chunk order, so results do not depend on the
//! number of worker threads.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoreg::MaskedNet;
use crate::error::{Error, Result};
use crate::han::{build_hierarchy, HierarchyPlan, SamplerScratch};
use crate::io::{self, LatticeHeader, Reader, Writer};
use crate::lattice::{couplings, energy, BasisState, CouplingSet, ModelParams, SpinConfig};
use crate::rng;

/// Samples per independently seeded chunk.
pub const CHUNK: usize = 64;
/// Number of boundary pairs visited by an ESS probe.
pub const PROBE_PAIRS: usize = 16;
/// Divergence rollbacks tolerated before training aborts.
pub const MAX_ROLLBACKS: usize = 2;

pub const STATE_MAGIC: &[u8; 8] = b"HANTRST1";

const TAG_TRAIN: u64 = 1;
const TAG_PROBE: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub lr: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub stages: Vec<Stage>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Hidden width as a multiple of the group size.
    pub hidden_factor: usize,
    /// Epochs between rollback snapshots (and on-disk checkpoints).
    pub checkpoint_every: usize,
    /// Epochs between ESS probes; `0` probes only at the start and end.
    pub ess_interval: usize,
    /// Samples per boundary pair in one probe.
    pub ess_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::production()
    }
}

impl TrainConfig {
    /// Four stages of 30000 epochs at batch 2048.
    pub fn production() -> Self {
        Self {
            batch_size: 2048,
            stages: [3e-3, 1e-3, 1e-4, 1e-5].iter().map(|&lr| Stage { lr, epochs: 30000 }).collect(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            hidden_factor: 4,
            checkpoint_every: 1000,
            ess_interval: 1000,
            ess_samples: 1024,
        }
    }

    /// Short schedule for small lattices on a single core.
    pub fn desk() -> Self {
        Self {
            batch_size: 256,
            stages: [3e-3, 1e-3, 1e-4, 1e-5].iter().map(|&lr| Stage { lr, epochs: 500 }).collect(),
            checkpoint_every: 250,
            ess_interval: 250,
            ess_samples: 512,
            ..Self::production()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.stages.is_empty() {
            return bad("at least one training stage is required");
        }
        let mut prev = f64::INFINITY;
        for s in &self.stages {
            if !(s.lr > 0.0 && s.lr.is_finite()) || s.lr > prev {
                return bad("stage learning rates must be positive and non-increasing");
            }
            prev = s.lr;
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam requires beta1, beta2 in [0, 1) and eps > 0");
        }
        if self.hidden_factor == 0 || self.checkpoint_every == 0 || self.ess_samples == 0 {
            return bad("hidden_factor, checkpoint_every and ess_samples must be >= 1");
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }

    /// Stage learning rate in force at `epoch`, or `None` past the schedule.
    pub fn lr_at(&self, epoch: usize) -> Option<f64> {
        let mut end = 0;
        for s in &self.stages {
            end += s.epochs;
            if epoch < end {
                return Some(s.lr);
            }
        }
        None
    }
}

/// Adam with one moment buffer per network.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(nets: &[MaskedNet], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || nets.iter().map(|n| vec![0.0; n.n_params()]).collect();
        Self { beta1, beta2, eps, t: 0, m: zeros(), v: zeros() }
    }

    /// One descent step along `grads`.
    pub fn step(&mut self, nets: &mut [MaskedNet], grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, net) in nets.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in net.params_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                if m[j] != 0.0 {
                    *p -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                }
            }
        }
    }
}

/// `(Σw)² / (N Σw²)` from log-weights.
pub fn ess(log_weights: &[f64]) -> f64 {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if log_weights.is_empty() || !max.is_finite() {
        return f64::NAN;
    }
    let (mut s1, mut s2) = (0.0, 0.0);
    for &lw in log_weights {
        let w = (lw - max).exp();
        s1 += w;
        s2 += w * w;
    }
    s1 * s1 / (log_weights.len() as f64 * s2)
}

/// Independent fair coin flips for all `2l` boundary spins.
pub fn draw_boundary_states<R: rand::Rng + ?Sized>(rng: &mut R, l: usize) -> (BasisState, BasisState) {
    let mut draw = || {
        let bits = (0..l).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
        BasisState::from_bits(bits).expect("spins are ±1")
    };
    let mu = draw();
    let nu = draw();
    (mu, nu)
}

/// One sampled configuration with its loss signal.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSample {
    pub config: SpinConfig,
    pub energy: f64,
    pub log_q: f64,
}

impl BatchSample {
    /// `Ẽ + log q`.
    pub fn signal(&self) -> f64 {
        self.energy + self.log_q
    }

    /// Log importance weight `−Ẽ − log q`.
    pub fn log_weight(&self) -> f64 {
        -self.signal()
    }
}

/// Batch loss and its score-function gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub f_mean: f64,
    pub f_std: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Draws `n` samples in stream `path`, with boundaries fixed or random.
pub fn sample_batch(
    plan: &HierarchyPlan,
    nets: &[MaskedNet],
    c: &CouplingSet,
    boundary: Option<(&BasisState, &BasisState)>,
    n: usize,
    seed: u64,
    path: &[u64],
) -> Vec<BatchSample> {
    let chunks = n.div_ceil(CHUNK);
    let per_chunk: Vec<Vec<BatchSample>> = (0..chunks)
        .into_par_iter()
        .map(|ci| {
            let mut p = path.to_vec();
            p.push(ci as u64);
            let mut r = rng::stream(seed, &p);
            let mut scratch = SamplerScratch::default();
            let len = CHUNK.min(n - ci * CHUNK);
            let mut out = Vec::with_capacity(len);
            for _ in 0..len {
                let (mu, nu) = match boundary {
                    Some((a, b)) => (a.clone(), b.clone()),
                    None => draw_boundary_states(&mut r, plan.subsystem()),
                };
                let mut config = SpinConfig::new(plan.m(), plan.cols()).expect("plan dimensions are valid");
                let log_q = plan.sample_into(nets, &mu, &nu, c, &mut r, &mut config, &mut scratch);
                let energy = energy(&config, c);
                out.push(BatchSample { config, energy, log_q });
            }
            out
        })
        .collect();
    per_chunk.into_iter().flatten().collect()
}

/// Batch mean and spread of `F` with the baselined gradient.
pub fn loss_batch(plan: &HierarchyPlan, nets: &[MaskedNet], batch: &[BatchSample]) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::InvalidParams("empty batch".into()));
    }
    let n = batch.len() as f64;
    let f_mean = batch.iter().map(BatchSample::signal).sum::<f64>() / n;
    let var = batch.iter().map(|s| (s.signal() - f_mean).powi(2)).sum::<f64>() / n;
    if !f_mean.is_finite() {
        return Err(Error::Divergence(format!("non-finite loss {f_mean}")));
    }
    let partial: Vec<Vec<Vec<f64>>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g: Vec<Vec<f64>> = nets.iter().map(|net| vec![0.0; net.n_params()]).collect();
            let mut scratch = SamplerScratch::default();
            for s in chunk {
                plan.accumulate_grad(nets, &s.config, (s.signal() - f_mean) / n, &mut g, &mut scratch);
            }
            g
        })
        .collect();
    let mut grads = partial[0].clone();
    for g in &partial[1..] {
        for (acc, x) in grads.iter_mut().zip(g) {
            acc.iter_mut().zip(x).for_each(|(a, b)| *a += b);
        }
    }
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::Divergence("non-finite gradient".into()));
    }
    Ok(BatchLoss { f_mean, f_std: var.sqrt(), grads })
}

/// Boundary pairs visited by ESS probes: all of them when few, else a fixed random subset.
pub fn probe_pairs(l: usize, seed: u64) -> Vec<(BasisState, BasisState)> {
    let d = 1usize << l;
    if d * d <= PROBE_PAIRS {
        return (0..d * d)
            .map(|i| (BasisState::from_index(i / d, l).unwrap(), BasisState::from_index(i % d, l).unwrap()))
            .collect();
    }
    let mut r = rng::stream(seed, &[TAG_PROBE, u64::MAX]);
    (0..PROBE_PAIRS).map(|_| draw_boundary_states(&mut r, l)).collect()
}

/// Mean per-pair ESS of the current networks.
pub fn probe_ess(
    plan: &HierarchyPlan,
    nets: &[MaskedNet],
    c: &CouplingSet,
    samples: usize,
    seed: u64,
    epoch: usize,
) -> f64 {
    let pairs = probe_pairs(plan.subsystem(), seed);
    let total: f64 = pairs
        .iter()
        .enumerate()
        .map(|(i, (mu, nu))| {
            let batch = sample_batch(plan, nets, c, Some((mu, nu)), samples, seed, &[TAG_PROBE, epoch as u64, i as u64]);
            let lw: Vec<f64> = batch.iter().map(BatchSample::log_weight).collect();
            ess(&lw)
        })
        .sum();
    total / pairs.len() as f64
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub f_mean: f64,
    pub f_std: f64,
    /// `NaN` when no probe ran at this epoch.
    pub ess: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub final_ess: f64,
    pub rollbacks: usize,
    pub wall_seconds: f64,
    pub checkpoint_id: Option<String>,
}

impl TrainReport {
    /// ESS probes as `(epoch, ess)`.
    pub fn ess_trace(&self) -> Vec<(usize, f64)> {
        self.records.iter().filter(|r| !r.ess.is_nan()).map(|r| (r.epoch, r.ess)).collect()
    }

    pub fn to_csv(&self, header: &str) -> String {
        let mut s = String::from(header);
        s.push_str("epoch,F_q_mean,F_q_std,ess,lr\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch,
                io::fmt_f64(r.f_mean),
                io::fmt_f64(r.f_std),
                io::fmt_f64(r.ess),
                io::fmt_f64(r.lr)
            ));
        }
        s
    }
}

#[derive(Debug, Clone)]
struct Snapshot {
    epoch: usize,
    nets: Vec<MaskedNet>,
    adam: Adam,
    records: usize,
}

/// Resumable training loop for one lattice.
#[derive(Debug, Clone)]
pub struct Trainer {
    params: ModelParams,
    config: TrainConfig,
    plan: HierarchyPlan,
    couplings: CouplingSet,
    nets: Vec<MaskedNet>,
    adam: Adam,
    epoch: usize,
    lr_scale: f64,
    rollbacks: usize,
    records: Vec<EpochRecord>,
    snapshot: Snapshot,
    checkpoint_path: Option<PathBuf>,
    checkpoint_id: Option<String>,
}

impl Trainer {
    pub fn new(params: ModelParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let plan = build_hierarchy(&params)?;
        let nets = plan.init_nets(config.hidden_factor, rng::derive(config.seed, &[0]))?;
        Self::assemble(params, config, plan, nets, None)
    }

    fn assemble(
        params: ModelParams,
        config: TrainConfig,
        plan: HierarchyPlan,
        nets: Vec<MaskedNet>,
        adam: Option<Adam>,
    ) -> Result<Self> {
        plan.check_nets(&nets)?;
        let couplings = couplings(&params)?;
        let adam = adam.unwrap_or_else(|| Adam::new(&nets, config.beta1, config.beta2, config.eps));
        let snapshot = Snapshot { epoch: 0, nets: nets.clone(), adam: adam.clone(), records: 0 };
        Ok(Self {
            params,
            config,
            plan,
            couplings,
            nets,
            adam,
            epoch: 0,
            lr_scale: 1.0,
            rollbacks: 0,
            records: Vec::new(),
            snapshot,
            checkpoint_path: None,
            checkpoint_id: None,
        })
    }

    /// Also write the networks to `path` at every snapshot.
    pub fn with_checkpoint_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.checkpoint_path = Some(path.into());
        self
    }

    pub fn plan(&self) -> &HierarchyPlan {
        &self.plan
    }

    pub fn nets(&self) -> &[MaskedNet] {
        &self.nets
    }

    pub fn into_nets(self) -> Vec<MaskedNet> {
        self.nets
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.total_epochs()
    }

    fn probe(&self) -> f64 {
        probe_ess(&self.plan, &self.nets, &self.couplings, self.config.ess_samples, self.config.seed, self.epoch)
    }

    fn take_snapshot(&mut self) -> Result<()> {
        self.snapshot =
            Snapshot { epoch: self.epoch, nets: self.nets.clone(), adam: self.adam.clone(), records: self.records.len() };
        if let Some(path) = &self.checkpoint_path {
            self.checkpoint_id = Some(io::save_checkpoint(path, &self.params, &self.nets)?);
        }
        Ok(())
    }

    fn rollback(&mut self, cause: Error) -> Result<()> {
        self.rollbacks += 1;
        if self.rollbacks > MAX_ROLLBACKS {
            return Err(cause);
        }
        log::warn!("{cause}; rolling back to epoch {} and halving the learning rate", self.snapshot.epoch);
        self.epoch = self.snapshot.epoch;
        self.nets = self.snapshot.nets.clone();
        self.adam = self.snapshot.adam.clone();
        self.records.truncate(self.snapshot.records);
        self.lr_scale *= 0.5;
        Ok(())
    }

    /// Runs one epoch. Returns `None` once the schedule is exhausted.
    pub fn step(&mut self) -> Result<Option<EpochRecord>> {
        let Some(stage_lr) = self.config.lr_at(self.epoch) else {
            return Ok(None);
        };
        let lr = stage_lr * self.lr_scale;
        let probe_now = self.epoch == 0 || (self.config.ess_interval > 0 && self.epoch % self.config.ess_interval == 0);
        let ess = if probe_now { self.probe() } else { f64::NAN };
        let batch = sample_batch(
            &self.plan,
            &self.nets,
            &self.couplings,
            None,
            self.config.batch_size,
            self.config.seed,
            &[TAG_TRAIN, self.epoch as u64],
        );
        let loss = match loss_batch(&self.plan, &self.nets, &batch) {
            Ok(l) => l,
            Err(e @ Error::Divergence(_)) => {
                self.rollback(e)?;
                return self.step();
            }
            Err(e) => return Err(e),
        };
        self.adam.step(&mut self.nets, &loss.grads, lr);
        if self.nets.iter().any(|n| n.params().iter().any(|p| !p.is_finite())) {
            self.rollback(Error::Divergence("non-finite parameters".into()))?;
            return self.step();
        }
        let rec = EpochRecord { epoch: self.epoch, f_mean: loss.f_mean, f_std: loss.f_std, ess, lr };
        self.records.push(rec);
        self.epoch += 1;
        if self.epoch % self.config.checkpoint_every == 0 {
            self.take_snapshot()?;
        }
        Ok(Some(rec))
    }

    /// Runs at most `n` epochs.
    pub fn run_epochs(&mut self, n: usize) -> Result<()> {
        for _ in 0..n {
            if self.step()?.is_none() {
                break;
            }
        }
        Ok(())
    }

    /// Runs the remaining schedule and reports.
    pub fn run(&mut self) -> Result<TrainReport> {
        let start = Instant::now();
        while let Some(rec) = self.step()? {
            if !rec.ess.is_nan() {
                log::info!("epoch {:>6}  F_q {:>12.6}  ess {:.4}  lr {:e}", rec.epoch, rec.f_mean, rec.ess, rec.lr);
            }
        }
        let final_ess = self.probe();
        if self.checkpoint_path.is_some() {
            self.take_snapshot()?;
        }
        Ok(TrainReport {
            records: self.records.clone(),
            final_ess,
            rollbacks: self.rollbacks,
            wall_seconds: start.elapsed().as_secs_f64(),
            checkpoint_id: self.checkpoint_id.clone(),
        })
    }

    /// Serialized resumable state (networks, optimizer, counters, log).
    pub fn encode_state(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(STATE_MAGIC);
        w.u32(self.params.chain);
        w.u32(self.params.k);
        w.u32(self.params.subsystem);
        w.f64(self.params.dtau);
        w.u64(self.config.seed);
        w.u64(self.epoch as u64);
        w.f64(self.lr_scale);
        w.u32(self.rollbacks);
        w.u64(self.adam.t);
        io::write_nets(&mut w, &self.nets);
        for i in 0..self.nets.len() {
            w.f64s(&self.adam.m[i]);
            w.f64s(&self.adam.v[i]);
        }
        w.u64(self.records.len() as u64);
        for r in &self.records {
            w.u64(r.epoch as u64);
            w.f64s(&[r.f_mean, r.f_std, r.ess, r.lr]);
        }
        w.buf
    }

    /// Restores a trainer written by [`encode_state`](Self::encode_state).
    pub fn decode_state(params: ModelParams, config: TrainConfig, bytes: &[u8]) -> Result<Self> {
        config.validate()?;
        let mut r = Reader::new(bytes);
        r.magic(STATE_MAGIC)?;
        let header = LatticeHeader { chain: r.u32()?, k: r.u32()?, l: r.u32()?, dtau: r.f64()? };
        header.check(&params)?;
        if r.u64()? != config.seed {
            return Err(Error::Format("training state was written with a different seed".into()));
        }
        let epoch = r.u64()? as usize;
        let lr_scale = r.f64()?;
        let rollbacks = r.u32()?;
        let t = r.u64()?;
        let nets = io::read_nets(&mut r)?;
        let mut adam = Adam::new(&nets, config.beta1, config.beta2, config.eps);
        adam.t = t;
        for (i, net) in nets.iter().enumerate() {
            adam.m[i] = r.f64s(net.n_params())?;
            adam.v[i] = r.f64s(net.n_params())?;
        }
        let n_rec = r.u64()? as usize;
        let mut records = Vec::with_capacity(n_rec);
        for _ in 0..n_rec {
            let epoch = r.u64()? as usize;
            let v = r.f64s(4)?;
            records.push(EpochRecord { epoch, f_mean: v[0], f_std: v[1], ess: v[2], lr: v[3] });
        }
        if !r.finished() {
            return Err(Error::Format("trailing bytes after training state".into()));
        }
        let plan = build_hierarchy(&params)?;
        let mut t = Self::assemble(params, config, plan, nets, Some(adam))?;
        t.epoch = epoch;
        t.lr_scale = lr_scale;
        t.rollbacks = rollbacks;
        t.records = records;
        t.take_snapshot()?;
        Ok(t)
    }

    pub fn save_state(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.encode_state())
    }

    pub fn load_state(params: ModelParams, config: TrainConfig, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
        Self::decode_state(params, config, &bytes)
    }
}

/// Trains from scratch and returns the report with the final networks.
pub fn train(params: &ModelParams, config: &TrainConfig) -> Result<(TrainReport, Vec<MaskedNet>)> {
    let mut t = Trainer::new(*params, config.clone())?;
    let report = t.run()?;
    Ok((report, t.into_nets()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoreg::all_assignments;
    use rand::Rng as _;
    use crate::oracle::enumerate_rdm;

    fn tiny() -> ModelParams {
        ModelParams::new(1.0, 1.0, 0.4, 3, 1, 1).unwrap()
    }

    #[test]
    fn ess_limits() {
        assert!((ess(&[0.3; 10]) - 1.0).abs() < 1e-15);
        let mut lw = vec![-1e4; 8];
        lw[3] = 0.0;
        assert!((ess(&lw) - 1.0 / 8.0).abs() < 1e-15);
        let shifted: Vec<f64> = [0.125, -2.0, 1.5, 0.75].iter().map(|x| x + 800.0).collect();
        assert_eq!(ess(&shifted), ess(&[0.125, -2.0, 1.5, 0.75]));
    }

    #[test]
    fn boundary_states_are_uniform() {
        let mut r = rng::stream(5, &[]);
        let n = 100_000;
        let mut counts = [0usize; 16];
        for _ in 0..n {
            let (mu, nu) = draw_boundary_states(&mut r, 2);
            counts[mu.index() * 4 + nu.index()] += 1;
        }
        let p: f64 = 1.0 / 16.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 4.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn zero_gradient_adam_is_identity() {
        let plan = build_hierarchy(&tiny()).unwrap();
        let mut nets = plan.init_nets(2, 1).unwrap();
        let before = nets.clone();
        let mut adam = Adam::new(&nets, 0.9, 0.999, 1e-8);
        let zero: Vec<Vec<f64>> = nets.iter().map(|n| vec![0.0; n.n_params()]).collect();
        adam.step(&mut nets, &zero, 1e-2);
        assert_eq!(nets, before);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::production().validate().is_ok());
        assert_eq!(TrainConfig::production().total_epochs(), 120000);
        let mut c = TrainConfig::desk();
        c.stages[1].lr = 1.0;
        assert!(c.validate().is_err());
        c = TrainConfig::desk();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let c = TrainConfig::desk();
        assert_eq!(c.lr_at(0), Some(3e-3));
        assert_eq!(c.lr_at(500), Some(1e-3));
        assert_eq!(c.lr_at(2000), None);
    }

    /// Every free configuration of the plan for one boundary pair.
    fn completions(plan: &HierarchyPlan, mu: &BasisState, nu: &BasisState) -> Vec<SpinConfig> {
        let sites: Vec<_> = plan.groups().iter().flat_map(|g| g.sites.clone()).collect();
        let b_cols: Vec<usize> = plan.groups()[0].sites.iter().map(|s| s.col).collect();
        all_assignments(sites.len())
            .map(|spins| {
                let mut cfg = SpinConfig::new(plan.m(), plan.cols()).unwrap();
                plan.fix_boundary(&mut cfg, mu, nu);
                for (s, v) in sites.iter().zip(&spins) {
                    cfg.set(s.row, s.col, *v);
                }
                for &c in &b_cols {
                    cfg.set(plan.m(), c, cfg.get(0, c));
                }
                cfg
            })
            .collect()
    }

    /// Exact expected loss over uniform boundaries.
    fn exact_loss(plan: &HierarchyPlan, nets: &[MaskedNet], c: &CouplingSet) -> f64 {
        let d = 1usize << plan.subsystem();
        let mut scratch = SamplerScratch::default();
        let mut total = 0.0;
        for i in 0..d * d {
            let mu = BasisState::from_index(i / d, plan.subsystem()).unwrap();
            let nu = BasisState::from_index(i % d, plan.subsystem()).unwrap();
            for cfg in completions(plan, &mu, &nu) {
                let lq = plan.log_q(nets, &cfg, c, &mut scratch);
                total += lq.exp() * (energy(&cfg, c) + lq);
            }
        }
        total / (d * d) as f64
    }

    fn perturbed_nets(plan: &HierarchyPlan) -> Vec<MaskedNet> {
        let mut nets = plan.init_nets(2, 17).unwrap();
        let mut r = rng::stream(99, &[]);
        for net in &mut nets {
            let zero: Vec<bool> = net.params().iter().map(|&p| p == 0.0).collect();
            let (b1, w2) = (net.tensors()[0].len(), net.n_params() - net.tensors()[4].len());
            for (j, p) in net.params_mut().iter_mut().enumerate() {
                if j >= b1 && (j >= w2 || !zero[j]) {
                    *p += r.random_range(-0.4..0.4);
                }
            }
        }
        nets
    }

    #[test]
    fn gradient_matches_exact_expected_loss() {
        let p = tiny();
        let c = couplings(&p).unwrap();
        let plan = build_hierarchy(&p).unwrap();
        let nets = perturbed_nets(&plan);

        // exact gradient: E[(F − F̄) ∇ log q] over all boundaries and completions
        let f_bar = exact_loss(&plan, &nets, &c);
        let d = 1usize << p.subsystem;
        let mut exact: Vec<Vec<f64>> = nets.iter().map(|n| vec![0.0; n.n_params()]).collect();
        let mut scratch = SamplerScratch::default();
        let mut total_q = 0.0;
        for i in 0..d * d {
            let mu = BasisState::from_index(i / d, p.subsystem).unwrap();
            let nu = BasisState::from_index(i % d, p.subsystem).unwrap();
            let mut pair_q = 0.0;
            for cfg in completions(&plan, &mu, &nu) {
                let lq = plan.log_q(&nets, &cfg, &c, &mut scratch);
                let w = lq.exp() * (energy(&cfg, &c) + lq - f_bar) / (d * d) as f64;
                plan.accumulate_grad(&nets, &cfg, w, &mut exact, &mut scratch);
                pair_q += lq.exp();
            }
            assert!((pair_q - 1.0).abs() < 1e-12);
            total_q += pair_q;
        }
        assert!((total_q - (d * d) as f64).abs() < 1e-10);

        // finite differences of the exact loss
        let h = 1e-5;
        let mut checked = 0;
        for (ni, net) in nets.iter().enumerate() {
            for j in (0..net.n_params()).step_by(7) {
                if exact[ni][j] == 0.0 {
                    continue;
                }
                let mut plus = nets.clone();
                plus[ni].params_mut()[j] += h;
                let mut minus = nets.clone();
                minus[ni].params_mut()[j] -= h;
                let fd = (exact_loss(&plan, &plus, &c) - exact_loss(&plan, &minus, &c)) / (2.0 * h);
                let rel = (fd - exact[ni][j]).abs() / fd.abs().max(1e-3);
                assert!(rel < 1e-4, "net {ni} param {j}: fd {fd} vs {}", exact[ni][j]);
                checked += 1;
            }
        }
        assert!(checked > 10);

        // Monte Carlo estimate at 10^6 samples
        let n = 1_000_000;
        let batch = sample_batch(&plan, &nets, &c, None, n, 3, &[7]);
        let mc = loss_batch(&plan, &nets, &batch).unwrap();
        let flat = |g: &Vec<Vec<f64>>| g.iter().flatten().copied().collect::<Vec<f64>>();
        let (e, m) = (flat(&exact), flat(&mc.grads));
        let diff: f64 = e.iter().zip(&m).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = e.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(diff / norm < 0.02, "relative MC gradient error {}", diff / norm);
        assert!((mc.f_mean - f_bar).abs() < 5.0 * mc.f_std / (n as f64).sqrt());
    }

    #[test]
    fn baseline_leaves_loss_unchanged_and_mean_zero() {
        let p = tiny();
        let c = couplings(&p).unwrap();
        let plan = build_hierarchy(&p).unwrap();
        let nets = plan.init_nets(2, 4).unwrap();
        let batch = sample_batch(&plan, &nets, &c, None, 300, 1, &[]);
        let loss = loss_batch(&plan, &nets, &batch).unwrap();
        let direct = batch.iter().map(|s| s.signal()).sum::<f64>() / 300.0;
        assert!((loss.f_mean - direct).abs() < 1e-12);
        let centred: f64 = batch.iter().map(|s| s.signal() - loss.f_mean).sum();
        assert!(centred.abs() < 1e-9);
    }

    #[test]
    fn loss_respects_variational_bound_per_pair() {
        let p = tiny();
        let c = couplings(&p).unwrap();
        let plan = build_hierarchy(&p).unwrap();
        let nets = perturbed_nets(&plan);
        let exact = enumerate_rdm(&p).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let (mu, nu) = (BasisState::from_index(i, 1).unwrap(), BasisState::from_index(j, 1).unwrap());
                let batch = sample_batch(&plan, &nets, &c, Some((&mu, &nu)), 4000, 2, &[i as u64, j as u64]);
                let loss = loss_batch(&plan, &nets, &batch).unwrap();
                let se = loss.f_std / (batch.len() as f64).sqrt();
                assert!(loss.f_mean >= -exact.log_z_elements.get(i, j) - 3.0 * se);
            }
        }
    }

    #[test]
    fn sampling_is_independent_of_thread_count() {
        let p = ModelParams::new(1.0, 1.0, 0.4, 4, 2, 1).unwrap();
        let c = couplings(&p).unwrap();
        let plan = build_hierarchy(&p).unwrap();
        let nets = plan.init_nets(2, 4).unwrap();
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let b = sample_batch(&plan, &nets, &c, None, 500, 9, &[1]);
                loss_batch(&plan, &nets, &b).unwrap()
            })
        };
        assert_eq!(run(1), run(3));
    }

    fn short_config() -> TrainConfig {
        TrainConfig {
            batch_size: 64,
            stages: vec![Stage { lr: 3e-3, epochs: 6 }, Stage { lr: 1e-3, epochs: 6 }],
            checkpoint_every: 4,
            ess_interval: 3,
            ess_samples: 32,
            hidden_factor: 2,
            ..TrainConfig::production()
        }
    }

    #[test]
    fn resume_reproduces_trajectory() {
        let p = ModelParams::new(1.0, 1.0, 0.4, 4, 1, 2).unwrap();
        let cfg = short_config();
        let mut straight = Trainer::new(p, cfg.clone()).unwrap();
        straight.run_epochs(12).unwrap();

        let mut first = Trainer::new(p, cfg.clone()).unwrap();
        first.run_epochs(5).unwrap();
        let state = first.encode_state();
        let mut resumed = Trainer::decode_state(p, cfg.clone(), &state).unwrap();
        resumed.run_epochs(7).unwrap();

        let bits = |t: &Trainer| t.records().iter().map(|r| (r.f_mean.to_bits(), r.ess.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&straight), bits(&resumed));
        assert_eq!(straight.nets(), resumed.nets());
        assert!(Trainer::decode_state(p, TrainConfig { seed: 1, ..cfg }, &state).is_err());
    }

    #[test]
    fn report_csv_layout() {
        let p = ModelParams::new(1.0, 1.0, 0.4, 3, 1, 1).unwrap();
        let mut t = Trainer::new(p, short_config()).unwrap();
        let report = t.run().unwrap();
        assert_eq!(report.records.len(), 12);
        assert_eq!(report.ess_trace().iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 3, 6, 9]);
        let csv = report.to_csv("# run=test\n");
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[1], "epoch,F_q_mean,F_q_std,ess,lr");
        assert_eq!(lines.len(), 14);
        assert!(lines[3].split(',').nth(3).unwrap().is_empty());
        assert!(report.records.iter().all(|r| r.f_mean.is_finite()));
    }
}

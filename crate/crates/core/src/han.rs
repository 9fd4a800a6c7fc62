//! Hierarchical sampling plan and conditional configuration sampler.
//!
//! With the subsystem-A spins of rows `0` and `m` fixed, a configuration is
//! filled in stages:
//!
//! 1. the shared subsystem-B boundary spins (written to both rows `0` and `m`),
//! 2. horizontal cut lines that split the `m = kL` slab into `L × L` squares
//!    (halve when the number of squares is even, cut off one square when odd),
//! 3. in each square, a cross made of the middle row plus columns `0` and
//!    `L/2`; this closes four loops on the periodic cylinder,
//! 4. recursively, the middle row and column of every rectangle bounded by a
//!    closed loop, until only single sites remain,
//! 5. those single sites, drawn exactly from the heatbath conditional.
//!
//! Once a loop is fixed the interior conditional does not depend on anything
//! outside it, so congruent rectangles at the same level share a network.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::Rng;

use crate::autoreg::{MaskedNet, NetScratch};
use crate::error::{Error, Result};
use crate::lattice::{local_field_unchecked, BasisState, CouplingSet, ModelParams, Site, SiteRole, SpinConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupKind {
    BoundaryB,
    CutLine,
    Cross { level: usize },
    Heatbath,
}

/// Identity of a network in the hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NetKey {
    BoundaryB,
    /// Cut line splitting a slab of `squares` squares.
    Cut { squares: usize },
    /// Cross inside a rectangle with the given interior size.
    Cross { level: usize, height: usize, width: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetShape {
    pub key: NetKey,
    pub n_ctx: usize,
    pub n_out: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub kind: GroupKind,
    pub sites: Vec<Site>,
    pub context: Vec<Site>,
    pub net: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyPlan {
    m: usize,
    cols: usize,
    l: usize,
    groups: Vec<Group>,
    shapes: Vec<NetShape>,
}

/// A sampled configuration and the log-probability of its free spins.
#[derive(Debug, Clone, PartialEq)]
pub struct FullSample {
    pub config: SpinConfig,
    pub log_q: f64,
}

/// Buffers reused across calls to [`HierarchyPlan::sample_into`].
#[derive(Debug, Default, Clone)]
pub struct SamplerScratch {
    net: NetScratch,
    ctx: Vec<i8>,
    out: Vec<i8>,
}

struct Builder {
    cols: usize,
    groups: Vec<Group>,
    shapes: Vec<NetShape>,
    ids: HashMap<NetKey, usize>,
}

impl Builder {
    fn net_id(&mut self, key: NetKey, n_ctx: usize, n_out: usize) -> usize {
        if let Some(&id) = self.ids.get(&key) {
            debug_assert_eq!(self.shapes[id].n_ctx, n_ctx);
            return id;
        }
        let id = self.shapes.len();
        self.shapes.push(NetShape { key, n_ctx, n_out });
        self.ids.insert(key, id);
        id
    }

    fn push(&mut self, kind: GroupKind, key: NetKey, sites: Vec<Site>, context: Vec<Site>) {
        let net = self.net_id(key, context.len(), sites.len());
        self.groups.push(Group { kind, sites, context, net: Some(net) });
    }

    fn full_row(&self, row: usize) -> impl Iterator<Item = Site> {
        (0..self.cols).map(move |c| Site::new(row, c))
    }

    /// Cut lines for the slab starting at `top` holding `squares` squares.
    /// Returns square top rows in order.
    fn split(&mut self, top: usize, squares: usize, out: &mut Vec<usize>) {
        let l = self.cols;
        if squares == 1 {
            out.push(top);
            return;
        }
        let (first, rest) = if squares % 2 == 0 { (squares / 2, squares / 2) } else { (1, squares - 1) };
        let cut = top + first * l;
        let context = self.full_row(top).chain(self.full_row(top + squares * l)).collect();
        let sites = self.full_row(cut).collect();
        self.push(GroupKind::CutLine, NetKey::Cut { squares }, sites, context);
        self.split(top, first, out);
        self.split(cut, rest, out);
    }
}

/// Rectangle bounded by rows `r0`, `r1` and columns `c0`, `c1` (all exclusive;
/// `c1 == cols` stands for column 0).
#[derive(Debug, Clone, Copy)]
struct Rect {
    r0: usize,
    r1: usize,
    c0: usize,
    c1: usize,
}

impl Rect {
    fn height(&self) -> usize {
        self.r1 - self.r0 - 1
    }

    fn width(&self) -> usize {
        self.c1 - self.c0 - 1
    }
}

/// Builds the sampling plan for `params`.
pub fn build_hierarchy(params: &ModelParams) -> Result<HierarchyPlan> {
    params.validate()?;
    let (cols, l, m) = (params.chain, params.subsystem, params.m());
    let mut b = Builder { cols, groups: Vec::new(), shapes: Vec::new(), ids: HashMap::new() };

    let boundary_ctx: Vec<Site> = (0..l).map(|c| Site::new(0, c)).chain((0..l).map(|c| Site::new(m, c))).collect();
    let boundary_sites: Vec<Site> = (l..cols).map(|c| Site::new(0, c)).collect();
    b.push(GroupKind::BoundaryB, NetKey::BoundaryB, boundary_sites, boundary_ctx);

    let mut squares = Vec::new();
    b.split(0, params.k, &mut squares);

    // level 0: middle row plus columns 0 and cmid of every square
    let mid = |span: usize| 1 + (span - 2) / 2;
    let cmid = mid(cols);
    let mut rects = Vec::new();
    for &top in &squares {
        let mr = top + mid(cols);
        let mut sites: Vec<Site> = (top + 1..top + cols)
            .flat_map(|r| {
                (0..cols).filter(move |&c| r == mr || c == 0 || c == cmid).map(move |c| Site::new(r, c))
            })
            .collect();
        sites.sort();
        let context = b.full_row(top).chain(b.full_row(top + cols)).collect();
        let key = NetKey::Cross { level: 0, height: cols - 1, width: cols };
        b.push(GroupKind::Cross { level: 0 }, key, sites, context);
        for (r0, r1) in [(top, mr), (mr, top + cols)] {
            for (c0, c1) in [(0, cmid), (cmid, cols)] {
                rects.push(Rect { r0, r1, c0, c1 });
            }
        }
    }

    let mut heatbath = Vec::new();
    let mut level = 1;
    while !rects.is_empty() {
        let mut next = Vec::new();
        for rect in rects {
            let (h, w) = (rect.height(), rect.width());
            if h == 0 || w == 0 {
                continue;
            }
            if h == 1 && w == 1 {
                heatbath.push(Site::new(rect.r0 + 1, rect.c0 + 1));
                continue;
            }
            let mr = rect.r0 + 1 + (h - 1) / 2;
            let mc = rect.c0 + 1 + (w - 1) / 2;
            let mut sites: Vec<Site> = (rect.c0 + 1..rect.c1).map(|c| Site::new(mr, c)).collect();
            sites.extend((rect.r0 + 1..rect.r1).filter(|&r| r != mr).map(|r| Site::new(r, mc)));
            sites.sort();
            let context: Vec<Site> = (rect.c0 + 1..rect.c1)
                .map(|c| Site::new(rect.r0, c))
                .chain((rect.c0 + 1..rect.c1).map(|c| Site::new(rect.r1, c)))
                .chain((rect.r0 + 1..rect.r1).map(|r| Site::new(r, rect.c0)))
                .chain((rect.r0 + 1..rect.r1).map(|r| Site::new(r, rect.c1 % cols)))
                .collect();
            b.push(GroupKind::Cross { level }, NetKey::Cross { level, height: h, width: w }, sites, context);
            for (r0, r1) in [(rect.r0, mr), (mr, rect.r1)] {
                for (c0, c1) in [(rect.c0, mc), (mc, rect.c1)] {
                    next.push(Rect { r0, r1, c0, c1 });
                }
            }
        }
        rects = next;
        level += 1;
    }
    heatbath.sort();
    for site in heatbath {
        b.groups.push(Group { kind: GroupKind::Heatbath, sites: vec![site], context: Vec::new(), net: None });
    }

    let plan = HierarchyPlan { m, cols, l, groups: b.groups, shapes: b.shapes };
    plan.check_order()?;
    Ok(plan)
}

fn heatbath_log_p(h: f64, s: i8) -> f64 {
    // log σ(2 s h)
    let z = -2.0 * s as f64 * h;
    if z > 0.0 {
        -z - (-z).exp().ln_1p()
    } else {
        -z.exp().ln_1p()
    }
}

/// Exact heatbath log-probability of the spin at `site` given its neighbours.
pub fn heatbath_logprob(config: &SpinConfig, site: Site, c: &CouplingSet) -> Result<f64> {
    let h = crate::lattice::local_field(config, site, c)?;
    Ok(heatbath_log_p(h, config.at(site)))
}

impl HierarchyPlan {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn subsystem(&self) -> usize {
        self.l
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn net_shapes(&self) -> &[NetShape] {
        &self.shapes
    }

    /// Number of spins drawn by networks (boundary-B counted once).
    pub fn net_spin_count(&self) -> usize {
        self.groups.iter().filter(|g| g.net.is_some()).map(|g| g.sites.len()).sum()
    }

    pub fn heatbath_count(&self) -> usize {
        self.groups.iter().filter(|g| g.kind == GroupKind::Heatbath).count()
    }

    /// Verifies that every group reads only sites fixed before it.
    fn check_order(&self) -> Result<()> {
        let idx = |s: Site| s.row * self.cols + s.col;
        let mut set = vec![false; (self.m + 1) * self.cols];
        for c in 0..self.l {
            set[idx(Site::new(0, c))] = true;
            set[idx(Site::new(self.m, c))] = true;
        }
        for (gi, g) in self.groups.iter().enumerate() {
            let needs: Vec<Site> = if g.kind == GroupKind::Heatbath {
                let s = g.sites[0];
                vec![
                    Site::new(s.row - 1, s.col),
                    Site::new(s.row + 1, s.col),
                    Site::new(s.row, (s.col + self.cols - 1) % self.cols),
                    Site::new(s.row, (s.col + 1) % self.cols),
                ]
            } else {
                g.context.clone()
            };
            if let Some(s) = needs.iter().find(|&&s| !set[idx(s)]) {
                return Err(Error::Shape(format!("group {gi} reads unset site ({}, {})", s.row, s.col)));
            }
            for &s in &g.sites {
                if set[idx(s)] {
                    return Err(Error::Shape(format!("site ({}, {}) assigned twice", s.row, s.col)));
                }
                set[idx(s)] = true;
                if g.kind == GroupKind::BoundaryB {
                    set[idx(Site::new(self.m, s.col))] = true;
                }
            }
        }
        if let Some(i) = set.iter().position(|&x| !x) {
            return Err(Error::Shape(format!("site {i} never assigned")));
        }
        Ok(())
    }

    /// Role of every site, row-major.
    pub fn roles(&self) -> Vec<SiteRole> {
        let mut roles = vec![SiteRole::Heatbath; (self.m + 1) * self.cols];
        for c in 0..self.cols {
            let (top, bottom) = if c < self.l {
                (SiteRole::BoundaryATop, SiteRole::BoundaryABottom)
            } else {
                (SiteRole::BoundaryBShared, SiteRole::BoundaryBShared)
            };
            roles[c] = top;
            roles[self.m * self.cols + c] = bottom;
        }
        for g in &self.groups {
            let role = match g.kind {
                GroupKind::CutLine => SiteRole::CutLine,
                GroupKind::Cross { .. } => SiteRole::SquareCross,
                _ => continue,
            };
            for s in &g.sites {
                roles[s.row * self.cols + s.col] = role;
            }
        }
        roles
    }

    /// Fresh randomly initialised networks with `hidden_factor × group size` hidden units.
    pub fn init_nets(&self, hidden_factor: usize, seed: u64) -> Result<Vec<MaskedNet>> {
        self.shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                MaskedNet::new(s.n_ctx, s.n_out, hidden_factor.max(1) * s.n_out, crate::rng::derive(seed, &[i as u64]))
            })
            .collect()
    }

    /// Checks that `nets` match the plan's network shapes.
    pub fn check_nets(&self, nets: &[MaskedNet]) -> Result<()> {
        if nets.len() != self.shapes.len() {
            return Err(Error::Shape(format!("plan needs {} nets, got {}", self.shapes.len(), nets.len())));
        }
        for (i, (n, s)) in nets.iter().zip(&self.shapes).enumerate() {
            if n.n_ctx() != s.n_ctx || n.n_out() != s.n_out {
                return Err(Error::Shape(format!(
                    "net {i}: expected ({}, {}), got ({}, {})",
                    s.n_ctx,
                    s.n_out,
                    n.n_ctx(),
                    n.n_out()
                )));
            }
        }
        Ok(())
    }

    /// Writes the fixed subsystem-A spins into rows `0` and `m`.
    pub fn fix_boundary(&self, config: &mut SpinConfig, mu: &BasisState, nu: &BasisState) {
        for c in 0..self.l {
            config.set(0, c, mu.bits()[c]);
            config.set(self.m, c, nu.bits()[c]);
        }
    }

    /// Samples all free spins of `config` in plan order and returns `log q`.
    ///
    /// Nets must already be validated with [`check_nets`](Self::check_nets).
    pub fn sample_into<R: Rng + ?Sized>(
        &self,
        nets: &[MaskedNet],
        mu: &BasisState,
        nu: &BasisState,
        c: &CouplingSet,
        rng: &mut R,
        config: &mut SpinConfig,
        scratch: &mut SamplerScratch,
    ) -> f64 {
        self.fix_boundary(config, mu, nu);
        let mut log_q = 0.0;
        for g in &self.groups {
            match g.net {
                None => {
                    let site = g.sites[0];
                    let h = local_field_unchecked(config, site, c);
                    let p_up = 1.0 / (1.0 + (-2.0 * h).exp());
                    let s: i8 = if rng.random::<f64>() < p_up { 1 } else { -1 };
                    config.set(site.row, site.col, s);
                    log_q += heatbath_log_p(h, s);
                }
                Some(id) => {
                    let net = &nets[id];
                    scratch.ctx.clear();
                    scratch.ctx.extend(g.context.iter().map(|&s| config.at(s)));
                    scratch.out.resize(g.sites.len(), 0);
                    log_q += net.sample_into(&scratch.ctx, &mut scratch.out, &mut scratch.net, rng);
                    for (&site, &s) in g.sites.iter().zip(&scratch.out) {
                        config.set(site.row, site.col, s);
                    }
                    if g.kind == GroupKind::BoundaryB {
                        for (&site, &s) in g.sites.iter().zip(&scratch.out) {
                            config.set(self.m, site.col, s);
                        }
                    }
                }
            }
        }
        log_q
    }

    /// Draws one configuration conditioned on `(mu, nu)`.
    pub fn sample_configuration<R: Rng + ?Sized>(
        &self,
        nets: &[MaskedNet],
        mu: &BasisState,
        nu: &BasisState,
        c: &CouplingSet,
        rng: &mut R,
    ) -> Result<FullSample> {
        self.check_nets(nets)?;
        if mu.len() != self.l || nu.len() != self.l {
            return Err(Error::Shape(format!("boundary states must have length {}", self.l)));
        }
        let mut config = SpinConfig::new(self.m, self.cols)?;
        let log_q = self.sample_into(nets, mu, nu, c, rng, &mut config, &mut SamplerScratch::default());
        Ok(FullSample { config, log_q })
    }

    /// Recomputes `log q` of the free spins of `config` group by group.
    pub fn log_q(&self, nets: &[MaskedNet], config: &SpinConfig, c: &CouplingSet, scratch: &mut SamplerScratch) -> f64 {
        let mut log_q = 0.0;
        for g in &self.groups {
            log_q += self.group_log_q(g, nets, config, c, scratch);
        }
        log_q
    }

    /// `log q` contribution of one group.
    pub fn group_log_q(
        &self,
        g: &Group,
        nets: &[MaskedNet],
        config: &SpinConfig,
        c: &CouplingSet,
        scratch: &mut SamplerScratch,
    ) -> f64 {
        match g.net {
            None => {
                let site = g.sites[0];
                heatbath_log_p(local_field_unchecked(config, site, c), config.at(site))
            }
            Some(id) => {
                self.gather(g, config, scratch);
                nets[id].log_prob_with(&scratch.ctx, &scratch.out, &mut scratch.net)
            }
        }
    }

    fn gather(&self, g: &Group, config: &SpinConfig, scratch: &mut SamplerScratch) {
        scratch.ctx.clear();
        scratch.ctx.extend(g.context.iter().map(|&s| config.at(s)));
        scratch.out.clear();
        scratch.out.extend(g.sites.iter().map(|&s| config.at(s)));
    }

    /// Adds `weight · ∇θ log q(config)` into per-net gradient buffers.
    pub fn accumulate_grad(
        &self,
        nets: &[MaskedNet],
        config: &SpinConfig,
        weight: f64,
        grads: &mut [Vec<f64>],
        scratch: &mut SamplerScratch,
    ) {
        for g in &self.groups {
            if let Some(id) = g.net {
                self.gather(g, config, scratch);
                nets[id].accumulate_grad(&scratch.ctx, &scratch.out, weight, &mut grads[id], &mut scratch.net);
            }
        }
    }

    /// Audit dump, one group per line: `kind level net-id : (r,c) ...`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            let (kind, level) = match g.kind {
                GroupKind::BoundaryB => ("boundary-B", 0),
                GroupKind::CutLine => ("cut-line", 0),
                GroupKind::Cross { level } => ("cross", level),
                GroupKind::Heatbath => ("heatbath", 0),
            };
            let net = g.net.map_or_else(|| "-".to_string(), |n| n.to_string());
            let _ = write!(out, "{kind} {level} {net} :");
            for s in &g.sites {
                let _ = write!(out, " ({},{})", s.row, s.col);
            }
            out.push('\n');
        }
        out
    }
}

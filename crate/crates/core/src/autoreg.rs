//! Two-layer masked dense autoregressive networks.
//!
//! A net conditions a group of `n_out` binary spins on `n_ctx` fixed context
//! spins. Inputs are laid out as `[context | group]`; context inputs have
//! degree 0 and group slot `i` has degree `order[i] + 1`. A hidden unit of
//! degree `d` sees inputs of degree `<= d`, and the output at autoregressive
//! position `p` sees hidden units of degree `<= p`. The first output therefore
//! depends on the context alone.
//!
//! Sampling and `log_prob` evaluate each hidden unit and each output with the
//! same loop over the same sparse link lists, so the log-probability returned
//! by ancestral sampling is reproduced bit-for-bit on recomputation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Lower clamp on conditional probabilities (upper clamp is `1 - PROB_FLOOR`).
pub const PROB_FLOOR: f64 = 1e-7;
pub const PRELU_INIT: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedNet {
    n_ctx: usize,
    n_out: usize,
    hidden: usize,
    /// `order[slot]` is the autoregressive position of a group slot.
    order: Vec<usize>,
    slot_at: Vec<usize>,
    hidden_degree: Vec<usize>,
    /// `[W1 (hidden × n_in) | b1 | alpha | W2 (n_out × hidden) | b2]`.
    params: Vec<f64>,
    in_links: Vec<Vec<u32>>,
    out_links: Vec<Vec<u32>>,
    hidden_by_degree: Vec<Vec<u32>>,
}

/// One ancestral sample from a net.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSample {
    pub spins: Vec<i8>,
    pub log_q: f64,
}

/// Reusable buffers for forward and backward passes.
#[derive(Debug, Default, Clone)]
pub struct NetScratch {
    x: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    dact: Vec<f64>,
}

impl NetScratch {
    fn prepare(&mut self, n_in: usize, hidden: usize) {
        self.x.clear();
        self.x.resize(n_in, 0.0);
        self.pre.resize(hidden, 0.0);
        self.act.resize(hidden, 0.0);
        self.dact.clear();
        self.dact.resize(hidden, 0.0);
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

impl MaskedNet {
    /// Randomly initialised net with identity ordering.
    ///
    /// Weights are uniform in `±1/√fan_in`, biases zero and PReLU slopes 0.25.
    pub fn new(n_ctx: usize, n_out: usize, hidden: usize, seed: u64) -> Result<Self> {
        Self::with_order(n_ctx, (0..n_out).collect(), hidden, seed)
    }

    pub fn with_order(n_ctx: usize, order: Vec<usize>, hidden: usize, seed: u64) -> Result<Self> {
        let mut net = Self::zeroed_with_order(n_ctx, order, hidden)?;
        let mut r = rng::stream(seed, &[0x6e6574]);
        let n_in = net.n_in();
        let bound1 = 1.0 / (n_in as f64).sqrt();
        let bound2 = 1.0 / (hidden as f64).sqrt();
        for k in 0..hidden {
            for &j in &net.in_links[k] {
                net.params[k * n_in + j as usize] = r.random_range(-bound1..bound1);
            }
        }
        let w2 = net.w2_offset();
        for i in 0..net.n_out {
            for &k in &net.out_links[i] {
                net.params[w2 + i * hidden + k as usize] = r.random_range(-bound2..bound2);
            }
        }
        Ok(net)
    }

    /// Net with all weights and biases zero (every conditional is 1/2).
    pub fn zeroed(n_ctx: usize, n_out: usize, hidden: usize) -> Result<Self> {
        Self::zeroed_with_order(n_ctx, (0..n_out).collect(), hidden)
    }

    fn zeroed_with_order(n_ctx: usize, order: Vec<usize>, hidden: usize) -> Result<Self> {
        let n_out = order.len();
        if n_out == 0 {
            return Err(Error::InfeasibleMask("net must generate at least one spin".into()));
        }
        if hidden < n_out {
            return Err(Error::InfeasibleMask(format!(
                "hidden width {hidden} smaller than group size {n_out}"
            )));
        }
        let mut slot_at = vec![usize::MAX; n_out];
        for (slot, &pos) in order.iter().enumerate() {
            if pos >= n_out || slot_at[pos] != usize::MAX {
                return Err(Error::InfeasibleMask("order is not a permutation".into()));
            }
            slot_at[pos] = slot;
        }
        let hidden_degree: Vec<usize> = (0..hidden).map(|k| k % n_out).collect();
        let n_in = n_ctx + n_out;
        let mut net = Self {
            n_ctx,
            n_out,
            hidden,
            order,
            slot_at,
            hidden_degree,
            params: Vec::new(),
            in_links: Vec::new(),
            out_links: Vec::new(),
            hidden_by_degree: Vec::new(),
        };
        net.params = vec![0.0; hidden * n_in + 2 * hidden + n_out * hidden + n_out];
        let a = net.alpha_offset();
        net.params[a..a + hidden].fill(PRELU_INIT);
        net.build_links()?;
        Ok(net)
    }

    pub(crate) fn from_parts(
        n_ctx: usize,
        order: Vec<usize>,
        hidden_degree: Vec<usize>,
        params: Vec<f64>,
    ) -> Result<Self> {
        let hidden = hidden_degree.len();
        let mut net = Self::zeroed_with_order(n_ctx, order, hidden)?;
        if hidden_degree.iter().any(|&d| d >= net.n_out) {
            return Err(Error::Format("hidden degree out of range".into()));
        }
        if params.len() != net.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, got {}",
                net.params.len(),
                params.len()
            )));
        }
        net.hidden_degree = hidden_degree;
        net.params = params;
        net.build_links()?;
        Ok(net)
    }

    fn input_degree(&self, j: usize) -> usize {
        if j < self.n_ctx {
            0
        } else {
            self.order[j - self.n_ctx] + 1
        }
    }

    fn build_links(&mut self) -> Result<()> {
        let n_in = self.n_in();
        self.in_links = (0..self.hidden)
            .map(|k| {
                (0..n_in)
                    .filter(|&j| self.input_degree(j) <= self.hidden_degree[k])
                    .map(|j| j as u32)
                    .collect()
            })
            .collect();
        self.out_links = (0..self.n_out)
            .map(|i| {
                (0..self.hidden)
                    .filter(|&k| self.hidden_degree[k] <= self.order[i])
                    .map(|k| k as u32)
                    .collect()
            })
            .collect();
        if let Some(i) = self.out_links.iter().position(Vec::is_empty) {
            return Err(Error::InfeasibleMask(format!("output slot {i} has no hidden units")));
        }
        self.hidden_by_degree = vec![Vec::new(); self.n_out];
        for k in 0..self.hidden {
            self.hidden_by_degree[self.hidden_degree[k]].push(k as u32);
        }
        // zero anything a mask forbids
        let w2 = self.w2_offset();
        for k in 0..self.hidden {
            for j in 0..n_in {
                if self.input_degree(j) > self.hidden_degree[k] {
                    self.params[k * n_in + j] = 0.0;
                }
            }
        }
        for i in 0..self.n_out {
            for k in 0..self.hidden {
                if self.hidden_degree[k] > self.order[i] {
                    self.params[w2 + i * self.hidden + k] = 0.0;
                }
            }
        }
        Ok(())
    }

    pub fn n_ctx(&self) -> usize {
        self.n_ctx
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn n_in(&self) -> usize {
        self.n_ctx + self.n_out
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn hidden_degree(&self) -> &[usize] {
        &self.hidden_degree
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter vector. Entries excluded by the masks must stay zero.
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Adds uniform noise of half-width `scale` to every unmasked weight and
    /// bias and to the PReLU slopes (kept positive).
    pub fn perturb(&mut self, scale: f64, seed: u64) {
        let mut r = rng::stream(seed, &[]);
        let n_in = self.n_in();
        let (b1, a, w2, b2) = (self.b1_offset(), self.alpha_offset(), self.w2_offset(), self.b2_offset());
        for j in 0..self.params.len() {
            let open = if j < b1 {
                self.input_degree(j % n_in) <= self.hidden_degree[j / n_in]
            } else if (w2..b2).contains(&j) {
                let (i, k) = ((j - w2) / self.hidden, (j - w2) % self.hidden);
                self.hidden_degree[k] <= self.order[i]
            } else {
                true
            };
            if open {
                let d: f64 = r.random_range(-scale..scale);
                self.params[j] = if (a..w2).contains(&j) { (self.params[j] + d).abs() } else { self.params[j] + d };
            }
        }
    }

    fn b1_offset(&self) -> usize {
        self.hidden * self.n_in()
    }

    fn alpha_offset(&self) -> usize {
        self.b1_offset() + self.hidden
    }

    fn w2_offset(&self) -> usize {
        self.alpha_offset() + self.hidden
    }

    fn b2_offset(&self) -> usize {
        self.w2_offset() + self.n_out * self.hidden
    }

    /// Slices `(W1, b1, alpha, W2, b2)`.
    pub fn tensors(&self) -> [&[f64]; 5] {
        let p = &self.params;
        [
            &p[..self.b1_offset()],
            &p[self.b1_offset()..self.alpha_offset()],
            &p[self.alpha_offset()..self.w2_offset()],
            &p[self.w2_offset()..self.b2_offset()],
            &p[self.b2_offset()..],
        ]
    }

    /// Binary masks `(M1: hidden × n_in, M2: n_out × hidden)`, row-major.
    pub fn masks(&self) -> (Vec<u8>, Vec<u8>) {
        let n_in = self.n_in();
        let mut m1 = vec![0u8; self.hidden * n_in];
        for (k, links) in self.in_links.iter().enumerate() {
            for &j in links {
                m1[k * n_in + j as usize] = 1;
            }
        }
        let mut m2 = vec![0u8; self.n_out * self.hidden];
        for (i, links) in self.out_links.iter().enumerate() {
            for &k in links {
                m2[i * self.hidden + k as usize] = 1;
            }
        }
        (m1, m2)
    }

    #[inline]
    fn hidden_unit(&self, k: usize, x: &[f64]) -> (f64, f64) {
        let n_in = self.n_in();
        let row = &self.params[k * n_in..(k + 1) * n_in];
        let mut pre = self.params[self.b1_offset() + k];
        for &j in &self.in_links[k] {
            pre += row[j as usize] * x[j as usize];
        }
        let act = if pre > 0.0 { pre } else { self.params[self.alpha_offset() + k] * pre };
        (pre, act)
    }

    #[inline]
    fn output_logit(&self, slot: usize, act: &[f64]) -> f64 {
        let w2 = self.w2_offset() + slot * self.hidden;
        let row = &self.params[w2..w2 + self.hidden];
        let mut z = self.params[self.b2_offset() + slot];
        for &k in &self.out_links[slot] {
            z += row[k as usize] * act[k as usize];
        }
        z
    }

    /// Clamped probabilities `q(s_slot = +1 | context, earlier slots)`,
    /// indexed by group slot. `inputs` holds `[context | group]`; group entries
    /// at or after a slot's position are ignored by construction.
    pub fn conditionals(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        if inputs.len() != self.n_in() {
            return Err(Error::Shape(format!(
                "expected {} inputs, got {}",
                self.n_in(),
                inputs.len()
            )));
        }
        let act: Vec<f64> = (0..self.hidden).map(|k| self.hidden_unit(k, inputs).1).collect();
        Ok((0..self.n_out).map(|i| clamp_prob(sigmoid(self.output_logit(i, &act)))).collect())
    }

    /// Ancestral sampling into `out` (length `n_out`); returns `log q`.
    pub fn sample_into<R: Rng + ?Sized>(
        &self,
        ctx: &[i8],
        out: &mut [i8],
        scratch: &mut NetScratch,
        rng: &mut R,
    ) -> f64 {
        debug_assert_eq!(ctx.len(), self.n_ctx);
        debug_assert_eq!(out.len(), self.n_out);
        scratch.prepare(self.n_in(), self.hidden);
        for (x, &c) in scratch.x.iter_mut().zip(ctx) {
            *x = c as f64;
        }
        let mut log_q = 0.0;
        for pos in 0..self.n_out {
            for &k in &self.hidden_by_degree[pos] {
                let (pre, act) = self.hidden_unit(k as usize, &scratch.x);
                scratch.pre[k as usize] = pre;
                scratch.act[k as usize] = act;
            }
            let slot = self.slot_at[pos];
            let p = clamp_prob(sigmoid(self.output_logit(slot, &scratch.act)));
            let s: i8 = if rng.random::<f64>() < p { 1 } else { -1 };
            log_q += if s == 1 { p.ln() } else { (1.0 - p).ln() };
            out[slot] = s;
            scratch.x[self.n_ctx + slot] = s as f64;
        }
        log_q
    }

    pub fn sample_group<R: Rng + ?Sized>(&self, ctx: &[i8], rng: &mut R) -> GroupSample {
        let mut spins = vec![0i8; self.n_out];
        let log_q = self.sample_into(ctx, &mut spins, &mut NetScratch::default(), rng);
        GroupSample { spins, log_q }
    }

    fn forward(&self, ctx: &[i8], spins: &[i8], scratch: &mut NetScratch) {
        scratch.prepare(self.n_in(), self.hidden);
        for (x, &c) in scratch.x.iter_mut().zip(ctx.iter().chain(spins)) {
            *x = c as f64;
        }
        for pos in 0..self.n_out {
            for &k in &self.hidden_by_degree[pos] {
                let (pre, act) = self.hidden_unit(k as usize, &scratch.x);
                scratch.pre[k as usize] = pre;
                scratch.act[k as usize] = act;
            }
        }
    }

    /// Exact `log q(spins | ctx)` using the caller's scratch space.
    pub fn log_prob_with(&self, ctx: &[i8], spins: &[i8], scratch: &mut NetScratch) -> f64 {
        debug_assert_eq!(ctx.len(), self.n_ctx);
        debug_assert_eq!(spins.len(), self.n_out);
        self.forward(ctx, spins, scratch);
        let mut log_q = 0.0;
        for pos in 0..self.n_out {
            let slot = self.slot_at[pos];
            let p = clamp_prob(sigmoid(self.output_logit(slot, &scratch.act)));
            log_q += if spins[slot] == 1 { p.ln() } else { (1.0 - p).ln() };
        }
        log_q
    }

    pub fn log_prob(&self, ctx: &[i8], spins: &[i8]) -> f64 {
        self.log_prob_with(ctx, spins, &mut NetScratch::default())
    }

    /// Adds `weight · ∇θ log q(spins | ctx)` into `grad` (same layout as `params`).
    pub fn accumulate_grad(
        &self,
        ctx: &[i8],
        spins: &[i8],
        weight: f64,
        grad: &mut [f64],
        scratch: &mut NetScratch,
    ) {
        debug_assert_eq!(grad.len(), self.params.len());
        if weight == 0.0 {
            return;
        }
        self.forward(ctx, spins, scratch);
        let (w2o, b2o) = (self.w2_offset(), self.b2_offset());
        for slot in 0..self.n_out {
            let p = sigmoid(self.output_logit(slot, &scratch.act));
            if !(PROB_FLOOR..=1.0 - PROB_FLOOR).contains(&p) {
                // clamped: log q is locally constant
                continue;
            }
            let target = if spins[slot] == 1 { 1.0 } else { 0.0 };
            let g = weight * (target - p);
            grad[b2o + slot] += g;
            let row = w2o + slot * self.hidden;
            for &k in &self.out_links[slot] {
                let k = k as usize;
                grad[row + k] += g * scratch.act[k];
                scratch.dact[k] += g * self.params[row + k];
            }
        }
        let (b1o, ao, n_in) = (self.b1_offset(), self.alpha_offset(), self.n_in());
        for k in 0..self.hidden {
            let d = scratch.dact[k];
            if d == 0.0 {
                continue;
            }
            let pre = scratch.pre[k];
            let dpre = if pre > 0.0 {
                d
            } else {
                grad[ao + k] += d * pre;
                d * self.params[ao + k]
            };
            grad[b1o + k] += dpre;
            let row = k * n_in;
            for &j in &self.in_links[k] {
                grad[row + j as usize] += dpre * scratch.x[j as usize];
            }
        }
    }

    /// Gradient of `Σ weight · log q(spins | context)` over a batch.
    pub fn grad_loss(&self, batch: &[(&[i8], &[i8], f64)]) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Err(Error::InvalidParams("empty batch".into()));
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut scratch = NetScratch::default();
        for &(ctx, spins, w) in batch {
            if ctx.len() != self.n_ctx || spins.len() != self.n_out {
                return Err(Error::Shape("batch entry does not match net shape".into()));
            }
            self.accumulate_grad(ctx, spins, w, &mut grad, &mut scratch);
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence("non-finite gradient".into()));
        }
        Ok(grad)
    }
}

/// Enumerates all `2^n` spin assignments in lexicographic order (−1 before +1).
pub fn all_assignments(n: usize) -> impl Iterator<Item = Vec<i8>> {
    (0..1usize << n).map(move |bits| {
        (0..n).map(|i| if bits >> (n - 1 - i) & 1 == 1 { 1 } else { -1 }).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn random_ctx(n: usize, seed: u64) -> Vec<i8> {
        let mut r = rng::stream(seed, &[]);
        (0..n).map(|_| if r.random::<bool>() { 1 } else { -1 }).collect()
    }

    #[test]
    fn zero_net_is_uniform() {
        let net = MaskedNet::zeroed(3, 5, 10).unwrap();
        let p = net.conditionals(&[1.0, -1.0, 1.0, 0.0, 0.3, -2.0, 1.0, 1.0]).unwrap();
        assert!(p.iter().all(|&x| x == 0.5));
        let mut r = rng::stream(1, &[]);
        let s = net.sample_group(&[1, 1, -1], &mut r);
        assert_eq!(s.log_q, -5.0 * LN_2);
        assert_eq!(net.log_prob(&[1, 1, -1], &[1, -1, 1, 1, -1]), -5.0 * LN_2);
    }

    #[test]
    fn init_is_deterministic() {
        let a = MaskedNet::new(4, 6, 24, 9).unwrap();
        let b = MaskedNet::new(4, 6, 24, 9).unwrap();
        let c = MaskedNet::new(4, 6, 24, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
        let [_, b1, alpha, _, b2] = a.tensors();
        assert!(b1.iter().chain(b2).all(|&x| x == 0.0));
        assert!(alpha.iter().all(|&x| x == PRELU_INIT));
    }

    #[test]
    fn narrow_hidden_layer_rejected() {
        assert!(matches!(MaskedNet::new(2, 6, 5, 0), Err(Error::InfeasibleMask(_))));
        assert!(MaskedNet::with_order(2, vec![0, 0, 1], 6, 0).is_err());
    }

    /// Perturbing input at position t' >= t never changes output t; earlier
    /// positions and context generally do.
    #[test]
    fn autoregressive_mask_probe() {
        let order = vec![3, 0, 4, 1, 5, 2];
        let net = MaskedNet::with_order(3, order.clone(), 24, 5).unwrap();
        let base: Vec<f64> = vec![1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0];
        let p0 = net.conditionals(&base).unwrap();
        for slot_in in 0..6 {
            let mut x = base.clone();
            x[3 + slot_in] += 0.37;
            let p = net.conditionals(&x).unwrap();
            for slot_out in 0..6 {
                if order[slot_in] >= order[slot_out] {
                    assert_eq!(p[slot_out], p0[slot_out], "in {slot_in} out {slot_out}");
                }
            }
        }
        // context feeds the first position
        let mut x = base.clone();
        x[0] = -1.0;
        let first = order.iter().position(|&p| p == 0).unwrap();
        assert_ne!(net.conditionals(&x).unwrap()[first], p0[first]);
    }

    #[test]
    fn probabilities_are_clamped() {
        let mut net = MaskedNet::new(1, 2, 4, 3).unwrap();
        let b2 = net.n_params() - 2;
        net.params_mut()[b2] = 80.0;
        net.params_mut()[b2 + 1] = -80.0;
        let p = net.conditionals(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0 - PROB_FLOOR, PROB_FLOOR]);
        let lp = net.log_prob(&[1], &[-1, 1]);
        assert!(lp >= 2.0 * PROB_FLOOR.ln() - 1e-8);
        assert!(lp.is_finite());
    }

    #[test]
    fn sampled_log_q_is_reproduced_exactly() {
        let net = MaskedNet::new(5, 9, 36, 17).unwrap();
        let mut r = rng::stream(4, &[]);
        for t in 0..200 {
            let ctx = random_ctx(5, t);
            let s = net.sample_group(&ctx, &mut r);
            assert!(s.log_q <= 0.0);
            assert_eq!(net.log_prob(&ctx, &s.spins).to_bits(), s.log_q.to_bits());
        }
    }

    #[test]
    fn first_spin_frequency_matches_conditional() {
        let mut net = MaskedNet::new(2, 3, 12, 8).unwrap();
        let b2 = net.n_params() - 3;
        net.params_mut()[b2] = 0.8;
        let ctx = [1i8, -1];
        let p = net.conditionals(&[1.0, -1.0, 0.0, 0.0, 0.0]).unwrap()[0];
        let n = 100_000;
        let mut r = rng::stream(21, &[]);
        let mut scratch = NetScratch::default();
        let mut out = [0i8; 3];
        let ups = (0..n)
            .filter(|_| {
                net.sample_into(&ctx, &mut out, &mut scratch, &mut r);
                out[0] == 1
            })
            .count();
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((ups as f64 - n as f64 * p).abs() < 4.0 * sigma);
    }

    #[test]
    fn exhaustive_normalization_small_group() {
        let net = MaskedNet::new(3, 4, 16, 2).unwrap();
        let ctx = [1i8, -1, -1];
        let total: f64 = all_assignments(4).map(|s| net.log_prob(&ctx, &s).exp()).sum();
        assert!((total - 1.0).abs() < 1e-10);
    }

    fn fd_check(net: &MaskedNet, batch: &[(&[i8], &[i8], f64)]) -> f64 {
        let g = net.grad_loss(batch).unwrap();
        let f = |n: &MaskedNet| -> f64 { batch.iter().map(|&(c, s, w)| w * n.log_prob(c, s)).sum() };
        let (m1, m2) = net.masks();
        let mut allowed: Vec<bool> = m1.iter().map(|&x| x == 1).collect();
        allowed.extend(std::iter::repeat_n(true, 2 * net.hidden()));
        allowed.extend(m2.iter().map(|&x| x == 1));
        allowed.extend(std::iter::repeat_n(true, net.n_out()));
        let h = 1e-4;
        let mut num = Vec::with_capacity(g.len());
        let mut work = net.clone();
        for i in 0..g.len() {
            if !allowed[i] {
                num.push(0.0);
                continue;
            }
            let orig = work.params()[i];
            work.params_mut()[i] = orig + h;
            let up = f(&work);
            work.params_mut()[i] = orig - h;
            let down = f(&work);
            work.params_mut()[i] = orig;
            num.push((up - down) / (2.0 * h));
        }
        let diff: f64 = g.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = num.iter().map(|b| b * b).sum::<f64>().sqrt();
        diff / norm
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut net = MaskedNet::new(4, 6, 24, 31).unwrap();
        // move biases and PReLU slopes away from their initial values
        let mut r = rng::stream(32, &[]);
        let (hid, n_in, n_out) = (net.hidden(), net.n_in(), net.n_out());
        let tail = net.n_params() - n_out;
        for k in 0..hid {
            net.params_mut()[hid * n_in + k] = r.random_range(-0.3..0.3);
            net.params_mut()[hid * n_in + hid + k] = r.random_range(0.05..0.5);
        }
        for i in 0..n_out {
            net.params_mut()[tail + i] = r.random_range(-0.5..0.5);
        }
        let ctxs: Vec<Vec<i8>> = (0..8).map(|t| random_ctx(4, 100 + t)).collect();
        let spins: Vec<Vec<i8>> = (0..8).map(|t| random_ctx(6, 200 + t)).collect();
        let batch: Vec<(&[i8], &[i8], f64)> = ctxs
            .iter()
            .zip(&spins)
            .enumerate()
            .map(|(t, (c, s))| (c.as_slice(), s.as_slice(), 0.3 * t as f64 - 1.0))
            .collect();
        let rel = fd_check(&net, &batch);
        assert!(rel <= 1e-4, "relative error {rel}");
    }

    #[test]
    fn gradient_is_linear_in_batch() {
        let net = MaskedNet::new(2, 4, 8, 7).unwrap();
        let (c1, s1) = (vec![1i8, -1], vec![1i8, 1, -1, 1]);
        let (c2, s2) = (vec![-1i8, -1], vec![-1i8, 1, -1, -1]);
        let g1 = net.grad_loss(&[(&c1, &s1, 0.7)]).unwrap();
        let g2 = net.grad_loss(&[(&c2, &s2, -1.3)]).unwrap();
        let g = net.grad_loss(&[(&c1, &s1, 0.7), (&c2, &s2, -1.3)]).unwrap();
        for i in 0..g.len() {
            assert!((g[i] - g1[i] - g2[i]).abs() < 1e-14);
        }
        let zero = net.grad_loss(&[(&c1, &s1, 0.0), (&c2, &s2, 0.0)]).unwrap();
        assert!(zero.iter().all(|&x| x == 0.0));
        assert!(net.grad_loss(&[]).is_err());
    }
}

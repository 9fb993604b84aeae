//! Mixture-side updates: component allocations, the base weight measure,
//! the two concentration parameters, and the shared kernel atoms.
//!
//! Weights are collapsed everywhere, so allocation and base-measure moves
//! work through Dirichlet-multinomial predictive counts. The concentrations
//! use adaptive log-scale random walks tuned toward a 0.44 acceptance rate
//! during burn-in; the atoms use truncated-normal random walks with the
//! proposal-density correction the moving window makes necessary.

use crate::dist::TruncNormal;
use crate::partition::{sample_from_ln_weights, CellCounts, CoordPartition};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use statrs::function::gamma::ln_gamma;

/// Shared mixture atoms: component means and variances.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Atoms {
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
}

impl Atoms {
    /// Deterministic over-dispersed initialization: means on an equi-spaced
    /// grid over the support, variances at the prior scale.
    pub fn init_grid(k: usize, support: (f64, f64), sigma2: f64) -> Self {
        let (a, b) = support;
        let mu = (0..k)
            .map(|j| a + (b - a) * (2.0 * j as f64 + 1.0) / (2.0 * k as f64))
            .collect();
        Self { mu, sigma2: vec![sigma2; k] }
    }

    pub fn kernels(&self, support: (f64, f64)) -> Vec<TruncNormal> {
        self.mu
            .iter()
            .zip(&self.sigma2)
            .map(|(&m, &s2)| {
                TruncNormal::new(m, s2, support.0, support.1)
                    .expect("atom parameters stay inside their support")
            })
            .collect()
    }
}

/// Draw from Gamma(shape, scale).
pub fn sample_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, scale: f64) -> f64 {
    Gamma::new(shape, scale).expect("valid gamma parameters").sample(rng)
}

/// Draw from InverseGamma(shape, scale): 1/X ~ Gamma(shape, 1/scale).
pub fn sample_inv_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, scale: f64) -> f64 {
    1.0 / sample_gamma(rng, shape, 1.0 / scale)
}

/// Draw from a Dirichlet with the given concentration vector.
pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, conc: &[f64]) -> Vec<f64> {
    let mut draws: Vec<f64> = conc.iter().map(|&c| sample_gamma(rng, c, 1.0)).collect();
    let total: f64 = draws.iter().sum();
    if total <= 0.0 {
        // all gammas underflowed; fall back to uniform
        return vec![1.0 / conc.len() as f64; conc.len()];
    }
    for d in &mut draws {
        *d = (*d / total).max(1e-300);
    }
    let renorm: f64 = draws.iter().sum();
    draws.iter_mut().for_each(|d| *d /= renorm);
    draws
}

/// ln Gamma(shape, scale) density up to constants.
fn ln_gamma_prior(x: f64, shape: f64, scale: f64) -> f64 {
    (shape - 1.0) * x.ln() - x / scale
}

/// ln InverseGamma(shape, scale) density up to constants.
fn ln_inv_gamma_prior(x: f64, shape: f64, scale: f64) -> f64 {
    -(shape + 1.0) * x.ln() - scale / x
}

/// One leave-one-out Gibbs pass over the allocations of one coordinate.
///
/// Each unit's component is removed from the counts, resampled with weight
/// (alpha lambda0(k) + remaining count in the unit's density cluster) times
/// the kernel density, then re-inserted.
#[allow(clippy::too_many_arguments)]
pub fn update_allocations<R: Rng + ?Sized>(
    x: &[f64],
    z: &mut [u32],
    combo_of_unit: &[u32],
    combo_hist: &mut [Vec<u32>],
    part: &mut CoordPartition,
    lambda0: &[f64],
    alpha: f64,
    kernels: &[TruncNormal],
    rng: &mut R,
) {
    let k = lambda0.len();
    let mut ln_w = vec![0.0f64; k];
    for i in 0..x.len() {
        let combo = combo_of_unit[i] as usize;
        let label = part.label_of_combo(combo as u32) as usize;
        let old = z[i] as usize;
        part.counts.remove(label, old);
        combo_hist[combo][old] -= 1;
        for (j, w) in ln_w.iter_mut().enumerate() {
            let prior = alpha * lambda0[j] + part.counts.count(label, j) as f64;
            *w = prior.ln() + kernels[j].ln_pdf(x[i]);
        }
        let new = sample_from_ln_weights(&ln_w, rng);
        z[i] = new as u32;
        part.counts.add(label, new);
        combo_hist[combo][new] += 1;
    }
}

/// Number of occupied tables when `n` customers arrive under concentration
/// `conc`: the sum of Bernoulli(conc / (j - 1 + conc)) indicators.
pub fn crt_table_draw<R: Rng + ?Sized>(rng: &mut R, n: u32, conc: f64) -> u32 {
    let mut tables = 0;
    for j in 1..=n {
        let p = conc / (j as f64 - 1.0 + conc);
        if rng.random::<f64>() < p {
            tables += 1;
        }
    }
    tables
}

/// Resample the base weight measure of one coordinate.
///
/// Auxiliary table counts per (density cluster, component) reduce the
/// Dirichlet-multinomial likelihood to a conjugate Dirichlet draw.
pub fn update_base_measure<R: Rng + ?Sized>(
    lambda0: &mut Vec<f64>,
    counts: &CellCounts,
    alpha: f64,
    alpha0: f64,
    rng: &mut R,
) {
    let k = lambda0.len();
    let mut conc = vec![alpha0 / k as f64; k];
    for label in 0..counts.k_star {
        if counts.totals[label] == 0 {
            continue;
        }
        for (j, c) in conc.iter_mut().enumerate() {
            let n = counts.count(label, j);
            if n > 0 {
                *c += crt_table_draw(rng, n, alpha * lambda0[j]) as f64;
            }
        }
    }
    *lambda0 = sample_dirichlet(rng, &conc);
}

/// Collapsed log target for the weight concentration, summed over every
/// coordinate's occupied density clusters.
pub fn alpha_ln_target(
    alpha: f64,
    coords: &[(&[f64], &CellCounts)],
    a_alpha: f64,
    b_alpha: f64,
) -> f64 {
    if alpha <= 0.0 || !alpha.is_finite() {
        return f64::NEG_INFINITY;
    }
    let mut lp = ln_gamma_prior(alpha, a_alpha, b_alpha);
    for (lambda0, counts) in coords {
        for label in 0..counts.k_star {
            let tot = counts.totals[label];
            if tot == 0 {
                continue;
            }
            lp += ln_gamma(alpha) - ln_gamma(alpha + tot as f64);
            for (j, &l0) in lambda0.iter().enumerate() {
                let n = counts.count(label, j);
                if n > 0 {
                    let a = alpha * l0;
                    lp += ln_gamma(a + n as f64) - ln_gamma(a);
                }
            }
        }
    }
    lp
}

/// Collapsed log target for the first-layer concentration, summed over all
/// (coordinate, covariate) level histograms.
pub fn phi_ln_target(phi: f64, level_hists: &[(usize, Vec<u32>)], a_phi: f64, b_phi: f64) -> f64 {
    if phi <= 0.0 || !phi.is_finite() {
        return f64::NEG_INFINITY;
    }
    let mut lp = ln_gamma_prior(phi, a_phi, b_phi);
    for (levels, hist) in level_hists {
        let d_h = *levels as f64;
        lp += ln_gamma(phi) - ln_gamma(phi + d_h);
        let conc = phi / d_h;
        for &m in hist {
            if m > 0 {
                lp += ln_gamma(conc + m as f64) - ln_gamma(conc);
            }
        }
    }
    lp
}

/// Log-normal random walk on a positive parameter; the `new/cur` factor is
/// the Jacobian of the log transform. Returns the accepted value and
/// whether the proposal was taken.
pub fn lognormal_step<R: Rng + ?Sized, F: Fn(f64) -> f64>(
    current: f64,
    proposal_var: f64,
    ln_target: F,
    rng: &mut R,
) -> (f64, bool) {
    let sd = proposal_var.sqrt();
    let eps: f64 = rand_distr::StandardNormal.sample(rng);
    let proposed = (current.ln() + sd * eps).exp();
    let ln_ratio =
        ln_target(proposed) - ln_target(current) + proposed.ln() - current.ln();
    if ln_ratio >= 0.0 || rng.random::<f64>().ln() < ln_ratio {
        (proposed, true)
    } else {
        (current, false)
    }
}

/// Acceptance bookkeeping for one adaptively scaled proposal.
#[derive(Debug, Clone, Copy, Default, serde::Serialize, serde::Deserialize)]
pub struct AcceptanceWindow {
    pub proposed: u64,
    pub accepted: u64,
}

impl AcceptanceWindow {
    pub fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        self.accepted += u64::from(accepted);
    }

    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            return 0.44;
        }
        self.accepted as f64 / self.proposed as f64
    }

    fn reset(&mut self) {
        self.proposed = 0;
        self.accepted = 0;
    }
}

/// Adaptive proposal scales for the two concentration random walks.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdaptState {
    pub var_alpha: f64,
    pub var_phi: f64,
    pub window_alpha: AcceptanceWindow,
    pub window_phi: AcceptanceWindow,
}

/// Acceptance rate the adaptation steers toward.
pub const TARGET_RATE: f64 = 0.44;

impl AdaptState {
    pub fn new(var_alpha: f64, var_phi: f64) -> Self {
        Self {
            var_alpha,
            var_phi,
            window_alpha: AcceptanceWindow::default(),
            window_phi: AcceptanceWindow::default(),
        }
    }

    /// Every 50 iterations during burn-in, nudge each log proposal variance
    /// by min(0.01, b^-1/2): up when the windowed acceptance rate exceeds
    /// 0.44, down when it falls short. Window counters reset afterwards.
    pub fn adapt(&mut self, iter: usize) {
        if iter == 0 || iter % 50 != 0 {
            return;
        }
        let step = 0.01f64.min((iter as f64).powf(-0.5));
        for (var, window) in [
            (&mut self.var_alpha, &mut self.window_alpha),
            (&mut self.var_phi, &mut self.window_phi),
        ] {
            let rate = window.rate();
            if rate > TARGET_RATE {
                *var = (var.ln() + step).exp();
            } else if rate < TARGET_RATE {
                *var = (var.ln() - step).exp();
            }
            window.reset();
        }
    }
}

/// Pooled per-component sufficient statistics over all coordinates.
#[derive(Debug, Clone, Copy, Default)]
pub struct AtomSuff {
    pub n: u64,
    pub sum: f64,
    pub sumsq: f64,
}

pub fn atom_suffstats(x: &[Vec<f64>], z: &[Vec<u32>], k: usize) -> Vec<AtomSuff> {
    let mut suff = vec![AtomSuff::default(); k];
    for (row, zrow) in x.iter().zip(z) {
        for (&xi, &zi) in row.iter().zip(zrow) {
            let s = &mut suff[zi as usize];
            s.n += 1;
            s.sum += xi;
            s.sumsq += xi * xi;
        }
    }
    suff
}

/// Summed kernel log likelihood of one component's allocated observations,
/// written through sufficient statistics (the truncation normalizer does
/// not depend on the observation).
fn kernel_ln_like(mu: f64, sigma2: f64, suff: &AtomSuff, support: (f64, f64)) -> f64 {
    if suff.n == 0 {
        return 0.0;
    }
    let tn = match TruncNormal::new(mu, sigma2, support.0, support.1) {
        Ok(tn) => tn,
        Err(_) => return f64::NEG_INFINITY,
    };
    let m = suff.n as f64;
    let ss = suff.sumsq - 2.0 * mu * suff.sum + m * mu * mu;
    -0.5 * ss / sigma2 - m * (tn.sd().ln() + tn.ln_normalizer())
}

pub(crate) fn atom_mu_ln_target(
    mu: f64,
    sigma2: f64,
    suff: &AtomSuff,
    support: (f64, f64),
    m0: f64,
    s0_sq: f64,
) -> f64 {
    let prior = TruncNormal::new(m0, s0_sq, support.0, support.1)
        .expect("validated prior parameters")
        .ln_pdf(mu);
    prior + kernel_ln_like(mu, sigma2, suff, support)
}

pub(crate) fn atom_sigma2_ln_target(
    sigma2: f64,
    mu: f64,
    suff: &AtomSuff,
    support: (f64, f64),
    a_sigma: f64,
    b_sigma: f64,
) -> f64 {
    if sigma2 <= 0.0 || !sigma2.is_finite() {
        return f64::NEG_INFINITY;
    }
    ln_inv_gamma_prior(sigma2, a_sigma, b_sigma) + kernel_ln_like(mu, sigma2, suff, support)
}

/// Hyperparameters the atom updates need.
#[derive(Debug, Clone, Copy)]
pub struct AtomPrior {
    pub m0: f64,
    pub s0_sq: f64,
    pub a_sigma: f64,
    pub b_sigma: f64,
    pub var_mu: f64,
    pub var_sigma: f64,
}

/// Metropolis update of one atom: mean first, then variance.
///
/// The mean proposal is a truncated normal on the support. The variance
/// proposal window [max(0, cur - 1), cur + 1] moves with the current value,
/// so the reverse density is evaluated on the window centered at the
/// proposal. Returns (mean accepted, variance accepted).
pub fn update_atom<R: Rng + ?Sized>(
    mu: &mut f64,
    sigma2: &mut f64,
    suff: &AtomSuff,
    support: (f64, f64),
    prior: &AtomPrior,
    rng: &mut R,
) -> (bool, bool) {
    let (a, b) = support;
    // mean step
    let fwd = TruncNormal::new(*mu, prior.var_mu, a, b).expect("support is valid");
    let mu_new = fwd.sample(rng);
    let rev = TruncNormal::new(mu_new, prior.var_mu, a, b).expect("support is valid");
    let ln_ratio = atom_mu_ln_target(mu_new, *sigma2, suff, support, prior.m0, prior.s0_sq)
        - atom_mu_ln_target(*mu, *sigma2, suff, support, prior.m0, prior.s0_sq)
        + rev.ln_pdf(*mu)
        - fwd.ln_pdf(mu_new);
    let acc_mu = ln_ratio >= 0.0 || rng.random::<f64>().ln() < ln_ratio;
    if acc_mu {
        *mu = mu_new;
    }
    // variance step with the moving window
    let window = |s2: f64| ((s2 - 1.0).max(0.0), s2 + 1.0);
    let (lo, hi) = window(*sigma2);
    let fwd = TruncNormal::new(*sigma2, prior.var_sigma, lo, hi).expect("window is valid");
    let s2_new = fwd.sample(rng);
    let acc_s2 = if s2_new > 1e-12 {
        let (rlo, rhi) = window(s2_new);
        let rev = TruncNormal::new(s2_new, prior.var_sigma, rlo, rhi).expect("window is valid");
        let ln_ratio =
            atom_sigma2_ln_target(s2_new, *mu, suff, support, prior.a_sigma, prior.b_sigma)
                - atom_sigma2_ln_target(*sigma2, *mu, suff, support, prior.a_sigma, prior.b_sigma)
                + rev.ln_pdf(*sigma2)
                - fwd.ln_pdf(s2_new);
        ln_ratio >= 0.0 || rng.random::<f64>().ln() < ln_ratio
    } else {
        false
    };
    if acc_s2 {
        *sigma2 = s2_new;
    }
    (acc_mu, acc_s2)
}

//! Full MCMC orchestration: the two-step pseudo-likelihood schedule,
//! burn-in and thinning, chain persistence, and per-draw Rao-Blackwellized
//! summaries.
//!
//! One iteration updates, in order: allocations, base weight measures, the
//! two concentrations, the shared atoms, the joint (first layer, second
//! layer) partition moves, a full second-layer Gibbs sweep, and finally the
//! copula parameters against the exact likelihood of the latent normal
//! scores. Proposal scales adapt during burn-in only and freeze afterwards.
//!
//! Coordinate-local blocks draw from per-coordinate named RNG streams, so
//! running them in parallel produces draws bit-identical to the sequential
//! schedule.

use crate::copula::{
    latent_matrix, scatter_matrix, theta_count, CopulaGrid, CopulaParams, CorrelationFactor,
};
use crate::data::Dataset;
use crate::dist::TruncNormal;
use crate::error::{Error, Result};
use crate::mixture::{
    self, alpha_ln_target, phi_ln_target, sample_dirichlet, sample_gamma, sample_inv_gamma,
    AcceptanceWindow, AdaptState, AtomPrior, Atoms,
};
use crate::partition::{CoordPartition, LevelPartition, PartitionCtx};
use crate::rng::{indexed_stream, stream};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

/// Every fixed quantity a fit needs. Defaults carry the reference prior
/// settings: Ga(2, 0.5) on both concentrations (shape-scale, mean 1),
/// IG(2, 0.5) on kernel variances, unit outer concentrations, proposal
/// variances 0.5, 101-point copula grids, and the 30000/20000/5 schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparameters {
    /// number of shared mixture components
    pub k: usize,
    /// maximum number of distinct densities per coordinate
    pub k_star: usize,
    pub support: (f64, f64),
    pub a_alpha: f64,
    pub b_alpha: f64,
    pub a_phi: f64,
    pub b_phi: f64,
    pub alpha0: f64,
    pub phi_star: f64,
    pub a_sigma: f64,
    pub b_sigma: f64,
    /// atom-mean prior location; defaults to the pooled response mean
    pub m0: Option<f64>,
    /// atom-mean prior variance; defaults to the pooled response variance
    pub s0_sq: Option<f64>,
    pub var_mu: f64,
    pub var_sigma: f64,
    /// initial proposal variances for the concentration random walks
    pub var_alpha: f64,
    pub var_phi: f64,
    pub grid_b: usize,
    pub grid_theta: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            k: 10,
            k_star: 20,
            support: (0.0, 10.0),
            a_alpha: 2.0,
            b_alpha: 0.5,
            a_phi: 2.0,
            b_phi: 0.5,
            alpha0: 1.0,
            phi_star: 1.0,
            a_sigma: 2.0,
            b_sigma: 0.5,
            m0: None,
            s0_sq: None,
            var_mu: 0.5,
            var_sigma: 0.5,
            var_alpha: 0.5,
            var_phi: 0.5,
            grid_b: 101,
            grid_theta: 101,
            iterations: 30_000,
            burn_in: 20_000,
            thin: 5,
            seed: 0,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidParameter("k must be at least 1".into()));
        }
        let full = ds.layout.full_combo_count();
        if self.k_star == 0 || self.k_star > full {
            return Err(Error::InvalidParameter(format!(
                "k_star must lie in 1..={full} (the number of covariate combinations), got {}",
                self.k_star
            )));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::InvalidParameter(format!(
                "burn_in ({}) must be smaller than iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if self.thin == 0 {
            return Err(Error::InvalidParameter("thin must be at least 1".into()));
        }
        if self.support != ds.support {
            return Err(Error::InvalidParameter(format!(
                "hyperparameter support {:?} does not match the dataset support {:?}",
                self.support, ds.support
            )));
        }
        for v in [
            self.a_alpha,
            self.b_alpha,
            self.a_phi,
            self.b_phi,
            self.alpha0,
            self.phi_star,
            self.a_sigma,
            self.b_sigma,
            self.var_mu,
            self.var_sigma,
            self.var_alpha,
            self.var_phi,
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(
                    "prior and proposal parameters must be positive".into(),
                ));
            }
        }
        CopulaGrid::new(self.grid_b, self.grid_theta)?;
        Ok(())
    }

    /// Number of retained draws for this schedule.
    pub fn retained_draws(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }
}

/// Per-coordinate chain state.
#[derive(Debug, Clone)]
pub struct CoordState {
    pub lambda0: Vec<f64>,
    pub z: Vec<u32>,
    /// per observed combination, histogram of allocations
    pub combo_hist: Vec<Vec<u32>>,
    pub partition: CoordPartition,
    rng_alloc: ChaCha8Rng,
    rng_weights: ChaCha8Rng,
    rng_partition: ChaCha8Rng,
}

/// Full chain state.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub coords: Vec<CoordState>,
    pub atoms: Atoms,
    pub alpha: f64,
    pub phi: f64,
    pub copula: CopulaParams,
    pub adapt: AdaptState,
    rng_alpha: ChaCha8Rng,
    rng_phi: ChaCha8Rng,
    rng_atoms: ChaCha8Rng,
    rng_copula: ChaCha8Rng,
}

impl ChainState {
    /// Deterministic over-dispersed initialization: allocations by quantile
    /// binning, uniform base measures, grid atoms, single-cluster
    /// partitions, near-identity copula.
    pub fn init(ds: &Dataset, hp: &Hyperparameters) -> Result<Self> {
        hp.validate(ds)?;
        let n = ds.n_units();
        let k = hp.k;
        let seed = hp.seed;
        let grid = CopulaGrid::new(hp.grid_b, hp.grid_theta)?;
        let mut coords = Vec::with_capacity(ds.n_coords());
        for (l, row) in ds.responses.iter().enumerate() {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                row[a].partial_cmp(&row[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
            });
            let mut z = vec![0u32; n];
            for (rank, &i) in order.iter().enumerate() {
                z[i] = ((rank * k) / n.max(1)).min(k - 1) as u32;
            }
            let mut combo_hist = vec![vec![0u32; k]; ds.layout.combos.len()];
            for i in 0..n {
                combo_hist[ds.layout.combo_of_unit[i] as usize][z[i] as usize] += 1;
            }
            let lambda0 = vec![1.0 / k as f64; k];
            let mut partition = CoordPartition::init_single(&ds.layout, k, hp.k_star);
            partition.rebuild_caches(&PartitionCtx {
                layout: &ds.layout,
                combo_hist: &combo_hist,
                lambda0: &lambda0,
                alpha: 1.0,
                phi: 1.0,
                phi_star: hp.phi_star,
            });
            coords.push(CoordState {
                lambda0,
                z,
                combo_hist,
                partition,
                rng_alloc: indexed_stream(seed, "alloc", l),
                rng_weights: indexed_stream(seed, "weights", l),
                rng_partition: indexed_stream(seed, "partition", l),
            });
        }
        Ok(Self {
            coords,
            atoms: Atoms::init_grid(k, hp.support, hp.b_sigma),
            alpha: hp.a_alpha * hp.b_alpha,
            phi: hp.a_phi * hp.b_phi,
            copula: CopulaParams::near_identity(ds.n_coords(), grid)?,
            adapt: AdaptState::new(hp.var_alpha, hp.var_phi),
            rng_alpha: stream(seed, "alpha"),
            rng_phi: stream(seed, "phi"),
            rng_atoms: stream(seed, "atoms"),
            rng_copula: stream(seed, "copula"),
        })
    }
}

/// Proposal/acceptance counters split by phase.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct PhaseRates {
    pub burnin: AcceptanceWindow,
    pub sampling: AcceptanceWindow,
}

impl PhaseRates {
    fn record(&mut self, in_burnin: bool, accepted: bool) {
        if in_burnin {
            self.burnin.record(accepted);
        } else {
            self.sampling.record(accepted);
        }
    }

    fn record_many(&mut self, in_burnin: bool, proposed: usize, accepted: usize) {
        let w = if in_burnin { &mut self.burnin } else { &mut self.sampling };
        w.proposed += proposed as u64;
        w.accepted += accepted as u64;
    }
}

/// Acceptance rates and memory instrumentation for one run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub alpha: PhaseRates,
    pub phi: PhaseRates,
    pub atom_mean: PhaseRates,
    pub atom_variance: PhaseRates,
    /// joint partition moves, per coordinate
    pub partition: Vec<PhaseRates>,
    pub copula_b: PhaseRates,
    pub copula_theta: PhaseRates,
    /// true iff second-layer storage equaled the product of first-layer
    /// cluster counts after every iteration
    pub tensor_storage_consistent: bool,
    /// largest observed cell count per coordinate
    pub max_tensor_cells: Vec<usize>,
    /// the full combination-space size the storage must stay below
    pub level_product: usize,
    pub wall_seconds: f64,
}

/// One retained draw. Partition labels and indices are 0-based.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DrawRecord {
    pub iter: usize,
    pub alpha: f64,
    pub phi: f64,
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    /// `[coordinate][covariate]` level-to-cluster assignments
    pub first_layer: Vec<Vec<Vec<u16>>>,
    /// `[coordinate]` second-layer tensors
    pub second_layer: Vec<TensorRecord>,
    /// `[coordinate][density cluster][component]` Rao-Blackwellized weights
    pub lambda_hat: Vec<Vec<Vec<f64>>>,
    /// `[coordinate][covariate][level cluster]` first-layer probabilities
    pub eta_hat: Vec<Vec<Vec<f64>>>,
    /// `[coordinate][density cluster]` second-layer probabilities
    pub eta_star_hat: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub theta: Vec<f64>,
    /// correlation matrix rows
    pub r: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub cells: Vec<u16>,
}

/// Retained draws plus everything needed to interpret them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub dim: usize,
    pub k: usize,
    pub k_star: usize,
    pub support: (f64, f64),
    pub level_counts: Vec<usize>,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub draws: Vec<DrawRecord>,
    pub diagnostics: ChainDiagnostics,
}

/// Rao-Blackwellized density-cluster weights: the conditional mean of each
/// marginalized weight vector given the counts. Reduces to the base measure
/// on clusters with no observations.
pub fn rao_blackwell_lambda(
    lambda0: &[f64],
    alpha: f64,
    counts: &crate::partition::CellCounts,
) -> Vec<Vec<f64>> {
    let k = lambda0.len();
    (0..counts.k_star)
        .map(|label| {
            let denom = alpha + counts.totals[label] as f64;
            (0..k)
                .map(|j| (alpha * lambda0[j] + counts.count(label, j) as f64) / denom)
                .collect()
        })
        .collect()
}

/// Execution options for a run.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// progress line to stderr every this many iterations; 0 silences
    pub log_every: usize,
    /// update coordinates in parallel (bit-identical to sequential)
    pub parallel: bool,
}

/// The sampler owns its dataset and state so joint-distribution tests can
/// alternate parameter and data updates.
pub struct Sampler {
    ds: Dataset,
    hp: Hyperparameters,
    m0: f64,
    s0_sq: f64,
    pub state: ChainState,
    pub diagnostics: ChainDiagnostics,
}

impl Sampler {
    pub fn new(ds: Dataset, hp: Hyperparameters) -> Result<Self> {
        hp.validate(&ds)?;
        let (mean, sd) = ds.pooled_mean_sd();
        let m0 = hp.m0.unwrap_or(mean);
        let s0_sq = hp.s0_sq.unwrap_or(sd * sd);
        let state = ChainState::init(&ds, &hp)?;
        let d = ds.n_coords();
        let diagnostics = ChainDiagnostics {
            partition: vec![PhaseRates::default(); d],
            max_tensor_cells: vec![1; d],
            tensor_storage_consistent: true,
            level_product: ds.layout.full_combo_count(),
            ..Default::default()
        };
        Ok(Self { ds, hp, m0, s0_sq, state, diagnostics })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.ds
    }

    pub fn hyper(&self) -> &Hyperparameters {
        &self.hp
    }

    /// Replace the response matrix (shape-checked). Supports joint
    /// prior/posterior simulation checks that alternate parameter and data
    /// moves.
    pub fn set_responses(&mut self, responses: Vec<Vec<f64>>) -> Result<()> {
        if responses.len() != self.ds.n_coords() {
            return Err(Error::DimensionMismatch("response dimension changed".into()));
        }
        let fresh = Dataset::new(
            responses,
            self.ds.layout.codes.clone(),
            self.ds.layout.level_counts.clone(),
            self.ds.support,
        )?;
        self.ds = fresh;
        Ok(())
    }

    /// Draw the full latent state from the prior given the covariates.
    pub fn draw_state_from_prior<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let hp = self.hp.clone();
        let k = hp.k;
        self.state.alpha = sample_gamma(rng, hp.a_alpha, hp.b_alpha);
        self.state.phi = sample_gamma(rng, hp.a_phi, hp.b_phi);
        for j in 0..k {
            self.state.atoms.mu[j] =
                TruncNormal::new(self.m0, self.s0_sq, hp.support.0, hp.support.1)
                    .expect("validated prior")
                    .sample(rng);
            self.state.atoms.sigma2[j] = sample_inv_gamma(rng, hp.a_sigma, hp.b_sigma);
        }
        let grid = CopulaGrid::new(hp.grid_b, hp.grid_theta).expect("validated grids");
        let d = self.ds.n_coords();
        self.state.copula = CopulaParams {
            grid,
            b_idx: (0..d.saturating_sub(1)).map(|_| rng.random_range(0..hp.grid_b)).collect(),
            theta_idx: (0..theta_count(d))
                .map(|_| rng.random_range(0..hp.grid_theta))
                .collect(),
        };
        let layout = self.ds.layout.clone();
        let alpha = self.state.alpha;
        let phi = self.state.phi;
        for coord in &mut self.state.coords {
            coord.lambda0 = sample_dirichlet(rng, &vec![hp.alpha0 / k as f64; k]);
            let mut levels = Vec::with_capacity(layout.n_covariates());
            for &d_h in &layout.level_counts {
                let eta = sample_dirichlet(rng, &vec![phi / d_h as f64; d_h]);
                let raw: Vec<u16> =
                    (0..d_h).map(|_| sample_categorical(&eta, rng) as u16).collect();
                levels.push(LevelPartition::from_assignments(&raw));
            }
            coord.partition.levels = levels;
            let shape: Vec<usize> =
                coord.partition.levels.iter().map(LevelPartition::cluster_count).collect();
            let volume: usize = shape.iter().product();
            let eta_star =
                sample_dirichlet(rng, &vec![hp.phi_star / hp.k_star as f64; hp.k_star]);
            let cells: Vec<u16> =
                (0..volume).map(|_| sample_categorical(&eta_star, rng) as u16).collect();
            coord.partition.tensor =
                crate::partition::FlowerTensor::from_cells(shape, cells, hp.k_star);
            // weights per density cluster, then allocations given weights
            let conc: Vec<f64> = coord.lambda0.iter().map(|&l| alpha * l).collect();
            let weights: Vec<Vec<f64>> =
                (0..hp.k_star).map(|_| sample_dirichlet(rng, &conc)).collect();
            for hist in coord.combo_hist.iter_mut() {
                hist.iter_mut().for_each(|c| *c = 0);
            }
            // caches must reflect the new partition before labels are read
            coord.partition.rebuild_caches(&PartitionCtx {
                layout: &layout,
                combo_hist: &coord.combo_hist,
                lambda0: &coord.lambda0,
                alpha,
                phi,
                phi_star: hp.phi_star,
            });
            for i in 0..layout.n_units() {
                let combo = layout.combo_of_unit[i] as usize;
                let label = coord.partition.label_of_combo(combo as u32) as usize;
                let zi = sample_categorical(&weights[label], rng) as u32;
                coord.z[i] = zi;
                coord.combo_hist[combo][zi as usize] += 1;
            }
            coord.partition.rebuild_caches(&PartitionCtx {
                layout: &layout,
                combo_hist: &coord.combo_hist,
                lambda0: &coord.lambda0,
                alpha,
                phi,
                phi_star: hp.phi_star,
            });
        }
    }

    /// Draw responses from the marginal model given the current latent
    /// state (allocations and atoms). The pseudo-likelihood targeted by the
    /// marginal updates treats coordinates as independent.
    pub fn draw_responses_from_state<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let kernels = self.state.atoms.kernels(self.hp.support);
        let mut responses = self.ds.responses.clone();
        for (l, row) in responses.iter_mut().enumerate() {
            for (i, x) in row.iter_mut().enumerate() {
                *x = kernels[self.state.coords[l].z[i] as usize].sample(rng);
            }
        }
        self.set_responses(responses).expect("shape unchanged");
    }

    /// Marginal-block updates (allocations, base measures, concentrations,
    /// atoms, both partition layers) for one iteration.
    pub fn marginal_step(&mut self, in_burnin: bool, parallel: bool) {
        let hp = &self.hp;
        let kernels = self.state.atoms.kernels(hp.support);
        let alpha = self.state.alpha;
        let layout = &self.ds.layout;
        let responses = &self.ds.responses;
        let phi_star = hp.phi_star;
        let alpha0 = hp.alpha0;

        // (1) allocations and (2) base measures, coordinate-local
        let alloc_pass = |l: usize, coord: &mut CoordState| {
            mixture::update_allocations(
                &responses[l],
                &mut coord.z,
                &layout.combo_of_unit,
                &mut coord.combo_hist,
                &mut coord.partition,
                &coord.lambda0,
                alpha,
                &kernels,
                &mut coord.rng_alloc,
            );
            mixture::update_base_measure(
                &mut coord.lambda0,
                &coord.partition.counts,
                alpha,
                alpha0,
                &mut coord.rng_weights,
            );
        };
        if parallel {
            self.state
                .coords
                .par_iter_mut()
                .enumerate()
                .for_each(|(l, coord)| alloc_pass(l, coord));
        } else {
            self.state.coords.iter_mut().enumerate().for_each(|(l, coord)| alloc_pass(l, coord));
        }

        // (3) concentrations
        {
            let coords_view: Vec<(&[f64], &crate::partition::CellCounts)> = self
                .state
                .coords
                .iter()
                .map(|c| (c.lambda0.as_slice(), &c.partition.counts))
                .collect();
            let (new_alpha, acc) = mixture::lognormal_step(
                self.state.alpha,
                self.state.adapt.var_alpha,
                |v| alpha_ln_target(v, &coords_view, hp.a_alpha, hp.b_alpha),
                &mut self.state.rng_alpha,
            );
            self.state.alpha = new_alpha;
            self.state.adapt.window_alpha.record(acc);
            self.diagnostics.alpha.record(in_burnin, acc);
        }
        {
            let level_hists: Vec<(usize, Vec<u32>)> = self
                .state
                .coords
                .iter()
                .flat_map(|c| {
                    c.partition
                        .levels
                        .iter()
                        .map(|lp| (lp.level_count(), lp.label_histogram()))
                })
                .collect();
            let (new_phi, acc) = mixture::lognormal_step(
                self.state.phi,
                self.state.adapt.var_phi,
                |v| phi_ln_target(v, &level_hists, hp.a_phi, hp.b_phi),
                &mut self.state.rng_phi,
            );
            self.state.phi = new_phi;
            self.state.adapt.window_phi.record(acc);
            self.diagnostics.phi.record(in_burnin, acc);
        }

        // (4) shared atoms, pooled over all coordinates
        {
            let zs: Vec<&[u32]> = self.state.coords.iter().map(|c| c.z.as_slice()).collect();
            let suff = atom_suffstats_from_slices(responses, &zs, hp.k);
            let prior = AtomPrior {
                m0: self.m0,
                s0_sq: self.s0_sq,
                a_sigma: hp.a_sigma,
                b_sigma: hp.b_sigma,
                var_mu: hp.var_mu,
                var_sigma: hp.var_sigma,
            };
            for j in 0..hp.k {
                let (acc_mu, acc_s2) = mixture::update_atom(
                    &mut self.state.atoms.mu[j],
                    &mut self.state.atoms.sigma2[j],
                    &suff[j],
                    hp.support,
                    &prior,
                    &mut self.state.rng_atoms,
                );
                self.diagnostics.atom_mean.record(in_burnin, acc_mu);
                self.diagnostics.atom_variance.record(in_burnin, acc_s2);
            }
        }

        // (5) joint trans-dimensional moves and (6) second-layer sweep
        let alpha = self.state.alpha;
        let phi = self.state.phi;
        let p = layout.n_covariates();
        let part_pass = |coord: &mut CoordState| -> (usize, usize) {
            let CoordState { lambda0, combo_hist, partition, rng_partition, .. } = coord;
            let ctx = PartitionCtx { layout, combo_hist, lambda0, alpha, phi, phi_star };
            let mut accepted = 0;
            for h in 0..p {
                accepted += usize::from(partition.joint_update(h, &ctx, rng_partition));
            }
            partition.gibbs_sweep(&ctx, rng_partition);
            (p, accepted)
        };
        let moves: Vec<(usize, usize)> = if parallel {
            self.state.coords.par_iter_mut().map(part_pass).collect()
        } else {
            self.state.coords.iter_mut().map(part_pass).collect()
        };
        for (l, (proposed, accepted)) in moves.into_iter().enumerate() {
            self.diagnostics.partition[l].record_many(in_burnin, proposed, accepted);
        }

        // memory instrumentation: storage must equal the product of
        // first-layer cluster counts at every iteration
        for (l, coord) in self.state.coords.iter().enumerate() {
            let cells = coord.partition.tensor.volume();
            let expect: usize =
                coord.partition.levels.iter().map(LevelPartition::cluster_count).product();
            if cells != expect {
                self.diagnostics.tensor_storage_consistent = false;
            }
            if cells > self.diagnostics.max_tensor_cells[l] {
                self.diagnostics.max_tensor_cells[l] = cells;
            }
        }

        #[cfg(debug_assertions)]
        self.debug_verify();
    }

    /// Copula-block update (exact likelihood on the latent normal scores).
    pub fn copula_step(&mut self, in_burnin: bool) {
        if self.ds.n_coords() < 2 {
            return;
        }
        let zs: Vec<Vec<u32>> = self.state.coords.iter().map(|c| c.z.clone()).collect();
        let y = latent_matrix(
            &self.ds.responses,
            &zs,
            &self.state.atoms.mu,
            &self.state.atoms.sigma2,
            self.hp.support,
        )
        .expect("atoms stay inside the support");
        let s = scatter_matrix(&y);
        let n = self.ds.n_units();
        let (bp, ba) =
            crate::copula::update_b(&mut self.state.copula, &s, n, &mut self.state.rng_copula);
        let (tp, ta) =
            crate::copula::update_theta(&mut self.state.copula, &s, &mut self.state.rng_copula);
        self.diagnostics.copula_b.record_many(in_burnin, bp, ba);
        self.diagnostics.copula_theta.record_many(in_burnin, tp, ta);
    }

    #[cfg(debug_assertions)]
    fn debug_verify(&self) {
        // full recounts after every update are quadratic; confine them to
        // small problems where they are free
        if self.ds.n_units() > 64 {
            return;
        }
        for coord in &self.state.coords {
            let ctx = PartitionCtx {
                layout: &self.ds.layout,
                combo_hist: &coord.combo_hist,
                lambda0: &coord.lambda0,
                alpha: self.state.alpha,
                phi: self.state.phi,
                phi_star: self.hp.phi_star,
            };
            if let Err(e) = coord.partition.verify(&ctx) {
                panic!("count tables diverged from a fresh recount: {e}");
            }
        }
    }

    /// Rao-Blackwellized snapshot of the current state.
    pub fn snapshot(&self, iter: usize) -> DrawRecord {
        let hp = &self.hp;
        let factor = CorrelationFactor::from_params(&self.state.copula);
        let d = self.ds.n_coords();
        let mut first_layer = Vec::with_capacity(d);
        let mut second_layer = Vec::with_capacity(d);
        let mut lambda_hat = Vec::with_capacity(d);
        let mut eta_hat = Vec::with_capacity(d);
        let mut eta_star_hat = Vec::with_capacity(d);
        for coord in &self.state.coords {
            first_layer.push(
                coord.partition.levels.iter().map(|lp| lp.assignments().to_vec()).collect(),
            );
            second_layer.push(TensorRecord {
                shape: coord.partition.tensor.shape().to_vec(),
                cells: coord.partition.tensor.cells().to_vec(),
            });
            lambda_hat.push(rao_blackwell_lambda(
                &coord.lambda0,
                self.state.alpha,
                &coord.partition.counts,
            ));
            eta_hat.push(
                coord
                    .partition
                    .levels
                    .iter()
                    .map(|lp| {
                        let d_h = lp.level_count() as f64;
                        let conc = self.state.phi / d_h;
                        lp.label_histogram()
                            .iter()
                            .take(lp.cluster_count())
                            .map(|&m| (conc + m as f64) / (self.state.phi + d_h))
                            .collect()
                    })
                    .collect(),
            );
            let volume = coord.partition.tensor.volume() as f64;
            let conc_star = hp.phi_star / hp.k_star as f64;
            eta_star_hat.push(
                coord
                    .partition
                    .tensor
                    .label_occupancy()
                    .iter()
                    .map(|&m| (conc_star + m as f64) / (hp.phi_star + volume))
                    .collect(),
            );
        }
        DrawRecord {
            iter,
            alpha: self.state.alpha,
            phi: self.state.phi,
            mu: self.state.atoms.mu.clone(),
            sigma2: self.state.atoms.sigma2.clone(),
            first_layer,
            second_layer,
            lambda_hat,
            eta_hat,
            eta_star_hat,
            b: self.state.copula.b_values(),
            theta: self.state.copula.theta_values(),
            r: factor.r_rows(),
        }
    }

    /// Run the full schedule and collect retained draws.
    pub fn run(mut self, opts: RunOptions) -> PosteriorDraws {
        let start = std::time::Instant::now();
        let hp = self.hp.clone();
        let mut draws = Vec::with_capacity(hp.retained_draws());
        for iter in 1..=hp.iterations {
            let in_burnin = iter <= hp.burn_in;
            self.marginal_step(in_burnin, opts.parallel);
            self.copula_step(in_burnin);
            if in_burnin {
                self.state.adapt.adapt(iter);
            }
            if iter > hp.burn_in && (iter - hp.burn_in) % hp.thin == 0 {
                draws.push(self.snapshot(iter));
            }
            if opts.log_every > 0 && iter % opts.log_every == 0 {
                eprintln!(
                    "iter {iter}/{} | accept alpha {:.2} phi {:.2} mean {:.2} var {:.2} \
                     joint {:.3} b {:.2} theta {:.2}",
                    hp.iterations,
                    rate_so_far(&self.diagnostics.alpha),
                    rate_so_far(&self.diagnostics.phi),
                    rate_so_far(&self.diagnostics.atom_mean),
                    rate_so_far(&self.diagnostics.atom_variance),
                    self.diagnostics.partition.iter().map(rate_so_far).sum::<f64>()
                        / self.diagnostics.partition.len().max(1) as f64,
                    rate_so_far(&self.diagnostics.copula_b),
                    rate_so_far(&self.diagnostics.copula_theta),
                );
            }
        }
        self.diagnostics.wall_seconds = start.elapsed().as_secs_f64();
        PosteriorDraws {
            dim: self.ds.n_coords(),
            k: hp.k,
            k_star: hp.k_star,
            support: hp.support,
            level_counts: self.ds.layout.level_counts.clone(),
            iterations: hp.iterations,
            burn_in: hp.burn_in,
            thin: hp.thin,
            seed: hp.seed,
            draws,
            diagnostics: self.diagnostics,
        }
    }
}

fn atom_suffstats_from_slices(
    x: &[Vec<f64>],
    z: &[&[u32]],
    k: usize,
) -> Vec<mixture::AtomSuff> {
    let mut suff = vec![mixture::AtomSuff::default(); k];
    for (row, zrow) in x.iter().zip(z) {
        for (&xi, &zi) in row.iter().zip(zrow.iter()) {
            let s = &mut suff[zi as usize];
            s.n += 1;
            s.sum += xi;
            s.sumsq += xi * xi;
        }
    }
    suff
}

fn rate_so_far(p: &PhaseRates) -> f64 {
    let proposed = p.burnin.proposed + p.sampling.proposed;
    let accepted = p.burnin.accepted + p.sampling.accepted;
    if proposed == 0 {
        0.0
    } else {
        accepted as f64 / proposed as f64
    }
}

fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut cum = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        cum += w;
        if u < cum {
            return i;
        }
    }
    weights.len() - 1
}

/// Run one chain on a dataset.
pub fn run_chain(ds: &Dataset, hp: &Hyperparameters, opts: RunOptions) -> Result<PosteriorDraws> {
    let sampler = Sampler::new(ds.clone(), hp.clone())?;
    Ok(sampler.run(opts))
}

const DRAWS_SCHEMA: &str = "flower-draws-v1";

#[derive(Serialize, Deserialize)]
struct DrawsHeader {
    schema: String,
    dim: usize,
    k: usize,
    k_star: usize,
    support: (f64, f64),
    level_counts: Vec<usize>,
    iterations: usize,
    burn_in: usize,
    thin: usize,
    seed: u64,
    draws: usize,
    diagnostics: ChainDiagnostics,
}

/// Persist draws as newline-delimited JSON: a self-describing header line
/// followed by one record per draw.
pub fn write_draws(path: &Path, pd: &PosteriorDraws) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = DrawsHeader {
        schema: DRAWS_SCHEMA.to_string(),
        dim: pd.dim,
        k: pd.k,
        k_star: pd.k_star,
        support: pd.support,
        level_counts: pd.level_counts.clone(),
        iterations: pd.iterations,
        burn_in: pd.burn_in,
        thin: pd.thin,
        seed: pd.seed,
        draws: pd.draws.len(),
        diagnostics: pd.diagnostics.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for draw in &pd.draws {
        serde_json::to_writer(&mut w, draw)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Load a draw store written by [`write_draws`].
pub fn read_draws(path: &Path) -> Result<PosteriorDraws> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header_line =
        lines.next().ok_or_else(|| Error::Data(format!("{} is empty", path.display())))??;
    let header: DrawsHeader = serde_json::from_str(&header_line)?;
    if header.schema != DRAWS_SCHEMA {
        return Err(Error::Data(format!(
            "unsupported draw store schema '{}' (expected '{DRAWS_SCHEMA}')",
            header.schema
        )));
    }
    let mut draws = Vec::with_capacity(header.draws);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        draws.push(serde_json::from_str(&line)?);
    }
    if draws.len() != header.draws {
        return Err(Error::Data(format!(
            "draw store announces {} draws but contains {}",
            header.draws,
            draws.len()
        )));
    }
    Ok(PosteriorDraws {
        dim: header.dim,
        k: header.k,
        k_star: header.k_star,
        support: header.support,
        level_counts: header.level_counts,
        iterations: header.iterations,
        burn_in: header.burn_in,
        thin: header.thin,
        seed: header.seed,
        draws,
        diagnostics: header.diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::CellCounts;

    fn tiny_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = stream(seed, "tiny-data");
        let responses: Vec<Vec<f64>> =
            (0..2).map(|_| (0..n).map(|_| rng.random_range(0.5..9.5)).collect()).collect();
        let codes: Vec<Vec<u16>> = vec![(0..n).map(|i| (i % 2) as u16).collect()];
        Dataset::new(responses, codes, vec![2], (0.0, 10.0)).unwrap()
    }

    fn tiny_hyper(iterations: usize, burn_in: usize, thin: usize) -> Hyperparameters {
        Hyperparameters { k: 3, k_star: 2, iterations, burn_in, thin, seed: 9, ..Default::default() }
    }

    #[test]
    fn rao_blackwell_weights_match_the_stated_examples() {
        // zero counts: the base measure itself
        let counts = CellCounts::zeros(2, 1);
        let l0 = vec![0.5, 0.5];
        let lh = rao_blackwell_lambda(&l0, 1.0, &counts);
        assert_eq!(lh[0], vec![0.5, 0.5]);

        // alpha -> 0 with counts (3, 1): the empirical proportions
        let mut counts = CellCounts::zeros(2, 1);
        for _ in 0..3 {
            counts.add(0, 0);
        }
        counts.add(0, 1);
        let lh = rao_blackwell_lambda(&l0, 1e-12, &counts);
        assert!((lh[0][0] - 0.75).abs() < 1e-9);
        assert!((lh[0][1] - 0.25).abs() < 1e-9);

        // alpha = 1, lambda0 = (0.5, 0.5), counts (3, 1): (0.7, 0.3)
        let lh = rao_blackwell_lambda(&l0, 1.0, &counts);
        assert!((lh[0][0] - 0.7).abs() < 1e-12);
        assert!((lh[0][1] - 0.3).abs() < 1e-12);
        assert!((lh[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn retained_draw_count_follows_the_schedule() {
        for (iterations, burn_in, thin) in [(30, 10, 5), (37, 11, 5), (25, 24, 1), (40, 10, 7)] {
            let ds = tiny_dataset(6, 1);
            let hp = tiny_hyper(iterations, burn_in, thin);
            let pd = run_chain(&ds, &hp, RunOptions::default()).unwrap();
            assert_eq!(
                pd.draws.len(),
                (iterations - burn_in) / thin,
                "{iterations}/{burn_in}/{thin}"
            );
            assert_eq!(pd.draws.len(), hp.retained_draws());
        }
    }

    #[test]
    fn fixed_seed_runs_are_bit_identical_and_parallel_matches_sequential() {
        let ds = tiny_dataset(12, 2);
        let hp = tiny_hyper(60, 20, 2);
        let a = run_chain(&ds, &hp, RunOptions { log_every: 0, parallel: false }).unwrap();
        let b = run_chain(&ds, &hp, RunOptions { log_every: 0, parallel: false }).unwrap();
        let c = run_chain(&ds, &hp, RunOptions { log_every: 0, parallel: true }).unwrap();
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.draws, c.draws);
    }

    #[test]
    fn empty_dataset_runs_on_the_priors() {
        let ds = Dataset::new(vec![vec![], vec![]], vec![vec![]], vec![2], (0.0, 10.0)).unwrap();
        let hp = Hyperparameters {
            k: 2,
            k_star: 2,
            m0: Some(5.0),
            s0_sq: Some(4.0),
            iterations: 30_000,
            burn_in: 2_000,
            thin: 2,
            seed: 3,
            ..Default::default()
        };
        let pd = run_chain(&ds, &hp, RunOptions::default()).unwrap();
        let mean_alpha: f64 = pd.draws.iter().map(|d| d.alpha).sum::<f64>() / pd.draws.len() as f64;
        // prior mean 1.0 (shape 2, scale 0.5); loose Monte Carlo bound
        assert!((mean_alpha - 1.0).abs() < 0.06, "prior alpha mean {mean_alpha}");
        let mean_mu: f64 = pd.draws.iter().map(|d| d.mu[0]).sum::<f64>() / pd.draws.len() as f64;
        assert!((mean_mu - 5.0).abs() < 0.25, "prior mu mean {mean_mu}");
    }

    #[test]
    fn draw_store_roundtrips() {
        let ds = tiny_dataset(8, 4);
        let hp = tiny_hyper(24, 10, 2);
        let pd = run_chain(&ds, &hp, RunOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("draws.ndjson");
        write_draws(&path, &pd).unwrap();
        let back = read_draws(&path).unwrap();
        assert_eq!(back.draws, pd.draws);
        assert_eq!(back.k, pd.k);
        assert_eq!(back.level_counts, pd.level_counts);
    }

    #[test]
    fn validation_rejects_bad_schedules_and_shapes() {
        let ds = tiny_dataset(6, 5);
        let mut hp = tiny_hyper(10, 10, 1);
        assert!(hp.validate(&ds).is_err()); // burn_in == iterations
        hp.burn_in = 5;
        hp.k_star = 3; // only 2 combinations exist
        assert!(hp.validate(&ds).is_err());
        hp.k_star = 2;
        hp.support = (0.0, 5.0); // dataset support differs
        assert!(hp.validate(&ds).is_err());
    }

    #[test]
    fn memory_instrumentation_tracks_single_cluster_initialization() {
        let ds = tiny_dataset(10, 6);
        let hp = tiny_hyper(40, 20, 4);
        let pd = run_chain(&ds, &hp, RunOptions::default()).unwrap();
        assert!(pd.diagnostics.tensor_storage_consistent);
        // one binary covariate: storage can never exceed 2 cells
        assert!(pd.diagnostics.max_tensor_cells[0] <= 2);
        assert_eq!(pd.diagnostics.level_product, 2);
    }
}

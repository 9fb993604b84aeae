//! Gaussian copula with a spherical-coordinate Cholesky parameterization.
//!
//! Any d x d correlation matrix factors as R = V V' with V lower triangular
//! and unit-norm rows. Row l of V (l >= 2) is described by one length
//! parameter in (-1, 1) and l - 2 angles in (-pi, pi), giving d - 1 lengths
//! and (d - 1)(d - 2)/2 angles in total. Both sets live on fixed finite
//! grids and are updated one at a time by Metropolis moves among grid
//! neighbors. |R| = prod(1 - b^2), so only the length parameters enter the
//! determinant.

use crate::dist::{std_normal_quantile, TruncNormal};
use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// CDF values are clamped to [EPS, 1 - EPS] before the normal quantile so
/// observations on the support boundary map to finite latent values.
pub const CDF_CLAMP: f64 = 1e-12;

/// Number of angle parameters for a d-dimensional correlation matrix.
pub fn theta_count(dim: usize) -> usize {
    if dim < 3 {
        0
    } else {
        (dim - 1) * (dim - 2) / 2
    }
}

/// Grid sizes for the two copula parameter families.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct CopulaGrid {
    pub m_b: usize,
    pub m_theta: usize,
}

impl CopulaGrid {
    pub fn new(m_b: usize, m_theta: usize) -> Result<Self> {
        if m_b < 3 || m_theta < 3 {
            return Err(Error::InvalidParameter(format!(
                "copula grids need at least 3 points, got m_b={m_b}, m_theta={m_theta}"
            )));
        }
        Ok(Self { m_b, m_theta })
    }

    /// Length value at 0-based grid index: -0.99 + 2 * 0.99 * m / (M - 1).
    #[inline]
    pub fn b_value(&self, idx: usize) -> f64 {
        -0.99 + 2.0 * 0.99 * idx as f64 / (self.m_b - 1) as f64
    }

    /// Angle value at 0-based grid index: -3.14 + 2 * 3.14 * m / (M - 1).
    #[inline]
    pub fn theta_value(&self, idx: usize) -> f64 {
        -3.14 + 2.0 * 3.14 * idx as f64 / (self.m_theta - 1) as f64
    }

    fn center(m: usize) -> usize {
        (m - 1) / 2
    }
}

/// Grid-indexed copula parameters for a d-dimensional response.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CopulaParams {
    pub grid: CopulaGrid,
    pub b_idx: Vec<usize>,
    pub theta_idx: Vec<usize>,
}

impl CopulaParams {
    /// All parameters at the grid point closest to zero; with odd grid sizes
    /// this is exactly the identity correlation.
    pub fn near_identity(dim: usize, grid: CopulaGrid) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("copula dimension must be >= 1".into()));
        }
        Ok(Self {
            grid,
            b_idx: vec![CopulaGrid::center(grid.m_b); dim.saturating_sub(1)],
            theta_idx: vec![CopulaGrid::center(grid.m_theta); theta_count(dim)],
        })
    }

    pub fn dim(&self) -> usize {
        self.b_idx.len() + 1
    }

    pub fn b_values(&self) -> Vec<f64> {
        self.b_idx.iter().map(|&i| self.grid.b_value(i)).collect()
    }

    pub fn theta_values(&self) -> Vec<f64> {
        self.theta_idx.iter().map(|&i| self.grid.theta_value(i)).collect()
    }
}

/// A correlation matrix together with its lower-triangular factor.
#[derive(Debug, Clone)]
pub struct CorrelationFactor {
    dim: usize,
    /// row-major lower-triangular factor, R = V V'
    v: Vec<f64>,
    /// row-major correlation matrix
    r: Vec<f64>,
    logdet: f64,
}

impl CorrelationFactor {
    /// Build V and R from length and angle values.
    pub fn from_b_theta(b: &[f64], theta: &[f64]) -> Result<Self> {
        let dim = b.len() + 1;
        if theta.len() != theta_count(dim) {
            return Err(Error::DimensionMismatch(format!(
                "{} lengths need {} angles, got {}",
                b.len(),
                theta_count(dim),
                theta.len()
            )));
        }
        for &v in b {
            if !(-1.0..=1.0).contains(&v) || v.abs() >= 1.0 {
                return Err(Error::InvalidParameter(format!("length {v} outside (-1, 1)")));
            }
        }
        let mut v = vec![0.0; dim * dim];
        v[0] = 1.0;
        for row in 1..dim {
            let len = b[row - 1];
            let rest = (1.0 - len * len).sqrt();
            if row == 1 {
                v[dim] = len;
                v[dim + 1] = rest;
                continue;
            }
            // 1-based row L = row + 1 uses angles i1(L) .. i2(L), with
            // i1(L) = (L^2 - 5L + 8)/2 and i2(L) = (L^2 - 3L + 2)/2.
            let l1 = row + 1;
            let t0 = (l1 * l1 + 8 - 5 * l1) / 2 - 1;
            let mut cos_prod = 1.0;
            for col in 0..row - 1 {
                v[row * dim + col] = len * cos_prod * theta[t0 + col].sin();
                cos_prod *= theta[t0 + col].cos();
            }
            v[row * dim + row - 1] = len * cos_prod;
            v[row * dim + row] = rest;
        }
        let mut r = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                let mut s = 0.0;
                for k in 0..=j {
                    s += v[i * dim + k] * v[j * dim + k];
                }
                r[i * dim + j] = s;
                r[j * dim + i] = s;
            }
        }
        let logdet = b.iter().map(|&x| (1.0 - x * x).ln()).sum();
        Ok(Self { dim, v, r, logdet })
    }

    pub fn from_params(p: &CopulaParams) -> Self {
        Self::from_b_theta(&p.b_values(), &p.theta_values())
            .expect("grid values are always inside the parameter space")
    }

    /// Factor an explicitly given correlation matrix (row-major rows).
    pub fn from_correlation(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch("correlation matrix must be square".into()));
        }
        let mut r = vec![0.0; dim * dim];
        for i in 0..dim {
            if (rows[i][i] - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidParameter("correlation diagonal must be 1".into()));
            }
            for j in 0..dim {
                if (rows[i][j] - rows[j][i]).abs() > 1e-10 {
                    return Err(Error::InvalidParameter("correlation matrix must be symmetric".into()));
                }
                r[i * dim + j] = rows[i][j];
            }
        }
        // plain Cholesky; fails on non-PD input
        let mut v = vec![0.0; dim * dim];
        let mut logdet = 0.0;
        for i in 0..dim {
            for j in 0..=i {
                let mut s = r[i * dim + j];
                for k in 0..j {
                    s -= v[i * dim + k] * v[j * dim + k];
                }
                if i == j {
                    if s <= 0.0 {
                        return Err(Error::InvalidParameter(
                            "correlation matrix is not positive definite".into(),
                        ));
                    }
                    v[i * dim + i] = s.sqrt();
                    logdet += s.ln();
                } else {
                    v[i * dim + j] = s / v[j * dim + j];
                }
            }
        }
        Ok(Self { dim, v, r, logdet })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn r(&self, i: usize, j: usize) -> f64 {
        self.r[i * self.dim + j]
    }

    pub fn r_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim)
            .map(|i| self.r[i * self.dim..(i + 1) * self.dim].to_vec())
            .collect()
    }

    #[inline]
    pub fn v(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.dim + j]
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// Forward-substitute V w = y.
    fn solve_lower(&self, y: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            let mut s = y[i];
            for k in 0..i {
                s -= self.v[i * d + k] * out[k];
            }
            out[i] = s / self.v[i * d + i];
        }
    }

    /// y' R^{-1} y computed through the factor, never through an explicit
    /// inverse.
    pub fn quad_form_inv(&self, y: &[f64]) -> f64 {
        let mut w = vec![0.0; self.dim];
        self.solve_lower(y, &mut w);
        w.iter().map(|x| x * x).sum()
    }

    /// Dense R^{-1} (row-major), used for trace products against scatter
    /// matrices.
    pub fn inverse(&self) -> Vec<f64> {
        let d = self.dim;
        // W = V^{-1} by forward substitution on unit vectors, R^{-1} = W' W
        let mut w = vec![0.0; d * d];
        let mut e = vec![0.0; d];
        let mut col = vec![0.0; d];
        for j in 0..d {
            e.iter_mut().for_each(|x| *x = 0.0);
            e[j] = 1.0;
            self.solve_lower(&e, &mut col);
            for i in 0..d {
                w[i * d + j] = col[i];
            }
        }
        let mut inv = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += w[k * d + i] * w[k * d + j];
                }
                inv[i * d + j] = s;
            }
        }
        inv
    }

    /// tr(R^{-1} S) for a symmetric row-major S.
    pub fn trace_inv_product(&self, s: &[f64]) -> f64 {
        let d = self.dim;
        debug_assert_eq!(s.len(), d * d);
        let inv = self.inverse();
        let mut t = 0.0;
        for i in 0..d {
            for j in 0..d {
                t += inv[i * d + j] * s[j * d + i];
            }
        }
        t
    }

    /// Log Gaussian-copula density -logdet/2 - y'(R^{-1} - I)y / 2.
    pub fn copula_log_density(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "copula expects a length-{} vector, got {}",
                self.dim,
                y.len()
            )));
        }
        let quad = self.quad_form_inv(y);
        let norm: f64 = y.iter().map(|x| x * x).sum();
        Ok(-0.5 * self.logdet - 0.5 * (quad - norm))
    }
}

/// Map observations to latent standard-normal coordinates via the
/// probability-integral transform of each unit's allocated kernel.
///
/// `x` and `z` are indexed `[coordinate][unit]`. CDF values are clamped to
/// `[CDF_CLAMP, 1 - CDF_CLAMP]`, so every latent value is finite even when
/// an observation sits exactly on a support boundary.
pub fn latent_matrix(
    x: &[Vec<f64>],
    z: &[Vec<u32>],
    mu: &[f64],
    sigma2: &[f64],
    support: (f64, f64),
) -> Result<Vec<Vec<f64>>> {
    if x.len() != z.len() {
        return Err(Error::DimensionMismatch("x and z must have the same shape".into()));
    }
    let kernels: Vec<TruncNormal> = mu
        .iter()
        .zip(sigma2)
        .map(|(&m, &s2)| TruncNormal::new(m, s2, support.0, support.1))
        .collect::<Result<_>>()?;
    let mut y = Vec::with_capacity(x.len());
    for (row, zrow) in x.iter().zip(z) {
        let mut out = Vec::with_capacity(row.len());
        for (&xi, &zi) in row.iter().zip(zrow) {
            let u = kernels[zi as usize].cdf(xi).clamp(CDF_CLAMP, 1.0 - CDF_CLAMP);
            out.push(std_normal_quantile(u)?);
        }
        y.push(out);
    }
    Ok(y)
}

/// Sum of outer products y_i y_i' over units, row-major d x d.
pub fn scatter_matrix(y: &[Vec<f64>]) -> Vec<f64> {
    let d = y.len();
    let n = y.first().map_or(0, Vec::len);
    let mut s = vec![0.0; d * d];
    for i in 0..n {
        for a in 0..d {
            let ya = y[a][i];
            for b in 0..d {
                s[a * d + b] += ya * y[b][i];
            }
        }
    }
    s
}

fn neighbor_candidates(idx: usize, m: usize) -> ([usize; 3], usize) {
    let mut cand = [0usize; 3];
    let mut cnt = 0;
    if idx > 0 {
        cand[cnt] = idx - 1;
        cnt += 1;
    }
    cand[cnt] = idx;
    cnt += 1;
    if idx + 1 < m {
        cand[cnt] = idx + 1;
        cnt += 1;
    }
    (cand, cnt)
}

fn log_target_b(params: &CopulaParams, pos: usize, idx: usize, scatter: &[f64], n: usize) -> f64 {
    let mut b = params.b_values();
    b[pos] = params.grid.b_value(idx);
    let factor = CorrelationFactor::from_b_theta(&b, &params.theta_values())
        .expect("grid values valid");
    let bv = b[pos];
    -(n as f64) * 0.5 * (1.0 - bv * bv).ln() - 0.5 * factor.trace_inv_product(scatter)
}

fn log_target_theta(params: &CopulaParams, pos: usize, idx: usize, scatter: &[f64]) -> f64 {
    let mut theta = params.theta_values();
    theta[pos] = params.grid.theta_value(idx);
    let factor = CorrelationFactor::from_b_theta(&params.b_values(), &theta)
        .expect("grid values valid");
    -0.5 * factor.trace_inv_product(scatter)
}

/// One Metropolis scan over all length parameters, in fixed index order.
///
/// Each parameter proposes uniformly among its current grid point and the
/// grid neighbors (two candidates at grid edges, three in the interior);
/// the proposal-asymmetry correction at edges is included. Returns
/// (proposals, acceptances).
pub fn update_b<R: Rng + ?Sized>(
    params: &mut CopulaParams,
    scatter: &[f64],
    n: usize,
    rng: &mut R,
) -> (usize, usize) {
    let mut proposed = 0;
    let mut accepted = 0;
    for pos in 0..params.b_idx.len() {
        let cur = params.b_idx[pos];
        let (cand, n_cur) = neighbor_candidates(cur, params.grid.m_b);
        let new = cand[rng.random_range(0..n_cur)];
        proposed += 1;
        if new == cur {
            accepted += 1;
            continue;
        }
        let (_, n_new) = neighbor_candidates(new, params.grid.m_b);
        let ln_ratio = log_target_b(params, pos, new, scatter, n)
            - log_target_b(params, pos, cur, scatter, n)
            + (n_cur as f64).ln()
            - (n_new as f64).ln();
        if ln_ratio >= 0.0 || rng.random::<f64>().ln() < ln_ratio {
            params.b_idx[pos] = new;
            accepted += 1;
        }
    }
    (proposed, accepted)
}

/// One Metropolis scan over all angle parameters; the determinant does not
/// depend on the angles, so the target is the quadratic form alone.
pub fn update_theta<R: Rng + ?Sized>(
    params: &mut CopulaParams,
    scatter: &[f64],
    rng: &mut R,
) -> (usize, usize) {
    let mut proposed = 0;
    let mut accepted = 0;
    for pos in 0..params.theta_idx.len() {
        let cur = params.theta_idx[pos];
        let (cand, n_cur) = neighbor_candidates(cur, params.grid.m_theta);
        let new = cand[rng.random_range(0..n_cur)];
        proposed += 1;
        if new == cur {
            accepted += 1;
            continue;
        }
        let (_, n_new) = neighbor_candidates(new, params.grid.m_theta);
        let ln_ratio = log_target_theta(params, pos, new, scatter)
            - log_target_theta(params, pos, cur, scatter)
            + (n_cur as f64).ln()
            - (n_new as f64).ln();
        if ln_ratio >= 0.0 || rng.random::<f64>().ln() < ln_ratio {
            params.theta_idx[pos] = new;
            accepted += 1;
        }
    }
    (proposed, accepted)
}

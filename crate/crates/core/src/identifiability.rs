//! Exploration measures and operator diagnostics that separate well- from ill-posed problems.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::error::{Error, Result};
use crate::linalg::{norm2, Matrix, SymmetricEigen};
use crate::numerics::Grid;
use crate::operators::field_gradient;
use crate::particles::{keyed_rng, ParticleEnsemble};
use crate::quadform::QuadForm;
use crate::SampledField;

/// Relative eigenvalue threshold for the decay verdict.
pub const DECAY_THRESHOLD: f64 = 1e-3;
/// Relative density below which the kernel is masked.
pub const ZERO_DENSITY_GUARD: f64 = 1e-12;

/// A nonnegative density on a uniform grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplorationMeasure {
    pub grid: Grid<f64>,
    pub density: Vec<f64>,
    /// Riemann mass of the unnormalized density.
    pub normalization: f64,
}

impl ExplorationMeasure {
    fn from_unnormalized(grid: Grid<f64>, density: Vec<f64>) -> Self {
        let normalization = density.iter().sum::<f64>() * grid.dx;
        Self {
            grid,
            density,
            normalization,
        }
    }

    pub fn mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.grid.dx
    }

    /// Copy with unit mass; a zero measure stays zero.
    pub fn normalized(&self) -> Self {
        let z = self.mass();
        let density = if z > 0.0 {
            self.density.iter().map(|v| v / z).collect()
        } else {
            self.density.clone()
        };
        Self {
            grid: self.grid,
            density,
            normalization: self.normalization,
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["grid", "density"])?;
        for (j, d) in self.density.iter().enumerate() {
            w.write_record([self.grid.point(j).to_string(), d.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_shared_grid(data: &[SampledField]) -> Result<Grid<f64>> {
    let first = data.first().ok_or(Error::TooFewPoints { needed: 1, found: 0 })?;
    let grid = *first.grid()?;
    if data.iter().any(|u| !u.same_grid(first)) {
        return Err(Error::GridMismatch);
    }
    Ok(grid)
}

/// Number of `ρ₁` bins for `points` samples: `⌈√points⌉` clamped to `[20, 200]`.
pub fn rho1_bin_count(points: usize) -> usize {
    ((points as f64).sqrt().ceil() as usize).clamp(20, 200)
}

/// Histogram density of `s = u(x)` weighted by `|u| |∇u|² Δx`, unnormalized.
pub fn rho1(data: &[SampledField]) -> Result<ExplorationMeasure> {
    let first = data.first().ok_or(Error::TooFewPoints { needed: 1, found: 0 })?;
    let points = first.values.len() * data.len();
    let (lo, hi) = data
        .iter()
        .flat_map(|u| u.values.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let bins = rho1_bin_count(points);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut density = vec![0.0; bins];
    for u in data {
        let grads = field_gradient(u)?;
        let cell = u.cell_volume();
        for (idx, &s) in u.values.iter().enumerate() {
            let g2: f64 = grads.iter().map(|c| c[idx] * c[idx]).sum();
            let b = (((s - lo) / width) as usize).min(bins - 1);
            density[b] += s.abs() * g2 * cell;
        }
    }
    density.iter_mut().for_each(|d| *d /= width);
    let grid = Grid::new(lo + 0.5 * width, width, bins)?;
    Ok(ExplorationMeasure::from_unnormalized(grid, density))
}

/// `ρ̇₂ = Σ_l u_l` on the shared grid, clipped at zero, unnormalized.
pub fn rho2(data: &[SampledField]) -> Result<ExplorationMeasure> {
    let grid = check_shared_grid(data)?;
    let mut density = vec![0.0; grid.n];
    for u in data {
        density.iter_mut().zip(&u.values).for_each(|(d, v)| *d += v);
    }
    density.iter_mut().for_each(|d| *d = d.max(0.0));
    Ok(ExplorationMeasure::from_unnormalized(grid, density))
}

fn shifted(v: &[f64], j: isize) -> f64 {
    if j >= 0 && (j as usize) < v.len() {
        v[j as usize]
    } else {
        0.0
    }
}

/// Unnormalized `ρ̇₃(y_p) = Σ_l Σ_j u_l(x_j) u_l(x_j − y_p) Δx` for `p = −max_lag..=max_lag`, clipped at zero.
fn rho3_raw(data: &[SampledField], grid: &Grid<f64>, max_lag: usize) -> Vec<f64> {
    let k = max_lag as isize;
    (-k..=k)
        .into_par_iter()
        .map(|p| {
            let total: f64 = data
                .iter()
                .map(|u| {
                    u.values
                        .iter()
                        .enumerate()
                        .map(|(j, &a)| a * shifted(&u.values, j as isize - p))
                        .sum::<f64>()
                })
                .sum();
            (total * grid.dx).max(0.0)
        })
        .collect()
}

/// Normalized correlation measure `ρ₃` on the lag grid `y_p = p Δx`, `|p| ≤ max_lag`.
pub fn rho3(data: &[SampledField], max_lag: usize) -> Result<ExplorationMeasure> {
    let grid = check_shared_grid(data)?;
    let raw = rho3_raw(data, &grid, max_lag);
    let lag_grid = Grid::new(-(max_lag as f64) * grid.dx, grid.dx, 2 * max_lag + 1)?;
    Ok(ExplorationMeasure::from_unnormalized(lag_grid, raw).normalized())
}

/// `G(y_p, y_q) = Σ_l Σ_j u_l⁺(x_j) u_l(x_j − y_p) u_l(x_j − y_q) Δx` for `|p|, |q| ≤ max_lag`.
pub fn triple_correlation(data: &[SampledField], max_lag: usize) -> Result<Matrix<f64>> {
    let grid = check_shared_grid(data)?;
    let size = 2 * max_lag + 1;
    let k = max_lag as isize;
    let rows: Vec<Vec<f64>> = (0..size)
        .into_par_iter()
        .map(|a| {
            let p = a as isize - k;
            let mut row = vec![0.0; size];
            for u in data {
                let v = &u.values;
                for (j, &w) in v.iter().enumerate() {
                    let ji = j as isize;
                    let left = w.max(0.0) * shifted(v, ji - p);
                    if left == 0.0 {
                        continue;
                    }
                    for (b, r) in row.iter_mut().enumerate() {
                        *r += left * shifted(v, ji - (b as isize - k));
                    }
                }
            }
            row.iter_mut().for_each(|r| *r *= grid.dx);
            row
        })
        .collect();
    Matrix::from_rows(&rows)
}

/// Discretized `L_Ḡ` on the lag grid.
#[derive(Clone, Debug, Serialize)]
pub struct DiscreteOperator {
    pub grid: Grid<f64>,
    /// `Ḡ = G / (ρ̇₃ ρ̇₃)`, zero where either density is masked.
    pub kernel_matrix: Matrix<f64>,
    /// Raw triple correlation `G`.
    pub g_kernel: Matrix<f64>,
    /// Normalized `ρ₃`.
    pub rho: ExplorationMeasure,
    /// Quadrature weights `ρ̇₃(y) Δy` of the operator action.
    pub weights: Vec<f64>,
}

impl DiscreteOperator {
    /// `(L_Ḡ c)(y_p) = Σ_q Ḡ(y_p, y_q) c_q ρ̇₃(y_q) Δy`.
    pub fn apply(&self, c: &[f64]) -> Result<Vec<f64>> {
        let wc: Vec<f64> = c.iter().zip(&self.weights).map(|(a, w)| a * w).collect();
        Ok(self.kernel_matrix.matvec(&wc))
    }

    /// Support mask of `ρ₃`.
    pub fn support(&self) -> Vec<bool> {
        self.weights.iter().map(|&w| w > 0.0).collect()
    }

    /// `W^{1/2} Ḡ W^{1/2}`, symmetric and isospectral with `L_Ḡ`.
    pub fn symmetric_form(&self) -> Matrix<f64> {
        let s: Vec<f64> = self.weights.iter().map(|w| w.sqrt()).collect();
        let n = s.len();
        Matrix::from_fn(n, n, |i, j| self.kernel_matrix[(i, j)] * s[i] * s[j])
    }
}

/// `L_Ḡ` from the data on lags `|y| ≤ max_lag Δx`.
pub fn build_lgbar(data: &[SampledField], max_lag: usize) -> Result<DiscreteOperator> {
    let grid = check_shared_grid(data)?;
    let raw = rho3_raw(data, &grid, max_lag);
    let g = triple_correlation(data, max_lag)?;
    let peak = raw.iter().cloned().fold(0.0, f64::max);
    let mask: Vec<bool> = raw.iter().map(|&r| peak > 0.0 && r > ZERO_DENSITY_GUARD * peak).collect();
    let n = raw.len();
    let kernel = Matrix::from_fn(n, n, |i, j| {
        if mask[i] && mask[j] {
            g[(i, j)] / (raw[i] * raw[j])
        } else {
            0.0
        }
    });
    let weights: Vec<f64> = raw
        .iter()
        .zip(&mask)
        .map(|(&r, &m)| if m { r * grid.dx } else { 0.0 })
        .collect();
    let lag_grid = Grid::new(-(max_lag as f64) * grid.dx, grid.dx, n)?;
    Ok(DiscreteOperator {
        grid: lag_grid,
        kernel_matrix: kernel,
        g_kernel: g,
        rho: ExplorationMeasure::from_unnormalized(lag_grid, raw).normalized(),
        weights,
    })
}

/// Eigenvalues of a kernel operator and the decay verdict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// First index with `λ_k < threshold · λ₁`.
    pub decay_index: Option<usize>,
    pub threshold: f64,
    /// `λ_min / λ₁` over the support of the measure.
    pub min_ratio: f64,
}

impl SpectrumReport {
    /// Ill-posed when the spectrum decays below the threshold within `modes` eigenvalues.
    pub fn decays_within(&self, modes: usize) -> bool {
        self.decay_index.is_some_and(|k| k < modes)
    }
}

/// Spectrum of `L_Ḡ` restricted to the support of `ρ₃`.
pub fn spectrum_decay(op: &DiscreteOperator) -> Result<SpectrumReport> {
    let support: Vec<usize> = op.support().iter().enumerate().filter(|(_, &s)| s).map(|(i, _)| i).collect();
    let full = op.symmetric_form();
    let m = Matrix::from_fn(support.len(), support.len(), |i, j| full[(support[i], support[j])]);
    spectrum_of(&m)
}

/// Spectrum report of a symmetric matrix.
pub fn spectrum_of(m: &Matrix<f64>) -> Result<SpectrumReport> {
    if m.rows() == 0 {
        return Ok(SpectrumReport {
            eigenvalues: Vec::new(),
            decay_index: None,
            threshold: DECAY_THRESHOLD,
            min_ratio: 0.0,
        });
    }
    let eig = SymmetricEigen::new(m)?;
    let top = eig.values[0];
    let decay_index = eig.values.iter().position(|&v| v < DECAY_THRESHOLD * top);
    let min_ratio = if top > 0.0 { eig.values[eig.values.len() - 1] / top } else { 0.0 };
    Ok(SpectrumReport {
        eigenvalues: eig.values,
        decay_index,
        threshold: DECAY_THRESHOLD,
        min_ratio,
    })
}

/// Radial restriction of the `G` quadratic form onto staggered bins of width `Δx`.
///
/// Bin `l` pairs lags `(l−1, −l)` at the left anchor and `(l, −(l−1))` at the right anchor; the two are averaged.
/// `max_lag` of `g` must be at least `bins`.
pub fn radial_restriction(op: &DiscreteOperator, bins: usize) -> Result<Matrix<f64>> {
    let k = (op.g_kernel.rows() - 1) / 2;
    if bins > k {
        return Err(Error::InvalidParameter(format!("{bins} radial bins exceed lag range {k}")));
    }
    let dr = op.grid.dx;
    let g = |p: isize, q: isize| op.g_kernel[((p + k as isize) as usize, (q + k as isize) as usize)];
    let pairs = |l: isize| [(l - 1, -l), (l, -(l - 1))];
    Ok(Matrix::from_fn(bins, bins, |a, b| {
        let (l, lp) = (a as isize + 1, b as isize + 1);
        let mut total = 0.0;
        for (anchor_l, anchor_lp) in pairs(l).iter().zip(pairs(lp).iter()) {
            let (pp, pm) = *anchor_l;
            let (qp, qm) = *anchor_lp;
            total += g(pp, qp) - g(pp, qm) - g(pm, qp) + g(pm, qm);
        }
        0.5 * total * dr * dr
    }))
}

/// Outcome of the null-direction probe on the joint loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullCheck {
    /// The direction cannot be written in the interaction basis.
    pub excluded: bool,
    /// `‖A d‖ / (‖A‖_F ‖d‖)` for the null direction.
    pub ratio: Option<f64>,
    /// Same ratio for random unit directions.
    pub random_ratios: Vec<f64>,
}

/// `‖A d‖ / (‖A‖_F ‖d‖)`.
pub fn direction_ratio(form: &QuadForm<f64>, dir: &[f64]) -> Result<f64> {
    let ad = form.a.matvec(dir);
    Ok(norm2(&ad) / (form.a.frobenius_norm() * norm2(dir)))
}

/// Coefficients of the direction `(∇Φ, ∇V) = (c, −c)` with `c = (1, …, 1)/√d`, if representable.
pub fn null_direction(phi_basis: &BasisSet, v_basis: &BasisSet) -> Option<Vec<f64>> {
    let d = phi_basis.dim();
    let c = 1.0 / (d as f64).sqrt();
    let linear = |b: &BasisSet| -> Option<Vec<f64>> {
        let mut out = vec![0.0; b.len()];
        let mut found = vec![false; d];
        if matches!(b, BasisSet::TensorPolyEven { .. }) {
            return None;
        }
        for k in 0..b.len() {
            if let Some(axis) = b.is_linear(k) {
                out[k] = c;
                found[axis] = true;
            }
        }
        found.iter().all(|&f| f).then_some(out)
    };
    let mut dir = linear(phi_basis)?;
    dir.extend(linear(v_basis)?.into_iter().map(|v| -v));
    Some(dir)
}

/// Probe the joint loss in the direction `(0, c, −c)` and in 20 random directions.
pub fn joint_null_check(data: &ParticleEnsemble, v_basis: &BasisSet, phi_basis: &BasisSet) -> Result<NullCheck> {
    let form = crate::estimators::assemble_joint(data, phi_basis, v_basis)?;
    let mut rng = keyed_rng(0, 0, 0);
    let random_ratios = (0..20)
        .map(|_| {
            let dir: Vec<f64> = (0..form.n()).map(|_| rng.sample(StandardNormal)).collect();
            direction_ratio(&form, &dir)
        })
        .collect::<Result<_>>()?;
    let (excluded, ratio) = match null_direction(phi_basis, v_basis) {
        Some(dir) => (false, Some(direction_ratio(&form, &dir)?)),
        None => (true, None),
    };
    Ok(NullCheck {
        excluded,
        ratio,
        random_ratios,
    })
}

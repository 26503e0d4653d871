//! Estimation drivers: diffusion rate, radial interaction kernel, external potential and the joint ensemble fit.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::error::{Error, Result};
use crate::identifiability::{rho2, ExplorationMeasure};
use crate::linalg::{solve_tridiagonal, Matrix};
use crate::numerics::{savitzky_golay_derivative, Field, Grid};
use crate::operators::{apply_r_aggregation_analytic, field_gradient, AnalyticProfile, SG_DEGREE, SG_WINDOW};
use crate::particles::{keyed_rng, time_weights, ParticleEnsemble, Potential};
use crate::quadform::{QuadForm, RegularizationSpec};
use crate::{EstimateReport, SampledField};

/// A sampled solution paired with its observed operator output.
pub type DataPair = (SampledField, SampledField);

fn shared_grid(data: &[DataPair]) -> Result<Grid<f64>> {
    let (first, _) = data.first().ok_or(Error::TooFewPoints { needed: 1, found: 0 })?;
    let grid = *first.grid()?;
    for (u, f) in data {
        if !u.same_grid(first) || !f.same_grid(first) {
            return Err(Error::GridMismatch);
        }
    }
    Ok(grid)
}

fn gaussian_noise(values: &mut [f64], std: f64, seed: u64, a: u64, b: u64) {
    if std == 0.0 {
        return;
    }
    let mut rng = keyed_rng(seed, a, b);
    for v in values.iter_mut() {
        *v += std * rng.sample::<f64, _>(StandardNormal);
    }
}

// ---------------------------------------------------------------- diffusion rate

/// How the noise level scales with the mesh size for the diffusion-rate data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseScaling {
    /// Standard deviation `σ / N`.
    #[default]
    StdOverN,
    /// Variance `σ² / N`.
    VarianceOverN,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HFitConfig {
    pub basis: BasisSet,
    pub n: usize,
    pub sigma: f64,
    pub l: usize,
    pub seed: u64,
    /// Coefficients of the true `h` in `basis`.
    pub truth: Vec<f64>,
    pub noise_scaling: NoiseScaling,
}

impl Default for HFitConfig {
    fn default() -> Self {
        Self {
            basis: BasisSet::default_power(),
            n: 400,
            sigma: 0.0,
            l: 3,
            seed: 0,
            truth: vec![1.0, 1.2, 0.5],
            noise_scaling: NoiseScaling::StdOverN,
        }
    }
}

impl HFitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < SG_WINDOW {
            return Err(Error::InvalidParameter(format!("n must be at least {SG_WINDOW}")));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::InvalidParameter("sigma must be nonnegative".into()));
        }
        if self.l == 0 {
            return Err(Error::InvalidParameter("need at least one field".into()));
        }
        if self.truth.len() != self.basis.len() {
            return Err(Error::DimensionMismatch {
                expected: self.basis.len(),
                found: self.truth.len(),
            });
        }
        Ok(())
    }

    pub fn noise_std(&self) -> f64 {
        match self.noise_scaling {
            NoiseScaling::StdOverN => self.sigma / self.n as f64,
            NoiseScaling::VarianceOverN => self.sigma / (self.n as f64).sqrt(),
        }
    }

    /// Mesh `x_j = j/N`, `j = 1..N`.
    pub fn grid(&self) -> Result<Grid<f64>> {
        let h = 1.0 / self.n as f64;
        Grid::new(h, h, self.n)
    }
}

/// `u_l = sin(πlx)` and `f_l = −∂x[u h''(u) ∂x u]` with the configured truth, plus Gaussian noise on both.
pub fn generate_h_data(cfg: &HFitConfig) -> Result<Vec<DataPair>> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let std = cfg.noise_std();
    (1..=cfg.l)
        .map(|l| {
            let k = PI * l as f64;
            let x = grid.points();
            let mut u: Vec<f64> = x.iter().map(|&x| (k * x).sin()).collect();
            let mut f: Vec<f64> = x
                .iter()
                .zip(&u)
                .map(|(&x, &s)| {
                    let (up, upp) = (k * (k * x).cos(), -k * k * s);
                    let h2 = cfg.basis.combine(&cfg.truth, s, 2);
                    let h3 = cfg.basis.combine(&cfg.truth, s, 3);
                    -(up * up * h2 + s * h3 * up * up + s * h2 * upp)
                })
                .collect();
            gaussian_noise(&mut u, std, cfg.seed, l as u64, 0);
            gaussian_noise(&mut f, std, cfg.seed, l as u64, 1);
            Ok((Field::new(grid, u)?, Field::new(grid, f)?))
        })
        .collect()
}

fn h_scale(data: &[DataPair], grid: &Grid<f64>) -> f64 {
    1.0 / (grid.n * data.len()) as f64
}

/// `A_km = (1/NL) Σ u |∂x u|² e_k''(u) e_m''(u)`, `b_k = (1/NL) Σ f e_k'(u)`.
pub fn assemble_h_weak(data: &[DataPair], basis: &BasisSet) -> Result<QuadForm<f64>> {
    let grid = shared_grid(data)?;
    let n = basis.len();
    let mut a = Matrix::zeros(n, n);
    let mut b = vec![0.0; n];
    let mut e2 = vec![0.0; n];
    for (u, f) in data {
        let du = field_gradient(u)?.remove(0);
        for ((&s, &d), &fv) in u.values.iter().zip(&du).zip(&f.values) {
            let w = s * d * d;
            for k in 0..n {
                e2[k] = basis.d2(k, s);
                b[k] += fv * basis.d1(k, s);
            }
            for k in 0..n {
                for m in 0..n {
                    a[(k, m)] += w * e2[k] * e2[m];
                }
            }
        }
    }
    let scale = h_scale(data, &grid);
    a.scale(scale);
    b.iter_mut().for_each(|v| *v *= scale);
    QuadForm::new(a, b, 0.0)
}

/// Strong-form columns `S_k = −∂x[u e_k''(u) ∂x u]`, with the divergence by a second filter pass.
fn h_strong_columns(u: &SampledField, basis: &BasisSet, grid: &Grid<f64>) -> Result<Vec<Vec<f64>>> {
    let du = field_gradient(u)?.remove(0);
    (0..basis.len())
        .map(|k| {
            let flux: Vec<f64> = u.values.iter().zip(&du).map(|(&s, &d)| s * basis.d2(k, s) * d).collect();
            Ok(savitzky_golay_derivative(&flux, SG_WINDOW, SG_DEGREE, grid.dx)?
                .into_iter()
                .map(|v| -v)
                .collect())
        })
        .collect()
}

/// Least-squares form `A = (1/NL) Σ S Sᵀ`, `b = (1/NL) Σ S f`.
pub fn assemble_h_strong(data: &[DataPair], basis: &BasisSet) -> Result<QuadForm<f64>> {
    let grid = shared_grid(data)?;
    let n = basis.len();
    let mut a = Matrix::zeros(n, n);
    let mut b = vec![0.0; n];
    for (u, f) in data {
        let s = h_strong_columns(u, basis, &grid)?;
        for k in 0..n {
            b[k] += s[k].iter().zip(&f.values).map(|(p, q)| p * q).sum::<f64>();
            for m in 0..n {
                a[(k, m)] += s[k].iter().zip(&s[m]).map(|(p, q)| p * q).sum::<f64>();
            }
        }
    }
    let scale = h_scale(data, &grid);
    a.scale(scale);
    b.iter_mut().for_each(|v| *v *= scale);
    QuadForm::new(a, b, 0.0)
}

/// Unregularized weak-form estimate of the diffusion-rate coefficients.
pub fn fit_h_weak(data: &[DataPair], basis: &BasisSet) -> Result<EstimateReport> {
    assemble_h_weak(data, basis)?.solve(&RegularizationSpec::none())
}

pub fn fit_h_strong(data: &[DataPair], basis: &BasisSet) -> Result<EstimateReport> {
    assemble_h_strong(data, basis)?.solve(&RegularizationSpec::none())
}

/// Relative `L²_ρ₁` error of `ĥ''` against `truth_h2`, with weight `|u| |∂x u|²` at every sample.
pub fn h_rho1_error(data: &[DataPair], basis: &BasisSet, coeffs: &[f64], truth_h2: &dyn Fn(f64) -> f64) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (u, _) in data {
        let du = field_gradient(u)?.remove(0);
        for (&s, &d) in u.values.iter().zip(&du) {
            let w = s.abs() * d * d;
            let t = truth_h2(s);
            let e = basis.combine(coeffs, s, 2) - t;
            num += w * e * e;
            den += w * t * t;
        }
    }
    if den == 0.0 {
        return Err(Error::NonFinite("zero reference norm".into()));
    }
    Ok((num / den).sqrt())
}

// ---------------------------------------------------------------- radial interaction kernel

/// Shape of the bump profiles used for kernel data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PhiProfile {
    /// `cos²(π(x − c)/3)` on `|x − c| < 1.5`.
    #[default]
    Cos2,
    /// `sin(π(x − c))` on `c ≤ x ≤ c + 1`.
    Sine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhiFitConfig {
    pub dx: f64,
    pub domain: [f64; 2],
    pub r_max: f64,
    pub n_k: usize,
    pub sigma: f64,
    /// Absolute λ grid; when absent, `λ_max(A) · logspace(−14, 0, 57)`.
    pub lambda_grid: Option<Vec<f64>>,
    pub seed: u64,
    pub profile: PhiProfile,
}

impl Default for PhiFitConfig {
    fn default() -> Self {
        Self {
            dx: 0.01,
            domain: [0.0, 10.0],
            r_max: 2.0,
            n_k: 3,
            sigma: 0.0,
            lambda_grid: None,
            seed: 0,
            profile: PhiProfile::Cos2,
        }
    }
}

impl PhiFitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dx > 0.0) || !(self.domain[1] > self.domain[0]) {
            return Err(Error::InvalidParameter("need dx > 0 and a nonempty domain".into()));
        }
        if !(self.r_max >= self.dx) {
            return Err(Error::InvalidParameter("r_max must cover at least one bin".into()));
        }
        if self.n_k == 0 || !(self.sigma >= 0.0) {
            return Err(Error::InvalidParameter("need n_k > 0 and sigma >= 0".into()));
        }
        if let Some(g) = &self.lambda_grid {
            if g.is_empty() {
                return Err(Error::InvalidParameter("empty lambda grid".into()));
            }
            if g.iter().any(|&l| !(l > 0.0)) {
                return Err(Error::InvalidParameter("lambda grid entries must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid<f64>> {
        let n = ((self.domain[1] - self.domain[0]) / self.dx).round() as usize + 1;
        Grid::new(self.domain[0], self.dx, n)
    }

    /// Number of radial bins `r_max / dx`.
    pub fn bins(&self) -> usize {
        (self.r_max / self.dx).round() as usize
    }

    pub fn basis(&self) -> Result<BasisSet> {
        BasisSet::piecewise_constant(self.bins() as f64 * self.dx, self.dx)
    }
}

/// A radial kernel profile with its nonsmooth points.
#[derive(Clone)]
pub struct RadialKernel {
    pub phi: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub breaks: Vec<f64>,
}

impl std::fmt::Debug for RadialKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RadialKernel").field("breaks", &self.breaks).finish_non_exhaustive()
    }
}

impl RadialKernel {
    /// `φ(r) = r² 1_{[0,1]}(r)`.
    pub fn default_truth() -> Self {
        Self {
            phi: Arc::new(|r| if r <= 1.0 { r * r } else { 0.0 }),
            breaks: vec![1.0],
        }
    }

    pub fn zero() -> Self {
        Self {
            phi: Arc::new(|_| 0.0),
            breaks: Vec::new(),
        }
    }
}

/// Profile `k` (1-based) as value, derivative and breakpoints.
pub fn phi_profile(profile: PhiProfile, k: usize) -> (impl Fn(f64) -> f64 + Sync, impl Fn(f64) -> f64 + Sync, Vec<f64>) {
    let c = (2 * k + 1) as f64;
    let value = move |x: f64| {
        let t = x - c;
        match profile {
            PhiProfile::Cos2 if t.abs() < 1.5 => (PI * t / 3.0).cos().powi(2),
            PhiProfile::Sine if (0.0..=1.0).contains(&t) => (PI * t).sin(),
            _ => 0.0,
        }
    };
    let derivative = move |x: f64| {
        let t = x - c;
        match profile {
            PhiProfile::Cos2 if t.abs() < 1.5 => -(PI / 3.0) * (2.0 * PI * t / 3.0).sin(),
            PhiProfile::Sine if (0.0..=1.0).contains(&t) => PI * (PI * t).cos(),
            _ => 0.0,
        }
    };
    let breaks = match profile {
        PhiProfile::Cos2 => vec![c - 1.5, c + 1.5],
        PhiProfile::Sine => vec![c, c + 1.0],
    };
    (value, derivative, breaks)
}

/// Kernel data: bump profiles and `f = −∂x(u ∫₀^{r_max} φ(r) δu(·, r) dr)` by adaptive quadrature, with `N(0, σ²)` noise.
pub fn generate_phi_data(cfg: &PhiFitConfig, truth: &RadialKernel) -> Result<Vec<DataPair>> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    (1..=cfg.n_k)
        .map(|k| {
            let (value, derivative, breaks) = phi_profile(cfg.profile, k);
            let profile = AnalyticProfile {
                value: &value,
                derivative: &derivative,
                breaks,
            };
            let phi = truth.phi.clone();
            let mut f = apply_r_aggregation_analytic(grid, &profile, &move |r| phi(r), &truth.breaks, cfg.r_max, 1e-11)?;
            let mut u = Field::from_fn(grid, &value)?;
            gaussian_noise(&mut u.values, cfg.sigma, cfg.seed, k as u64, 0);
            gaussian_noise(&mut f.values, cfg.sigma, cfg.seed, k as u64, 1);
            Ok((u, f))
        })
        .collect()
}

fn at(v: &[f64], j: isize) -> f64 {
    if j >= 0 && (j as usize) < v.len() {
        v[j as usize]
    } else {
        0.0
    }
}

/// Staggered differences `δ̃(x_{j+½}, r_l) = u_{j+1−l} − u_{j+l}` at radius `(l − ½)Δx`, rows `j = 0..n−2`.
pub fn staggered_differences(u: &[f64], bins: usize) -> Matrix<f64> {
    Matrix::from_fn(u.len().saturating_sub(1), bins, |j, c| {
        let (j, l) = (j as isize, c as isize + 1);
        at(u, j + 1 - l) - at(u, j + l)
    })
}

/// Weak-form kernel loss on the staggered grid together with its radial exploration measure.
///
/// `A = Σ_k gᵀg Δx Δr²` with `g = √w δ̃`, `w_{j+½} = ½(u_j⁺ + u_{j+1}⁺)`;
/// `b_l = −Σ_k Σ_j F_k(x_j) δ̃(x_{j+½}, r_l) Δx Δr` with the left cumulative sum `F_k(x_j) = Σ_{i≤j} f_k(x_i) Δx`.
pub fn assemble_phi_weak(data: &[DataPair], cfg: &PhiFitConfig) -> Result<(QuadForm<f64>, ExplorationMeasure)> {
    cfg.validate()?;
    let grid = shared_grid(data)?;
    let bins = cfg.bins();
    let (dx, dr) = (grid.dx, cfg.dx);
    let mut a = Matrix::zeros(bins, bins);
    let mut b = vec![0.0; bins];
    let mut rho = vec![0.0; bins];
    for (u, f) in data {
        let d = staggered_differences(&u.values, bins);
        let w: Vec<f64> = u.values.windows(2).map(|p| 0.5 * (p[0].max(0.0) + p[1].max(0.0))).collect();
        let g = Matrix::from_fn(d.rows(), bins, |j, l| w[j].sqrt() * d[(j, l)]);
        let mut gram = g.gram();
        gram.scale(dx * dr * dr);
        a.add_assign(&gram);
        let mut cum = 0.0;
        let big_f: Vec<f64> = f.values[..d.rows()]
            .iter()
            .map(|&v| {
                cum += v * dx;
                cum
            })
            .collect();
        let proj = d.tr_matvec(&big_f);
        for l in 0..bins {
            b[l] -= proj[l] * dx * dr;
            rho[l] += (0..g.rows()).map(|j| g[(j, l)].abs()).sum::<f64>() * dx;
        }
    }
    let total: f64 = rho.iter().sum::<f64>() * dr;
    if total > 0.0 {
        rho.iter_mut().for_each(|r| *r /= total);
    }
    let measure = ExplorationMeasure {
        grid: Grid::new(0.5 * dr, dr, bins)?,
        density: rho,
        normalization: total,
    };
    Ok((QuadForm::new(a, b, 0.0)?, measure))
}

/// Strong-form kernel least squares: columns `S_l = −∂x(u δ̄_l) Δr` with the bin-averaged difference
/// `δ̄_l = ½(δu(·, lΔx) + δu(·, (l−1)Δx))`; `A = SᵀS Δx`, `b = Sᵀf Δx`.
pub fn assemble_phi_strong(data: &[DataPair], cfg: &PhiFitConfig) -> Result<QuadForm<f64>> {
    cfg.validate()?;
    let grid = shared_grid(data)?;
    let bins = cfg.bins();
    let (dx, dr) = (grid.dx, cfg.dx);
    let mut a = Matrix::zeros(bins, bins);
    let mut b = vec![0.0; bins];
    for (u, f) in data {
        let v = &u.values;
        let n = v.len();
        let cols: Vec<Vec<f64>> = (1..=bins as isize)
            .into_par_iter()
            .map(|l| {
                let flux: Vec<f64> = (0..n as isize)
                    .map(|j| {
                        let hi = at(v, j - l) - at(v, j + l);
                        let lo = at(v, j - l + 1) - at(v, j + l - 1);
                        at(v, j) * 0.5 * (hi + lo)
                    })
                    .collect();
                Ok(savitzky_golay_derivative(&flux, SG_WINDOW, SG_DEGREE, dx)?
                    .into_iter()
                    .map(|d| -d * dr)
                    .collect())
            })
            .collect::<Result<_>>()?;
        let s = Matrix::from_fn(n, bins, |j, l| cols[l][j]);
        let mut gram = s.gram();
        gram.scale(dx);
        a.add_assign(&gram);
        let proj = s.tr_matvec(&f.values);
        b.iter_mut().zip(&proj).for_each(|(bi, p)| *bi += p * dx);
    }
    QuadForm::new(a, b, 0.0)
}

/// `λ_max(A) · logspace(−14, 0, 57)`.
pub fn default_lambda_grid(form: &QuadForm<f64>) -> Result<Vec<f64>> {
    let top = form.spectrum()?.first().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
    Ok(RegularizationSpec::log_grid(1e-14 * top, top, 57))
}

/// Kernel estimate together with the measure its error is reported in.
#[derive(Clone, Debug, Serialize)]
pub struct PhiFit {
    pub report: EstimateReport,
    pub rho: ExplorationMeasure,
}

impl PhiFit {
    /// Relative `L²_ρ` error against `truth` at the bin midpoints.
    pub fn relative_error(&self, truth: &dyn Fn(f64) -> f64) -> f64 {
        phi_relative_error(&self.report.coefficients, &self.rho, truth)
    }
}

pub fn phi_relative_error(coeffs: &[f64], rho: &ExplorationMeasure, truth: &dyn Fn(f64) -> f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (l, (&c, &w)) in coeffs.iter().zip(&rho.density).enumerate() {
        let t = truth(rho.grid.point(l));
        num += w * (c - t) * (c - t);
        den += w * t * t;
    }
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        num.sqrt()
    }
}

fn solve_lcurve(form: &QuadForm<f64>, cfg: &PhiFitConfig) -> Result<EstimateReport> {
    let grid = match &cfg.lambda_grid {
        Some(g) => g.clone(),
        None => default_lambda_grid(form)?,
    };
    if form.b.iter().all(|&v| v == 0.0) {
        let lambda = grid[grid.len() / 2];
        return form.report(vec![0.0; form.n()], Some(lambda));
    }
    form.solve(&RegularizationSpec::l_curve(grid))
}

/// Weak-form kernel estimate with Tikhonov regularization chosen by the L-curve.
pub fn fit_phi_radial(data: &[DataPair], cfg: &PhiFitConfig) -> Result<PhiFit> {
    let (form, rho) = assemble_phi_weak(data, cfg)?;
    Ok(PhiFit {
        report: solve_lcurve(&form, cfg)?,
        rho,
    })
}

/// Strong-form kernel estimate; errors are reported in the same radial measure as the weak form.
pub fn fit_phi_strong(data: &[DataPair], cfg: &PhiFitConfig) -> Result<PhiFit> {
    let form = assemble_phi_strong(data, cfg)?;
    let (_, rho) = assemble_phi_weak(data, cfg)?;
    Ok(PhiFit {
        report: solve_lcurve(&form, cfg)?,
        rho,
    })
}

// ---------------------------------------------------------------- external potential

/// Potential data: bump profiles `u_k` and `f_k = −∂x(u_k ∂x V)` for a polynomial `V`, with `N(0, σ²)` noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VFitConfig {
    pub dx: f64,
    pub domain: [f64; 2],
    pub n_k: usize,
    pub sigma: f64,
    pub seed: u64,
    pub profile: PhiProfile,
    /// Power coefficients of the true potential, `V(x) = Σ_k truth[k] x^k`.
    pub truth: Vec<f64>,
}

impl Default for VFitConfig {
    fn default() -> Self {
        Self {
            dx: 0.01,
            domain: [0.0, 10.0],
            n_k: 3,
            sigma: 0.0,
            seed: 0,
            profile: PhiProfile::Cos2,
            truth: vec![12.5, -5.0, 0.5],
        }
    }
}

impl VFitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dx > 0.0) || !(self.domain[1] > self.domain[0]) {
            return Err(Error::InvalidParameter("need dx > 0 and a nonempty domain".into()));
        }
        if self.n_k == 0 || !(self.sigma >= 0.0) {
            return Err(Error::InvalidParameter("need n_k > 0 and sigma >= 0".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid<f64>> {
        let n = ((self.domain[1] - self.domain[0]) / self.dx).round() as usize + 1;
        Grid::new(self.domain[0], self.dx, n)
    }

    /// `V^{(order)}(x)` of the true potential.
    pub fn truth_derivative(&self, x: f64, order: u32) -> f64 {
        let mut total = 0.0;
        for (k, &c) in self.truth.iter().enumerate() {
            let k = k as u32;
            if k >= order {
                let falling: f64 = (0..order).map(|j| (k - j) as f64).product();
                total += c * falling * x.powi((k - order) as i32);
            }
        }
        total
    }
}

pub fn generate_v_data(cfg: &VFitConfig) -> Result<Vec<DataPair>> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    (1..=cfg.n_k)
        .map(|k| {
            let (value, derivative, _) = phi_profile(cfg.profile, k);
            let mut u = Field::from_fn(grid, &value)?;
            let mut f = Field::from_fn(grid, |x| {
                -(derivative(x) * cfg.truth_derivative(x, 1) + value(x) * cfg.truth_derivative(x, 2))
            })?;
            gaussian_noise(&mut u.values, cfg.sigma, cfg.seed, k as u64, 0);
            gaussian_noise(&mut f.values, cfg.sigma, cfg.seed, k as u64, 1);
            Ok((u, f))
        })
        .collect()
}

/// Relative density floor for the potential solve.
pub const RHO_FLOOR: f64 = 1e-8;

/// Solves `−∂x(ρ₂ ∂x V) = Σ_l f̃_l` on the longest run where `ρ₂ > 1e-8 max ρ₂`,
/// zero flux at the ends of the run, gauge `Σ V ρ₂ = 0`. `V` is zero off the run.
pub fn fit_v(data: &[DataPair]) -> Result<SampledField> {
    let grid = shared_grid(data)?;
    let us: Vec<SampledField> = data.iter().map(|(u, _)| u.clone()).collect();
    let rho = rho2(&us)?.density;
    let mut rhs = vec![0.0; grid.n];
    for (_, f) in data {
        rhs.iter_mut().zip(&f.values).for_each(|(r, v)| *r += v);
    }
    let peak = rho.iter().cloned().fold(0.0, f64::max);
    let (mut best, mut start) = ((0, 0), None);
    for j in 0..=grid.n {
        let inside = j < grid.n && rho[j] > RHO_FLOOR * peak;
        match (inside, start) {
            (true, None) => start = Some(j),
            (false, Some(s)) => {
                if j - s > best.1 - best.0 {
                    best = (s, j);
                }
                start = None;
            }
            _ => {}
        }
    }
    let (a, b) = best;
    let m = b - a;
    if m < 5 {
        return Err(Error::TooFewPoints { needed: 5, found: m });
    }
    let h2 = grid.dx * grid.dx;
    let half: Vec<f64> = (a..b - 1).map(|j| 0.5 * (rho[j] + rho[j + 1])).collect();
    let mut g: Vec<f64> = rhs[a..b].to_vec();
    let mean = g.iter().sum::<f64>() / m as f64;
    g.iter_mut().for_each(|v| *v -= mean);
    // V_a pinned to 0; equations for nodes a+1..b-1
    let k = m - 1;
    let mut lower = vec![0.0; k];
    let mut diag = vec![0.0; k];
    let mut upper = vec![0.0; k];
    for i in 0..k {
        let node = i + 1;
        let left = half[node - 1];
        let right = if node + 1 < m { half[node] } else { 0.0 };
        diag[i] = (left + right) / h2;
        if i > 0 {
            lower[i] = -left / h2;
        }
        if node + 1 < m {
            upper[i] = -right / h2;
        }
    }
    let sol = solve_tridiagonal(&lower, &diag, &upper, &g[1..])?;
    let mut v = vec![0.0; grid.n];
    v[a + 1..b].copy_from_slice(&sol);
    let mass: f64 = rho[a..b].iter().sum();
    let shift = (a..b).map(|j| v[j] * rho[j]).sum::<f64>() / mass;
    for j in a..b {
        v[j] -= shift;
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("potential solve".into()));
    }
    Field::new(grid, v)
}

/// Relative `L²_ρ₂` error of `v_hat` against `truth` after putting both in the zero-mean gauge.
pub fn v_rho2_error(v_hat: &SampledField, truth: &dyn Fn(f64) -> f64, rho: &ExplorationMeasure) -> Result<f64> {
    let grid = *v_hat.grid()?;
    let mass: f64 = rho.density.iter().sum();
    let t: Vec<f64> = grid.points().iter().map(|&x| truth(x)).collect();
    let tm = t.iter().zip(&rho.density).map(|(a, w)| a * w).sum::<f64>() / mass;
    let vm = v_hat.values.iter().zip(&rho.density).map(|(a, w)| a * w).sum::<f64>() / mass;
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&v, &tv), &w) in v_hat.values.iter().zip(&t).zip(&rho.density) {
        num += w * ((v - vm) - (tv - tm)).powi(2);
        den += w * (tv - tm).powi(2);
    }
    Ok((num / den).sqrt())
}

// ---------------------------------------------------------------- joint ensemble fit

fn slice_features(
    x: &[f64],
    n: usize,
    d: usize,
    phi_basis: &BasisSet,
    v_basis: &BasisSet,
) -> (Vec<f64>, Vec<f64>) {
    // psi[i][c][k]: particle i, coordinate c, coefficient k; energies per coefficient
    let (np, nv) = (phi_basis.len(), v_basis.len());
    let nt = np + nv;
    let mut psi = vec![0.0; n * d * nt];
    let mut energy = vec![0.0; nt];
    let mut diff = vec![0.0; d];
    let mut g = vec![0.0; d];
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        for j in 0..n {
            for c in 0..d {
                diff[c] = xi[c] - x[j * d + c];
            }
            for k in 0..np {
                phi_basis.gradient_nd(k, &diff, &mut g);
                for c in 0..d {
                    psi[(i * d + c) * nt + k] += inv_n * g[c];
                }
                energy[k] += 0.5 * inv_n * inv_n * phi_basis.value_nd(k, &diff);
            }
        }
        for k in 0..nv {
            v_basis.gradient_nd(k, xi, &mut g);
            for c in 0..d {
                psi[(i * d + c) * nt + np + k] = g[c];
            }
            energy[np + k] += inv_n * v_basis.value_nd(k, xi);
        }
    }
    (psi, energy)
}

/// Ensemble self-test loss in the stacked coefficients `(Φ, V)`:
/// `A = (1/LM) Σ_m Σ_l w_l (1/N) Σ_i ψ_i ψ_iᵀ` with trapezoid weights `w_l`,
/// `b = −(1/LM) Σ_m [E(t_L) − E(t_1)]` with `E = (1/2N²) Σ_{i,j} Φ(X_i − X_j) + (1/N) Σ_i V(X_i)`.
pub fn assemble_joint(data: &ParticleEnsemble, phi_basis: &BasisSet, v_basis: &BasisSet) -> Result<QuadForm<f64>> {
    if data.l < 2 {
        return Err(Error::TooFewPoints { needed: 2, found: data.l });
    }
    if phi_basis.dim() != data.d || v_basis.dim() != data.d {
        return Err(Error::DimensionMismatch {
            expected: data.d,
            found: phi_basis.dim(),
        });
    }
    let nt = phi_basis.len() + v_basis.len();
    let (n, d) = (data.n, data.d);
    let w = time_weights(data.l, data.dt);
    let parts: Vec<(Matrix<f64>, Vec<f64>)> = (0..data.m)
        .into_par_iter()
        .map(|m| {
            let mut a = Matrix::zeros(nt, nt);
            let mut b = vec![0.0; nt];
            for l in 0..data.l {
                let (psi, energy) = slice_features(data.slice(m, l), n, d, phi_basis, v_basis);
                let rows = Matrix::from_fn(n * d, nt, |r, k| psi[r * nt + k]);
                let mut gram = rows.gram();
                gram.scale(w[l] / n as f64);
                a.add_assign(&gram);
                if l == 0 {
                    b.iter_mut().zip(&energy).for_each(|(bi, e)| *bi += e);
                } else if l + 1 == data.l {
                    b.iter_mut().zip(&energy).for_each(|(bi, e)| *bi -= e);
                }
            }
            (a, b)
        })
        .collect();
    let mut a = Matrix::zeros(nt, nt);
    let mut b = vec![0.0; nt];
    for (pa, pb) in &parts {
        a.add_assign(pa);
        b.iter_mut().zip(pb).for_each(|(x, y)| *x += y);
    }
    let scale = 1.0 / (data.l * data.m) as f64;
    a.scale(scale);
    b.iter_mut().for_each(|v| *v *= scale);
    QuadForm::new(a, b, 0.0)
}

/// Joint estimate split into interaction and external coefficients.
#[derive(Clone, Debug, Serialize)]
pub struct JointFit {
    pub report: EstimateReport,
    pub phi_coeffs: Vec<f64>,
    pub v_coeffs: Vec<f64>,
}

impl JointFit {
    pub fn potentials(&self, phi_basis: &BasisSet, v_basis: &BasisSet) -> Result<(Potential, Potential)> {
        Ok((
            Potential::from_basis(phi_basis, &self.phi_coeffs)?,
            Potential::from_basis(v_basis, &self.v_coeffs)?,
        ))
    }
}

/// Fixed Tikhonov weight `1e-8 · trace(A) / n`.
pub fn default_joint_lambda(form: &QuadForm<f64>) -> f64 {
    (1e-8 * form.a.trace() / form.n() as f64).max(f64::MIN_POSITIVE)
}

/// Joint `(Φ, V)` estimate from unlabeled ensembles; `regularization` defaults to the fixed small Tikhonov weight.
pub fn fit_joint_ensemble(
    data: &ParticleEnsemble,
    phi_basis: &BasisSet,
    v_basis: &BasisSet,
    regularization: Option<&RegularizationSpec<f64>>,
) -> Result<JointFit> {
    let form = assemble_joint(data, phi_basis, v_basis)?;
    let report = match regularization {
        Some(spec) => form.solve(spec)?,
        None => form.solve(&RegularizationSpec::fixed(default_joint_lambda(&form)))?,
    };
    let np = phi_basis.len();
    Ok(JointFit {
        phi_coeffs: report.coefficients[..np].to_vec(),
        v_coeffs: report.coefficients[np..].to_vec(),
        report,
    })
}

/// Gradient errors of a joint estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointErrors {
    /// `‖∇Φ̂ − ∇Φ*‖ / ‖∇Φ*‖` over pair differences (`ρ₃`).
    pub grad_phi_rho3: f64,
    /// Same norm ratio evaluated at particle positions (`ρ₂`).
    pub grad_phi_rho2: f64,
    /// `‖∇V̂ − ∇V*‖ / ‖∇V*‖` at particle positions (`ρ₂`).
    pub grad_v_rho2: f64,
}

fn relative_gradient_error<'a>(points: impl Iterator<Item = &'a [f64]>, hat: &Potential, truth: &Potential, d: usize) -> f64 {
    let (mut gh, mut gt) = (vec![0.0; d], vec![0.0; d]);
    let (mut num, mut den) = (0.0, 0.0);
    for p in points {
        (hat.grad)(p, &mut gh);
        (truth.grad)(p, &mut gt);
        num += gh.iter().zip(&gt).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        den += gt.iter().map(|b| b * b).sum::<f64>();
    }
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        num.sqrt()
    }
}

/// Empirical `ρ₃` and `ρ₂` gradient errors over all slices of the ensemble.
pub fn joint_errors(
    data: &ParticleEnsemble,
    phi_hat: &Potential,
    phi_true: &Potential,
    v_hat: &Potential,
    v_true: &Potential,
) -> JointErrors {
    let d = data.d;
    let mut diffs = Vec::new();
    for m in 0..data.m {
        for l in 0..data.l {
            let x = data.slice(m, l);
            for i in 0..data.n {
                for j in 0..data.n {
                    if i != j {
                        diffs.extend((0..d).map(|c| x[i * d + c] - x[j * d + c]));
                    }
                }
            }
        }
    }
    JointErrors {
        grad_phi_rho3: relative_gradient_error(diffs.chunks(d), phi_hat, phi_true, d),
        grad_phi_rho2: relative_gradient_error(data.positions.chunks(d), phi_hat, phi_true, d),
        grad_v_rho2: relative_gradient_error(data.positions.chunks(d), v_hat, v_true, d),
    }
}

// ---------------------------------------------------------------- gradient refinement

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescentOptions {
    /// Largest trial step.
    pub step: f64,
    pub max_steps: usize,
    /// Stop once the relative loss decrease falls below this.
    pub tolerance: f64,
    /// Tolerance of the finite-difference gradient check at the start point.
    pub gradient_check: f64,
}

impl Default for DescentOptions {
    fn default() -> Self {
        Self {
            step: 1.0,
            max_steps: 10_000,
            tolerance: 1e-10,
            gradient_check: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentResult {
    pub theta: Vec<f64>,
    /// Loss after every accepted step, starting with the initial value.
    pub trace: Vec<f64>,
    pub steps: usize,
}

/// Largest relative component error between `grad` and central differences of `loss` at `theta`.
pub fn gradient_check_error(loss: &dyn Fn(&[f64]) -> f64, grad: &[f64], theta: &[f64]) -> f64 {
    let scale = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    let mut worst = 0.0f64;
    let mut t = theta.to_vec();
    for i in 0..theta.len() {
        let h = 1e-6 * theta[i].abs().max(1.0);
        t[i] = theta[i] + h;
        let up = loss(&t);
        t[i] = theta[i] - h;
        let down = loss(&t);
        t[i] = theta[i];
        let fd = (up - down) / (2.0 * h);
        let denom = grad[i].abs().max(fd.abs()).max(1e-6 * scale).max(1e-12);
        worst = worst.max((fd - grad[i]).abs() / denom);
    }
    worst
}

/// Gradient descent with backtracking halving from `theta0`.
pub fn grad_descent_refine(
    loss: &dyn Fn(&[f64]) -> f64,
    grad: &dyn Fn(&[f64]) -> Vec<f64>,
    theta0: &[f64],
    opts: &DescentOptions,
) -> Result<DescentResult> {
    let mut theta = theta0.to_vec();
    let mut current = loss(&theta);
    if !current.is_finite() {
        return Err(Error::Diverged {
            steps: 0,
            last_good: theta,
        });
    }
    let g0 = grad(&theta);
    let check = gradient_check_error(loss, &g0, &theta);
    if check > opts.gradient_check {
        return Err(Error::GradientCheck(check));
    }
    let mut trace = vec![current];
    let mut step = opts.step;
    let mut steps = 0;
    while steps < opts.max_steps {
        let g = grad(&theta);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { steps, last_good: theta });
        }
        let g2: f64 = g.iter().map(|v| v * v).sum();
        if g2 == 0.0 {
            break;
        }
        let mut t = (2.0 * step).min(opts.step);
        let mut accepted = None;
        let mut saw_finite = false;
        while t > 1e-30 {
            let trial: Vec<f64> = theta.iter().zip(&g).map(|(a, b)| a - t * b).collect();
            let value = loss(&trial);
            if value.is_finite() {
                saw_finite = true;
                if value <= current - 1e-4 * t * g2 {
                    accepted = Some((trial, value));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((trial, value)) = accepted else {
            if !saw_finite {
                return Err(Error::Diverged { steps, last_good: theta });
            }
            break;
        };
        step = t;
        steps += 1;
        let decrease = (current - value) / current.abs().max(f64::MIN_POSITIVE);
        theta = trial;
        current = value;
        trace.push(current);
        if decrease < opts.tolerance {
            break;
        }
    }
    Ok(DescentResult { theta, trace, steps })
}

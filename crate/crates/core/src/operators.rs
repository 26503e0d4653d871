//! Aggregation-diffusion operators, their self-testing pairing and free energy on sampled fields.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::numerics::{adaptive_quadrature, adaptive_quadrature_with_breaks, savitzky_golay_derivative, trapezoid, Field};
use crate::quadform::QuadForm;
use crate::SampledField;

pub const SG_WINDOW: usize = 11;
pub const SG_DEGREE: usize = 3;

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type SpatialFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// The unknowns `(h'', φ, V)` and the diffusion constant `ν`.
///
/// `φ` is the radial profile of `∇Φ(x) = φ(|x|) x/|x|`.
#[derive(Clone)]
pub struct ParameterTriple {
    pub h_second: ScalarFn,
    pub phi_radial: ScalarFn,
    /// `Φ(r)`; recovered as `∫₀ʳ φ` when absent.
    pub phi_potential: Option<ScalarFn>,
    pub potential: SpatialFn,
    /// `∇V`; taken from Savitzky-Golay differences of `V` when absent.
    pub grad_potential: Option<VectorFn>,
    pub nu: f64,
}

impl std::fmt::Debug for ParameterTriple {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParameterTriple").field("nu", &self.nu).finish_non_exhaustive()
    }
}

impl Default for ParameterTriple {
    fn default() -> Self {
        Self::zero()
    }
}

impl ParameterTriple {
    pub fn zero() -> Self {
        Self {
            h_second: Arc::new(|_| 0.0),
            phi_radial: Arc::new(|_| 0.0),
            phi_potential: Some(Arc::new(|_| 0.0)),
            potential: Arc::new(|_| 0.0),
            grad_potential: Some(Arc::new(|_, g: &mut [f64]| g.fill(0.0))),
            nu: 0.0,
        }
    }

    pub fn with_diffusion(mut self, nu: f64, h_second: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.nu = nu;
        self.h_second = Arc::new(h_second);
        self
    }

    pub fn with_interaction(
        mut self,
        phi_radial: impl Fn(f64) -> f64 + Send + Sync + 'static,
        phi_potential: Option<ScalarFn>,
    ) -> Self {
        self.phi_radial = Arc::new(phi_radial);
        self.phi_potential = phi_potential;
        self
    }

    pub fn with_potential(mut self, v: impl Fn(&[f64]) -> f64 + Send + Sync + 'static, grad: Option<VectorFn>) -> Self {
        self.potential = Arc::new(v);
        self.grad_potential = grad;
        self
    }

    /// Pointwise `α·(h'', φ, V)` with the same `ν`.
    pub fn scaled(&self, alpha: f64) -> Self {
        let p = self.clone();
        Self {
            h_second: {
                let f = p.h_second.clone();
                Arc::new(move |s| alpha * f(s))
            },
            phi_radial: {
                let f = p.phi_radial.clone();
                Arc::new(move |r| alpha * f(r))
            },
            phi_potential: p.phi_potential.clone().map(|f| -> ScalarFn { Arc::new(move |r| alpha * f(r)) }),
            potential: {
                let f = p.potential.clone();
                Arc::new(move |x| alpha * f(x))
            },
            grad_potential: p.grad_potential.clone().map(|f| -> VectorFn {
                Arc::new(move |x, g: &mut [f64]| {
                    f(x, g);
                    g.iter_mut().for_each(|v| *v *= alpha);
                })
            }),
            nu: p.nu,
        }
    }

    /// Sum of two parameter sets sharing `ν`.
    pub fn sum(&self, other: &Self) -> Self {
        let (a, b) = (self.clone(), other.clone());
        let pot = match (a.phi_potential.clone(), b.phi_potential.clone()) {
            (Some(f), Some(g)) => Some(Arc::new(move |r| f(r) + g(r)) as ScalarFn),
            _ => None,
        };
        let grad = match (a.grad_potential.clone(), b.grad_potential.clone()) {
            (Some(f), Some(g)) => Some(Arc::new(move |x: &[f64], out: &mut [f64]| {
                let mut tmp = vec![0.0; out.len()];
                f(x, out);
                g(x, &mut tmp);
                out.iter_mut().zip(&tmp).for_each(|(o, t)| *o += t);
            }) as VectorFn),
            _ => None,
        };
        Self {
            h_second: {
                let (f, g) = (a.h_second.clone(), b.h_second.clone());
                Arc::new(move |s| f(s) + g(s))
            },
            phi_radial: {
                let (f, g) = (a.phi_radial.clone(), b.phi_radial.clone());
                Arc::new(move |r| f(r) + g(r))
            },
            phi_potential: pot,
            potential: {
                let (f, g) = (a.potential.clone(), b.potential.clone());
                Arc::new(move |x| f(x) + g(x))
            },
            grad_potential: grad,
            nu: a.nu,
        }
    }
}

/// Free-energy bookkeeping along a path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub energy_start: f64,
    pub energy_end: f64,
    pub dissipation_integral: f64,
    pub conservation_residual: f64,
}

/// Gradient of a sampled field, one component per axis.
pub fn field_gradient(u: &SampledField) -> Result<Vec<Vec<f64>>> {
    match u.grids.as_slice() {
        [g] => match &u.derivative {
            Some(d) => Ok(vec![d.clone()]),
            None => Ok(vec![savitzky_golay_derivative(&u.values, SG_WINDOW, SG_DEGREE, g.dx)?]),
        },
        [gx, gy] => {
            let (nx, ny) = (gx.n, gy.n);
            let mut dx = vec![0.0; nx * ny];
            let mut dy = vec![0.0; nx * ny];
            for j in 0..ny {
                let col: Vec<f64> = (0..nx).map(|i| u.values[i * ny + j]).collect();
                let d = savitzky_golay_derivative(&col, SG_WINDOW, SG_DEGREE, gx.dx)?;
                for i in 0..nx {
                    dx[i * ny + j] = d[i];
                }
            }
            for i in 0..nx {
                let d = savitzky_golay_derivative(&u.values[i * ny..(i + 1) * ny], SG_WINDOW, SG_DEGREE, gy.dx)?;
                dy[i * ny..(i + 1) * ny].copy_from_slice(&d);
            }
            Ok(vec![dx, dy])
        }
        _ => Err(Error::UnsupportedDimension(u.dim())),
    }
}

fn grid_point(u: &SampledField, idx: usize, out: &mut [f64]) {
    match u.grids.as_slice() {
        [g] => out[0] = g.point(idx),
        [gx, gy] => {
            out[0] = gx.point(idx / gy.n);
            out[1] = gy.point(idx % gy.n);
        }
        _ => unreachable!(),
    }
}

/// `∇(Φ * u)` by a Riemann sum over grid offsets, with `∇Φ(0) = 0`.
pub fn interaction_gradient(u: &SampledField, phi_radial: &(dyn Fn(f64) -> f64 + Sync)) -> Result<Vec<Vec<f64>>> {
    match u.grids.as_slice() {
        [g] => {
            let n = g.n;
            let kernel: Vec<f64> = (0..n).map(|s| if s == 0 { 0.0 } else { phi_radial(s as f64 * g.dx) }).collect();
            let v = &u.values;
            let out = (0..n)
                .into_par_iter()
                .map(|j| {
                    let mut acc = 0.0;
                    for (s, &k) in kernel.iter().enumerate().skip(1) {
                        if k == 0.0 {
                            continue;
                        }
                        let left = if j >= s { v[j - s] } else { 0.0 };
                        let right = if j + s < n { v[j + s] } else { 0.0 };
                        acc += k * (left - right);
                    }
                    acc * g.dx
                })
                .collect();
            Ok(vec![out])
        }
        [gx, gy] => {
            let (nx, ny) = (gx.n, gy.n);
            let (wx, wy) = (2 * nx - 1, 2 * ny - 1);
            let mut kx = vec![0.0; wx * wy];
            let mut ky = vec![0.0; wx * wy];
            for a in 0..wx {
                let ox = (a as f64 - (nx - 1) as f64) * gx.dx;
                for b in 0..wy {
                    let oy = (b as f64 - (ny - 1) as f64) * gy.dx;
                    let r = ox.hypot(oy);
                    if r > 0.0 {
                        let p = phi_radial(r) / r;
                        kx[a * wy + b] = p * ox;
                        ky[a * wy + b] = p * oy;
                    }
                }
            }
            let cell = gx.dx * gy.dx;
            let nonzero: Vec<(usize, usize, f64)> = (0..nx * ny)
                .filter(|&k| u.values[k] != 0.0)
                .map(|k| (k / ny, k % ny, u.values[k]))
                .collect();
            let (gxv, gyv): (Vec<f64>, Vec<f64>) = (0..nx * ny)
                .into_par_iter()
                .map(|idx| {
                    let (i, j) = (idx / ny, idx % ny);
                    let (mut sx, mut sy) = (0.0, 0.0);
                    for &(p, q, val) in &nonzero {
                        let k = (i + nx - 1 - p) * wy + (j + ny - 1 - q);
                        sx += kx[k] * val;
                        sy += ky[k] * val;
                    }
                    (sx * cell, sy * cell)
                })
                .unzip();
            Ok(vec![gxv, gyv])
        }
        _ => Err(Error::UnsupportedDimension(u.dim())),
    }
}

fn potential_gradient(u: &SampledField, params: &ParameterTriple) -> Result<Vec<Vec<f64>>> {
    let d = u.dim();
    let n = u.values.len();
    let mut x = vec![0.0; d];
    if let Some(grad) = &params.grad_potential {
        let mut comps = vec![vec![0.0; n]; d];
        let mut g = vec![0.0; d];
        for idx in 0..n {
            grid_point(u, idx, &mut x);
            grad(&x, &mut g);
            for c in 0..d {
                comps[c][idx] = g[c];
            }
        }
        return Ok(comps);
    }
    let mut sampled = u.zeros_like();
    for idx in 0..n {
        grid_point(u, idx, &mut x);
        sampled.values[idx] = (params.potential)(&x);
    }
    field_gradient(&sampled)
}

/// `∇[ν h'(u) + Φ * u + V]` on the grid of `u`.
pub fn velocity_potential_gradient(u: &SampledField, params: &ParameterTriple) -> Result<Vec<Vec<f64>>> {
    let grad_u = field_gradient(u)?;
    let mut out = interaction_gradient(u, params.phi_radial.as_ref())?;
    let gv = potential_gradient(u, params)?;
    for (c, comp) in out.iter_mut().enumerate() {
        for (idx, v) in comp.iter_mut().enumerate() {
            let diffusion = if params.nu != 0.0 {
                params.nu * (params.h_second)(u.values[idx]) * grad_u[c][idx]
            } else {
                0.0
            };
            *v += diffusion + gv[c][idx];
        }
    }
    Ok(out)
}

/// `∫ u⁺ ∇δE_p · ∇δE_q dx`, the bilinear form behind the self-testing pairing.
pub fn pairing_bilinear(u: &SampledField, p: &ParameterTriple, q: &ParameterTriple) -> Result<f64> {
    let gp = velocity_potential_gradient(u, p)?;
    let gq = velocity_potential_gradient(u, q)?;
    Ok(weighted_dot(u, &gp, &gq))
}

fn weighted_dot(u: &SampledField, a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (idx, &w) in u.values.iter().enumerate() {
        let w = w.max(0.0);
        if w == 0.0 {
            continue;
        }
        let dot: f64 = a.iter().zip(b).map(|(ca, cb)| ca[idx] * cb[idx]).sum();
        total += w * dot;
    }
    total * u.cell_volume()
}

/// `⟨R_φ[u], v_φ[u]⟩ = ∫ u |∇[ν h'(u) + Φ * u + V]|² dx` in first-derivative form.
pub fn self_test_pairing(u: &SampledField, params: &ParameterTriple) -> Result<f64> {
    let g = velocity_potential_gradient(u, params)?;
    Ok(weighted_dot(u, &g, &g))
}

/// `h(s) = ∫₀ˢ (s − t) h''(t) dt`, so that `h(0) = h'(0) = 0`.
pub fn h_from_second(h_second: &(dyn Fn(f64) -> f64 + Sync), s: f64) -> Result<f64> {
    if s == 0.0 {
        return Ok(0.0);
    }
    let (a, b, sign) = if s > 0.0 { (0.0, s, 1.0) } else { (s, 0.0, 1.0) };
    let scale = h_second(0.5 * s).abs().max(h_second(s).abs()).max(1.0) * s * s;
    let v = adaptive_quadrature(|t| (s - t).abs() * h_second(t), a, b, 1e-12 * scale)?;
    Ok(sign * v)
}

/// `Φ(r) = ∫₀ʳ φ`, tabulated by the trapezoid rule and linearly interpolated.
struct PotentialTable {
    step: f64,
    values: Vec<f64>,
}

impl PotentialTable {
    fn new(phi: &(dyn Fn(f64) -> f64 + Sync), r_max: f64) -> Self {
        let n = 1 << 15;
        let step = (r_max.max(1e-12)) / n as f64;
        let mut values = Vec::with_capacity(n + 2);
        values.push(0.0);
        let mut prev = phi(0.0);
        let mut acc = 0.0;
        for i in 1..=n + 1 {
            let cur = phi(i as f64 * step);
            acc += 0.5 * (prev + cur) * step;
            values.push(acc);
            prev = cur;
        }
        Self { step, values }
    }

    fn eval(&self, r: f64) -> f64 {
        let t = r / self.step;
        let i = (t.floor() as usize).min(self.values.len() - 2);
        let w = t - i as f64;
        self.values[i] * (1.0 - w) + self.values[i + 1] * w
    }
}

/// Free energy `ν∫h(u) + ½∫∫Φ(x−y)u(x)u(y) + ∫V u`.
pub fn energy(u: &SampledField, params: &ParameterTriple) -> Result<f64> {
    let cell = u.cell_volume();
    let n = u.values.len();
    let d = u.dim();

    let mut diffusion = 0.0;
    if params.nu != 0.0 {
        for &s in &u.values {
            diffusion += h_from_second(params.h_second.as_ref(), s)?;
        }
        diffusion *= params.nu * cell;
    }

    let mut external = 0.0;
    let mut x = vec![0.0; d];
    for idx in 0..n {
        if u.values[idx] != 0.0 {
            grid_point(u, idx, &mut x);
            external += (params.potential)(&x) * u.values[idx];
        }
    }
    external *= cell;

    let r_max = u.grids.iter().map(|g| g.dx * g.n as f64).map(|w| w * w).sum::<f64>().sqrt();
    let table;
    let big_phi: &(dyn Fn(f64) -> f64 + Sync) = match &params.phi_potential {
        Some(f) => f.as_ref(),
        None => {
            table = PotentialTable::new(params.phi_radial.as_ref(), r_max);
            &|r| table.eval(r)
        }
    };
    let support: Vec<usize> = (0..n).filter(|&k| u.values[k] != 0.0).collect();
    let interaction: f64 = support
        .par_iter()
        .map(|&a| {
            let mut xa = vec![0.0; d];
            let mut xb = vec![0.0; d];
            grid_point(u, a, &mut xa);
            let mut acc = 0.0;
            for &b in &support {
                grid_point(u, b, &mut xb);
                let r = xa.iter().zip(&xb).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
                acc += big_phi(r) * u.values[b];
            }
            acc * u.values[a]
        })
        .sum::<f64>()
        * 0.5
        * cell
        * cell;

    Ok(diffusion + interaction + external)
}

/// Compares the change of free energy along `path` with its time-integrated dissipation.
pub fn check_energy_conservation(path: &[SampledField], dt: f64, params: &ParameterTriple) -> Result<EnergyReport> {
    if path.len() < 2 {
        return Err(Error::TooFewPoints {
            needed: 2,
            found: path.len(),
        });
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter("time step must be positive".into()));
    }
    if path.windows(2).any(|w| !w[0].same_grid(&w[1])) {
        return Err(Error::GridMismatch);
    }
    let dissipation: Vec<f64> = path
        .par_iter()
        .map(|u| self_test_pairing(u, params))
        .collect::<Result<_>>()?;
    let energy_start = energy(&path[0], params)?;
    let energy_end = energy(&path[path.len() - 1], params)?;
    let dissipation_integral = trapezoid(&dissipation, dt);
    Ok(EnergyReport {
        energy_start,
        energy_end,
        dissipation_integral,
        conservation_residual: energy_end - energy_start + dissipation_integral,
    })
}

/// Strong form `−∇·[ν h''(u) u ∇u]`; the divergence is a Savitzky-Golay pass over the flux.
pub fn apply_r_h(u: &SampledField, h_second: &dyn Fn(f64) -> f64, nu: f64) -> Result<SampledField> {
    let grid = *u.grid()?;
    let du = u.derivative.as_ref().ok_or(Error::MissingDerivative)?;
    let flux: Vec<f64> = u
        .values
        .iter()
        .zip(du)
        .map(|(&s, &d)| nu * h_second(s) * s * d)
        .collect();
    let div = savitzky_golay_derivative(&flux, SG_WINDOW, SG_DEGREE, grid.dx)?;
    Field::new(grid, div.into_iter().map(|v| -v).collect())
}

/// Strong form of the aggregation term, `−∂x(u ∫₀^{r_max} φ(r) δu(·, r) dr)`, from samples.
pub fn apply_r_aggregation(u: &SampledField, phi_radial: &(dyn Fn(f64) -> f64 + Sync), r_max: f64) -> Result<SampledField> {
    let grid = *u.grid()?;
    let steps = (r_max / grid.dx).round() as usize;
    let cut = move |r: f64| if r <= steps as f64 * grid.dx + 1e-12 { phi_radial(r) } else { 0.0 };
    let conv = interaction_gradient(u, &cut)?.remove(0);
    let flux: Vec<f64> = u.values.iter().zip(&conv).map(|(a, b)| a * b).collect();
    let div = savitzky_golay_derivative(&flux, SG_WINDOW, SG_DEGREE, grid.dx)?;
    Field::new(grid, div.into_iter().map(|v| -v).collect())
}

/// A compactly supported profile known in closed form.
pub struct AnalyticProfile<'a> {
    pub value: &'a (dyn Fn(f64) -> f64 + Sync),
    pub derivative: &'a (dyn Fn(f64) -> f64 + Sync),
    /// Points where the profile or its derivative is not smooth.
    pub breaks: Vec<f64>,
}

/// `f(x) = −∫₀^{r_max} φ(r) ∂x[u(x−r)u(x) − u(x+r)u(x)] dr` by adaptive quadrature in `r`.
pub fn apply_r_aggregation_analytic(
    grid: crate::Grid1D,
    u: &AnalyticProfile<'_>,
    phi_radial: &(dyn Fn(f64) -> f64 + Sync),
    phi_breaks: &[f64],
    r_max: f64,
    tol: f64,
) -> Result<SampledField> {
    let values: Vec<f64> = (0..grid.n)
        .into_par_iter()
        .map(|j| {
            let x = grid.point(j);
            let (ux, dux) = ((u.value)(x), (u.derivative)(x));
            let integrand = |r: f64| {
                let (ul, dl) = ((u.value)(x - r), (u.derivative)(x - r));
                let (ur, dr) = ((u.value)(x + r), (u.derivative)(x + r));
                phi_radial(r) * (dl * ux + ul * dux - dr * ux - ur * dux)
            };
            let mut breaks: Vec<f64> = phi_breaks.to_vec();
            breaks.extend(u.breaks.iter().map(|&p| (x - p).abs()));
            adaptive_quadrature_with_breaks(integrand, 0.0, r_max, &breaks, tol).map(|v| -v)
        })
        .collect::<Result<_>>()?;
    Field::new(grid, values)
}

/// Loss for `−Δ(a u) = f`: `A_km = Σ_l ∫ ∇(e_k u_l)·∇(e_m u_l)`, `b_k = Σ_l ∫ f_l e_k u_l`.
pub fn elliptic_loss_assembly(pairs: &[(SampledField, SampledField)], basis: &BasisSet) -> Result<QuadForm<f64>> {
    let Some((first, _)) = pairs.first() else {
        return Err(Error::TooFewPoints { needed: 1, found: 0 });
    };
    let grid = *first.grid()?;
    let n = basis.len();
    let mut a = Matrix::zeros(n, n);
    let mut b = vec![0.0; n];
    let x = grid.points();
    for (u, f) in pairs {
        if !u.same_grid(first) || !f.same_grid(first) {
            return Err(Error::GridMismatch);
        }
        let grads: Vec<Vec<f64>> = (0..n)
            .map(|k| {
                let prod: Vec<f64> = x.iter().zip(&u.values).map(|(&xi, &ui)| basis.value(k, xi) * ui).collect();
                savitzky_golay_derivative(&prod, SG_WINDOW, SG_DEGREE, grid.dx)
            })
            .collect::<Result<_>>()?;
        for k in 0..n {
            for m in k..n {
                let v: f64 = grads[k].iter().zip(&grads[m]).map(|(p, q)| p * q).sum::<f64>() * grid.dx;
                a[(k, m)] += v;
                if m != k {
                    a[(m, k)] += v;
                }
            }
            b[k] += x
                .iter()
                .zip(&u.values)
                .zip(&f.values)
                .map(|((&xi, &ui), &fi)| fi * basis.value(k, xi) * ui)
                .sum::<f64>()
                * grid.dx;
        }
    }
    QuadForm::new(a, b, 0.0)
}

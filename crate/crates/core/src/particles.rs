//! Deterministic interacting particle systems and unlabeled ensemble data.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::error::{Error, Result};
use crate::numerics::{Field, Grid};
use crate::SampledField;

type ValueFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// A potential on `ℝ^d` with its gradient.
#[derive(Clone)]
pub struct Potential {
    pub value: ValueFn,
    pub grad: GradFn,
}

impl std::fmt::Debug for Potential {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Potential")
    }
}

impl Potential {
    pub fn new(
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            value: Arc::new(value),
            grad: Arc::new(grad),
        }
    }

    pub fn zero() -> Self {
        Self::new(|_| 0.0, |_, g| g.fill(0.0))
    }

    /// `½ k |x|²`.
    pub fn quadratic(k: f64) -> Self {
        Self::new(
            move |x| 0.5 * k * x.iter().map(|v| v * v).sum::<f64>(),
            move |x, g| g.iter_mut().zip(x).for_each(|(gi, &xi)| *gi = k * xi),
        )
    }

    /// Radial potential `Φ(x) = Φ_r(|x|)` with `∇Φ(x) = φ(|x|) x/|x|` and `∇Φ(0) = 0`.
    pub fn radial(
        profile: impl Fn(f64) -> f64 + Send + Sync + 'static,
        phi: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::new(
            move |x| profile(x.iter().map(|v| v * v).sum::<f64>().sqrt()),
            move |x, g| {
                let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                if r == 0.0 {
                    g.fill(0.0);
                } else {
                    let s = phi(r) / r;
                    g.iter_mut().zip(x).for_each(|(gi, &xi)| *gi = s * xi);
                }
            },
        )
    }

    /// `Σ c_k e_k` over a tensor basis.
    pub fn from_basis(basis: &BasisSet, coeffs: &[f64]) -> Result<Self> {
        if coeffs.len() != basis.len() {
            return Err(Error::DimensionMismatch {
                expected: basis.len(),
                found: coeffs.len(),
            });
        }
        let (b1, c1) = (basis.clone(), coeffs.to_vec());
        let (b2, c2) = (basis.clone(), coeffs.to_vec());
        Ok(Self::new(
            move |x| c1.iter().enumerate().map(|(k, &c)| c * b1.value_nd(k, x)).sum(),
            move |x, g| {
                g.fill(0.0);
                let mut tmp = vec![0.0; g.len()];
                for (k, &c) in c2.iter().enumerate() {
                    if c == 0.0 {
                        continue;
                    }
                    b2.gradient_nd(k, x, &mut tmp);
                    g.iter_mut().zip(&tmp).for_each(|(gi, t)| *gi += c * t);
                }
            },
        ))
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let (v, g) = (self.value.clone(), self.grad.clone());
        Self::new(move |x| alpha * v(x), move |x, out| {
            g(x, out);
            out.iter_mut().for_each(|o| *o *= alpha);
        })
    }

    pub fn shifted(&self, c: f64) -> Self {
        let (v, g) = (self.value.clone(), self.grad.clone());
        Self::new(move |x| v(x) + c, move |x, out| g(x, out))
    }
}

/// Interaction and confinement potentials of the particle system.
#[derive(Clone, Debug)]
pub struct GradientSystem {
    pub interaction: Potential,
    pub external: Potential,
}

/// Positions indexed by (simulation m, time l, particle i, coordinate k).
///
/// Particle index `i` carries no identity across time slices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleEnsemble {
    pub m: usize,
    pub l: usize,
    pub n: usize,
    pub d: usize,
    pub dt: f64,
    pub t0: f64,
    pub positions: Vec<f64>,
}

/// Convention for the `j = i` drift term recorded in ensemble metadata.
pub const SELF_INTERACTION: &str = "included-by-value";

/// Sidecar metadata stored next to the ensemble CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMeta {
    pub dt: f64,
    pub t0: f64,
    pub seed: u64,
    pub m: usize,
    pub l: usize,
    pub n: usize,
    pub d: usize,
    pub self_interaction: String,
    pub spec: serde_json::Value,
}

impl ParticleEnsemble {
    pub fn new(m: usize, l: usize, n: usize, d: usize, dt: f64, t0: f64, positions: Vec<f64>) -> Result<Self> {
        let expected = m * l * n * d;
        if positions.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: positions.len(),
            });
        }
        if positions.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ensemble positions".into()));
        }
        Ok(Self { m, l, n, d, dt, t0, positions })
    }

    /// The `N × d` block of simulation `m` at time index `l`.
    pub fn slice(&self, m: usize, l: usize) -> &[f64] {
        let stride = self.n * self.d;
        let start = (m * self.l + l) * stride;
        &self.positions[start..start + stride]
    }

    pub fn slice_mut(&mut self, m: usize, l: usize) -> &mut [f64] {
        let stride = self.n * self.d;
        let start = (m * self.l + l) * stride;
        &mut self.positions[start..start + stride]
    }

    pub fn time(&self, l: usize) -> f64 {
        self.t0 + self.dt * l as f64
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["m".to_string(), "l".to_string(), "i".to_string()];
        header.extend((1..=self.d).map(|k| format!("x{k}")));
        w.write_record(&header)?;
        for m in 0..self.m {
            for l in 0..self.l {
                let s = self.slice(m, l);
                for i in 0..self.n {
                    let mut rec = vec![m.to_string(), l.to_string(), i.to_string()];
                    rec.extend(s[i * self.d..(i + 1) * self.d].iter().map(|v| v.to_string()));
                    w.write_record(&rec)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, meta: &EnsembleMeta) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut positions = vec![f64::NAN; meta.m * meta.l * meta.n * meta.d];
        let mut seen = 0usize;
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 3 + meta.d {
                return Err(Error::DimensionMismatch {
                    expected: 3 + meta.d,
                    found: rec.len(),
                });
            }
            let idx = |k: usize| -> Result<usize> {
                rec[k]
                    .trim()
                    .parse()
                    .map_err(|_| Error::InvalidParameter(format!("bad index '{}'", &rec[k])))
            };
            let (m, l, i) = (idx(0)?, idx(1)?, idx(2)?);
            if m >= meta.m || l >= meta.l || i >= meta.n {
                return Err(Error::InvalidParameter(format!("index ({m}, {l}, {i}) out of range")));
            }
            for k in 0..meta.d {
                let v: f64 = rec[3 + k]
                    .trim()
                    .parse()
                    .map_err(|_| Error::InvalidParameter(format!("bad coordinate '{}'", &rec[3 + k])))?;
                positions[((m * meta.l + l) * meta.n + i) * meta.d + k] = v;
            }
            seen += 1;
        }
        if seen != meta.m * meta.l * meta.n {
            return Err(Error::DimensionMismatch {
                expected: meta.m * meta.l * meta.n,
                found: seen,
            });
        }
        Self::new(meta.m, meta.l, meta.n, meta.d, meta.dt, meta.t0, positions)
    }
}

/// Initial-condition law: a share of uniform simulations, the rest from a two-component Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureSpec {
    pub weight_uniform: f64,
    /// Uniform law on `[-box_half_width, box_half_width]^d`.
    pub box_half_width: f64,
    pub component_weights: [f64; 2],
    /// Per-simulation means are drawn uniformly from these coordinate ranges.
    pub mean_ranges: [[f64; 2]; 2],
    pub covariances: [[[f64; 2]; 2]; 2],
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            weight_uniform: 0.5,
            box_half_width: 2.0,
            component_weights: [0.6, 0.4],
            mean_ranges: [[0.0, 2.5], [-2.5, 0.0]],
            covariances: [[[0.2, 0.0], [0.0, 0.4]], [[1.0, 0.5], [0.5, 1.0]]],
        }
    }
}

impl MixtureSpec {
    pub fn uniform_only(box_half_width: f64) -> Self {
        Self {
            weight_uniform: 1.0,
            box_half_width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.weight_uniform) {
            return Err(Error::InvalidParameter("weight_uniform must lie in [0, 1]".into()));
        }
        if self.component_weights.iter().any(|w| !(0.0..=1.0).contains(w))
            || (self.component_weights[0] + self.component_weights[1] - 1.0).abs() > 1e-12
        {
            return Err(Error::InvalidParameter("component weights must lie in [0, 1] and sum to 1".into()));
        }
        for c in &self.covariances {
            if (c[0][1] - c[1][0]).abs() > 1e-12 || c[0][0] <= 0.0 || c[0][0] * c[1][1] - c[0][1] * c[1][0] <= 0.0 {
                return Err(Error::InvalidParameter("covariances must be symmetric positive definite".into()));
            }
        }
        Ok(())
    }

    /// Number of simulations drawn from the uniform law.
    pub fn uniform_count(&self, m: usize) -> usize {
        (m as f64 * self.weight_uniform).floor() as usize
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// ChaCha stream keyed by `(seed, a, b)`.
pub fn keyed_rng(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(splitmix64(seed) ^ a) ^ b.rotate_left(32));
    ChaCha8Rng::seed_from_u64(key)
}

/// Initial positions, `M × N × d`, deterministic in `seed` and independent of evaluation order.
pub fn sample_initial(spec: &MixtureSpec, m: usize, n: usize, d: usize, seed: u64) -> Result<Vec<f64>> {
    spec.validate()?;
    let n_uniform = spec.uniform_count(m);
    if n_uniform < m && d != 2 {
        return Err(Error::UnsupportedDimension(d));
    }
    let chol: Vec<[f64; 3]> = spec
        .covariances
        .iter()
        .map(|c| {
            let l00 = c[0][0].sqrt();
            let l10 = c[1][0] / l00;
            let l11 = (c[1][1] - l10 * l10).sqrt();
            [l00, l10, l11]
        })
        .collect();
    let mut out = vec![0.0; m * n * d];
    out.par_chunks_mut(n * d).enumerate().for_each(|(sim, block)| {
        if sim < n_uniform {
            for i in 0..n {
                let mut rng = keyed_rng(seed, sim as u64, i as u64);
                for k in 0..d {
                    block[i * d + k] = rng.random_range(-spec.box_half_width..=spec.box_half_width);
                }
            }
        } else {
            let mut mean_rng = keyed_rng(seed, sim as u64, u64::MAX);
            let means: Vec<[f64; 2]> = spec
                .mean_ranges
                .iter()
                .map(|r| [mean_rng.random_range(r[0]..=r[1]), mean_rng.random_range(r[0]..=r[1])])
                .collect();
            for i in 0..n {
                let mut rng = keyed_rng(seed, sim as u64, i as u64);
                let c = if rng.random::<f64>() < spec.component_weights[0] { 0 } else { 1 };
                let z0: f64 = rng.sample(StandardNormal);
                let z1: f64 = rng.sample(StandardNormal);
                let l = chol[c];
                block[i * 2] = means[c][0] + l[0] * z0;
                block[i * 2 + 1] = means[c][1] + l[1] * z0 + l[2] * z1;
            }
        }
    });
    Ok(out)
}

/// Component label drawn for particle `(sim, i)` by [`sample_initial`]; 0 or 1.
pub fn mixture_component(spec: &MixtureSpec, sim: usize, i: usize, seed: u64) -> usize {
    let mut rng = keyed_rng(seed, sim as u64, i as u64);
    if rng.random::<f64>() < spec.component_weights[0] { 0 } else { 1 }
}

fn drift(system: &GradientSystem, x: &[f64], n: usize, d: usize, out: &mut [f64]) {
    let mut g = vec![0.0; d];
    let mut diff = vec![0.0; d];
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        (system.external.grad)(xi, &mut g);
        let oi = &mut out[i * d..(i + 1) * d];
        oi.copy_from_slice(&g);
        for j in 0..n {
            for k in 0..d {
                diff[k] = xi[k] - x[j * d + k];
            }
            (system.interaction.grad)(&diff, &mut g);
            for k in 0..d {
                oi[k] += inv_n * g[k];
            }
        }
        for v in oi.iter_mut() {
            *v = -*v;
        }
    }
}

/// Classic RK4 for `dX_i/dt = −[∇V(X_i) + (1/N) Σ_j ∇Φ(X_i − X_j)]`.
///
/// The `j = i` term is kept and evaluated as `∇Φ(0)`, which is zero for radial and even potentials.
///
/// `init` is `M × N × d`; `l` slices are recorded `substeps` RK4 steps apart, the first at `t = 0`.
pub fn simulate_ips(
    system: &GradientSystem,
    init: &[f64],
    m: usize,
    n: usize,
    d: usize,
    dt: f64,
    l: usize,
    substeps: usize,
) -> Result<ParticleEnsemble> {
    if init.len() != m * n * d {
        return Err(Error::DimensionMismatch {
            expected: m * n * d,
            found: init.len(),
        });
    }
    if !(dt > 0.0) || substeps == 0 || l == 0 {
        return Err(Error::InvalidParameter("dt, substeps and slice count must be positive".into()));
    }
    let stride = n * d;
    let blocks: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|sim| {
            let mut x = init[sim * stride..(sim + 1) * stride].to_vec();
            let mut out = Vec::with_capacity(l * stride);
            out.extend_from_slice(&x);
            let (mut k1, mut k2, mut k3, mut k4) =
                (vec![0.0; stride], vec![0.0; stride], vec![0.0; stride], vec![0.0; stride]);
            let mut tmp = vec![0.0; stride];
            for step in 1..l {
                for _ in 0..substeps {
                    drift(system, &x, n, d, &mut k1);
                    for q in 0..stride {
                        tmp[q] = x[q] + 0.5 * dt * k1[q];
                    }
                    drift(system, &tmp, n, d, &mut k2);
                    for q in 0..stride {
                        tmp[q] = x[q] + 0.5 * dt * k2[q];
                    }
                    drift(system, &tmp, n, d, &mut k3);
                    for q in 0..stride {
                        tmp[q] = x[q] + dt * k3[q];
                    }
                    drift(system, &tmp, n, d, &mut k4);
                    for q in 0..stride {
                        x[q] += dt / 6.0 * (k1[q] + 2.0 * k2[q] + 2.0 * k3[q] + k4[q]);
                    }
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::ParticleBlowup { simulation: sim, step });
                }
                out.extend_from_slice(&x);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    ParticleEnsemble::new(m, l, n, d, dt * substeps as f64, 0.0, blocks.concat())
}

/// Mean squared drift `(1/N) Σ_i |(1/N) Σ_j ∇Φ(X_i − X_j) + ∇V(X_i)|²` of one slice.
pub fn slice_dissipation(system: &GradientSystem, x: &[f64], n: usize, d: usize) -> f64 {
    let mut out = vec![0.0; n * d];
    drift(system, x, n, d, &mut out);
    out.iter().map(|v| v * v).sum::<f64>() / n as f64
}

/// `(1/(2N²)) Σ_{i,j} Φ(X_i − X_j) + (1/N) Σ_i V(X_i)` of one slice.
pub fn slice_energy(system: &GradientSystem, x: &[f64], n: usize, d: usize) -> f64 {
    let mut interaction = 0.0;
    let mut external = 0.0;
    let mut diff = vec![0.0; d];
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        external += (system.external.value)(xi);
        for j in 0..n {
            for k in 0..d {
                diff[k] = xi[k] - x[j * d + k];
            }
            interaction += (system.interaction.value)(&diff);
        }
    }
    interaction / (2.0 * (n * n) as f64) + external / n as f64
}

/// Trapezoid weights over `l` slices spaced `dt` apart.
pub fn time_weights(l: usize, dt: f64) -> Vec<f64> {
    (0..l)
        .map(|k| if k == 0 || k + 1 == l { 0.5 * dt } else { dt })
        .collect()
}

/// Self-test loss of the ensemble for the candidate `system`:
/// `(1/L)(1/M) Σ_m [ ∫ (1/N) Σ_i |drift_i|² dt + 2 (E(t_L) − E(t_1)) ]` with the time integral by the trapezoid rule.
///
/// Only per-slice particle sets enter; indices are never matched across slices.
pub fn ensemble_loss(data: &ParticleEnsemble, system: &GradientSystem) -> Result<f64> {
    if data.l < 2 {
        return Err(Error::TooFewPoints { needed: 2, found: data.l });
    }
    let w = time_weights(data.l, data.dt);
    let per_sim: Vec<f64> = (0..data.m)
        .into_par_iter()
        .map(|m| {
            let quad: f64 = (0..data.l)
                .map(|l| w[l] * slice_dissipation(system, data.slice(m, l), data.n, data.d))
                .sum();
            let e_end = slice_energy(system, data.slice(m, data.l - 1), data.n, data.d);
            let e_start = slice_energy(system, data.slice(m, 0), data.n, data.d);
            quad + 2.0 * (e_end - e_start)
        })
        .collect();
    let total: f64 = per_sim.iter().sum();
    Ok(total / (data.l * data.m) as f64)
}

/// Gaussian kernel density estimate of slice `(m, l)` on a grid covering the particles plus `4·bandwidth`.
pub fn slice_density(data: &ParticleEnsemble, m: usize, l: usize, bandwidth: f64, points_per_axis: usize) -> Result<SampledField> {
    let x = data.slice(m, l);
    let (lo, hi) = bounding_box(x, data.d);
    let lo: Vec<f64> = lo.iter().map(|v| v - 4.0 * bandwidth).collect();
    let hi: Vec<f64> = hi.iter().map(|v| v + 4.0 * bandwidth).collect();
    let grids = (0..data.d)
        .map(|k| Grid::spanning(lo[k], hi[k], points_per_axis))
        .collect::<Result<Vec<_>>>()?;
    kde_on_grids(x, data.d, bandwidth, grids)
}

/// KDE densities of every slice of simulation `m` on one grid covering the whole path plus `4·bandwidth`.
pub fn density_path(data: &ParticleEnsemble, m: usize, bandwidth: f64, points_per_axis: usize) -> Result<Vec<SampledField>> {
    let all = &data.positions[m * data.l * data.n * data.d..(m + 1) * data.l * data.n * data.d];
    let (lo, hi) = bounding_box(all, data.d);
    let grids = (0..data.d)
        .map(|k| Grid::spanning(lo[k] - 4.0 * bandwidth, hi[k] + 4.0 * bandwidth, points_per_axis))
        .collect::<Result<Vec<_>>>()?;
    (0..data.l)
        .into_par_iter()
        .map(|l| kde_on_grids(data.slice(m, l), data.d, bandwidth, grids.clone()))
        .collect()
}

pub(crate) fn bounding_box(x: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for p in x.chunks(d) {
        for k in 0..d {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (lo, hi)
}

/// Gaussian KDE on the given 1-D or 2-D grids, renormalized to unit Riemann mass.
pub fn kde_on_grids(x: &[f64], d: usize, bandwidth: f64, grids: Vec<Grid<f64>>) -> Result<SampledField> {
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidParameter("bandwidth must be positive".into()));
    }
    if grids.len() != d {
        return Err(Error::UnsupportedDimension(d));
    }
    let n = x.len() / d;
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * bandwidth).powi(d as i32) / n as f64;
    let inv2h2 = 0.5 / (bandwidth * bandwidth);
    let factors: Vec<Vec<Vec<f64>>> = (0..d)
        .map(|k| {
            (0..n)
                .map(|i| {
                    grids[k]
                        .points()
                        .iter()
                        .map(|&g| (-(g - x[i * d + k]).powi(2) * inv2h2).exp())
                        .collect()
                })
                .collect()
        })
        .collect();
    let shape: Vec<usize> = grids.iter().map(|g| g.n).collect();
    let total: usize = shape.iter().product();
    let mut values = vec![0.0; total];
    for i in 0..n {
        match d {
            1 => values.iter_mut().zip(&factors[0][i]).for_each(|(v, f)| *v += f),
            2 => {
                for a in 0..shape[0] {
                    let fa = factors[0][i][a];
                    if fa < 1e-300 {
                        continue;
                    }
                    for b in 0..shape[1] {
                        values[a * shape[1] + b] += fa * factors[1][i][b];
                    }
                }
            }
            _ => return Err(Error::UnsupportedDimension(d)),
        }
    }
    values.iter_mut().for_each(|v| *v *= norm);
    let mut field = Field::with_grids(grids, values)?;
    let mass = crate::numerics::riemann_sum(&field);
    if mass > 0.0 {
        field.values.iter_mut().for_each(|v| *v /= mass);
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(x0: &[f64], system: &GradientSystem, dt: f64, steps: usize) -> Vec<f64> {
        let e = simulate_ips(system, x0, 1, 1, x0.len(), dt, 2, steps).unwrap();
        e.slice(0, 1).to_vec()
    }

    #[test]
    fn free_particles_do_not_move() {
        let sys = GradientSystem {
            interaction: Potential::zero(),
            external: Potential::zero(),
        };
        let init = sample_initial(&MixtureSpec::uniform_only(2.0), 2, 5, 2, 3).unwrap();
        let e = simulate_ips(&sys, &init, 2, 5, 2, 0.01, 6, 1).unwrap();
        for m in 0..2 {
            for l in 0..6 {
                assert_eq!(e.slice(m, l), e.slice(m, 0));
            }
        }
    }

    #[test]
    fn rk4_is_fourth_order() {
        let sys = GradientSystem {
            interaction: Potential::zero(),
            external: Potential::quadratic(1.0),
        };
        let x0 = [1.3, -0.4];
        let exact: Vec<f64> = x0.iter().map(|v| v * (-1.0f64).exp()).collect();
        let err = |steps: usize| {
            let x = single(&x0, &sys, 1.0 / steps as f64, steps);
            x.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let (e1, e2) = (err(10), err(20));
        let ratio = e1 / e2;
        assert!((14.0..18.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn pair_forces_conserve_center_of_mass() {
        let sys = GradientSystem {
            interaction: Potential::quadratic(1.0),
            external: Potential::zero(),
        };
        let init = [0.3, -1.0, 2.0, 0.7];
        let e = simulate_ips(&sys, &init, 1, 2, 2, 0.05, 30, 1).unwrap();
        let com0 = [(init[0] + init[2]) / 2.0, (init[1] + init[3]) / 2.0];
        for l in 0..30 {
            let s = e.slice(0, l);
            assert!(((s[0] + s[2]) / 2.0 - com0[0]).abs() < 1e-10);
            assert!(((s[1] + s[3]) / 2.0 - com0[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn blowup_is_reported() {
        let sys = GradientSystem {
            interaction: Potential::zero(),
            external: Potential::new(|_| 0.0, |x, g| g.iter_mut().zip(x).for_each(|(gi, &xi)| *gi = -xi.powi(5))),
        };
        let err = simulate_ips(&sys, &[3.0], 1, 1, 1, 0.5, 50, 1).unwrap_err();
        assert!(matches!(err, Error::ParticleBlowup { simulation: 0, .. }));
    }

    #[test]
    fn sampling_is_deterministic_and_boxed() {
        let spec = MixtureSpec::default();
        let a = sample_initial(&spec, 10, 30, 2, 42).unwrap();
        let b = sample_initial(&spec, 10, 30, 2, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_initial(&spec, 10, 30, 2, 43).unwrap());
        let u = sample_initial(&MixtureSpec::uniform_only(2.0), 4, 100, 3, 1).unwrap();
        assert!(u.iter().all(|v| (-2.0..=2.0).contains(v)));
        assert_eq!(spec.uniform_count(10), 5);
        assert_eq!(spec.uniform_count(7), 3);
    }

    #[test]
    fn mixture_weights_within_binomial_band() {
        let spec = MixtureSpec::default();
        let (m, n) = (10, 400);
        let draws = (m - spec.uniform_count(m)) * n;
        let first = (spec.uniform_count(m)..m)
            .flat_map(|s| (0..n).map(move |i| (s, i)))
            .filter(|&(s, i)| mixture_component(&spec, s, i, 9) == 0)
            .count();
        let p = 0.6;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        assert!((first as f64 - p * draws as f64).abs() <= 3.0 * sd);
    }

    #[test]
    fn csv_round_trip() {
        let init = sample_initial(&MixtureSpec::default(), 2, 3, 2, 5).unwrap();
        let sys = GradientSystem {
            interaction: Potential::quadratic(0.5),
            external: Potential::quadratic(1.0),
        };
        let e = simulate_ips(&sys, &init, 2, 3, 2, 0.01, 4, 1).unwrap();
        let mut buf = Vec::new();
        e.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("m,l,i,x1,x2\n"));
        let meta = EnsembleMeta {
            dt: e.dt,
            t0: e.t0,
            seed: 5,
            m: 2,
            l: 4,
            n: 3,
            d: 2,
            self_interaction: SELF_INTERACTION.into(),
            spec: serde_json::Value::Null,
        };
        let back = ParticleEnsemble::read_csv(buf.as_slice(), &meta).unwrap();
        for (a, b) in back.positions.iter().zip(&e.positions) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }

    fn small_ensemble() -> (ParticleEnsemble, GradientSystem) {
        let sys = GradientSystem {
            interaction: Potential::radial(|r| -0.5 * (-r * r).exp(), |r| r * (-r * r).exp()),
            external: Potential::quadratic(1.0),
        };
        let init = sample_initial(&MixtureSpec::default(), 4, 12, 2, 11).unwrap();
        (simulate_ips(&sys, &init, 4, 12, 2, 0.005, 41, 2).unwrap(), sys)
    }

    #[test]
    fn loss_examples() {
        let (data, sys) = small_ensemble();
        let zero = GradientSystem {
            interaction: Potential::zero(),
            external: Potential::zero(),
        };
        assert_eq!(ensemble_loss(&data, &zero).unwrap(), 0.0);
        let at_truth = ensemble_loss(&data, &sys).unwrap();
        let dissipation: f64 = (0..data.m)
            .map(|m| {
                let w = time_weights(data.l, data.dt);
                (0..data.l).map(|l| w[l] * slice_dissipation(&sys, data.slice(m, l), data.n, data.d)).sum::<f64>()
            })
            .sum::<f64>()
            / (data.m * data.l) as f64;
        assert!(at_truth <= 0.0);
        assert!((at_truth + dissipation).abs() < 1e-3 * dissipation, "{at_truth} vs {dissipation}");
    }

    #[test]
    fn loss_parabola_vertex_at_truth() {
        let (data, sys) = small_ensemble();
        let f = |a: f64| {
            ensemble_loss(
                &data,
                &GradientSystem {
                    interaction: sys.interaction.scaled(a),
                    external: sys.external.scaled(a),
                },
            )
            .unwrap()
        };
        let (l0, l1, l2) = (f(0.5), f(1.0), f(1.5));
        // vertex of the parabola through three equally spaced points
        let vertex = 1.0 - 0.5 * (l2 - l0) / (2.0 * (l2 - 2.0 * l1 + l0));
        assert!((vertex - 1.0).abs() < 1e-2, "{vertex}");
    }

    #[test]
    fn loss_ignores_labels_and_constants() {
        let (mut data, sys) = small_ensemble();
        let base = ensemble_loss(&data, &sys).unwrap();
        let shifted = GradientSystem {
            interaction: sys.interaction.shifted(3.0),
            external: sys.external.shifted(-1.5),
        };
        assert!((ensemble_loss(&data, &shifted).unwrap() - base).abs() < 1e-12 * base.abs().max(1.0));
        // reverse particle order within every slice
        for m in 0..data.m {
            for l in 0..data.l {
                let d = data.d;
                let s = data.slice_mut(m, l);
                let mut pts: Vec<Vec<f64>> = s.chunks(d).map(|c| c.to_vec()).collect();
                pts.rotate_left(l % 5 + 1);
                s.copy_from_slice(&pts.concat());
            }
        }
        assert!((ensemble_loss(&data, &sys).unwrap() - base).abs() < 1e-12 * base.abs().max(1.0));
        data.l = 1;
        assert!(ensemble_loss(&data, &sys).is_err());
    }

    #[test]
    fn kde_properties() {
        let e = ParticleEnsemble::new(1, 1, 1, 2, 0.1, 0.0, vec![0.5, -0.25]).unwrap();
        let f = slice_density(&e, 0, 0, 0.2, 81).unwrap();
        assert!((crate::numerics::riemann_sum(&f) - 1.0).abs() < 1e-6);
        let e2 = ParticleEnsemble::new(1, 1, 1, 2, 0.1, 0.0, vec![1.5, 0.75]).unwrap();
        let f2 = slice_density(&e2, 0, 0, 0.2, 81).unwrap();
        assert!((f2.grids[0].x0 - f.grids[0].x0 - 1.0).abs() < 1e-12);
        assert!((f2.grids[1].x0 - f.grids[1].x0 - 1.0).abs() < 1e-12);
        for (a, b) in f.values.iter().zip(&f2.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kde_converges_to_gaussian() {
        let sup_err = |n: usize| {
            let mut rng = keyed_rng(1, 2, 3);
            let x: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let g = Grid::spanning(-4.0, 4.0, 161).unwrap();
            let h = 1.06 * (n as f64).powf(-0.2);
            let f = kde_on_grids(&x, 1, h, vec![g]).unwrap();
            g.points()
                .iter()
                .zip(&f.values)
                .map(|(&t, v)| (v - (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt()).abs())
                .fold(0.0, f64::max)
        };
        let (coarse, fine) = (sup_err(300), sup_err(10_000));
        assert!(fine < coarse && fine < 0.02, "{coarse} {fine}");
    }
}

use std::fs::File;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use selftest::estimators::*;
use selftest::identifiability::{build_lgbar, joint_null_check, rho1, rho2, rho3, spectrum_decay};
use selftest::operators::check_energy_conservation;
use selftest::particles::{density_path, ensemble_loss, sample_initial, simulate_ips, EnsembleMeta, SELF_INTERACTION};
use selftest::{BasisSet, GradientSystem, MixtureSpec, ParameterTriple, ParticleEnsemble, Potential, SampledField};

use crate::config::CliError;
use crate::runner::{Metrics, SeedRun};
use crate::CommandKind;

fn from_params<T: for<'de> Deserialize<'de>>(v: &Value) -> Result<T, CliError> {
    serde_json::from_value(v.clone()).map_err(|e| CliError::Config(format!("params: {e}")))
}

pub fn run_seed(kind: CommandKind, ctx: &SeedRun<'_>) -> Result<Metrics, CliError> {
    match kind {
        CommandKind::GenData => gen_data(ctx),
        CommandKind::FitH => fit_h(ctx),
        CommandKind::FitPhi => fit_phi(ctx),
        CommandKind::FitV => fit_v_cmd(ctx),
        CommandKind::FitJoint => fit_joint(ctx),
        CommandKind::Diagnose => diagnose(ctx),
    }
}

// ---------------------------------------------------------------- polynomial potentials

/// `coeff · Π x_i^{monomial_i}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub monomial: Vec<u32>,
    pub coeff: f64,
}

fn term(monomial: &[u32], coeff: f64) -> Term {
    Term {
        monomial: monomial.to_vec(),
        coeff,
    }
}

fn polynomial_potential(terms: &[Term], d: usize) -> Result<Potential, CliError> {
    if terms.iter().any(|t| t.monomial.len() != d) {
        return Err(CliError::Config(format!("every monomial needs {d} exponents")));
    }
    let value_terms = terms.to_vec();
    let grad_terms = terms.to_vec();
    Ok(Potential::new(
        move |x| {
            value_terms
                .iter()
                .map(|t| t.coeff * t.monomial.iter().zip(x).map(|(&a, &xi)| xi.powi(a as i32)).product::<f64>())
                .sum()
        },
        move |x, g| {
            g.iter_mut().for_each(|v| *v = 0.0);
            for t in &grad_terms {
                for (c, gc) in g.iter_mut().enumerate() {
                    let a = t.monomial[c];
                    if a == 0 {
                        continue;
                    }
                    let mut p = t.coeff * a as f64;
                    for (k, (&e, &xk)) in t.monomial.iter().zip(x).enumerate() {
                        let e = if k == c { e - 1 } else { e };
                        p *= xk.powi(e as i32);
                    }
                    *gc += p;
                }
            }
        },
    ))
}

/// True potentials of a particle experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointTruth {
    pub phi: Vec<Term>,
    pub v: Vec<Term>,
}

impl Default for JointTruth {
    /// `Φ = 0.25|x|² + 0.02|x|⁴`, `V = ½|x|² + 0.3x₁ − 0.2x₂`.
    fn default() -> Self {
        Self {
            phi: vec![
                term(&[2, 0], 0.25),
                term(&[0, 2], 0.25),
                term(&[4, 0], 0.02),
                term(&[2, 2], 0.04),
                term(&[0, 4], 0.02),
            ],
            v: vec![term(&[2, 0], 0.5), term(&[0, 2], 0.5), term(&[1, 0], 0.3), term(&[0, 1], -0.2)],
        }
    }
}

/// Particle experiment: simulation sizes, initial law, true potentials and fit bases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointParams {
    pub m: usize,
    pub n: usize,
    pub l: usize,
    pub dt: f64,
    pub substeps: usize,
    pub seed: u64,
    pub mixture: MixtureSpec,
    pub truth: JointTruth,
    /// Maximal total degree of the even interaction basis and the potential basis.
    pub phi_degree: u32,
    pub v_degree: u32,
    /// Fixed Tikhonov weight; the default scales with `trace(A)`.
    pub lambda: Option<f64>,
}

impl Default for JointParams {
    fn default() -> Self {
        Self {
            m: 10,
            n: 30,
            l: 20,
            dt: 0.01,
            substeps: 1,
            seed: 0,
            mixture: MixtureSpec::default(),
            truth: JointTruth::default(),
            phi_degree: 4,
            v_degree: 4,
            lambda: None,
        }
    }
}

const DIM: usize = 2;

impl JointParams {
    fn system(&self) -> Result<GradientSystem, CliError> {
        Ok(GradientSystem {
            interaction: polynomial_potential(&self.truth.phi, DIM)?,
            external: polynomial_potential(&self.truth.v, DIM)?,
        })
    }

    fn simulate(&self, seed: u64) -> Result<ParticleEnsemble, CliError> {
        if self.m == 0 || self.n == 0 || self.l == 0 || self.substeps == 0 || !(self.dt > 0.0) {
            return Err(CliError::Config("m, n, l, substeps and dt must be positive".into()));
        }
        let init = sample_initial(&self.mixture, self.m, self.n, DIM, seed)?;
        Ok(simulate_ips(&self.system()?, &init, self.m, self.n, DIM, self.dt, self.l, self.substeps)?)
    }
}

// ---------------------------------------------------------------- data input and output

fn write_field(path: &Path, f: &SampledField) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(f.write_csv(file)?)
}

fn write_pairs(ctx: &SeedRun<'_>, pairs: &[DataPair]) -> Result<Vec<String>, CliError> {
    let mut names = Vec::new();
    for (k, (u, f)) in pairs.iter().enumerate() {
        for (prefix, field) in [("u", u), ("f", f)] {
            let name = format!("{prefix}_{}.csv", k + 1);
            write_field(&ctx.path(&name), field)?;
            names.push(name);
        }
    }
    Ok(names)
}

/// Reads `u_1.csv, f_1.csv, u_2.csv, …` until the first missing index.
pub fn read_pairs(dir: &Path) -> Result<Vec<DataPair>, CliError> {
    let mut pairs = Vec::new();
    for k in 1.. {
        let (up, fp) = (dir.join(format!("u_{k}.csv")), dir.join(format!("f_{k}.csv")));
        if !up.exists() || !fp.exists() {
            break;
        }
        let open = |p: &Path| File::open(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())));
        pairs.push((SampledField::read_csv(open(&up)?)?, SampledField::read_csv(open(&fp)?)?));
    }
    if pairs.is_empty() {
        return Err(CliError::Config(format!("no u_k.csv/f_k.csv pairs in {}", dir.display())));
    }
    Ok(pairs)
}

fn read_ensemble(csv: &Path) -> Result<ParticleEnsemble, CliError> {
    let sidecar = csv.with_extension("json");
    let text = std::fs::read_to_string(&sidecar).map_err(|e| CliError::Config(format!("{}: {e}", sidecar.display())))?;
    let meta: EnsembleMeta = serde_json::from_str(&text)?;
    let file = File::open(csv).map_err(|e| CliError::Config(format!("{}: {e}", csv.display())))?;
    Ok(ParticleEnsemble::read_csv(file, &meta)?)
}

fn write_ensemble(ctx: &SeedRun<'_>, data: &ParticleEnsemble) -> Result<(), CliError> {
    let path = ctx.path("ensemble.csv");
    data.write_csv(File::create(&path)?)?;
    let meta = EnsembleMeta {
        dt: data.dt,
        t0: data.t0,
        seed: ctx.seed,
        m: data.m,
        l: data.l,
        n: data.n,
        d: data.d,
        self_interaction: SELF_INTERACTION.into(),
        spec: ctx.resolved_config(),
    };
    ctx.write_json("ensemble.json", &meta)
}

fn write_rows(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<f64>>) -> Result<(), CliError> {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn linspace(a: f64, b: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| a + (b - a) * i as f64 / (n - 1) as f64)
}

fn us_of(pairs: &[DataPair]) -> Vec<SampledField> {
    pairs.iter().map(|(u, _)| u.clone()).collect()
}

// ---------------------------------------------------------------- gen-data

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    #[default]
    H,
    Phi,
    V,
    Particles,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataParams {
    pub kind: DataKind,
    pub h: HFitConfig,
    pub phi: PhiFitConfig,
    pub v: VFitConfig,
    pub particles: JointParams,
}

fn gen_data(ctx: &SeedRun<'_>) -> Result<Metrics, CliError> {
    let p: GenDataParams = from_params(ctx.params)?;
    let pairs = match p.kind {
        DataKind::H => generate_h_data(&HFitConfig { seed: ctx.seed, ..p.h })?,
        DataKind::Phi => generate_phi_data(&PhiFitConfig { seed: ctx.seed, ..p.phi }, &RadialKernel::default_truth())?,
        DataKind::V => generate_v_data(&VFitConfig { seed: ctx.seed, ..p.v })?,
        DataKind::Particles => {
            let data = p.particles.simulate(ctx.seed)?;
            write_ensemble(ctx, &data)?;
            return Ok(Vec::new());
        }
    };
    let files = write_pairs(ctx, &pairs)?;
    ctx.write_json(
        "report.json",
        &json!({ "config": ctx.resolved_config(), "seed": ctx.seed, "files": files }),
    )?;
    Ok(Vec::new())
}

// ---------------------------------------------------------------- fits

fn fit_h(ctx: &SeedRun<'_>) -> Result<Metrics, CliError> {
    let cfg = HFitConfig {
        seed: ctx.seed,
        ..from_params(ctx.params)?
    };
    let data = match &ctx.run.data {
        Some(dir) => read_pairs(dir)?,
        None => generate_h_data(&cfg)?,
    };
    let weak = fit_h_weak(&data, &cfg.basis)?;
    let strong = fit_h_strong(&data, &cfg.basis)?;
    let truth = |s: f64| cfg.basis.combine(&cfg.truth, s, 2);
    let ew = h_rho1_error(&data, &cfg.basis, &weak.coefficients, &truth)?;
    let es = h_rho1_error(&data, &cfg.basis, &strong.coefficients, &truth)?;
    let (lo, hi) = data
        .iter()
        .flat_map(|(u, _)| u.values.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    write_rows(
        &ctx.path("estimate.csv"),
        &["s", "weak", "strong", "truth"],
        linspace(lo, hi, 101).map(|s| {
            vec![
                s,
                cfg.basis.combine(&weak.coefficients, s, 2),
                cfg.basis.combine(&strong.coefficients, s, 2),
                truth(s),
            ]
        }),
    )?;
    rho1(&us_of(&data))?.normalized().write_csv(File::create(ctx.path("rho1.csv"))?)?;
    ctx.write_json(
        "report.json",
        &json!({
            "config": ctx.resolved_config(),
            "seed": ctx.seed,
            "weak": weak,
            "strong": strong,
            "errors": { "weak": ew, "strong": es },
        }),
    )?;
    Ok(vec![
        ("weak_error".into(), ew),
        ("strong_error".into(), es),
        ("condition_number".into(), weak.condition_number),
    ])
}

fn fit_phi(ctx: &SeedRun<'_>) -> Result<Metrics, CliError> {
    let cfg = PhiFitConfig {
        seed: ctx.seed,
        ..from_params(ctx.params)?
    };
    let truth = RadialKernel::default_truth();
    let data = match &ctx.run.data {
        Some(dir) => read_pairs(dir)?,
        None => generate_phi_data(&cfg, &truth)?,
    };
    let weak = fit_phi_radial(&data, &cfg)?;
    let strong = fit_phi_strong(&data, &cfg)?;
    let (ew, es) = (weak.relative_error(&*truth.phi), strong.relative_error(&*truth.phi));
    let r = weak.rho.grid.points();
    write_rows(
        &ctx.path("estimate.csv"),
        &["r", "weak", "strong", "truth"],
        r.iter().enumerate().map(|(l, &r)| {
            vec![r, weak.report.coefficients[l], strong.report.coefficients[l], (truth.phi)(r)]
        }),
    )?;
    weak.rho.write_csv(File::create(ctx.path("rho.csv"))?)?;
    ctx.write_json(
        "report.json",
        &json!({
            "config": ctx.resolved_config(),
            "seed": ctx.seed,
            "weak": weak.report,
            "strong": strong.report,
            "errors": { "weak": ew, "strong": es },
        }),
    )?;
    Ok(vec![("weak_error".into(), ew), ("strong_error".into(), es)])
}

fn fit_v_cmd(ctx: &SeedRun<'_>) -> Result<Metrics, CliError> {
    let cfg = VFitConfig {
        seed: ctx.seed,
        ..from_params(ctx.params)?
    };
    let data = match &ctx.run.data {
        Some(dir) => read_pairs(dir)?,
        None => generate_v_data(&cfg)?,
    };
    let v = fit_v(&data)?;
    let rho = rho2(&us_of(&data))?;
    let truth = |x: f64| cfg.truth_derivative(x, 0);
    let err = v_rho2_error(&v, &truth, &rho)?;
    let grid = *v.grid()?;
    let mass: f64 = rho.density.iter().sum();
    let shift = (0..grid.n).map(|j| truth(grid.point(j)) * rho.density[j]).sum::<f64>() / mass;
    write_rows(
        &ctx.path("estimate.csv"),
        &["x", "estimate", "truth", "rho2"],
        (0..grid.n).map(|j| {
            let x = grid.point(j);
            vec![x, v.values[j], truth(x) - shift, rho.density[j]]
        }),
    )?;
    ctx.write_json(
        "report.json",
        &json!({ "config": ctx.resolved_config(), "seed": ctx.seed, "errors": { "rho2": err } }),
    )?;
    Ok(vec![("error".into(), err)])
}

fn joint_bases(p: &JointParams) -> (BasisSet, BasisSet) {
    (BasisSet::tensor_poly_even(DIM, p.phi_degree), BasisSet::tensor_poly(DIM, 1, p.v_degree))
}

fn gradient_rows(data: &ParticleEnsemble, pots: [&Potential; 4]) -> Vec<Vec<f64>> {
    let (mut lo, mut hi) = ([f64::INFINITY; DIM], [f64::NEG_INFINITY; DIM]);
    for x in data.positions.chunks(DIM) {
        for c in 0..DIM {
            lo[c] = lo[c].min(x[c]);
            hi[c] = hi[c].max(x[c]);
        }
    }
    let mut rows = Vec::new();
    let mut g = [0.0; DIM];
    for x1 in linspace(lo[0], hi[0], 21) {
        for x2 in linspace(lo[1], hi[1], 21) {
            let mut row = vec![x1, x2];
            for p in pots {
                (p.grad)(&[x1, x2], &mut g);
                row.extend_from_slice(&g);
            }
            rows.push(row);
        }
    }
    rows
}

fn fit_joint(ctx: &SeedRun<'_>) -> Result<Metrics, CliError> {
    let p: JointParams = from_params(ctx.params)?;
    let data = match &ctx.run.data {
        Some(path) => read_ensemble(path)?,
        None => p.simulate(ctx.seed)?,
    };
    let (pb, vb) = joint_bases(&p);
    let spec = p.lambda.map(selftest::RegularizationSpec::fixed);
    let fit = fit_joint_ensemble(&data, &pb, &vb, spec.as_ref())?;
    let (ph, vh) = fit.potentials(&pb, &vb)?;
    let truth = p.system()?;
    let errors = joint_errors(&data, &ph, &truth.interaction, &vh, &truth.external);
    let fitted = ensemble_loss(
        &data,
        &GradientSystem {
            interaction: ph.clone(),
            external: vh.clone(),
        },
    )?;
    let zero = ensemble_loss(
        &data,
        &GradientSystem {
            interaction: Potential::zero(),
            external: Potential::zero(),
        },
    )?;
    write_rows(
        &ctx.path("estimate.csv"),
        &["x1", "x2", "dphi1_hat", "dphi2_hat", "dphi1_true", "dphi2_true", "dv1_hat", "dv2_hat", "dv1_true", "dv2_true"],
        gradient_rows(&data, [&ph, &truth.interaction, &vh, &truth.external]).into_iter(),
    )?;
    ctx.write_json(
        "report.json",
        &json!({
            "config": ctx.resolved_config(),
            "seed": ctx.seed,
            "estimate": fit.report,
            "phi_coefficients": fit.phi_coeffs,
            "v_coefficients": fit.v_coeffs,
            "errors": errors,
            "loss": { "fitted": fitted, "zero": zero },
        }),
    )?;
    Ok(vec![
        ("grad_phi_rho3".into(), errors.grad_phi_rho3),
        ("grad_phi_rho2".into(), errors.grad_phi_rho2),
        ("grad_v_rho2".into(), errors.grad_v_rho2),
        ("loss_fitted".into(), fitted),
    ])
}

// ---------------------------------------------------------------- diagnose

/// Energy check on a particle density path with `Φ = −(a/2)e^{−|x|²}` and `V = (k/2)|x|²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyParams {
    pub n: usize,
    pub frames: usize,
    pub substeps: usize,
    pub dt: f64,
    pub bandwidth: f64,
    pub points: usize,
    pub interaction_strength: f64,
    pub confinement: f64,
    pub mixture: MixtureSpec,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self {
            n: 400,
            frames: 21,
            substeps: 5,
            dt: 0.01,
            bandwidth: 0.15,
            points: 64,
            interaction_strength: 1.0,
            confinement: 1.0,
            mixture: MixtureSpec::default(),
        }
    }
}

impl EnergyParams {
    fn triple(&self, scale: f64) -> ParameterTriple {
        let (a, k) = (scale * self.interaction_strength, scale * self.confinement);
        ParameterTriple::zero()
            .with_interaction(move |r| a * r * (-r * r).exp(), Some(Arc::new(move |r: f64| -0.5 * a * (-r * r).exp())))
            .with_potential(
                move |x| 0.5 * k * x.iter().map(|v| v * v).sum::<f64>(),
                Some(Arc::new(move |x: &[f64], g: &mut [f64]| {
                    for (gc, xc) in g.iter_mut().zip(x) {
                        *gc = k * xc;
                    }
                })),
            )
    }

    fn run(&self, seed: u64) -> Result<Value, CliError> {
        if self.frames < 2 || self.points < 2 || !(self.bandwidth > 0.0) {
            return Err(CliError::Config("energy check needs frames >= 2, points >= 2 and bandwidth > 0".into()));
        }
        let a = self.interaction_strength;
        let sys = GradientSystem {
            interaction: Potential::radial(move |r| -0.5 * a * (-r * r).exp(), move |r| a * r * (-r * r).exp()),
            external: Potential::quadratic(self.confinement),
        };
        let init = sample_initial(&self.mixture, 1, self.n, DIM, seed)?;
        let data = simulate_ips(&sys, &init, 1, self.n, DIM, self.dt, self.frames, self.substeps)?;
        let path = density_path(&data, 0, self.bandwidth, self.points)?;
        let truth = check_energy_conservation(&path, data.dt, &self.triple(1.0))?;
        let doubled = check_energy_conservation(&path, data.dt, &self.triple(2.0))?;
        let change = (truth.energy_end - truth.energy_start).abs();
        Ok(json!({
            "true": truth,
            "doubled": doubled,
            "ratio_true": truth.conservation_residual.abs() / change,
            "ratio_doubled": doubled.conservation_residual.abs() / change,
        }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseParams {
    pub h: HFitConfig,
    pub phi: PhiFitConfig,
    pub joint: JointParams,
    pub energy: EnergyParams,
    /// Run the particle energy check.
    pub check_energy: bool,
}

impl Default for DiagnoseParams {
    fn default() -> Self {
        Self {
            h: HFitConfig::default(),
            phi: PhiFitConfig::default(),
            joint: JointParams {
                m: 4,
                n: 20,
                l: 10,
                ..JointParams::default()
            },
            energy: EnergyParams::default(),
            check_energy: true,
        }
    }
}

fn diagnose(ctx: &SeedRun<'_>) -> Result<Metrics, CliError> {
    let p: DiagnoseParams = from_params(ctx.params)?;
    let seed = ctx.seed;

    let hcfg = HFitConfig { seed, ..p.h.clone() };
    let hdata = generate_h_data(&hcfg)?;
    let h_weak = assemble_h_weak(&hdata, &hcfg.basis)?.condition_number()?;
    let h_strong = assemble_h_strong(&hdata, &hcfg.basis)?.condition_number()?;
    rho1(&us_of(&hdata))?.normalized().write_csv(File::create(ctx.path("rho1.csv"))?)?;

    let pcfg = PhiFitConfig { seed, ..p.phi.clone() };
    let pdata = generate_phi_data(&pcfg, &RadialKernel::default_truth())?;
    let pus = us_of(&pdata);
    let (pform, radial) = assemble_phi_weak(&pdata, &pcfg)?;
    rho2(&pus)?.normalized().write_csv(File::create(ctx.path("rho2.csv"))?)?;
    rho3(&pus, pcfg.bins())?.write_csv(File::create(ctx.path("rho3.csv"))?)?;
    radial.write_csv(File::create(ctx.path("rho_radial.csv"))?)?;
    let spectrum = spectrum_decay(&build_lgbar(&pus, pcfg.bins())?)?;
    let verdict = if spectrum.decay_index.is_some() { "ill-posed" } else { "well-posed" };
    ctx.write_json("spectrum.json", &json!({ "spectrum": spectrum, "verdict": verdict }))?;

    let jdata = p.joint.simulate(seed)?;
    let full = BasisSet::tensor_poly(DIM, 1, p.joint.v_degree);
    let raw = joint_null_check(&jdata, &full, &BasisSet::tensor_poly(DIM, 1, p.joint.phi_degree))?;
    let sym = joint_null_check(&jdata, &full, &BasisSet::tensor_poly_even(DIM, p.joint.phi_degree))?;
    let (pb, vb) = joint_bases(&p.joint);
    let joint_cond = assemble_joint(&jdata, &pb, &vb)?.condition_number()?;

    let energy = if p.check_energy { Some(p.energy.run(seed)?) } else { None };

    ctx.write_json(
        "report.json",
        &json!({
            "config": ctx.resolved_config(),
            "seed": seed,
            "condition_numbers": {
                "h_weak": h_weak,
                "h_strong": h_strong,
                "phi_weak": pform.condition_number()?,
                "joint": joint_cond,
            },
            "spectrum": { "decay_index": spectrum.decay_index, "min_ratio": spectrum.min_ratio, "verdict": verdict },
            "null_check": { "unsymmetrized": raw, "symmetrized": sym },
            "energy": energy,
        }),
    )?;
    let mut metrics = vec![
        ("condition_h".to_string(), h_weak),
        ("spectrum_min_ratio".to_string(), spectrum.min_ratio),
        ("null_ratio".to_string(), raw.ratio.unwrap_or(f64::NAN)),
    ];
    if let Some(e) = &energy {
        metrics.push(("energy_ratio".into(), e["ratio_true"].as_f64().unwrap_or(f64::NAN)));
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_potential_matches_finite_differences() {
        let truth = JointTruth::default();
        let phi = polynomial_potential(&truth.phi, 2).unwrap();
        let x = [0.7, -1.3];
        let mut g = [0.0; 2];
        (phi.grad)(&x, &mut g);
        let r2: f64 = x.iter().map(|v| v * v).sum();
        assert!(((phi.value)(&x) - (0.25 * r2 + 0.02 * r2 * r2)).abs() < 1e-14);
        for c in 0..2 {
            let h = 1e-6;
            let (mut xp, mut xm) = (x, x);
            xp[c] += h;
            xm[c] -= h;
            let fd = ((phi.value)(&xp) - (phi.value)(&xm)) / (2.0 * h);
            assert!((fd - g[c]).abs() < 1e-8, "{fd} vs {}", g[c]);
        }
        assert!(polynomial_potential(&[term(&[1], 1.0)], 2).is_err());
    }
}

use selftest::estimators::*;
use selftest::identifiability::{build_lgbar, rho1, spectrum_decay};
use selftest::particles::{sample_initial, simulate_ips};
use selftest::quadform::QuadForm;
use selftest::{BasisSet, GradientSystem, MixtureSpec, Potential, QuadraticFormF32, RegularizationSpec, SampledField};

#[test]
fn reruns_are_bitwise_deterministic() {
    let cfg = PhiFitConfig {
        dx: 0.05,
        sigma: 2f64.powi(-6),
        seed: 9,
        ..PhiFitConfig::default()
    };
    let a = generate_phi_data(&cfg, &RadialKernel::default_truth()).unwrap();
    let b = generate_phi_data(&cfg, &RadialKernel::default_truth()).unwrap();
    assert_eq!(a[2].1.values, b[2].1.values);
    let fa = fit_phi_radial(&a, &cfg).unwrap();
    let fb = fit_phi_radial(&b, &cfg).unwrap();
    assert_eq!(fa.report.coefficients, fb.report.coefficients);

    let sys = GradientSystem {
        interaction: Potential::quadratic(0.5),
        external: Potential::quadratic(1.0),
    };
    let init = sample_initial(&MixtureSpec::default(), 4, 10, 2, 3).unwrap();
    let e1 = simulate_ips(&sys, &init, 4, 10, 2, 0.01, 6, 1).unwrap();
    let e2 = simulate_ips(&sys, &init, 4, 10, 2, 0.01, 6, 1).unwrap();
    assert_eq!(e1.positions, e2.positions);
}

#[test]
fn different_seeds_give_different_noise() {
    let base = HFitConfig {
        sigma: 0.1,
        ..HFitConfig::default()
    };
    let a = generate_h_data(&HFitConfig { seed: 1, ..base.clone() }).unwrap();
    let b = generate_h_data(&HFitConfig { seed: 2, ..base }).unwrap();
    assert_ne!(a[0].0.values, b[0].0.values);
}

#[test]
fn noiseless_h_data_is_the_analytic_profile() {
    let cfg = HFitConfig::default();
    let data = generate_h_data(&cfg).unwrap();
    for (l, (u, _)) in data.iter().enumerate() {
        let k = std::f64::consts::PI * (l + 1) as f64;
        let grid = u.grid().unwrap();
        for (j, &v) in u.values.iter().enumerate() {
            assert_eq!(v, (k * grid.point(j)).sin());
        }
        assert!((grid.point(0) - 1.0 / cfg.n as f64).abs() < 1e-15);
        assert!((grid.last() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn weak_h_fit_beats_strong_at_fine_mesh() {
    let cfg = HFitConfig {
        n: 800,
        sigma: 0.1,
        seed: 11,
        ..HFitConfig::default()
    };
    let data = generate_h_data(&cfg).unwrap();
    let h2 = |s: f64| cfg.basis.combine(&cfg.truth, s, 2);
    let weak = fit_h_weak(&data, &cfg.basis).unwrap();
    let strong = fit_h_strong(&data, &cfg.basis).unwrap();
    let ew = h_rho1_error(&data, &cfg.basis, &weak.coefficients, &h2).unwrap();
    let es = h_rho1_error(&data, &cfg.basis, &strong.coefficients, &h2).unwrap();
    assert!(ew < es, "weak {ew} strong {es}");
    let us: Vec<SampledField> = data.iter().map(|(u, _)| u.clone()).collect();
    assert!((rho1(&us).unwrap().normalized().mass() - 1.0).abs() < 1e-12);
}

#[test]
fn phi_weak_form_is_consistent_with_noiseless_truth() {
    let cfg = PhiFitConfig {
        dx: 0.02,
        ..PhiFitConfig::default()
    };
    let truth = RadialKernel::default_truth();
    let data = generate_phi_data(&cfg, &truth).unwrap();
    let (form, rho) = assemble_phi_weak(&data, &cfg).unwrap();
    let centers = rho.grid.points();
    let c: Vec<f64> = centers.iter().map(|&r| (truth.phi)(r)).collect();
    let residual: Vec<f64> = form.a.matvec(&c).iter().zip(&form.b).map(|(x, y)| x - y).collect();
    let rel = residual.iter().map(|v| v * v).sum::<f64>().sqrt() / form.b.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(rel < 1e-2, "relative consistency residual {rel}");
}

#[test]
fn noiseless_kernel_operator_is_ill_posed() {
    let cfg = PhiFitConfig {
        dx: 0.05,
        ..PhiFitConfig::default()
    };
    let us: Vec<SampledField> = generate_phi_data(&cfg, &RadialKernel::default_truth())
        .unwrap()
        .into_iter()
        .map(|(u, _)| u)
        .collect();
    let spec = spectrum_decay(&build_lgbar(&us, cfg.bins()).unwrap()).unwrap();
    assert!(spec.decays_within(50), "{spec:?}");
    assert!(spec.eigenvalues.windows(2).all(|p| p[0] >= p[1]));
}

#[test]
fn regularized_solve_reports_lambda() {
    let cfg = PhiFitConfig {
        dx: 0.05,
        sigma: 2f64.powi(-8),
        ..PhiFitConfig::default()
    };
    let data = generate_phi_data(&cfg, &RadialKernel::default_truth()).unwrap();
    let fit = fit_phi_radial(&data, &cfg).unwrap();
    let lambda = fit.report.lambda_used.unwrap();
    assert!(lambda > 0.0);
    let json = serde_json::to_value(&fit.report).unwrap();
    for key in ["coefficients", "lambda_used", "condition_number", "residual", "spectrum"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn v_fit_recovers_quadratic_potential_up_to_constant() {
    let g = selftest::Grid1D::new(-6.0, 0.01, 1201).unwrap();
    let truth = |x: f64| 0.5 * x * x;
    let pairs: Vec<(SampledField, SampledField)> = [0.8, 1.2]
        .iter()
        .map(|&s| {
            let u = SampledField::from_fn(g, |x| (-(x * x) / (2.0 * s * s)).exp()).unwrap();
            // f = −∂x(u ∂x V)
            let f = SampledField::from_fn(g, |x| {
                let e = (-(x * x) / (2.0 * s * s)).exp();
                -(e - x * x / (s * s) * e)
            })
            .unwrap();
            (u, f)
        })
        .collect();
    let v = fit_v(&pairs).unwrap();
    let us: Vec<SampledField> = pairs.iter().map(|(u, _)| u.clone()).collect();
    let rho = selftest::identifiability::rho2(&us).unwrap();
    let err = v_rho2_error(&v, &truth, &rho).unwrap();
    assert!(err < 2e-2, "relative error {err}");
}

#[test]
fn single_precision_quadratic_form_minimizes() {
    let a = selftest::linalg::Matrix::<f32>::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
    let form: QuadraticFormF32 = QuadForm::new(a, vec![1.0, -1.0], 0.0).unwrap();
    let theta = form.minimize().unwrap();
    let g = form.gradient(&theta).unwrap();
    assert!(g.iter().all(|v| v.abs() < 1e-5), "{g:?}");
    let report = form.solve(&selftest::quadform::RegularizationSpec::none()).unwrap();
    assert_eq!(report.coefficients.len(), 2);
    let _: RegularizationSpec = RegularizationSpec::none();
    let _ = BasisSet::default_power();
}

//! Quadratic losses `E(θ) = θᵀAθ − 2θᵀb + c₀` and their solvers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm2, Cholesky, Matrix, SymmetricEigen};
use crate::scalar::Real;

/// Largest condition number accepted by [`QuadForm::minimize`].
pub const CONDITION_CAP: f64 = 1e12;

/// A quadratic loss over a linear parametrization.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuadForm<T> {
    pub a: Matrix<T>,
    pub b: Vec<T>,
    pub c0: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegularizationKind {
    None,
    TikhonovIdentity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaSelection<T> {
    Fixed(T),
    LCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizationSpec<T> {
    pub kind: RegularizationKind,
    pub lambda_grid: Vec<T>,
    pub selection: LambdaSelection<T>,
}

impl<T: Real> RegularizationSpec<T> {
    pub fn none() -> Self {
        Self {
            kind: RegularizationKind::None,
            lambda_grid: Vec::new(),
            selection: LambdaSelection::Fixed(T::zero()),
        }
    }

    pub fn fixed(lambda: T) -> Self {
        Self {
            kind: RegularizationKind::TikhonovIdentity,
            lambda_grid: vec![lambda],
            selection: LambdaSelection::Fixed(lambda),
        }
    }

    pub fn l_curve(lambda_grid: Vec<T>) -> Self {
        Self {
            kind: RegularizationKind::TikhonovIdentity,
            lambda_grid,
            selection: LambdaSelection::LCurve,
        }
    }

    /// `count` log-spaced values from `lo` to `hi`, inclusive.
    pub fn log_grid(lo: T, hi: T, count: usize) -> Vec<T> {
        if count == 1 {
            return vec![lo];
        }
        let (llo, lhi) = (lo.ln(), hi.ln());
        let steps = T::from_usize_lossy(count - 1);
        (0..count)
            .map(|i| (llo + (lhi - llo) * T::from_usize_lossy(i) / steps).exp())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if let LambdaSelection::LCurve = self.selection {
            if self.lambda_grid.is_empty() {
                return Err(Error::InvalidParameter("lambda grid is empty".into()));
            }
            if self.lambda_grid.iter().any(|&l| !(l > T::zero())) {
                return Err(Error::InvalidParameter("lambda grid must be positive".into()));
            }
            if self.lambda_grid.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::InvalidParameter(
                    "lambda grid must be strictly increasing".into(),
                ));
            }
        }
        if let (RegularizationKind::TikhonovIdentity, LambdaSelection::Fixed(l)) =
            (self.kind, self.selection)
        {
            if !(l > T::zero()) {
                return Err(Error::InvalidParameter(format!("lambda must be positive, got {l}")));
            }
        }
        Ok(())
    }
}

/// Solver output written to disk for every fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport<T> {
    pub coefficients: Vec<T>,
    pub lambda_used: Option<T>,
    pub condition_number: T,
    pub residual: T,
    pub spectrum: Vec<T>,
}

/// Points of the L-curve together with the selected corner.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LCurve<T> {
    pub lambdas: Vec<T>,
    pub log_residual: Vec<T>,
    pub log_norm: Vec<T>,
    pub curvature: Vec<T>,
    pub corner_index: usize,
}

impl<T: Real> QuadForm<T> {
    /// Builds the form, symmetrizing `a`.
    pub fn new(mut a: Matrix<T>, b: Vec<T>, c0: T) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::DimensionMismatch {
                expected: a.rows(),
                found: a.cols(),
            });
        }
        if a.rows() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: a.rows(),
                found: b.len(),
            });
        }
        a.symmetrize();
        Ok(Self { a, b, c0 })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            a: Matrix::zeros(n, n),
            b: vec![T::zero(); n],
            c0: T::zero(),
        }
    }

    pub fn n(&self) -> usize {
        self.b.len()
    }

    /// θᵀAθ − 2θᵀb + c₀.
    pub fn evaluate(&self, theta: &[T]) -> Result<T> {
        self.check_len(theta)?;
        let two = T::lit(2.0);
        Ok(dot(theta, &self.a.matvec(theta)) - two * dot(theta, &self.b) + self.c0)
    }

    /// Gradient `2(Aθ − b)`.
    pub fn gradient(&self, theta: &[T]) -> Result<Vec<T>> {
        self.check_len(theta)?;
        let two = T::lit(2.0);
        Ok(self
            .a
            .matvec(theta)
            .iter()
            .zip(&self.b)
            .map(|(&ax, &bi)| two * (ax - bi))
            .collect())
    }

    /// Eigenvalues of `A`, descending.
    pub fn spectrum(&self) -> Result<Vec<T>> {
        Ok(SymmetricEigen::new(&self.a)?.values)
    }

    pub fn condition_number(&self) -> Result<T> {
        Ok(condition_from_spectrum(&self.spectrum()?))
    }

    /// Unregularized stationary point `A⁻¹b`; the minimizer when `A` is positive definite.
    pub fn minimize(&self) -> Result<Vec<T>> {
        let cond = self.condition_number()?;
        let cap = T::lit(CONDITION_CAP);
        if !(cond <= cap) {
            return Err(Error::IllConditioned {
                condition: cond.to_f64().unwrap_or(f64::INFINITY),
                cap: CONDITION_CAP,
            });
        }
        match Cholesky::factor(&self.a) {
            Some(ch) => Ok(refine(&self.a, &self.b, ch.solve(&self.b), |r| ch.solve(r))),
            None => {
                let eig = SymmetricEigen::new(&self.a)?;
                Ok(eigen_solve(&eig, &self.b, T::zero()))
            }
        }
    }

    /// Solves `(A + λI)θ = b`.
    pub fn minimize_tikhonov(&self, lambda: T) -> Result<Vec<T>> {
        if !(lambda > T::zero()) {
            return Err(Error::InvalidParameter(format!(
                "Tikhonov parameter must be positive, got {lambda}"
            )));
        }
        let mut shifted = self.a.clone();
        shifted.add_diagonal(lambda);
        match Cholesky::factor(&shifted) {
            Some(ch) => Ok(refine(&shifted, &self.b, ch.solve(&self.b), |r| ch.solve(r))),
            None => {
                let eig = SymmetricEigen::new(&self.a)?;
                Ok(eigen_solve(&eig, &self.b, lambda))
            }
        }
    }

    /// Picks λ at the corner of the L-curve.
    pub fn select_lambda_lcurve(&self, spec: &RegularizationSpec<T>) -> Result<(T, usize)> {
        let curve = self.l_curve(spec)?;
        Ok((curve.lambdas[curve.corner_index], curve.corner_index))
    }

    /// Traces the L-curve over `spec.lambda_grid`.
    ///
    /// The residual axis is the data misfit `‖G θ_λ − P y‖` in the factorized form `A = GᵀG`,
    /// `b = Gᵀy`, computed from the spectrum of `A` without forming `G`.
    pub fn l_curve(&self, spec: &RegularizationSpec<T>) -> Result<LCurve<T>> {
        if spec.selection != LambdaSelection::LCurve {
            return Err(Error::InvalidParameter("selection is not l-curve".into()));
        }
        spec.validate()?;
        let grid = &spec.lambda_grid;
        if grid.len() < 3 {
            return Err(Error::TooFewPoints {
                needed: 3,
                found: grid.len(),
            });
        }
        let eig = SymmetricEigen::new(&self.a)?;
        let bt = eig.project(&self.b);
        let smax = eig.values.first().copied().unwrap_or(T::zero()).max(T::zero());
        let floor = T::lit(1e-14) * smax;
        let tiny = T::min_positive_value().sqrt();

        let mut log_residual = Vec::with_capacity(grid.len());
        let mut log_norm = Vec::with_capacity(grid.len());
        for &lambda in grid {
            let mut res2 = T::zero();
            let mut norm2_sum = T::zero();
            for (&s, &bi) in eig.values.iter().zip(&bt) {
                let s = s.max(T::zero());
                let ci = bi / (s + lambda);
                norm2_sum += ci * ci;
                if s > floor && s > T::zero() {
                    let damp = lambda / (s + lambda);
                    res2 += damp * damp * bi * bi / s;
                }
            }
            log_residual.push(res2.sqrt().max(tiny).ln());
            log_norm.push(norm2_sum.sqrt().max(tiny).ln());
        }

        let mut curvature = vec![T::zero(); grid.len()];
        let mut corner_index = 1;
        let mut best = T::neg_infinity();
        for i in 1..grid.len() - 1 {
            let k = menger_curvature(
                (log_residual[i - 1], log_norm[i - 1]),
                (log_residual[i], log_norm[i]),
                (log_residual[i + 1], log_norm[i + 1]),
            );
            curvature[i] = k;
            if k > best {
                best = k;
                corner_index = i;
            }
        }
        Ok(LCurve {
            lambdas: grid.clone(),
            log_residual,
            log_norm,
            curvature,
            corner_index,
        })
    }

    /// Minimizes according to `spec` and packages the result.
    pub fn solve(&self, spec: &RegularizationSpec<T>) -> Result<EstimateReport<T>> {
        spec.validate()?;
        let (coefficients, lambda_used) = match (spec.kind, spec.selection) {
            (RegularizationKind::None, _) => (self.minimize()?, None),
            (RegularizationKind::TikhonovIdentity, LambdaSelection::Fixed(l)) => {
                (self.minimize_tikhonov(l)?, Some(l))
            }
            (RegularizationKind::TikhonovIdentity, LambdaSelection::LCurve) => {
                let (l, _) = self.select_lambda_lcurve(spec)?;
                (self.minimize_tikhonov(l)?, Some(l))
            }
        };
        self.report(coefficients, lambda_used)
    }

    pub fn report(&self, coefficients: Vec<T>, lambda_used: Option<T>) -> Result<EstimateReport<T>> {
        let spectrum = self.spectrum()?;
        let residual = self.evaluate(&coefficients)?;
        if !residual.is_finite() || coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("estimated coefficients".into()));
        }
        Ok(EstimateReport {
            coefficients,
            lambda_used,
            condition_number: condition_from_spectrum(&spectrum),
            residual,
            spectrum,
        })
    }

    /// Accumulates `other` into `self` (sums of per-sample losses).
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_len(&other.b)?;
        self.a.add_assign(&other.a);
        for (x, &y) in self.b.iter_mut().zip(&other.b) {
            *x += y;
        }
        self.c0 += other.c0;
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        self.a.scale(s);
        for x in &mut self.b {
            *x *= s;
        }
        self.c0 *= s;
    }

    /// True when the smallest eigenvalue is at least `−1e-8·max(1, λ_max)`.
    pub fn is_psd(&self) -> Result<bool> {
        let spec = self.spectrum()?;
        let (Some(&hi), Some(&lo)) = (spec.first(), spec.last()) else {
            return Ok(true);
        };
        Ok(lo >= -T::lit(1e-8) * hi.max(T::one()))
    }

    fn check_len(&self, theta: &[T]) -> Result<()> {
        if theta.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                found: theta.len(),
            });
        }
        Ok(())
    }
}

/// `max|λ| / min|λ|`, with the smallest magnitude clamped at 1e-300; equals `λ_max/λ_min` for PSD spectra.
pub fn condition_from_spectrum<T: Real>(spectrum: &[T]) -> T {
    if spectrum.is_empty() {
        return T::one();
    }
    let clamp = T::from_f64(1e-300)
        .filter(|v| *v > T::zero())
        .unwrap_or_else(T::min_positive_value);
    let hi = spectrum.iter().fold(T::zero(), |a, v| a.max(v.abs()));
    let lo = spectrum.iter().fold(T::infinity(), |a, v| a.min(v.abs())).max(clamp);
    if hi <= T::zero() {
        return T::one();
    }
    hi / lo
}

/// Signed curvature of the circle through three points; positive for a left turn.
pub fn menger_curvature<T: Real>(p0: (T, T), p1: (T, T), p2: (T, T)) -> T {
    let (ax, ay) = (p1.0 - p0.0, p1.1 - p0.1);
    let (bx, by) = (p2.0 - p1.0, p2.1 - p1.1);
    let (cx, cy) = (p2.0 - p0.0, p2.1 - p0.1);
    let la = ax.hypot(ay);
    let lb = bx.hypot(by);
    let lc = cx.hypot(cy);
    let denom = la * lb * lc;
    if !(denom > T::zero()) || !denom.is_finite() {
        return T::zero();
    }
    T::lit(2.0) * (ax * by - ay * bx) / denom
}

fn eigen_solve<T: Real>(eig: &SymmetricEigen<T>, b: &[T], lambda: T) -> Vec<T> {
    let bt = eig.project(b);
    let smax = eig.values.first().copied().unwrap_or(T::zero()).abs();
    let floor = T::epsilon() * smax;
    let coords: Vec<T> = eig
        .values
        .iter()
        .zip(&bt)
        .map(|(&s, &bi)| {
            let d = s + lambda;
            if d.abs() > floor {
                bi / d
            } else {
                T::zero()
            }
        })
        .collect();
    eig.reconstruct(&coords)
}

/// One step of iterative refinement.
fn refine<T: Real>(a: &Matrix<T>, b: &[T], x: Vec<T>, solve: impl Fn(&[T]) -> Vec<T>) -> Vec<T> {
    let ax = a.matvec(&x);
    let r: Vec<T> = b.iter().zip(&ax).map(|(&bi, &ai)| bi - ai).collect();
    if norm2(&r) == T::zero() {
        return x;
    }
    let dx = solve(&r);
    x.iter().zip(&dx).map(|(&xi, &di)| xi + di).collect()
}

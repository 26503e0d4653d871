//! Uniform grids, sampled fields, Savitzky-Golay differentiation, adaptive quadrature.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Matrix};
use crate::scalar::Real;

/// Points `x0 + j·dx` for `j = 0..n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    pub x0: T,
    pub dx: T,
    pub n: usize,
}

impl<T: Real> Grid<T> {
    pub fn new(x0: T, dx: T, n: usize) -> Result<Self> {
        if !(dx > T::zero()) || !dx.is_finite() {
            return Err(Error::InvalidParameter(format!("grid spacing must be positive, got {dx}")));
        }
        if !x0.is_finite() {
            return Err(Error::NonFinite("grid origin".into()));
        }
        Ok(Self { x0, dx, n })
    }

    /// `n` points spanning `[a, b]` inclusive.
    pub fn spanning(a: T, b: T, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::TooFewPoints { needed: 2, found: n });
        }
        Self::new(a, (b - a) / T::from_usize_lossy(n - 1), n)
    }

    pub fn point(&self, j: usize) -> T {
        self.x0 + self.dx * T::from_usize_lossy(j)
    }

    pub fn points(&self) -> Vec<T> {
        (0..self.n).map(|j| self.point(j)).collect()
    }

    pub fn last(&self) -> T {
        self.point(self.n.saturating_sub(1))
    }

    /// Nearest grid index to `x`, if inside the grid's span.
    pub fn nearest_index(&self, x: T) -> Option<usize> {
        let s = ((x - self.x0) / self.dx).round();
        let j = s.to_i64()?;
        (j >= 0 && (j as usize) < self.n).then_some(j as usize)
    }

    pub fn same_as(&self, other: &Self) -> bool {
        self.n == other.n
            && (self.dx - other.dx).abs() <= T::epsilon() * T::lit(16.0) * self.dx
            && (self.x0 - other.x0).abs() <= T::epsilon() * T::lit(16.0) * (self.dx + self.x0.abs())
    }
}

/// A scalar function sampled on a 1-D grid or a 2-D product grid.
///
/// In 2-D, `values[i * ny + j]` holds the sample at `(x_i, y_j)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field<T> {
    pub grids: Vec<Grid<T>>,
    pub values: Vec<T>,
    /// Derivative along the first axis, when known.
    pub derivative: Option<Vec<T>>,
}

impl<T: Real> Field<T> {
    pub fn new(grid: Grid<T>, values: Vec<T>) -> Result<Self> {
        Self::with_grids(vec![grid], values)
    }

    pub fn with_grids(grids: Vec<Grid<T>>, values: Vec<T>) -> Result<Self> {
        if grids.is_empty() || grids.len() > 2 {
            return Err(Error::UnsupportedDimension(grids.len()));
        }
        let expected: usize = grids.iter().map(|g| g.n).product();
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field values".into()));
        }
        Ok(Self {
            grids,
            values,
            derivative: None,
        })
    }

    pub fn from_fn(grid: Grid<T>, f: impl Fn(T) -> T) -> Result<Self> {
        let values = grid.points().into_iter().map(f).collect();
        Self::new(grid, values)
    }

    pub fn from_fn_2d(gx: Grid<T>, gy: Grid<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        let mut values = Vec::with_capacity(gx.n * gy.n);
        for i in 0..gx.n {
            let x = gx.point(i);
            for j in 0..gy.n {
                values.push(f(x, gy.point(j)));
            }
        }
        Self::with_grids(vec![gx, gy], values)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            grids: self.grids.clone(),
            values: vec![T::zero(); self.values.len()],
            derivative: None,
        }
    }

    pub fn with_derivative(mut self, derivative: Vec<T>) -> Result<Self> {
        if derivative.len() != self.values.len() {
            return Err(Error::DimensionMismatch {
                expected: self.values.len(),
                found: derivative.len(),
            });
        }
        if derivative.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field derivative".into()));
        }
        self.derivative = Some(derivative);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.grids.len()
    }

    /// The 1-D grid; errors on 2-D fields.
    pub fn grid(&self) -> Result<&Grid<T>> {
        match self.grids.as_slice() {
            [g] => Ok(g),
            _ => Err(Error::UnsupportedDimension(self.grids.len())),
        }
    }

    pub fn cell_volume(&self) -> T {
        self.grids.iter().fold(T::one(), |acc, g| acc * g.dx)
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.grids.len() == other.grids.len()
            && self.grids.iter().zip(&other.grids).all(|(a, b)| a.same_as(b))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            grids: self.grids.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
            derivative: None,
        }
    }

    /// Writes `x[,y],value` rows with a header.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        match self.grids.as_slice() {
            [g] => {
                w.write_record(["x", "value"])?;
                for (j, v) in self.values.iter().enumerate() {
                    w.write_record([g.point(j).to_string(), v.to_string()])?;
                }
            }
            [gx, gy] => {
                w.write_record(["x", "y", "value"])?;
                for i in 0..gx.n {
                    for j in 0..gy.n {
                        w.write_record([
                            gx.point(i).to_string(),
                            gy.point(j).to_string(),
                            self.values[i * gy.n + j].to_string(),
                        ])?;
                    }
                }
            }
            _ => return Err(Error::UnsupportedDimension(self.grids.len())),
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format produced by [`Field::write_csv`]; rows must be in grid order.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        let two_d = match headers.len() {
            2 => false,
            3 => true,
            n => return Err(Error::UnsupportedDimension(n.saturating_sub(1))),
        };
        let mut xs: Vec<T> = Vec::new();
        let mut ys: Vec<T> = Vec::new();
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |k: usize| -> Result<T> {
                let raw: f64 = rec[k]
                    .trim()
                    .parse()
                    .map_err(|_| Error::InvalidParameter(format!("bad number '{}'", &rec[k])))?;
                Ok(T::lit(raw))
            };
            xs.push(parse(0)?);
            if two_d {
                ys.push(parse(1)?);
            }
            values.push(parse(headers.len() - 1)?);
        }
        if !two_d {
            let grid = grid_from_samples(&xs)?;
            return Self::new(grid, values);
        }
        let ny = xs.iter().take_while(|&&x| x == xs[0]).count();
        if ny == 0 || !xs.len().is_multiple_of(ny) {
            return Err(Error::GridMismatch);
        }
        let gx = grid_from_samples(&xs.iter().step_by(ny).copied().collect::<Vec<_>>())?;
        let gy = grid_from_samples(&ys[..ny])?;
        Self::with_grids(vec![gx, gy], values)
    }
}

fn grid_from_samples<T: Real>(xs: &[T]) -> Result<Grid<T>> {
    if xs.len() < 2 {
        return Err(Error::TooFewPoints {
            needed: 2,
            found: xs.len(),
        });
    }
    let n = xs.len();
    let dx = (xs[n - 1] - xs[0]) / T::from_usize_lossy(n - 1);
    let tol = dx.abs() * T::lit(1e-6);
    for (j, &x) in xs.iter().enumerate() {
        if (x - (xs[0] + dx * T::from_usize_lossy(j))).abs() > tol {
            return Err(Error::GridMismatch);
        }
    }
    Grid::new(xs[0], dx, n)
}

/// `Σ values · (cell volume)`.
pub fn riemann_sum<T: Real>(field: &Field<T>) -> T {
    field.values.iter().fold(T::zero(), |acc, &v| acc + v) * field.cell_volume()
}

/// Derivative of the sliding least-squares polynomial fit.
pub fn savitzky_golay_derivative<T: Real>(values: &[T], window: usize, degree: usize, dx: T) -> Result<Vec<T>> {
    savitzky_golay(values, window, degree, 1, dx)
}

/// Order-`deriv` derivative of the local degree-`degree` least-squares fit.
///
/// Edge points reuse the first or last full window and evaluate the fit off-centre.
pub fn savitzky_golay<T: Real>(values: &[T], window: usize, degree: usize, deriv: usize, dx: T) -> Result<Vec<T>> {
    if window.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!("window must be odd, got {window}")));
    }
    if degree >= window {
        return Err(Error::InvalidParameter(format!(
            "degree {degree} must be below window {window}"
        )));
    }
    if values.len() < window {
        return Err(Error::TooFewPoints {
            needed: window,
            found: values.len(),
        });
    }
    if !(dx > T::zero()) {
        return Err(Error::InvalidParameter("spacing must be positive".into()));
    }
    let half = window / 2;
    let n = values.len();
    let scale = T::one() / dx.powi(deriv as i32);
    let weights: Vec<Vec<T>> = (0..window)
        .map(|pos| {
            sg_weights(window, degree, deriv, pos as f64 - half as f64)
                .into_iter()
                .map(|w| T::lit(w) * scale)
                .collect()
        })
        .collect();
    let apply = |start: usize, w: &[T]| {
        w.iter()
            .zip(&values[start..start + window])
            .fold(T::zero(), |acc, (&wi, &vi)| acc + wi * vi)
    };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let d = if i < half {
            apply(0, &weights[i])
        } else if i + half >= n {
            apply(n - window, &weights[i + window - n])
        } else {
            apply(i - half, &weights[half])
        };
        out.push(d);
    }
    Ok(out)
}

/// Filter weights giving the `deriv`-th derivative at offset `t` from the window centre, unit spacing.
fn sg_weights(window: usize, degree: usize, deriv: usize, t: f64) -> Vec<f64> {
    let half = (window / 2) as f64;
    let m = degree + 1;
    let offsets: Vec<f64> = (0..window).map(|k| k as f64 - half).collect();
    let vander = Matrix::from_fn(window, m, |k, p| offsets[k].powi(p as i32));
    let normal = vander.gram();
    let ch = Cholesky::factor(&normal).expect("Vandermonde normal matrix is positive definite");
    // d^deriv/dt^deriv of t^p at t
    let basis_deriv: Vec<f64> = (0..m)
        .map(|p| {
            if p < deriv {
                0.0
            } else {
                let falling: f64 = (0..deriv).map(|q| (p - q) as f64).product();
                falling * t.powi((p - deriv) as i32)
            }
        })
        .collect();
    let z = ch.solve(&basis_deriv);
    (0..window)
        .map(|k| (0..m).map(|p| vander[(k, p)] * z[p]).sum())
        .collect()
}

const KRONROD_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const KRONROD_WEIGHTS: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// Gauss weights for the odd-indexed Kronrod nodes (1, 3, 5) and the centre.
const GAUSS_WEIGHTS: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Maximum bisection depth of [`adaptive_quadrature`].
pub const MAX_QUADRATURE_DEPTH: usize = 50;

struct Panel<T> {
    a: T,
    b: T,
    estimate: T,
    error: T,
    depth: usize,
}

impl<T: Real> PartialEq for Panel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl<T: Real> Eq for Panel<T> {}
impl<T: Real> PartialOrd for Panel<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T: Real> Ord for Panel<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.partial_cmp(&other.error).unwrap_or(Ordering::Equal)
    }
}

fn gauss_kronrod<T: Real>(f: &impl Fn(T) -> T, a: T, b: T) -> (T, T) {
    let half = (b - a) * T::lit(0.5);
    let mid = (a + b) * T::lit(0.5);
    let fc = f(mid);
    let mut kronrod = fc * T::lit(KRONROD_WEIGHTS[7]);
    let mut gauss = fc * T::lit(GAUSS_WEIGHTS[3]);
    for k in 0..7 {
        let dxk = half * T::lit(KRONROD_NODES[k]);
        let pair = f(mid - dxk) + f(mid + dxk);
        kronrod += pair * T::lit(KRONROD_WEIGHTS[k]);
        if k % 2 == 1 {
            gauss += pair * T::lit(GAUSS_WEIGHTS[k / 2]);
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

/// Globally adaptive 15-point Kronrod / 7-point Gauss quadrature of `f` over `[a, b]`.
///
/// The panel with the largest error estimate is bisected until the summed estimate falls below `tol`.
pub fn adaptive_quadrature<T: Real>(f: impl Fn(T) -> T, a: T, b: T, tol: T) -> Result<T> {
    if !(a < b) {
        if a == b {
            return Ok(T::zero());
        }
        return Err(Error::InvalidParameter("quadrature requires a < b".into()));
    }
    if !(tol > T::zero()) {
        return Err(Error::InvalidParameter("quadrature tolerance must be positive".into()));
    }
    let (estimate, error) = gauss_kronrod(&f, a, b);
    let mut heap = BinaryHeap::new();
    heap.push(Panel {
        a,
        b,
        estimate,
        error,
        depth: 0,
    });
    let mut total = estimate;
    let mut total_error = error;
    loop {
        if !total.is_finite() {
            return Err(Error::NonFinite("quadrature integrand".into()));
        }
        // Allow for rounding in the running sums.
        let floor = T::epsilon() * T::lit(50.0) * total.abs();
        if total_error <= tol.max(floor) {
            // Re-sum to avoid drift in the running totals.
            return Ok(heap.iter().fold(T::zero(), |acc, p| acc + p.estimate));
        }
        let worst = heap.pop().expect("heap is never empty");
        if worst.depth >= MAX_QUADRATURE_DEPTH {
            let estimate = heap.iter().fold(worst.estimate, |acc, p| acc + p.estimate);
            return Err(Error::QuadratureDepth {
                estimate: estimate.to_f64().unwrap_or(f64::NAN),
                error: total_error.to_f64().unwrap_or(f64::NAN),
            });
        }
        let mid = (worst.a + worst.b) * T::lit(0.5);
        let (el, errl) = gauss_kronrod(&f, worst.a, mid);
        let (er, errr) = gauss_kronrod(&f, mid, worst.b);
        total += el + er - worst.estimate;
        total_error += errl + errr - worst.error;
        if total_error < T::zero() {
            total_error = heap.iter().fold(errl + errr, |acc, p| acc + p.error);
        }
        for (pa, pb, e, err) in [(worst.a, mid, el, errl), (mid, worst.b, er, errr)] {
            heap.push(Panel {
                a: pa,
                b: pb,
                estimate: e,
                error: err,
                depth: worst.depth + 1,
            });
        }
    }
}

/// Adaptive quadrature over `[a, b]` split at interior `breaks` (e.g. known kinks or jumps).
pub fn adaptive_quadrature_with_breaks<T: Real>(f: impl Fn(T) -> T, a: T, b: T, breaks: &[T], tol: T) -> Result<T> {
    let mut cuts = vec![a];
    let mut inner: Vec<T> = breaks.iter().copied().filter(|&c| c > a && c < b).collect();
    inner.sort_by(|x, y| x.partial_cmp(y).unwrap_or(Ordering::Equal));
    cuts.extend(inner);
    cuts.push(b);
    let share = tol / T::from_usize_lossy(cuts.len() - 1);
    let mut total = T::zero();
    for w in cuts.windows(2) {
        total += adaptive_quadrature(&f, w[0], w[1], share)?;
    }
    Ok(total)
}

/// `δu(x, r) = u(x − r) − u(x + r)` with `r` snapped to the nearest grid multiple and `u = 0` off-grid.
pub fn radial_convolution<T: Real>(u: &Field<T>, r: T) -> Result<Field<T>> {
    let grid = u.grid()?;
    if !(r >= T::zero()) {
        return Err(Error::InvalidParameter(format!("shift must be nonnegative, got {r}")));
    }
    let steps = (r / grid.dx).round().to_usize().unwrap_or(usize::MAX);
    Field::new(*grid, shift_difference(&u.values, steps))
}

/// `v[j − s] − v[j + s]`, zero outside the array.
pub fn shift_difference<T: Real>(values: &[T], s: usize) -> Vec<T> {
    let n = values.len();
    (0..n)
        .map(|j| {
            let left = if j >= s { values[j - s] } else { T::zero() };
            let right = if s < n && j + s < n { values[j + s] } else { T::zero() };
            left - right
        })
        .collect()
}

/// Nearest-rank percentile: the `⌈p/100 · n⌉`-th smallest value, `p` in `(0, 100]`.
pub fn percentile_nearest_rank(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() || !(p > 0.0 && p <= 100.0) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Trapezoid rule over uniformly spaced samples.
pub fn trapezoid<T: Real>(values: &[T], dt: T) -> T {
    match values.len() {
        0 | 1 => T::zero(),
        n => {
            let inner = values[1..n - 1].iter().fold(T::zero(), |acc, &v| acc + v);
            (inner + (values[0] + values[n - 1]) * T::lit(0.5)) * dt
        }
    }
}

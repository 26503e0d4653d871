//! Parameter bases with analytic derivatives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An ordered family of basis functions.
///
/// Scalar kinds act on a density value `s` or a radius `r`; tensor kinds act on points of `ℝ^dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BasisSet {
    /// `e_k(s) = s^k / (k − 1)` for each listed `k ≥ 2`.
    Power { exponents: Vec<u32> },
    /// Indicators of `[edges[l], edges[l+1])`.
    PiecewiseConstant { edges: Vec<f64> },
    /// Even monomials, i.e. `(e(x) + e(−x)) / 2` for every monomial `e`.
    TensorPolyEven { dim: usize, monomials: Vec<Vec<u32>> },
    /// Monomials `x^α`.
    TensorPoly { dim: usize, monomials: Vec<Vec<u32>> },
}

impl BasisSet {
    pub fn power(exponents: Vec<u32>) -> Result<Self> {
        if exponents.iter().any(|&k| k < 2) {
            return Err(Error::InvalidParameter("power basis needs exponents k >= 2".into()));
        }
        Ok(Self::Power { exponents })
    }

    pub fn default_power() -> Self {
        Self::Power {
            exponents: vec![2, 3, 4],
        }
    }

    /// Bins `[(l−1)·dr, l·dr)` for `l = 1..=round(r_max/dr)`.
    pub fn piecewise_constant(r_max: f64, dr: f64) -> Result<Self> {
        if !(dr > 0.0) || !(r_max > 0.0) {
            return Err(Error::InvalidParameter("bin width and r_max must be positive".into()));
        }
        let n = (r_max / dr).round() as usize;
        if n == 0 {
            return Err(Error::InvalidParameter("r_max below one bin".into()));
        }
        Ok(Self::PiecewiseConstant {
            edges: (0..=n).map(|l| l as f64 * dr).collect(),
        })
    }

    /// All monomials with total degree in `[min_degree, max_degree]`, graded order.
    pub fn tensor_poly(dim: usize, min_degree: u32, max_degree: u32) -> Self {
        Self::TensorPoly {
            dim,
            monomials: monomials(dim, min_degree, max_degree, false),
        }
    }

    /// Even-degree monomials with total degree in `[2, max_degree]`.
    pub fn tensor_poly_even(dim: usize, max_degree: u32) -> Self {
        Self::TensorPolyEven {
            dim,
            monomials: monomials(dim, 1, max_degree, true),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Power { exponents } => exponents.len(),
            Self::PiecewiseConstant { edges } => edges.len().saturating_sub(1),
            Self::TensorPolyEven { monomials, .. } | Self::TensorPoly { monomials, .. } => monomials.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Power { .. } => "power",
            Self::PiecewiseConstant { .. } => "piecewise-constant",
            Self::TensorPolyEven { .. } => "tensor-poly-even",
            Self::TensorPoly { .. } => "tensor-poly",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::TensorPolyEven { dim, .. } | Self::TensorPoly { dim, .. } => *dim,
            _ => 1,
        }
    }

    /// Order-`order` derivative of scalar element `k` at `s` (orders 0 to 3).
    pub fn scalar_derivative(&self, k: usize, s: f64, order: u32) -> f64 {
        match self {
            Self::Power { exponents } => {
                let p = exponents[k] as i32;
                let scale = 1.0 / (p - 1) as f64;
                let falling: f64 = (0..order as i32).map(|q| (p - q) as f64).product();
                if (order as i32) > p {
                    0.0
                } else {
                    scale * falling * s.powi(p - order as i32)
                }
            }
            Self::PiecewiseConstant { edges } => {
                if order > 0 {
                    0.0
                } else if s >= edges[k] && s < edges[k + 1] {
                    1.0
                } else {
                    0.0
                }
            }
            Self::TensorPolyEven { dim: 1, .. } | Self::TensorPoly { dim: 1, .. } => {
                let a = self.monomial(k)[0] as i32;
                let falling: f64 = (0..order as i32).map(|q| (a - q) as f64).product();
                if (order as i32) > a {
                    0.0
                } else {
                    falling * s.powi(a - order as i32)
                }
            }
            _ => panic!("scalar derivative requested from a multivariate basis"),
        }
    }

    pub fn value(&self, k: usize, s: f64) -> f64 {
        self.scalar_derivative(k, s, 0)
    }

    pub fn d1(&self, k: usize, s: f64) -> f64 {
        self.scalar_derivative(k, s, 1)
    }

    pub fn d2(&self, k: usize, s: f64) -> f64 {
        self.scalar_derivative(k, s, 2)
    }

    /// `Σ c_k e_k^{(order)}(s)`.
    pub fn combine(&self, coeffs: &[f64], s: f64, order: u32) -> f64 {
        coeffs
            .iter()
            .enumerate()
            .map(|(k, &c)| c * self.scalar_derivative(k, s, order))
            .sum()
    }

    /// Bin midpoints for piecewise-constant bases.
    pub fn midpoints(&self) -> Option<Vec<f64>> {
        match self {
            Self::PiecewiseConstant { edges } => Some(edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()),
            _ => None,
        }
    }

    pub fn monomial(&self, k: usize) -> &[u32] {
        match self {
            Self::TensorPolyEven { monomials, .. } | Self::TensorPoly { monomials, .. } => &monomials[k],
            _ => panic!("monomial requested from a scalar basis"),
        }
    }

    /// Value of tensor element `k` at `x`.
    pub fn value_nd(&self, k: usize, x: &[f64]) -> f64 {
        self.monomial(k)
            .iter()
            .zip(x)
            .map(|(&a, &xi)| xi.powi(a as i32))
            .product()
    }

    /// Gradient of tensor element `k` at `x`, written into `out`.
    pub fn gradient_nd(&self, k: usize, x: &[f64], out: &mut [f64]) {
        let alpha = self.monomial(k);
        for (d, o) in out.iter_mut().enumerate() {
            if alpha[d] == 0 {
                *o = 0.0;
                continue;
            }
            let mut g = alpha[d] as f64 * x[d].powi(alpha[d] as i32 - 1);
            for (e, (&a, &xe)) in alpha.iter().zip(x).enumerate() {
                if e != d {
                    g *= xe.powi(a as i32);
                }
            }
            *o = g;
        }
    }

    /// Whether element `k` is one of the linear monomials `x_d`.
    pub fn is_linear(&self, k: usize) -> Option<usize> {
        let alpha = self.monomial(k);
        (alpha.iter().sum::<u32>() == 1).then(|| alpha.iter().position(|&a| a == 1).unwrap())
    }
}

fn monomials(dim: usize, min_degree: u32, max_degree: u32, even_only: bool) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for degree in min_degree..=max_degree {
        if even_only && degree % 2 == 1 {
            continue;
        }
        let mut current = vec![0u32; dim];
        push_compositions(degree, 0, &mut current, &mut out);
    }
    out
}

fn push_compositions(remaining: u32, slot: usize, current: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if slot + 1 == current.len() {
        current[slot] = remaining;
        out.push(current.clone());
        return;
    }
    if current.is_empty() {
        return;
    }
    for a in (0..=remaining).rev() {
        current[slot] = a;
        push_compositions(remaining - a, slot + 1, current, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_basis_derivatives() {
        let b = BasisSet::default_power();
        let s = 0.7;
        // e_2 = s², e_3 = s³/2, e_4 = s⁴/3
        assert!((b.value(0, s) - s * s).abs() < 1e-15);
        assert!((b.value(1, s) - s.powi(3) / 2.0).abs() < 1e-15);
        assert!((b.value(2, s) - s.powi(4) / 3.0).abs() < 1e-15);
        assert!((b.d1(1, s) - 1.5 * s * s).abs() < 1e-15);
        assert!((b.d2(0, s) - 2.0).abs() < 1e-15);
        assert!((b.d2(1, s) - 3.0 * s).abs() < 1e-15);
        assert!((b.d2(2, s) - 4.0 * s * s).abs() < 1e-15);
        assert!((b.scalar_derivative(2, s, 3) - 8.0 * s).abs() < 1e-14);
        assert!(BasisSet::power(vec![1, 2]).is_err());
    }

    #[test]
    fn piecewise_constant_partitions() {
        let b = BasisSet::piecewise_constant(2.0, 0.01).unwrap();
        assert_eq!(b.len(), 200);
        for &r in &[0.0, 0.005, 0.5, 1.234, 1.999] {
            let hits: f64 = (0..b.len()).map(|k| b.value(k, r)).sum();
            assert_eq!(hits, 1.0, "r = {r}");
        }
        assert_eq!(b.midpoints().unwrap()[0], 0.005);
    }

    #[test]
    fn tensor_bases_have_expected_sizes() {
        // degrees 1..4 in 2-D: 2 + 3 + 4 + 5
        assert_eq!(BasisSet::tensor_poly(2, 1, 4).len(), 14);
        // degrees 2 and 4
        let even = BasisSet::tensor_poly_even(2, 4);
        assert_eq!(even.len(), 8);
        for k in 0..even.len() {
            assert_eq!(even.monomial(k).iter().sum::<u32>() % 2, 0);
        }
    }

    #[test]
    fn tensor_gradient_matches_finite_difference() {
        let b = BasisSet::tensor_poly(2, 1, 4);
        let x = [0.3, -1.1];
        let mut g = [0.0; 2];
        for k in 0..b.len() {
            b.gradient_nd(k, &x, &mut g);
            for d in 0..2 {
                let h = 1e-6;
                let mut xp = x;
                let mut xm = x;
                xp[d] += h;
                xm[d] -= h;
                let fd = (b.value_nd(k, &xp) - b.value_nd(k, &xm)) / (2.0 * h);
                assert!((fd - g[d]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn even_basis_is_symmetric() {
        let b = BasisSet::tensor_poly_even(2, 4);
        let x = [0.4, -0.9];
        let mx = [-0.4, 0.9];
        for k in 0..b.len() {
            assert_eq!(b.value_nd(k, &x), b.value_nd(k, &mx));
        }
    }

    #[test]
    fn serde_round_trip() {
        let b = BasisSet::tensor_poly_even(2, 4);
        let json = serde_json::to_string(&b).unwrap();
        assert!(json.contains("tensor-poly-even"));
        let back: BasisSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, b);
    }
}

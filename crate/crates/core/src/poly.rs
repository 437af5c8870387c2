//! Exact boundary-layer polynomials `P₁, P₂, P₃`.
//!
//! For every `k ≥ 0` they satisfy
//! `P₁' − P₁ = ν^k`, `P₂'' − 2P₂' = −ν^k`, `P₃' − P₃ = P₁'' − 2P₁'`.

use crate::error::{Error, Result};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

/// Dense polynomial with rational coefficients, lowest degree first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatPoly(pub Vec<BigRational>);

impl RatPoly {
    pub fn zero() -> Self {
        RatPoly(vec![])
    }

    pub fn monomial(k: usize) -> Self {
        let mut c = vec![BigRational::zero(); k + 1];
        c[k] = BigRational::one();
        RatPoly(c)
    }

    fn trimmed(mut self) -> Self {
        while self.0.last().is_some_and(|c| c.is_zero()) {
            self.0.pop();
        }
        self
    }

    pub fn derivative(&self) -> Self {
        RatPoly(
            self.0
                .iter()
                .enumerate()
                .skip(1)
                .map(|(j, c)| c * BigRational::from_integer(BigInt::from(j)))
                .collect(),
        )
        .trimmed()
    }

    pub fn add(&self, o: &Self) -> Self {
        let n = self.0.len().max(o.0.len());
        let z = BigRational::zero();
        RatPoly((0..n).map(|i| self.0.get(i).unwrap_or(&z) + o.0.get(i).unwrap_or(&z)).collect()).trimmed()
    }

    pub fn scale(&self, a: &BigRational) -> Self {
        RatPoly(self.0.iter().map(|c| c * a).collect()).trimmed()
    }

    pub fn sub(&self, o: &Self) -> Self {
        self.add(&o.scale(&-BigRational::one()))
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|c| c.to_f64().unwrap_or(f64::NAN)).collect()
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.to_f64().iter().rev().fold(0.0, |acc, c| acc * x + c)
    }
}

fn factorial(n: usize) -> BigInt {
    (1..=n).fold(BigInt::one(), |a, i| a * BigInt::from(i))
}

fn rat(n: BigInt, d: BigInt) -> BigRational {
    BigRational::new(n, d)
}

/// Largest `k` accepted, guarding coefficient growth.
pub const K_MAX: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundaryPolys {
    pub k: usize,
    pub p1: RatPoly,
    pub p2: RatPoly,
    pub p3: RatPoly,
}

/// Closed forms
/// `P₁ = −k! Σ_{j≤k} ν^j/j!`, `P₂ = 2^{−k−2} k! Σ_{1≤j≤k+1} (2ν)^j/j!`,
/// `P₃ = −k! Σ_{j≤k−1} (k−j+1) ν^j/j!`.
pub fn boundary_polynomials(k: usize) -> Result<BoundaryPolys> {
    if k > K_MAX {
        return Err(Error::domain(format!("k = {k} exceeds {K_MAX}")));
    }
    let kf = factorial(k);
    let p1 = RatPoly((0..=k).map(|j| rat(-kf.clone(), factorial(j))).collect()).trimmed();
    let mut p2 = vec![BigRational::zero()];
    for j in 1..=k + 1 {
        // 2^{-k-2} k! 2^j / j!
        let num = kf.clone() * BigInt::from(2).pow(j as u32);
        let den = factorial(j) * BigInt::from(2).pow((k + 2) as u32);
        p2.push(rat(num, den));
    }
    let p3 = RatPoly((0..k).map(|j| rat(-kf.clone() * BigInt::from(k - j + 1), factorial(j))).collect()).trimmed();
    Ok(BoundaryPolys { k, p1, p2: RatPoly(p2).trimmed(), p3 })
}

impl BoundaryPolys {
    /// Residuals of the three defining identities; all zero when exact.
    pub fn identity_defects(&self) -> [RatPoly; 3] {
        let nk = RatPoly::monomial(self.k);
        let d1 = self.p1.derivative().sub(&self.p1).sub(&nk);
        let p2d = self.p2.derivative();
        let d2 = p2d.derivative().sub(&p2d.scale(&BigRational::from_integer(2.into()))).add(&nk);
        let p1d = self.p1.derivative();
        let rhs = p1d.derivative().sub(&p1d.scale(&BigRational::from_integer(2.into())));
        let d3 = self.p3.derivative().sub(&self.p3).sub(&rhs);
        [d1, d2, d3]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_k_values() {
        let b = boundary_polynomials(0).unwrap();
        assert_eq!(b.p1.to_f64(), vec![-1.0]);
        assert_eq!(b.p2.to_f64(), vec![0.0, 0.5]);
        assert!(b.p3.0.is_empty());
        let b = boundary_polynomials(1).unwrap();
        assert_eq!(b.p1.to_f64(), vec![-1.0, -1.0]);
        assert_eq!(b.p3.to_f64(), vec![-2.0]);
    }

    #[test]
    fn identities_exact() {
        for k in 0..=10 {
            let b = boundary_polynomials(k).unwrap();
            for d in b.identity_defects() {
                assert!(d.0.is_empty(), "k={k}");
            }
        }
        assert!(boundary_polynomials(33).is_err());
    }
}

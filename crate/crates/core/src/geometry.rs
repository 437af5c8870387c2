//! Circular cone geometry: boundary distance, normal/tangential splitting,
//! the cutoffs χ and η_s, and discrete weighted norms.

use crate::error::{Error, Result};
use crate::quad::QuadratureGrid;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Circular cone `{x : angle(x, e_z) < θ0}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConeSpec {
    pub half_angle: f64,
    pub layer_width: f64,
    pub cap_area: f64,
}

impl ConeSpec {
    /// Cone with the default layer width `0.5·sin(min(θ0, π−θ0))`.
    pub fn new(theta0: f64) -> Result<Self> {
        Self::with_layer(theta0, None)
    }

    pub fn with_layer(theta0: f64, layer: Option<f64>) -> Result<Self> {
        if !(theta0 > 0.0 && theta0 < PI) {
            return Err(Error::domain(format!("half angle {theta0} not in (0, π)")));
        }
        let bound = theta0.min(PI - theta0).sin();
        let dc = layer.unwrap_or(0.5 * bound);
        if !(dc > 0.0 && dc <= 1.0 && dc <= bound) {
            return Err(Error::domain(format!(
                "layer width {dc} must lie in (0, min(1, sin(min(θ0, π−θ0))) = {bound}]"
            )));
        }
        Ok(ConeSpec { half_angle: theta0, layer_width: dc, cap_area: 2.0 * PI * (1.0 - theta0.cos()) })
    }

    pub fn hemisphere() -> Self {
        Self::new(PI / 2.0).unwrap()
    }

    /// `ν/r` as a function of the polar angle.
    pub fn g(&self, theta: f64) -> f64 {
        let d = self.half_angle - theta;
        if d <= PI / 2.0 {
            d.sin()
        } else {
            1.0
        }
    }

    /// `dg/dθ` inside the layer.
    pub fn dg(&self, theta: f64) -> f64 {
        -(self.half_angle - theta).cos()
    }

    pub fn ddg(&self, theta: f64) -> f64 {
        -(self.half_angle - theta).sin()
    }

    /// Smallest polar angle reached by the collar `ν < δ_c r`.
    pub fn collar_start(&self) -> f64 {
        self.half_angle - self.layer_width.asin()
    }

    /// `Δν` in the layer.
    pub fn lap_nu(&self, r: f64, theta: f64) -> f64 {
        -self.half_angle.cos() / (r * theta.sin())
    }

    pub fn distance_to_boundary(&self, p: &SpatialPoint) -> Result<f64> {
        if p.theta > self.half_angle + 1e-14 || p.r < 0.0 {
            return Err(Error::domain("point outside the closed cone"));
        }
        Ok(p.r * self.g(p.theta.min(self.half_angle)))
    }

    /// `∇ν` in Cartesian coordinates, defined on the layer.
    pub fn grad_nu(&self, p: &SpatialPoint) -> [f64; 3] {
        let (er, et, _) = spherical_basis(p.theta, p.phi);
        let (g, dg) = (self.g(p.theta), self.dg(p.theta));
        [0, 1, 2].map(|i| g * er[i] + dg * et[i])
    }

    pub fn in_layer(&self, p: &SpatialPoint) -> bool {
        p.theta <= self.half_angle && self.g(p.theta) < self.layer_width
    }

    /// `(v·∇ν, v − (v·∇ν)∇ν)`.
    pub fn split_tangential(&self, p: &SpatialPoint, v: [f64; 3]) -> Result<(f64, [f64; 3])> {
        if !self.in_layer(p) {
            return Err(Error::domain("point outside the boundary layer ν < δ_c·|x|"));
        }
        let n = self.grad_nu(p);
        let vn: f64 = (0..3).map(|i| v[i] * n[i]).sum();
        Ok((vn, [0, 1, 2].map(|i| v[i] - vn * n[i])))
    }

    /// χ(t): 1 on `[0, δ_c/2]`, 0 on `[δ_c, ∞)`.
    pub fn chi(&self, t: f64) -> f64 {
        1.0 - smoothstep(2.0 * t / self.layer_width - 1.0)
    }

    pub fn dchi(&self, t: f64) -> f64 {
        -smoothstep_d1(2.0 * t / self.layer_width - 1.0) * 2.0 / self.layer_width
    }

    pub fn ddchi(&self, t: f64) -> f64 {
        let k = 2.0 / self.layer_width;
        -smoothstep_d2(2.0 * t / self.layer_width - 1.0) * k * k
    }
}

/// Quintic smoothstep on `[0, 1]`, clamped outside.
pub fn smoothstep(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        x * x * x * (10.0 + x * (-15.0 + 6.0 * x))
    }
}

pub fn smoothstep_d1(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        0.0
    } else {
        30.0 * x * x * (1.0 - x) * (1.0 - x)
    }
}

pub fn smoothstep_d2(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        0.0
    } else {
        60.0 * x * (1.0 - x) * (1.0 - 2.0 * x)
    }
}

/// η(x): 0 for `x < 1/2`, 1 for `x > 1`.
pub fn eta(x: f64) -> f64 {
    smoothstep(2.0 * x - 1.0)
}

pub fn deta(x: f64) -> f64 {
    2.0 * smoothstep_d1(2.0 * x - 1.0)
}

pub fn ddeta(x: f64) -> f64 {
    4.0 * smoothstep_d2(2.0 * x - 1.0)
}

/// `η_s(x) = η(|s| r²)`.
pub fn cutoff_eta_s(s: Complex64, r: f64) -> f64 {
    eta(s.norm() * r * r)
}

/// Point of the cone in spherical coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialPoint {
    pub r: f64,
    pub theta: f64,
    pub phi: f64,
}

impl SpatialPoint {
    pub fn new(r: f64, theta: f64, phi: f64) -> Self {
        SpatialPoint { r, theta, phi }
    }

    pub fn cartesian(&self) -> [f64; 3] {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        [self.r * st * cp, self.r * st * sp, self.r * ct]
    }

    pub fn from_cartesian(x: [f64; 3]) -> Self {
        let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
        let theta = if r > 0.0 { (x[2] / r).clamp(-1.0, 1.0).acos() } else { 0.0 };
        let mut phi = x[1].atan2(x[0]);
        if phi < 0.0 {
            phi += 2.0 * PI;
        }
        SpatialPoint { r, theta, phi }
    }

    pub fn scaled(&self, k: f64) -> Self {
        SpatialPoint { r: self.r * k, ..*self }
    }
}

/// Unit vectors `(e_r, e_θ, e_φ)` in Cartesian components.
pub fn spherical_basis(theta: f64, phi: f64) -> ([f64; 3], [f64; 3], [f64; 3]) {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    ([st * cp, st * sp, ct], [ct * cp, ct * sp, -st], [-sp, cp, 0.0])
}

/// Which weighted space a norm refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpaceTag {
    V,
    E,
    X,
    /// Only the surrogate of the dual part of the X-norm.
    DualX,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedNormSpec {
    pub tag: SpaceTag,
    pub order: u32,
    pub beta: f64,
}

impl WeightedNormSpec {
    pub fn new(tag: SpaceTag, order: u32, beta: f64) -> Result<Self> {
        if order > 2 {
            return Err(Error::domain("weighted norms are implemented for l ∈ {0,1,2}"));
        }
        if tag == SpaceTag::X && order != 1 {
            return Err(Error::domain("the X space is defined for l = 1 only"));
        }
        Ok(WeightedNormSpec { tag, order, beta })
    }
}

/// Sums of squared moduli of all derivatives of order 0, 1, 2 at a point.
fn derivative_energies<F>(field: &F, x: [f64; 3], upto: u32) -> Result<[f64; 3]>
where
    F: Fn([f64; 3]) -> Vec<Complex64>,
{
    let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
    let h = 1e-3 * r;
    let f0 = field(x);
    if f0.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::data("non-finite field sample"));
    }
    let mut e = [f0.iter().map(|z| z.norm_sqr()).sum(), 0.0, 0.0];
    if upto == 0 {
        return Ok(e);
    }
    let shift = |d: &[(usize, f64)]| {
        let mut y = x;
        for &(i, s) in d {
            y[i] += s;
        }
        field(y)
    };
    // fourth-order central differences
    let d1 = |i: usize| -> Vec<Complex64> {
        let a = shift(&[(i, 2.0 * h)]);
        let b = shift(&[(i, h)]);
        let c = shift(&[(i, -h)]);
        let d = shift(&[(i, -2.0 * h)]);
        (0..f0.len()).map(|k| (-a[k] + 8.0 * b[k] - 8.0 * c[k] + d[k]) / (12.0 * h)).collect()
    };
    for i in 0..3 {
        e[1] += d1(i).iter().map(|z| z.norm_sqr()).sum::<f64>();
    }
    if upto < 2 {
        return Ok(e);
    }
    for i in 0..3 {
        for j in i..3 {
            let v: Vec<Complex64> = if i == j {
                let a = shift(&[(i, 2.0 * h)]);
                let b = shift(&[(i, h)]);
                let c = shift(&[(i, -h)]);
                let d = shift(&[(i, -2.0 * h)]);
                (0..f0.len())
                    .map(|k| (-a[k] + 16.0 * b[k] - 30.0 * f0[k] + 16.0 * c[k] - d[k]) / (12.0 * h * h))
                    .collect()
            } else {
                let pp = shift(&[(i, h), (j, h)]);
                let pm = shift(&[(i, h), (j, -h)]);
                let mp = shift(&[(i, -h), (j, h)]);
                let mm = shift(&[(i, -h), (j, -h)]);
                (0..f0.len()).map(|k| (pp[k] - pm[k] - mp[k] + mm[k]) / (4.0 * h * h)).collect()
            };
            e[2] += v.iter().map(|z| z.norm_sqr()).sum::<f64>();
        }
    }
    Ok(e)
}

/// Discrete weighted norm of a (possibly vector-valued) complex field.
///
/// V: `Σ_{|α|≤l} ∫ r^{2(β−l+|α|)} |∂^α u|²`; E adds `r^{2β}` to every weight;
/// X is the V_β^1 part plus the `V_{β+1}^0` surrogate of the dual part.
pub fn weighted_norm<F>(spec: &WeightedNormSpec, grid: &QuadratureGrid, field: F) -> Result<f64>
where
    F: Fn([f64; 3]) -> Vec<Complex64>,
{
    let l = spec.order as i32;
    let b = spec.beta;
    let upto = match spec.tag {
        SpaceTag::DualX => 0,
        _ => spec.order,
    };
    let mut err = None;
    let total = grid.integrate(|r, t, p| {
        let x = SpatialPoint::new(r, t, p).cartesian();
        let e = match derivative_energies(&field, x, upto) {
            Ok(e) => e,
            Err(e) => {
                err = Some(e);
                return 0.0;
            }
        };
        let mut s = 0.0;
        match spec.tag {
            SpaceTag::V | SpaceTag::E | SpaceTag::X => {
                let (lv, bv) = if spec.tag == SpaceTag::X { (1, b) } else { (l, b) };
                for (a, ea) in e.iter().enumerate().take(lv as usize + 1) {
                    let mut w = r.powf(2.0 * (bv - lv as f64 + a as f64));
                    if spec.tag == SpaceTag::E {
                        w += r.powf(2.0 * bv);
                    }
                    s += w * ea;
                }
                if spec.tag == SpaceTag::X {
                    s += r.powf(2.0 * (b + 1.0)) * e[0];
                }
            }
            SpaceTag::DualX => s += r.powf(2.0 * (b + 1.0)) * e[0],
        }
        s
    });
    if let Some(e) = err {
        return Err(e);
    }
    Ok(total.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distance_examples() {
        let h = ConeSpec::hemisphere();
        assert!((h.distance_to_boundary(&SpatialPoint::new(1.0, 0.0, 0.0)).unwrap() - 1.0).abs() < 1e-15);
        let c = ConeSpec::new(PI / 3.0).unwrap();
        let p = SpatialPoint::new(2.0, PI / 6.0, 0.3);
        let nu = c.distance_to_boundary(&p).unwrap();
        assert!((nu - 1.0).abs() < 1e-14);
        // brute force over the boundary cone
        let x = p.cartesian();
        let mut best = f64::INFINITY;
        for i in 0..2000 {
            for j in 0..360 {
                let q = SpatialPoint::new(4.0 * i as f64 / 2000.0, PI / 3.0, 2.0 * PI * j as f64 / 360.0).cartesian();
                let d = ((0..3).map(|k| (x[k] - q[k]).powi(2)).sum::<f64>()).sqrt();
                best = best.min(d);
            }
        }
        assert!((best - nu).abs() < 2e-3);
        assert!(c.distance_to_boundary(&SpatialPoint::new(1.0, 1.2, 0.0)).is_err());
    }

    #[test]
    fn halfspace_split() {
        let h = ConeSpec::hemisphere();
        let p = SpatialPoint::from_cartesian([1.0, 0.0, 0.1]);
        let (vn, vt) = h.split_tangential(&p, [0.0, 0.0, 1.0]).unwrap();
        assert!((vn - 1.0).abs() < 1e-14 && vt.iter().all(|v| v.abs() < 1e-14));
        assert!(h.split_tangential(&SpatialPoint::new(1.0, 0.1, 0.0), [1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn cutoffs() {
        let s = Complex64::new(0.0, 2.0);
        assert_eq!(cutoff_eta_s(s, (0.4f64 / 2.0).sqrt()), 0.0);
        assert_eq!(cutoff_eta_s(s, (1.2f64 / 2.0).sqrt()), 1.0);
        let c = ConeSpec::new(1.0).unwrap();
        let d = c.layer_width;
        assert_eq!(c.chi(0.49 * d), 1.0);
        assert_eq!(c.chi(1.01 * d), 0.0);
        let h = 1e-6;
        for &t in &[0.5 * d, d] {
            assert!((c.chi(t + h) - c.chi(t - h)).abs() < 1e-6);
            assert!((c.dchi(t + h) - c.dchi(t - h)).abs() < 1e-6);
            assert!(((c.chi(t + h) - c.chi(t - h)) / (2.0 * h) - c.dchi(t)).abs() < 1e-6);
        }
    }

    #[test]
    fn radial_norm_example() {
        let h = ConeSpec::hemisphere();
        let grid = QuadratureGrid::cone(h.half_angle, 1.0, 2.0, 2, 12, 8, 8);
        let spec = WeightedNormSpec::new(SpaceTag::V, 0, 0.0).unwrap();
        let n = weighted_norm(&spec, &grid, |x| {
            let r2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
            vec![Complex64::new(1.0 / r2, 0.0)]
        })
        .unwrap();
        assert!((n * n - PI).abs() < 1e-12);
        let zero = weighted_norm(&spec, &grid, |_| vec![Complex64::new(0.0, 0.0)]).unwrap();
        assert_eq!(zero, 0.0);
    }
}

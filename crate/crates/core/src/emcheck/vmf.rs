//! von Mises-Fisher density on the unit sphere `S^{d−1}`.

use std::f64::consts::PI;

use super::EmCheckError;
use crate::numerics::dot;

#[derive(Clone, Debug, PartialEq)]
pub struct VmfParams {
    mean_direction: Vec<f64>,
    concentration: f64,
}

impl VmfParams {
    pub fn new(mean_direction: Vec<f64>, concentration: f64) -> Result<Self, EmCheckError> {
        if mean_direction.len() < 2 {
            return Err(EmCheckError::Param(format!("vMF needs dimension ≥ 2, got {}", mean_direction.len())));
        }
        if !concentration.is_finite() || concentration < 0.0 {
            return Err(EmCheckError::Param(format!("concentration must be ≥ 0, got {concentration}")));
        }
        let norm = dot(&mean_direction, &mean_direction).sqrt();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(EmCheckError::Param(format!("mean direction has norm {norm}")));
        }
        Ok(Self { mean_direction, concentration })
    }

    pub fn dim(&self) -> usize {
        self.mean_direction.len()
    }

    pub fn mean_direction(&self) -> &[f64] {
        &self.mean_direction
    }

    pub fn concentration(&self) -> f64 {
        self.concentration
    }
}

/// `ln Γ(m/2)` for a positive integer `m`, by exact recursion from
/// `Γ(1) = 1` and `Γ(1/2) = √π`.
pub fn ln_gamma_half(m: usize) -> f64 {
    assert!(m > 0, "ln_gamma_half needs m ≥ 1");
    let mut acc = if m.is_multiple_of(2) { 0.0 } else { 0.5 * PI.ln() };
    let mut k = 2 - m % 2;
    while k < m {
        acc += (k as f64 / 2.0).ln();
        k += 2;
    }
    acc
}

/// `ln I_ν(x)` for `ν = (m − 2)/2`, `m ≥ 2`, `x > 0`, by summing the power
/// series in log space.
pub fn ln_bessel_i_half(m: usize, x: f64) -> f64 {
    debug_assert!(m >= 2 && x > 0.0);
    let nu = (m as f64 - 2.0) / 2.0;
    let lh = (x / 2.0).ln();
    let mut term = nu * lh - ln_gamma_half(m);
    let mut max = term;
    let mut terms = vec![term];
    let mut k = 0.0f64;
    loop {
        k += 1.0;
        term += 2.0 * lh - k.ln() - (k + nu).ln();
        terms.push(term);
        max = max.max(term);
        if k > x / 2.0 && term < max - 50.0 {
            break;
        }
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// `ln c_d(κ)` with `c_d(κ) = κ^{d/2−1} / ((2π)^{d/2} I_{d/2−1}(κ))`.
pub fn vmf_log_normalizer(dim: usize, kappa: f64) -> Result<f64, EmCheckError> {
    if dim < 2 {
        return Err(EmCheckError::Param(format!("vMF needs dimension ≥ 2, got {dim}")));
    }
    if !kappa.is_finite() || kappa < 0.0 {
        return Err(EmCheckError::Param(format!("concentration must be ≥ 0, got {kappa}")));
    }
    let half = dim as f64 / 2.0;
    if kappa == 0.0 {
        // Reciprocal surface area 2π^{d/2} / Γ(d/2).
        return Ok(ln_gamma_half(dim) - (2.0f64.ln() + half * PI.ln()));
    }
    if dim == 3 {
        // κ / (4π sinh κ), with ln sinh κ = κ − ln 2 + ln(1 − e^{−2κ}).
        let ln_sinh = if kappa < 1e-4 {
            kappa.ln() + (kappa * kappa / 6.0).ln_1p()
        } else {
            kappa - 2.0f64.ln() + (-(-2.0 * kappa).exp()).ln_1p()
        };
        return Ok(kappa.ln() - (4.0 * PI).ln() - ln_sinh);
    }
    Ok((half - 1.0) * kappa.ln() - half * (2.0 * PI).ln() - ln_bessel_i_half(dim, kappa))
}

pub fn vmf_log_density(x: &[f64], params: &VmfParams) -> Result<f64, EmCheckError> {
    if x.len() != params.dim() {
        return Err(EmCheckError::Param(format!("point has dimension {}, distribution {}", x.len(), params.dim())));
    }
    let norm = dot(x, x).sqrt();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(EmCheckError::Precondition(format!("point has norm {norm}")));
    }
    Ok(vmf_log_normalizer(params.dim(), params.concentration)? + params.concentration * dot(&params.mean_direction, x))
}

/// Integral of the `d = 3` density over the sphere: composite Simpson in
/// the polar angle, trapezoid in the periodic azimuth.
pub fn vmf_sphere_integral_d3(params: &VmfParams, n_theta: usize, n_phi: usize) -> Result<f64, EmCheckError> {
    if params.dim() != 3 {
        return Err(EmCheckError::Param("sphere quadrature is for d = 3".into()));
    }
    let n_theta = n_theta + n_theta % 2;
    let h = PI / n_theta as f64;
    let dphi = 2.0 * PI / n_phi as f64;
    let mut total = 0.0;
    for i in 0..=n_theta {
        let theta = i as f64 * h;
        let w = if i == 0 || i == n_theta {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let mut ring = 0.0;
        for j in 0..n_phi {
            let phi = j as f64 * dphi;
            let x = [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()];
            ring += vmf_log_density(&x, params)?.exp();
        }
        total += w * ring * dphi * theta.sin();
    }
    Ok(total * h / 3.0)
}

//! Smooth asymptotic models of singular potentials, with exact gradients.

use serde::{Deserialize, Serialize};

use crate::error::{MiwError, Result};

const TWO_OVER_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

/// Below this value of μr the erf and tanh models switch to their Taylor series.
const SERIES_CUTOFF: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PotentialModel {
    /// V ≡ 0.
    Free,
    /// V = ω² r² / 2.
    Harmonic { omega: f64 },
    /// V = −1/r.
    CoulombExact,
    /// V = −1/(r + a).
    CoulombCutoff { a: f64 },
    /// V = −c exp(−α² r²) − erf(μ r)/r.
    CoulombErf {
        mu: f64,
        #[serde(default)]
        c: f64,
        #[serde(default)]
        alpha: f64,
    },
    /// V = −tanh(μ r)/r.
    CoulombTanh { mu: f64 },
    /// V = (L/2)[erf(ν(x − a)) − erf(ν(x + a)) + 2], acting on the first coordinate.
    FiniteWellErf { depth: f64, half_width: f64, nu: f64 },
    /// Sharp well of depth L and half width a; reference for `FiniteWellErf`.
    SquareWell { depth: f64, half_width: f64 },
}

impl PotentialModel {
    pub fn coulomb_erf(mu: f64) -> Self {
        PotentialModel::CoulombErf { mu, c: 0.0, alpha: mu }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PotentialModel::Free => "free",
            PotentialModel::Harmonic { .. } => "harmonic",
            PotentialModel::CoulombExact => "coulomb_exact",
            PotentialModel::CoulombCutoff { .. } => "coulomb_cutoff",
            PotentialModel::CoulombErf { .. } => "coulomb_erf",
            PotentialModel::CoulombTanh { .. } => "coulomb_tanh",
            PotentialModel::FiniteWellErf { .. } => "finite_well_erf",
            PotentialModel::SquareWell { .. } => "square_well",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(MiwError::Config(format!("{}: {what}", self.name())));
        match *self {
            PotentialModel::Harmonic { omega } if !(omega > 0.0) => bad("omega must be positive"),
            PotentialModel::CoulombCutoff { a } if !(a > 0.0) => bad("a must be positive"),
            PotentialModel::CoulombErf { mu, c, alpha } => {
                if !(mu > 0.0) {
                    bad("mu must be positive")
                } else if !(c >= 0.0) || !alpha.is_finite() {
                    bad("c must be nonnegative and alpha finite")
                } else {
                    Ok(())
                }
            }
            PotentialModel::CoulombTanh { mu } if !(mu > 0.0) => bad("mu must be positive"),
            PotentialModel::FiniteWellErf { depth, half_width, nu }
                if !(depth > 0.0 && half_width > 0.0 && nu > 0.0) =>
            {
                bad("depth, half_width and nu must be positive")
            }
            PotentialModel::SquareWell { depth, half_width } if !(depth > 0.0 && half_width > 0.0) => {
                bad("depth and half_width must be positive")
            }
            _ => Ok(()),
        }
    }

    /// True when the model is continuously differentiable everywhere.
    pub fn is_smooth(&self) -> bool {
        !matches!(
            self,
            PotentialModel::CoulombExact | PotentialModel::CoulombCutoff { .. } | PotentialModel::SquareWell { .. }
        )
    }

    /// True when the model depends on the point only through |x|.
    pub fn is_radial(&self) -> bool {
        !matches!(self, PotentialModel::FiniteWellErf { .. } | PotentialModel::SquareWell { .. })
    }

    /// True when V(x) = V(−x) coordinatewise on every axis.
    pub fn is_even(&self) -> bool {
        true
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// erf(z)/z and its derivative in z for small z, from the Maclaurin series.
fn erf_over_z_series(z: f64) -> (f64, f64) {
    let z2 = z * z;
    // coef = (−1)^k/k!, p = z^{2k}, q = z^{2k−1}
    let mut coef = 1.0;
    let mut p = 1.0;
    let mut q = z;
    let mut val = 0.0;
    let mut dval = 0.0;
    for k in 0..10 {
        let kf = k as f64;
        val += coef * p / (2.0 * kf + 1.0);
        if k > 0 {
            dval += coef * 2.0 * kf * q / (2.0 * kf + 1.0);
            q *= z2;
        }
        coef /= -(kf + 1.0);
        p *= z2;
    }
    (TWO_OVER_SQRT_PI * val, TWO_OVER_SQRT_PI * dval)
}

/// tanh(z)/z and its derivative in z for small z.
fn tanh_over_z_series(z: f64) -> (f64, f64) {
    const C: [f64; 5] = [1.0, -1.0 / 3.0, 2.0 / 15.0, -17.0 / 315.0, 62.0 / 2835.0];
    let z2 = z * z;
    let mut val = 0.0;
    let mut dval = 0.0;
    let mut p = 1.0;
    let mut q = z;
    for (k, c) in C.iter().enumerate() {
        val += c * p;
        if k > 0 {
            dval += c * 2.0 * k as f64 * q;
            q *= z2;
        }
        p *= z2;
    }
    (val, dval)
}

/// Radial profile V(r) and dV/dr for radial models.
fn radial(model: &PotentialModel, r: f64) -> Result<(f64, f64)> {
    match *model {
        PotentialModel::Free => Ok((0.0, 0.0)),
        PotentialModel::Harmonic { omega } => Ok((0.5 * omega * omega * r * r, omega * omega * r)),
        PotentialModel::CoulombExact => {
            if r == 0.0 {
                Err(MiwError::SingularEvaluation)
            } else {
                Ok((-1.0 / r, 1.0 / (r * r)))
            }
        }
        PotentialModel::CoulombCutoff { a } => Ok((-1.0 / (r + a), 1.0 / ((r + a) * (r + a)))),
        PotentialModel::CoulombErf { mu, c, alpha } => {
            let g = (-alpha * alpha * r * r).exp();
            let (vg, dg) = (-c * g, 2.0 * c * alpha * alpha * r * g);
            let z = mu * r;
            let (ve, de) = if z < SERIES_CUTOFF {
                let (f, df) = erf_over_z_series(z);
                (-mu * f, -mu * mu * df)
            } else {
                let e = libm::erf(z);
                (-e / r, e / (r * r) - TWO_OVER_SQRT_PI * mu * (-z * z).exp() / r)
            };
            Ok((vg + ve, dg + de))
        }
        PotentialModel::CoulombTanh { mu } => {
            let z = mu * r;
            if z < SERIES_CUTOFF {
                let (f, df) = tanh_over_z_series(z);
                Ok((-mu * f, -mu * mu * df))
            } else {
                let t = z.tanh();
                Ok((-t / r, t / (r * r) - mu * (1.0 - t * t) / r))
            }
        }
        _ => unreachable!("non-radial model"),
    }
}

/// Potential value at `x`; at the origin radial models return their analytic limit.
pub fn value(model: &PotentialModel, x: &[f64]) -> Result<f64> {
    match *model {
        PotentialModel::FiniteWellErf { depth, half_width, nu } => {
            let x = x[0];
            Ok(0.5 * depth * (libm::erf(nu * (x - half_width)) - libm::erf(nu * (x + half_width)) + 2.0))
        }
        PotentialModel::SquareWell { depth, half_width } => {
            Ok(if x[0].abs() < half_width { 0.0 } else { depth })
        }
        _ => radial(model, norm(x)).map(|(v, _)| v),
    }
}

/// Exact gradient ∇V at `x`, written into a vector of the same dimension.
pub fn gradient(model: &PotentialModel, x: &[f64]) -> Result<Vec<f64>> {
    let mut g = vec![0.0; x.len()];
    match *model {
        PotentialModel::FiniteWellErf { depth, half_width, nu } => {
            let (xm, xp) = (nu * (x[0] - half_width), nu * (x[0] + half_width));
            g[0] = 0.5 * depth * TWO_OVER_SQRT_PI * nu * ((-xm * xm).exp() - (-xp * xp).exp());
        }
        PotentialModel::SquareWell { depth: _, half_width } => {
            if x[0].abs() == half_width {
                return Err(MiwError::NondifferentiablePoint);
            }
        }
        _ => {
            let r = norm(x);
            if r == 0.0 {
                return match model {
                    PotentialModel::CoulombExact | PotentialModel::CoulombCutoff { .. } => {
                        Err(MiwError::NondifferentiablePoint)
                    }
                    _ => Ok(g),
                };
            }
            let (_, dv) = radial(model, r)?;
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi = dv * xi / r;
            }
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticRow {
    pub parameter: f64,
    pub max_deviation: f64,
}

/// Sup-deviation of each family member from `reference` over the sample points
/// (points are taken along the first axis).
pub fn asymptotic_check(
    family: impl Fn(f64) -> PotentialModel,
    reference: &PotentialModel,
    points: &[f64],
    parameters: &[f64],
) -> Result<Vec<AsymptoticRow>> {
    parameters
        .iter()
        .map(|&p| {
            let model = family(p);
            let mut dev: f64 = 0.0;
            for &r in points {
                dev = dev.max((value(&model, &[r])? - value(reference, &[r])?).abs());
            }
            Ok(AsymptoticRow { parameter: p, max_deviation: dev })
        })
        .collect()
}

/// True when the deviations strictly decrease along the table.
pub fn strictly_decreasing(rows: &[AsymptoticRow]) -> bool {
    rows.windows(2).all(|w| w[1].max_deviation < w[0].max_deviation)
}

//! Sample-point adaptive kernel density estimation with analytic derivatives,
//! signed node contributions and the bandwidth recursions.

use serde::{Deserialize, Serialize};

use crate::error::{MiwError, Result};
use crate::geometry::Point;
use crate::sum::ExactSum;

pub const RATIO_FLOOR: f64 = 1e-6;
pub const RATIO_CEIL: f64 = 1e6;

/// K_1(1), the modified Bessel function of the second kind.
const BESSEL_K1_AT_1: f64 = 0.601_907_230_197_234_6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    #[default]
    Gaussian,
    /// Smoothed exponential, c·exp(−√(1 + |u|²)).
    Exponential,
    Epanechnikov,
}

impl KernelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::Exponential => "exponential",
            KernelFamily::Epanechnikov => "epanechnikov",
        }
    }
}

/// A radial kernel K(u) = φ(|u|²/2) in `dim` dimensions, normalised to unit mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel {
    pub family: KernelFamily,
    pub dim: usize,
    norm: f64,
}

impl Kernel {
    pub fn new(family: KernelFamily, dim: usize) -> Self {
        assert!(dim == 1 || dim == 2, "kernel dimension must be 1 or 2");
        let pi = std::f64::consts::PI;
        let norm = match (family, dim) {
            (KernelFamily::Gaussian, d) => (2.0 * pi).powf(-(d as f64) / 2.0),
            (KernelFamily::Exponential, 1) => 0.5 / BESSEL_K1_AT_1,
            (KernelFamily::Exponential, _) => std::f64::consts::E / (4.0 * pi),
            (KernelFamily::Epanechnikov, 1) => 0.75,
            (KernelFamily::Epanechnikov, _) => 2.0 / pi,
        };
        Kernel { family, dim, norm }
    }

    pub fn gaussian(dim: usize) -> Self {
        Kernel::new(KernelFamily::Gaussian, dim)
    }

    /// Order of the kernel (first nonvanishing moment).
    pub fn order(&self) -> u32 {
        2
    }

    /// Whether derivatives up to third order exist everywhere.
    pub fn is_differentiable(&self) -> bool {
        self.family != KernelFamily::Epanechnikov
    }

    pub fn at_origin(&self) -> f64 {
        self.profile(0.0)[0]
    }

    pub fn value(&self, u: &[f64]) -> f64 {
        let rho = 0.5 * u.iter().take(self.dim).map(|v| v * v).sum::<f64>();
        self.profile(rho)[0]
    }

    /// φ(ρ) and its first three derivatives.
    pub fn profile(&self, rho: f64) -> [f64; 4] {
        let c = self.norm;
        match self.family {
            KernelFamily::Gaussian => {
                let e = c * (-rho).exp();
                [e, -e, e, -e]
            }
            KernelFamily::Exponential => {
                let t = (1.0 + 2.0 * rho).sqrt();
                let e = c * (-t).exp();
                let it = 1.0 / t;
                let it2 = it * it;
                let it3 = it2 * it;
                [e, -e * it, e * (it2 + it3), -e * (it3 + 3.0 * it2 * it2 + 3.0 * it3 * it2)]
            }
            KernelFamily::Epanechnikov => {
                if 2.0 * rho < 1.0 {
                    [c * (1.0 - 2.0 * rho), -2.0 * c, 0.0, 0.0]
                } else {
                    [0.0; 4]
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelEstimate {
    pub density: f64,
    pub gradient: [f64; 2],
    pub laplacian: f64,
}

/// Density, gradient, Hessian and gradient of the Laplacian at one point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Derivatives {
    pub p: f64,
    pub g: [f64; 2],
    pub hess: [[f64; 2]; 2],
    pub grad_lap: [f64; 2],
}

impl Derivatives {
    pub fn laplacian(&self, dim: usize) -> f64 {
        (0..dim).map(|a| self.hess[a][a]).sum()
    }
}

/// Which derivative orders to accumulate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Order {
    Density,
    Second,
    Third,
}

fn check_lengths(positions: &[Point], bandwidths: &[f64], signs: &[f64]) -> Result<()> {
    if positions.is_empty() {
        return Err(MiwError::EmptyEnsemble);
    }
    assert_eq!(positions.len(), bandwidths.len(), "one bandwidth per world");
    assert_eq!(positions.len(), signs.len(), "one sign per world");
    Ok(())
}

/// Sums the signed kernel contributions of the worlds selected by `include`.
/// The prefactor is 1/N with N the full ensemble size.
pub fn derivatives(
    kernel: &Kernel,
    query: &Point,
    positions: &[Point],
    bandwidths: &[f64],
    signs: &[f64],
    order: Order,
    include: impl Fn(usize) -> bool,
) -> Derivatives {
    let d = kernel.dim;
    let n = positions.len() as f64;
    let mut acc: [ExactSum; 9] = Default::default();
    for (i, x) in positions.iter().enumerate() {
        let h = bandwidths[i];
        if !h.is_finite() || signs[i] == 0.0 || !include(i) {
            continue;
        }
        let mut u = [0.0; 2];
        let mut u2 = 0.0;
        for a in 0..d {
            u[a] = (query[a] - x[a]) / h;
            u2 += u[a] * u[a];
        }
        let [f0, f1, f2, f3] = kernel.profile(0.5 * u2);
        let w = signs[i] / (n * h.powi(d as i32));
        acc[0].add(w * f0);
        if order == Order::Density {
            continue;
        }
        let w1 = w / h;
        let w2 = w1 / h;
        for a in 0..d {
            acc[1 + a].add(w1 * f1 * u[a]);
        }
        let mut k = 3;
        for a in 0..d {
            for b in a..d {
                let delta = if a == b { f1 } else { 0.0 };
                acc[k].add(w2 * (f2 * u[a] * u[b] + delta));
                k += 1;
            }
        }
        if order == Order::Third {
            let w3 = w2 / h;
            let s = f3 * u2 + (d as f64 + 2.0) * f2;
            for c in 0..d {
                acc[6 + c].add(w3 * s * u[c]);
            }
        }
    }
    let mut out = Derivatives { p: acc[0].value(), ..Default::default() };
    if order == Order::Density {
        return out;
    }
    let mut k = 3;
    for a in 0..d {
        out.g[a] = acc[1 + a].value();
        for b in a..d {
            let v = acc[k].value();
            out.hess[a][b] = v;
            out.hess[b][a] = v;
            k += 1;
        }
        out.grad_lap[a] = acc[6 + a].value();
    }
    out
}

/// Adaptive estimator with its gradient and Laplacian at `query`.
pub fn estimate(
    kernel: &Kernel,
    query: &Point,
    positions: &[Point],
    bandwidths: &[f64],
    signs: &[f64],
) -> Result<KernelEstimate> {
    check_lengths(positions, bandwidths, signs)?;
    let dv = derivatives(kernel, query, positions, bandwidths, signs, Order::Second, |_| true);
    Ok(KernelEstimate { density: dv.p, gradient: dv.g, laplacian: dv.laplacian(kernel.dim) })
}

/// Density only, for bandwidth recursions and density sampling.
pub fn density(kernel: &Kernel, query: &Point, positions: &[Point], bandwidths: &[f64], signs: &[f64]) -> f64 {
    derivatives(kernel, query, positions, bandwidths, signs, Order::Density, |_| true).p
}

/// h* = C·N^{−1/(d+4)}, the rate-optimal scale for an order-2 kernel.
pub fn h_star(c: f64, n: usize, dim: usize) -> f64 {
    c * (n as f64).powf(-1.0 / (dim as f64 + 4.0))
}

/// h_n = h*/P(x_n) for every world selected by `update`; other worlds get +∞.
pub fn initial_bandwidths(
    positions: &[Point],
    target_density: impl Fn(&Point) -> f64,
    h_star: f64,
    update: &[bool],
) -> Result<Vec<f64>> {
    positions
        .iter()
        .enumerate()
        .map(|(i, x)| {
            if !update[i] {
                return Ok(f64::INFINITY);
            }
            let p = target_density(x);
            if !(p > 0.0) {
                return Err(MiwError::NonpositiveDensity(i));
            }
            Ok(h_star / p)
        })
        .collect()
}

pub fn clamp_ratio(r: f64) -> f64 {
    if r.is_nan() {
        return 1.0;
    }
    r.clamp(RATIO_FLOOR, RATIO_CEIL)
}

/// One Jacobi sweep of h ← h·observed/priori on the selected worlds.
pub fn ratio_update(bandwidths: &[f64], observed: &[f64], priori: &[f64], update: &[bool]) -> Result<Vec<f64>> {
    bandwidths
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            if !update[i] || !h.is_finite() {
                return Ok(h);
            }
            if !(priori[i] > 0.0) {
                return Err(MiwError::NonpositiveDensity(i));
            }
            Ok(h * clamp_ratio(observed[i] / priori[i]))
        })
        .collect()
}

/// Priori-matching recursion h ← h·P_N/P̃ on the selected worlds, with P_N evaluated at each world.
pub fn recurse_bandwidth(
    kernel: &Kernel,
    positions: &[Point],
    bandwidths: &[f64],
    signs: &[f64],
    priori: &[f64],
    update: &[bool],
) -> Result<Vec<f64>> {
    check_lengths(positions, bandwidths, signs)?;
    let observed: Vec<f64> =
        positions.iter().map(|x| density(kernel, x, positions, bandwidths, signs)).collect();
    ratio_update(bandwidths, &observed, priori, update)
}

/// Σ_{i∈set} h_i^{−e} K((x − x_i)/h_i), skipping infinite bandwidths.
fn kernel_sum(kernel: &Kernel, x: &Point, positions: &[Point], bandwidths: &[f64], set: &[usize], e: i32) -> f64 {
    let mut s = ExactSum::new();
    for &i in set {
        let h = bandwidths[i];
        if !h.is_finite() {
            continue;
        }
        let mut u = [0.0; 2];
        for a in 0..kernel.dim {
            u[a] = (x[a] - positions[i][a]) / h;
        }
        s.add(h.powi(-e) * kernel.value(&u[..kernel.dim]));
    }
    s.value()
}

/// Ratio of the node kernel sum to the node-domain kernel sum at `x`.
pub fn node_ratio(
    kernel: &Kernel,
    x: &Point,
    positions: &[Point],
    bandwidths: &[f64],
    nodes: &[usize],
    domain: &[usize],
) -> Option<f64> {
    let e = kernel.dim as i32;
    let den = kernel_sum(kernel, x, positions, bandwidths, domain, e);
    if den == 0.0 {
        return None;
    }
    Some(kernel_sum(kernel, x, positions, bandwidths, nodes, e) / den)
}

/// Node recursion h ← h·(node sum)/(domain sum) on every node world with
/// finite bandwidth. The node sum includes the updated node itself.
pub fn recurse_node_bandwidth(
    kernel: &Kernel,
    positions: &[Point],
    bandwidths: &[f64],
    nodes: &[usize],
    domain: &[usize],
) -> Result<Vec<f64>> {
    let mut out = bandwidths.to_vec();
    for &n in nodes {
        if !bandwidths[n].is_finite() {
            continue;
        }
        let r = node_ratio(kernel, &positions[n], positions, bandwidths, nodes, domain)
            .ok_or(MiwError::ZeroDenominator(n))?;
        out[n] = bandwidths[n] * clamp_ratio(r);
    }
    Ok(out)
}

/// h ← K(0)/(P̃ − P_N + K(0)/h) on the node-domain worlds.
pub fn recurse_node_domain_bandwidth(
    kernel: &Kernel,
    positions: &[Point],
    bandwidths: &[f64],
    signs: &[f64],
    priori: &[f64],
    domain: &[usize],
) -> Result<Vec<f64>> {
    let observed: Vec<f64> = domain
        .iter()
        .map(|&n| density(kernel, &positions[n], positions, bandwidths, signs))
        .collect();
    node_domain_update(kernel.at_origin(), bandwidths, &observed, priori, domain)
}

/// Node-domain update given P_N at the domain worlds (in the order of `domain`).
pub fn node_domain_update(k0: f64, bandwidths: &[f64], observed: &[f64], priori: &[f64], domain: &[usize]) -> Result<Vec<f64>> {
    let mut out = bandwidths.to_vec();
    for (&n, &pn) in domain.iter().zip(observed) {
        let h = bandwidths[n];
        if !h.is_finite() {
            continue;
        }
        let den = priori[n] - pn + k0 / h;
        if !(den > 0.0) {
            return Err(MiwError::NonpositiveDenominator(n));
        }
        out[n] = h * clamp_ratio(k0 / den / h);
    }
    Ok(out)
}

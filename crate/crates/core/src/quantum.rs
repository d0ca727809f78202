//! Quantum potential, quantum force and interworld energy built on the kernel estimate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MiwError, Result};
use crate::geometry::Point;
use crate::kde::{derivatives, Derivatives, Kernel, Order};
use crate::potentials::{self, PotentialModel};
use crate::sum::exact_sum;

pub const HBAR: f64 = 1.0;
pub const MASS: f64 = 1.0;
pub const P_FLOOR: f64 = 1e-12;

/// An immutable snapshot of the estimator inputs.
#[derive(Debug, Clone, Copy)]
pub struct KdeView<'a> {
    pub kernel: &'a Kernel,
    pub positions: &'a [Point],
    pub bandwidths: &'a [f64],
    pub signs: &'a [f64],
}

impl<'a> KdeView<'a> {
    pub fn new(kernel: &'a Kernel, positions: &'a [Point], bandwidths: &'a [f64], signs: &'a [f64]) -> Self {
        assert_eq!(positions.len(), bandwidths.len());
        assert_eq!(positions.len(), signs.len());
        KdeView { kernel, positions, bandwidths, signs }
    }

    pub fn dim(&self) -> usize {
        self.kernel.dim
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Derivatives at `q`. Evaluated at a node world (negative sign), only the
    /// positive-sign worlds enter, since the full estimate vanishes there.
    fn derivs(&self, q: &Point, world: Option<usize>, order: Order) -> Derivatives {
        let positive_only = world.is_some_and(|n| self.signs[n] < 0.0);
        derivatives(self.kernel, q, self.positions, self.bandwidths, self.signs, order, |i| {
            !positive_only || self.signs[i] > 0.0
        })
    }
}

fn floor_check(d: &Derivatives, world: usize) -> Result<()> {
    if !(d.p >= P_FLOOR) {
        return Err(MiwError::DensityUnderflow { world, density: d.p });
    }
    Ok(())
}

fn q_from(d: &Derivatives, dim: usize) -> f64 {
    let p = d.p;
    let g2: f64 = (0..dim).map(|a| d.g[a] * d.g[a]).sum();
    -(HBAR * HBAR / (2.0 * MASS)) * (d.laplacian(dim) / (2.0 * p) - g2 / (4.0 * p * p))
}

fn grad_q_from(d: &Derivatives, dim: usize) -> [f64; 2] {
    let p = d.p;
    let lap = d.laplacian(dim);
    let g2: f64 = (0..dim).map(|a| d.g[a] * d.g[a]).sum();
    let mut out = [0.0; 2];
    for c in 0..dim {
        let gh: f64 = (0..dim).map(|a| d.g[a] * d.hess[a][c]).sum();
        let inner = d.grad_lap[c] / (2.0 * p) - lap * d.g[c] / (2.0 * p * p) - gh / (2.0 * p * p)
            + g2 * d.g[c] / (2.0 * p * p * p);
        out[c] = -(HBAR * HBAR / (2.0 * MASS)) * inner;
    }
    out
}

/// Q at an arbitrary query point, from the full signed estimate.
pub fn quantum_potential_at(view: &KdeView, q: &Point) -> Result<f64> {
    if view.is_empty() {
        return Err(MiwError::EmptyEnsemble);
    }
    let d = view.derivs(q, None, Order::Second);
    floor_check(&d, usize::MAX)?;
    Ok(q_from(&d, view.dim()))
}

/// ∇Q at an arbitrary query point, holding the ensemble fixed.
pub fn quantum_gradient_at(view: &KdeView, q: &Point) -> Result<[f64; 2]> {
    if !view.kernel.is_differentiable() {
        return Err(MiwError::KernelNotSmooth(view.kernel.family.name()));
    }
    let d = view.derivs(q, None, Order::Third);
    floor_check(&d, usize::MAX)?;
    Ok(grad_q_from(&d, view.dim()))
}

/// Q at world `n`.
pub fn quantum_potential_world(view: &KdeView, n: usize) -> Result<f64> {
    let d = view.derivs(&view.positions[n], Some(n), Order::Second);
    floor_check(&d, n)?;
    Ok(q_from(&d, view.dim()))
}

/// −∇Q at world `n`.
pub fn quantum_force_world(view: &KdeView, n: usize) -> Result<[f64; 2]> {
    if !view.kernel.is_differentiable() {
        return Err(MiwError::KernelNotSmooth(view.kernel.family.name()));
    }
    let d = view.derivs(&view.positions[n], Some(n), Order::Third);
    floor_check(&d, n)?;
    let g = grad_q_from(&d, view.dim());
    Ok([-g[0], -g[1]])
}

/// Q at every world.
pub fn quantum_potential(view: &KdeView) -> Result<Vec<f64>> {
    if view.is_empty() {
        return Err(MiwError::EmptyEnsemble);
    }
    (0..view.len()).into_par_iter().map(|n| quantum_potential_world(view, n)).collect()
}

/// Quantum force −∇Q at every world.
pub fn quantum_force(view: &KdeView) -> Result<Vec<[f64; 2]>> {
    if view.is_empty() {
        return Err(MiwError::EmptyEnsemble);
    }
    (0..view.len()).into_par_iter().map(|n| quantum_force_world(view, n)).collect()
}

/// Interworld energy Σ_n (ħ²/8m)|∇P|²/P² over the worlds selected by `active`.
pub fn interworld_energy(view: &KdeView, active: &[bool]) -> Result<f64> {
    let dim = view.dim();
    let terms: Vec<f64> = (0..view.len())
        .into_par_iter()
        .filter(|&n| active[n])
        .map(|n| {
            let d = view.derivs(&view.positions[n], Some(n), Order::Second);
            floor_check(&d, n)?;
            let g2: f64 = (0..dim).map(|a| d.g[a] * d.g[a]).sum();
            Ok(HBAR * HBAR / (8.0 * MASS) * g2 / (d.p * d.p))
        })
        .collect::<Result<_>>()?;
    Ok(exact_sum(terms))
}

/// Everything the dynamics needs at one world from a single pass over the ensemble.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldTerms {
    pub q: f64,
    pub force: [f64; 2],
    /// (ħ²/8m)|∇P|²/P².
    pub interworld: f64,
}

pub fn world_terms(view: &KdeView, n: usize) -> Result<WorldTerms> {
    if !view.kernel.is_differentiable() {
        return Err(MiwError::KernelNotSmooth(view.kernel.family.name()));
    }
    let dim = view.dim();
    let d = view.derivs(&view.positions[n], Some(n), Order::Third);
    floor_check(&d, n)?;
    let g = grad_q_from(&d, dim);
    let g2: f64 = (0..dim).map(|a| d.g[a] * d.g[a]).sum();
    Ok(WorldTerms {
        q: q_from(&d, dim),
        force: [-g[0], -g[1]],
        interworld: HBAR * HBAR / (8.0 * MASS) * g2 / (d.p * d.p),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    /// (Σ V + U_N)/N.
    pub eq1_sum: f64,
    /// (1/N) Σ (V + Q), the reported energy.
    pub eq3_mean: f64,
    pub potential_mean: f64,
    pub quantum_mean: f64,
}

/// Energy estimators from per-world V, Q and interworld terms.
pub fn energy_from_terms(v: &[f64], q: &[f64], u: &[f64]) -> EnergyReport {
    let m = v.len() as f64;
    let vsum = exact_sum(v.iter().copied());
    EnergyReport {
        eq1_sum: exact_sum(v.iter().chain(u.iter()).copied()) / m,
        eq3_mean: exact_sum(v.iter().chain(q.iter()).copied()) / m,
        potential_mean: vsum / m,
        quantum_mean: exact_sum(q.iter().copied()) / m,
    }
}

/// Both energy estimators, averaged over the worlds selected by `active`.
pub fn total_energy(view: &KdeView, model: &PotentialModel, active: &[bool]) -> Result<EnergyReport> {
    let dim = view.dim();
    let idx: Vec<usize> = (0..view.len()).filter(|&n| active[n]).collect();
    if idx.is_empty() {
        return Err(MiwError::EmptyEnsemble);
    }
    let vs: Vec<f64> =
        idx.iter().map(|&n| potentials::value(model, &view.positions[n][..dim])).collect::<Result<_>>()?;
    let terms: Vec<(f64, f64)> = idx
        .par_iter()
        .map(|&n| {
            let d = view.derivs(&view.positions[n], Some(n), Order::Second);
            floor_check(&d, n)?;
            let g2: f64 = (0..dim).map(|a| d.g[a] * d.g[a]).sum();
            Ok((q_from(&d, dim), HBAR * HBAR / (8.0 * MASS) * g2 / (d.p * d.p)))
        })
        .collect::<Result<_>>()?;
    let qs: Vec<f64> = terms.iter().map(|t| t.0).collect();
    let us: Vec<f64> = terms.iter().map(|t| t.1).collect();
    Ok(energy_from_terms(&vs, &qs, &us))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kde::KernelFamily;
    use proptest::prelude::*;

    fn pts1(xs: &[f64]) -> Vec<Point> {
        xs.iter().map(|&x| [x, 0.0]).collect()
    }

    #[test]
    fn single_gaussian_center() {
        for &h in &[0.5, 1.0, 2.3] {
            let k = Kernel::gaussian(1);
            let pos = pts1(&[0.4]);
            let hs = [h];
            let v = KdeView::new(&k, &pos, &hs, &[1.0]);
            let q = quantum_potential_world(&v, 0).unwrap();
            assert!((q - 1.0 / (4.0 * h * h)).abs() < 1e-14);
            let f = quantum_force_world(&v, 0).unwrap();
            assert_eq!(f[0], 0.0);
        }
    }

    #[test]
    fn single_gaussian_away_from_center_by_sqrt_form() {
        // √P ∝ exp(−x²/4h²): Q = −½(√P)''/√P = 1/(4h²) − x²/(8h⁴)
        let k = Kernel::gaussian(1);
        let pos = pts1(&[0.0]);
        let h = 0.8;
        let hs = [h];
        let v = KdeView::new(&k, &pos, &hs, &[1.0]);
        for &x in &[0.3, -1.1, 2.0] {
            let q = quantum_potential_at(&v, &[x, 0.0]).unwrap();
            let expect = 1.0 / (4.0 * h * h) - x * x / (8.0 * h.powi(4));
            assert!((q - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_region_has_no_quantum_potential() {
        // wide uniform row of equal kernels: centre of the row is flat to round-off
        let k = Kernel::gaussian(1);
        let xs: Vec<f64> = (-200..=200).map(|i| i as f64 * 0.1).collect();
        let pos = pts1(&xs);
        let h = vec![0.5; xs.len()];
        let s = vec![1.0; xs.len()];
        let v = KdeView::new(&k, &pos, &h, &s);
        let q = quantum_potential_at(&v, &[0.0, 0.0]).unwrap();
        assert!(q.abs() < 1e-10);
        let e = total_energy(&v, &PotentialModel::Free, &[false; 401].iter().enumerate().map(|(i, _)| i == 200).collect::<Vec<_>>())
            .unwrap();
        assert!(e.eq3_mean.abs() < 1e-10 && e.eq1_sum.abs() < 1e-10);
    }

    #[test]
    fn symmetric_pair_forces_oppose() {
        let k = Kernel::gaussian(1);
        let pos = pts1(&[-0.6, 0.6]);
        let v = KdeView::new(&k, &pos, &[0.9, 0.9], &[1.0, 1.0]);
        let f = quantum_force(&v).unwrap();
        assert_eq!(f[0][0], -f[1][0]);
        let q = quantum_potential(&v).unwrap();
        assert_eq!(q[0], q[1]);
    }

    #[test]
    fn interworld_pair_matches_direct_sum() {
        // direct evaluation: P = (g(x+.5) + g(x−.5))/2, P' from the analytic gaussian derivative
        let g = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let pd = |x: f64| 0.5 * (g(x + 0.5) + g(x - 0.5));
        let dp = |x: f64| 0.5 * (-(x + 0.5) * g(x + 0.5) - (x - 0.5) * g(x - 0.5));
        let oracle: f64 = [-0.5f64, 0.5].iter().map(|&x| 0.125 * (dp(x) / pd(x)).powi(2)).sum();
        let k = Kernel::gaussian(1);
        let pos = pts1(&[-0.5, 0.5]);
        let v = KdeView::new(&k, &pos, &[1.0, 1.0], &[1.0, 1.0]);
        let u = interworld_energy(&v, &[true, true]).unwrap();
        assert!((u - oracle).abs() < 1e-10);
        let one = pts1(&[0.0]);
        let v1 = KdeView::new(&k, &one, &[1.0], &[1.0]);
        assert_eq!(interworld_energy(&v1, &[true]).unwrap(), 0.0);
    }

    #[test]
    fn underflow_is_reported() {
        let k = Kernel::gaussian(1);
        let pos = pts1(&[0.0]);
        let v = KdeView::new(&k, &pos, &[0.01], &[1.0]);
        assert!(matches!(quantum_potential_at(&v, &[5.0, 0.0]), Err(MiwError::DensityUnderflow { .. })));
    }

    #[test]
    fn epanechnikov_has_no_force() {
        let k = Kernel::new(KernelFamily::Epanechnikov, 1);
        let pos = pts1(&[0.0, 0.3]);
        let v = KdeView::new(&k, &pos, &[1.0, 1.0], &[1.0, 1.0]);
        assert!(matches!(quantum_force(&v), Err(MiwError::KernelNotSmooth(_))));
    }

    fn ens(dim: usize) -> impl Strategy<Value = (Vec<Point>, Vec<f64>)> {
        proptest::collection::vec((-1.5f64..1.5, -1.5f64..1.5, 0.4f64..1.2), 2..7).prop_map(move |v| {
            let pos = v.iter().map(|&(x, y, _)| if dim == 1 { [x, 0.0] } else { [x, y] }).collect();
            (pos, v.iter().map(|t| t.2).collect())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn force_matches_difference((pos, h) in ens(2), exp in proptest::bool::ANY, one_d in proptest::bool::ANY) {
            let dim = if one_d { 1 } else { 2 };
            let pos: Vec<Point> = pos.iter().map(|p| if one_d { [p[0], 0.0] } else { *p }).collect();
            let fam = if exp { KernelFamily::Exponential } else { KernelFamily::Gaussian };
            let k = Kernel::new(fam, dim);
            let s = vec![1.0; pos.len()];
            let v = KdeView::new(&k, &pos, &h, &s);
            let step = 1e-5;
            for n in 0..pos.len() {
                let f = quantum_force_world(&v, n).unwrap();
                for a in 0..dim {
                    let mut hi = pos[n];
                    let mut lo = pos[n];
                    hi[a] += step;
                    lo[a] -= step;
                    let fd = -(quantum_potential_at(&v, &hi).unwrap() - quantum_potential_at(&v, &lo).unwrap()) / (2.0 * step);
                    let scale = f[0].abs().max(f[1].abs()).max(1.0);
                    prop_assert!((fd - f[a]).abs() < 1e-5 * scale, "{} {}", fd, f[a]);
                }
            }
        }

        #[test]
        fn translation_invariance((pos, h) in ens(2), tx in -3.0f64..3.0, ty in -3.0f64..3.0) {
            let k = Kernel::gaussian(2);
            let s = vec![1.0; pos.len()];
            let shifted: Vec<Point> = pos.iter().map(|p| [p[0] + tx, p[1] + ty]).collect();
            let a = KdeView::new(&k, &pos, &h, &s);
            let b = KdeView::new(&k, &shifted, &h, &s);
            for n in 0..pos.len() {
                let qa = quantum_potential_world(&a, n).unwrap();
                let qb = quantum_potential_world(&b, n).unwrap();
                prop_assert!((qa - qb).abs() < 1e-10 * (1.0 + qa.abs()));
                let fa = quantum_force_world(&a, n).unwrap();
                let fb = quantum_force_world(&b, n).unwrap();
                prop_assert!((fa[0] - fb[0]).abs() < 1e-10 * (1.0 + fa[0].abs()));
                prop_assert!((fa[1] - fb[1]).abs() < 1e-10 * (1.0 + fa[1].abs()));
            }
        }

        #[test]
        fn scaling_law((pos, h) in ens(2), lam in 0.5f64..2.0) {
            let k = Kernel::gaussian(2);
            let s = vec![1.0; pos.len()];
            let sp: Vec<Point> = pos.iter().map(|p| [lam * p[0], lam * p[1]]).collect();
            let sh: Vec<f64> = h.iter().map(|x| lam * x).collect();
            let a = KdeView::new(&k, &pos, &h, &s);
            let b = KdeView::new(&k, &sp, &sh, &s);
            for n in 0..pos.len() {
                let qa = quantum_potential_world(&a, n).unwrap();
                let qb = quantum_potential_world(&b, n).unwrap();
                prop_assert!((qb - qa / (lam * lam)).abs() < 1e-10 * (1.0 + qa.abs()));
            }
        }

        #[test]
        fn interworld_nonnegative((pos, h) in ens(2)) {
            let k = Kernel::gaussian(2);
            let s = vec![1.0; pos.len()];
            let v = KdeView::new(&k, &pos, &h, &s);
            prop_assert!(interworld_energy(&v, &vec![true; pos.len()]).unwrap() >= 0.0);
        }

        #[test]
        fn mirror_worlds_share_q(xs in proptest::collection::vec(0.1f64..2.0, 1..5), h in 0.3f64..1.0) {
            let k = Kernel::gaussian(1);
            let mut all: Vec<f64> = xs.iter().map(|x| -x).collect();
            all.extend(xs.iter());
            let pos = pts1(&all);
            let hh = vec![h; pos.len()];
            let s = vec![1.0; pos.len()];
            let v = KdeView::new(&k, &pos, &hh, &s);
            let m = xs.len();
            for i in 0..m {
                let qa = quantum_potential_world(&v, i).unwrap();
                let qb = quantum_potential_world(&v, m + i).unwrap();
                prop_assert_eq!(qa.to_bits(), qb.to_bits());
            }
        }
    }
}

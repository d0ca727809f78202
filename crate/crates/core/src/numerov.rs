//! Reference eigensolver: matrix Numerov in 1D, five-point Laplacian in 2D,
//! Dirichlet walls on the region boundary.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{MiwError, Result};
use crate::geometry::{Point, Region};
use crate::potentials::{self, PotentialModel};

/// Problems up to this many unknowns are diagonalised densely.
pub const DENSE_LIMIT: usize = 1500;

const MAX_SWEEPS: usize = 2000;
const RESIDUAL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    /// Interior points; the walls at `lo` and `hi` are excluded.
    pub points: usize,
}

impl Axis {
    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.points as f64 + 1.0)
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 1.0) * self.spacing()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: Vec<Axis>,
}

impl GridSpec {
    pub fn new(region: &Region, points: &[usize]) -> Result<Self> {
        region.validate()?;
        if points.len() != region.dim() {
            return Err(MiwError::Config(format!(
                "grid has {} axes but the region has dimension {}",
                points.len(),
                region.dim()
            )));
        }
        if points.iter().any(|&p| p < 3) {
            return Err(MiwError::Config("each grid axis needs at least 3 points".into()));
        }
        let axes = (0..region.dim())
            .map(|k| Axis { lo: region.lower[k], hi: region.upper[k], points: points[k] })
            .collect();
        Ok(GridSpec { axes })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.points).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Volume element s^d.
    pub fn cell(&self) -> f64 {
        self.axes.iter().map(Axis::spacing).product()
    }

    pub fn region(&self) -> Region {
        Region { lower: self.axes.iter().map(|a| a.lo).collect(), upper: self.axes.iter().map(|a| a.hi).collect() }
    }

    /// Grid points with the first axis varying fastest.
    pub fn points(&self) -> Vec<Point> {
        match self.dim() {
            1 => (0..self.axes[0].points).map(|i| [self.axes[0].coord(i), 0.0]).collect(),
            _ => {
                let (ax, ay) = (&self.axes[0], &self.axes[1]);
                let mut out = Vec::with_capacity(self.len());
                for j in 0..ay.points {
                    for i in 0..ax.points {
                        out.push([ax.coord(i), ay.coord(j)]);
                    }
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumerovSolution {
    pub grid: GridSpec,
    pub eigenvalues: Vec<f64>,
    /// Grid-sampled states, normalised so that Σψ²·s^d = 1.
    pub eigenvectors: Vec<Vec<f64>>,
}

fn sample_potential(model: &PotentialModel, grid: &GridSpec) -> Result<Vec<f64>> {
    let d = grid.dim();
    grid.points()
        .iter()
        .map(|p| {
            let v = potentials::value(model, &p[..d])?;
            if !v.is_finite() {
                return Err(MiwError::Config("potential is not finite on the grid".into()));
            }
            Ok(v)
        })
        .collect()
}

/// Symmetric linear operator with a shifted solve, for subspace iteration.
trait Operator {
    fn len(&self) -> usize;
    fn apply(&self, x: &[f64], out: &mut [f64]);
    /// out = (H − σ)^{-1} x for the operator's fixed shift σ.
    fn solve_shifted(&self, x: &[f64], out: &mut [f64]);
    /// Upper bound on the operator norm.
    fn norm_bound(&self) -> f64;
    fn dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            self.apply(&e, &mut col);
            e[j] = 0.0;
            for i in 0..n {
                m[(i, j)] = col[i];
            }
        }
        0.5 * (&m + m.transpose())
    }
}

/// Solves a constant-coefficient tridiagonal system (sub = sup = `off`).
fn thomas_const(diag: f64, off: f64, rhs: &[f64], out: &mut [f64]) {
    let n = rhs.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = off / diag;
    d[0] = rhs[0] / diag;
    for i in 1..n {
        let m = diag - off * c[i - 1];
        c[i] = off / m;
        d[i] = (rhs[i] - off * d[i - 1]) / m;
    }
    out[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        out[i] = d[i] - c[i] * out[i + 1];
    }
}

/// General tridiagonal solve: `lower[i]` couples row i to i−1, `upper[i]` row i to i+1.
fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64], out: &mut [f64]) {
    let n = rhs.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = upper[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - lower[i] * c[i - 1];
        c[i] = upper[i] / m;
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / m;
    }
    out[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        out[i] = d[i] - c[i] * out[i + 1];
    }
}

/// H = −½B⁻¹A + V with A = (J − 2I)/s², B = (J + 10I)/12.
struct Numerov1d {
    v: Vec<f64>,
    s2: f64,
    sigma: f64,
}

impl Operator for Numerov1d {
    fn len(&self) -> usize {
        self.v.len()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let n = x.len();
        let ax: Vec<f64> = (0..n)
            .map(|i| {
                let l = if i > 0 { x[i - 1] } else { 0.0 };
                let r = if i + 1 < n { x[i + 1] } else { 0.0 };
                (l - 2.0 * x[i] + r) / self.s2
            })
            .collect();
        thomas_const(10.0 / 12.0, 1.0 / 12.0, &ax, out);
        for i in 0..n {
            out[i] = -0.5 * out[i] + self.v[i] * x[i];
        }
    }

    // (H − σ)⁻¹ = N⁻¹B with N = −½A + B·diag(V − σ), tridiagonal
    fn solve_shifted(&self, x: &[f64], out: &mut [f64]) {
        let n = x.len();
        let w: Vec<f64> = self.v.iter().map(|v| v - self.sigma).collect();
        let bx: Vec<f64> = (0..n)
            .map(|i| {
                let l = if i > 0 { x[i - 1] } else { 0.0 };
                let r = if i + 1 < n { x[i + 1] } else { 0.0 };
                (l + 10.0 * x[i] + r) / 12.0
            })
            .collect();
        let diag: Vec<f64> = w.iter().map(|wi| 1.0 / self.s2 + 10.0 / 12.0 * wi).collect();
        let lower: Vec<f64> =
            (0..n).map(|i| if i > 0 { -0.5 / self.s2 + w[i - 1] / 12.0 } else { 0.0 }).collect();
        let upper: Vec<f64> =
            (0..n).map(|i| if i + 1 < n { -0.5 / self.s2 + w[i + 1] / 12.0 } else { 0.0 }).collect();
        thomas(&lower, &diag, &upper, &bx, out);
    }

    fn norm_bound(&self) -> f64 {
        3.0 / self.s2 + self.v.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Banded Cholesky factor of a symmetric positive definite matrix with half bandwidth `bw`.
struct BandCholesky {
    n: usize,
    bw: usize,
    /// Row i stores L[i][i−bw ..= i].
    l: Vec<f64>,
}

impl BandCholesky {
    fn factor(n: usize, bw: usize, entry: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let w = bw + 1;
        let mut l = vec![0.0; n * w];
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let mut s = entry(i, j);
                let k0 = j0.max(j.saturating_sub(bw));
                for k in k0..j {
                    s -= l[i * w + (k + bw - i)] * l[j * w + (k + bw - j)];
                }
                if i == j {
                    if !(s > 0.0) {
                        return Err(MiwError::EigenFailure("shifted operator is not positive definite".into()));
                    }
                    l[i * w + bw] = s.sqrt();
                } else {
                    l[i * w + (j + bw - i)] = s / l[j * w + bw];
                }
            }
        }
        Ok(BandCholesky { n, bw, l })
    }

    fn solve(&self, b: &[f64], out: &mut [f64]) {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.l[i * w + (k + bw - i)] * y[k];
            }
            y[i] = s / self.l[i * w + bw];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n.min(i + bw + 1) {
                s -= self.l[k * w + (i + bw - k)] * out[k];
            }
            out[i] = s / self.l[i * w + bw];
        }
    }
}

/// H = −½L₅ + V on an nx × ny interior grid, x fastest.
struct Laplace2d {
    v: Vec<f64>,
    nx: usize,
    ny: usize,
    cx: f64,
    cy: f64,
    chol: Option<BandCholesky>,
}

impl Laplace2d {
    fn new(v: Vec<f64>, nx: usize, ny: usize, sx: f64, sy: f64) -> Self {
        Laplace2d { v, nx, ny, cx: 0.5 / (sx * sx), cy: 0.5 / (sy * sy), chol: None }
    }

    fn entry(&self, i: usize, j: usize, sigma: f64) -> f64 {
        if i == j {
            2.0 * (self.cx + self.cy) + self.v[i] - sigma
        } else if i / self.nx == j / self.nx && i.abs_diff(j) == 1 {
            -self.cx
        } else if i.abs_diff(j) == self.nx {
            -self.cy
        } else {
            0.0
        }
    }

    fn with_shift(mut self, sigma: f64) -> Result<Self> {
        let n = self.nx * self.ny;
        let chol = BandCholesky::factor(n, self.nx, |i, j| self.entry(i, j, sigma))?;
        self.chol = Some(chol);
        Ok(self)
    }
}

impl Operator for Laplace2d {
    fn len(&self) -> usize {
        self.v.len()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let (nx, ny) = (self.nx, self.ny);
        for j in 0..ny {
            for i in 0..nx {
                let k = i + nx * j;
                let mut s = (2.0 * (self.cx + self.cy) + self.v[k]) * x[k];
                if i > 0 {
                    s -= self.cx * x[k - 1];
                }
                if i + 1 < nx {
                    s -= self.cx * x[k + 1];
                }
                if j > 0 {
                    s -= self.cy * x[k - nx];
                }
                if j + 1 < ny {
                    s -= self.cy * x[k + nx];
                }
                out[k] = s;
            }
        }
    }

    fn solve_shifted(&self, x: &[f64], out: &mut [f64]) {
        self.chol.as_ref().expect("factorised").solve(x, out);
    }

    fn norm_bound(&self) -> f64 {
        4.0 * (self.cx + self.cy) + self.v.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

fn sorted_eigen(m: DMatrix<f64>, k: usize) -> (Vec<f64>, Vec<DVector<f64>>) {
    let eig = SymmetricEigen::new(m);
    let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    idx.truncate(k);
    let vals = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = idx.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
    (vals, vecs)
}

fn orthonormalize(y: &mut DMatrix<f64>) -> Result<()> {
    let p = y.ncols();
    for _ in 0..2 {
        for j in 0..p {
            for i in 0..j {
                let d = y.column(i).dot(&y.column(j));
                let ci = y.column(i).into_owned();
                let mut cj = y.column_mut(j);
                cj.axpy(-d, &ci, 1.0);
            }
            let nrm = y.column(j).norm();
            if !(nrm > 1e-300) {
                return Err(MiwError::EigenFailure("subspace collapsed".into()));
            }
            y.column_mut(j).scale_mut(1.0 / nrm);
        }
    }
    Ok(())
}

/// Lowest `k` eigenpairs by shift-invert subspace iteration with Rayleigh–Ritz.
fn subspace_iteration(op: &dyn Operator, k: usize) -> Result<(Vec<f64>, Vec<DVector<f64>>)> {
    let n = op.len();
    let p = (2 * k + 8).min(n);
    // deterministic start: low-frequency sine modes mixed with a slow ramp
    let mut x = DMatrix::from_fn(n, p, |i, j| {
        let t = (i as f64 + 1.0) / (n as f64 + 1.0);
        (std::f64::consts::PI * (j as f64 + 1.0) * t).sin() + 1e-3 * ((i * 7919 + j * 104_729) % 1013) as f64 / 1013.0
    });
    orthonormalize(&mut x)?;
    let mut buf = vec![0.0; n];
    let tol = RESIDUAL_TOL * op.norm_bound();
    for _ in 0..MAX_SWEEPS {
        let mut y = DMatrix::zeros(n, p);
        for j in 0..p {
            let col: Vec<f64> = x.column(j).iter().copied().collect();
            op.solve_shifted(&col, &mut buf);
            y.column_mut(j).copy_from_slice(&buf);
        }
        orthonormalize(&mut y)?;
        let mut hy = DMatrix::zeros(n, p);
        for j in 0..p {
            let col: Vec<f64> = y.column(j).iter().copied().collect();
            op.apply(&col, &mut buf);
            hy.column_mut(j).copy_from_slice(&buf);
        }
        let t = y.transpose() * &hy;
        let t = 0.5 * (&t + t.transpose());
        let (theta, w) = sorted_eigen(t, p);
        let wm = DMatrix::from_columns(&w);
        x = &y * &wm;
        let hx = &hy * &wm;
        let converged = (0..k).all(|i| {
            let r = hx.column(i) - theta[i] * x.column(i);
            r.norm() <= tol
        });
        if converged {
            let vecs = (0..k).map(|i| x.column(i).into_owned()).collect();
            return Ok((theta[..k].to_vec(), vecs));
        }
    }
    Err(MiwError::EigenFailure(format!("subspace iteration did not converge in {MAX_SWEEPS} sweeps")))
}

fn finish(grid: GridSpec, vals: Vec<f64>, vecs: Vec<DVector<f64>>) -> NumerovSolution {
    let cell = grid.cell();
    let eigenvectors = vecs
        .into_iter()
        .map(|v| {
            let mut v: Vec<f64> = v.iter().copied().collect();
            let nrm = (v.iter().map(|a| a * a).sum::<f64>() * cell).sqrt();
            let big = v.iter().copied().fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
            let sign = if big < 0.0 { -1.0 } else { 1.0 };
            for a in v.iter_mut() {
                *a *= sign / nrm;
            }
            v
        })
        .collect();
    NumerovSolution { grid, eigenvalues: vals, eigenvectors }
}

fn check_states(grid: &GridSpec, n_states: usize) -> Result<()> {
    if n_states == 0 || n_states >= grid.len() {
        return Err(MiwError::Config(format!(
            "n_states must be between 1 and {} for this grid",
            grid.len() - 1
        )));
    }
    Ok(())
}

/// Matrix Numerov eigenproblem in 1D, lowest `n_states`.
pub fn solve_1d(model: &PotentialModel, grid: &GridSpec, n_states: usize) -> Result<NumerovSolution> {
    if grid.dim() != 1 {
        return Err(MiwError::Config("solve_1d needs a one-axis grid".into()));
    }
    check_states(grid, n_states)?;
    let v = sample_potential(model, grid)?;
    let s = grid.axes[0].spacing();
    let vmin = v.iter().copied().fold(f64::INFINITY, f64::min);
    let op = Numerov1d { v, s2: s * s, sigma: vmin - 1.0 };
    let (vals, vecs) = if op.len() <= DENSE_LIMIT {
        sorted_eigen(op.dense(), n_states)
    } else {
        subspace_iteration(&op, n_states)?
    };
    Ok(finish(grid.clone(), vals, vecs))
}

/// Five-point finite-difference eigenproblem in 2D, lowest `n_states`.
pub fn solve_2d(model: &PotentialModel, grid: &GridSpec, n_states: usize) -> Result<NumerovSolution> {
    if grid.dim() != 2 {
        return Err(MiwError::Config("solve_2d needs a two-axis grid".into()));
    }
    check_states(grid, n_states)?;
    let v = sample_potential(model, grid)?;
    let (ax, ay) = (&grid.axes[0], &grid.axes[1]);
    let vmin = v.iter().copied().fold(f64::INFINITY, f64::min);
    let op = Laplace2d::new(v, ax.points, ay.points, ax.spacing(), ay.spacing());
    let (vals, vecs) = if op.len() <= DENSE_LIMIT {
        sorted_eigen(op.dense(), n_states)
    } else {
        let op = op.with_shift(vmin - 1.0)?;
        subspace_iteration(&op, n_states)?
    };
    Ok(finish(grid.clone(), vals, vecs))
}

pub fn solve(model: &PotentialModel, grid: &GridSpec, n_states: usize) -> Result<NumerovSolution> {
    match grid.dim() {
        1 => solve_1d(model, grid, n_states),
        _ => solve_2d(model, grid, n_states),
    }
}

/// |ψ|² of one state, normalised to unit mass with the grid measure.
pub fn density_from_state(solution: &NumerovSolution, state: usize) -> Result<Vec<f64>> {
    let psi = solution.eigenvectors.get(state).ok_or(MiwError::IndexOutOfRange(state))?;
    let cell = solution.grid.cell();
    let mass: f64 = psi.iter().map(|a| a * a).sum::<f64>() * cell;
    Ok(psi.iter().map(|a| a * a / mass).collect())
}

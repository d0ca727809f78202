//! Relaxation of a world ensemble: Verlet steps from rest, interleaved bandwidth
//! recursions, boundary and node worlds, convergence detection and symmetry reduction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MiwError, Result};
use crate::geometry::{self, dist2, mean_nearest_spacing, Point, Region};
use crate::kde::{self, Kernel, KernelFamily};
use crate::potentials::{self, PotentialModel};
use crate::quantum::{self, energy_from_terms, EnergyReport, KdeView};
use crate::serde_inf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Free,
    FixedBoundary,
    Node,
    NodeDomain,
}

/// Line `x[axis] = value` on which node worlds sit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodalLine {
    pub axis: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldEnsemble {
    pub dim: usize,
    pub positions: Vec<Point>,
    pub velocities: Vec<Point>,
    #[serde(with = "serde_inf")]
    pub bandwidths: Vec<f64>,
    pub roles: Vec<Role>,
    pub signs: Vec<f64>,
    #[serde(default)]
    pub nodal_line: Option<NodalLine>,
}

impl WorldEnsemble {
    /// Free worlds at the given positions with a common bandwidth.
    pub fn free(dim: usize, positions: Vec<Point>, h: f64) -> Self {
        let n = positions.len();
        WorldEnsemble {
            dim,
            positions,
            velocities: vec![[0.0; 2]; n],
            bandwidths: vec![h; n],
            roles: vec![Role::Free; n],
            signs: vec![1.0; n],
            nodal_line: None,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn view<'a>(&'a self, kernel: &'a Kernel) -> KdeView<'a> {
        KdeView::new(kernel, &self.positions, &self.bandwidths, &self.signs)
    }

    pub fn movable(&self, i: usize) -> bool {
        self.roles[i] != Role::FixedBoundary
    }

    /// Worlds that carry energy: everything except fixed boundary worlds.
    pub fn active(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.movable(i)).collect()
    }

    pub fn with_role(&self, role: Role) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.roles[i] == role).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(MiwError::EmptyEnsemble);
        }
        if self.velocities.len() != n || self.bandwidths.len() != n || self.roles.len() != n || self.signs.len() != n {
            return Err(MiwError::InvalidLayout("per-world arrays differ in length".into()));
        }
        for i in 0..n {
            let h = self.bandwidths[i];
            if !(h > 0.0) {
                return Err(MiwError::InvalidLayout(format!("world {i} has nonpositive bandwidth")));
            }
            if self.roles[i] == Role::FixedBoundary && h.is_finite() {
                return Err(MiwError::InvalidLayout(format!("fixed world {i} must have infinite bandwidth")));
            }
            let want = if self.roles[i] == Role::Node { -1.0 } else { 1.0 };
            if self.signs[i] != want {
                return Err(MiwError::InvalidLayout(format!("world {i} has the wrong sign")));
            }
        }
        if self.roles.contains(&Role::Node) && self.nodal_line.is_none() {
            return Err(MiwError::InvalidLayout("node worlds need a nodal line".into()));
        }
        Ok(())
    }
}

/// How P_N is compared with the priori density in the recursion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PrioriMode {
    /// P_N at the world position.
    #[default]
    Point,
    /// Mean of P_N over the world's Voronoi cell.
    CellMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub dt: f64,
    pub iterations: usize,
    /// Verlet sub-steps per interval; velocities are reset after the last.
    pub substeps: usize,
    pub recursion_every: usize,
    pub recursion_sweeps: usize,
    pub recursion_tol: f64,
    pub priori: PrioriMode,
    pub force_tol: f64,
    pub energy_tol: f64,
    pub window: usize,
    /// Halve Δt and retry when the energy rises by more than 10%.
    pub backtrack: bool,
    /// 0 keeps only the first and last snapshots.
    pub snapshot_every: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            dt: 0.05,
            iterations: 5000,
            substeps: 1,
            recursion_every: 100,
            recursion_sweeps: 50,
            recursion_tol: 1e-3,
            priori: PrioriMode::Point,
            force_tol: 1e-4,
            energy_tol: 1e-4,
            window: 100,
            backtrack: false,
            snapshot_every: 500,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MiwError::Config(m.to_string()));
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad("dt must be positive");
        }
        if self.iterations == 0 {
            return bad("iterations must be positive");
        }
        if self.substeps == 0 || self.recursion_every == 0 || self.recursion_sweeps == 0 || self.window == 0 {
            return bad("substeps, recursion_every, recursion_sweeps and window must be at least 1");
        }
        if !(self.recursion_tol > 0.0 && self.force_tol > 0.0 && self.energy_tol > 0.0) {
            return bad("tolerances must be positive");
        }
        Ok(())
    }
}

/// Problem definition shared by every iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Setup {
    pub model: PotentialModel,
    pub region: Region,
    pub kernel: Kernel,
}

impl Setup {
    pub fn new(model: PotentialModel, region: Region, family: KernelFamily) -> Result<Self> {
        region.validate()?;
        model.validate()?;
        let kernel = Kernel::new(family, region.dim());
        if !kernel.is_differentiable() {
            return Err(MiwError::Config(format!("kernel {} cannot drive the dynamics", family.name())));
        }
        Ok(Setup { model, region, kernel })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub energy_eq3: f64,
    pub energy_eq1: f64,
    pub max_force: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecursionEvent {
    pub iteration: usize,
    pub sweeps: usize,
    /// max_n |h_after − h_before|/h_before over the whole event.
    pub max_relative_change: f64,
    /// Relative change of the final sweep.
    pub last_sweep_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iteration: usize,
    pub positions: Vec<Point>,
    #[serde(with = "serde_inf")]
    pub bandwidths: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortClass {
    Collision,
    DensityUnderflow,
    NonpositiveDenominator,
    Other,
}

impl AbortClass {
    pub fn of(e: &MiwError) -> Self {
        match e {
            MiwError::CollisionDetected(..) => AbortClass::Collision,
            MiwError::DensityUnderflow { .. } => AbortClass::DensityUnderflow,
            MiwError::NonpositiveDenominator(_) | MiwError::ZeroDenominator(_) => AbortClass::NonpositiveDenominator,
            _ => AbortClass::Other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterations,
    Aborted { class: AbortClass, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub trace: Vec<TraceRow>,
    pub recursions: Vec<RecursionEvent>,
    pub snapshots: Vec<Snapshot>,
    pub final_ensemble: WorldEnsemble,
    pub final_energy: Option<EnergyReport>,
    pub termination: Termination,
    pub collision_eps: f64,
    pub force_evaluations: usize,
    pub backtracks: usize,
}

impl RunRecord {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }

    pub fn final_eq3(&self) -> Option<f64> {
        self.final_energy.map(|e| e.eq3_mean)
    }
}

// ---------------------------------------------------------------------------
// symmetry

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Symmetry {
    #[default]
    None,
    Quadrant,
    Radial,
    AxisMirror,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Transform {
    Identity,
    FlipX,
    FlipY,
    FlipXY,
    Rotate { c: f64, s: f64 },
}

impl Transform {
    pub fn apply(&self, p: &Point) -> Point {
        match *self {
            Transform::Identity => *p,
            Transform::FlipX => [-p[0], p[1]],
            Transform::FlipY => [p[0], -p[1]],
            Transform::FlipXY => [-p[0], -p[1]],
            Transform::Rotate { c, s } => [c * p[0] - s * p[1], s * p[0] + c * p[1]],
        }
    }
}

/// Each world is the image of a representative under a symmetry transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetryPlan {
    pub symmetry: Symmetry,
    pub source: Vec<usize>,
    pub transform: Vec<Transform>,
    pub representatives: Vec<usize>,
}

impl SymmetryPlan {
    pub fn identity(n: usize) -> Self {
        SymmetryPlan {
            symmetry: Symmetry::None,
            source: (0..n).collect(),
            transform: vec![Transform::Identity; n],
            representatives: (0..n).collect(),
        }
    }

    fn replicate_scalar(&self, v: &mut [f64]) {
        for i in 0..v.len() {
            v[i] = v[self.source[i]];
        }
    }

    fn replicate_vector(&self, v: &mut [Point]) {
        for i in 0..v.len() {
            let s = self.source[i];
            if s != i {
                v[i] = self.transform[i].apply(&v[s]);
            }
        }
    }
}

const SYMMETRY_TOL: f64 = 1e-12;

fn same_world(e: &WorldEnsemble, i: usize, j: usize) -> bool {
    e.roles[i] == e.roles[j]
        && e.signs[i] == e.signs[j]
        && (e.bandwidths[i] == e.bandwidths[j]
            || (e.bandwidths[i] - e.bandwidths[j]).abs() <= SYMMETRY_TOL * e.bandwidths[i])
}

fn check_potential(model: &PotentialModel, dim: usize, maps: &[Transform]) -> Result<()> {
    for k in 0..25 {
        let p = [0.37 * k as f64 - 4.1, 0.23 * (k * k % 17) as f64 - 1.9];
        let v = potentials::value(model, &p[..dim])?;
        for t in maps {
            let q = t.apply(&p);
            let w = potentials::value(model, &q[..dim])?;
            if (v - w).abs() > SYMMETRY_TOL * (1.0 + v.abs()) {
                return Err(MiwError::SymmetryViolation(format!("potential is not invariant under {t:?}")));
            }
        }
    }
    Ok(())
}

/// Builds the reduced-computation plan, checking that ensemble and potential
/// share the declared symmetry. Flip symmetries are about the origin axes.
pub fn exploit_symmetry(ens: &WorldEnsemble, model: &PotentialModel, symmetry: Symmetry) -> Result<SymmetryPlan> {
    let n = ens.len();
    let scale = mean_nearest_spacing(&ens.positions).max(1.0);
    let tol = SYMMETRY_TOL * scale;
    let maps: Vec<Transform> = match (symmetry, ens.dim) {
        (Symmetry::None, _) => return Ok(SymmetryPlan::identity(n)),
        (Symmetry::Quadrant, 2) => vec![Transform::FlipX, Transform::FlipY, Transform::FlipXY],
        (Symmetry::Quadrant, _) | (Symmetry::AxisMirror, _) => vec![Transform::FlipX],
        (Symmetry::Radial, 1) => vec![Transform::FlipX],
        (Symmetry::Radial, _) => Vec::new(),
    };
    if symmetry == Symmetry::Radial && ens.dim == 2 {
        if !model.is_radial() {
            return Err(MiwError::SymmetryViolation("potential is not radial".into()));
        }
        return radial_plan(ens, tol);
    }
    check_potential(model, ens.dim, &maps)?;
    let mut source = vec![usize::MAX; n];
    let mut transform = vec![Transform::Identity; n];
    let mut reps = Vec::new();
    for i in 0..n {
        if source[i] != usize::MAX {
            continue;
        }
        source[i] = i;
        reps.push(i);
        for t in &maps {
            let img = t.apply(&ens.positions[i]);
            let j = (0..n)
                .find(|&j| dist2(&ens.positions[j], &img).sqrt() <= tol)
                .ok_or_else(|| MiwError::SymmetryViolation(format!("world {i} has no image under {t:?}")))?;
            if !same_world(ens, i, j) {
                return Err(MiwError::SymmetryViolation(format!("worlds {i} and {j} differ")));
            }
            if source[j] == usize::MAX {
                source[j] = i;
                transform[j] = *t;
            }
        }
    }
    Ok(SymmetryPlan { symmetry, source, transform, representatives: reps })
}

fn radial_plan(ens: &WorldEnsemble, tol: f64) -> Result<SymmetryPlan> {
    let n = ens.len();
    let mut source = vec![usize::MAX; n];
    let mut transform = vec![Transform::Identity; n];
    let mut reps = Vec::new();
    let r: Vec<f64> = ens.positions.iter().map(|p| p[0].hypot(p[1])).collect();
    for i in 0..n {
        if source[i] != usize::MAX {
            continue;
        }
        source[i] = i;
        reps.push(i);
        if r[i] <= tol {
            continue;
        }
        for j in (i + 1)..n {
            if source[j] == usize::MAX && (r[j] - r[i]).abs() <= 1e3 * tol {
                if !same_world(ens, i, j) {
                    return Err(MiwError::SymmetryViolation(format!("worlds {i} and {j} differ")));
                }
                let (pi, pj) = (ens.positions[i], ens.positions[j]);
                let c = (pi[0] * pj[0] + pi[1] * pj[1]) / (r[i] * r[j]);
                let s = (pi[0] * pj[1] - pi[1] * pj[0]) / (r[i] * r[j]);
                source[j] = i;
                transform[j] = Transform::Rotate { c, s };
            }
        }
    }
    // every rotation in the plan must map the whole ensemble onto itself
    for j in 0..n {
        let t = transform[j];
        if t == Transform::Identity {
            continue;
        }
        for k in 0..n {
            let img = t.apply(&ens.positions[k]);
            if !(0..n).any(|m| dist2(&ens.positions[m], &img).sqrt() <= 1e3 * tol && same_world(ens, k, m)) {
                return Err(MiwError::SymmetryViolation(format!("ensemble is not invariant under the rotation taking world {} to {j}", source[j])));
            }
        }
    }
    Ok(SymmetryPlan { symmetry: Symmetry::Radial, source, transform, representatives: reps })
}

// ---------------------------------------------------------------------------
// initial layouts

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    /// Cell-centred grid; `counts` per axis. In 2D worlds are ordered with
    /// the x index outermost (index = ix·ny + iy).
    UniformGrid { counts: Vec<usize> },
    /// Evenly spaced rings about the origin, optionally with a world at the centre.
    Radial { rings: Vec<Ring>, #[serde(default)] center: bool },
    Explicit { positions: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ring {
    pub radius: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct BoundarySpec {
    /// Fixed worlds with infinite bandwidth at the region corners (endpoints in 1D).
    pub corners: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub line: NodalLine,
    /// Indices of node worlds whose bandwidth is declared infinite.
    #[serde(default)]
    pub infinite: Vec<usize>,
    /// Node-domain radius in units of the mean nearest-neighbour spacing.
    #[serde(default = "default_domain_radius")]
    pub domain_radius: f64,
}

fn default_domain_radius() -> f64 {
    1.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum InitialBandwidth {
    /// h_n = h*/P̃(x_n) with h* = C·N^{−1/(d+4)}.
    HStarOverPriori { c: f64 },
    /// The same h for every world.
    Fixed { h: f64 },
}

impl Default for InitialBandwidth {
    fn default() -> Self {
        InitialBandwidth::HStarOverPriori { c: 1.0 }
    }
}

fn axis_points(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    // symmetric about the centre so that mirror images are exact
    let c = 0.5 * (lo + hi);
    let s = (hi - lo) / n as f64;
    (0..n).map(|i| c + (i as f64 - (n as f64 - 1.0) / 2.0) * s).collect()
}

fn layout_points(region: &Region, layout: &Layout) -> Result<Vec<Point>> {
    let d = region.dim();
    let pts = match layout {
        Layout::UniformGrid { counts } => {
            if counts.len() != d || counts.iter().any(|&c| c == 0) {
                return Err(MiwError::InvalidLayout("grid counts must match the region dimension".into()));
            }
            let xs = axis_points(region.lower[0], region.upper[0], counts[0]);
            if d == 1 {
                xs.iter().map(|&x| [x, 0.0]).collect()
            } else {
                let ys = axis_points(region.lower[1], region.upper[1], counts[1]);
                xs.iter().flat_map(|&x| ys.iter().map(move |&y| [x, y])).collect()
            }
        }
        Layout::Radial { rings, center } => {
            if d != 2 {
                return Err(MiwError::InvalidLayout("radial layout needs two dimensions".into()));
            }
            let mut pts = Vec::new();
            if *center {
                pts.push([0.0, 0.0]);
            }
            for ring in rings {
                for k in 0..ring.count {
                    let a = 2.0 * std::f64::consts::PI * k as f64 / ring.count as f64;
                    pts.push([ring.radius * a.cos(), ring.radius * a.sin()]);
                }
            }
            pts
        }
        Layout::Explicit { positions } => positions
            .iter()
            .map(|p| {
                if p.len() != d {
                    return Err(MiwError::InvalidLayout("explicit point has the wrong dimension".into()));
                }
                Ok(if d == 1 { [p[0], 0.0] } else { [p[0], p[1]] })
            })
            .collect::<Result<_>>()?,
    };
    if pts.len() < 2 {
        return Err(MiwError::InvalidLayout("need at least two worlds".into()));
    }
    for (i, p) in pts.iter().enumerate() {
        if !region.contains(p) {
            return Err(MiwError::InvalidLayout(format!("world {i} lies outside the region")));
        }
    }
    Ok(pts)
}

/// Builds the initial ensemble: layout, optional jitter, corner worlds, node
/// worlds and their domain, and initial bandwidths.
pub fn make_initial(
    region: &Region,
    layout: &Layout,
    boundary: &BoundarySpec,
    nodes: Option<&NodeSpec>,
    bandwidth: InitialBandwidth,
    jitter: Option<(f64, u64)>,
) -> Result<WorldEnsemble> {
    region.validate()?;
    let d = region.dim();
    let mut pts = layout_points(region, layout)?;
    if let Some((amp, seed)) = jitter {
        if amp > 0.0 {
            let s = mean_nearest_spacing(&pts);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for p in pts.iter_mut() {
                for a in 0..d {
                    p[a] += amp * s * (rng.random::<f64>() - 0.5);
                    p[a] = p[a].clamp(region.lower[a], region.upper[a]);
                }
            }
        }
    }
    let n_grid = pts.len();
    let mut ens = WorldEnsemble::free(d, pts, 1.0);
    if boundary.corners {
        let corners: Vec<Point> = if d == 1 {
            vec![[region.lower[0], 0.0], [region.upper[0], 0.0]]
        } else {
            vec![
                [region.lower[0], region.lower[1]],
                [region.upper[0], region.lower[1]],
                [region.upper[0], region.upper[1]],
                [region.lower[0], region.upper[1]],
            ]
        };
        for c in corners {
            ens.positions.push(c);
            ens.velocities.push([0.0; 2]);
            ens.bandwidths.push(f64::INFINITY);
            ens.roles.push(Role::FixedBoundary);
            ens.signs.push(1.0);
        }
    }
    geometry::voronoi_cells(&ens.positions, region).map_err(|e| MiwError::InvalidLayout(e.to_string()))?;

    if let Some(spec) = nodes {
        let line = spec.line;
        if line.axis >= d {
            return Err(MiwError::InvalidLayout("nodal line axis out of range".into()));
        }
        let spacing = mean_nearest_spacing(&ens.positions[..n_grid]);
        let on_line: Vec<usize> =
            (0..n_grid).filter(|&i| (ens.positions[i][line.axis] - line.value).abs() <= 1e-9 * spacing).collect();
        if on_line.is_empty() {
            return Err(MiwError::InvalidLayout("no worlds lie on the nodal line".into()));
        }
        for &i in &on_line {
            ens.roles[i] = Role::Node;
            ens.signs[i] = -1.0;
        }
        for &i in &spec.infinite {
            if i >= n_grid || ens.roles[i] != Role::Node {
                return Err(MiwError::InvalidLayout(format!("world {i} is not a node world")));
            }
        }
        let radius = spec.domain_radius * spacing;
        for i in 0..n_grid {
            if ens.roles[i] == Role::Free
                && on_line.iter().any(|&j| dist2(&ens.positions[i], &ens.positions[j]).sqrt() <= radius)
            {
                ens.roles[i] = Role::NodeDomain;
            }
        }
        if !ens.roles.contains(&Role::NodeDomain) {
            return Err(MiwError::InvalidLayout("node domain is empty".into()));
        }
        ens.nodal_line = Some(line);
    }

    let update: Vec<bool> = (0..ens.len())
        .map(|i| ens.roles[i] != Role::FixedBoundary && !nodes.is_some_and(|s| s.infinite.contains(&i)))
        .collect();
    ens.bandwidths = match bandwidth {
        InitialBandwidth::HStarOverPriori { c } => {
            let cells = geometry::voronoi_cells(&ens.positions, region)?;
            let pri = geometry::priori_density(&cells, ens.len());
            let hs = kde::h_star(c, ens.len(), d);
            let index = |x: &Point| ens.positions.iter().position(|p| p == x).unwrap_or(0);
            kde::initial_bandwidths(&ens.positions, |x| pri[index(x)], hs, &update)?
        }
        InitialBandwidth::Fixed { h } => {
            if !(h > 0.0) {
                return Err(MiwError::InvalidLayout("fixed bandwidth must be positive".into()));
            }
            update.iter().map(|&u| if u { h } else { f64::INFINITY }).collect()
        }
    };
    ens.validate()?;
    Ok(ens)
}

// ---------------------------------------------------------------------------
// forces and steps

/// Per-world terms at one configuration. Fixed worlds carry zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub potential: Vec<f64>,
    pub quantum: Vec<f64>,
    pub interworld: Vec<f64>,
    pub force: Vec<Point>,
    pub evaluations: usize,
}

impl Evaluation {
    pub fn energy(&self, ens: &WorldEnsemble) -> EnergyReport {
        let pick = |v: &[f64]| -> Vec<f64> { (0..ens.len()).filter(|&i| ens.movable(i)).map(|i| v[i]).collect() };
        energy_from_terms(&pick(&self.potential), &pick(&self.quantum), &pick(&self.interworld))
    }

    pub fn max_force(&self) -> f64 {
        self.force.iter().map(|f| f[0].hypot(f[1])).fold(0.0, f64::max)
    }
}

/// Total force −∇(V+Q) and energy terms at every movable world. Only the
/// plan's representatives are computed; the rest are replicated.
pub fn evaluate(setup: &Setup, ens: &WorldEnsemble, plan: &SymmetryPlan) -> Result<Evaluation> {
    let n = ens.len();
    let d = ens.dim;
    let view = ens.view(&setup.kernel);
    let reps: Vec<usize> = plan.representatives.iter().copied().filter(|&i| ens.movable(i)).collect();
    let computed: Vec<(usize, f64, f64, f64, Point)> = reps
        .par_iter()
        .map(|&i| {
            let x = &ens.positions[i][..d];
            let v = potentials::value(&setup.model, x)?;
            let gv = potentials::gradient(&setup.model, x)?;
            let t = quantum::world_terms(&view, i)?;
            let mut f = [0.0; 2];
            for a in 0..d {
                f[a] = t.force[a] - gv[a];
            }
            if ens.roles[i] == Role::Node {
                if let Some(line) = ens.nodal_line {
                    f[line.axis] = 0.0;
                }
            }
            Ok((i, v, t.q, t.interworld, f))
        })
        .collect::<Result<_>>()?;
    let mut out = Evaluation {
        potential: vec![0.0; n],
        quantum: vec![0.0; n],
        interworld: vec![0.0; n],
        force: vec![[0.0; 2]; n],
        evaluations: computed.len(),
    };
    for (i, v, q, u, f) in computed {
        out.potential[i] = v;
        out.quantum[i] = q;
        out.interworld[i] = u;
        out.force[i] = f;
    }
    plan.replicate_scalar(&mut out.potential);
    plan.replicate_scalar(&mut out.quantum);
    plan.replicate_scalar(&mut out.interworld);
    plan.replicate_vector(&mut out.force);
    for i in 0..n {
        if !ens.movable(i) {
            out.force[i] = [0.0; 2];
        }
    }
    Ok(out)
}

/// 1e-6 of the mean nearest-neighbour spacing of the free and node worlds.
pub fn collision_eps(ens: &WorldEnsemble) -> f64 {
    let pts: Vec<Point> = (0..ens.len()).filter(|&i| ens.movable(i)).map(|i| ens.positions[i]).collect();
    1e-6 * mean_nearest_spacing(&pts)
}

fn check_collisions(before: &WorldEnsemble, after: &WorldEnsemble, region: &Region, eps: f64) -> Result<()> {
    let n = after.len();
    let eps2 = eps * eps;
    for i in 0..n {
        if !region.contains(&after.positions[i]) {
            return Err(MiwError::OutOfRegion(i));
        }
        for j in (i + 1)..n {
            if dist2(&after.positions[i], &after.positions[j]) <= eps2 {
                return Err(MiwError::CollisionDetected(i, j));
            }
            // in one dimension a swap of order is a crossing even without a close approach
            if after.dim == 1 {
                let b = before.positions[i][0] - before.positions[j][0];
                let a = after.positions[i][0] - after.positions[j][0];
                if b * a < 0.0 {
                    return Err(MiwError::CollisionDetected(i, j));
                }
            }
        }
    }
    Ok(())
}

fn advance(ens: &WorldEnsemble, force: &[Point], tau: f64) -> WorldEnsemble {
    let mut next = ens.clone();
    for i in 0..ens.len() {
        if !ens.movable(i) {
            continue;
        }
        for a in 0..ens.dim {
            next.positions[i][a] += tau * ens.velocities[i][a] + 0.5 * tau * tau * force[i][a];
        }
    }
    next
}

/// One relaxation interval of length `dt`: Verlet sub-steps from rest, then a velocity reset.
pub fn step_with(
    setup: &Setup,
    ens: &WorldEnsemble,
    dt: f64,
    substeps: usize,
    plan: &SymmetryPlan,
    eps: f64,
    first: Option<&Evaluation>,
) -> Result<(WorldEnsemble, usize)> {
    let tau = dt / substeps.max(1) as f64;
    let mut cur = ens.clone();
    for v in cur.velocities.iter_mut() {
        *v = [0.0; 2];
    }
    let mut evals = 0;
    let mut force = match first {
        Some(e) => e.force.clone(),
        None => {
            let e = evaluate(setup, &cur, plan)?;
            evals += e.evaluations;
            e.force
        }
    };
    for k in 0..substeps.max(1) {
        let mut next = advance(&cur, &force, tau);
        check_collisions(&cur, &next, &setup.region, eps)?;
        if k + 1 < substeps {
            let e = evaluate(setup, &next, plan)?;
            evals += e.evaluations;
            for i in 0..next.len() {
                for a in 0..next.dim {
                    next.velocities[i][a] += 0.5 * tau * (force[i][a] + e.force[i][a]);
                }
            }
            force = e.force;
        }
        cur = next;
    }
    for v in cur.velocities.iter_mut() {
        *v = [0.0; 2];
    }
    Ok((cur, evals))
}

/// x ← x + (Δt²/2)F from rest, with the collision guard.
pub fn step(setup: &Setup, ens: &WorldEnsemble, dt: f64) -> Result<WorldEnsemble> {
    let plan = SymmetryPlan::identity(ens.len());
    let eps = collision_eps(ens);
    Ok(step_with(setup, ens, dt, 1, &plan, eps, None)?.0)
}

// ---------------------------------------------------------------------------
// bandwidth recursion

const GL5: [(f64, f64); 5] = [
    (0.0, 0.568_888_888_888_888_9),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (-0.906_179_845_938_664_0, 0.236_926_885_056_189_1),
    (0.906_179_845_938_664_0, 0.236_926_885_056_189_1),
];

fn cell_interval(positions: &[Point], region: &Region, i: usize) -> (f64, f64) {
    let x = positions[i][0];
    let mut lo = region.lower[0];
    let mut hi = region.upper[0];
    for (j, p) in positions.iter().enumerate() {
        if j == i {
            continue;
        }
        let m = 0.5 * (x + p[0]);
        if p[0] < x {
            lo = lo.max(m);
        } else {
            hi = hi.min(m);
        }
    }
    (lo, hi)
}

/// Mean of P_N over the Voronoi cell of world `i`.
pub fn cell_mean_density(kernel: &Kernel, ens: &WorldEnsemble, region: &Region, i: usize) -> f64 {
    let dens = |q: &Point| kde::density(kernel, q, &ens.positions, &ens.bandwidths, &ens.signs);
    if ens.dim == 1 {
        let (lo, hi) = cell_interval(&ens.positions, region, i);
        // nodes placed as centre ± offset so that mirrored cells sample mirrored points
        const PANELS: usize = 4;
        let (m, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
        let mut s = crate::sum::ExactSum::new();
        for k in 0..PANELS {
            let c = -1.0 + (2 * k + 1) as f64 / PANELS as f64;
            for (t, wt) in GL5 {
                let tau = c + t / PANELS as f64;
                s.add(wt * dens(&[m + half * tau, 0.0]));
            }
        }
        let integral = s.value() * half / PANELS as f64;
        return integral / (hi - lo);
    }
    let poly = geometry::cell_polygon(&ens.positions, region, i);
    let site = ens.positions[i];
    let mut integral = crate::sum::ExactSum::new();
    let mut area = crate::sum::ExactSum::new();
    let mid = |a: &Point, b: &Point| [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])];
    for k in 0..poly.len() {
        let a = poly[k];
        let b = poly[(k + 1) % poly.len()];
        // split each fan triangle into four and apply the edge-midpoint rule
        let (ab, bc, ca) = (mid(&site, &a), mid(&a, &b), mid(&b, &site));
        for tri in [[site, ab, ca], [ab, a, bc], [ca, bc, b], [ab, bc, ca]] {
            let t = 0.5 * ((tri[1][0] - tri[0][0]) * (tri[2][1] - tri[0][1]) - (tri[2][0] - tri[0][0]) * (tri[1][1] - tri[0][1])).abs();
            let m = [mid(&tri[0], &tri[1]), mid(&tri[1], &tri[2]), mid(&tri[2], &tri[0])];
            let s: f64 = m.iter().map(dens).sum();
            integral.add(t * s / 3.0);
            area.add(t);
        }
    }
    integral.value() / area.value()
}

fn observed_density(setup: &Setup, ens: &WorldEnsemble, mode: PrioriMode, worlds: &[usize]) -> Vec<(usize, f64)> {
    worlds
        .par_iter()
        .map(|&i| {
            let p = match mode {
                PrioriMode::Point => {
                    kde::density(&setup.kernel, &ens.positions[i], &ens.positions, &ens.bandwidths, &ens.signs)
                }
                PrioriMode::CellMean => cell_mean_density(&setup.kernel, ens, &setup.region, i),
            };
            (i, p)
        })
        .collect()
}

fn relative_change(old: &[f64], new: &[f64]) -> f64 {
    old.iter()
        .zip(new)
        .filter(|(a, _)| a.is_finite())
        .map(|(a, b)| ((b - a) / a).abs())
        .fold(0.0, f64::max)
}

/// Recomputes the Voronoi priori and runs up to `sweeps` Jacobi sweeps of the
/// three recursions, stopping once a sweep changes no bandwidth by more than `tol`.
pub fn recursion_event(
    setup: &Setup,
    ens: &mut WorldEnsemble,
    plan: &SymmetryPlan,
    mode: PrioriMode,
    sweeps: usize,
    tol: f64,
    iteration: usize,
) -> Result<RecursionEvent> {
    let n = ens.len();
    let cells = geometry::voronoi_cells(&ens.positions, &setup.region)?;
    let mut priori = geometry::priori_density(&cells, n);
    plan.replicate_scalar(&mut priori);
    let free: Vec<bool> = ens.roles.iter().map(|&r| r == Role::Free).collect();
    let nodes = ens.with_role(Role::Node);
    let domain = ens.with_role(Role::NodeDomain);
    let wanted: Vec<usize> = plan
        .representatives
        .iter()
        .copied()
        .filter(|&i| matches!(ens.roles[i], Role::Free | Role::NodeDomain) && ens.bandwidths[i].is_finite())
        .collect();
    let start = ens.bandwidths.clone();
    let mut done = 0;
    let mut last = 0.0;
    for _ in 0..sweeps {
        let mut observed = vec![f64::NAN; n];
        for (i, p) in observed_density(setup, ens, mode, &wanted) {
            observed[i] = p;
        }
        plan.replicate_scalar(&mut observed);
        let mut next = kde::ratio_update(&ens.bandwidths, &observed, &priori, &free)?;
        if !nodes.is_empty() {
            let hn = kde::recurse_node_bandwidth(&setup.kernel, &ens.positions, &ens.bandwidths, &nodes, &domain)?;
            let dom_obs: Vec<f64> = domain.iter().map(|&i| observed[i]).collect();
            let hd = kde::node_domain_update(setup.kernel.at_origin(), &ens.bandwidths, &dom_obs, &priori, &domain)?;
            for &i in &nodes {
                next[i] = hn[i];
            }
            for &i in &domain {
                next[i] = hd[i];
            }
        }
        plan.replicate_scalar(&mut next);
        last = relative_change(&ens.bandwidths, &next);
        ens.bandwidths = next;
        done += 1;
        if last < tol {
            break;
        }
    }
    Ok(RecursionEvent {
        iteration,
        sweeps: done,
        max_relative_change: relative_change(&start, &ens.bandwidths),
        last_sweep_change: last,
    })
}

// ---------------------------------------------------------------------------
// relaxation loop

fn converged(trace: &[TraceRow], schedule: &Schedule) -> bool {
    let Some(last) = trace.last() else { return false };
    if last.max_force >= schedule.force_tol || trace.len() < schedule.window {
        return false;
    }
    let w = &trace[trace.len() - schedule.window..];
    let hi = w.iter().map(|r| r.energy_eq3).fold(f64::NEG_INFINITY, f64::max);
    let lo = w.iter().map(|r| r.energy_eq3).fold(f64::INFINITY, f64::min);
    hi - lo < schedule.energy_tol
}

fn snapshot(ens: &WorldEnsemble, iteration: usize) -> Snapshot {
    Snapshot { iteration, positions: ens.positions.clone(), bandwidths: ens.bandwidths.clone() }
}

/// Runs the relaxation and returns the record plus per-iteration wall times in seconds.
pub fn relax_timed(
    setup: &Setup,
    initial: &WorldEnsemble,
    schedule: &Schedule,
    plan: &SymmetryPlan,
) -> Result<(RunRecord, Vec<f64>)> {
    schedule.validate()?;
    initial.validate()?;
    if initial.dim != setup.region.dim() {
        return Err(MiwError::Config("ensemble and region dimensions differ".into()));
    }
    if plan.source.len() != initial.len() {
        return Err(MiwError::Config("symmetry plan does not match the ensemble".into()));
    }
    geometry::voronoi_cells(&initial.positions, &setup.region)?;
    let eps = collision_eps(initial);
    let mut ens = initial.clone();
    let mut rec = RunRecord {
        trace: Vec::new(),
        recursions: Vec::new(),
        snapshots: vec![snapshot(&ens, 0)],
        final_ensemble: ens.clone(),
        final_energy: None,
        termination: Termination::MaxIterations,
        collision_eps: eps,
        force_evaluations: 0,
        backtracks: 0,
    };
    let mut walls = Vec::new();
    let mut dt = schedule.dt;
    let mut previous: Option<(WorldEnsemble, f64)> = None;
    let mut it = 0;
    let outcome: Result<()> = (|| {
        while it < schedule.iterations {
            let clock = std::time::Instant::now();
            if it % schedule.recursion_every == 0 {
                let ev = recursion_event(
                    setup,
                    &mut ens,
                    plan,
                    schedule.priori,
                    schedule.recursion_sweeps,
                    schedule.recursion_tol,
                    it,
                )?;
                log::debug!("iteration {it}: recursion {} sweeps, change {:.3e}", ev.sweeps, ev.max_relative_change);
                rec.recursions.push(ev);
            }
            let eval = evaluate(setup, &ens, plan)?;
            rec.force_evaluations += eval.evaluations;
            let energy = eval.energy(&ens);
            if schedule.backtrack {
                if let Some((prev, e_prev)) = &previous {
                    if energy.eq3_mean - e_prev > 0.1 * e_prev.abs() && rec.backtracks < 60 {
                        ens = prev.clone();
                        dt *= 0.5;
                        rec.backtracks += 1;
                        previous = None;
                        continue;
                    }
                }
            }
            let row = TraceRow {
                iteration: it,
                energy_eq3: energy.eq3_mean,
                energy_eq1: energy.eq1_sum,
                max_force: eval.max_force(),
            };
            rec.trace.push(row);
            rec.final_energy = Some(energy);
            if converged(&rec.trace, schedule) {
                rec.termination = Termination::Converged;
                walls.push(clock.elapsed().as_secs_f64());
                return Ok(());
            }
            if schedule.backtrack {
                previous = Some((ens.clone(), energy.eq3_mean));
            }
            let (next, evals) = step_with(setup, &ens, dt, schedule.substeps, plan, eps, Some(&eval))?;
            rec.force_evaluations += evals;
            ens = next;
            it += 1;
            if schedule.snapshot_every > 0 && it % schedule.snapshot_every == 0 {
                rec.snapshots.push(snapshot(&ens, it));
            }
            walls.push(clock.elapsed().as_secs_f64());
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        log::info!("run aborted at iteration {it}: {e}");
        rec.termination = Termination::Aborted { class: AbortClass::of(&e), message: e.to_string() };
    }
    if rec.snapshots.last().is_none_or(|s| s.iteration != it) {
        rec.snapshots.push(snapshot(&ens, it));
    }
    rec.final_ensemble = ens;
    Ok((rec, walls))
}

/// Relaxation loop; configuration errors are returned, runtime failures end up in the record.
pub fn relax(setup: &Setup, initial: &WorldEnsemble, schedule: &Schedule, plan: &SymmetryPlan) -> Result<RunRecord> {
    Ok(relax_timed(setup, initial, schedule, plan)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_cell_mean(kernel: &Kernel, ens: &WorldEnsemble, region: &Region, i: usize, m: usize) -> f64 {
        let mut s = 0.0;
        let mut c = 0usize;
        for a in 0..m {
            for b in 0..m {
                let q = [
                    region.lower[0] + (a as f64 + 0.5) / m as f64 * (region.upper[0] - region.lower[0]),
                    region.lower[1] + (b as f64 + 0.5) / m as f64 * (region.upper[1] - region.lower[1]),
                ];
                let nearest = (0..ens.len())
                    .min_by(|&x, &y| dist2(&q, &ens.positions[x]).total_cmp(&dist2(&q, &ens.positions[y])))
                    .unwrap();
                if nearest == i {
                    s += kde::density(kernel, &q, &ens.positions, &ens.bandwidths, &ens.signs);
                    c += 1;
                }
            }
        }
        s / c as f64
    }

    #[test]
    fn cell_mean_2d_matches_brute_force() {
        let region = Region::square(1.0);
        let pts = vec![[-0.5, -0.3], [0.4, -0.6], [0.1, 0.5], [0.7, 0.3], [-0.6, 0.6]];
        let mut ens = WorldEnsemble::free(2, pts, 0.4);
        ens.bandwidths[2] = 0.25;
        let kernel = Kernel::gaussian(2);
        for i in 0..ens.len() {
            let fast = cell_mean_density(&kernel, &ens, &region, i);
            let slow = brute_cell_mean(&kernel, &ens, &region, i, 800);
            assert!((fast - slow).abs() < 2e-3 * slow, "world {i}: {fast} vs {slow}");
        }
    }

    fn harmonic_setup_1d(half: f64) -> Setup {
        Setup::new(PotentialModel::Harmonic { omega: 1.0 }, Region::interval(-half, half), KernelFamily::Gaussian).unwrap()
    }

    #[test]
    fn zero_force_leaves_positions_unchanged() {
        let setup = Setup::new(PotentialModel::Free, Region::interval(-5.0, 5.0), KernelFamily::Gaussian).unwrap();
        // a symmetric pair under a flat potential pushes apart, so use a single wide world
        let ens = WorldEnsemble::free(1, vec![[0.0, 0.0]], 1.0);
        let next = step(&setup, &ens, 0.1).unwrap();
        assert_eq!(next.positions, ens.positions);
    }

    #[test]
    fn single_world_falls_from_rest() {
        // a lone gaussian is centred on its own world, so ∇Q vanishes there
        let setup = harmonic_setup_1d(5.0);
        let ens = WorldEnsemble::free(1, vec![[1.0, 0.0]], 1.0);
        for dt in [0.01, 0.05, 0.1] {
            let next = step(&setup, &ens, dt).unwrap();
            assert!((next.positions[0][0] - (1.0 - dt * dt / 2.0)).abs() < 1e-15);
            assert_eq!(next.velocities[0], [0.0; 2]);
        }
    }

    #[test]
    fn fixed_worlds_never_move() {
        let region = Region::square(1.5);
        let ens = make_initial(
            &region,
            &Layout::UniformGrid { counts: vec![4, 4] },
            &BoundarySpec { corners: true },
            None,
            InitialBandwidth::Fixed { h: 0.4 },
            None,
        )
        .unwrap();
        let setup = Setup::new(PotentialModel::coulomb_erf(2.0), region, KernelFamily::Gaussian).unwrap();
        let next = step(&setup, &ens, 0.05).unwrap();
        for i in ens.with_role(Role::FixedBoundary) {
            assert_eq!(next.positions[i], ens.positions[i]);
        }
        assert_ne!(next.positions[0], ens.positions[0]);
    }

    #[test]
    fn crossing_in_1d_is_a_collision() {
        let setup = Setup::new(PotentialModel::Harmonic { omega: 20.0 }, Region::interval(-5.0, 5.0), KernelFamily::Gaussian)
            .unwrap();
        let ens = WorldEnsemble::free(1, vec![[-0.01, 0.0], [0.01, 0.0]], 10.0);
        assert!(matches!(step(&setup, &ens, 0.5), Err(MiwError::CollisionDetected(0, 1))));
    }

    #[test]
    fn leaving_the_region_is_reported() {
        let setup = harmonic_setup_1d(1.0);
        let ens = WorldEnsemble::free(1, vec![[0.9, 0.0]], 1.0);
        assert!(matches!(step(&setup, &ens, 3.0), Err(MiwError::OutOfRegion(0))));
    }

    #[test]
    fn node_worlds_stay_on_their_line() {
        let region = Region::square(1.5);
        let nodes = NodeSpec { line: NodalLine { axis: 0, value: 0.0 }, infinite: vec![], domain_radius: 1.5 };
        let mut ens = make_initial(
            &region,
            &Layout::UniformGrid { counts: vec![5, 4] },
            &BoundarySpec::default(),
            Some(&nodes),
            InitialBandwidth::Fixed { h: 0.5 },
            None,
        )
        .unwrap();
        // break the up/down symmetry so the nodes feel a force along the line
        ens.positions[0][1] += 0.1;
        let setup = Setup::new(PotentialModel::coulomb_erf(2.0), region, KernelFamily::Gaussian).unwrap();
        let next = step(&setup, &ens, 0.05).unwrap();
        let node_idx = ens.with_role(Role::Node);
        assert_eq!(node_idx.len(), 4);
        for i in node_idx {
            assert_eq!(next.positions[i][0], 0.0);
        }
    }

    #[test]
    fn uniform_grid_with_corners() {
        let region = Region::square(1.5);
        let ens = make_initial(
            &region,
            &Layout::UniformGrid { counts: vec![6, 6] },
            &BoundarySpec { corners: true },
            None,
            InitialBandwidth::default(),
            None,
        )
        .unwrap();
        assert_eq!(ens.len(), 40);
        assert_eq!(ens.with_role(Role::Free).len(), 36);
        let fixed = ens.with_role(Role::FixedBoundary);
        assert_eq!(fixed.len(), 4);
        for i in fixed {
            assert!(ens.bandwidths[i].is_infinite());
            assert!(ens.positions[i].iter().all(|c| c.abs() == 1.5));
        }
        // cell centres: first world at (−1.25, −1.25), second one step up in y
        assert!((ens.positions[0][0] + 1.25).abs() < 1e-15 && (ens.positions[0][1] + 1.25).abs() < 1e-15);
        assert!((ens.positions[1][1] + 0.75).abs() < 1e-15);
    }

    #[test]
    fn excited_layout_indexes_nodes_along_the_column() {
        let region = Region::square(1.5);
        let nodes = NodeSpec { line: NodalLine { axis: 0, value: 0.0 }, infinite: vec![19, 22], domain_radius: 1.5 };
        let ens = make_initial(
            &region,
            &Layout::UniformGrid { counts: vec![7, 6] },
            &BoundarySpec::default(),
            Some(&nodes),
            InitialBandwidth::default(),
            None,
        )
        .unwrap();
        assert_eq!(ens.with_role(Role::Node), (18..24).collect::<Vec<_>>());
        for i in 18..24 {
            assert_eq!(ens.positions[i][0], 0.0);
            assert_eq!(ens.signs[i], -1.0);
            assert_eq!(ens.bandwidths[i].is_infinite(), i == 19 || i == 22);
        }
        let bad = NodeSpec { infinite: vec![3], ..nodes };
        assert!(matches!(
            make_initial(&region, &Layout::UniformGrid { counts: vec![7, 6] }, &BoundarySpec::default(), Some(&bad), InitialBandwidth::default(), None),
            Err(MiwError::InvalidLayout(_))
        ));
    }

    #[test]
    fn single_world_layout_is_invalid() {
        let r = make_initial(
            &Region::interval(-1.0, 1.0),
            &Layout::Explicit { positions: vec![vec![0.0]] },
            &BoundarySpec::default(),
            None,
            InitialBandwidth::default(),
            None,
        );
        assert!(matches!(r, Err(MiwError::InvalidLayout(_))));
    }

    #[test]
    fn jitter_is_seeded() {
        let make = |seed| {
            make_initial(
                &Region::square(1.5),
                &Layout::UniformGrid { counts: vec![4, 4] },
                &BoundarySpec::default(),
                None,
                InitialBandwidth::default(),
                Some((0.2, seed)),
            )
            .unwrap()
        };
        assert_eq!(make(3), make(3));
        assert_ne!(make(3).positions, make(4).positions);
    }

    fn coulomb_grid() -> (Setup, WorldEnsemble) {
        let region = Region::square(1.5);
        let ens = make_initial(
            &region,
            &Layout::UniformGrid { counts: vec![6, 6] },
            &BoundarySpec { corners: true },
            None,
            InitialBandwidth::default(),
            None,
        )
        .unwrap();
        (Setup::new(PotentialModel::coulomb_erf(4.0), region, KernelFamily::Gaussian).unwrap(), ens)
    }

    #[test]
    fn quadrant_plan_quarters_the_work_and_matches() {
        let (setup, ens) = coulomb_grid();
        let plan = exploit_symmetry(&ens, &setup.model, Symmetry::Quadrant).unwrap();
        let full = SymmetryPlan::identity(ens.len());
        let sched = Schedule { dt: 0.075, iterations: 40, recursion_every: 1, recursion_sweeps: 1, ..Default::default() };
        let a = relax(&setup, &ens, &sched, &plan).unwrap();
        let b = relax(&setup, &ens, &sched, &full).unwrap();
        // the unreduced run drifts from exact symmetry at rounding level through the cell volumes
        for (p, q) in a.final_ensemble.positions.iter().zip(&b.final_ensemble.positions) {
            assert!((p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9);
        }
        assert_eq!(a.trace.len(), b.trace.len());
        assert_eq!(4 * a.force_evaluations, b.force_evaluations);
        let e = evaluate(&setup, &ens, &plan).unwrap();
        assert_eq!(e.evaluations * 4, 36);
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        let (setup, mut ens) = coulomb_grid();
        ens.positions[0][0] += 0.01;
        assert!(matches!(exploit_symmetry(&ens, &setup.model, Symmetry::Quadrant), Err(MiwError::SymmetryViolation(_))));
        let (_, ens) = coulomb_grid();
        let shifted = PotentialModel::Harmonic { omega: 1.0 };
        assert!(exploit_symmetry(&ens, &shifted, Symmetry::Quadrant).is_ok());
        let well = PotentialModel::FiniteWellErf { depth: 2.0, half_width: 1.0, nu: 2.0 };
        assert!(exploit_symmetry(&ens, &well, Symmetry::Radial).is_err());
    }

    #[test]
    fn radial_plan_matches_direct_forces() {
        let region = Region::square(2.0);
        let layout = Layout::Radial {
            rings: vec![Ring { radius: 0.5, count: 8 }, Ring { radius: 1.1, count: 8 }],
            center: true,
        };
        let ens = make_initial(&region, &layout, &BoundarySpec::default(), None, InitialBandwidth::Fixed { h: 0.4 }, None)
            .unwrap();
        let setup = Setup::new(PotentialModel::coulomb_erf(2.0), region.clone(), KernelFamily::Gaussian).unwrap();
        let plan = exploit_symmetry(&ens, &setup.model, Symmetry::Radial).unwrap();
        assert_eq!(plan.representatives.len(), 3);
        let a = evaluate(&setup, &ens, &plan).unwrap();
        let b = evaluate(&setup, &ens, &SymmetryPlan::identity(ens.len())).unwrap();
        for i in 0..ens.len() {
            for c in 0..2 {
                assert!((a.force[i][c] - b.force[i][c]).abs() < 1e-12, "{i}: {:?} {:?}", a.force[i], b.force[i]);
            }
            assert!((a.quantum[i] - b.quantum[i]).abs() < 1e-12);
        }
        // rings of different order share no common rotation beyond the smaller one
        let mixed = Layout::Radial { rings: vec![Ring { radius: 0.5, count: 6 }, Ring { radius: 1.1, count: 12 }], center: false };
        let ens = make_initial(&region, &mixed, &BoundarySpec::default(), None, InitialBandwidth::Fixed { h: 0.4 }, None)
            .unwrap();
        assert!(matches!(exploit_symmetry(&ens, &setup.model, Symmetry::Radial), Err(MiwError::SymmetryViolation(_))));
    }

    #[test]
    fn stationary_configuration_converges_at_once() {
        // one world at the bottom of a harmonic well feels no force for any bandwidth
        let setup = harmonic_setup_1d(4.0);
        let ens = WorldEnsemble::free(1, vec![[0.0, 0.0]], 0.7);
        let sched = Schedule::default();
        let rec = relax(&setup, &ens, &sched, &SymmetryPlan::identity(1)).unwrap();
        assert_eq!(rec.termination, Termination::Converged);
        assert_eq!(rec.trace.len(), sched.window);
        assert!(rec.trace.iter().all(|r| r.energy_eq3 == rec.trace[0].energy_eq3 && r.max_force == 0.0));
        assert_eq!(rec.final_ensemble.positions, ens.positions);
    }

    #[test]
    fn relax_is_deterministic() {
        let (setup, ens) = coulomb_grid();
        let plan = exploit_symmetry(&ens, &setup.model, Symmetry::Quadrant).unwrap();
        let sched = Schedule { dt: 0.075, iterations: 60, recursion_every: 1, recursion_sweeps: 2, ..Default::default() };
        let a = relax(&setup, &ens, &sched, &plan).unwrap();
        let b = relax(&setup, &ens, &sched, &plan).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn invalid_schedule_is_a_config_error() {
        let (setup, ens) = coulomb_grid();
        let plan = SymmetryPlan::identity(ens.len());
        for bad in [
            Schedule { dt: 0.0, ..Default::default() },
            Schedule { dt: -1.0, ..Default::default() },
            Schedule { recursion_every: 0, ..Default::default() },
            Schedule { recursion_sweeps: 0, ..Default::default() },
        ] {
            assert!(matches!(relax(&setup, &ens, &bad, &plan), Err(MiwError::Config(_))));
        }
    }

    #[test]
    fn record_roundtrips_through_json() {
        let (setup, ens) = coulomb_grid();
        let plan = exploit_symmetry(&ens, &setup.model, Symmetry::Quadrant).unwrap();
        let sched = Schedule { dt: 0.075, iterations: 5, snapshot_every: 2, ..Default::default() };
        let rec = relax(&setup, &ens, &sched, &plan).unwrap();
        let text = serde_json::to_string(&rec).unwrap();
        let back: RunRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(back, rec);
        let iters: Vec<usize> = rec.snapshots.iter().map(|s| s.iteration).collect();
        assert!(iters.windows(2).all(|w| w[0] < w[1]));
        assert!(back.final_ensemble.bandwidths.iter().filter(|h| h.is_infinite()).count() == 4);
    }

    #[test]
    fn abort_keeps_the_partial_record() {
        let setup = Setup::new(PotentialModel::Harmonic { omega: 30.0 }, Region::interval(-1.0, 1.0), KernelFamily::Gaussian)
            .unwrap();
        let ens = WorldEnsemble::free(1, vec![[-0.8, 0.0], [-0.2, 0.0], [0.5, 0.0]], 0.3);
        let sched = Schedule { dt: 0.5, iterations: 10, ..Default::default() };
        let rec = relax(&setup, &ens, &sched, &SymmetryPlan::identity(3)).unwrap();
        assert!(matches!(rec.termination, Termination::Aborted { .. }));
        assert!(!rec.trace.is_empty());
        assert!(rec.final_energy.is_some());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn mirror_symmetry_survives_steps(xs in proptest::collection::vec(0.2f64..2.5, 1..4), h in 0.4f64..1.0) {
                let mut xs = xs;
                xs.sort_by(f64::total_cmp);
                xs.dedup_by(|a, b| (*a - *b).abs() < 0.1);
                let mut pts: Vec<Point> = xs.iter().map(|&x| [-x, 0.0]).collect();
                pts.extend(xs.iter().rev().map(|&x| [x, 0.0]));
                pts.sort_by(|a, b| a[0].total_cmp(&b[0]));
                let ens = WorldEnsemble::free(1, pts, h);
                let setup = harmonic_setup_1d(6.0);
                let mut cur = ens;
                for _ in 0..20 {
                    match step(&setup, &cur, 0.02) {
                        Ok(next) => cur = next,
                        Err(_) => break,
                    }
                }
                let n = cur.len();
                for i in 0..n {
                    prop_assert!((cur.positions[i][0] + cur.positions[n - 1 - i][0]).abs() < 1e-9);
                }
            }

            #[test]
            fn step_is_deterministic(seed in 0u64..1000) {
                let ens = make_initial(
                    &Region::square(1.5),
                    &Layout::UniformGrid { counts: vec![4, 4] },
                    &BoundarySpec { corners: true },
                    None,
                    InitialBandwidth::Fixed { h: 0.5 },
                    Some((0.3, seed)),
                ).unwrap();
                let setup = Setup::new(PotentialModel::coulomb_erf(2.0), Region::square(1.5), KernelFamily::Gaussian).unwrap();
                let a = step(&setup, &ens, 0.05);
                let b = step(&setup, &ens, 0.05);
                prop_assert_eq!(format!("{a:?}"), format!("{b:?}"));
            }

            #[test]
            fn quadrant_forces_match_direct(h in 0.3f64..0.8, mu in 1.0f64..4.0) {
                let region = Region::square(1.5);
                let ens = make_initial(
                    &region,
                    &Layout::UniformGrid { counts: vec![4, 6] },
                    &BoundarySpec { corners: true },
                    None,
                    InitialBandwidth::Fixed { h },
                    None,
                ).unwrap();
                let setup = Setup::new(PotentialModel::coulomb_erf(mu), region, KernelFamily::Gaussian).unwrap();
                let plan = exploit_symmetry(&ens, &setup.model, Symmetry::Quadrant).unwrap();
                let a = evaluate(&setup, &ens, &plan).unwrap();
                let b = evaluate(&setup, &ens, &SymmetryPlan::identity(ens.len())).unwrap();
                prop_assert_eq!(a.force, b.force);
                prop_assert_eq!(a.quantum, b.quantum);
            }
        }
    }
}

//! Run configuration, experiment drivers and MIW-versus-grid comparison.

pub mod drivers;
pub mod io;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    self, AbortClass, BoundarySpec, InitialBandwidth, Layout, NodeSpec, RunRecord, Schedule, Setup, Symmetry,
    SymmetryPlan, Termination, WorldEnsemble,
};
use crate::error::{MiwError, Result};
use crate::geometry::Region;
use crate::kde::{self, KernelFamily};
use crate::numerov::{self, GridSpec, NumerovSolution};
use crate::potentials::PotentialModel;

pub const UNITS: &str = "hbar = m = 1, dimensionless";

fn default_units() -> String {
    UNITS.to_string()
}

/// Numerov grid used as the reference for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSpec {
    pub points: Vec<usize>,
    #[serde(default = "one")]
    pub n_states: usize,
    /// State compared against the relaxed ensemble.
    #[serde(default)]
    pub state: usize,
    #[serde(default)]
    pub write_eigenvectors: bool,
}

fn one() -> usize {
    1
}

impl ReferenceSpec {
    pub fn new(points: Vec<usize>) -> Self {
        ReferenceSpec { points, n_states: 1, state: 0, write_eigenvectors: false }
    }

    fn validate(&self, region: &Region) -> Result<()> {
        let grid = GridSpec::new(region, &self.points).map_err(|e| MiwError::Config(e.to_string()))?;
        if self.n_states == 0 || self.n_states >= grid.len() {
            return Err(MiwError::Config(format!(
                "n_states must be between 1 and {} for this grid",
                grid.len() - 1
            )));
        }
        if self.state >= self.n_states {
            return Err(MiwError::Config("reference state must be below n_states".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_units")]
    pub units: String,
    #[serde(default)]
    pub name: String,
    pub model: PotentialModel,
    pub region: Region,
    pub layout: Layout,
    #[serde(default)]
    pub boundary: BoundarySpec,
    #[serde(default)]
    pub nodes: Option<NodeSpec>,
    #[serde(default)]
    pub kernel: KernelFamily,
    #[serde(default)]
    pub initial_bandwidth: InitialBandwidth,
    /// Uniform jitter amplitude in units of the mean spacing; 0 disables it.
    #[serde(default)]
    pub jitter: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub symmetry: Symmetry,
    #[serde(default)]
    pub reference: Option<ReferenceSpec>,
    /// Default output directory when none is given on the command line.
    #[serde(default)]
    pub output: Option<String>,
}

impl RunConfig {
    pub fn new(model: PotentialModel, region: Region, layout: Layout) -> Self {
        RunConfig {
            units: default_units(),
            name: String::new(),
            model,
            region,
            layout,
            boundary: BoundarySpec::default(),
            nodes: None,
            kernel: KernelFamily::Gaussian,
            initial_bandwidth: InitialBandwidth::default(),
            jitter: 0.0,
            seed: 0,
            schedule: Schedule::default(),
            symmetry: Symmetry::None,
            reference: None,
            output: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| MiwError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MiwError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| MiwError::Config(format!("{}: {e}", path.display())))
    }

    /// Checks everything that can be checked without running anything.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: MiwError| MiwError::Config(e.to_string());
        self.region.validate().map_err(cfg)?;
        self.model.validate().map_err(cfg)?;
        self.schedule.validate().map_err(cfg)?;
        let d = self.region.dim();
        let layout_dim = match &self.layout {
            Layout::UniformGrid { counts } => counts.len(),
            Layout::Radial { .. } => 2,
            Layout::Explicit { positions } => positions.first().map_or(d, |p| p.len()),
        };
        if layout_dim != d {
            return Err(MiwError::Config(format!("layout is {layout_dim}-dimensional but the region is {d}-dimensional")));
        }
        if matches!(self.model, PotentialModel::FiniteWellErf { .. } | PotentialModel::SquareWell { .. }) && d != 1 {
            return Err(MiwError::Config(format!("{} is a one-dimensional model", self.model.name())));
        }
        if !kde::Kernel::new(self.kernel, d).is_differentiable() {
            return Err(MiwError::Config(format!("kernel {} is not differentiable", self.kernel.name())));
        }
        if !(self.jitter >= 0.0) || !self.jitter.is_finite() {
            return Err(MiwError::Config("jitter must be nonnegative".into()));
        }
        if let Some(n) = &self.nodes {
            if n.line.axis >= d {
                return Err(MiwError::Config("nodal line axis out of range".into()));
            }
        }
        if let Some(r) = &self.reference {
            r.validate(&self.region)?;
        }
        Ok(())
    }

    pub fn setup(&self) -> Result<Setup> {
        Setup::new(self.model, self.region.clone(), self.kernel)
    }

    /// Initial ensemble, with jitter drawn from `seed`.
    pub fn initial(&self) -> Result<WorldEnsemble> {
        let jitter = (self.jitter > 0.0).then_some((self.jitter, self.seed));
        dynamics::make_initial(
            &self.region,
            &self.layout,
            &self.boundary,
            self.nodes.as_ref(),
            self.initial_bandwidth,
            jitter,
        )
    }

    pub fn reference_or_default(&self) -> ReferenceSpec {
        self.reference.clone().unwrap_or_else(|| {
            let n = if self.region.dim() == 1 { 100 } else { 59 };
            ReferenceSpec::new(vec![n; self.region.dim()])
        })
    }
}

/// Result of one relaxation with its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub config: RunConfig,
    pub record: RunRecord,
}

pub struct RunOutput {
    pub artifact: RunArtifact,
    pub iteration_wall_seconds: Vec<f64>,
}

/// Validates, builds the initial ensemble and relaxes it.
pub fn execute_run(config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    let setup = config.setup()?;
    let initial = config.initial()?;
    let plan = dynamics::exploit_symmetry(&initial, &config.model, config.symmetry)?;
    let (record, walls) = dynamics::relax_timed(&setup, &initial, &config.schedule, &plan)?;
    Ok(RunOutput { artifact: RunArtifact { config: config.clone(), record }, iteration_wall_seconds: walls })
}

pub fn build_plan(config: &RunConfig, ens: &WorldEnsemble) -> Result<SymmetryPlan> {
    dynamics::exploit_symmetry(ens, &config.model, config.symmetry)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumerovArtifact {
    pub model: PotentialModel,
    pub region: Region,
    pub solution: NumerovSolution,
}

pub fn execute_numerov(model: &PotentialModel, region: &Region, reference: &ReferenceSpec) -> Result<NumerovArtifact> {
    reference.validate(region)?;
    model.validate()?;
    let grid = GridSpec::new(region, &reference.points)?;
    let solution = numerov::solve(model, &grid, reference.n_states)?;
    Ok(NumerovArtifact { model: *model, region: region.clone(), solution })
}

/// Exit status for a finished run.
pub fn exit_code(termination: &Termination) -> i32 {
    match termination {
        Termination::Converged => 0,
        Termination::MaxIterations => 1,
        Termination::Aborted { class, .. } => match class {
            AbortClass::Collision => 3,
            AbortClass::DensityUnderflow => 5,
            AbortClass::NonpositiveDenominator => 6,
            AbortClass::Other => 7,
        },
    }
}

// ---------------------------------------------------------------------------
// comparison

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityDiscrepancy {
    pub l1: f64,
    pub sup: f64,
}

/// KDE of `ens` sampled on the grid of `solution`, against the state density.
pub fn density_discrepancy(
    kernel: KernelFamily,
    ens: &WorldEnsemble,
    solution: &NumerovSolution,
    state: usize,
) -> Result<DensityDiscrepancy> {
    let rho = numerov::density_from_state(solution, state)?;
    let k = kde::Kernel::new(kernel, solution.grid.dim());
    let pts = solution.grid.points();
    let diffs: Vec<f64> = pts
        .par_iter()
        .zip(rho.par_iter())
        .map(|(q, r)| (kde::density(&k, q, &ens.positions, &ens.bandwidths, &ens.signs) - r).abs())
        .collect();
    Ok(DensityDiscrepancy {
        l1: crate::sum::exact_sum(diffs.iter().copied()) * solution.grid.cell(),
        sup: diffs.iter().copied().fold(0.0, f64::max),
    })
}

/// Status of a sweep point or single comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointStatus {
    Converged,
    MaxIterations,
    Aborted,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    #[serde(default)]
    pub parameter: Option<f64>,
    pub status: PointStatus,
    #[serde(default)]
    pub message: Option<String>,
    pub e_miw_eq3: Option<f64>,
    pub e_miw_eq1: Option<f64>,
    pub e_numerov: Option<f64>,
    pub abs_error: Option<f64>,
    pub rel_error: Option<f64>,
    pub density_l1: Option<f64>,
    pub density_sup: Option<f64>,
    pub record_sha256: Option<String>,
    pub numerov_sha256: Option<String>,
}

impl ComparisonRow {
    fn failed(parameter: Option<f64>, message: String) -> Self {
        ComparisonRow {
            parameter,
            status: PointStatus::Failed,
            message: Some(message),
            e_miw_eq3: None,
            e_miw_eq1: None,
            e_numerov: None,
            abs_error: None,
            rel_error: None,
            density_l1: None,
            density_sup: None,
            record_sha256: None,
            numerov_sha256: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    #[serde(default)]
    pub parameter: Option<String>,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn any_aborted(&self) -> bool {
        self.rows.iter().any(|r| matches!(r.status, PointStatus::Aborted | PointStatus::Failed))
    }

    pub fn csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "parameter",
            "status",
            "e_miw_eq3",
            "e_miw_eq1",
            "e_numerov",
            "abs_error",
            "rel_error",
            "density_l1",
            "density_sup",
        ])
        .map_err(|e| MiwError::Io(e.to_string()))?;
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.10e}"));
        for r in &self.rows {
            let status = serde_json::to_value(&r.status).map_err(|e| MiwError::Io(e.to_string()))?;
            w.write_record([
                f(r.parameter),
                status.as_str().unwrap_or_default().to_string(),
                f(r.e_miw_eq3),
                f(r.e_miw_eq1),
                f(r.e_numerov),
                f(r.abs_error),
                f(r.rel_error),
                f(r.density_l1),
                f(r.density_sup),
            ])
            .map_err(|e| MiwError::Io(e.to_string()))?;
        }
        w.into_inner().map_err(|e| MiwError::Io(e.to_string()))
    }
}

fn same_region(a: &Region, b: &Region) -> bool {
    let close = |x: &[f64], y: &[f64]| x.len() == y.len() && x.iter().zip(y).all(|(p, q)| (p - q).abs() <= 1e-12 * (1.0 + p.abs()));
    close(&a.lower, &b.lower) && close(&a.upper, &b.upper)
}

/// Compares a relaxed ensemble with a grid solution of the same problem.
pub fn compare(
    run: &RunArtifact,
    reference: &NumerovArtifact,
    state: usize,
    hashes: (Option<String>, Option<String>),
) -> Result<ComparisonRow> {
    if run.config.model != reference.model {
        return Err(MiwError::MismatchedProblem(format!(
            "potential {:?} versus {:?}",
            run.config.model, reference.model
        )));
    }
    if !same_region(&run.config.region, &reference.region) {
        return Err(MiwError::MismatchedProblem("regions differ".into()));
    }
    if state >= reference.solution.eigenvalues.len() {
        return Err(MiwError::IndexOutOfRange(state));
    }
    let rec = &run.record;
    let status = match rec.termination {
        Termination::Converged => PointStatus::Converged,
        Termination::MaxIterations => PointStatus::MaxIterations,
        Termination::Aborted { .. } => PointStatus::Aborted,
    };
    let message = match &rec.termination {
        Termination::Aborted { message, .. } => Some(message.clone()),
        _ => None,
    };
    let e_ref = reference.solution.eigenvalues[state];
    let (eq3, eq1) = match rec.final_energy {
        Some(e) if status != PointStatus::Aborted => (Some(e.eq3_mean), Some(e.eq1_sum)),
        _ => (None, None),
    };
    let density = if status == PointStatus::Aborted {
        None
    } else {
        Some(density_discrepancy(run.config.kernel, &rec.final_ensemble, &reference.solution, state)?)
    };
    Ok(ComparisonRow {
        parameter: None,
        status,
        message,
        e_miw_eq3: eq3,
        e_miw_eq1: eq1,
        e_numerov: Some(e_ref),
        abs_error: eq3.map(|e| (e - e_ref).abs()),
        rel_error: eq3.map(|e| (e - e_ref).abs() / e_ref.abs()),
        density_l1: density.map(|d| d.l1),
        density_sup: density.map(|d| d.sup),
        record_sha256: hashes.0,
        numerov_sha256: hashes.1,
    })
}

// ---------------------------------------------------------------------------
// sweeps

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Mu,
    Nu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: RunConfig,
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    #[serde(default)]
    pub reference: Option<ReferenceSpec>,
}

impl SweepConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SweepConfig = serde_json::from_str(text).map_err(|e| MiwError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MiwError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(MiwError::Config("sweep value list is empty".into()));
        }
        if self.values.windows(2).any(|w| !(w[0] < w[1])) || self.values.iter().any(|v| !v.is_finite()) {
            return Err(MiwError::Config("sweep values must be finite and strictly ascending".into()));
        }
        self.base.validate()?;
        for &v in &self.values {
            self.point(v)?.validate()?;
        }
        if let Some(r) = &self.reference {
            r.validate(&self.base.region)?;
        }
        Ok(())
    }

    /// The base configuration with the swept parameter set to `value`.
    pub fn point(&self, value: f64) -> Result<RunConfig> {
        let mut cfg = self.base.clone();
        cfg.model = match (self.parameter, cfg.model) {
            (SweepParameter::Mu, PotentialModel::CoulombErf { c, alpha, mu }) => {
                // a Gaussian width tied to μ follows it
                let alpha = if alpha == mu { value } else { alpha };
                PotentialModel::CoulombErf { mu: value, c, alpha }
            }
            (SweepParameter::Mu, PotentialModel::CoulombTanh { .. }) => PotentialModel::CoulombTanh { mu: value },
            (SweepParameter::Nu, PotentialModel::FiniteWellErf { depth, half_width, .. }) => {
                PotentialModel::FiniteWellErf { depth, half_width, nu: value }
            }
            (p, m) => return Err(MiwError::Config(format!("cannot sweep {p:?} on {}", m.name()))),
        };
        if !cfg.name.is_empty() {
            cfg.name = format!("{}-{value}", cfg.name);
        }
        Ok(cfg)
    }

    pub fn reference_spec(&self) -> ReferenceSpec {
        self.reference.clone().unwrap_or_else(|| self.base.reference_or_default())
    }
}

/// Everything produced for one sweep point.
pub struct SweepPoint {
    pub value: f64,
    pub run: Option<RunOutput>,
    pub reference: Option<NumerovArtifact>,
    pub row: ComparisonRow,
}

/// Runs one point: relaxation, grid solve and comparison. Failures become rows.
pub fn sweep_point(sweep: &SweepConfig, value: f64) -> SweepPoint {
    let spec = sweep.reference_spec();
    let cfg = match sweep.point(value) {
        Ok(c) => c,
        Err(e) => {
            return SweepPoint { value, run: None, reference: None, row: ComparisonRow::failed(Some(value), e.to_string()) }
        }
    };
    let run = execute_run(&cfg);
    let reference = execute_numerov(&cfg.model, &cfg.region, &spec);
    let row = match (&run, &reference) {
        (Ok(r), Ok(n)) => {
            let h_run = io::to_json(&r.artifact).ok().map(|b| io::sha256_hex(&b));
            let h_num = io::to_json(n).ok().map(|b| io::sha256_hex(&b));
            compare(&r.artifact, n, spec.state, (h_run, h_num))
                .map(|mut row| {
                    row.parameter = Some(value);
                    row
                })
                .unwrap_or_else(|e| ComparisonRow::failed(Some(value), e.to_string()))
        }
        (Err(e), _) | (_, Err(e)) => ComparisonRow::failed(Some(value), e.to_string()),
    };
    SweepPoint { value, run: run.ok(), reference: reference.ok(), row }
}

/// All sweep points, run in parallel; rows keep the order of the value list.
pub fn execute_sweep(sweep: &SweepConfig) -> Result<(ComparisonReport, Vec<SweepPoint>)> {
    sweep.validate()?;
    let points: Vec<SweepPoint> = sweep.values.par_iter().map(|&v| sweep_point(sweep, v)).collect();
    let report = ComparisonReport {
        parameter: Some(format!("{:?}", sweep.parameter).to_lowercase()),
        rows: points.iter().map(|p| p.row.clone()).collect(),
    };
    Ok((report, points))
}

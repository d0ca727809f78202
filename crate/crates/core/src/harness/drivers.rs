//! File-producing drivers behind the command line.
//!
//! Every output directory gets a `manifest.json` listing the SHA-256 of each
//! file. Wall-clock data goes to `metadata.json`, which is left out of the
//! manifest so that reruns hash identically.

use std::path::Path;

use log::info;

use super::io::{self, Manifest, Metadata};
use super::{
    compare, execute_numerov, execute_run, execute_sweep, ComparisonReport, NumerovArtifact, ReferenceSpec, RunArtifact,
    RunConfig, RunOutput, SweepConfig,
};
use crate::error::Result;
use crate::kde;

const VERSION: &str = env!("CARGO_PKG_VERSION");

fn metadata(started: f64, walls: Vec<f64>) -> Metadata {
    let finished = io::unix_now();
    Metadata {
        started_unix: started,
        finished_unix: finished,
        wall_seconds: finished - started,
        iteration_wall_seconds: walls,
        version: VERSION.to_string(),
    }
}

fn put(dir: &Path, manifest: &mut Manifest, name: &str, bytes: &[u8]) -> Result<()> {
    io::write_atomic(&dir.join(name), bytes)?;
    manifest.add(name, io::sha256_hex(bytes));
    Ok(())
}

/// Writes a finished run into `dir`.
pub fn write_run(dir: &Path, out: &RunOutput, started: f64) -> Result<Manifest> {
    let dir = io::ensure_dir(dir)?;
    let mut m = Manifest::new("run");
    let art = &out.artifact;
    put(&dir, &mut m, "config.json", &io::to_json(&art.config)?)?;
    put(&dir, &mut m, "record.json", &io::to_json(art)?)?;
    put(&dir, &mut m, "trace.csv", &io::trace_csv(&art.record.trace)?)?;
    let ens = &art.record.final_ensemble;
    let dim = ens.dim;
    let mut worlds = Vec::new();
    for (i, p) in ens.positions.iter().enumerate() {
        let cols: Vec<String> = p.iter().map(|x| format!("{x:.12e}")).collect();
        worlds.push(format!("{} {:.12e}", cols.join(" "), ens.bandwidths[i]));
    }
    let header = match dim {
        1 => "# x h\n",
        _ => "# x y h\n",
    };
    put(&dir, &mut m, "worlds.dat", format!("{header}{}\n", worlds.join("\n")).as_bytes())?;
    let spec = art.config.reference_or_default();
    let grid = crate::numerov::GridSpec::new(&art.config.region, &spec.points)?;
    let pts = grid.points();
    let k = kde::Kernel::new(art.config.kernel, dim);
    let rho: Vec<f64> = pts.iter().map(|q| kde::density(&k, q, &ens.positions, &ens.bandwidths, &ens.signs)).collect();
    put(&dir, &mut m, "density_miw.dat", &io::grid_file(&pts, dim, &rho))?;
    io::write_json(&dir.join("manifest.json"), &m)?;
    io::write_json(&dir.join("metadata.json"), &metadata(started, out.iteration_wall_seconds.clone()))?;
    Ok(m)
}

pub fn cmd_run(config: &RunConfig, dir: &Path) -> Result<RunOutput> {
    let started = io::unix_now();
    let out = execute_run(config)?;
    info!(
        "run {:?} finished: {:?} after {} iterations",
        config.name,
        out.artifact.record.termination,
        out.artifact.record.trace.len()
    );
    write_run(dir, &out, started)?;
    Ok(out)
}

pub fn write_numerov(dir: &Path, art: &NumerovArtifact, spec: &ReferenceSpec, started: f64) -> Result<Manifest> {
    let dir = io::ensure_dir(dir)?;
    let mut m = Manifest::new("numerov");
    // eigenvectors are large; they go into the record only on request
    let mut stored = art.clone();
    if !spec.write_eigenvectors {
        stored.solution.eigenvectors.clear();
    }
    put(&dir, &mut m, "numerov.json", &io::to_json(&stored)?)?;
    let vals: String = art.solution.eigenvalues.iter().enumerate().map(|(k, e)| format!("{k} {e:.12e}\n")).collect();
    put(&dir, &mut m, "eigenvalues.dat", format!("# state energy\n{vals}").as_bytes())?;
    let pts = art.solution.grid.points();
    for k in 0..art.solution.eigenvalues.len() {
        let rho = crate::numerov::density_from_state(&art.solution, k)?;
        put(&dir, &mut m, &format!("density_state{k}.dat"), &io::grid_file(&pts, art.solution.grid.dim(), &rho))?;
    }
    io::write_json(&dir.join("manifest.json"), &m)?;
    io::write_json(&dir.join("metadata.json"), &metadata(started, Vec::new()))?;
    Ok(m)
}

pub fn cmd_numerov(config: &RunConfig, dir: &Path) -> Result<NumerovArtifact> {
    let started = io::unix_now();
    let spec = config.reference_or_default();
    let art = execute_numerov(&config.model, &config.region, &spec)?;
    info!("grid eigenvalues: {:?}", art.solution.eigenvalues);
    write_numerov(dir, &art, &spec, started)?;
    Ok(art)
}

/// Runs a sweep, writing one subdirectory per point plus the combined report.
pub fn cmd_sweep(sweep: &SweepConfig, dir: &Path) -> Result<ComparisonReport> {
    let started = io::unix_now();
    let (report, points) = execute_sweep(sweep)?;
    let root = io::ensure_dir(dir)?;
    let mut m = Manifest::new("sweep");
    put(&root, &mut m, "sweep.json", &io::to_json(sweep)?)?;
    let spec = sweep.reference_spec();
    for (i, p) in points.iter().enumerate() {
        let sub = format!("point{i:03}");
        if let Some(run) = &p.run {
            write_run(&root.join(&sub).join("miw"), run, started)?;
            m.add(&format!("{sub}/miw/manifest.json"), io::file_hash(&root.join(&sub).join("miw/manifest.json"))?);
        }
        if let Some(n) = &p.reference {
            write_numerov(&root.join(&sub).join("numerov"), n, &spec, started)?;
            m.add(&format!("{sub}/numerov/manifest.json"), io::file_hash(&root.join(&sub).join("numerov/manifest.json"))?);
        }
    }
    put(&root, &mut m, "report.json", &io::to_json(&report)?)?;
    put(&root, &mut m, "report.csv", &report.csv()?)?;
    io::write_json(&root.join("manifest.json"), &m)?;
    io::write_json(&root.join("metadata.json"), &metadata(started, Vec::new()))?;
    Ok(report)
}

/// Compares a stored run directory with a stored grid directory.
pub fn cmd_compare(run_dir: &Path, numerov_dir: &Path, state: usize, out: Option<&Path>) -> Result<ComparisonReport> {
    let started = io::unix_now();
    let run: RunArtifact = io::read_json(&run_dir.join("record.json"))?;
    let mut reference: NumerovArtifact = io::read_json(&numerov_dir.join("numerov.json"))?;
    if reference.solution.eigenvectors.is_empty() {
        // not stored: recompute from the recorded grid
        let spec = ReferenceSpec {
            points: reference.solution.grid.axes.iter().map(|a| a.points).collect(),
            n_states: reference.solution.eigenvalues.len(),
            state,
            write_eigenvectors: false,
        };
        reference = execute_numerov(&reference.model, &reference.region, &spec)?;
    }
    let hashes = (
        Some(io::file_hash(&run_dir.join("record.json"))?),
        Some(io::file_hash(&numerov_dir.join("numerov.json"))?),
    );
    let row = compare(&run, &reference, state, hashes)?;
    let report = ComparisonReport { parameter: None, rows: vec![row] };
    if let Some(dir) = out {
        let dir = io::ensure_dir(dir)?;
        let mut m = Manifest::new("compare");
        put(&dir, &mut m, "report.json", &io::to_json(&report)?)?;
        put(&dir, &mut m, "report.csv", &report.csv()?)?;
        io::write_json(&dir.join("manifest.json"), &m)?;
        io::write_json(&dir.join("metadata.json"), &metadata(started, Vec::new()))?;
    }
    Ok(report)
}

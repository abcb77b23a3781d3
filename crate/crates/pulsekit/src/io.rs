//! Experiment manifests, the output directory layout and plot-ready exports.
//!
//! Every run writes one directory with `summary.json`, `branches/`,
//! `trajectories/` and `diagrams/`. Files are written once, from the calling
//! thread, after the parallel work has been gathered in a fixed order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::continuation::{fmt17, hiop_atlas, shift_color, shifted_seeds, Atlas, Branch, ContinuationOptions};
use crate::error::{Error, Result};
use crate::model::{parse_config, HeterogeneityBump, ModelParams};
use crate::outcomes::{ode_phase_diagram, pde_phase_diagram, Launch, PdeRunOptions, PhaseDiagram};
use crate::reduced::{build_reduced, zeros_of_f, BasinReport, OdeTrajectory, ReducedSystem};
use crate::seeds::{stationary_pulse, traveling_pulse};
use crate::shooting::{ConvergedSolution, Forcing, ParamKind, ShootingTarget};
use crate::snaking::{snaking_study, SnakingOptions};

/// Output directory with the fixed layout.
#[derive(Debug, Clone)]
pub struct OutputDir {
    pub root: PathBuf,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in ["branches", "trajectories", "diagrams"] {
            std::fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root: root.to_path_buf() })
    }

    /// Writes `contents` to `rel` under the root and returns the relative path.
    pub fn write(&self, rel: &str, contents: &str) -> Result<String> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&path, contents)?;
        Ok(rel.to_string())
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<String> {
        self.write(rel, &(serde_json::to_string_pretty(value)? + "\n"))
    }
}

/// 64-bit FNV-1a, for fingerprinting configs in summaries.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325, |h, &b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

pub fn load_solution(path: &Path) -> Result<ConvergedSolution> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

// ---------------------------------------------------------------- manifests

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ManifestCommand {
    /// κ₁ sweep of the stationary one-peak family with its ladder.
    Snaking,
    OdePhase,
    PdePhase,
    HiopAtlas,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParameterGrid {
    #[serde(default)]
    pub d: Vec<f64>,
    #[serde(default)]
    pub epsilon: Vec<f64>,
    /// Bisection width for phase boundaries (0 = none).
    #[serde(default)]
    pub refine_tol: f64,
    /// Continuation window (κ₁ for snaking, ε for the atlas).
    #[serde(default)]
    pub range: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub command: ManifestCommand,
    /// Model config, inline (same layout as the config file).
    #[serde(default)]
    pub config: Option<serde_json::Value>,
    #[serde(default)]
    pub grid: ParameterGrid,
    /// Converged solutions to start from instead of building fresh pulses.
    #[serde(default)]
    pub seed_files: Vec<PathBuf>,
    pub output: PathBuf,
    #[serde(default)]
    pub tool_version: Option<String>,
    /// Seconds; recorded, and exceeded budgets are reported.
    #[serde(default)]
    pub wall_clock_budget: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExitReport {
    pub command: String,
    pub config_hash: String,
    pub tool_version: String,
    pub outputs: Vec<String>,
    /// Per-task failures; the run itself still succeeds.
    pub failures: Vec<String>,
    pub metrics: BTreeMap<String, serde_json::Value>,
}

impl ExperimentManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingInput(format!("manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::ConfigInvalid {
            field: format!("manifest line {} column {}", e.line(), e.column()),
            reason: e.to_string(),
        })
    }

    pub fn params(&self) -> Result<(ModelParams, Option<HeterogeneityBump>)> {
        match &self.config {
            Some(v) => parse_config(&v.to_string()),
            None => Ok((ModelParams::default(), None)),
        }
    }

    fn seed(&self, i: usize) -> Result<Option<ConvergedSolution>> {
        self.seed_files.get(i).map(|p| load_solution(p)).transpose()
    }
}

/// Pulse on a wide domain for the reduced system: the tail needs several
/// oscillations before the seam.
pub fn reduced_pulse(params: &ModelParams) -> Result<ConvergedSolution> {
    let wide = params.with_domain(4.0, 1024);
    stationary_pulse(&wide, params.kappa1_base)
}

/// Traveling pulse on the collision domain, moving toward +x.
pub fn collision_pulse(params: &ModelParams) -> Result<ConvergedSolution> {
    traveling_pulse(params, params.kappa1_base)
}

pub fn run_manifest(m: &ExperimentManifest) -> Result<ExitReport> {
    let (params, _) = m.params()?;
    let out = OutputDir::create(&m.output)?;
    let started = std::time::Instant::now();
    let mut report = ExitReport {
        command: serde_json::to_value(m.command)?.as_str().unwrap_or_default().to_string(),
        config_hash: format!("{:016x}", fnv1a(serde_json::to_string(&params)?.as_bytes())),
        tool_version: m.tool_version.clone().unwrap_or_else(|| env!("CARGO_PKG_VERSION").to_string()),
        ..Default::default()
    };
    match m.command {
        ManifestCommand::OdePhase | ManifestCommand::PdePhase if m.grid.d.is_empty() || m.grid.epsilon.is_empty() => {}
        ManifestCommand::OdePhase => {
            let pulse = match m.seed(0)? {
                Some(s) => s,
                None => reduced_pulse(&params)?,
            };
            let pulse = ConvergedSolution { params: ModelParams { tau: params.tau, ..pulse.params }, ..pulse };
            let mut systems: Vec<(f64, ReducedSystem)> = Vec::new();
            for &d in &m.grid.d {
                match build_reduced(&pulse, d) {
                    Ok(s) => systems.push((d, s)),
                    Err(e) => report.failures.push(format!("d = {d}: {e}")),
                }
            }
            let tol = if m.grid.refine_tol > 0.0 { m.grid.refine_tol } else { 0.0 };
            let diag = ode_phase_diagram(&systems, &m.grid.epsilon, tol)?;
            write_phase(&out, &diag, &mut report)?;
        }
        ManifestCommand::PdePhase => {
            let pulse = match m.seed(0)? {
                Some(s) => s,
                None => collision_pulse(&params)?,
            };
            let launch = Launch::new(&pulse, -0.3)?;
            let diag = pde_phase_diagram(&launch, &m.grid.d, &m.grid.epsilon, m.grid.refine_tol, &PdeRunOptions::default())?;
            write_phase(&out, &diag, &mut report)?;
        }
        ManifestCommand::Snaking => {
            let one = match m.seed(0)? {
                Some(s) => s,
                None => stationary_pulse(&params, params.kappa1_base)?,
            };
            let mut opts = SnakingOptions::default();
            if let Some(r) = m.grid.range {
                opts.kappa1_range = r;
            }
            let rep = snaking_study(&one, &opts)?;
            let groups = [("odd", &rep.odd), ("ladder", &rep.ladder), ("even", &rep.even)];
            for (name, branches) in groups {
                for (i, b) in branches.iter().enumerate() {
                    report.outputs.push(out.write(&format!("branches/{name}_{i}.csv"), &b.to_csv()?)?);
                }
            }
            let events: Vec<serde_json::Value> = groups
                .iter()
                .flat_map(|(name, bs)| {
                    bs.iter().enumerate().flat_map(move |(i, b)| {
                        b.events.iter().map(move |e| {
                            serde_json::json!({"branch": format!("{name}_{i}"), "kind": e.kind.label(), "param": e.param})
                        })
                    })
                })
                .collect();
            report.outputs.push(out.write_json("branches/events.json", &events)?);
            report.outputs.push(out.write_json("branches/folds.json", &rep.folds)?);
            report.metrics.insert("right_folds_adding_two".into(), rep.right_folds_adding_two().into());
            report.metrics.insert("ladder_joins_odd_to_even".into(), rep.ladder_joins_odd_to_even().into());
            report.metrics.insert("terminates_on_filled".into(), rep.terminates_on_filled().into());
            report.metrics.insert("ladder_ends".into(), serde_json::to_value(&rep.ladder_ends)?);
        }
        ManifestCommand::HiopAtlas => {
            let d = m.grid.d.first().copied().unwrap_or(0.05);
            let range = m.grid.range.unwrap_or((-0.035866, 0.012));
            let atlas = build_atlas(&params, d, range, m.seed(0)?, m.seed(1)?)?;
            write_atlas(&out, &atlas, &mut report)?;
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    report.metrics.insert("wall_clock_s".into(), elapsed.into());
    if let Some(b) = m.wall_clock_budget {
        if elapsed > b {
            report.failures.push(format!("wall-clock budget {b} s exceeded ({elapsed:.0} s)"));
        }
    }
    out.write_json("summary.json", &report)?;
    Ok(report)
}

fn write_phase(out: &OutputDir, diag: &PhaseDiagram, report: &mut ExitReport) -> Result<()> {
    report.outputs.extend(export_figure_data(ExportInput::Phase(diag), out, "phase")?);
    report.metrics.insert("cells".into(), diag.cells.len().into());
    report.metrics.insert("boundaries".into(), diag.boundaries.len().into());
    Ok(())
}

fn write_atlas(out: &OutputDir, atlas: &Atlas, report: &mut ExitReport) -> Result<()> {
    for e in &atlas.entries {
        match &e.branch {
            Some(b) => report.outputs.push(out.write(&format!("branches/{}.csv", file_safe(&e.name)), &b.to_csv()?)?),
            None => report.failures.push(format!("{}: {}", e.name, e.error.as_deref().unwrap_or("failed"))),
        }
    }
    report.outputs.push(out.write_json("branches/atlas.json", &atlas.manifest())?);
    report.outputs.extend(export_figure_data(ExportInput::Hiop(atlas), out, "hiop")?);
    Ok(())
}

fn file_safe(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '+' { c } else { '_' }).collect()
}

/// Stationary HIOP atlas on the collision domain: one-peak states placed at
/// the zeros of the bump interaction, continued in ε both ways. `wide` is the
/// reduced-system pulse and `one_peak` the stationary pulse on the collision
/// domain; both are built when absent.
pub fn build_atlas(
    params: &ModelParams,
    d: f64,
    range: (f64, f64),
    one_peak: Option<ConvergedSolution>,
    wide: Option<ConvergedSolution>,
) -> Result<Atlas> {
    let one = match one_peak {
        Some(s) => s,
        None => stationary_pulse(params, params.kappa1_base)?,
    };
    let wide = match wide {
        Some(s) => s,
        None => reduced_pulse(params)?,
    };
    let sys = build_reduced(&wide, d)?;
    let half = 0.5 * params.domain_length;
    let zeros: Vec<(i64, f64)> =
        zeros_of_f(&sys, (-0.45 * half, 0.05 * half)).into_iter().filter(|(n, _)| *n <= 0).collect();
    let mut opts = ContinuationOptions::new(ParamKind::Epsilon, 1.0, ShootingTarget::steady());
    opts.n_eigs = 0;
    opts.stop.max_points = 300;
    opts.step.ds_max = 2e-3;
    // ε = 0 is a translation-invariant (singular) point: seed each sign just
    // off zero and continue away from it
    let delta = 2e-4;
    let mut atlas = Atlas { entries: vec![] };
    for (sign, window) in [(-1.0, (range.0, range.1.min(-0.5 * delta))), (1.0, (range.0.max(0.5 * delta), range.1))] {
        if window.0 >= window.1 {
            continue;
        }
        let eps0 = (sign * delta).clamp(window.0, window.1);
        let forcing = Forcing::with_bump(params.kappa1_base, HeterogeneityBump::new(eps0, d));
        let one = ConvergedSolution { forcing, ..one.clone() };
        let seeds: Vec<_> =
            shifted_seeds(&one, &zeros, eps0, &ShootingTarget::steady()).into_iter().filter_map(|s| s.ok()).collect();
        atlas.entries.extend(hiop_atlas(&seeds, window, &opts).entries.into_iter().filter(|e| {
            // the direction pointing back at ε = 0 leaves the window at once
            e.branch.as_ref().is_none_or(|b| b.points.len() > 1)
        }));
    }
    Ok(atlas)
}

// ---------------------------------------------------------------- exports

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportKind {
    Snaking,
    Isola,
    Hiop,
    Phase,
    Transition,
    Basin,
}

impl ExportKind {
    pub fn parse(s: &str) -> Option<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase())).ok()
    }
}

pub enum ExportInput<'a> {
    /// Branches with stability, for snaking and isola plots.
    Snaking(&'a [Branch]),
    Isola(&'a [Branch]),
    Hiop(&'a Atlas),
    Phase(&'a PhaseDiagram),
    /// Named manifold pieces plus the pulse orbit.
    Transition { curves: &'a [(String, OdeTrajectory)], pulse: &'a OdeTrajectory },
    Basin(&'a BasinReport),
}

impl ExportInput<'_> {
    pub fn kind(&self) -> ExportKind {
        match self {
            Self::Snaking(_) => ExportKind::Snaking,
            Self::Isola(_) => ExportKind::Isola,
            Self::Hiop(_) => ExportKind::Hiop,
            Self::Phase(_) => ExportKind::Phase,
            Self::Transition { .. } => ExportKind::Transition,
            Self::Basin(_) => ExportKind::Basin,
        }
    }
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf8"))
}

fn stability_label(stable: bool, n_eigs: usize) -> &'static str {
    match (n_eigs, stable) {
        (0, _) => "unknown",
        (_, true) => "stable",
        _ => "unstable",
    }
}

/// Writes `diagrams/<stem>.csv` plus a `<stem>.json` sidecar describing the
/// columns, axes and legend. Empty inputs are a MissingInput error.
pub fn export_figure_data(input: ExportInput, out: &OutputDir, stem: &str) -> Result<Vec<String>> {
    let kind = input.kind();
    let missing = || Error::MissingInput(format!("{kind:?} export has no data"));
    let mut files = Vec::new();
    let (columns, legend): (Vec<(&str, &str)>, serde_json::Value) = match input {
        ExportInput::Snaking(bs) | ExportInput::Isola(bs) => {
            if bs.iter().all(|b| b.points.is_empty()) {
                return Err(missing());
            }
            let snaking = kind == ExportKind::Snaking;
            let rows = bs.iter().enumerate().flat_map(|(i, b)| {
                b.points.iter().map(move |p| {
                    let mut r = vec![
                        fmt17(p.param),
                        fmt17(p.norm),
                        stability_label(p.stable, p.eigenvalues.len()).to_string(),
                        p.barcode.clone().unwrap_or_default(),
                    ];
                    if !snaking {
                        r.insert(2, fmt17(p.U));
                    }
                    r.push(i.to_string());
                    r
                })
            });
            let header: &[&str] = if snaking {
                &["kappa1", "norm", "stability", "barcode", "branch"]
            } else {
                &["kappa1", "norm", "U", "stability", "barcode", "branch"]
            };
            files.push(out.write(&format!("diagrams/{stem}.csv"), &csv_string(header, rows)?)?);
            let mut cols = vec![
                ("kappa1", "continuation parameter"),
                ("norm", "L2 norm of u"),
                ("stability", "stable | unstable | unknown (no spectrum)"),
                ("barcode", "peak pattern with shift index"),
                ("branch", "branch number in the input list"),
            ];
            if !snaking {
                cols.insert(2, ("U", "traveling speed"));
            }
            (cols, serde_json::json!({"x": "kappa1", "y": "norm", "line_style": {"stable": "solid", "unstable": "dashed"}}))
        }
        ExportInput::Hiop(atlas) => {
            if atlas.branches().next().is_none() {
                return Err(missing());
            }
            let rows = atlas.entries.iter().filter_map(|e| e.branch.as_ref().map(|b| (e, b))).flat_map(|(e, b)| {
                b.points.iter().map(move |p| {
                    vec![
                        fmt17(p.param),
                        fmt17(p.norm),
                        stability_label(p.stable, p.eigenvalues.len()).to_string(),
                        e.shift_index.map(fmt17).unwrap_or_default(),
                        e.name.clone(),
                    ]
                })
            });
            let header = ["epsilon", "norm", "stability", "shift_index", "branch"];
            files.push(out.write(&format!("diagrams/{stem}.csv"), &csv_string(&header, rows)?)?);
            let colors: BTreeMap<String, &str> =
                (-4..=0).map(|n| (n.to_string(), shift_color(n as f64))).collect();
            (
                vec![
                    ("epsilon", "bump height"),
                    ("norm", "L2 norm of u"),
                    ("stability", "stable | unstable | unknown (no spectrum)"),
                    ("shift_index", "seed shift index n of [I]S_n"),
                    ("branch", "atlas entry name"),
                ],
                serde_json::json!({"x": "epsilon", "y": "norm", "shift_index_color": colors}),
            )
        }
        ExportInput::Phase(diag) => {
            if diag.cells.is_empty() {
                return Err(missing());
            }
            files.push(out.write(&format!("diagrams/{stem}.csv"), &diag.to_csv()?)?);
            files.push(out.write_json(&format!("diagrams/{stem}_boundaries.json"), &diag.boundaries_json())?);
            (
                vec![
                    ("d", "bump width"),
                    ("epsilon", "bump height"),
                    ("outcome", "PEN | REB | OSC | STA | Unresolved"),
                    ("pin_location", "pinned position relative to the bump center (OSC: cycle center)"),
                    ("period", "oscillation period (OSC only)"),
                ],
                serde_json::json!({
                    "x": "d", "y": "epsilon", "y_scale": "symlog",
                    "admissible": [diag.admissible.0, diag.admissible.1],
                    "colors": {"PEN": "blue", "REB": "red", "OSC": "green", "STA": "orange", "Unresolved": "gray"},
                }),
            )
        }
        ExportInput::Transition { curves, pulse } => {
            if pulse.samples.is_empty() && curves.is_empty() {
                return Err(missing());
            }
            let rows = curves
                .iter()
                .map(|(n, t)| (n.as_str(), t))
                .chain(std::iter::once(("pulse", pulse)))
                .flat_map(|(n, t)| t.samples.iter().map(move |s| vec![n.to_string(), fmt17(s.0), fmt17(s.1), fmt17(s.2)]));
            files.push(out.write(&format!("diagrams/{stem}.csv"), &csv_string(&["curve", "t", "p", "alpha"], rows)?)?);
            (
                vec![
                    ("curve", "manifold name, or pulse for the orbit from (-inf, alpha_plus)"),
                    ("t", "ODE time"),
                    ("p", "pulse position"),
                    ("alpha", "velocity amplitude"),
                ],
                serde_json::json!({"x": "p", "y": "alpha"}),
            )
        }
        ExportInput::Basin(b) => {
            if b.labels.is_empty() {
                return Err(missing());
            }
            let n = b.p_axis.len();
            let rows = b.labels.iter().enumerate().map(|(k, l)| {
                vec![fmt17(b.p_axis[k % n]), fmt17(b.alpha_axis[k / n]), l.label().to_string()]
            });
            files.push(out.write(&format!("diagrams/{stem}.csv"), &csv_string(&["p", "alpha", "outcome"], rows)?)?);
            let line = b.boundary.iter().map(|&(p, a)| vec![fmt17(p), fmt17(a)]);
            files.push(out.write(&format!("diagrams/{stem}_boundary.csv"), &csv_string(&["p", "alpha"], line)?)?);
            (
                vec![("p", "initial position"), ("alpha", "initial velocity amplitude"), ("outcome", "label of the orbit")],
                serde_json::json!({
                    "x": "p", "y": "alpha", "epsilon": b.epsilon, "saddle_index": b.saddle_index, "turns": b.turns,
                    "boundary_file": format!("{stem}_boundary.csv"),
                    "colors": {"PEN": "blue", "REB": "red", "OSC": "green", "STA": "orange", "Unresolved": "gray"},
                }),
            )
        }
    };
    let cols: serde_json::Map<String, serde_json::Value> =
        columns.into_iter().map(|(k, v)| (k.to_string(), v.into())).collect();
    files.push(out.write_json(
        &format!("diagrams/{stem}.json"),
        &serde_json::json!({"kind": kind, "columns": cols, "legend": legend}),
    )?);
    Ok(files)
}

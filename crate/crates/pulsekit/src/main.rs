use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pulsekit::continuation::{continue_branch, ContinuationOptions};
use pulsekit::io::{
    build_atlas, collision_pulse, export_figure_data, load_solution, reduced_pulse, run_manifest, ExperimentManifest,
    ExportInput, ExportKind, OutputDir,
};
use pulsekit::model::{load_config, HeterogeneityBump, ModelParams};
use pulsekit::outcomes::{ode_phase_diagram, pde_phase_diagram, Launch, PdeRunOptions, PhaseDiagram};
use pulsekit::reduced::{basin_boundary, build_reduced, critical_points, pulse_orbit, transition_scan, BasinReport};
use pulsekit::seeds::{stationary_pulse, traveling_pulse};
use pulsekit::shooting::{solve, ConvergedSolution, Forcing, ParamKind, ShootingTarget, SolutionClass};
use pulsekit::spectral::{run_collision, RunOptions};
use pulsekit::{Error, Result};

#[derive(Parser)]
#[command(name = "pulsekit", version, about = "Pulse collisions with a bump heterogeneity")]
struct Cli {
    /// Model config (JSON); defaults to the built-in parameter set.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Converged solution (JSON) to start from.
    #[arg(long, global = true)]
    seed_file: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Class {
    Steady,
    Traveling,
}

#[derive(Clone, Copy, ValueEnum)]
enum Param {
    Kappa1,
    Epsilon,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dyn {
    Ode,
    Pde,
}

#[derive(Subcommand)]
enum Cmd {
    /// Launch a traveling pulse at the bump and record its position.
    Simulate {
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.05)]
        d: f64,
        #[arg(long, default_value_t = 5000.0)]
        t_end: f64,
        #[arg(long, default_value_t = 1e-2)]
        dt: f64,
    },
    /// Newton-Krylov solve from the seed (or a freshly built pulse).
    Solve {
        #[arg(long, value_enum, default_value = "steady")]
        class: Class,
        #[arg(long)]
        kappa1: Option<f64>,
    },
    /// Continue the seed solution in one parameter.
    Continue {
        #[arg(long, value_enum, default_value = "kappa1")]
        param: Param,
        #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
        direction: f64,
        #[arg(long, allow_hyphen_values = true)]
        min: f64,
        #[arg(long, allow_hyphen_values = true)]
        max: f64,
        #[arg(long, default_value_t = 400)]
        max_points: usize,
        /// Eigenvalues per point (0 skips stability).
        #[arg(long, default_value_t = 6)]
        eigs: usize,
    },
    /// Stationary HIOP branches from shifted one-peak seeds, continued in ε.
    HiopAtlas {
        #[arg(long, default_value_t = 0.05)]
        d: f64,
        #[arg(long, default_value_t = -0.035866, allow_hyphen_values = true)]
        eps_min: f64,
        #[arg(long, default_value_t = 0.012)]
        eps_max: f64,
    },
    /// Reduced ODE: critical points, the pulse orbit and outcome transitions.
    Reduced {
        #[arg(long, default_value_t = 0.05)]
        d: f64,
        #[arg(long, allow_hyphen_values = true)]
        epsilon: f64,
        /// Also scan outcomes on a symmetric log grid up to this |ε|.
        #[arg(long)]
        scan_to: Option<f64>,
        /// Basin grid at ε around this saddle index.
        #[arg(long, allow_hyphen_values = true)]
        basin_saddle: Option<i64>,
    },
    /// (d, ε) phase diagram.
    Phase {
        #[arg(long, value_enum)]
        dynamics: Dyn,
        #[arg(long, value_delimiter = ',', default_value = "0.05")]
        d: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        epsilon: Vec<f64>,
        #[arg(long, default_value_t = 0.0)]
        refine: f64,
    },
    /// Re-export stored results as plot-ready CSV plus a JSON sidecar.
    Export {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        input: PathBuf,
    },
    /// Run an experiment manifest.
    Run { manifest: PathBuf },
}

fn params_of(cli: &Cli) -> Result<(ModelParams, Option<HeterogeneityBump>)> {
    match &cli.config {
        Some(p) => load_config(p),
        None => Ok((ModelParams::default(), None)),
    }
}

fn seed(cli: &Cli) -> Result<Option<ConvergedSolution>> {
    cli.seed_file.as_ref().map(|p| load_solution(p)).transpose()
}

fn log_grid(max: f64, n: usize) -> Vec<f64> {
    let lo = max * 1e-3;
    let pos: Vec<f64> = (0..n).map(|i| lo * (max / lo).powf(i as f64 / (n - 1) as f64)).collect();
    pos.iter().rev().map(|e| -e).chain(pos.iter().copied()).collect()
}

fn run(cli: &Cli) -> Result<()> {
    let (params, bump) = params_of(cli)?;
    let out = OutputDir::create(&cli.out)?;
    match &cli.cmd {
        Cmd::Simulate { epsilon, d, t_end, dt } => {
            let pulse = match seed(cli)? {
                Some(s) => s,
                None => traveling_pulse(&params, params.kappa1_base)?,
            };
            let bump = bump.unwrap_or(HeterogeneityBump::new(*epsilon, *d));
            let launch = Launch::new(&pulse, -0.3)?;
            let l = params.domain_length;
            let init = launch.initial_state(bump.center_in(l))?;
            let field = Forcing::with_bump(params.kappa1_base, bump).field(&pulse.params);
            let traj = run_collision(&init, &pulse.params, &field, *t_end, RunOptions { dt: *dt, ..Default::default() })?;
            let path = out.write_json("trajectories/trajectory.json", &traj)?;
            println!("{path}");
        }
        Cmd::Solve { class, kappa1 } => {
            let k1 = kappa1.unwrap_or(params.kappa1_base);
            let sol = match (seed(cli)?, class) {
                (Some(s), Class::Steady) => solve(&s.state, &ShootingTarget::steady(), &s.params, &Forcing { kappa1: k1, ..s.forcing })?,
                (Some(s), Class::Traveling) => {
                    solve(&s.state, &ShootingTarget::traveling(s.U), &s.params, &Forcing { kappa1: k1, ..s.forcing })?
                }
                (None, Class::Steady) => stationary_pulse(&params, k1)?,
                (None, Class::Traveling) => traveling_pulse(&params, k1)?,
            };
            println!("class {:?} U {:.10e} residual {:.3e}", sol.class, sol.U, sol.residual);
            println!("{}", out.write_json("solution.json", &sol)?);
        }
        Cmd::Continue { param, direction, min, max, max_points, eigs } => {
            let start = seed(cli)?.ok_or_else(|| Error::MissingInput("--seed-file".into()))?;
            let kind = match param {
                Param::Kappa1 => ParamKind::Kappa1,
                Param::Epsilon => ParamKind::Epsilon,
            };
            let target = match start.class {
                SolutionClass::SteadyTraveling => ShootingTarget::traveling(start.U),
                _ => ShootingTarget::steady(),
            };
            let mut opts = ContinuationOptions::new(kind, *direction, target);
            opts.stop.param_min = *min;
            opts.stop.param_max = *max;
            opts.stop.max_points = *max_points;
            opts.n_eigs = *eigs;
            let b = continue_branch(&start, &opts)?;
            println!("{}", out.write("branches/branch.csv", &b.to_csv()?)?);
            println!("{}", out.write_json("branches/branch.json", &b)?);
        }
        Cmd::HiopAtlas { d, eps_min, eps_max } => {
            let atlas = build_atlas(&params, *d, (*eps_min, *eps_max), seed(cli)?, None)?;
            for e in &atlas.entries {
                if let Some(b) = &e.branch {
                    let name: String = e.name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
                    out.write(&format!("branches/{name}.csv"), &b.to_csv()?)?;
                }
            }
            out.write_json("branches/atlas.json", &atlas.manifest())?;
            for f in export_figure_data(ExportInput::Hiop(&atlas), &out, "hiop")? {
                println!("{f}");
            }
        }
        Cmd::Reduced { d, epsilon, scan_to, basin_saddle } => {
            let pulse = match seed(cli)? {
                Some(s) => s,
                None => reduced_pulse(&params)?,
            };
            let pulse = ConvergedSolution { params: ModelParams { tau: params.tau, ..pulse.params }, ..pulse };
            let sys = build_reduced(&pulse, *d)?;
            let r = 0.5 * sys.domain_length;
            for c in critical_points(&sys, *epsilon, (-r, r))? {
                println!("P{} p = {:.8} {:?} sigma = {:?}", c.index, c.p, c.kind, c.saddle_quantity);
            }
            let orbit = pulse_orbit(&sys, *epsilon, 5e6);
            println!("pulse orbit: {} ({:?})", orbit.terminal_classification.label(), orbit.limit);
            export_figure_data(ExportInput::Transition { curves: &[], pulse: &orbit }, &out, "pulse_orbit")?;
            if let Some(m) = scan_to {
                let (_, events) = transition_scan(&sys, &log_grid(*m, 40), 1e-9);
                for e in &events {
                    println!("{} at {:.9e}", e.kind, e.epsilon);
                }
                out.write_json("diagrams/transitions.json", &events)?;
            }
            if let Some(k) = basin_saddle {
                let ap = sys.alpha_plus();
                let b = basin_boundary(&sys, *epsilon, *k, ((-0.1, 0.1), (-1.5 * ap, 1.5 * ap)), 60)?;
                export_figure_data(ExportInput::Basin(&b), &out, "basin")?;
                out.write_json("diagrams/basin_report.json", &b)?;
            }
        }
        Cmd::Phase { dynamics, d, epsilon, refine } => {
            let diag = match dynamics {
                Dyn::Ode => {
                    let pulse = match seed(cli)? {
                        Some(s) => s,
                        None => reduced_pulse(&params)?,
                    };
                    let pulse = ConvergedSolution { params: ModelParams { tau: params.tau, ..pulse.params }, ..pulse };
                    let systems = d.iter().map(|&d| Ok((d, build_reduced(&pulse, d)?))).collect::<Result<Vec<_>>>()?;
                    ode_phase_diagram(&systems, epsilon, *refine)?
                }
                Dyn::Pde => {
                    let pulse = match seed(cli)? {
                        Some(s) => s,
                        None => collision_pulse(&params)?,
                    };
                    pde_phase_diagram(&Launch::new(&pulse, -0.3)?, d, epsilon, *refine, &PdeRunOptions::default())?
                }
            };
            for f in export_figure_data(ExportInput::Phase(&diag), &out, "phase")? {
                println!("{f}");
            }
        }
        Cmd::Export { kind, input } => {
            let kind = ExportKind::parse(kind)
                .ok_or_else(|| Error::ConfigInvalid { field: "--kind".into(), reason: format!("unknown kind {kind}") })?;
            let text = std::fs::read_to_string(input)
                .map_err(|e| Error::MissingInput(format!("{}: {e}", input.display())))?;
            let files = match kind {
                ExportKind::Snaking | ExportKind::Isola => {
                    let branches: Vec<pulsekit::continuation::Branch> = serde_json::from_str(&text)
                        .or_else(|_| serde_json::from_str(&text).map(|b| vec![b]))?;
                    let input = if kind == ExportKind::Snaking {
                        ExportInput::Snaking(&branches)
                    } else {
                        ExportInput::Isola(&branches)
                    };
                    export_figure_data(input, &out, &format!("{kind:?}").to_lowercase())?
                }
                ExportKind::Phase => {
                    let diag: PhaseDiagram = serde_json::from_str(&text)?;
                    export_figure_data(ExportInput::Phase(&diag), &out, "phase")?
                }
                ExportKind::Basin => {
                    let b: BasinReport = serde_json::from_str(&text)?;
                    export_figure_data(ExportInput::Basin(&b), &out, "basin")?
                }
                ExportKind::Hiop | ExportKind::Transition => {
                    return Err(Error::MissingInput(format!(
                        "{kind:?} exports are written by the hiop-atlas and reduced subcommands"
                    )))
                }
            };
            for f in files {
                println!("{f}");
            }
        }
        Cmd::Run { manifest } => {
            let mut m = ExperimentManifest::load(manifest)?;
            if m.output.is_relative() {
                m.output = cli.out.join(&m.output);
            }
            let report = run_manifest(&m)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // only fails if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

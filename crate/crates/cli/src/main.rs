mod config;
mod error;
mod plot;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use slipctl::analysis::{
    find_equilibria, linearize_decel, linearize_slip, psi, psi_peak, stability_gain_bound, FirstOrderTf,
};
use slipctl::controllers::{zn_pid_from_relay, TuningRule};
use slipctl::fuzzy::{memberships, weighted_reference, weights};
use slipctl::scenario::{
    batch, run, slip_relay_experiment, Metrics, RunFailure, RunOutput, ScenarioConfig, Trace,
};

use config::{Loaded, Manifest, MANIFEST_FILE};
use error::CliError;
use plot::{emit_plot, PlotDocument, Series};

#[derive(Debug, Parser)]
#[command(name = "slipctl", version, about = "Wheel-slip braking control laboratory")]
struct Cli {
    /// Scenario, sweep or manifest file, or a builtin name (protocol, switching).
    #[arg(long, global = true)]
    config: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the noise seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the integration step in seconds.
    #[arg(long, global = true)]
    dt: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one scenario and write trace.csv, metrics.csv, slip.svg and manifest.toml.
    Simulate,
    /// Run a sweep (or a single scenario) in parallel.
    Batch,
    /// Relay experiment and Ziegler-Nichols gains.
    Autotune(AutotuneArgs),
    /// Stationary slips for a constant brake torque.
    Equilibria(EquilibriaArgs),
    /// Small-signal transfer functions about an operating point.
    Linearize(LinearizeArgs),
    /// Sampled friction curves, one CSV per surface.
    Friction(FrictionArgs),
    /// Fuzzy road weights for an optimal-slip estimate.
    Weights(WeightsArgs),
}

#[derive(Debug, Args, Serialize)]
struct AutotuneArgs {
    /// Surface to tune on; defaults to the config's design surface.
    #[arg(long)]
    surface: Option<String>,
    /// Frozen vehicle speed; defaults to the config's initial speed.
    #[arg(long)]
    speed: Option<f64>,
    /// Slip set point; defaults to the surface's optimal slip.
    #[arg(long)]
    slip: Option<f64>,
    /// Relay amplitude as a fraction of the maximum brake torque.
    #[arg(long)]
    relay_fraction: Option<f64>,
    #[arg(long, value_enum)]
    rule: Option<RuleArg>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum RuleArg {
    ZnClassic,
    Pessen,
    SomeOvershoot,
    NoOvershoot,
}

impl From<RuleArg> for TuningRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::ZnClassic => TuningRule::ZnClassic,
            RuleArg::Pessen => TuningRule::Pessen,
            RuleArg::SomeOvershoot => TuningRule::SomeOvershoot,
            RuleArg::NoOvershoot => TuningRule::NoOvershoot,
        }
    }
}

#[derive(Debug, Args, Serialize)]
#[group(required = true, multiple = false)]
struct TorqueChoice {
    /// Brake torque in N*m.
    #[arg(long)]
    torque: Option<f64>,
    /// Brake torque as a fraction of the peak of the stationary torque curve.
    #[arg(long)]
    fraction: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
struct EquilibriaArgs {
    #[command(flatten)]
    #[serde(flatten)]
    torque: TorqueChoice,
    #[arg(long)]
    surface: Option<String>,
}

#[derive(Debug, Args, Serialize)]
struct LinearizeArgs {
    /// Operating slip; defaults to the surface's optimal slip.
    #[arg(long)]
    slip: Option<f64>,
    /// Vehicle speed; defaults to the config's initial speed.
    #[arg(long)]
    speed: Option<f64>,
    #[arg(long)]
    surface: Option<String>,
}

#[derive(Debug, Args, Serialize)]
struct FrictionArgs {
    /// Comma-separated surface names, or `all`.
    #[arg(long, default_value = "all")]
    surfaces: String,
    #[arg(long, default_value_t = 200)]
    points: usize,
}

#[derive(Debug, Args, Serialize)]
struct WeightsArgs {
    #[arg(long)]
    lambda_opt: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("slipctl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    if let Some(dt) = cli.dt {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(CliError::Usage(format!("--dt must be positive, got {dt}")));
        }
    }
    let mut loaded = config::load(cli.config.as_deref())?;
    loaded.apply_overrides(cli.seed, cli.dt);
    let out = cli.out.as_deref();
    match cli.command {
        Command::Simulate => simulate(loaded, out.unwrap_or(Path::new("."))),
        Command::Batch => run_batch(loaded, out.unwrap_or(Path::new("."))),
        Command::Autotune(a) => autotune(loaded, out, &a),
        Command::Equilibria(a) => equilibria(loaded, out, &a),
        Command::Linearize(a) => linearize(loaded, out, &a),
        Command::Friction(a) => friction(loaded, out.unwrap_or(Path::new(".")), &a),
        Command::Weights(a) => fuzzy_weights(loaded, out, &a),
    }
}

/// Collects output files for one command and records their hashes.
struct OutputDir<'a> {
    dir: &'a Path,
    written: BTreeMap<String, String>,
}

impl<'a> OutputDir<'a> {
    fn create(dir: &'a Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.display().to_string(), e))?;
        Ok(Self { dir, written: BTreeMap::new() })
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents).map_err(|e| CliError::Io(path.display().to_string(), e))?;
        self.written.insert(name.into(), config::sha256_hex(contents));
        Ok(())
    }

    fn plot(&mut self, name: &str, doc: &PlotDocument) -> Result<(), CliError> {
        let path = self.dir.join(name);
        emit_plot(doc, &path)?;
        let bytes = std::fs::read(&path).map_err(|e| CliError::Io(path.display().to_string(), e))?;
        self.written.insert(name.into(), config::sha256_hex(&bytes));
        Ok(())
    }

    fn finish(self, command: &str, loaded: &Loaded, arguments: toml::Table) -> Result<(), CliError> {
        let mut manifest = Manifest::new(command, loaded, arguments)?;
        manifest.outputs = self.written;
        let path = self.dir.join(MANIFEST_FILE);
        std::fs::write(&path, manifest.to_toml()?).map_err(|e| CliError::Io(path.display().to_string(), e))
    }
}

fn arguments<T: Serialize>(args: &T) -> toml::Table {
    toml::Table::try_from(args).unwrap_or_default()
}

/// Quote a free-text CSV field when it needs it.
fn csv_field(text: &str) -> String {
    if text.contains([',', '"', '\n']) {
        format!("\"{}\"", text.replace('"', "\"\""))
    } else {
        text.to_string()
    }
}

fn trace_bytes(trace: &Trace) -> Vec<u8> {
    trace.to_csv_string().into_bytes()
}

fn metrics_bytes(m: &Metrics) -> Vec<u8> {
    let mut buf = Vec::new();
    m.write_csv(&mut buf).expect("writing to memory cannot fail");
    buf
}

fn slip_plot(cfg: &ScenarioConfig, trace: &Trace) -> PlotDocument {
    let t: Vec<f64> = trace.rows.iter().map(|r| r.t).collect();
    let lambda: Vec<f64> = trace.rows.iter().map(|r| r.lambda).collect();
    let reference: Vec<f64> = trace.rows.iter().map(|r| r.lambda_ref).collect();
    let (lo, hi) = lambda
        .iter()
        .chain(&reference)
        .filter(|x| x.is_finite())
        .fold((0.0f64, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
    let mut series = vec![Series::new("slip", t.clone(), lambda), Series::new("reference", t, reference)];
    for &(start, _) in &trace.disturbances {
        series.push(Series::new("disturbance", vec![start, start], vec![lo, hi]));
    }
    PlotDocument {
        title: format!("{}: wheel slip", cfg.name),
        x_label: "time [s]".into(),
        y_label: "slip [-]".into(),
        series,
    }
}

fn simulate(loaded: Loaded, dir: &Path) -> Result<(), CliError> {
    let cfg = loaded.clone().into_scenario()?;
    cfg.validate()?;
    let result = run(&cfg);
    let mut out = OutputDir::create(dir)?;
    match result {
        Ok(RunOutput { trace, metrics, .. }) => {
            out.write("trace.csv", &trace_bytes(&trace))?;
            out.write("metrics.csv", &metrics_bytes(&metrics))?;
            out.plot("slip.svg", &slip_plot(&cfg, &trace))?;
            out.finish("simulate", &loaded, toml::Table::new())?;
            println!("{}: {}", cfg.name, metrics.summary());
            Ok(())
        }
        Err(RunFailure { error, trace }) => {
            if let Some(trace) = trace {
                out.write("trace.csv", &trace_bytes(&trace))?;
            }
            out.finish("simulate", &loaded, toml::Table::new())?;
            Err(error.into())
        }
    }
}

fn run_batch(loaded: Loaded, dir: &Path) -> Result<(), CliError> {
    let configs = match &loaded {
        Loaded::Scenario(c) => vec![c.clone()],
        Loaded::Sweep(s) => s.expand()?,
    };
    let results = batch(&configs);
    let mut out = OutputDir::create(dir)?;
    let mut table = format!("index,name,status,{}\n", Metrics::HEADER);
    let mut worst: Option<CliError> = None;
    for (i, (cfg, res)) in configs.iter().zip(&results).enumerate() {
        let name = format!("trace_{i:03}.csv");
        match res {
            Ok(o) => {
                out.write(&name, &trace_bytes(&o.trace))?;
                let _ = writeln!(table, "{i},{},ok,{}", csv_field(&cfg.name), o.metrics.csv_row());
            }
            Err(f) => {
                if let Some(trace) = &f.trace {
                    out.write(&name, &trace_bytes(trace))?;
                }
                eprintln!("slipctl: scenario {i} ({}): {}", cfg.name, f.error);
                let _ = writeln!(
                    table,
                    "{i},{},error{}",
                    csv_field(&cfg.name),
                    ",".repeat(Metrics::HEADER.split(',').count())
                );
                let e = CliError::Core(f.error.clone());
                if worst.as_ref().is_none_or(|w| e.exit_code() > w.exit_code()) {
                    worst = Some(e);
                }
            }
        }
    }
    out.write("metrics.csv", table.as_bytes())?;
    out.finish("batch", &loaded, toml::Table::new())?;
    println!("{} scenarios, {} failed", results.len(), results.iter().filter(|r| r.is_err()).count());
    worst.map_or(Ok(()), Err)
}

fn autotune(loaded: Loaded, dir: Option<&Path>, args: &AutotuneArgs) -> Result<(), CliError> {
    let cfg = loaded.clone().into_scenario()?;
    let surfaces = cfg.surface_set()?;
    let surface = surfaces.get(args.surface.as_deref().unwrap_or(cfg.design_surface()))?;
    let speed = args.speed.unwrap_or(cfg.initial_speed);
    let slip = match args.slip {
        Some(s) => s,
        None => surface.optimal_slip()?.slip,
    };
    let fraction = args.relay_fraction.unwrap_or(cfg.controller.pid.relay_fraction);
    let rule = args.rule.map(TuningRule::from).unwrap_or(cfg.controller.pid.rule);
    let relay = slip_relay_experiment(&cfg.vehicle, &cfg.actuator, surface, slip, speed, fraction, cfg.dt)?;
    let gains = zn_pid_from_relay(&relay, rule)?;

    #[derive(Serialize)]
    struct Report<'a> {
        surface: &'a str,
        speed: f64,
        slip: f64,
        k_u: f64,
        p_u: f64,
        amplitude: f64,
        rule: TuningRule,
        kp: f64,
        ki: f64,
        kd: f64,
    }
    let report = Report {
        surface: &surface.name,
        speed,
        slip,
        k_u: relay.k_u,
        p_u: relay.p_u,
        amplitude: relay.amplitude,
        rule,
        kp: gains.kp,
        ki: gains.ki,
        kd: gains.kd,
    };
    print!("{}", toml::to_string(&report).map_err(|e| CliError::Usage(e.to_string()))?);
    if let Some(dir) = dir {
        let csv = format!(
            "surface,speed,slip,k_u,p_u,amplitude,kp,ki,kd\n{},{},{},{},{},{},{},{},{}\n",
            surface.name, speed, slip, relay.k_u, relay.p_u, relay.amplitude, gains.kp, gains.ki, gains.kd
        );
        let mut out = OutputDir::create(dir)?;
        out.write("autotune.csv", csv.as_bytes())?;
        out.finish("autotune", &loaded, arguments(args))?;
    }
    Ok(())
}

fn equilibria(loaded: Loaded, dir: Option<&Path>, args: &EquilibriaArgs) -> Result<(), CliError> {
    let cfg = loaded.clone().into_scenario()?;
    let surfaces = cfg.surface_set()?;
    let surface = surfaces.get(args.surface.as_deref().unwrap_or(cfg.design_surface()))?;
    let torque = match (args.torque.torque, args.torque.fraction) {
        (Some(t), _) => t,
        (None, Some(f)) => f * psi_peak(&cfg.vehicle, surface).1,
        (None, None) => unreachable!("clap enforces one of --torque/--fraction"),
    };
    let set = find_equilibria(torque, &cfg.vehicle, surface)?;
    if set.wheel_lock {
        log::warn!("torque {torque} N*m exceeds the peak of the stationary torque curve: the wheel locks");
    }
    let mut csv = String::from("lambda,psi,stability\n");
    for e in &set.equilibria {
        let _ = writeln!(
            csv,
            "{},{},{}",
            e.lambda_eq,
            psi(e.lambda_eq, &cfg.vehicle, surface),
            e.stability.label()
        );
    }
    emit_text(dir, "equilibria.csv", &csv, "equilibria", &loaded, arguments(args))
}

fn linearize(loaded: Loaded, dir: Option<&Path>, args: &LinearizeArgs) -> Result<(), CliError> {
    let cfg = loaded.clone().into_scenario()?;
    let surfaces = cfg.surface_set()?;
    let surface = surfaces.get(args.surface.as_deref().unwrap_or(cfg.design_surface()))?;
    let slip = match args.slip {
        Some(s) => s,
        None => surface.optimal_slip()?.slip,
    };
    let speed = args.speed.unwrap_or(cfg.initial_speed);

    #[derive(Serialize)]
    struct Report<'a> {
        surface: &'a str,
        slip: f64,
        speed: f64,
        /// Proportional gain above which the slip loop is stable.
        stability_gain_bound: f64,
        slip_tf: FirstOrderTf,
        decel_tf: FirstOrderTf,
    }
    let report = Report {
        surface: &surface.name,
        slip,
        speed,
        stability_gain_bound: stability_gain_bound(slip, &cfg.vehicle, surface)?,
        slip_tf: linearize_slip(slip, speed, &cfg.vehicle, surface)?,
        decel_tf: linearize_decel(slip, speed, &cfg.vehicle, surface)?,
    };
    let text = toml::to_string(&report).map_err(|e| CliError::Usage(e.to_string()))?;
    emit_text(dir, "linearize.toml", &text, "linearize", &loaded, arguments(args))
}

fn friction(loaded: Loaded, dir: &Path, args: &FrictionArgs) -> Result<(), CliError> {
    let cfg = loaded.clone().into_scenario()?;
    let set = cfg.surface_set()?;
    let names: Vec<String> = if args.surfaces == "all" {
        set.names().iter().map(|s| s.to_string()).collect()
    } else {
        args.surfaces.split(',').map(|s| s.trim().to_string()).collect()
    };
    let mut curves = Vec::new();
    for name in &names {
        curves.push((name, set.get(name)?.friction_curve(args.points)?));
    }
    let mut out = OutputDir::create(dir)?;
    let mut series = Vec::new();
    for (name, curve) in curves {
        let mut csv = String::from("lambda,mu\n");
        for p in &curve {
            let _ = writeln!(csv, "{},{}", p.lambda, p.mu);
        }
        out.write(&format!("friction_{name}.csv"), csv.as_bytes())?;
        series.push(Series::new(
            name.clone(),
            curve.iter().map(|p| p.lambda).collect(),
            curve.iter().map(|p| p.mu).collect(),
        ));
    }
    let doc = PlotDocument {
        title: "Friction curves".into(),
        x_label: "slip [-]".into(),
        y_label: "friction coefficient [-]".into(),
        series,
    };
    out.plot("friction.svg", &doc)?;
    out.finish("friction", &loaded, arguments(args))
}

fn fuzzy_weights(loaded: Loaded, dir: Option<&Path>, args: &WeightsArgs) -> Result<(), CliError> {
    let cfg = loaded.clone().into_scenario()?;
    let (subset, bank) = cfg.membership_bank()?;
    let raw = memberships(args.lambda_opt, &bank)?;
    let w = weights(&raw, &bank.labels)?;
    let opts: Vec<f64> = bank
        .labels
        .iter()
        .map(|l| Ok(subset.get(l)?.optimal_slip()?.slip))
        .collect::<slipctl::Result<_>>()?;
    log::info!("blended reference slip {}", weighted_reference(&w, &opts)?);
    let mut csv = String::from("surface,membership,weight\n");
    for ((label, weight), m) in w.weights.iter().zip(&raw) {
        let _ = writeln!(csv, "{label},{m},{weight}");
    }
    emit_text(dir, "weights.csv", &csv, "weights", &loaded, arguments(args))
}

/// Print to stdout and, when an output directory was given, save with a manifest.
fn emit_text(
    dir: Option<&Path>,
    name: &str,
    text: &str,
    command: &str,
    loaded: &Loaded,
    args: toml::Table,
) -> Result<(), CliError> {
    print!("{text}");
    if let Some(dir) = dir {
        let mut out = OutputDir::create(dir)?;
        out.write(name, text.as_bytes())?;
        out.finish(command, loaded, args)?;
    }
    Ok(())
}

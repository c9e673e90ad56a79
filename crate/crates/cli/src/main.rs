use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use emfg::experiments::{self, ExperimentOptions, ExperimentRow, FamilyMember};
use emfg::meanfield::{consistency_residual, solve_consistency, SolverConfig};
use emfg::model::PopulationSpec;
use emfg::nalgebra::DVector;
use emfg::numerics::{mean_and_se, TimeGrid};
use emfg::trading::{self, MarketData, MarketParams, RlConfig};
use emfg::{reference, Exec};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "emfg", version, about = "Exploratory LQG mean field games: solve, verify, trade")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the consistency system and report stability margins.
    Solve {
        /// Spec JSON file, or `builtin:<name>` for a reference game.
        spec: String,
        #[command(flatten)]
        flags: Flags,
    },
    /// Monte Carlo and analytic verification experiments.
    Experiment {
        kind: ExperimentKind,
        spec: String,
        #[command(flatten)]
        flags: Flags,
        /// Sub-population whose agents are tested.
        #[arg(long = "type", default_value_t = 0)]
        k: usize,
        #[arg(long, value_enum, default_value_t = Family::Standard)]
        family: Family,
        /// Mean shift of the deviating agent in cost-gap.
        #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
        shift: f64,
    },
    /// Execution game: simulate a planned market or run the learning loop.
    Trade {
        kind: TradeKind,
        /// Market parameters JSON (`{"truth": .., "init": ..}` also accepted for learn).
        params: String,
        #[command(flatten)]
        flags: Flags,
        #[arg(long, default_value_t = 10)]
        traders: usize,
        #[arg(long, default_value_t = 5)]
        iterations: usize,
        #[arg(long, default_value_t = 0.1)]
        lambda_explore: f64,
    },
}

#[derive(Args, Debug, Clone, Serialize)]
struct Flags {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    damping: Option<f64>,
    #[arg(long)]
    reps: Option<usize>,
    /// Comma separated population sizes.
    #[arg(long = "Ns", value_delimiter = ',')]
    ns: Option<Vec<usize>>,
    /// Comma separated exploration weights.
    #[arg(long, value_delimiter = ',')]
    lambda_list: Option<Vec<f64>>,
    /// Run loops on one thread (results are identical either way).
    #[arg(long)]
    sequential: bool,
}

impl Flags {
    fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }

    fn overrides(&self) -> BTreeMap<String, Value> {
        let mut map = BTreeMap::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                map.insert(k.to_string(), v);
            }
        };
        put("steps", self.steps.map(Value::from));
        put("horizon", self.horizon.map(Value::from));
        put("tol", self.tol.map(Value::from));
        put("damping", self.damping.map(Value::from));
        put("reps", self.reps.map(Value::from));
        put("Ns", self.ns.clone().map(Value::from));
        put("lambda_list", self.lambda_list.clone().map(Value::from));
        if self.sequential {
            put("sequential", Some(Value::from(true)));
        }
        map
    }

    fn solver(&self) -> SolverConfig {
        let mut c = SolverConfig::default();
        if let Some(t) = self.tol {
            c.tol = t;
        }
        if let Some(d) = self.damping {
            c.damping = d;
        }
        c.exec = self.exec();
        c
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ExperimentKind {
    CouplingGap,
    CostGap,
    Nash,
    Coe,
    LambdaSweep,
    EntropyAudit,
}

impl ExperimentKind {
    fn name(self) -> &'static str {
        match self {
            ExperimentKind::CouplingGap => "coupling-gap",
            ExperimentKind::CostGap => "cost-gap",
            ExperimentKind::Nash => "nash",
            ExperimentKind::Coe => "coe",
            ExperimentKind::LambdaSweep => "lambda-sweep",
            ExperimentKind::EntropyAudit => "entropy-audit",
        }
    }

    /// Default (horizon, steps, reps).
    fn defaults(self) -> (f64, usize, usize) {
        match self {
            ExperimentKind::CouplingGap => (2.0, 200, 64),
            ExperimentKind::CostGap => (12.0, 600, 64),
            ExperimentKind::Nash => (12.0, 600, 32),
            ExperimentKind::Coe => (150.0, 3000, 10_000),
            ExperimentKind::LambdaSweep => (1.0, 1, 10_000),
            ExperimentKind::EntropyAudit => (1.0, 1, 0),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Family {
    /// Mean shifts of ±0.25, ±0.5, ±1 and covariance scales 0.5, 2.
    Standard,
    /// Small shifts ±0.01, ±0.02, ±0.05 and scales 0.9, 1.1.
    Fine,
    /// Only the equilibrium policy itself.
    Equilibrium,
}

impl Family {
    fn members(self, m: usize) -> Vec<FamilyMember> {
        match self {
            Family::Standard => experiments::standard_family(m),
            Family::Fine => experiments::fine_family(m),
            Family::Equilibrium => vec![FamilyMember::new(DVector::zeros(m), 1.0)],
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum TradeKind {
    Simulate,
    Learn,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: Vec<String>,
    spec_path: &'a str,
    overrides: BTreeMap<String, Value>,
    seed: u64,
    output_dir: String,
    tool_version: &'static str,
    timestamp_unix: u64,
}

/// A failure that should exit with the numerical status code.
#[derive(Debug)]
struct NumericalFailure(String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().any(|cause| {
        cause.downcast_ref::<NumericalFailure>().is_some() || cause.downcast_ref::<emfg::Error>().is_some_and(emfg::Error::is_numerical)
    });
    if numerical {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report(None, &json!({"error": e.kind().to_string(), "message": e.to_string(), "exit_code": 1}));
            return ExitCode::from(1);
        }
    };
    let out = match &cli.command {
        Command::Solve { flags, .. } | Command::Experiment { flags, .. } | Command::Trade { flags, .. } => flags.out.clone(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            let kind = if code == 2 { "numerical" } else { "usage" };
            let message = format!("{err:#}");
            report(Some(&out), &json!({"error": kind, "message": message, "exit_code": code}));
            ExitCode::from(code)
        }
    }
}

fn report(out: Option<&Path>, body: &Value) {
    let text = serde_json::to_string_pretty(body).expect("json value");
    eprintln!("{text}");
    if let Some(dir) = out.filter(|d| d.is_dir()) {
        let _ = fs::write(dir.join("error.json"), format!("{text}\n"));
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Solve { spec, flags } => {
            let (spec_value, raw) = load_spec(&spec)?;
            prepare_out(&flags, &spec, "spec.json", &raw)?;
            cmd_solve(&spec_value, &flags)
        }
        Command::Experiment {
            kind,
            spec,
            flags,
            k,
            family,
            shift,
        } => {
            let (spec_value, raw) = load_spec(&spec)?;
            prepare_out(&flags, &spec, "spec.json", &raw)?;
            cmd_experiment(kind, &spec_value, &flags, k, family, shift)
        }
        Command::Trade {
            kind,
            params,
            flags,
            traders,
            iterations,
            lambda_explore,
        } => {
            let raw = fs::read_to_string(&params).with_context(|| format!("reading {params}"))?;
            let market: MarketFile = serde_json::from_str(&raw).with_context(|| format!("parsing {params}"))?;
            let (truth, init) = market.split();
            truth.check()?;
            init.check()?;
            prepare_out(&flags, &params, "params.json", &raw)?;
            match kind {
                TradeKind::Simulate => cmd_trade_simulate(&truth, &flags, traders, lambda_explore),
                TradeKind::Learn => cmd_trade_learn(&truth, &init, &flags, traders, iterations, lambda_explore),
            }
        }
    }
}

fn load_spec(arg: &str) -> anyhow::Result<(PopulationSpec, String)> {
    if let Some(name) = arg.strip_prefix("builtin:") {
        let spec = match name {
            "scalar-coe" => reference::scalar_coe(),
            "planar-coe" => reference::planar_coe(),
            "decoupled-scalar" => reference::decoupled_scalar(),
            "coupled" => reference::coupled_single_type(),
            "coupled-quiet" => reference::coupled_quiet(),
            "two-type" => reference::two_type(),
            other => bail!("unknown builtin spec `{other}` (scalar-coe, planar-coe, decoupled-scalar, coupled, coupled-quiet, two-type)"),
        };
        let raw = spec.to_json()?;
        return Ok((spec, raw));
    }
    let raw = fs::read_to_string(arg).with_context(|| format!("reading {arg}"))?;
    let spec = PopulationSpec::from_json(&raw).with_context(|| format!("parsing {arg}"))?;
    Ok((spec, raw))
}

fn prepare_out(flags: &Flags, input: &str, copy_name: &str, raw: &str) -> anyhow::Result<()> {
    fs::create_dir_all(&flags.out).with_context(|| format!("creating {}", flags.out.display()))?;
    fs::write(flags.out.join(copy_name), raw)?;
    let manifest = RunManifest {
        command: std::env::args().collect(),
        spec_path: input,
        overrides: flags.overrides(),
        seed: flags.seed,
        output_dir: flags.out.display().to_string(),
        tool_version: env!("CARGO_PKG_VERSION"),
        timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    write_json(&flags.out.join("run_manifest.json"), &manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, format!("{text}\n")).with_context(|| format!("writing {}", path.display()))
}

fn write_rows(path: &Path, rows: &[ExperimentRow]) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    experiments::write_csv(rows, &mut buf)?;
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

fn cmd_solve(spec: &PopulationSpec, flags: &Flags) -> anyhow::Result<()> {
    let mut config = flags.solver();
    config.horizon = flags.horizon;
    config.steps = flags.steps;
    let sol = solve_consistency(spec, &config)?;
    fs::write(flags.out.join("meanfield_solution.json"), sol.to_json()? + "\n")?;
    let stability = sol.stability(spec.rho);
    let stable = stability.iter().all(|r| r.ok);
    let report = json!({
        // solve_consistency only returns once the fixed point iteration has met `tol`
        "converged": true,
        "iterations": sol.iterations,
        "residual": sol.residual,
        "consistency_residual": consistency_residual(&sol, spec),
        "stable": stable,
        "types": stability,
    });
    write_json(&flags.out.join("stability_report.json"), &report)?;
    if !stable {
        return Err(NumericalFailure("solution violates the stability margins".into()).into());
    }
    Ok(())
}

fn cmd_experiment(kind: ExperimentKind, spec: &PopulationSpec, flags: &Flags, k: usize, family: Family, shift: f64) -> anyhow::Result<()> {
    let (horizon, steps, reps) = kind.defaults();
    let horizon = flags.horizon.unwrap_or(horizon);
    let steps = flags.steps.unwrap_or(steps);
    let reps = flags.reps.unwrap_or(reps);
    let ns = flags.ns.clone().unwrap_or_else(|| vec![16, 64, 256, 1024]);
    let grid = TimeGrid::new(0.0, horizon, steps)?;
    let mut opts = ExperimentOptions::new(grid);
    opts.exec = flags.exec();
    let m = spec.subpops.get(k).with_context(|| format!("type {k} out of range"))?.m();

    let needs_mf = !matches!(kind, ExperimentKind::EntropyAudit);
    let mf = if needs_mf { Some(solve_consistency(spec, &flags.solver())?) } else { None };
    let mf_ref = || mf.as_ref().expect("solved");

    let (rows, summary): (Vec<ExperimentRow>, Value) = match kind {
        ExperimentKind::CouplingGap => {
            let (rows, s) = experiments::coupling_gap_experiment(spec, mf_ref(), &ns, reps, flags.seed, &opts)?;
            (rows, serde_json::to_value(s)?)
        }
        ExperimentKind::CostGap => {
            let dev = (DVector::from_element(m, shift), 1.0);
            let (rows, s) = experiments::cost_gap_experiment(spec, mf_ref(), &ns, reps, flags.seed, dev, &opts)?;
            (rows, serde_json::to_value(s)?)
        }
        ExperimentKind::Nash => {
            let members = family.members(m);
            let mut rows = Vec::new();
            let mut summaries = Vec::new();
            for &n in &ns {
                let (r, s) = experiments::nash_deviation_experiment(spec, mf_ref(), n, &members, reps, flags.seed, &opts)?;
                rows.extend(r);
                summaries.push(s);
            }
            (rows, json!({ "family": family, "per_n": summaries }))
        }
        ExperimentKind::Coe => {
            let (rows, s) = experiments::coe_experiment(spec, mf_ref(), k, reps, flags.seed, &opts)?;
            let z = (s.estimate - s.analytic) / s.std_err;
            (rows, json!({ "coe": s, "z_score": z }))
        }
        ExperimentKind::LambdaSweep => {
            let lambdas = flags
                .lambda_list
                .clone()
                .unwrap_or_else(|| (0..=6).map(|e| 10f64.powi(-e)).collect());
            let (rows, points) = experiments::lambda_sweep(spec, mf_ref(), k, &lambdas, reps, flags.seed)?;
            let monotone = points.windows(2).all(|w| w[1].value_gap.abs() <= w[0].value_gap.abs());
            (rows, json!({ "points": points, "monotone_in_magnitude": monotone }))
        }
        ExperimentKind::EntropyAudit => {
            let (rows, audit) = experiments::entropy_audit(spec, k)?;
            (rows, serde_json::to_value(audit)?)
        }
    };
    write_rows(&flags.out.join(format!("{}.csv", kind.name())), &rows)?;
    write_json(&flags.out.join(format!("{}_summary.json", kind.name())), &summary)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MarketFile {
    Pair { truth: MarketParams, init: MarketParams },
    Single(MarketParams),
}

impl MarketFile {
    fn split(self) -> (MarketParams, MarketParams) {
        match self {
            MarketFile::Pair { truth, init } => (truth, init),
            MarketFile::Single(p) => (p.clone(), p),
        }
    }
}

fn cmd_trade_simulate(params: &MarketParams, flags: &Flags, traders: usize, lambda_explore: f64) -> anyhow::Result<()> {
    let grid = TimeGrid::new(0.0, params.horizon, flags.steps.unwrap_or(200))?;
    let episodes = flags.reps.unwrap_or(20);
    let plan = trading::plan_execution(params, lambda_explore, grid)?;
    let runs = flags.exec().try_map(episodes, |ep| {
        trading::simulate_market(params, &plan, traders, grid, emfg::numerics::derive_seed(flags.seed, ep as u64))
    })?;
    let mut csv = String::from("episode,t,F,nubar,q_mean\n");
    let mut data = MarketData::default();
    let mut costs = Vec::new();
    for (ep, paths) in runs.iter().enumerate() {
        for j in 0..=grid.steps {
            let q_mean = paths.q.iter().map(|q| q[j]).sum::<f64>() / traders as f64;
            let nubar = paths.nubar.get(j).copied().map_or(String::new(), |v| v.to_string());
            csv.push_str(&format!("{ep},{},{},{nubar},{q_mean}\n", grid.time(j), paths.f[j]));
        }
        paths.append_to(&mut data);
        costs.push(paths.mean_cost(params));
    }
    fs::write(flags.out.join("market_paths.csv"), csv)?;
    // Price increments net of the modelled impact drift should be centred.
    let residuals: Vec<f64> = data
        .price
        .iter()
        .map(|r| (r.df - params.lambda_perm * r.nubar * r.dt) / r.dt.sqrt())
        .collect();
    let (drift, drift_se) = mean_and_se(&residuals);
    let (cost, cost_se) = mean_and_se(&costs);
    let z = if drift_se > 0.0 { drift / drift_se } else { 0.0 };
    let summary = json!({
        "episodes": episodes,
        "traders": traders,
        "mean_cost": cost,
        "cost_std_err": cost_se,
        "plan_gain_q0": plan.gains[0][0],
        "martingale_residual_mean": drift,
        "martingale_residual_std_err": drift_se,
        "martingale_z": z,
        "martingale_ok": z.abs() < 4.0,
    });
    write_json(&flags.out.join("market_summary.json"), &summary)
}

fn cmd_trade_learn(
    truth: &MarketParams,
    init: &MarketParams,
    flags: &Flags,
    traders: usize,
    iterations: usize,
    lambda_explore: f64,
) -> anyhow::Result<()> {
    let config = RlConfig {
        traders,
        iterations,
        episodes: flags.reps.unwrap_or(5),
        steps: flags.steps.unwrap_or(200),
        lambda_explore,
        seed: flags.seed,
        exec: flags.exec(),
    };
    let trace = trading::rl_loop(truth, init, &config)?;
    let mut buf = Vec::new();
    trace.write_csv(&mut buf)?;
    fs::write(flags.out.join("learning_trace.csv"), buf)?;
    fs::write(flags.out.join("learning_trace.json"), trace.to_json()? + "\n")?;
    if let Some(f) = &trace.failure {
        return Err(NumericalFailure(f.clone()).into());
    }
    Ok(())
}

//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage (bad flags, unreadable input files, config
//! schema or dimension errors), 3 parse (malformed case, dispatch or config
//! JSON), 4 divergence or non-convergence, 5 infeasible case.
//!
//! Every command writes `<command>_manifest.json` next to its outputs. JSON
//! outputs carry a `"manifest"` field and CSV outputs start with a
//! `# manifest:` comment line naming it.
//! Wall times and timestamps are kept in the manifest only.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::attack::{find_worst_case_attack, AttackTrace};
use crate::driver::{run_scopf_with, RunHistory, ScopfConfig, HISTORY_CSV_HEADER};
use crate::error::Error;
use crate::evaluation::{evaluate_dispatch, sample_contingencies, EvaluationOptions};
use crate::grid::{parse_case, AttackVector, PowerSystem};
use crate::opf::solve_base_opf_full;
use crate::powerflow::{solve_power_flow, Dispatch, PowerFlowOptions};
use crate::third_stage::solve_third_stage;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_PARSE: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;
pub const EXIT_INFEASIBLE: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "nkscopf", version, about = "Adversarial N-k security-constrained optimal power flow")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// MATPOWER-style case file.
    pub case: PathBuf,
    /// Output directory.
    #[arg(long, env = "NKSCOPF_OUT_DIR", default_value = "nkscopf-out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Newton power flow at a dispatch (case set points when none is given).
    Powerflow {
        #[command(flatten)]
        common: Common,
        /// Dispatch JSON with `p` and `v` arrays in p.u.
        #[arg(long)]
        dispatch: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, default_value_t = 50)]
        max_iter: usize,
    },
    /// Base-case optimal power flow.
    Opf {
        #[command(flatten)]
        common: Common,
        /// Run config JSON; only its `solver` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Worst-case continuous attack against a fixed dispatch.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dispatch: PathBuf,
        /// Attack budget; clamped to the number of outage devices.
        #[arg(long)]
        k: usize,
        /// Run config JSON; its `attack` and `solver` sections are used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `attack.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Devices listed in the ranking.
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Full attack-defense loop.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        config: PathBuf,
    },
    /// Counts violated discrete outage scenarios for a dispatch.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dispatch: PathBuf,
        /// Scenario sizes, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "1,2")]
        sizes: Vec<usize>,
        /// Scenarios sampled per size; one value applies to every size.
        #[arg(long, value_delimiter = ',', default_value = "1000")]
        counts: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
        /// Slack norm (p.u.) above which a scenario is a violation.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Run config JSON; only its `solver` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Syntax { .. } | Error::Semantic(_) | Error::Json(_) => EXIT_PARSE,
        Error::Infeasible { .. } => EXIT_INFEASIBLE,
        Error::NonConvergence { .. }
        | Error::Singular { .. }
        | Error::Numerical(_)
        | Error::AttackAborted { .. }
        | Error::RunAborted { .. }
        | Error::Coordinate { .. } => EXIT_DIVERGED,
        Error::Dimension { .. } | Error::InvalidInput(_) | Error::StaleSolution | Error::Io(_) => EXIT_USAGE,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn read_input(path: &Path, what: &str) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::usage(format!("cannot read {what} {}: {e}", path.display())))
}

struct Session {
    command: &'static str,
    out: PathBuf,
    case_path: PathBuf,
    case_digest: String,
    config_digest: Option<String>,
    seed: Option<u64>,
    started: String,
    clock: Instant,
    outputs: Vec<String>,
    extra: serde_json::Map<String, Value>,
}

impl Session {
    fn open(command: &'static str, common: &Common) -> CliResult<(Self, PowerSystem)> {
        let bytes = read_input(&common.case, "case file")?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| CliError {
                code: EXIT_PARSE,
                message: format!("{} is not UTF-8 text", common.case.display()),
            })?;
        let sys = parse_case(&text)?;
        fs::create_dir_all(&common.out)
            .map_err(|e| CliError::usage(format!("cannot create {}: {e}", common.out.display())))?;
        let session = Session {
            command,
            out: common.out.clone(),
            case_path: common.case.clone(),
            case_digest: sha256_hex(&bytes),
            config_digest: None,
            seed: None,
            started: chrono::Utc::now().to_rfc3339(),
            clock: Instant::now(),
            outputs: Vec::new(),
            extra: serde_json::Map::new(),
        };
        Ok((session, sys))
    }

    fn manifest_name(&self) -> String {
        format!("{}_manifest.json", self.command)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&mut self, name: &str, contents: &str) -> CliResult<()> {
        fs::write(self.path(name), contents).map_err(Error::from)?;
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
        Ok(())
    }

    fn write_json(&mut self, name: &str, value: Value) -> CliResult<()> {
        let mut value = value;
        if let Value::Object(map) = &mut value {
            map.insert("manifest".into(), Value::String(self.manifest_name()));
        }
        let text = serde_json::to_string_pretty(&value).map_err(Error::from)? + "\n";
        self.write(name, &text)
    }

    fn write_csv(&mut self, name: &str, body: &str) -> CliResult<()> {
        self.write(name, &format!("# manifest: {}\n{body}", self.manifest_name()))
    }

    fn manifest(&self, status: &str, exit_code: i32) -> CliResult<()> {
        let value = json!({
            "tool": "nkscopf",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "case_path": self.case_path.display().to_string(),
            "case_digest": self.case_digest,
            "config_digest": self.config_digest,
            "seed": self.seed,
            "started": self.started,
            "finished": chrono::Utc::now().to_rfc3339(),
            "wall_seconds": self.clock.elapsed().as_secs_f64(),
            "status": status,
            "exit_code": exit_code,
            "outputs": self.outputs,
            "details": self.extra,
        });
        let text = serde_json::to_string_pretty(&value).map_err(Error::from)? + "\n";
        fs::write(self.path(&self.manifest_name()), text).map_err(Error::from)?;
        Ok(())
    }

    /// Writes the manifest with the outcome of `result` and passes it through.
    fn finish<T>(&self, result: CliResult<T>) -> CliResult<T> {
        let (status, code) = match &result {
            Ok(_) => ("ok".to_string(), EXIT_OK),
            Err(e) => (format!("error: {}", e.message), e.code),
        };
        self.manifest(&status, code)?;
        result
    }
}

fn load_dispatch(sys: &PowerSystem, path: &Path) -> CliResult<Dispatch> {
    let bytes = read_input(path, "dispatch file")?;
    let d: Dispatch = serde_json::from_slice(&bytes).map_err(Error::from)?;
    Ok(Dispatch::new(sys, d.p, d.v)?)
}

fn load_config(path: Option<&Path>) -> CliResult<(ScopfConfig, Option<String>)> {
    match path {
        None => Ok((ScopfConfig::default(), None)),
        Some(p) => {
            let bytes = read_input(p, "config file")?;
            let text = String::from_utf8(bytes).map_err(|_| CliError {
                code: EXIT_PARSE,
                message: format!("{} is not UTF-8 text", p.display()),
            })?;
            let cfg = ScopfConfig::from_json(&text)?;
            let canonical = serde_json::to_string(&cfg).map_err(Error::from)?;
            Ok((cfg, Some(sha256_hex(canonical.as_bytes()))))
        }
    }
}

fn dispatch_json(sys: &PowerSystem, x: &Dispatch) -> Value {
    let mva = sys.base_mva();
    json!({
        "p": x.p,
        "v": x.v,
        "p_mw": x.p.iter().map(|p| p * mva).collect::<Vec<_>>(),
    })
}

fn strip_trace_timings(trace: &AttackTrace) -> AttackTrace {
    let mut t = trace.clone();
    for it in &mut t.iterations {
        it.seconds = 0.0;
    }
    t
}

/// History with wall times removed, plus those wall times per iteration.
fn split_timings(history: &RunHistory) -> (RunHistory, Value) {
    let mut h = history.clone();
    let mut timings = Vec::new();
    for r in &mut h.records {
        timings.push(json!({
            "iteration": r.iteration,
            "attack_seconds": r.attack_seconds,
            "defense_seconds": r.defense_seconds,
            "evaluation_seconds": r.evaluation_seconds,
            "attack_iteration_seconds": r.attack.iterations.iter().map(|i| i.seconds).collect::<Vec<_>>(),
        }));
        r.attack_seconds = 0.0;
        r.defense_seconds = 0.0;
        r.evaluation_seconds = 0.0;
        r.attack = strip_trace_timings(&r.attack);
    }
    (h, Value::Array(timings))
}

fn to_value<T: Serialize>(v: &T) -> CliResult<Value> {
    Ok(serde_json::to_value(v).map_err(Error::from)?)
}

fn cmd_powerflow(common: &Common, dispatch: Option<&Path>, tol: f64, max_iter: usize) -> CliResult<()> {
    let (mut s, sys) = Session::open("powerflow", common)?;
    let result = (|| {
        let x = match dispatch {
            Some(p) => load_dispatch(&sys, p)?,
            None => Dispatch::nominal(&sys),
        };
        let opts = PowerFlowOptions {
            tol,
            max_iter,
            ..Default::default()
        };
        let pf = solve_power_flow(&sys, &x, None, &opts)?;
        let mva = sys.base_mva();
        s.write_json(
            "powerflow.json",
            json!({
                "dispatch": dispatch_json(&sys, &x),
                "state": to_value(&pf.state)?,
                "iterations": pf.iterations,
                "residual": pf.residual,
                "history": pf.history,
            }),
        )?;
        let q: f64 = pf.state.qg.iter().sum();
        println!(
            "power flow converged in {} iterations (residual {:.2e}); slack output {:.2} MW, total reactive {:.2} MVAr",
            pf.iterations,
            pf.residual,
            pf.state.p_slack * mva,
            q * mva
        );
        Ok(())
    })();
    s.finish(result)
}

fn cmd_opf(common: &Common, config: Option<&Path>) -> CliResult<()> {
    let (cfg, digest) = load_config(config)?;
    let (mut s, sys) = Session::open("opf", common)?;
    s.config_digest = digest;
    let result = (|| {
        let sol = solve_base_opf_full(&sys, &cfg.solver)?;
        let mva = sys.base_mva();
        let pg: Vec<f64> = (0..sys.n_gen())
            .map(|g| sol.dispatch.generator_p(&sys, g).unwrap_or(sol.state.p_slack) * mva)
            .collect();
        s.write_json("dispatch.json", dispatch_json(&sys, &sol.dispatch))?;
        s.write_json(
            "opf.json",
            json!({
                "cost_per_hour": sol.cost,
                "generator_mw": pg,
                "state": to_value(&sol.state)?,
                "iterations": sol.iterations,
                "residual": sol.residual,
            }),
        )?;
        println!(
            "base OPF cost {:.4} $/h; generation {:.2} MW for {:.2} MW of load",
            sol.cost,
            pg.iter().sum::<f64>(),
            sys.total_demand() * mva
        );
        Ok(())
    })();
    s.finish(result)
}

fn cmd_attack(
    common: &Common,
    dispatch: &Path,
    k: usize,
    config: Option<&Path>,
    seed: Option<u64>,
    top: usize,
) -> CliResult<()> {
    let (mut cfg, digest) = load_config(config)?;
    if let Some(seed) = seed {
        cfg.attack.seed = seed;
    }
    let (mut s, sys) = Session::open("attack", common)?;
    s.config_digest = digest;
    s.seed = Some(cfg.attack.seed);
    let result = (|| {
        let x = load_dispatch(&sys, dispatch)?;
        let n = sys.n_outage();
        let k_used = if k > n {
            eprintln!("warning: k = {k} exceeds the {n} outage devices; using k = {n}");
            n
        } else {
            k
        };
        s.extra.insert("k_requested".into(), json!(k));
        s.extra.insert("k".into(), json!(k_used));
        let zero = AttackVector::zeros(n, k_used as f64);
        let base = solve_third_stage(&sys, &x, &zero, &cfg.solver)?;
        let zero_loss = base.attack_loss(&sys);
        let res = match find_worst_case_attack(&sys, &x, k_used, &cfg.attack, &cfg.solver, None) {
            Ok(r) => r,
            Err(Error::AttackAborted { iteration, source, trace }) => {
                s.write_csv("attack_trace.csv", &trace.to_csv())?;
                return Err(CliError {
                    code: exit_code(&source),
                    message: format!("attack aborted at iteration {iteration}: {source}"),
                });
            }
            Err(e) => return Err(e.into()),
        };
        let devices = sys.outage_devices();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| res.y.values()[b].total_cmp(&res.y.values()[a]).then(a.cmp(&b)));
        let mut ranking = String::from("rank,device,label,y\n");
        for (r, &j) in order.iter().take(top).enumerate() {
            ranking += &format!("{},{},{},{:.9}\n", r + 1, j, sys.device_label(devices[j]), res.y.values()[j]);
        }
        let final_loss = res.solution.attack_loss(&sys);
        s.extra.insert(
            "attack_iteration_seconds".into(),
            json!(res.trace.iterations.iter().map(|i| i.seconds).collect::<Vec<_>>()),
        );
        s.write_json(
            "attack.json",
            json!({
                "k": k_used,
                "y": res.y.values(),
                "zero_attack_loss": zero_loss,
                "attack_loss": final_loss,
                "slack_norm_mw": res.solution.slack_norm() * sys.base_mva(),
                "trace": to_value(&strip_trace_timings(&res.trace))?,
            }),
        )?;
        s.write_csv("attack_trace.csv", &res.trace.to_csv())?;
        s.write_csv("attack_ranking.csv", &ranking)?;
        println!(
            "attack k = {k_used}: loss {zero_loss:.6e} -> {final_loss:.6e} in {} iterations; max balance slack {:.3} MW",
            res.trace.iterations.len(),
            res.solution.slack_norm() * sys.base_mva()
        );
        for &j in order.iter().take(top.min(5)) {
            if res.y.values()[j] > 1e-6 {
                println!("  {:<16} y = {:.4}", sys.device_label(devices[j]), res.y.values()[j]);
            }
        }
        Ok(())
    })();
    s.finish(result)
}

fn cmd_run(common: &Common, config: &Path) -> CliResult<()> {
    let (cfg, digest) = load_config(Some(config))?;
    let (mut s, sys) = Session::open("run", common)?;
    s.config_digest = digest;
    s.seed = Some(cfg.attack.seed);
    let result = (|| {
        // Appended and flushed after every outer iteration.
        s.write_csv("history.csv", &format!("{HISTORY_CSV_HEADER}\n"))?;
        s.manifest("running", EXIT_OK)?;
        let mut file = OpenOptions::new().append(true).open(s.path("history.csv")).map_err(Error::from)?;
        let outcome = run_scopf_with(&sys, &cfg, |rec| {
            writeln!(file, "{}", rec.csv_line())?;
            file.sync_data()?;
            Ok(())
        });
        let (x, history) = match outcome {
            Ok(v) => v,
            Err(Error::RunAborted { reason, history }) => {
                let (h, timings) = split_timings(&history);
                s.extra.insert("timings".into(), timings);
                s.write_json("history.json", to_value(&h)?)?;
                return Err(CliError {
                    code: EXIT_DIVERGED,
                    message: format!("run aborted: {reason}"),
                });
            }
            Err(e) => return Err(e.into()),
        };
        let (h, timings) = split_timings(&history);
        s.extra.insert("timings".into(), timings);
        s.write_json("history.json", to_value(&h)?)?;
        s.write_json("dispatch.json", dispatch_json(&sys, &x))?;
        let last = history.records.last();
        println!(
            "run k = {}: {} outer iterations, {} ({})",
            cfg.k,
            history.records.len(),
            if history.converged { "converged" } else { "not converged" },
            history.reason
        );
        if let Some(r) = last {
            println!(
                "final loss {:.6e}; base cost {:.4} $/h; worst-case slack norm {:.3} MW",
                r.post.total,
                r.post.f_base / cfg.solver.cost_scale,
                (2.0 * r.post.slack).max(0.0).sqrt() * sys.base_mva()
            );
        }
        Ok(())
    })();
    s.finish(result)
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    common: &Common,
    dispatch: &Path,
    sizes: &[usize],
    counts: &[usize],
    seed: u64,
    parallelism: usize,
    tol: f64,
    config: Option<&Path>,
) -> CliResult<()> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(CliError::usage("sizes must be positive"));
    }
    if counts.is_empty() || counts.contains(&0) {
        return Err(CliError::usage("counts must be positive"));
    }
    if counts.len() != 1 && counts.len() != sizes.len() {
        return Err(CliError::usage(format!(
            "{} counts given for {} sizes",
            counts.len(),
            sizes.len()
        )));
    }
    if parallelism == 0 {
        return Err(CliError::usage("parallelism must be at least 1"));
    }
    if !(tol > 0.0) {
        return Err(CliError::usage("tol must be positive"));
    }
    let (cfg, digest) = load_config(config)?;
    let (mut s, sys) = Session::open("evaluate", common)?;
    s.config_digest = digest;
    s.seed = Some(seed);
    let result = (|| {
        let x = load_dispatch(&sys, dispatch)?;
        let mut scenarios = Vec::new();
        for (i, &size) in sizes.iter().enumerate() {
            let count = if counts.len() == 1 { counts[0] } else { counts[i] };
            if size > sys.n_outage() {
                return Err(CliError::usage(format!("size {size} exceeds {} outage devices", sys.n_outage())));
            }
            scenarios.extend(sample_contingencies(&sys, size, count, seed.wrapping_add(size as u64)));
        }
        let opts = EvaluationOptions {
            tol,
            parallelism,
            seed: Some(seed),
            solver: cfg.solver.clone(),
        };
        let report = evaluate_dispatch(&sys, &x, &scenarios, &opts)?;
        s.write_json("evaluation.json", to_value(&report)?)?;
        s.write_csv("evaluation.csv", &report.to_csv())?;
        for a in &report.aggregates {
            println!(
                "N-{}: {} scenarios, {} violations ({} infeasible, {} solver failures)",
                a.size, a.scenarios, a.violations, a.infeasible, a.solver_failures
            );
        }
        println!("total violations {} of {}", report.total_violations(), report.total_scenarios());
        Ok(())
    })();
    s.finish(result)
}

/// Runs a parsed command and returns its exit code.
pub fn execute(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Powerflow {
            common,
            dispatch,
            tol,
            max_iter,
        } => cmd_powerflow(common, dispatch.as_deref(), *tol, *max_iter),
        Command::Opf { common, config } => cmd_opf(common, config.as_deref()),
        Command::Attack {
            common,
            dispatch,
            k,
            config,
            seed,
            top,
        } => cmd_attack(common, dispatch, *k, config.as_deref(), *seed, *top),
        Command::Run { common, config } => cmd_run(common, config),
        Command::Evaluate {
            common,
            dispatch,
            sizes,
            counts,
            seed,
            parallelism,
            tol,
            config,
        } => cmd_evaluate(common, dispatch, sizes, counts, *seed, *parallelism, *tol, config.as_deref()),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_USAGE
            } else {
                EXIT_OK
            }
        }
    }
}

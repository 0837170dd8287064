//! `mafl` command-line front end.
//!
//! Every command loads a TOML scenario, applies `--set` overrides, builds the experiment
//! and writes its artifacts plus a `MANIFEST` status file into `--out`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Args, Parser, Subcommand};
use log::{error, info};
use rayon::prelude::*;
use serde::Serialize;

use mafl::bound::{eval_bound, eval_conv_lhs, BoundConstants};
use mafl::config::{load_config, ConfigError, Experiment};
use mafl::io::{
    bound_rows, metric_rows, read_plan, read_schedule, write_atomic, write_events, write_history, write_plan,
    write_rows, write_schedule, BoundRow, MetricRow,
};
use mafl::optimizer::{optimize, optimize_resources_round_robin, OptimizeResult};
use mafl::plan::ResourcePlan;
use mafl::scheduling::Schedule;
use mafl::simulator::{average_resources, run, run_baseline, BaselineMode, RunOutput};

const EXIT_FAILURE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_OPTIMIZER: u8 = 3;
const EXIT_SIMULATION: u8 = 4;

/// Parameters `sweep` accepts; N is a task index.
const SWEEP_PARAMS: &[&str] = &[
    "tasks.N.importance",
    "tasks.N.importance_ratio",
    "tasks.N.energy_weight",
    "tasks.N.staleness_limit",
    "objective.c1",
    "objective.c2",
    "objective.c3",
];

const METHODS: [&str; 3] = ["mafl", "async_random_idle", "sync_fedavg"];

#[derive(Parser, Debug)]
#[command(name = "mafl", version, about = "Multi-model asynchronous federated learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Scenario TOML file.
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Comma-separated simulation seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    /// Worker threads for seed-level parallelism (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Dotted-path override, e.g. tasks.0.importance=1e7.
    #[arg(long = "set", value_name = "KEY=VAL")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check the scenario and report every violation.
    Validate(Common),
    /// Estimate the bound constants of every task.
    Estimate(Common),
    /// Optimize schedule and resources; writes schedule, plan and history CSVs.
    Optimize(Common),
    /// Simulate the schedule and plan found in --out, optimizing first if there is none.
    Simulate(Common),
    /// Evaluate the convergence bound of the schedule and plan found in --out.
    Bound {
        #[command(flatten)]
        common: Common,
        /// Also simulate every seed and report the left-hand side.
        #[arg(long)]
        with_lhs: bool,
    },
    /// Optimized schedule against both baselines over all seeds.
    Compare(Common),
    /// One compare run per value of an override parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Parameter key, e.g. tasks.0.importance_ratio.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate(_) => "validate",
            Command::Estimate(_) => "estimate",
            Command::Optimize(_) => "optimize",
            Command::Simulate(_) => "simulate",
            Command::Bound { .. } => "bound",
            Command::Compare(_) => "compare",
            Command::Sweep { .. } => "sweep",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Validate(c) | Command::Estimate(c) | Command::Optimize(c) | Command::Simulate(c) | Command::Compare(c) => c,
            Command::Bound { common, .. } | Command::Sweep { common, .. } => common,
        }
    }
}

/// An error together with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

trait WithCode<T> {
    fn code(self, code: u8) -> std::result::Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> WithCode<T> for std::result::Result<T, E> {
    fn code(self, code: u8) -> std::result::Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|s| {
            let (k, v) = s.split_once('=').ok_or_else(|| anyhow!("override '{s}' is not KEY=VAL"))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

fn load(common: &Common, extra: &[(String, String)]) -> Outcome<Experiment> {
    let mut overrides = parse_overrides(&common.overrides).code(EXIT_VALIDATION)?;
    overrides.extend_from_slice(extra);
    let cfg = load_config(&common.scenario, &overrides).code(EXIT_VALIDATION)?;
    match Experiment::build(cfg) {
        Ok(e) => Ok(e),
        Err(err @ ConfigError::Invalid(_)) => {
            write_atomic(&common.out.join("validation.txt"), format!("{err}\n").as_bytes()).code(EXIT_FAILURE)?;
            Err(err).code(EXIT_VALIDATION)
        }
        Err(err) => Err(err).code(EXIT_VALIDATION),
    }
}

fn write_manifest(common: &Common, command: &str, status: &str) -> Result<()> {
    let quoted = |v: &[String]| v.iter().map(|o| format!("{o:?}")).collect::<Vec<_>>().join(", ");
    let seeds = common.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(", ");
    let text = format!(
        "scenario = {:?}\ncommand = {command:?}\nout = {:?}\nseeds = [{seeds}]\noverrides = [{}]\nstatus = {status:?}\n",
        common.scenario.display().to_string(),
        common.out.display().to_string(),
        quoted(&common.overrides),
    );
    write_atomic(&common.out.join("MANIFEST"), text.as_bytes())?;
    Ok(())
}

fn constants(exp: &Experiment) -> Outcome<Vec<BoundConstants>> {
    exp.bound_constants().code(EXIT_VALIDATION)
}

fn save_optimized(out: &Path, r: &OptimizeResult) -> Result<()> {
    write_schedule(&out.join("schedule.csv"), &r.schedule)?;
    write_plan(&out.join("plan.csv"), &out.join("final_idle.csv"), &r.plan)?;
    write_history(&out.join("history.csv"), &r.history)?;
    Ok(())
}

fn read_saved(out: &Path, exp: &Experiment) -> Result<(Schedule, ResourcePlan)> {
    let schedule = read_schedule(&out.join("schedule.csv"), &exp.scenario)?;
    let plan = read_plan(&out.join("plan.csv"), &out.join("final_idle.csv"), &exp.scenario, &schedule)?;
    Ok((schedule, plan))
}

fn thread_pool(jobs: usize) -> Outcome<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(jobs).build().code(EXIT_FAILURE)
}

fn simulate_seeds(exp: &Experiment, schedule: &Schedule, plan: &ResourcePlan, common: &Common) -> Outcome<Vec<RunOutput>> {
    thread_pool(common.jobs)?.install(|| {
        common
            .seeds
            .par_iter()
            .map(|&s| run(&exp.scenario, schedule, plan, &exp.tasks, s))
            .collect::<std::result::Result<Vec<_>, _>>()
            .code(EXIT_SIMULATION)
    })
}

#[derive(Serialize)]
struct ConstantRow {
    task: usize,
    constant: String,
    device: Option<usize>,
    value: f64,
}

fn cmd_estimate(common: &Common) -> Outcome<()> {
    let exp = load(common, &[])?;
    let c = constants(&exp)?;
    let mut rows = Vec::new();
    for (j, k) in c.iter().enumerate() {
        for (name, v) in [
            ("smoothness", k.smoothness),
            ("data_variability", k.data_variability),
            ("grad_norm_cap", k.grad_norm_cap),
            ("reg_grad_norm_cap", k.reg_grad_norm_cap),
            ("initial_loss_gap", k.initial_loss_gap),
        ] {
            rows.push(ConstantRow { task: j, constant: name.into(), device: None, value: v });
        }
        for (i, row) in k.dissimilarity.iter().enumerate() {
            rows.push(ConstantRow { task: j, constant: "dissimilarity".into(), device: Some(i), value: row[0] });
        }
        for (i, row) in k.sample_variance.iter().enumerate() {
            rows.push(ConstantRow { task: j, constant: "sample_variance".into(), device: Some(i), value: row[0] });
        }
    }
    write_rows(&common.out.join("constants.csv"), &rows).code(EXIT_FAILURE)
}

fn cmd_optimize(common: &Common) -> Outcome<()> {
    let exp = load(common, &[])?;
    let c = constants(&exp)?;
    let r = optimize(&exp.scenario, &c, &exp.config.optimizer).code(EXIT_OPTIMIZER)?;
    info!("objective {:.6e}", r.objective);
    save_optimized(&common.out, &r).code(EXIT_FAILURE)
}

fn cmd_simulate(common: &Common) -> Outcome<()> {
    let exp = load(common, &[])?;
    let (schedule, plan) = if common.out.join("schedule.csv").exists() {
        read_saved(&common.out, &exp).code(EXIT_FAILURE)?
    } else {
        info!("no schedule in {}, optimizing first", common.out.display());
        let c = constants(&exp)?;
        let r = optimize(&exp.scenario, &c, &exp.config.optimizer).code(EXIT_OPTIMIZER)?;
        save_optimized(&common.out, &r).code(EXIT_FAILURE)?;
        (r.schedule, r.plan)
    };
    let runs = simulate_seeds(&exp, &schedule, &plan, common)?;
    let mut rows = Vec::new();
    for (seed, r) in common.seeds.iter().zip(&runs) {
        write_events(&common.out.join(format!("events_seed{seed}.csv")), &r.log).code(EXIT_FAILURE)?;
        rows.extend(metric_rows("mafl", *seed, &r.metrics));
    }
    write_rows(&common.out.join("metrics_mafl.csv"), &rows).code(EXIT_FAILURE)
}

fn cmd_bound(common: &Common, with_lhs: bool) -> Outcome<()> {
    let exp = load(common, &[])?;
    let c = constants(&exp)?;
    if !common.out.join("plan.csv").exists() || !common.out.join("schedule.csv").exists() {
        return Err(anyhow!("no schedule.csv and plan.csv in {}; run optimize first", common.out.display()))
            .code(EXIT_FAILURE);
    }
    let (schedule, plan) = read_saved(&common.out, &exp).code(EXIT_FAILURE)?;
    let runs = if with_lhs { simulate_seeds(&exp, &schedule, &plan, common)? } else { Vec::new() };
    let mut rows: Vec<BoundRow> = Vec::new();
    for (j, t) in exp.scenario.tasks.iter().enumerate() {
        let sizes: Vec<usize> = exp.scenario.devices.iter().map(|d| d.dataset_sizes[j]).collect();
        let mut report = eval_bound(t, &sizes, &schedule.tasks[j], &plan.tasks[j], &c[j]).code(EXIT_FAILURE)?;
        let mut stderr = None;
        if with_lhs {
            let per_seed: Vec<f64> = runs
                .iter()
                .map(|r| eval_conv_lhs(&r.metrics.tasks[j].grad_norm, &schedule.tasks[j]))
                .collect::<std::result::Result<_, _>>()
                .code(EXIT_SIMULATION)?;
            let (m, se) = mean_stderr(&per_seed);
            report.lhs_conv = Some(m);
            stderr = Some(se);
        }
        rows.extend(bound_rows(j, &report));
        if let Some(se) = stderr {
            rows.push(BoundRow { task: j, term: "lhs_stderr".into(), value: se });
        }
    }
    write_rows(&common.out.join("bound.csv"), &rows).code(EXIT_FAILURE)
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[derive(Serialize)]
struct SummaryRow {
    method: String,
    task: usize,
    final_loss_mean: f64,
    final_loss_stderr: f64,
    final_accuracy_mean: f64,
    final_accuracy_stderr: f64,
    energy_j_mean: f64,
    energy_j_stderr: f64,
    sgd_share: f64,
}

/// Results of one compare run.
struct Comparison {
    summary: Vec<SummaryRow>,
    /// Task share of scheduled SGD iterations in the optimized plan.
    sgd_share: Vec<f64>,
    term_e: Vec<f64>,
}

fn compare_into(common: &Common, extra: &[(String, String)]) -> Outcome<Comparison> {
    let exp = load(common, extra)?;
    let c = constants(&exp)?;
    let opt = optimize(&exp.scenario, &c, &exp.config.optimizer).code(EXIT_OPTIMIZER)?;
    save_optimized(&common.out, &opt).code(EXIT_FAILURE)?;
    let fixed = optimize_resources_round_robin(&exp.scenario, &c, &exp.config.optimizer).code(EXIT_OPTIMIZER)?;
    let res = average_resources(&fixed.schedule, &fixed.plan);
    let idle_scale = exp.config.simulation.random_idle_scale;

    let per_seed: Vec<[RunOutput; 3]> = thread_pool(common.jobs)?.install(|| {
        common
            .seeds
            .par_iter()
            .map(|&s| -> std::result::Result<[RunOutput; 3], mafl::simulator::SimError> {
                Ok([
                    run(&exp.scenario, &opt.schedule, &opt.plan, &exp.tasks, s)?,
                    run_baseline(&exp.scenario, BaselineMode::AsyncRandomIdle, &exp.tasks, &res, idle_scale, s)?,
                    run_baseline(&exp.scenario, BaselineMode::SyncFedavg, &exp.tasks, &res, idle_scale, s)?,
                ])
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .code(EXIT_SIMULATION)
    })?;

    let shares = opt.plan.sgd_shares(&opt.schedule);
    let mut summary = Vec::new();
    for (k, method) in METHODS.iter().enumerate() {
        let mut rows: Vec<MetricRow> = Vec::new();
        for (seed, runs) in common.seeds.iter().zip(&per_seed) {
            rows.extend(metric_rows(method, *seed, &runs[k].metrics));
        }
        write_rows(&common.out.join(format!("metrics_{method}.csv")), &rows).code(EXIT_FAILURE)?;
        for j in 0..exp.scenario.num_tasks() {
            let last = |f: fn(&mafl::simulator::TaskMetrics) -> &Vec<f64>| -> Vec<f64> {
                per_seed.iter().map(|r| *f(&r[k].metrics.tasks[j]).last().unwrap_or(&f64::NAN)).collect()
            };
            let (lm, ls) = mean_stderr(&last(|m| &m.loss));
            let (am, as_) = mean_stderr(&last(|m| &m.accuracy));
            let (em, es) = mean_stderr(&last(|m| &m.energy));
            summary.push(SummaryRow {
                method: method.to_string(),
                task: j,
                final_loss_mean: lm,
                final_loss_stderr: ls,
                final_accuracy_mean: am,
                final_accuracy_stderr: as_,
                energy_j_mean: em,
                energy_j_stderr: es,
                sgd_share: if k == 0 { shares[j] } else { f64::NAN },
            });
        }
    }
    write_rows(&common.out.join("summary.csv"), &summary).code(EXIT_FAILURE)?;
    write_atomic(&common.out.join("plot.gp"), gnuplot_script(exp.scenario.num_tasks()).as_bytes()).code(EXIT_FAILURE)?;

    let mut term_e = Vec::new();
    for (j, t) in exp.scenario.tasks.iter().enumerate() {
        let sizes: Vec<usize> = exp.scenario.devices.iter().map(|d| d.dataset_sizes[j]).collect();
        let r = eval_bound(t, &sizes, &opt.schedule.tasks[j], &opt.plan.tasks[j], &c[j]).code(EXIT_FAILURE)?;
        term_e.push(r.term_e);
    }
    Ok(Comparison { summary, sgd_share: shares, term_e })
}

fn gnuplot_script(tasks: usize) -> String {
    let mut s = String::from(
        "# gnuplot -p plot.gp\nset datafile separator ','\nset key autotitle columnhead\nset xlabel 'energy (J)'\nset ylabel 'global loss'\n",
    );
    for j in 0..tasks {
        s.push_str(&format!("set title 'task {j}'\nplot "));
        let parts: Vec<String> = METHODS
            .iter()
            .map(|m| {
                format!("'metrics_{m}.csv' using ($3=={j} && $2==0 ? $8 : 1/0):6 with linespoints title '{m}'")
            })
            .collect();
        s.push_str(&parts.join(", \\\n     "));
        s.push_str("\npause -1\n");
    }
    s
}

fn cmd_compare(common: &Common) -> Outcome<()> {
    compare_into(common, &[]).map(|_| ())
}

fn sweep_param_known(param: &str) -> bool {
    let parts: Vec<&str> = param.split('.').collect();
    SWEEP_PARAMS.iter().any(|p| {
        let q: Vec<&str> = p.split('.').collect();
        q.len() == parts.len() && q.iter().zip(&parts).all(|(a, b)| a == b || (*a == "N" && b.parse::<usize>().is_ok()))
    })
}

#[derive(Serialize)]
struct SweepRow {
    param: String,
    value: String,
    task: usize,
    sgd_share: f64,
    final_loss_mean: f64,
    final_accuracy_mean: f64,
    energy_j_mean: f64,
    term_e: f64,
}

fn cmd_sweep(common: &Common, param: &str, values: &[String]) -> Outcome<()> {
    if !sweep_param_known(param) {
        return Err(anyhow!("unknown sweep parameter '{param}'; valid: {}", SWEEP_PARAMS.join(", "))).code(EXIT_VALIDATION);
    }
    let mut rows = Vec::new();
    for v in values {
        let sub = Common { out: common.out.join(format!("{param}={v}")), ..common.clone() };
        let cmp = compare_into(&sub, &[(param.to_string(), v.clone())])?;
        for s in cmp.summary.iter().filter(|s| s.method == "mafl") {
            rows.push(SweepRow {
                param: param.to_string(),
                value: v.clone(),
                task: s.task,
                sgd_share: cmp.sgd_share[s.task],
                final_loss_mean: s.final_loss_mean,
                final_accuracy_mean: s.final_accuracy_mean,
                energy_j_mean: s.energy_j_mean,
                term_e: cmp.term_e[s.task],
            });
        }
    }
    write_rows(&common.out.join("sweep.csv"), &rows).code(EXIT_FAILURE)
}

fn dispatch(cmd: &Command) -> Outcome<()> {
    let common = cmd.common();
    if common.seeds.is_empty() {
        return Err(anyhow!("--seeds must list at least one seed")).code(EXIT_VALIDATION);
    }
    match cmd {
        Command::Validate(c) => load(c, &[]).map(|e| {
            info!("scenario valid: {} devices, {} tasks", e.scenario.num_devices(), e.scenario.num_tasks());
        }),
        Command::Estimate(c) => cmd_estimate(c),
        Command::Optimize(c) => cmd_optimize(c),
        Command::Simulate(c) => cmd_simulate(c),
        Command::Bound { common, with_lhs } => cmd_bound(common, *with_lhs),
        Command::Compare(c) => cmd_compare(c),
        Command::Sweep { common, param, values } => cmd_sweep(common, param, values),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("MAFL_LOG", "info")).init();
    let cli = Cli::parse();
    let common = cli.command.common();
    let name = cli.command.name();
    if let Err(e) = write_manifest(common, name, "running") {
        error!("cannot write to {}: {e:#}", common.out.display());
        return ExitCode::from(EXIT_FAILURE);
    }
    match dispatch(&cli.command) {
        Ok(()) => {
            if let Err(e) = write_manifest(common, name, "ok") {
                error!("{e:#}");
                return ExitCode::from(EXIT_FAILURE);
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            error!("{:#}", f.error);
            // the manifest records the failure even when the output directory is the problem
            let _ = write_manifest(common, name, &format!("failed: {:#}", f.error));
            ExitCode::from(f.code)
        }
    }
}

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ammlab_core::config::{OutputFormat, RunConfig};
use ammlab_core::data::{estimate_params, load_klines, ols, KlineSchema};
use ammlab_core::design::{
    default_eta_grid, efficient_allocation, optimal_design, refine_design, stationary_summary, sweep, SweepAxis,
    DEFAULT_FEE_MENU,
};
use ammlab_core::dp::{solve_model, DpModel};
use ammlab_core::dynamics::net_profit_condition;
use ammlab_core::stationary::simulate;
use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "ammlab", version, about = "Liquidity provision in geometric-mean AMM pools")]
struct Cli {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides `output.directory`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Output formats (overrides `output.formats`).
    #[arg(long, global = true, value_enum, value_delimiter = ',')]
    format: Vec<Format>,

    /// Seed for simulations.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads.
    #[arg(long, global = true, env = "AMMLAB_THREADS")]
    threads: Option<usize>,

    /// Override a config key, e.g. `--set f=0.003` or `--set solver.grid_size=51`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the LP's problem and average it under the stationary distribution.
    Solve,
    /// Solve along one parameter axis.
    Sweep {
        /// One of f, eta, muA, muB, sigmaA, sigmaB, sigmaA_fixed_sigma, sigmaB_fixed_sigma.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with = "range")]
        values: Option<Vec<f64>>,
        /// Inclusive range `start:stop:step`.
        #[arg(long, allow_hyphen_values = true)]
        range: Option<String>,
    },
    /// Grid search over fee and weight.
    Design {
        #[arg(long, value_delimiter = ',')]
        fees: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        etas: Option<Vec<f64>>,
        /// Skip the refinement of the weight around the coarse optimum.
        #[arg(long)]
        no_refine: bool,
    },
    /// Estimate return parameters from two kline files.
    Estimate {
        a: PathBuf,
        b: PathBuf,
        /// The files start with a header row.
        #[arg(long)]
        header: bool,
        #[arg(long, default_value_t = 0)]
        time_column: usize,
        #[arg(long, default_value_t = 4)]
        close_column: usize,
        #[arg(long, default_value_t = ',')]
        delimiter: char,
    },
    /// Least-squares regression on a CSV table with a header row.
    Regress {
        table: PathBuf,
        #[arg(long)]
        response: String,
        #[arg(long, value_delimiter = ',', required = true)]
        regressors: Vec<String>,
    },
    /// Simulate the pool from a starting ratio.
    Simulate {
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        s0: f64,
    },
}

/// Errors that map to exit code 2 regardless of their source.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<ammlab_core::Error>() {
            return if e.is_numerical() { 3 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::Solve => cmd_solve(&load_config(&cli)?),
        Command::Sweep { axis, values, range } => {
            let cfg = load_config(&cli)?;
            cmd_sweep(&cfg, axis, values.as_deref(), range.as_deref())
        }
        Command::Design { fees, etas, no_refine } => {
            cmd_design(&load_config(&cli)?, fees.as_deref(), etas.as_deref(), !no_refine)
        }
        Command::Estimate { a, b, header, time_column, close_column, delimiter } => {
            if !delimiter.is_ascii() {
                return Err(usage("--delimiter must be a single ASCII character"));
            }
            let schema = KlineSchema {
                has_header: *header,
                time_column: *time_column,
                close_column: *close_column,
                delimiter: *delimiter as u8,
            };
            cmd_estimate(a, b, &schema, &output_dir(&cli))
        }
        Command::Regress { table, response, regressors } => cmd_regress(table, response, regressors, &output_dir(&cli)),
        Command::Simulate { steps, s0 } => cmd_simulate(&load_config(&cli)?, *steps, *s0, cli.seed.unwrap_or(0)),
    }
}

/// Output directory for commands that take no config.
fn output_dir(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut value = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str::<Value>(&text)
                .map_err(|e| usage(format!("malformed config {}: {e}", path.display())))?
        }
        None => json!({}),
    };
    if !value.is_object() {
        return Err(usage("config must be a JSON object"));
    }
    for item in &cli.overrides {
        let (key, raw) = item.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{item}'")))?;
        let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut value, key, parsed)?;
    }
    let mut cfg = RunConfig::from_value(value).map_err(|e| usage(format!("invalid config: {e}")))?;
    if let Some(out) = &cli.out {
        cfg.output.directory = out.clone();
    }
    if !cli.format.is_empty() {
        cfg.output.formats = cli
            .format
            .iter()
            .map(|f| match f {
                Format::Csv => OutputFormat::Csv,
                Format::Json => OutputFormat::Json,
            })
            .collect();
    }
    Ok(cfg)
}

fn set_path(root: &mut Value, key: &str, value: Value) -> anyhow::Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let obj = node.as_object_mut().ok_or_else(|| usage(format!("cannot set '{key}': '{part}' is not an object")))?;
        node = obj.entry(part.to_string()).or_insert_with(|| json!({}));
    }
    let obj = node.as_object_mut().ok_or_else(|| usage(format!("cannot set '{key}'")))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn create(dir: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> anyhow::Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn num(x: f64) -> String {
    format!("{x:.12e}")
}

fn cmd_solve(cfg: &RunConfig) -> anyhow::Result<()> {
    let model = DpModel::new(&cfg.market, &cfg.pool, cfg.constraint, cfg.solver.grid_size, cfg.solver.nodes_per_dim)?;
    let solution = solve_model(&model, &cfg.solver, None)?;
    let summary = stationary_summary(&model, &solution)?;
    let npc = net_profit_condition(&cfg.market, &cfg.pool)?;
    let efficient = efficient_allocation(&cfg.market, cfg.constraint)?;
    let dir = &cfg.output.directory;
    let grid = solution.grid();
    let phases = cfg.market.n;

    if cfg.output.wants(OutputFormat::Csv) {
        let mut w = csv::Writer::from_writer(create(dir, "value_function.csv")?);
        let mut header = vec!["s".to_string()];
        header.extend((0..phases).map(|k| format!("v_{k}")));
        w.write_record(&header)?;
        for (i, s) in grid.iter().enumerate() {
            let mut row = vec![num(*s)];
            row.extend((0..phases).map(|k| num(solution.raw_values[k][i])));
            w.write_record(&row)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_writer(create(dir, "policy.csv")?);
        let mut header = vec!["s".to_string(), "c".to_string()];
        for k in 0..phases {
            header.extend(["omega_m", "omega_a", "omega_b"].map(|n| format!("{n}_{k}")));
        }
        w.write_record(&header)?;
        for (i, s) in grid.iter().enumerate() {
            let mut row = vec![num(*s), num(solution.policy.consumption[i])];
            for k in 0..phases {
                row.extend(solution.policy.omega[k][i].map(num));
            }
            w.write_record(&row)?;
        }
        w.flush()?;

        summary.distribution.write_csv(create(dir, "stationary.csv")?)?;
    }
    if cfg.output.wants(OutputFormat::Json) {
        write_json(dir, "solution.json", &json!({ "solution": solution, "stationary": summary.distribution }))?;
    }

    let message = if summary.invests { "LP invests on DEX" } else { "LP does not invest on DEX" };
    let report = json!({
        "expected_v0": summary.expected_v0,
        "expected_omega": { "m": summary.expected_omega[0], "a": summary.expected_omega[1], "b": summary.expected_omega[2] },
        "expected_consumption": summary.expected_consumption,
        "invests": summary.invests,
        "message": message,
        "iterations": solution.iterations,
        "residual": solution.residual,
        "contraction_ratio": solution.contraction_ratio,
        "growth": solution.growth,
        "log_consumption": solution.log_consumption,
        "net_profit_condition": npc,
        "efficient_allocation": efficient,
        "stationary_degenerate": summary.distribution.degenerate,
        "config": cfg,
    });
    write_json(dir, "summary.json", &report)?;
    println!(
        "converged in {} iterations (residual {:.2e}); E[v_0] = {:.6}; E[omega] = ({:.4}, {:.4}, {:.4}); E[c] = {:.6}",
        solution.iterations,
        solution.residual,
        summary.expected_v0,
        summary.expected_omega[0],
        summary.expected_omega[1],
        summary.expected_omega[2],
        summary.expected_consumption
    );
    println!("{message}");
    if !solution.growth.satisfied {
        eprintln!("warning: growth condition not met (modulus {:.6})", solution.growth.modulus);
    }
    Ok(())
}

fn parse_range(spec: &str) -> anyhow::Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [a, b, h] = parts.as_slice() else {
        return Err(usage(format!("range must be start:stop:step, got '{spec}'")));
    };
    let p = |s: &str| s.trim().parse::<f64>().map_err(|_| usage(format!("bad number '{s}' in range")));
    let (a, b, h) = (p(a)?, p(b)?, p(h)?);
    if !(h > 0.0) || !(b >= a) {
        return Err(usage("range needs step > 0 and stop >= start"));
    }
    let n = ((b - a) / h + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| a + h * i as f64).collect())
}

fn cmd_sweep(cfg: &RunConfig, axis: &str, values: Option<&[f64]>, range: Option<&str>) -> anyhow::Result<()> {
    let axis: SweepAxis = axis.parse().map_err(|e: ammlab_core::Error| usage(e.to_string()))?;
    let values = match (values, range) {
        (Some(v), _) => v.to_vec(),
        (None, Some(r)) => parse_range(r)?,
        (None, None) => match axis {
            SweepAxis::Fee => DEFAULT_FEE_MENU.to_vec(),
            SweepAxis::Eta => default_eta_grid(),
            _ => bail!(usage(format!("axis {axis} needs --values or --range"))),
        },
    };
    if values.is_empty() {
        return Err(usage("sweep needs at least one value"));
    }
    let result = sweep(axis, &values, &cfg.market, &cfg.pool, cfg.constraint, &cfg.solver)?;
    let dir = &cfg.output.directory;
    if cfg.output.wants(OutputFormat::Csv) {
        result.write_csv(create(dir, "sweep.csv")?)?;
    }
    if cfg.output.wants(OutputFormat::Json) {
        write_json(dir, "sweep.json", &json!({ "result": result, "config": cfg }))?;
    }
    let failed = result.points.iter().filter(|p| !p.converged).count();
    if failed > 0 {
        eprintln!("warning: {failed} of {} points failed and were excluded", result.points.len());
    }
    match result.argmax {
        Some(v) => println!("argmax {axis} = {v}"),
        None => println!("argmax {axis} = none (LP does not invest on DEX at any point)"),
    }
    if failed == result.points.len() {
        return Err(anyhow!(ammlab_core::Error::Invariant("every sweep point failed".into())));
    }
    Ok(())
}

fn cmd_design(cfg: &RunConfig, fees: Option<&[f64]>, etas: Option<&[f64]>, refine: bool) -> anyhow::Result<()> {
    let fees = fees.map(<[f64]>::to_vec).unwrap_or_else(|| DEFAULT_FEE_MENU.to_vec());
    let etas = etas.map(<[f64]>::to_vec).unwrap_or_else(default_eta_grid);
    if fees.is_empty() || etas.is_empty() {
        return Err(usage("design grids must be non-empty"));
    }
    let mut result = optimal_design(&cfg.market, &fees, &etas, cfg.constraint, &cfg.solver)?;
    if refine && etas.len() > 1 {
        let mut sorted = etas.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let step = sorted.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        result = refine_design(result, &cfg.market, step, cfg.constraint, &cfg.solver)?;
    }
    let dir = &cfg.output.directory;
    if cfg.output.wants(OutputFormat::Csv) {
        result.write_csv(create(dir, "design.csv")?)?;
    }
    if cfg.output.wants(OutputFormat::Json) {
        write_json(dir, "design.json", &json!({ "result": result, "config": cfg }))?;
    }
    match (result.f_star, result.eta_star) {
        (Some(f), Some(eta)) => println!("optimal design f = {f}, eta = {eta}"),
        _ => println!("optimal design: none (LP does not invest on DEX at any point)"),
    }
    if result.design_irrelevant {
        println!("design irrelevant: no liquidity traders arrive (alpha = 0)");
    }
    Ok(())
}

fn cmd_estimate(a: &Path, b: &Path, schema: &KlineSchema, dir: &Path) -> anyhow::Result<()> {
    let sa = load_klines(a, schema)?;
    let sb = load_klines(b, schema)?;
    let est = estimate_params(&sa, &sb)?;
    write_json(dir, "estimate.json", &est)?;
    println!("{}", serde_json::to_string_pretty(&est)?);
    if est.degenerate {
        eprintln!("warning: a series has zero return variance; rho reported as 0");
    }
    Ok(())
}

fn cmd_regress(table: &Path, response: &str, regressors: &[String], dir: &Path) -> anyhow::Result<()> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(table)
        .map_err(|e| usage(format!("cannot read {}: {e}", table.display())))?;
    let headers = reader.headers()?.clone();
    let index = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| usage(format!("column '{name}' not found; available: {}", headers.iter().collect::<Vec<_>>().join(", "))))
    };
    let yi = index(response)?;
    let xi: Vec<usize> = regressors.iter().map(|r| index(r)).collect::<anyhow::Result<_>>()?;
    let mut y = Vec::new();
    let mut cols: Vec<(String, Vec<f64>)> = regressors.iter().map(|r| (r.clone(), Vec::new())).collect();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(row as u64 + 2);
        let get = |i: usize| -> anyhow::Result<f64> {
            let raw = record.get(i).ok_or_else(|| usage(format!("row {line}: missing column {}", headers.get(i).unwrap_or("?"))))?;
            raw.parse::<f64>().map_err(|_| usage(format!("row {line}: bad number '{raw}'")))
        };
        y.push(get(yi)?);
        for (c, &i) in cols.iter_mut().zip(&xi) {
            c.1.push(get(i)?);
        }
    }
    let result = ols(&y, &cols)?;
    write_json(dir, "regression.json", &result)?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn cmd_simulate(cfg: &RunConfig, steps: usize, s0: f64, seed: u64) -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let path = simulate(&cfg.market, &cfg.pool, s0, steps, &mut rng)?;
    let dir = &cfg.output.directory;
    if cfg.output.wants(OutputFormat::Csv) {
        let mut w = csv::Writer::from_writer(create(dir, "trajectory.csv")?);
        w.write_record(["k", "s", "r1", "r2", "r3", "r4", "pool_return", "fee", "il", "s_next"])?;
        for st in &path {
            let o = &st.outcome;
            let mut row = vec![st.k.to_string(), num(st.s)];
            row.extend(o.components.map(num));
            row.extend([num(o.pool_return()), num(o.fee_revenue_frac), num(o.arb_loss_frac), num(o.s_next)]);
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    if cfg.output.wants(OutputFormat::Json) {
        write_json(dir, "trajectory.json", &json!({ "seed": seed, "s0": s0, "steps": path }))?;
    }
    let mean_return = path.iter().map(|st| st.outcome.pool_return().ln()).sum::<f64>() / path.len().max(1) as f64;
    println!("simulated {steps} periods from s = {s0} (seed {seed}); mean log pool return {mean_return:.6e}");
    Ok(())
}

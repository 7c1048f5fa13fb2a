use std::fs;
use std::path::{Path, PathBuf};

use degenhedge::backtest::{replicate, BacktestOptions, WEALTH_QUANTILES};
use degenhedge::config::{ConfigFile, OutputFormat, PayoffSection, RunSection};
use degenhedge::hedging::{solve_hedge, HedgeOptions, HedgePlan};
use degenhedge::measure::Tolerances;
use degenhedge::model::{validate_no_arbitrage_with, MarketModel, ModelValidationReport};
use degenhedge::payoff::Payoff;
use degenhedge::rng::with_workers;
use degenhedge::sde::{resolve_grid, simulate_paths_with, Measure, TimeGrid};
use degenhedge::{backtest, Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::output::{read_payload, table, Sink};
use crate::{CommonArgs, MeasureArg};

const DEFAULT_OUT: &str = "degenhedge-out";

/// Probe paths used by `validate` when the config has no run section.
const FALLBACK_PROBES: usize = 64;

struct Session {
    cfg: ConfigFile,
    model: MarketModel,
    sink: Sink,
    format: OutputFormat,
    workers: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum SeedSlot {
    Training,
    Backtest,
}

impl Session {
    fn load(args: &CommonArgs, command: &'static str, slot: SeedSlot, need_run: bool) -> Result<Self> {
        let text = fs::read_to_string(&args.config)?;
        let mut cfg = ConfigFile::from_toml(&text)?;
        if cfg.run.is_none() && need_run {
            return Err(Error::Schema("missing [run] section".into()));
        }
        if let Some(run) = cfg.run.as_mut() {
            if let Some(seed) = args.seed {
                match slot {
                    SeedSlot::Training => run.seed = seed,
                    SeedSlot::Backtest => run.backtest_seed = Some(seed),
                }
            }
            if let Some(p) = args.paths {
                run.paths = p;
            }
            if let Some(s) = args.steps {
                run.steps = s;
            }
            if let Some(w) = args.workers {
                run.workers = w;
            }
            run.validate()?;
        }
        let model = MarketModel::from_config(&cfg)?;
        let dir = args
            .out
            .clone()
            .or_else(|| cfg.output.as_ref().map(|o| PathBuf::from(&o.directory)))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        let format = args
            .format
            .map(OutputFormat::from)
            .or_else(|| cfg.output.as_ref().map(|o| o.formats))
            .unwrap_or_default();
        let workers = args.workers.or(cfg.run.as_ref().map(|r| r.workers)).unwrap_or(1);
        if workers == 0 {
            return Err(Error::Schema("--workers must be >= 1".into()));
        }
        log::info!("config {} (model {})", cfg.config_hash(), cfg.model_hash());
        Ok(Self {
            sink: Sink::new(dir, workers, command)?,
            cfg,
            model,
            format,
            workers,
        })
    }

    fn run(&self) -> &RunSection {
        self.cfg.run.as_ref().expect("checked on load")
    }

    fn tolerances(&self) -> Tolerances {
        match &self.cfg.run {
            Some(r) => Tolerances {
                rank: r.rank_tol,
                arbitrage: r.arbitrage_tol,
            },
            None => Tolerances::default(),
        }
    }

    fn grid(&self) -> Result<TimeGrid> {
        resolve_grid(&self.model, self.run().steps)
    }

    fn payoff(&self) -> Result<Payoff> {
        Payoff::from_section(self.cfg.payoff()?, self.model.n)
    }

    fn header(&self, seed: u64) -> serde_json::Value {
        json!({
            "config_hash": self.cfg.config_hash(),
            "model_hash": self.cfg.model_hash(),
            "config": self.cfg.resolved_json(),
            "seed": seed,
        })
    }

    fn validation(&self) -> (ModelValidationReport, u64) {
        let (probes, seed) = match &self.cfg.run {
            Some(r) => (r.probes, r.seed),
            None => (FALLBACK_PROBES, 0),
        };
        let tol = self.tolerances();
        let report = with_workers(self.workers, || {
            validate_no_arbitrage_with(&self.model, probes, seed, &tol)
        });
        (report, seed)
    }

    /// Refuses to price or hedge on a market that admits arbitrage.
    fn require_arbitrage_free(&self) -> Result<()> {
        let (report, _) = self.validation();
        for w in &report.warnings {
            log::warn!("{w}");
        }
        if report.arbitrage_ok {
            Ok(())
        } else {
            Err(Error::ArbitrageDetected {
                t: report.worst_time,
                residual: report.max_residual,
            })
        }
    }
}

fn merge(mut header: serde_json::Value, body: serde_json::Value) -> serde_json::Value {
    if let (Some(h), serde_json::Value::Object(b)) = (header.as_object_mut(), body) {
        h.extend(b);
    }
    header
}

pub fn validate(args: &CommonArgs) -> Result<bool> {
    let s = Session::load(args, "validate", SeedSlot::Training, false)?;
    let (report, seed) = s.validation();
    if s.format.json() {
        s.sink
            .json("validate.json", &merge(s.header(seed), json!({ "report": &report })))?;
    }
    if s.format.csv() {
        s.sink.csv("validate_ranks.csv", |w| {
            use std::io::Write;
            writeln!(w, "rank,count")?;
            for rc in &report.rank_profile {
                writeln!(w, "{},{}", rc.rank, rc.count)?;
            }
            Ok(())
        })?;
    }
    let ranks: Vec<String> = report
        .rank_profile
        .iter()
        .map(|r| format!("{}x{}", r.rank, r.count))
        .collect();
    table(
        "validate",
        &[
            ("arbitrage_ok", report.arbitrage_ok.to_string()),
            ("max scaled residual", format!("{:.3e}", report.max_residual)),
            ("tolerance", format!("{:.1e}", report.tolerance)),
            ("worst time", report.worst_time.to_string()),
            ("worst state", format!("{:?}", report.worst_state)),
            ("probe states", report.probe_states.to_string()),
            ("rank profile", ranks.join(" ")),
        ],
    );
    if !report.arbitrage_ok {
        println!(
            "no market price of risk: b - r x has a component of relative size {:.3e} outside range(sigma) at t = {}",
            report.max_residual, report.worst_time
        );
    }
    for w in &report.warnings {
        println!("warning: {w}");
    }
    Ok(report.arbitrage_ok)
}

pub fn simulate(args: &CommonArgs, measure: MeasureArg) -> Result<bool> {
    let s = Session::load(args, "simulate", SeedSlot::Training, true)?;
    let run = s.run();
    let grid = s.grid()?;
    let measure = match measure {
        MeasureArg::P => Measure::P,
        MeasureArg::Q => Measure::Q,
    };
    let tol = s.tolerances();
    let bundle = with_workers(s.workers, || {
        simulate_paths_with(&s.model, &grid, run.paths, run.seed, measure, tol.rank)
    })?;
    let n = s.model.n;
    let np = bundle.n_paths as f64;
    let mut mean = vec![0.0; n];
    let mut second = vec![0.0; n];
    for p in 0..bundle.n_paths {
        for (i, v) in bundle.path(p).terminal().iter().enumerate() {
            mean[i] += v / np;
            second[i] += v * v / np;
        }
    }
    let se: Vec<f64> = mean
        .iter()
        .zip(&second)
        .map(|(m, q)| ((q - m * m).max(0.0) * np / (np - 1.0).max(1.0) / np).sqrt())
        .collect();
    let ranks: Vec<usize> = bundle.rank_log.iter().flatten().map(|c| c.rank).collect();
    let (rmin, rmax) = (
        ranks.iter().min().copied().unwrap_or(0),
        ranks.iter().max().copied().unwrap_or(0),
    );
    if s.format.json() {
        let body = json!({
            "measure": measure,
            "n_paths": bundle.n_paths,
            "steps": grid.steps(),
            "terminal_mean": mean,
            "terminal_se": se,
            "min_rank": rmin,
            "max_rank": rmax,
        });
        s.sink.json("simulate.json", &merge(s.header(run.seed), body))?;
    }
    if s.format.csv() {
        let incs_path = s.sink.path("increments.csv");
        let mut incs = std::io::BufWriter::new(fs::File::create(&incs_path)?);
        s.sink.csv("states.csv", |w| bundle.write_csv(w, &mut incs))?;
        std::io::Write::flush(&mut incs)?;
    }
    table(
        "simulate",
        &[
            ("measure", format!("{measure:?}")),
            ("paths", bundle.n_paths.to_string()),
            ("steps", grid.steps().to_string()),
            ("seed", run.seed.to_string()),
            ("terminal mean", format!("{mean:?}")),
            ("rank range", format!("{rmin}..={rmax}")),
        ],
    );
    Ok(true)
}

pub fn price(args: &CommonArgs) -> Result<bool> {
    let s = Session::load(args, "price", SeedSlot::Training, true)?;
    s.require_arbitrage_free()?;
    let run = s.run();
    let grid = s.grid()?;
    let payoff = s.payoff()?;
    let report = with_workers(s.workers, || {
        backtest::price(&s.model, &payoff, &grid, run.paths, run.seed)
    })?;
    if s.format.json() {
        let body = json!({ "steps": grid.steps(), "price": &report });
        s.sink.json("price.json", &merge(s.header(run.seed), body))?;
    }
    if s.format.csv() {
        s.sink.csv("price.csv", |w| {
            use std::io::Write;
            writeln!(w, "v0,standard_error,n_paths,steps,seed")?;
            writeln!(
                w,
                "{},{},{},{},{}",
                report.v0,
                report.standard_error,
                report.n_paths,
                grid.steps(),
                run.seed
            )?;
            Ok(())
        })?;
    }
    table(
        "price",
        &[
            ("v0", format!("{:.6}", report.v0)),
            ("standard error", format!("{:.6}", report.standard_error)),
            ("paths", report.n_paths.to_string()),
            ("steps", grid.steps().to_string()),
            ("seed", run.seed.to_string()),
        ],
    );
    Ok(true)
}

/// Payload of a plan file.
#[derive(Debug, Serialize, Deserialize)]
struct PlanFile {
    config_hash: String,
    model_hash: String,
    config: serde_json::Value,
    seed: u64,
    payoff: PayoffSection,
    plan: HedgePlan,
}

pub fn hedge(args: &CommonArgs) -> Result<bool> {
    let s = Session::load(args, "hedge", SeedSlot::Training, true)?;
    s.require_arbitrage_free()?;
    let run = s.run();
    let grid = s.grid()?;
    let payoff = s.payoff()?;
    let opts = HedgeOptions {
        regression: (&run.regression).into(),
        tolerances: s.tolerances(),
        export_states: run.export_states,
    };
    let plan = with_workers(s.workers, || -> Result<HedgePlan> {
        let bundle = simulate_paths_with(&s.model, &grid, run.paths, run.seed, Measure::Q, opts.tolerances.rank)?;
        solve_hedge(&s.model, &payoff, &bundle, &opts)
    })?;
    for w in &plan.warnings {
        log::warn!("{w}");
    }
    let file = PlanFile {
        config_hash: s.cfg.config_hash(),
        model_hash: s.cfg.model_hash(),
        config: s.cfg.resolved_json(),
        seed: run.seed,
        payoff: s.cfg.payoff()?.clone(),
        plan,
    };
    s.sink.json("plan.json", &file)?;
    if s.format.csv() {
        s.sink.csv("plan.csv", |w| file.plan.write_csv(w))?;
    }
    let plan = &file.plan;
    let min_r2 = plan
        .rows
        .iter()
        .flat_map(|r| r.r2.iter().copied())
        .fold(f64::INFINITY, f64::min);
    let max_cond = plan.rows.iter().map(|r| r.condition).fold(0.0, f64::max);
    table(
        "hedge",
        &[
            ("v0", format!("{:.6} +- {:.6}", plan.v0, plan.v0_se)),
            ("v0 (regressed)", format!("{:.6}", plan.v0_regressed)),
            ("theta at t=0", format!("{:?}", plan.rows[0].theta_mean)),
            (
                "admissibility",
                format!("{:.6} +- {:.6}", plan.admissibility, plan.admissibility_se),
            ),
            ("min r2", format!("{min_r2:.4}")),
            ("max condition", format!("{max_cond:.3e}")),
            ("paths", plan.n_paths.to_string()),
            ("steps", (plan.times.len() - 1).to_string()),
            ("training seed", plan.training_seed.to_string()),
        ],
    );
    Ok(true)
}

pub fn backtest(args: &CommonArgs, plan_path: &Path) -> Result<bool> {
    let s = Session::load(args, "backtest", SeedSlot::Backtest, true)?;
    let payload = read_payload(plan_path)?;
    let file: PlanFile =
        serde_json::from_value(payload).map_err(|e| Error::Schema(format!("{}: {e}", plan_path.display())))?;
    let model_hash = s.cfg.model_hash();
    if file.model_hash != model_hash {
        return Err(Error::ModelMismatch {
            plan: file.model_hash,
            config: model_hash,
        });
    }
    if &file.payoff != s.cfg.payoff()? {
        return Err(Error::InvalidArgument(
            "payoff section differs from the one the plan was fitted for".into(),
        ));
    }
    let plan_steps = file.plan.times.len() - 1;
    if args.steps.is_some_and(|m| m != plan_steps) {
        return Err(Error::GridMismatch);
    }
    let run = s.run();
    let seed = run
        .backtest_seed
        .ok_or_else(|| Error::Schema("backtest needs run.backtest_seed or --seed".into()))?;
    s.require_arbitrage_free()?;
    let payoff = s.payoff()?;
    let opts = BacktestOptions {
        measure: run.backtest_measure,
    };
    let report = with_workers(s.workers, || {
        replicate(&s.model, &payoff, &file.plan, run.paths, seed, &opts)
    })?;
    if s.format.json() {
        let body = json!({
            "plan_config_hash": file.config_hash,
            "training_seed": file.plan.training_seed,
            "report": &report,
        });
        s.sink.json("backtest.json", &merge(s.header(seed), body))?;
    }
    if s.format.csv() {
        s.sink.csv("backtest_errors.csv", |w| report.write_errors_csv(w))?;
        s.sink.csv("backtest_steps.csv", |w| {
            use std::io::Write;
            let qs: Vec<String> = WEALTH_QUANTILES
                .iter()
                .map(|q| format!("wealth_q{:02}", (q * 100.0).round() as u32))
                .collect();
            writeln!(w, "time_index,time,increment_mean,increment_se,{}", qs.join(","))?;
            for st in &report.steps {
                let q: Vec<String> = st.wealth_quantiles.iter().map(f64::to_string).collect();
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    st.time_index,
                    st.time,
                    st.increment_mean,
                    st.increment_se,
                    q.join(",")
                )?;
            }
            Ok(())
        })?;
    }
    table(
        "backtest",
        &[
            ("measure", format!("{:?}", report.measure)),
            ("paths", report.n_paths.to_string()),
            ("seed", seed.to_string()),
            ("price", format!("{:.6} +- {:.6}", report.price_v0, report.price_se)),
            ("initial wealth", format!("{:.6}", report.initial_wealth)),
            ("replication rmse", format!("{:.6}", report.replication_rmse)),
            ("relative rmse", format!("{:.4}", report.replication_rmse_relative)),
            (
                "worst path",
                format!("{} ({:.6})", report.worst_path.path_id, report.worst_path.error),
            ),
            ("admissibility", format!("{:.6}", report.admissibility_estimate)),
        ],
    );
    match run.max_replication_error {
        Some(limit) if report.replication_rmse_relative.is_nan() || report.replication_rmse_relative > limit => {
            println!(
                "relative replication error {:.4} exceeds run.max_replication_error {limit}",
                report.replication_rmse_relative
            );
            Ok(false)
        }
        _ => Ok(true),
    }
}

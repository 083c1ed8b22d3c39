//! `tcpllm`: simulate, collect, train, compare and report.
//!
//! Exit codes: 0 success, 1 numerical failure, 2 usage or configuration,
//! 3 I/O, 4 integrity. Verbosity comes from `TCPLLM_LOG`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tcpllm::config::RunConfig;
use tcpllm::control::{arm_report, oracle_pool, run_closed_loop, scenario_sim, Oracle, Scenario};
use tcpllm::report::{self, CompareSummary, METRICS};
use tcpllm::simnet::{read_trace_csv, run_scenario, write_events_csv, write_trace_csv, ScenarioTrace};
use tcpllm::telemetry::{collect_experience, ExperiencePool};
use tcpllm::trainer::{self, EvalSettings, Mode, SlDataset};
use tcpllm::{Error, Result};

#[derive(Parser)]
#[command(name = "tcpllm", version, about = "Congestion-control selection with a LoRA-adapted transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode and write `trace.csv` and `switches.csv`.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build an experience pool from trace CSVs, or an oracle-labeled pool
    /// from simulated episodes with `--oracle`.
    Collect {
        #[arg(long, num_args = 1.., required_unless_present = "oracle", conflicts_with = "oracle")]
        traces: Vec<PathBuf>,
        #[arg(long, requires = "config")]
        oracle: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune and write a checkpoint, its `.json` sidecar and a
    /// `.report.jsonl` training report next to it.
    Train {
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, conflicts_with = "dataset")]
        pool: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the static, oracle and policy arms of a scenario.
    Compare {
        #[arg(long)]
        scenario: Scenario,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print plot-ready CSV or a summary table from a comparison directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        emit: Emit,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sl,
    Rl,
}

#[derive(Clone, Copy, ValueEnum)]
enum Emit {
    Cdf,
    Box,
    Summary,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("TCPLLM_LOG", "error")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::Integrity(_) | Error::Version { .. } => 4,
        Error::NonFiniteGradient { .. } | Error::Degenerate(_) | Error::Decision(_) => 1,
        _ => 2,
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate { config, seed, out } => simulate(&config, seed, &out),
        Command::Collect { traces, oracle, config, out } => collect(&traces, oracle, config.as_deref(), &out),
        Command::Train { mode, pool, dataset, config, out } => train(mode, pool, dataset, config.as_deref(), &out),
        Command::Compare { scenario, ckpt, config, seed, out } => compare(scenario, &ckpt, config.as_deref(), seed, &out),
        Command::Report { input, emit } => report(&input, emit),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_trace(dir: &Path, prefix: &str, trace: &ScenarioTrace) -> Result<()> {
    write_trace_csv(create(&dir.join(format!("{prefix}trace.csv")))?, &trace.rows())?;
    write_events_csv(create(&dir.join(format!("{prefix}switches.csv")))?, &trace.switch_events)
}

fn simulate(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let seed = seed.unwrap_or(cfg.seed);
    let trace = run_scenario(&cfg.link, &cfg.flows(), &cfg.sim, seed)?;
    out_dir(out)?;
    write_trace(out, "", &trace)?;
    println!("wrote {} rows for {} flows to {}", trace.rows().len(), trace.flows.len(), out.display());
    Ok(())
}

fn collect(traces: &[PathBuf], oracle: bool, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let pool = if oracle {
        oracle_pool(&cfg.link, &cfg.sim, &cfg.pool, &cfg.oracle)?
    } else {
        if traces.is_empty() {
            return Err(Error::Config("no traces given".into()));
        }
        let mut pool = ExperiencePool::new();
        for (i, path) in traces.iter().enumerate() {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            let rows = read_trace_csv(file).map_err(|e| match e {
                Error::Parse { location, message } => {
                    Error::Parse { location: format!("{} {location}", path.display()), message }
                }
                other => other,
            })?;
            let trace = ScenarioTrace::from_rows(cfg.link.clone(), &rows, Vec::new());
            let source = path.file_stem().map_or_else(|| format!("trace{i}"), |s| s.to_string_lossy().into_owned());
            pool.extend(collect_experience(&trace, None, &source, i as u64)?)?;
        }
        pool
    };
    pool.save(out)?;
    for (source, n) in pool.counts_by_source() {
        println!("{source}: {n}");
    }
    println!("{} trajectories written to {}", pool.len(), out.display());
    Ok(())
}

fn train(mode: ModeArg, pool: Option<PathBuf>, dataset: Option<PathBuf>, config: Option<&Path>, out: &Path) -> Result<()> {
    let mut cfg = load_config(config)?;
    cfg.train.mode = match mode {
        ModeArg::Sl => Mode::Sl,
        ModeArg::Rl => Mode::Rl,
    };
    cfg.model.task = cfg.train.task();
    cfg.validate()?;
    let trained = match (mode, pool, dataset) {
        (ModeArg::Rl, Some(p), None) => trainer::train_rl(&ExperiencePool::load(&p)?, &cfg.model, &cfg.train)?,
        (ModeArg::Sl, None, Some(d)) => {
            let pool = ExperiencePool::load(&d)?;
            let ds = SlDataset::from_pool(&pool, cfg.model.context_steps, cfg.train.sl_target, cfg.train.window_stride)?;
            trainer::train_sl(&ds, &cfg.model, &cfg.train)?
        }
        (ModeArg::Rl, _, _) => return Err(Error::Config("--mode rl needs --pool".into())),
        (ModeArg::Sl, _, _) => return Err(Error::Config("--mode sl needs --dataset".into())),
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        out_dir(parent)?;
    }
    trainer::save_checkpoint(&trained.model, Some(&cfg.train), out)?;
    let mut report_path = out.as_os_str().to_owned();
    report_path.push(".report.jsonl");
    trained.report.save(Path::new(&report_path))?;
    let last = trained.report.last();
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "epoch {}: train_loss {:.4} test_loss {} train_acc {} test_acc {}",
        last.epoch,
        last.train_loss,
        show(last.test_loss),
        show(last.train_acc),
        show(last.test_acc)
    );
    Ok(())
}

fn compare(scenario: Scenario, ckpt: &Path, config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let seed = seed.unwrap_or(cfg.seed);
    let (model, _) = trainer::load_checkpoint(ckpt)?;
    let settings = EvalSettings {
        link: &cfg.link,
        sim: &cfg.sim,
        seed,
        switch_interval_s: cfg.eval.switch_interval_s,
        detectors: &cfg.detectors,
        settle_s: cfg.eval.settle_s,
    };
    let (static_arm, oracle_arm, policy_arm) = std::thread::scope(|s| {
        let st = s.spawn(|| run_scenario(&cfg.link, &scenario.flows(), &cfg.sim, seed));
        let or = s.spawn(|| {
            let sim = scenario_sim(scenario, &cfg.link, &cfg.sim, seed)?;
            run_closed_loop(sim, cfg.eval.switch_interval_s, &mut Oracle(cfg.oracle.clone()))
        });
        let po = s.spawn(|| trainer::evaluate_policy(&model, scenario, &settings));
        (st.join().expect("static arm"), or.join().expect("oracle arm"), po.join().expect("policy arm"))
    });
    let static_trace = static_arm?;
    let (oracle_trace, oracle_decisions) = oracle_arm?;
    let policy = policy_arm?;

    out_dir(out)?;
    let settle = cfg.eval.settle_s;
    let arms = vec![
        arm_report("static", scenario, &static_trace, 0, &cfg.detectors, settle)?,
        arm_report("oracle", scenario, &oracle_trace, oracle_decisions.len(), &cfg.detectors, settle)?,
        policy.report.clone(),
    ];
    let traces = [("static", &static_trace), ("oracle", &oracle_trace), ("policy", &policy.trace)];
    for (arm, trace) in traces {
        write_trace(out, &format!("{arm}_"), trace)?;
    }
    report::write_decisions_csv(create(&out.join("oracle_decisions.csv"))?, &oracle_decisions)?;
    report::write_decisions_csv(create(&out.join("policy_decisions.csv"))?, &policy.decisions)?;
    let cdf = out.join("cdf");
    out_dir(&cdf)?;
    for (arm, trace) in traces {
        for (name, f) in METRICS {
            for (flow, v) in report::metric_values(trace, f) {
                report::write_cdf_csv(create(&cdf.join(format!("{arm}_flow{flow}_{name}.csv")))?, &v)?;
            }
        }
    }
    let summary = CompareSummary { scenario, seed, switch_interval_s: cfg.eval.switch_interval_s, arms };
    let path = out.join("summary.json");
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, &summary).map_err(|e| Error::io(&path, e.into()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))?;
    print!("{}", report::summary_table(&summary, &traces));
    Ok(())
}

fn report(input: &Path, emit: Emit) -> Result<()> {
    let need = |name: &str| -> Result<PathBuf> {
        let p = input.join(name);
        if p.is_file() { Ok(p) } else { Err(Error::Config(format!("missing input {}", p.display()))) }
    };
    let summary_path = need("summary.json")?;
    let text = fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    let summary: CompareSummary = serde_json::from_str(&text)
        .map_err(|e| Error::Parse { location: summary_path.display().to_string(), message: e.to_string() })?;
    let mut traces = Vec::new();
    for arm in report::ARMS {
        let p = need(&format!("{arm}_trace.csv"))?;
        let rows = read_trace_csv(File::open(&p).map_err(|e| Error::io(&p, e))?)?;
        traces.push((arm, ScenarioTrace::from_rows(Default::default(), &rows, Vec::new())));
    }
    let refs: Vec<(&str, &ScenarioTrace)> = traces.iter().map(|(a, t)| (*a, t)).collect();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match emit {
        Emit::Cdf => report::write_cdf_table(&mut out, &refs)?,
        Emit::Box => report::write_box_table(&mut out, &refs)?,
        Emit::Summary => out.write_all(report::summary_table(&summary, &refs).as_bytes()).map_err(|e| Error::io("<stdout>", e))?,
    }
    Ok(())
}

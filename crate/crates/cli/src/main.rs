//! `kanc`: dataset generation, training, evaluation and symbolic
//! regression for transistor compact models.
//!
//! Exit status is 0 on success, 2 for usage, config or missing-input
//! errors, 3 when training diverges (partial artifacts are still written)
//! and 1 for anything else.

mod manifest;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kanc_core::config::{
    ConfigError, DataSection, EvalSection, RunConfig, SymbolicSection, TrainSection,
};
use kanc_core::device::{generate_dataset, Target, VoltageGridDataset, SUPPORTED_STEPS_MV};
use kanc_core::evaluate::{derivative_sweep, make_report, ReportInput, DEFAULT_SWEEP_VD};
use kanc_core::networks::{Checkpoint, Conversion, NetworkKind, TrainMeta};
use kanc_core::symbolic::{iterative_sr_with, variable_names, SrOutcome};
use kanc_core::training::{
    seed_sweep, train, Architecture, DeviceObjective, Objective, TrainConfig,
};
use manifest::RunManifest;
use serde_json::json;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "kanc",
    version,
    about = "KAN, Fourier-KAN and MLP transistor compact models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the analytical surrogate on the 5 mV master grid.
    GenData {
        /// Train sub-grid step in mV (5, 10, 20 or 50).
        #[arg(long)]
        step: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model (or a seed sweep) from a config file and/or flags.
    Train(TrainArgs),
    /// Train/test MAPE and derivative waviness of one checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// g_m and g_m' sweeps over V_G at fixed drain voltages.
    Derivs {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Fixed drain voltages in volts; defaults to 0.4 and 0.8.
        #[arg(long = "vd")]
        v_d: Vec<f64>,
        /// V_G axis resolution in mV.
        #[arg(long, default_value_t = 1.0)]
        resolution: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Symbolic regression of a trained KAN.
    Symbolic {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: SrMode,
        /// Edges fixed per round in iterative mode.
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Training budget the per-round retraining is a fraction of.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        retrain_fraction: Option<f64>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Combined table and curves for several checkpoints.
    Report {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// One label per checkpoint; file stems are used otherwise.
        #[arg(long = "label")]
        labels: Vec<String>,
        #[arg(long = "vd")]
        v_d: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        resolution: f64,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SrMode {
    Posthoc,
    Iterative,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset CSV written by `gen-data`; the surrogate is sampled otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Train sub-grid step when sampling the surrogate.
    #[arg(long)]
    step: Option<u32>,
    /// Target of the checkpoint, when its metadata lacks one.
    #[arg(long)]
    target: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    step: Option<u32>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    full_budget: bool,
    /// Train this many seeds starting at the configured one.
    #[arg(long)]
    sweep: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { step, out } => cmd_gen_data(step, &out),
        Command::Train(args) => cmd_train(&args),
        Command::Eval {
            checkpoint,
            data,
            out,
        } => cmd_eval(&checkpoint, &data, &out),
        Command::Derivs {
            checkpoint,
            v_d,
            resolution,
            out,
        } => cmd_derivs(&checkpoint, &v_d, resolution, &out),
        Command::Symbolic {
            checkpoint,
            mode,
            k,
            epochs,
            retrain_fraction,
            data,
            out,
        } => cmd_symbolic(&checkpoint, mode, k, epochs, retrain_fraction, &data, &out),
        Command::Report {
            checkpoints,
            labels,
            v_d,
            resolution,
            data,
            out,
        } => cmd_report(&checkpoints, &labels, &v_d, resolution, &data, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kanc: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn parse_target(s: &str) -> CliResult<Target> {
    s.parse().map_err(usage)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
    std::fs::write(path, contents)
        .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(path.to_path_buf())
}

fn load_dataset_file(path: &Path) -> CliResult<VoltageGridDataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| usage(format!("cannot open dataset {}: {e}", path.display())))?;
    VoltageGridDataset::read_csv(std::io::BufReader::new(file)).map_err(usage)
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(usage(format!("checkpoint {} not found", path.display())));
    }
    Checkpoint::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Dataset named by `--data`, else the surrogate at `--step`, else at the
/// step recorded in the checkpoint (10 mV when unknown). Returns the input
/// files that went into it.
fn resolve_dataset(
    args: &DataArgs,
    meta: Option<&TrainMeta>,
) -> CliResult<(VoltageGridDataset, Vec<PathBuf>)> {
    if let Some(path) = &args.data {
        return Ok((load_dataset_file(path)?, vec![path.clone()]));
    }
    let step = args.step.or(meta.and_then(|m| m.step_mv)).unwrap_or(10);
    Ok((generate_dataset(step).map_err(usage)?, Vec::new()))
}

fn checkpoint_target(ck: &Checkpoint, flag: Option<&str>) -> CliResult<Target> {
    if let Some(t) = flag {
        return parse_target(t);
    }
    if let Some(t) = ck.meta.target {
        return Ok(t);
    }
    match ck.network.spec.conversion {
        Conversion::ExpCurrent => Ok(Target::Id),
        Conversion::ChargeScale => Err(usage("checkpoint has no target; pass --target")),
    }
}

fn cmd_gen_data(step: u32, out: &Path) -> CliResult<()> {
    if !SUPPORTED_STEPS_MV.contains(&step) {
        return Err(usage(format!(
            "unsupported step {step} mV (expected one of {SUPPORTED_STEPS_MV:?})"
        )));
    }
    let ds = generate_dataset(step).map_err(usage)?;
    let mut buf = Vec::new();
    ds.write_csv(&mut buf).map_err(runtime)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write(out, buf)?;
    let manifest_path = out.with_extension("manifest.json");
    RunManifest::new("gen-data", json!({ "step_mv": step }), None)
        .write(&manifest_path, &[], &[out.to_path_buf()], None)
        .map_err(runtime)?;
    println!(
        "wrote {} ({} train / {} test points)",
        out.display(),
        ds.train.len(),
        ds.test.len()
    );
    Ok(())
}

/// Config file (if any) with command-line overrides applied.
fn train_run_config(args: &TrainArgs) -> CliResult<(RunConfig, Vec<PathBuf>)> {
    let mut inputs = Vec::new();
    let mut cfg = match &args.config {
        Some(path) => {
            inputs.push(path.clone());
            RunConfig::load(path).map_err(|e| match e {
                ConfigError::Io(io) => usage(format!("cannot read {}: {io}", path.display())),
                other => usage(other),
            })?
        }
        None => {
            let (Some(arch), Some(target)) = (&args.arch, &args.target) else {
                return Err(usage(
                    "either --config or both --arch and --target are required",
                ));
            };
            RunConfig {
                data: DataSection::default(),
                train: TrainSection {
                    architecture: arch.parse::<Architecture>().map_err(usage)?,
                    target: parse_target(target)?,
                    seed: 0,
                    full_budget: false,
                    epochs: None,
                    loss_weight: None,
                    lr: None,
                    weight_decay: None,
                    plateau_window: None,
                    plateau_threshold: None,
                    plateau_factor: None,
                    min_lr: None,
                    decay_factor: None,
                    decay_interval: None,
                    ladder: None,
                    lbfgs_history: None,
                    lbfgs_max_iter: None,
                },
                symbolic: SymbolicSection::default(),
                eval: EvalSection::default(),
            }
        }
    };
    if args.config.is_some() {
        if let Some(a) = &args.arch {
            cfg.train.architecture = a.parse().map_err(usage)?;
        }
        if let Some(t) = &args.target {
            cfg.train.target = parse_target(t)?;
        }
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = Some(e);
    }
    if let Some(s) = args.step {
        cfg.data.step_mv = s;
    }
    if let Some(lr) = args.lr {
        cfg.train.lr = Some(lr);
    }
    cfg.train.full_budget |= args.full_budget;
    Ok((cfg, inputs))
}

fn train_log_csv(outcome: &kanc_core::training::TrainOutcome) -> String {
    outcome.log.to_csv()
}

fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let (run, mut inputs) = train_run_config(args)?;
    let cfg: TrainConfig = run.train_config().map_err(usage)?;
    let dataset = match &run.data.path {
        Some(p) => {
            let path = PathBuf::from(p);
            let ds = load_dataset_file(&path)?;
            inputs.push(path);
            ds
        }
        None => generate_dataset(cfg.step_mv).map_err(usage)?,
    };
    create_dir(&args.out)?;
    let mut outputs = Vec::new();
    let mut diverged = Vec::new();
    match args.sweep {
        None => {
            let outcome = train(&cfg, &dataset).map_err(runtime)?;
            let ck = outcome.checkpoint(&cfg);
            let path = args.out.join("checkpoint.json");
            ck.save(&path).map_err(runtime)?;
            outputs.push(path);
            outputs.push(write(
                &args.out.join("train_log.csv"),
                train_log_csv(&outcome),
            )?);
            if outcome.log.diverged {
                diverged.push(cfg.seed);
            }
            println!(
                "{} on {}: {} epochs, final loss {}",
                cfg.architecture,
                cfg.target,
                outcome.log.records.len(),
                outcome
                    .log
                    .final_loss
                    .map(|l| format!("{l:.6e}"))
                    .unwrap_or_else(|| "n/a".into())
            );
        }
        Some(0) => return Err(usage("--sweep needs at least one seed")),
        Some(n) => {
            let out = &args.out;
            let summary = seed_sweep(&cfg, &dataset, n, |c, o| {
                let dir = out.join(format!("seed_{}", c.seed));
                std::fs::create_dir_all(&dir).map_err(kanc_core::networks::NetworkError::Io)?;
                let path = dir.join("checkpoint.json");
                o.checkpoint(c).save(&path)?;
                std::fs::write(dir.join("train_log.csv"), train_log_csv(o))
                    .map_err(kanc_core::networks::NetworkError::Io)?;
                outputs.push(path);
                outputs.push(dir.join("train_log.csv"));
                if o.log.diverged {
                    diverged.push(c.seed);
                }
                Ok(())
            })
            .map_err(runtime)?;
            outputs.push(write(&out.join("sweep_summary.csv"), summary.to_csv())?);
            if let Some(q) = summary.train {
                println!(
                    "train MAPE median {:.4}% (q1 {:.4}%, q3 {:.4}%)",
                    100.0 * q.median,
                    100.0 * q.q1,
                    100.0 * q.q3
                );
            }
        }
    }
    let config_json = json!({ "run": run, "resolved": cfg, "sweep": args.sweep });
    RunManifest::new("train", config_json, Some(cfg.seed))
        .write(
            &args.out.join("manifest.json"),
            &inputs,
            &outputs,
            Some(&args.out),
        )
        .map_err(runtime)?;
    if !diverged.is_empty() {
        return Err(CliError::Diverged(format!(
            "training diverged for seed(s) {diverged:?}; partial artifacts written"
        )));
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &DataArgs, out: &Path) -> CliResult<()> {
    cmd_report(&[checkpoint.to_path_buf()], &[], &[], 1.0, data, out).map(|_| ())
}

fn sweep_voltages(v_d: &[f64]) -> Vec<f64> {
    if v_d.is_empty() {
        DEFAULT_SWEEP_VD.to_vec()
    } else {
        v_d.to_vec()
    }
}

fn cmd_derivs(checkpoint: &Path, v_d: &[f64], resolution: f64, out: &Path) -> CliResult<()> {
    let ck = load_checkpoint(checkpoint)?;
    if ck.network.spec.conversion != Conversion::ExpCurrent {
        return Err(usage("derivative sweeps need a drain-current checkpoint"));
    }
    create_dir(out)?;
    let voltages = sweep_voltages(v_d);
    let mut outputs = Vec::new();
    for &vd in &voltages {
        let sweep = derivative_sweep(&ck.network, vd, resolution).map_err(usage)?;
        outputs.push(write(
            &out.join(format!("curve_vd{vd}.csv")),
            sweep.to_csv(),
        )?);
    }
    RunManifest::new(
        "derivs",
        json!({ "v_d": voltages, "resolution_mv": resolution }),
        Some(ck.meta.seed),
    )
    .write(
        &out.join("manifest.json"),
        &[checkpoint.to_path_buf()],
        &outputs,
        Some(out),
    )
    .map_err(runtime)?;
    println!("wrote {} sweep(s) to {}", outputs.len(), out.display());
    Ok(())
}

/// Training preset whose shape matches the checkpoint, for retraining.
fn architecture_for(ck: &Checkpoint, target: Target) -> Architecture {
    let spec = &ck.network.spec;
    Architecture::ALL
        .into_iter()
        .find(|a| {
            let s = a.spec(target);
            s.kind == spec.kind && s.widths == spec.widths
        })
        .unwrap_or(match spec.kind {
            NetworkKind::Mlp => Architecture::Mlp1,
            NetworkKind::Kan => Architecture::KanSr,
            NetworkKind::Fkan => Architecture::Fkan1,
        })
}

fn rounds_csv(outcome: &SrOutcome) -> String {
    let mut s =
        String::from("round,layer,input,output,function,a,b,c,d,r2,loss,train_mape,test_mape\n");
    let f = |v: Option<f64>| v.map(|x| format!("{x:.10e}")).unwrap_or_default();
    for r in &outcome.rounds {
        for e in &r.fixed {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{},{},{}",
                r.round,
                e.edge.layer,
                e.edge.input,
                e.edge.output,
                e.fit.function,
                e.fit.a,
                e.fit.b,
                e.fit.c,
                e.fit.d,
                e.fit.r2,
                f(r.loss),
                f(r.mape.map(|m| m.train)),
                f(r.mape.and_then(|m| m.test)),
            );
        }
    }
    s
}

fn cmd_symbolic(
    checkpoint: &Path,
    mode: SrMode,
    k: usize,
    epochs: Option<usize>,
    retrain_fraction: Option<f64>,
    data: &DataArgs,
    out: &Path,
) -> CliResult<()> {
    let ck = load_checkpoint(checkpoint)?;
    if ck.network.kind() != NetworkKind::Kan {
        return Err(usage("symbolic regression needs a KAN checkpoint"));
    }
    if k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let target = checkpoint_target(&ck, data.target.as_deref())?;
    let (dataset, mut inputs) = resolve_dataset(data, Some(&ck.meta))?;
    let mut cfg = TrainConfig::new(architecture_for(&ck, target), target);
    cfg.step_mv = dataset.step_mv;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let fraction = retrain_fraction.unwrap_or(kanc_core::symbolic::RETRAIN_FRACTION);
    if !(fraction >= 0.0 && fraction.is_finite()) {
        return Err(usage("--retrain-fraction must be non-negative"));
    }
    let objective =
        Objective::Device(DeviceObjective::new(&dataset, target, cfg.loss_weight).map_err(usage)?);
    let metric =
        |n: &kanc_core::Network| kanc_core::evaluate::dataset_mape(n, &dataset, target).ok();
    let (k_used, retrain) = match mode {
        SrMode::Posthoc => (ck.network.edge_ids().len(), 0),
        SrMode::Iterative => (k, (cfg.epochs as f64 * fraction).round() as usize),
    };
    let outcome = iterative_sr_with(&ck.network, &objective, k_used, &cfg, retrain, metric)
        .map_err(runtime)?;
    create_dir(out)?;
    let mut outputs = vec![write(&out.join("rounds.csv"), rounds_csv(&outcome))?];
    let symbolic_ck = Checkpoint::new(
        outcome.model.network.clone(),
        TrainMeta {
            diverged: outcome.diverged,
            ..ck.meta.clone()
        },
    );
    let ck_path = out.join("symbolic_checkpoint.json");
    symbolic_ck.save(&ck_path).map_err(runtime)?;
    outputs.push(ck_path);
    if !outcome.diverged {
        let formula = outcome.model.formula().map_err(runtime)?;
        let lhs = target.name();
        outputs.push(write(
            &out.join("formula.txt"),
            format!("{}\n", formula.equation(lhs)),
        )?);
        let tree = serde_json::to_string_pretty(&formula).map_err(runtime)?;
        outputs.push(write(&out.join("formula.json"), tree + "\n")?);
        let names = variable_names(ck.network.input_width());
        println!("{} rounds; variables {:?}", outcome.rounds.len(), names);
        println!("{}", formula.equation(lhs));
        if let Some(m) = outcome.rounds.last().and_then(|r| r.mape) {
            println!("train MAPE {:.4}%", 100.0 * m.train);
        }
    }
    inputs.insert(0, checkpoint.to_path_buf());
    let mode_name = match mode {
        SrMode::Posthoc => "posthoc",
        SrMode::Iterative => "iterative",
    };
    let config = json!({ "mode": mode_name, "k": k_used, "retrain_epochs": retrain, "target": target, "step_mv": dataset.step_mv });
    RunManifest::new("symbolic", config, Some(ck.meta.seed))
        .write(&out.join("manifest.json"), &inputs, &outputs, Some(out))
        .map_err(runtime)?;
    if outcome.diverged {
        return Err(CliError::Diverged(
            "retraining diverged; partial artifacts written".into(),
        ));
    }
    Ok(())
}

fn default_labels(paths: &[PathBuf]) -> Vec<String> {
    let mut labels: Vec<String> = Vec::with_capacity(paths.len());
    for (i, p) in paths.iter().enumerate() {
        let stem = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        // `run/checkpoint.json` reads better as `run`
        let base = if stem == "checkpoint" {
            p.parent()
                .and_then(|d| d.file_name())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or(stem)
        } else {
            stem
        };
        let label = if labels.contains(&base) {
            format!("{base}_{i}")
        } else {
            base
        };
        labels.push(label);
    }
    labels
}

fn cmd_report(
    checkpoints: &[PathBuf],
    labels: &[String],
    v_d: &[f64],
    resolution: f64,
    data: &DataArgs,
    out: &Path,
) -> CliResult<()> {
    if !labels.is_empty() && labels.len() != checkpoints.len() {
        return Err(usage("give either no --label or one per --checkpoint"));
    }
    let cks = checkpoints
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<CliResult<Vec<_>>>()?;
    let labels = if labels.is_empty() {
        default_labels(checkpoints)
    } else {
        labels.to_vec()
    };
    let (dataset, mut inputs) = resolve_dataset(data, cks.first().map(|c| &c.meta))?;
    let models = cks
        .iter()
        .zip(&labels)
        .map(|(ck, label)| {
            Ok(ReportInput {
                label: label.clone(),
                target: checkpoint_target(ck, data.target.as_deref())?,
                seed: ck.meta.seed,
                network: &ck.network,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let voltages = sweep_voltages(v_d);
    let report = make_report(&models, &dataset, &voltages, resolution).map_err(usage)?;
    create_dir(out)?;
    let outputs = report.write_files(out).map_err(runtime)?;
    print!("{}", report.summary_csv());
    let mut all_inputs = checkpoints.to_vec();
    all_inputs.append(&mut inputs);
    let config = json!({ "labels": labels, "v_d": voltages, "resolution_mv": resolution, "step_mv": dataset.step_mv });
    let command = if checkpoints.len() == 1 {
        "eval"
    } else {
        "report"
    };
    RunManifest::new(command, config, None)
        .write(&out.join("manifest.json"), &all_inputs, &outputs, Some(out))
        .map_err(runtime)?;
    Ok(())
}

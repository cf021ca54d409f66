use std::fmt;
use std::fs;
use std::path::Path;

use serde::Serialize;
use temporal_range::ablation::{ablation_sweep, deployment_check, knee};
use temporal_range::metric::{RangeValue, TemporalRangeReport};
use temporal_range::model::{checkpoint, Init};
use temporal_range::oracles::{
    axiom_suite, axiom_suite_with, linear_map_range, oracle_suite, AxiomReport, LinearTemporalMap,
};
use temporal_range::tasks::{CopyTaskSpec, Dataset, Hidden, ImitationSpec, LabeledSequence, ObsVariant, TaskSpec};
use temporal_range::trainer::{train as fit, Metric, OptConfig};
use temporal_range::{
    analyze as analyze_report, Aggregation, CellKind, CellSpec, EncoderSpec, Error, JacobianMode, LossKind, Matrix,
    ModelSpec, NormKind, NormalizedRange, Rng, SequenceModel, TrConfig,
};

use crate::manifest::{config_fingerprint, FileRecord, OutputDir};
use crate::svg;
use crate::{
    AblateArgs, AggArg, AnalyzeArgs, AxiomArgs, BuildArgs, BuildKind, DataSource, GenDataArgs, HideArg, ModeArg,
    ModelArg, NormArg, OracleArgs, TaskArgs, TaskKind, TrainArgs, VariantArg,
};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Check(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Check(_) => 1,
            CliError::Core(Error::Numerical { .. } | Error::Divergence { .. }) => 1,
            CliError::Core(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Check(m) => f.write_str(m),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn json<T: Serialize>(value: &T) -> CliResult<Vec<u8>> {
    Ok((serde_json::to_string_pretty(value)? + "\n").into_bytes())
}

fn csv_bytes(write: impl FnOnce(&mut Vec<u8>) -> temporal_range::Result<()>) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(buf)
}

fn norm_kind(n: NormArg) -> NormKind {
    match n {
        NormArg::Frobenius => NormKind::Frobenius,
        NormArg::Spectral => NormKind::Spectral,
    }
}

fn task_spec(args: &TaskArgs) -> CliResult<TaskSpec> {
    let kind = args
        .task
        .ok_or_else(|| CliError::Usage("--task is required when no --data file is given".into()))?;
    let hidden = match args.hide {
        HideArg::Velocities => Hidden::Velocities,
        HideArg::Positions => Hidden::Positions,
    };
    let spec = match kind {
        TaskKind::Copy => {
            let spec = CopyTaskSpec {
                k: args.k,
                len: args.len,
                vocab: args.vocab,
            };
            spec.validate()?;
            TaskSpec::Copy(spec)
        }
        TaskKind::RepeatFirst => {
            if args.len < 2 || args.vocab < 2 {
                return Err(CliError::Usage("repeat-first needs --len >= 2 and --vocab >= 2".into()));
            }
            TaskSpec::RepeatFirst {
                len: args.len,
                vocab: args.vocab,
            }
        }
        TaskKind::Cartpole => {
            let variant = match args.variant {
                VariantArg::Full => ObsVariant::Full,
                VariantArg::Stateless => ObsVariant::Stateless { hidden },
                VariantArg::Noisy => ObsVariant::NoisyStateless {
                    hidden,
                    sigma: args.sigma,
                },
            };
            let spec = ImitationSpec::new(variant, args.len);
            spec.validate()?;
            TaskSpec::Cartpole(spec)
        }
    };
    Ok(spec)
}

/// Loads `--data` or generates `n` sequences from the task flags.
fn load_source(src: &DataSource, n: usize) -> CliResult<(Dataset, Vec<FileRecord>, Option<u64>)> {
    match &src.data {
        Some(path) => {
            let data = Dataset::load(path)?;
            Ok((data, vec![FileRecord::of_file(path)?], None))
        }
        None => {
            let spec = task_spec(&src.task)?;
            Ok((Dataset::generate(spec, n, src.seed)?, Vec::new(), Some(src.seed)))
        }
    }
}

fn load_model(path: &Path) -> CliResult<(SequenceModel, FileRecord)> {
    let model = checkpoint::load(path)?;
    Ok((model, FileRecord::of_file(path)?))
}

fn check_compatible(model: &SequenceModel, data: &Dataset) -> CliResult {
    let (d, c) = (data.task.input_dim(), data.task.classes());
    if model.input_dim() != d {
        return Err(CliError::Usage(format!(
            "model expects {}-dimensional inputs, data has {d}",
            model.input_dim()
        )));
    }
    if model.output_dim() < c {
        return Err(CliError::Usage(format!(
            "model has {} outputs, data has {c} classes",
            model.output_dim()
        )));
    }
    Ok(())
}

pub fn build(args: &BuildArgs) -> CliResult {
    if args.dim == 0 {
        return Err(CliError::Usage("--dim must be >= 1".into()));
    }
    let model = match args.kind {
        BuildKind::ShiftCopy => SequenceModel::shift_copy(args.k, &Matrix::identity(args.dim))?,
        BuildKind::Memoryless => SequenceModel::memoryless(args.dim, args.width, args.dim, &mut Rng::new(args.seed))?,
        BuildKind::Linear => {
            let a = Matrix::from_vec(1, 1, vec![args.a])?;
            let c = Matrix::from_vec(1, args.dim, vec![1.0; args.dim])?;
            let q = Matrix::from_vec(args.dim, 1, vec![1.0; args.dim])?;
            SequenceModel::linear_recurrence(a, c, q)?
        }
    };
    let mut out = OutputDir::create(&args.out_dir)?;
    out.write("model.ckpt", checkpoint::to_string(&model).as_bytes())?;
    out.finish("build", config_fingerprint("build", args), Some(args.seed), Vec::new())?;
    println!("wrote {}", args.out_dir.join("model.ckpt").display());
    Ok(())
}

pub fn gen_data(args: &GenDataArgs) -> CliResult {
    if args.n == 0 {
        return Err(CliError::Usage("--n must be >= 1".into()));
    }
    let data = Dataset::generate(task_spec(&args.task)?, args.n, args.seed)?;
    let mut out = OutputDir::create(&args.out_dir)?;
    out.write("data.json", data.to_json()?.as_bytes())?;
    out.finish(
        "gen-data",
        config_fingerprint("gen-data", args),
        Some(args.seed),
        Vec::new(),
    )?;
    println!(
        "wrote {} sequences to {}",
        data.len(),
        args.out_dir.join("data.json").display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    task: TaskSpec,
    model: ModelSpec,
    opt: &'a OptConfig,
    train_data_seed: u64,
    val_data_seed: u64,
    steps_run: usize,
    final_loss: Option<f64>,
    metric: Metric,
    final_train: f64,
    final_val: Option<f64>,
    fd_check_error: Option<f64>,
    stopped_early: bool,
}

pub fn train(args: &TrainArgs) -> CliResult {
    let task = task_spec(&args.task)?;
    if args.n_train == 0 || args.n_val == 0 {
        return Err(CliError::Usage("--n-train and --n-val must be >= 1".into()));
    }
    let kind = match args.model {
        ModelArg::Gru => CellKind::Gru,
        ModelArg::Lstm => CellKind::Lstm,
        ModelArg::Lem => CellKind::Lem,
        ModelArg::Linear => CellKind::LinearRec,
    };
    let mut cell = CellSpec::new(kind, task.input_dim(), args.hidden);
    cell.lem_dt = args.lem_dt;
    let spec = ModelSpec {
        cell,
        encoder: args
            .encoder_width
            .map_or(EncoderSpec::Identity, |width| EncoderSpec::Tanh { width }),
        output_dim: task.classes(),
    };
    let cfg = OptConfig {
        lr: args.lr,
        batch_size: args.batch_size,
        steps: args.steps,
        clip: args.clip,
        seed: args.seed,
        loss: LossKind::CrossEntropy,
        eval_every: args.eval_every,
        stop_at: args.stop_at,
        fd_check: !args.no_fd_check,
        ..OptConfig::default()
    };
    cfg.validate()?;

    let mut root = Rng::new(args.seed);
    let train_seed = root.next_u64();
    let val_seed = root.next_u64();
    let train_data = Dataset::generate(task, args.n_train, train_seed)?;
    let val_data = Dataset::generate(task, args.n_val, val_seed)?;
    let init = SequenceModel::init(&spec, Init::Glorot, &mut root.split())?;
    let (model, log) = fit(&init, &train_data.sequences, Some(&val_data.sequences), &cfg)?;

    let summary = TrainSummary {
        task,
        model: spec,
        opt: &cfg,
        train_data_seed: train_seed,
        val_data_seed: val_seed,
        steps_run: log.records.len(),
        final_loss: log.records.last().map(|r| r.loss),
        metric: log.metric,
        final_train: log.final_train,
        final_val: log.final_val,
        fd_check_error: log.fd_check_error,
        stopped_early: log.stopped_early,
    };
    let mut out = OutputDir::create(&args.out_dir)?;
    out.write("model.ckpt", checkpoint::to_string(&model).as_bytes())?;
    out.write("train_log.csv", &csv_bytes(|b| log.write_csv(b))?)?;
    out.write("train.json", &json(&summary)?)?;
    out.write("val_data.json", val_data.to_json()?.as_bytes())?;
    out.finish("train", config_fingerprint("train", args), Some(args.seed), Vec::new())?;
    println!(
        "steps {}  train {} {:.4}  val {} {:.4}  ({:.1}s)",
        summary.steps_run,
        log.metric.as_str(),
        log.final_train,
        log.metric.as_str(),
        log.final_val.unwrap_or(f64::NAN),
        log.wall_time_secs
    );
    Ok(())
}

fn take_rollouts(data: &[LabeledSequence], count: usize) -> &[LabeledSequence] {
    &data[..count.min(data.len())]
}

pub fn analyze(args: &AnalyzeArgs) -> CliResult {
    if args.rollouts == 0 {
        return Err(CliError::Usage("--rollouts must be >= 1".into()));
    }
    let (model, model_rec) = load_model(&args.model)?;
    let (data, mut inputs, seed) = load_source(&args.source, args.rollouts)?;
    check_compatible(&model, &data)?;
    let len = data.task.len();
    let window = args.window.unwrap_or(len);
    if window > len {
        return Err(CliError::Usage(format!(
            "--window {window} exceeds rollout length {len}"
        )));
    }
    let cfg = TrConfig {
        norm: norm_kind(args.norm),
        aggregation: match args.agg {
            AggArg::Mean => Aggregation::Mean,
            AggArg::Max => Aggregation::Max,
        },
        mode: match args.mode {
            ModeArg::Multi => JacobianMode::MultiOutput,
            ModeArg::Final => JacobianMode::FinalOutput,
        },
        window,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let xs = take_rollouts(&data.sequences, args.rollouts)
        .iter()
        .map(|s| s.x.prefix(window))
        .collect::<temporal_range::Result<Vec<_>>>()?;
    let report = analyze_report(&model, &xs, &cfg)?;

    let by_lag: Vec<f64> = report.pooled.weights.iter().rev().copied().collect();
    let title = format!(
        "Influence profile ({}, {}, {})",
        cfg.mode.as_str(),
        cfg.aggregation.as_str(),
        match cfg.norm {
            NormKind::Frobenius => "frobenius",
            NormKind::Spectral => "spectral",
        }
    );
    let mut out = OutputDir::create(&args.out_dir)?;
    out.write("report.json", report.to_json()?.as_bytes())?;
    out.write("profile.csv", &csv_bytes(|b| report.write_profile_csv(b))?)?;
    out.write(
        "profile.svg",
        svg::profile_chart(&title, &by_lag, report.rho_hat_mean).as_bytes(),
    )?;
    inputs.insert(0, model_rec);
    out.finish("analyze", config_fingerprint("analyze", args), seed, inputs)?;
    match report.rho_hat() {
        NormalizedRange::Value(v) => println!(
            "rho_hat {v:.6} (std {:.6})  rho {:.6}  rollouts {}  degenerate {}",
            report.rho_hat_std.unwrap_or(0.0),
            report.rho_mean,
            report.rollouts.len(),
            report.degenerate_rollouts
        ),
        NormalizedRange::Degenerate => {
            println!(
                "degenerate: all influence weights are zero on {} rollouts",
                report.rollouts.len()
            )
        }
    }
    Ok(())
}

pub fn oracle(args: &OracleArgs) -> CliResult {
    if args.specs == 0 || args.len < 2 {
        return Err(CliError::Usage("--specs must be >= 1 and --len >= 2".into()));
    }
    let report = oracle_suite(&mut Rng::new(args.seed), args.specs, args.len, args.inject_fault)?;
    let mut out = OutputDir::create(&args.out_dir)?;
    out.write("oracle.json", report.to_json()?.as_bytes())?;
    out.finish(
        "oracle",
        config_fingerprint("oracle", args),
        Some(args.seed),
        Vec::new(),
    )?;
    for c in &report.checks {
        println!(
            "{:<4} {:<32} cases {:>3}  max residual {:.3e}  tolerance {:.0e}",
            if c.passed { "ok" } else { "FAIL" },
            c.name,
            c.cases,
            c.max_residual,
            c.tolerance
        );
    }
    if report.passed {
        return Ok(());
    }
    let worst = report.worst().expect("non-empty");
    Err(CliError::Check(format!(
        "oracle check failed; worst residual {:.6e} in {} (tolerance {:.0e})",
        worst.max_residual, worst.name, worst.tolerance
    )))
}

/// Range with lags counted from 1 instead of 0.
fn shifted_lag_range(map: &LinearTemporalMap, norm: NormKind) -> temporal_range::Result<RangeValue> {
    let base = linear_map_range(map, norm)?;
    let mass = map.mass(norm)?;
    let rho = base.rho + mass;
    Ok(RangeValue {
        rho,
        rho_hat: match base.rho_hat {
            NormalizedRange::Value(v) => NormalizedRange::Value(v + 1.0),
            NormalizedRange::Degenerate => NormalizedRange::Degenerate,
        },
    })
}

pub fn axioms(args: &AxiomArgs) -> CliResult {
    let norm = norm_kind(args.norm);
    let mut rng = Rng::new(args.seed);
    let report: AxiomReport = if args.inject_fault {
        axiom_suite_with(&mut rng, args.trials, norm, &shifted_lag_range)?
    } else {
        axiom_suite(&mut rng, args.trials, norm)?
    };
    let mut out = OutputDir::create(&args.out_dir)?;
    out.write("axioms.json", report.to_json()?.as_bytes())?;
    out.finish(
        "axioms",
        config_fingerprint("axioms", args),
        Some(args.seed),
        Vec::new(),
    )?;
    for c in &report.checks {
        println!(
            "{:<4} {:<8} trials {:>4}  max residual {:.3e}",
            if c.passed { "ok" } else { "FAIL" },
            c.name,
            c.trials,
            c.max_residual
        );
    }
    if report.passed {
        return Ok(());
    }
    let worst = report
        .checks
        .iter()
        .max_by(|a, b| a.max_residual.total_cmp(&b.max_residual))
        .expect("non-empty");
    Err(CliError::Check(format!(
        "axiom suite failed; worst residual {:.6e} in {} (tolerance {:.0e})",
        worst.max_residual, worst.name, report.tolerance
    )))
}

#[derive(Serialize)]
struct AblationSummary<'a> {
    curve: &'a temporal_range::ablation::AblationCurve,
    threshold: f64,
    knee: Option<usize>,
    rho_hat: Option<f64>,
}

pub fn ablate(args: &AblateArgs) -> CliResult {
    if args.n == Some(0) {
        return Err(CliError::Usage("--n must be >= 1".into()));
    }
    if !(args.threshold > 0.0 && args.threshold <= 1.0) {
        return Err(CliError::Usage(format!(
            "--threshold must be in (0, 1], got {}",
            args.threshold
        )));
    }
    let (model, model_rec) = load_model(&args.model)?;
    let (data, mut inputs, seed) = load_source(&args.source, args.n.unwrap_or(200))?;
    check_compatible(&model, &data)?;
    inputs.insert(0, model_rec);
    let seqs = take_rollouts(&data.sequences, args.n.unwrap_or(data.len()));
    let report = match &args.report {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            inputs.push(FileRecord::of_file(path)?);
            Some(TemporalRangeReport::from_json(&text)?)
        }
        None => None,
    };
    let rho_hat = report.as_ref().and_then(|r| r.rho_hat_mean);

    let metric = Metric::Accuracy;
    let curve = ablation_sweep(&model, seqs, &args.windows, metric).map_err(|e| match e {
        Error::Spec(m) | Error::Config(m) => CliError::Usage(m),
        e => e.into(),
    })?;
    let knee_at = knee(&curve, args.threshold)?;
    let points: Vec<(usize, f64)> = curve.points.iter().map(|p| (p.window, p.normalized)).collect();

    let mut out = OutputDir::create(&args.out_dir)?;
    out.write("ablation.csv", &csv_bytes(|b| curve.write_csv(b))?)?;
    out.write(
        "ablation.svg",
        svg::ablation_chart("Window ablation", &points, rho_hat).as_bytes(),
    )?;
    out.write(
        "ablation.json",
        &json(&AblationSummary {
            curve: &curve,
            threshold: args.threshold,
            knee: knee_at,
            rho_hat,
        })?,
    )?;
    let deployment = if args.deploy {
        let report = report.as_ref().expect("--deploy requires --report");
        if report.degenerate {
            return Err(CliError::Usage("deployment check needs a non-degenerate report".into()));
        }
        let check = deployment_check(&model, seqs, report, metric)?;
        out.write("deployment.json", &json(&check)?)?;
        Some(check)
    } else {
        None
    };
    out.finish("ablate", config_fingerprint("ablate", args), seed, inputs)?;

    println!("baseline {} {:.4}", metric.as_str(), curve.baseline);
    for p in &curve.points {
        println!("m {:>4}  {:.4}  normalized {:.4}", p.window, p.mean, p.normalized);
    }
    match knee_at {
        Some(m) => println!("knee at m = {m}"),
        None => println!("no window reaches {:.2} of baseline", args.threshold),
    }
    if let Some(d) = deployment {
        println!(
            "deployment: window {} retention {:.4}, half window {} retention {:.4}",
            d.window, d.window_retention, d.half_window, d.half_retention
        );
    }
    Ok(())
}

//! End-to-end acceptance criteria. Runs without the libtest harness so each
//! criterion prints exactly one PASS/FAIL line.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use temporal_range::ablation::{ablation_sweep, deployment_check, DEFAULT_WINDOWS};
use temporal_range::grad::{fd_jacobian, fd_param_gradients, max_relative_error, param_gradients};
use temporal_range::metric::{check_input_scaling, check_output_scaling, sequence_profile};
use temporal_range::model::Init;
use temporal_range::oracles::{axiom_suite, recurrence_profile, RecurrenceSpec, AXIOM_NAMES};
use temporal_range::tasks::{gen_copyk, CopyTaskSpec, LabeledSequence};
use temporal_range::trainer::{train, Metric, OptConfig};
use temporal_range::{
    analyze, input_jacobians, Aggregation, CellKind, CellSpec, EncoderSpec, JacobianMode, LossKind, Matrix, ModelSpec,
    NormKind, ObservationSequence, Rng, SequenceModel, Target, TrConfig,
};

type Outcome = Result<String, String>;

const NORMS: [NormKind; 2] = [NormKind::Frobenius, NormKind::Spectral];
const AGGS: [Aggregation; 2] = [Aggregation::Mean, Aggregation::Max];
const CHANCE: f64 = 0.25;

fn random_seq(rng: &mut Rng, len: usize, d: usize) -> ObservationSequence {
    let data = (0..len * d).map(|_| rng.gaussian()).collect();
    ObservationSequence::new(Matrix::from_vec(len, d, data).unwrap()).unwrap()
}

fn random_matrix(rng: &mut Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gaussian()).collect()).unwrap()
}

fn cfg(norm: NormKind, aggregation: Aggregation, mode: JacobianMode, window: usize) -> TrConfig {
    TrConfig {
        norm,
        aggregation,
        mode,
        window,
    }
}

fn scalar_linear(a: f64, d: usize) -> SequenceModel {
    SequenceModel::linear_recurrence(
        Matrix::from_vec(1, 1, vec![a]).unwrap(),
        Matrix::from_vec(1, d, vec![1.0; d]).unwrap(),
        Matrix::from_vec(d, 1, vec![1.0; d]).unwrap(),
    )
    .unwrap()
}

fn copyk_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(101);
    let mut worst = 0.0f64;
    for k in [1, 3, 5, 10] {
        let model = SequenceModel::shift_copy(k, &random_matrix(&mut rng, 3, 4)).unwrap();
        let xs: Vec<_> = (0..4).map(|_| random_seq(&mut rng, 32, 4)).collect();
        for norm in NORMS {
            for agg in AGGS {
                let report = analyze(&model, &xs, &cfg(norm, agg, JacobianMode::FinalOutput, 32)).unwrap();
                for r in &report.rollouts {
                    let got = r.rho_hat.ok_or("degenerate shift-copy rollout")?;
                    worst = worst.max((got - k as f64).abs());
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("max |rho_hat - k| = {worst:.2e} in {secs:.2}s");
    if worst < 1e-9 && secs < 5.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn recurrence_closed_form() -> Outcome {
    let mut rng = Rng::new(202);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let p = 1 + rng.below(6);
        let d = 1 + rng.below(4);
        let c = 1 + rng.below(4);
        let spec = RecurrenceSpec::random(&mut rng, p, d, c, 16).unwrap();
        let model = spec.to_model().unwrap();
        let x = random_seq(&mut rng, 16, d);
        for norm in NORMS {
            let tr = cfg(norm, Aggregation::Mean, JacobianMode::FinalOutput, 16);
            let auto = sequence_profile(&model, &x, &tr).unwrap();
            let closed = recurrence_profile(&spec, norm).unwrap();
            for (a, b) in auto.weights.iter().zip(&closed.weights) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let detail = format!("20 specs, max |dw| = {worst:.2e}");
    if worst < 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let (mut jac_worst, mut param_worst) = (0.0f64, 0.0f64);
    for seed in 0..20u64 {
        for kind in [CellKind::Gru, CellKind::Lstm, CellKind::Lem, CellKind::LinearRec] {
            let mut rng = Rng::new(seed * 7 + kind as u64);
            let d = 1 + rng.below(4);
            let p = 1 + rng.below(8);
            let c = 1 + rng.below(3);
            let encoder = if seed % 2 == 1 {
                EncoderSpec::Tanh {
                    width: 1 + rng.below(4),
                }
            } else {
                EncoderSpec::Identity
            };
            let spec = ModelSpec {
                cell: CellSpec::new(kind, d, p),
                encoder,
                output_dim: c,
            };
            let model = SequenceModel::init(&spec, Init::Glorot, &mut rng).unwrap();
            let x = random_seq(&mut rng, 12, d);
            let blocks = input_jacobians(&model, &x, JacobianMode::MultiOutput).unwrap();
            for (s, t, block) in blocks.iter() {
                let fd = fd_jacobian(&model, &x, s, t, 1e-5);
                jac_worst = jac_worst.max(max_relative_error(block.as_slice(), fd.as_slice()));
            }
            let targets: Vec<Option<Target>> = (0..12)
                .map(|s| (s % 3 != 0).then(|| Target::Class(rng.below(c))))
                .collect();
            let (_, exact) = param_gradients(&model, &x, &targets, LossKind::CrossEntropy).unwrap();
            let fd = fd_param_gradients(&model, &x, &targets, LossKind::CrossEntropy, 1e-5).unwrap();
            param_worst = param_worst.max(max_relative_error(&exact.flat(), &fd.flat()));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail =
        format!("80 models, jacobian rel err {jac_worst:.2e}, parameter rel err {param_worst:.2e} in {secs:.1}s");
    if jac_worst < 1e-4 && param_worst < 1e-4 && secs < 60.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn axioms() -> Outcome {
    let mut worst = 0.0f64;
    for norm in NORMS {
        let report = axiom_suite(&mut Rng::new(303), 100, norm).unwrap();
        for name in AXIOM_NAMES {
            let check = report.check(name).ok_or(format!("missing check {name}"))?;
            if check.trials != 100 {
                return Err(format!("{name} ran {} trials", check.trials));
            }
            if !check.passed {
                return Err(format!("{name} failed with residual {:.2e}", check.max_residual));
            }
        }
        worst = worst.max(report.max_residual());
    }
    let detail = format!(
        "{} checks x 100 trials x 2 norms, max residual {worst:.2e}",
        AXIOM_NAMES.len()
    );
    if worst < 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn invariances() -> Outcome {
    let mut rng = Rng::new(404);
    let mut models = Vec::new();
    for kind in [CellKind::Gru, CellKind::Lstm, CellKind::Lem] {
        let spec = ModelSpec {
            cell: CellSpec::new(kind, 3, 6),
            encoder: EncoderSpec::Tanh { width: 5 },
            output_dim: 2,
        };
        models.push(SequenceModel::init(&spec, Init::Glorot, &mut rng).unwrap());
    }
    models.push(scalar_linear(0.9, 3));
    let (mut hat, mut ratio) = (0.0f64, 0.0f64);
    for model in &models {
        let x = random_seq(&mut rng, 16, 3);
        for mode in [JacobianMode::MultiOutput, JacobianMode::FinalOutput] {
            let tr = cfg(NormKind::Frobenius, Aggregation::Mean, mode, 16);
            let mut reports = Vec::new();
            for alpha in [0.1, 3.7, -2.0] {
                reports.push(check_output_scaling(model, &x, alpha, &tr).unwrap());
            }
            for beta in [0.25, 8.0] {
                reports.push(check_input_scaling(model, &x, beta, &tr).unwrap());
            }
            for r in reports {
                if !r.argmax_preserved {
                    return Err(format!("argmax moved under factor {}", r.factor));
                }
                hat = hat.max(r.rho_hat_residual);
                ratio = ratio.max(r.ratio_residual);
            }
        }
    }
    let detail = format!("max |d rho_hat| {hat:.2e}, max rho ratio residual {ratio:.2e}");
    if hat < 1e-9 && ratio < 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn memoryless() -> Outcome {
    let mut rng = Rng::new(505);
    let model = SequenceModel::memoryless(4, 8, 4, &mut rng).unwrap();
    let xs: Vec<_> = (0..16).map(|_| random_seq(&mut rng, 20, 4)).collect();
    for agg in AGGS {
        let tr = cfg(NormKind::Frobenius, agg, JacobianMode::MultiOutput, 20);
        for x in &xs {
            let profile = sequence_profile(&model, x, &tr).unwrap();
            if profile.weights.iter().any(|&w| w != 0.0) {
                return Err(format!("non-zero weight with {agg:?}"));
            }
        }
        let report = analyze(&model, &xs, &tr).unwrap();
        if !report.degenerate || report.degenerate_rollouts != xs.len() || report.rho_hat_mean.is_some() {
            return Err(format!("report not degenerate with {agg:?}"));
        }
    }
    let tr = cfg(NormKind::Frobenius, Aggregation::Mean, JacobianMode::FinalOutput, 20);
    let report = analyze(&model, &xs, &tr).unwrap();
    if report.rollouts.iter().any(|r| r.rho_hat != Some(0.0)) {
        return Err("final-output influence outside lag 0".into());
    }
    Ok("16 rollouts: every multi-output weight zero and report degenerate; final-output rho_hat = 0".into())
}

struct Trained {
    k: usize,
    seed: u64,
    model: SequenceModel,
    val: Vec<LabeledSequence>,
    val_acc: f64,
    rho_hat_multi: f64,
    rho_hat_final: f64,
}

fn train_copy_models() -> (Vec<Trained>, f64) {
    let start = Instant::now();
    let mut out = Vec::new();
    for k in [1, 3, 5] {
        for seed in 1..=3u64 {
            let task = CopyTaskSpec::new(k, 32);
            let mut rng = Rng::new(seed);
            let train_set = gen_copyk(&task, 2000, &mut rng).unwrap();
            let val = gen_copyk(&task, 200, &mut rng).unwrap();
            let spec = ModelSpec {
                cell: CellSpec::new(CellKind::Gru, 4, 32),
                encoder: EncoderSpec::Identity,
                output_dim: 4,
            };
            let init = SequenceModel::init(&spec, Init::Glorot, &mut rng).unwrap();
            let opt = OptConfig {
                steps: 6000,
                seed,
                stop_at: Some(0.99),
                ..OptConfig::default()
            };
            let (model, log) = train(&init, &train_set, Some(&val), &opt).unwrap();
            let xs: Vec<_> = val[..32].iter().map(|s| s.x.clone()).collect();
            let rho = |mode| {
                analyze(&model, &xs, &cfg(NormKind::Frobenius, Aggregation::Mean, mode, 32))
                    .unwrap()
                    .rho_hat_mean
                    .unwrap_or(f64::NAN)
            };
            out.push(Trained {
                k,
                seed,
                rho_hat_multi: rho(JacobianMode::MultiOutput),
                rho_hat_final: rho(JacobianMode::FinalOutput),
                val_acc: log.final_val.unwrap_or(0.0),
                model,
                val,
            });
        }
    }
    (out, start.elapsed().as_secs_f64())
}

fn mean_by_k(models: &[Trained], f: impl Fn(&Trained) -> f64) -> Vec<f64> {
    [1, 3, 5]
        .iter()
        .map(|&k| {
            let v: Vec<f64> = models.iter().filter(|m| m.k == k).map(&f).collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect()
}

fn trend(models: &[Trained], secs: f64) -> Outcome {
    let multi = mean_by_k(models, |m| m.rho_hat_multi);
    let fin = mean_by_k(models, |m| m.rho_hat_final);
    let min_acc = models.iter().map(|m| m.val_acc).fold(1.0, f64::min);
    let increasing = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
    let detail = format!(
        "mean rho_hat k=1,3,5: multi {:.2}/{:.2}/{:.2}, final {:.2}/{:.2}/{:.2}; min val acc {min_acc:.3}; {secs:.0}s",
        multi[0], multi[1], multi[2], fin[0], fin[1], fin[2]
    );
    if min_acc >= 0.95 && increasing(&multi) && increasing(&fin) && secs < 600.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn window_knee(models: &[Trained]) -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for m in models {
        let curve = ablation_sweep(&m.model, &m.val, &DEFAULT_WINDOWS, Metric::Accuracy).unwrap();
        let (mut low_max, mut high_min) = (0.0f64, f64::INFINITY);
        for p in &curve.points {
            if p.window <= m.k {
                low_max = low_max.max(p.normalized);
            } else {
                high_min = high_min.min(p.normalized);
            }
        }
        ok &= low_max <= CHANCE + 0.1 && high_min >= 0.9;
        lines.push(format!("k{}s{} {low_max:.2}/{high_min:.2}", m.k, m.seed));
    }
    let detail = format!("normalized max(m<=k)/min(m>k): {}", lines.join(" "));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn deployment(models: &[Trained]) -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for m in models.iter().filter(|m| m.k == 3) {
        let xs: Vec<_> = m.val[..32].iter().map(|s| s.x.clone()).collect();
        let tr = cfg(NormKind::Frobenius, Aggregation::Mean, JacobianMode::FinalOutput, 32);
        let report = analyze(&m.model, &xs, &tr).unwrap();
        let d = deployment_check(&m.model, &m.val, &report, Metric::Accuracy).unwrap();
        ok &= d.window_retention >= 0.9 && d.window_retention - d.half_retention >= 0.3;
        lines.push(format!(
            "s{} rho_hat {:.2} m={} {:.2} / m={} {:.2}",
            m.seed, d.rho_hat, d.window, d.window_retention, d.half_window, d.half_retention
        ));
    }
    let detail = format!("retention TR/half: {}", lines.join("; "));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mean_vs_max() -> Outcome {
    let mut rng = Rng::new(1010);
    for k in [1, 3, 5, 10] {
        let model = SequenceModel::shift_copy(k, &random_matrix(&mut rng, 2, 3)).unwrap();
        let xs: Vec<_> = (0..2).map(|_| random_seq(&mut rng, 32, 3)).collect();
        for agg in AGGS {
            let report = analyze(
                &model,
                &xs,
                &cfg(NormKind::Frobenius, agg, JacobianMode::FinalOutput, 32),
            )
            .unwrap();
            let got = report.rho_hat_mean.ok_or("degenerate shift-copy")?;
            if (got - k as f64).abs() >= 1e-9 {
                return Err(format!("shift-copy k={k} {agg:?} gave {got}"));
            }
        }
    }
    let model = scalar_linear(0.9, 2);
    let xs: Vec<_> = (0..8).map(|_| random_seq(&mut rng, 32, 2)).collect();
    let mut values = Vec::new();
    for agg in AGGS {
        let report = analyze(
            &model,
            &xs,
            &cfg(NormKind::Frobenius, agg, JacobianMode::MultiOutput, 32),
        )
        .map_err(|e| e.to_string())?;
        let v = report.rho_hat_mean.ok_or("degenerate linear report")?;
        if !v.is_finite() {
            return Err(format!("{agg:?} rho_hat not finite"));
        }
        values.push(v);
    }
    Ok(format!(
        "shift-copy mean = max = k; linear a=0.9: mean {:.3}, max {:.3}",
        values[0], values[1]
    ))
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        files.insert(
            path.file_name().unwrap().to_string_lossy().into_owned(),
            fs::read(&path).unwrap(),
        );
    }
    files
}

fn determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_trange");
    let root = tempfile::tempdir().unwrap();
    let p = |name: &str| root.path().join(name).display().to_string();
    let runs: Vec<(&str, Vec<String>)> = vec![
        (
            "build",
            vec![
                "build".into(),
                "--kind".into(),
                "shift-copy".into(),
                "--k".into(),
                "3".into(),
            ],
        ),
        (
            "mless",
            vec![
                "build".into(),
                "--kind".into(),
                "memoryless".into(),
                "--seed".into(),
                "4".into(),
            ],
        ),
        (
            "data",
            vec![
                "gen-data".into(),
                "--task".into(),
                "cartpole".into(),
                "--variant".into(),
                "noisy".into(),
                "--n".into(),
                "8".into(),
                "--seed".into(),
                "2".into(),
            ],
        ),
        (
            "train",
            "train --task copy --k 1 --len 12 --hidden 8 --n-train 64 --n-val 16 --steps 20 --seed 5"
                .split(' ')
                .map(String::from)
                .collect(),
        ),
        (
            "analyze",
            vec![
                "analyze".into(),
                "--model".into(),
                p("train/model.ckpt"),
                "--data".into(),
                p("train/val_data.json"),
                "--agg".into(),
                "max".into(),
            ],
        ),
        (
            "oracle",
            vec![
                "oracle".into(),
                "--specs".into(),
                "5".into(),
                "--seed".into(),
                "3".into(),
            ],
        ),
        (
            "axioms",
            vec![
                "axioms".into(),
                "--trials".into(),
                "20".into(),
                "--seed".into(),
                "7".into(),
            ],
        ),
        (
            "final",
            vec![
                "analyze".into(),
                "--model".into(),
                p("build/model.ckpt"),
                "--task".into(),
                "copy".into(),
                "--k".into(),
                "3".into(),
                "--mode".into(),
                "final".into(),
            ],
        ),
        (
            "ablate",
            vec![
                "ablate".into(),
                "--model".into(),
                p("build/model.ckpt"),
                "--task".into(),
                "copy".into(),
                "--k".into(),
                "3".into(),
                "--n".into(),
                "40".into(),
                "--report".into(),
                p("final/report.json"),
                "--deploy".into(),
            ],
        ),
    ];
    let run = |name: &str, args: &[String]| {
        let status = Command::new(bin)
            .args(args)
            .arg("--out-dir")
            .arg(p(name))
            .env("SOURCE_DATE_EPOCH", "1700000000")
            .output()
            .unwrap();
        if !status.status.success() {
            return Err(format!("{name} failed: {}", String::from_utf8_lossy(&status.stderr)));
        }
        Ok(snapshot(&root.path().join(name)))
    };
    let mut first = Vec::new();
    for (name, args) in &runs {
        first.push(run(name, args)?);
    }
    let mut compared = 0;
    for ((name, args), before) in runs.iter().zip(&first) {
        let after = run(name, args)?;
        if &after != before {
            let diff: Vec<_> = before.keys().filter(|k| before.get(*k) != after.get(*k)).collect();
            return Err(format!("{name} changed on rerun: {diff:?}"));
        }
        compared += after.len();
    }
    Ok(format!(
        "{} commands rerun, {compared} artifacts byte-identical",
        runs.len()
    ))
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 copy-k exactness", copyk_exactness()),
        ("2 linear recurrence closed form", recurrence_closed_form()),
        ("3 gradient correctness", gradient_correctness()),
        ("4 axiom suite", axioms()),
        ("5 invariances", invariances()),
        ("6 degenerate memoryless", memoryless()),
    ];
    let (models, secs) = train_copy_models();
    results.push(("7 trend reproduction", trend(&models, secs)));
    results.push(("8 window-ablation knee", window_knee(&models)));
    results.push(("9 deployment check", deployment(&models)));
    results.push(("10 mean vs max", mean_vs_max()));
    results.push(("11 determinism", determinism()));

    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(d) => println!("PASS criterion {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {name}: {d}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

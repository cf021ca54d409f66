//! Truncated-window evaluation.
//!
//! Under window `m`, the output at step `s` comes from running the cell from
//! the zero state over the last `m` observations only. Sweeping `m` shows how
//! much history a trained model actually needs.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::{NormalizedRange, TemporalRangeReport};
use crate::model::{ObservationSequence, OutputSequence, SequenceModel};
use crate::tasks::LabeledSequence;
use crate::trainer::{evaluate_with, score_outputs, Metric};

pub const DEFAULT_WINDOWS: [usize; 6] = [1, 2, 4, 8, 16, 32];
pub const DEFAULT_KNEE_THRESHOLD: f64 = 0.9;
const CEIL_SNAP: f64 = 1e-9;

pub fn windowed_forward(model: &SequenceModel, x: &ObservationSequence, m: usize) -> Result<OutputSequence> {
    if m < 1 {
        return Err(Error::Spec("window must be >= 1".into()));
    }
    if m >= x.len() {
        return model.forward(x);
    }
    model.check_input(x)?;
    let mut outputs = Vec::with_capacity(x.len());
    let mut states = Vec::with_capacity(x.len() + 1);
    states.push(model.zero_state());
    for s in 0..x.len() {
        let start = (s + 1).saturating_sub(m);
        let state = model.final_state((start..=s).map(|r| x.step(r)));
        outputs.push(model.decoder.apply(&state));
        states.push(state);
    }
    Ok(OutputSequence { outputs, states })
}

/// Masked mean of `metric` with outputs from `windowed_forward`.
pub fn evaluate_windowed(model: &SequenceModel, data: &[LabeledSequence], m: usize, metric: Metric) -> Result<f64> {
    evaluate_with(data, metric, |seq| Ok(windowed_forward(model, &seq.x, m)?.outputs))
}

/// Higher is better for every normalized value: accuracy ratios are
/// `perf / baseline`, MSE ratios `baseline / perf`.
fn normalize(metric: Metric, value: f64, baseline: f64) -> f64 {
    let (num, den) = match metric {
        Metric::Accuracy => (value, baseline),
        Metric::Mse => (baseline, value),
    };
    if den == 0.0 {
        if num == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub window: usize,
    /// Masked mean over every scored step.
    pub mean: f64,
    /// Population std of per-sequence scores.
    pub std: f64,
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCurve {
    pub metric: Metric,
    pub baseline: f64,
    pub baseline_std: f64,
    pub points: Vec<AblationPoint>,
}

impl AblationCurve {
    pub fn windows(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.window).collect()
    }

    pub fn normalized(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.normalized).collect()
    }

    pub fn point(&self, window: usize) -> Option<&AblationPoint> {
        self.points.iter().find(|p| p.window == window)
    }

    /// `window,mean,std,normalized`, windows ascending.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["window", "mean", "std", "normalized"])?;
        for p in &self.points {
            w.write_record([
                p.window.to_string(),
                format!("{:?}", p.mean),
                format!("{:?}", p.std),
                format!("{:?}", p.normalized),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Pooled mean and per-sequence std.
fn scores<F>(data: &[LabeledSequence], metric: Metric, run: F) -> Result<(f64, f64)>
where
    F: Fn(&LabeledSequence) -> Result<Vec<Vec<f64>>> + Sync,
{
    use rayon::prelude::*;
    let mean = evaluate_with(data, metric, &run)?;
    let per_seq: Vec<f64> = data
        .par_iter()
        .map(|seq| {
            let (sum, count) = score_outputs(&run(seq)?, &seq.targets, metric)?;
            Ok((count > 0).then(|| sum / count as f64))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let n = per_seq.len() as f64;
    let m = per_seq.iter().sum::<f64>() / n;
    let std = (per_seq.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
    Ok((mean, std))
}

pub fn ablation_sweep(
    model: &SequenceModel,
    data: &[LabeledSequence],
    windows: &[usize],
    metric: Metric,
) -> Result<AblationCurve> {
    if windows.is_empty() {
        return Err(Error::Spec("ablation needs at least one window".into()));
    }
    let mut sorted = windows.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != windows.len() {
        return Err(Error::Spec("windows must be distinct".into()));
    }
    if sorted[0] < 1 {
        return Err(Error::Spec("windows must be >= 1".into()));
    }
    let (baseline, baseline_std) = scores(data, metric, |seq| Ok(model.forward(&seq.x)?.outputs))?;
    let points = sorted
        .iter()
        .map(|&m| {
            let (mean, std) = scores(data, metric, |seq| Ok(windowed_forward(model, &seq.x, m)?.outputs))?;
            Ok(AblationPoint {
                window: m,
                mean,
                std,
                normalized: normalize(metric, mean, baseline),
            })
        })
        .collect::<Result<_>>()?;
    Ok(AblationCurve {
        metric,
        baseline,
        baseline_std,
        points,
    })
}

/// Smallest tested window whose normalized performance reaches `threshold`.
pub fn knee(curve: &AblationCurve, threshold: f64) -> Result<Option<usize>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Spec(format!(
            "knee threshold must lie in (0, 1], got {threshold}"
        )));
    }
    Ok(curve
        .points
        .iter()
        .find(|p| p.normalized >= threshold)
        .map(|p| p.window))
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties; `None` when either
/// side is constant or fewer than two points are given.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Window `ceil(rho_hat + 1)` and half window `ceil((rho_hat + 1) / 2)`.
pub fn deployment_windows(rho_hat: f64) -> Result<(usize, usize)> {
    if !(rho_hat > 0.0 && rho_hat.is_finite()) {
        return Err(Error::Spec(format!(
            "deployment windows need a positive finite range, got {rho_hat}"
        )));
    }
    let window = (rho_hat + 1.0 - CEIL_SNAP).ceil() as usize;
    let half = ((rho_hat + 1.0) / 2.0 - CEIL_SNAP).ceil() as usize;
    Ok((window, half.max(1)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentCheck {
    pub rho_hat: f64,
    pub window: usize,
    pub half_window: usize,
    pub metric: Metric,
    pub baseline: f64,
    pub window_performance: f64,
    pub half_performance: f64,
    pub window_retention: f64,
    pub half_retention: f64,
}

pub fn deployment_check(
    model: &SequenceModel,
    data: &[LabeledSequence],
    report: &TemporalRangeReport,
    metric: Metric,
) -> Result<DeploymentCheck> {
    let rho_hat = match report.rho_hat() {
        NormalizedRange::Value(v) => v,
        NormalizedRange::Degenerate => {
            return Err(Error::Spec("deployment check needs a non-degenerate report".into()))
        }
    };
    let (window, half_window) = deployment_windows(rho_hat)?;
    let baseline = crate::trainer::evaluate(model, data, metric)?;
    let window_performance = evaluate_windowed(model, data, window, metric)?;
    let half_performance = evaluate_windowed(model, data, half_window, metric)?;
    Ok(DeploymentCheck {
        rho_hat,
        window,
        half_window,
        metric,
        baseline,
        window_performance,
        half_performance,
        window_retention: normalize(metric, window_performance, baseline),
        half_retention: normalize(metric, half_performance, baseline),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::JacobianMode;
    use crate::linalg::Matrix;
    use crate::metric::{analyze, TrConfig};
    use crate::model::{CellKind, CellSpec, EncoderSpec, Init, ModelSpec};
    use crate::rng::Rng;
    use crate::tasks::{gen_copyk, CopyTaskSpec};

    fn gru(seed: u64) -> SequenceModel {
        let spec = ModelSpec {
            cell: CellSpec::new(CellKind::Gru, 3, 6),
            encoder: EncoderSpec::Tanh { width: 4 },
            output_dim: 2,
        };
        SequenceModel::init(&spec, Init::Glorot, &mut Rng::new(seed)).unwrap()
    }

    fn random_seq(rng: &mut Rng, t: usize, d: usize) -> ObservationSequence {
        let data = (0..t * d).map(|_| rng.gaussian()).collect();
        ObservationSequence::new(Matrix::from_vec(t, d, data).unwrap()).unwrap()
    }

    #[test]
    fn full_window_is_forward() {
        let m = gru(1);
        let x = random_seq(&mut Rng::new(2), 10, 3);
        let full = m.forward(&x).unwrap();
        assert_eq!(windowed_forward(&m, &x, 10).unwrap(), full);
        assert_eq!(windowed_forward(&m, &x, 50).unwrap(), full);
        assert!(matches!(windowed_forward(&m, &x, 0), Err(Error::Spec(_))));
    }

    #[test]
    fn window_ignores_older_observations() {
        let m = gru(3);
        let mut rng = Rng::new(4);
        let x = random_seq(&mut rng, 12, 3);
        let win = 4;
        let base = windowed_forward(&m, &x, win).unwrap();
        let s = 9;
        let mut y = x.clone();
        for t in 0..=s - win {
            for j in 0..3 {
                y = y.with_entry(t, j, rng.gaussian());
            }
        }
        assert_eq!(windowed_forward(&m, &y, win).unwrap().outputs[s], base.outputs[s]);
    }

    #[test]
    fn memoryless_window_one_matches_forward() {
        let mut rng = Rng::new(5);
        let m = SequenceModel::memoryless(3, 4, 2, &mut rng).unwrap();
        let x = random_seq(&mut rng, 8, 3);
        assert_eq!(
            windowed_forward(&m, &x, 1).unwrap().outputs,
            m.forward(&x).unwrap().outputs
        );
    }

    #[test]
    fn shift_copy_under_truncation() {
        let k = 3;
        let m = SequenceModel::shift_copy(k, &Matrix::identity(4)).unwrap();
        let data = gen_copyk(&CopyTaskSpec::new(k, 16), 1, &mut Rng::new(6)).unwrap();
        let out = windowed_forward(&m, &data[0].x, k).unwrap();
        for s in k..16 {
            assert!(out.outputs[s].iter().all(|v| *v == 0.0));
        }
        let out = windowed_forward(&m, &data[0].x, k + 1).unwrap();
        assert_eq!(out.outputs, m.forward(&data[0].x).unwrap().outputs);
    }

    #[test]
    fn shift_copy_knee_is_k_plus_one() {
        for k in [1, 3, 5] {
            let m = SequenceModel::shift_copy(k, &Matrix::identity(4)).unwrap();
            let data = gen_copyk(&CopyTaskSpec::new(k, 16), 50, &mut Rng::new(7)).unwrap();
            let windows: Vec<usize> = (1..=16).collect();
            let curve = ablation_sweep(&m, &data, &windows, Metric::Accuracy).unwrap();
            assert_eq!(curve.baseline, 1.0);
            assert_eq!(knee(&curve, 0.99).unwrap(), Some(k + 1));
            let ws: Vec<f64> = curve.windows().iter().map(|&w| w as f64).collect();
            assert!(spearman(&ws, &curve.normalized()).unwrap() >= 0.0);
        }
    }

    #[test]
    fn memoryless_curve_is_flat() {
        let mut rng = Rng::new(8);
        let m = SequenceModel::memoryless(4, 5, 4, &mut rng).unwrap();
        let data = gen_copyk(&CopyTaskSpec::new(1, 8), 20, &mut rng).unwrap();
        let curve = ablation_sweep(&m, &data, &[1, 2, 4, 8], Metric::Accuracy).unwrap();
        assert!(curve.points.iter().all(|p| p.mean == curve.baseline));
        let ws = [1.0, 2.0, 4.0, 8.0];
        assert_eq!(spearman(&ws, &curve.normalized()), None);
    }

    #[test]
    fn knee_definition() {
        let curve = AblationCurve {
            metric: Metric::Accuracy,
            baseline: 1.0,
            baseline_std: 0.0,
            points: [(1, 0.2), (2, 0.3), (4, 0.95), (8, 1.0)]
                .iter()
                .map(|&(w, v)| AblationPoint {
                    window: w,
                    mean: v,
                    std: 0.0,
                    normalized: v,
                })
                .collect(),
        };
        assert_eq!(knee(&curve, 0.9).unwrap(), Some(4));
        assert_eq!(knee(&curve, 1.0).unwrap(), Some(8));
        let low = AblationCurve {
            points: curve.points[..2].to_vec(),
            ..curve.clone()
        };
        assert_eq!(knee(&low, 0.9).unwrap(), None);
        assert!(knee(&curve, 0.0).is_err());
        assert!(knee(&curve, 1.5).is_err());
    }

    #[test]
    fn sweep_rejects_bad_windows() {
        let m = gru(0);
        let data = vec![LabeledSequence::new(
            random_seq(&mut Rng::new(0), 4, 3),
            vec![None, Some(crate::grad::Target::Class(1)), None, None],
        )
        .unwrap()];
        assert!(ablation_sweep(&m, &data, &[], Metric::Accuracy).is_err());
        assert!(ablation_sweep(&m, &data, &[2, 2], Metric::Accuracy).is_err());
        assert!(ablation_sweep(&m, &data, &[0, 1], Metric::Accuracy).is_err());
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 2.0, 2.0]).unwrap();
        assert!((r - 0.8944271909999159).abs() < 1e-12);
        assert_eq!(spearman(&[1.0], &[1.0]), None);
    }

    #[test]
    fn deployment_window_arithmetic() {
        assert_eq!(deployment_windows(3.0).unwrap(), (4, 2));
        assert_eq!(deployment_windows(3.0 + 1e-12).unwrap(), (4, 2));
        assert_eq!(deployment_windows(4.7).unwrap(), (6, 3));
        assert_eq!(deployment_windows(0.5).unwrap(), (2, 1));
        assert!(deployment_windows(0.0).is_err());
        for r in [0.1, 1.0, 2.5, 7.9, 31.0] {
            let (w, h) = deployment_windows(r).unwrap();
            assert!(h < w);
        }
    }

    #[test]
    fn deployment_on_shift_copy() {
        let k = 3;
        let m = SequenceModel::shift_copy(k, &Matrix::identity(4)).unwrap();
        let data = gen_copyk(&CopyTaskSpec::new(k, 32), 100, &mut Rng::new(9)).unwrap();
        let xs: Vec<_> = data[..10].iter().map(|s| s.x.clone()).collect();
        let cfg = TrConfig {
            mode: JacobianMode::FinalOutput,
            ..TrConfig::default()
        };
        let report = analyze(&m, &xs, &cfg).unwrap();
        let check = deployment_check(&m, &data, &report, Metric::Accuracy).unwrap();
        assert_eq!((check.window, check.half_window), (4, 2));
        assert_eq!(check.window_retention, 1.0);
        assert!((check.half_retention - 0.25).abs() < 0.05, "{check:?}");
    }

    #[test]
    fn deployment_rejects_degenerate() {
        let mut rng = Rng::new(10);
        let m = SequenceModel::memoryless(4, 3, 4, &mut rng).unwrap();
        let data = gen_copyk(&CopyTaskSpec::new(1, 8), 4, &mut rng).unwrap();
        let xs: Vec<_> = data.iter().map(|s| s.x.clone()).collect();
        let report = analyze(
            &m,
            &xs,
            &TrConfig {
                window: 8,
                ..TrConfig::default()
            },
        )
        .unwrap();
        assert!(matches!(
            deployment_check(&m, &data, &report, Metric::Accuracy),
            Err(Error::Spec(_))
        ));
    }

    #[test]
    fn curve_csv() {
        let m = SequenceModel::shift_copy(1, &Matrix::identity(4)).unwrap();
        let data = gen_copyk(&CopyTaskSpec::new(1, 6), 5, &mut Rng::new(11)).unwrap();
        let curve = ablation_sweep(&m, &data, &[2, 1], Metric::Accuracy).unwrap();
        assert_eq!(curve.windows(), vec![1, 2]);
        let mut buf = Vec::new();
        curve.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("window,mean,std,normalized\n1,"));
        assert!(text.contains("\n2,1.0,0.0,1.0\n"));
    }
}

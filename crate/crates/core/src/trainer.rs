//! Supervised training with Adam and global-norm gradient clipping.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{max_relative_error, param_gradients, sequence_loss, LossKind, ParamGradient, Target};
use crate::linalg::Matrix;
use crate::model::SequenceModel;
use crate::rng::Rng;
use crate::tasks::LabeledSequence;

pub const DIVERGENCE_FACTOR: f64 = 10.0;
pub const DIVERGENCE_PATIENCE: usize = 100;
pub const FD_CHECK_TOLERANCE: f64 = 1e-4;
const FD_CHECK_COORDS: usize = 48;
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Validation is scored every `eval_every` steps when a target is set.
    pub eval_every: usize,
    /// Stop once the validation metric reaches this value.
    pub stop_at: Option<f64>,
    pub fd_check: bool,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 0.5,
            batch_size: 32,
            steps: 1000,
            seed: 0,
            loss: LossKind::CrossEntropy,
            eval_every: 50,
            stop_at: None,
            fd_check: true,
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return bad(format!("clip must be > 0, got {}", self.clip));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1), got {} {}", self.beta1, self.beta2));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad(format!("eps must be > 0, got {}", self.eps));
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    Mse,
}

impl Metric {
    pub fn for_loss(loss: LossKind) -> Self {
        match loss {
            LossKind::CrossEntropy => Metric::Accuracy,
            LossKind::Mse => Metric::Mse,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Mse => "mse",
        }
    }

    /// Accuracy is better when higher, MSE when lower.
    pub fn reached(self, value: f64, target: f64) -> bool {
        match self {
            Metric::Accuracy => value >= target,
            Metric::Mse => value <= target,
        }
    }
}

/// Index of the largest entry, first on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Sum of per-step scores and the number of scored steps.
pub fn score_outputs(outputs: &[Vec<f64>], targets: &[Option<Target>], metric: Metric) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut count = 0;
    for (y, t) in outputs.iter().zip(targets) {
        match (metric, t) {
            (_, None) => continue,
            (Metric::Accuracy, Some(Target::Class(c))) => {
                sum += f64::from(u8::from(argmax(y) == *c));
            }
            (Metric::Mse, Some(Target::Vector(v))) => {
                if v.len() != y.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "target has {} entries, output has {}",
                        v.len(),
                        y.len()
                    )));
                }
                sum += y.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / v.len() as f64;
            }
            (Metric::Accuracy, Some(Target::Vector(_))) => {
                return Err(Error::Spec("accuracy needs class targets".into()))
            }
            (Metric::Mse, Some(Target::Class(_))) => return Err(Error::Spec("mse needs vector targets".into())),
        }
        count += 1;
    }
    Ok((sum, count))
}

/// Masked mean of `metric` over every scored step, with outputs from `run`.
pub fn evaluate_with<F>(data: &[LabeledSequence], metric: Metric, run: F) -> Result<f64>
where
    F: Fn(&LabeledSequence) -> Result<Vec<Vec<f64>>> + Sync,
{
    if data.is_empty() {
        return Err(Error::Spec("evaluation needs at least one sequence".into()));
    }
    let parts: Vec<(f64, usize)> = data
        .par_iter()
        .map(|seq| score_outputs(&run(seq)?, &seq.targets, metric))
        .collect::<Result<_>>()?;
    let (sum, count) = parts.iter().fold((0.0, 0usize), |(s, c), (a, b)| (s + a, c + b));
    if count == 0 {
        return Err(Error::Spec("no scored steps: every target is masked".into()));
    }
    Ok(sum / count as f64)
}

pub fn evaluate(model: &SequenceModel, data: &[LabeledSequence], metric: Metric) -> Result<f64> {
    evaluate_with(data, metric, |seq| Ok(model.forward(&seq.x)?.outputs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl AdamState {
    pub fn new(model: &SequenceModel) -> Self {
        let zeros: Vec<Matrix> = model
            .named_params()
            .into_iter()
            .map(|(_, p)| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// Rescales `grad` so its global norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_global_norm(grad: &mut ParamGradient, max_norm: f64) -> f64 {
    let norm = grad.global_norm();
    if norm > max_norm {
        grad.scale(max_norm / norm);
    }
    norm
}

/// Clips `grad` to `cfg.clip` and applies one bias-corrected Adam update.
/// A non-finite gradient is rejected before any parameter changes.
pub fn adam_step(
    model: &mut SequenceModel,
    grad: &ParamGradient,
    state: &mut AdamState,
    cfg: &OptConfig,
) -> Result<f64> {
    if !grad.is_finite() {
        return Err(Error::Numerical {
            step: state.t as usize,
            what: "gradient".into(),
        });
    }
    if grad.tensors.len() != state.m.len() || grad.tensors.iter().zip(&state.m).any(|(g, m)| g.shape() != m.shape()) {
        return Err(Error::ShapeMismatch("gradient does not match parameters".into()));
    }
    let mut g = grad.clone();
    let norm = clip_global_norm(&mut g, cfg.clip);
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in model
        .params_mut()
        .into_iter()
        .zip(&g.tensors)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        let p = p.as_mut_slice();
        let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
        for (i, gi) in g.as_slice().iter().enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    pub metric: Metric,
    pub final_train: f64,
    pub final_val: Option<f64>,
    /// Relative error of the backprop gradient against finite differences on
    /// sampled coordinates of the first minibatch.
    pub fd_check_error: Option<f64>,
    pub stopped_early: bool,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl TrainLog {
    /// `step,loss,grad_norm` per optimizer step.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "loss", "grad_norm"])?;
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                format!("{:?}", r.loss),
                format!("{:?}", r.grad_norm),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

struct Batch {
    loss: f64,
    steps: usize,
    grad: ParamGradient,
}

fn batch_gradient(model: &SequenceModel, batch: &[&LabeledSequence], loss: LossKind) -> Result<Batch> {
    let parts: Vec<(f64, ParamGradient)> = batch
        .par_iter()
        .map(|seq| param_gradients(model, &seq.x, &seq.targets, loss))
        .collect::<Result<_>>()?;
    let steps: usize = batch.iter().map(|s| s.targets.iter().flatten().count()).sum();
    let mut grad = ParamGradient::zeros_for(model);
    let mut total = 0.0;
    for (l, g) in &parts {
        total += l;
        grad.accumulate(g)?;
    }
    grad.scale(1.0 / steps as f64);
    Ok(Batch {
        loss: total / steps as f64,
        steps,
        grad,
    })
}

fn batch_loss(model: &SequenceModel, batch: &[&LabeledSequence], loss: LossKind) -> Result<f64> {
    batch.iter().map(|s| sequence_loss(model, &s.x, &s.targets, loss)).sum()
}

/// Compares the batch gradient with central differences on sampled coordinates.
fn fd_spot_check(
    model: &SequenceModel,
    batch: &[&LabeledSequence],
    exact: &Batch,
    loss: LossKind,
    rng: &mut Rng,
) -> Result<f64> {
    let sizes: Vec<usize> = exact.grad.tensors.iter().map(Matrix::len).collect();
    let total: usize = sizes.iter().sum();
    let mut picks = Vec::new();
    for _ in 0..FD_CHECK_COORDS.min(total) {
        let mut flat = rng.below(total);
        let mut k = 0;
        while flat >= sizes[k] {
            flat -= sizes[k];
            k += 1;
        }
        picks.push((k, flat));
    }
    let scale = exact.steps as f64;
    let approx: Vec<f64> = picks
        .par_iter()
        .map(|&(k, i)| {
            let mut probe = model.clone();
            let v = probe.params_mut()[k].as_slice()[i];
            let h = FD_STEP * v.abs().max(1.0);
            probe.params_mut()[k].as_mut_slice()[i] = v + h;
            let lp = batch_loss(&probe, batch, loss)?;
            probe.params_mut()[k].as_mut_slice()[i] = v - h;
            let lm = batch_loss(&probe, batch, loss)?;
            Ok((lp - lm) / (2.0 * h) / scale)
        })
        .collect::<Result<_>>()?;
    let exact: Vec<f64> = picks
        .iter()
        .map(|&(k, i)| exact.grad.tensors[k].as_slice()[i])
        .collect();
    Ok(max_relative_error(&exact, &approx))
}

/// Trains a copy of `model` on `data`. Minibatch order comes from
/// `cfg.seed`, so a fixed configuration reproduces the same parameters.
pub fn train(
    model: &SequenceModel,
    data: &[LabeledSequence],
    val: Option<&[LabeledSequence]>,
    cfg: &OptConfig,
) -> Result<(SequenceModel, TrainLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Spec("training needs at least one sequence".into()));
    }
    let start = Instant::now();
    let metric = Metric::for_loss(cfg.loss);
    let mut model = model.clone();
    let mut state = AdamState::new(&model);
    let mut rng = Rng::new(cfg.seed);
    let mut fd_rng = rng.split();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut records = Vec::with_capacity(cfg.steps);
    let mut initial: Option<f64> = None;
    let mut above = 0usize;
    let mut fd_check_error = None;
    let mut stopped_early = false;

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(data.len()) {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let b = batch_gradient(&model, &batch, cfg.loss)?;
        if !b.loss.is_finite() {
            return Err(Error::Numerical {
                step,
                what: "loss".into(),
            });
        }
        if step == 0 && cfg.fd_check {
            let err = fd_spot_check(&model, &batch, &b, cfg.loss, &mut fd_rng)?;
            if err >= FD_CHECK_TOLERANCE {
                return Err(Error::Numerical {
                    step,
                    what: format!("gradient check failed: relative error {err:e}"),
                });
            }
            fd_check_error = Some(err);
        }
        let init = *initial.get_or_insert(b.loss);
        if b.loss > DIVERGENCE_FACTOR * init {
            above += 1;
            if above >= DIVERGENCE_PATIENCE {
                return Err(Error::Divergence {
                    step,
                    loss: b.loss,
                    initial: init,
                });
            }
        } else {
            above = 0;
        }
        let grad_norm = adam_step(&mut model, &b.grad, &mut state, cfg)?;
        records.push(StepRecord {
            step,
            loss: b.loss,
            grad_norm,
        });
        if let (Some(target), Some(val)) = (cfg.stop_at, val) {
            if (step + 1) % cfg.eval_every == 0 && metric.reached(evaluate(&model, val, metric)?, target) {
                stopped_early = true;
                break;
            }
        }
    }

    let final_train = evaluate(&model, data, metric)?;
    let final_val = val.map(|v| evaluate(&model, v, metric)).transpose()?;
    Ok((
        model,
        TrainLog {
            records,
            metric,
            final_train,
            final_val,
            fd_check_error,
            stopped_early,
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CellKind, CellSpec, EncoderSpec, Init, ModelSpec};
    use crate::tasks::{gen_copyk, CopyTaskSpec};

    fn scalar_model(a: f64) -> SequenceModel {
        SequenceModel::linear_recurrence(Matrix::diag(&[0.0]), Matrix::diag(&[1.0]), Matrix::diag(&[a])).unwrap()
    }

    fn gru(hidden: usize, input: usize, out: usize, seed: u64) -> SequenceModel {
        let spec = ModelSpec {
            cell: CellSpec::new(CellKind::Gru, input, hidden),
            encoder: EncoderSpec::Identity,
            output_dim: out,
        };
        SequenceModel::init(&spec, Init::Glorot, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut m = gru(4, 2, 2, 0);
        let before = m.clone();
        let mut st = AdamState::new(&m);
        let g = ParamGradient::zeros_for(&m);
        adam_step(&mut m, &g, &mut st, &OptConfig::default()).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut m = gru(2, 1, 1, 0);
        let before = m.clone();
        let mut g = ParamGradient::zeros_for(&m);
        g.tensors[0].set(0, 0, f64::NAN);
        let mut st = AdamState::new(&m);
        assert!(matches!(
            adam_step(&mut m, &g, &mut st, &OptConfig::default()),
            Err(Error::Numerical { .. })
        ));
        assert_eq!(m, before);
        assert_eq!(st.steps(), 0);
    }

    #[test]
    fn clipping_to_half() {
        let m = gru(3, 2, 2, 1);
        let mut g = ParamGradient::zeros_for(&m);
        g.tensors[0].set(0, 0, 3.0);
        g.tensors[1].set(0, 0, 4.0);
        let before = clip_global_norm(&mut g, 0.5);
        assert_eq!(before, 5.0);
        assert!(g.global_norm() <= 0.5 + 1e-12);
        let mut small = ParamGradient::zeros_for(&m);
        small.tensors[0].set(0, 0, 0.1);
        clip_global_norm(&mut small, 0.5);
        assert_eq!(small.tensors[0].get(0, 0), 0.1);
    }

    #[test]
    fn quadratic_loss_decreases() {
        // loss(a) = ½ a²: gradient a
        let mut m = scalar_model(2.0);
        let cfg = OptConfig {
            lr: 0.01,
            ..OptConfig::default()
        };
        let mut st = AdamState::new(&m);
        let mut prev = f64::INFINITY;
        for step in 0..100 {
            let a = m.decoder.weight.get(0, 0);
            let mut g = ParamGradient::zeros_for(&m);
            let idx = m
                .named_params()
                .iter()
                .position(|(n, _)| n == "decoder.weight")
                .unwrap();
            g.tensors[idx].set(0, 0, a);
            adam_step(&mut m, &g, &mut st, &cfg).unwrap();
            let loss = 0.5 * m.decoder.weight.get(0, 0).powi(2);
            if step >= 5 {
                assert!(loss < prev, "step {step}: {loss} >= {prev}");
            }
            prev = loss;
        }
    }

    #[test]
    fn evaluate_accuracy_and_mse() {
        let x = crate::model::ObservationSequence::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = SequenceModel::memoryless(2, 2, 2, &mut Rng::new(0)).unwrap();
        let out = m.forward(&x).unwrap().outputs;
        let perfect = LabeledSequence::new(
            x.clone(),
            vec![
                Some(Target::Class(argmax(&out[0]))),
                Some(Target::Class(argmax(&out[1]))),
            ],
        )
        .unwrap();
        assert_eq!(evaluate(&m, &[perfect], Metric::Accuracy).unwrap(), 1.0);
        let exact = LabeledSequence::new(x.clone(), vec![None, Some(Target::Vector(out[1].clone()))]).unwrap();
        assert_eq!(evaluate(&m, &[exact], Metric::Mse).unwrap(), 0.0);
        let masked = LabeledSequence::new(x, vec![None, None]).unwrap();
        assert!(matches!(evaluate(&m, &[masked], Metric::Accuracy), Err(Error::Spec(_))));
        assert!(evaluate(&m, &[], Metric::Accuracy).is_err());
    }

    #[test]
    fn memoryless_predictor_near_chance() {
        let data = gen_copyk(&CopyTaskSpec::new(1, 50), 200, &mut Rng::new(4)).unwrap();
        let m = SequenceModel::memoryless(4, 8, 4, &mut Rng::new(5)).unwrap();
        let acc = evaluate(&m, &data, Metric::Accuracy).unwrap();
        let n: f64 = 200.0 * 49.0;
        let bound = 3.0 * (0.25 * 0.75 / n).sqrt();
        assert!((acc - 0.25).abs() < bound, "{acc}");
    }

    #[test]
    fn memorizes_single_sequence() {
        let data = gen_copyk(&CopyTaskSpec::new(1, 8), 1, &mut Rng::new(1)).unwrap();
        let cfg = OptConfig {
            lr: 1e-2,
            steps: 300,
            batch_size: 1,
            ..OptConfig::default()
        };
        let (_, log) = train(&gru(8, 4, 4, 2), &data, None, &cfg).unwrap();
        assert_eq!(log.final_train, 1.0);
        assert!(log.fd_check_error.unwrap() < FD_CHECK_TOLERANCE);
        assert!(log
            .records
            .iter()
            .all(|r| r.loss.is_finite() && r.grad_norm.is_finite()));
    }

    #[test]
    fn training_is_deterministic() {
        let data = gen_copyk(&CopyTaskSpec::new(1, 6), 12, &mut Rng::new(2)).unwrap();
        let cfg = OptConfig {
            lr: 1e-2,
            steps: 20,
            batch_size: 4,
            seed: 9,
            ..OptConfig::default()
        };
        let (a, la) = train(&gru(4, 4, 4, 3), &data, None, &cfg).unwrap();
        let (b, lb) = train(&gru(4, 4, 4, 3), &data, None, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la.records, lb.records);
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        la.write_csv(&mut ca).unwrap();
        lb.write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn divergence_detected() {
        let data = gen_copyk(&CopyTaskSpec::new(1, 6), 8, &mut Rng::new(3)).unwrap();
        let cfg = OptConfig {
            lr: 50.0,
            clip: 1e6,
            steps: 400,
            batch_size: 8,
            fd_check: false,
            ..OptConfig::default()
        };
        match train(&gru(8, 4, 4, 4), &data, None, &cfg) {
            Err(Error::Divergence { .. }) | Err(Error::Numerical { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|(_, l)| l.final_train)),
        }
    }

    #[test]
    fn invalid_configs() {
        let m = gru(2, 4, 4, 0);
        let data = gen_copyk(&CopyTaskSpec::new(1, 4), 1, &mut Rng::new(0)).unwrap();
        for cfg in [
            OptConfig {
                lr: 0.0,
                ..OptConfig::default()
            },
            OptConfig {
                clip: -1.0,
                ..OptConfig::default()
            },
            OptConfig {
                batch_size: 0,
                ..OptConfig::default()
            },
        ] {
            assert!(matches!(train(&m, &data, None, &cfg), Err(Error::Config(_))));
        }
        assert!(train(&m, &[], None, &OptConfig::default()).is_err());
    }
}

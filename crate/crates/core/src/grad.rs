//! First-order derivatives of sequence models.
//!
//! * [`input_jacobians`] builds the blocks `J_{s,t} = ∂y_s/∂x_t` by pushing a
//!   sensitivity matrix `∂h_s/∂x_t` forward from each origin `t` through the
//!   per-step state Jacobians.
//! * [`reverse_jacobians`] gets the same blocks for one output step by
//!   back-propagating each output coordinate; it exists as an independent
//!   route for cross-checks.
//! * [`param_gradients`] is full backpropagation through time for training.
//! * [`fd_jacobian`] and [`fd_param_gradients`] are central-difference oracles.
//!
//! Step indices are 0-based: `s, t ∈ 0..T`, lag `T - 1 - t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{ObservationSequence, SequenceModel};

/// Which Jacobian blocks are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum JacobianMode {
    /// Every `J_{s,t}` with `t < s`; lags `1..T-1`.
    #[default]
    #[serde(rename = "multi")]
    MultiOutput,
    /// `J_{T,t}` for every `t` including `t = T` (lag 0).
    #[serde(rename = "final")]
    FinalOutput,
}

impl JacobianMode {
    pub fn as_str(self) -> &'static str {
        match self {
            JacobianMode::MultiOutput => "multi",
            JacobianMode::FinalOutput => "final",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianBlocks {
    len: usize,
    out_dim: usize,
    in_dim: usize,
    mode: JacobianMode,
    blocks: Vec<Option<Matrix>>,
}

impl JacobianBlocks {
    pub fn new(len: usize, out_dim: usize, in_dim: usize, mode: JacobianMode) -> Self {
        Self {
            len,
            out_dim,
            in_dim,
            mode,
            blocks: vec![None; len * len],
        }
    }

    /// Whether `(s, t)` is a block this mode defines.
    pub fn is_key(&self, s: usize, t: usize) -> bool {
        if s >= self.len || t >= self.len {
            return false;
        }
        match self.mode {
            JacobianMode::MultiOutput => t < s,
            JacobianMode::FinalOutput => s == self.len - 1,
        }
    }

    pub fn insert(&mut self, s: usize, t: usize, block: Matrix) -> Result<()> {
        if !self.is_key(s, t) {
            return Err(Error::Config(format!(
                "block ({s}, {t}) is not defined in {} mode",
                self.mode.as_str()
            )));
        }
        if block.shape() != (self.out_dim, self.in_dim) {
            return Err(Error::ShapeMismatch(format!(
                "block is {:?}, expected {}x{}",
                block.shape(),
                self.out_dim,
                self.in_dim
            )));
        }
        if !block.is_finite() {
            return Err(Error::Numerical {
                step: s,
                what: format!("jacobian block ({s}, {t})"),
            });
        }
        self.blocks[s * self.len + t] = Some(block);
        Ok(())
    }

    pub fn block(&self, s: usize, t: usize) -> Option<&Matrix> {
        if s >= self.len || t >= self.len {
            return None;
        }
        self.blocks[s * self.len + t].as_ref()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn mode(&self) -> JacobianMode {
        self.mode
    }

    /// Stored `(s, t, block)` triples in row-major key order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &Matrix)> {
        self.blocks
            .iter()
            .enumerate()
            .filter_map(move |(i, b)| b.as_ref().map(|m| (i / self.len, i % self.len, m)))
    }
}

/// `decoder.weight * S[..p]`: map a state sensitivity to an output one.
fn read_out(model: &SequenceModel, sens: &Matrix) -> Matrix {
    let q = &model.decoder.weight;
    let p = q.cols();
    let mut out = Matrix::zeros(q.rows(), sens.cols());
    for i in 0..q.rows() {
        for k in 0..p {
            let a = q.get(i, k);
            if a == 0.0 {
                continue;
            }
            for j in 0..sens.cols() {
                out.set(i, j, out.get(i, j) + a * sens.get(k, j));
            }
        }
    }
    out
}

/// Input Jacobian blocks for one sequence.
pub fn input_jacobians(model: &SequenceModel, x: &ObservationSequence, mode: JacobianMode) -> Result<JacobianBlocks> {
    model.check_input(x)?;
    let len = x.len();
    if len < 2 {
        return Err(Error::Spec("jacobians need T >= 2".into()));
    }
    let trace = model.trace(x);
    let mut state_jac = Vec::with_capacity(len);
    let mut entry_jac = Vec::with_capacity(len);
    for s in 0..len {
        if !trace.states[s + 1].iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical {
                step: s,
                what: "hidden state".into(),
            });
        }
        let (js, ju) = model.cell.step_jacobians(&trace.caches[s]);
        let je = model.encoder.jacobian(&trace.encoded[s]);
        let g = ju.matmul(&je)?;
        if !js.is_finite() || !g.is_finite() {
            return Err(Error::Numerical {
                step: s,
                what: "cell jacobian".into(),
            });
        }
        state_jac.push(js);
        entry_jac.push(g);
    }

    let mut blocks = JacobianBlocks::new(len, model.output_dim(), x.dim(), mode);
    let last = len - 1;
    for t in 0..len {
        let mut sens = entry_jac[t].clone();
        if mode == JacobianMode::FinalOutput && t == last {
            blocks.insert(last, t, read_out(model, &sens))?;
        }
        for s in t + 1..len {
            sens = state_jac[s].matmul(&sens)?;
            match mode {
                JacobianMode::MultiOutput => blocks.insert(s, t, read_out(model, &sens))?,
                JacobianMode::FinalOutput if s == last => blocks.insert(s, t, read_out(model, &sens))?,
                JacobianMode::FinalOutput => {}
            }
        }
    }
    Ok(blocks)
}

/// `∂y_s/∂x_t` for all `t <= s`, by reverse accumulation from each
/// coordinate of `y_s`. Entry `t` of the result is the block for origin `t`.
pub fn reverse_jacobians(model: &SequenceModel, x: &ObservationSequence, s: usize) -> Result<Vec<Matrix>> {
    model.check_input(x)?;
    if s >= x.len() {
        return Err(Error::Spec(format!("step {s} out of range")));
    }
    let trace = model.trace(x);
    let c = model.output_dim();
    let d = x.dim();
    let n = model.state_dim();
    let e = model.encoder.output_dim();
    let p = model.decoder.weight.cols();
    let mut blocks = vec![Matrix::zeros(c, d); s + 1];
    for i in 0..c {
        let mut d_state = vec![0.0; n];
        d_state[..p].copy_from_slice(model.decoder.weight.row(i));
        for r in (0..=s).rev() {
            let mut d_prev = vec![0.0; n];
            let mut d_in = vec![0.0; e];
            model
                .cell
                .backward(&trace.caches[r], &d_state, &mut d_prev, &mut d_in, None);
            let mut d_x = vec![0.0; d];
            model
                .encoder
                .backward(x.step(r), &trace.encoded[r], &d_in, Some(&mut d_x), None);
            for (j, v) in d_x.iter().enumerate() {
                blocks[r].set(i, j, *v);
            }
            d_state = d_prev;
        }
    }
    Ok(blocks)
}

/// Central-difference estimate of `∂y_s/∂x_t`; the step for entry `j` is
/// `h * max(1, |x_{t,j}|)`. Returns zeros for `t > s`.
pub fn fd_jacobian(model: &SequenceModel, x: &ObservationSequence, s: usize, t: usize, h: f64) -> Matrix {
    let c = model.output_dim();
    let d = x.dim();
    let mut out = Matrix::zeros(c, d);
    if t > s {
        return out;
    }
    for j in 0..d {
        let v = x.step(t)[j];
        let step = h * v.abs().max(1.0);
        let plus = x.with_entry(t, j, v + step);
        let minus = x.with_entry(t, j, v - step);
        let yp = model.last_output((0..=s).map(|r| plus.step(r)));
        let ym = model.last_output((0..=s).map(|r| minus.step(r)));
        for i in 0..c {
            out.set(i, j, (yp[i] - ym[i]) / (2.0 * step));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// `½‖y − target‖²` per step.
    Mse,
    /// Softmax cross-entropy on logits.
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Class(usize),
    Vector(Vec<f64>),
}

/// One gradient tensor per model parameter, in `named_params` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub tensors: Vec<Matrix>,
}

impl ParamGradient {
    pub fn zeros_for(model: &SequenceModel) -> Self {
        Self {
            tensors: model
                .named_params()
                .into_iter()
                .map(|(_, m)| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }

    fn from_model(model: &SequenceModel) -> Self {
        Self {
            tensors: model.named_params().into_iter().map(|(_, m)| m.clone()).collect(),
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|m| m.as_slice())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, alpha: f64) {
        self.tensors.iter_mut().for_each(|m| m.scale_in_place(alpha));
    }

    pub fn accumulate(&mut self, other: &ParamGradient) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::ShapeMismatch("gradient tensor count differs".into()));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.axpy(1.0, b)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
    }
}

fn step_loss(y: &[f64], target: &Target, loss: LossKind) -> Result<(f64, Vec<f64>)> {
    match (loss, target) {
        (LossKind::Mse, Target::Vector(v)) => {
            if v.len() != y.len() {
                return Err(Error::ShapeMismatch(format!(
                    "target has {} entries, output has {}",
                    v.len(),
                    y.len()
                )));
            }
            let r: Vec<f64> = y.iter().zip(v).map(|(a, b)| a - b).collect();
            Ok((0.5 * r.iter().map(|v| v * v).sum::<f64>(), r))
        }
        (LossKind::CrossEntropy, Target::Class(k)) => {
            if *k >= y.len() {
                return Err(Error::ShapeMismatch(format!(
                    "class {k} out of range for {} logits",
                    y.len()
                )));
            }
            let m = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = y.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            let mut g: Vec<f64> = y.iter().map(|v| (v - lse).exp()).collect();
            g[*k] -= 1.0;
            Ok((lse - y[*k], g))
        }
        (LossKind::Mse, Target::Class(_)) => Err(Error::Spec("mse loss needs vector targets".into())),
        (LossKind::CrossEntropy, Target::Vector(_)) => {
            Err(Error::Spec("cross-entropy loss needs class targets".into()))
        }
    }
}

/// Summed loss over the steps with a target.
pub fn sequence_loss(
    model: &SequenceModel,
    x: &ObservationSequence,
    targets: &[Option<Target>],
    loss: LossKind,
) -> Result<f64> {
    let out = model.forward(x)?;
    check_targets(x, targets)?;
    let mut total = 0.0;
    for (y, tgt) in out.outputs.iter().zip(targets) {
        if let Some(tgt) = tgt {
            total += step_loss(y, tgt, loss)?.0;
        }
    }
    Ok(total)
}

fn check_targets(x: &ObservationSequence, targets: &[Option<Target>]) -> Result<()> {
    if targets.len() != x.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} targets for {} steps",
            targets.len(),
            x.len()
        )));
    }
    if targets.iter().all(Option::is_none) {
        return Err(Error::Spec("no loss steps".into()));
    }
    Ok(())
}

/// Loss and exact parameter gradient by backpropagation through the full
/// unroll. `targets[s]` is `None` where step `s` carries no loss.
pub fn param_gradients(
    model: &SequenceModel,
    x: &ObservationSequence,
    targets: &[Option<Target>],
    loss: LossKind,
) -> Result<(f64, ParamGradient)> {
    model.check_input(x)?;
    check_targets(x, targets)?;
    let trace = model.trace(x);
    let len = x.len();
    let n = model.state_dim();
    let e = model.encoder.output_dim();
    let p = model.decoder.weight.cols();

    let mut total = 0.0;
    let mut d_out: Vec<Option<Vec<f64>>> = Vec::with_capacity(len);
    for (s, (y, tgt)) in trace.outputs.iter().zip(targets).enumerate() {
        match tgt {
            Some(tgt) => {
                let (l, g) = step_loss(y, tgt, loss)?;
                if !l.is_finite() {
                    return Err(Error::Numerical {
                        step: s,
                        what: "loss".into(),
                    });
                }
                total += l;
                d_out.push(Some(g));
            }
            None => d_out.push(None),
        }
    }

    let mut grad = model.zeros_like();
    let mut d_state = vec![0.0; n];
    for r in (0..len).rev() {
        if let Some(dy) = &d_out[r] {
            let state = &trace.states[r + 1];
            grad.decoder.weight.add_outer(dy, &state[..p]);
            for (b, v) in grad.decoder.bias.as_mut_slice().iter_mut().zip(dy) {
                *b += v;
            }
            model.decoder.weight.matvec_t_acc(dy, &mut d_state[..p]);
        }
        let mut d_prev = vec![0.0; n];
        let mut d_in = vec![0.0; e];
        model
            .cell
            .backward(&trace.caches[r], &d_state, &mut d_prev, &mut d_in, Some(&mut grad.cell));
        model
            .encoder
            .backward(x.step(r), &trace.encoded[r], &d_in, None, Some(&mut grad.encoder));
        d_state = d_prev;
    }
    let grad = ParamGradient::from_model(&grad);
    if !grad.is_finite() {
        return Err(Error::Numerical {
            step: 0,
            what: "parameter gradient".into(),
        });
    }
    Ok((total, grad))
}

/// Central-difference parameter gradient of [`sequence_loss`].
pub fn fd_param_gradients(
    model: &SequenceModel,
    x: &ObservationSequence,
    targets: &[Option<Target>],
    loss: LossKind,
    h: f64,
) -> Result<ParamGradient> {
    let mut out = ParamGradient::zeros_for(model);
    let count = out.tensors.len();
    for k in 0..count {
        let len = out.tensors[k].len();
        for idx in 0..len {
            let mut probe = model.clone();
            let v = probe.params_mut()[k].as_slice()[idx];
            let step = h * v.abs().max(1.0);
            probe.params_mut()[k].as_mut_slice()[idx] = v + step;
            let lp = sequence_loss(&probe, x, targets, loss)?;
            probe.params_mut()[k].as_mut_slice()[idx] = v - step;
            let lm = sequence_loss(&probe, x, targets, loss)?;
            out.tensors[k].as_mut_slice()[idx] = (lp - lm) / (2.0 * step);
        }
    }
    Ok(out)
}

/// Largest entrywise error of `approx` against `exact`, relative to
/// `max(1, |exact|_max)`.
pub fn max_relative_error(exact: &[f64], approx: &[f64]) -> f64 {
    let scale = exact.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    exact.iter().zip(approx).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale
}

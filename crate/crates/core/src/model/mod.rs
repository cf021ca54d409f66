//! Sequence models: an optional `tanh` encoder, one recurrent cell, and an
//! affine decoder that emits a vector output at every step.
//!
//! The hidden state always starts at zero. Outputs are causal: `y_s` is a
//! function of `x_1..x_s` only.

mod cell;
pub mod checkpoint;

pub use cell::{Cell, CellKind, Gate, StepCache};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::Rng;

/// Default LEM time step.
pub const DEFAULT_LEM_DT: f64 = 0.5;

/// Cell family and dimensions. `input_dim` is the raw observation size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub kind: CellKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub lem_dt: f64,
}

impl CellSpec {
    pub fn new(kind: CellKind, input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            kind,
            input_dim,
            hidden_dim,
            lem_dt: DEFAULT_LEM_DT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Spec("dimensions must be at least 1".into()));
        }
        if !(self.lem_dt > 0.0 && self.lem_dt.is_finite()) {
            return Err(Error::Spec(format!("lem_dt must be > 0, got {}", self.lem_dt)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EncoderSpec {
    Identity,
    /// `u = tanh(W x + b)` with `width` outputs.
    Tanh {
        width: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub cell: CellSpec,
    pub encoder: EncoderSpec,
    pub output_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Init {
    /// Fan-scaled uniform weights, zero biases.
    #[default]
    Glorot,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    Identity { dim: usize },
    Tanh { weight: Matrix, bias: Matrix },
}

impl Encoder {
    pub fn input_dim(&self) -> usize {
        match self {
            Encoder::Identity { dim } => *dim,
            Encoder::Tanh { weight, .. } => weight.cols(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Encoder::Identity { dim } => *dim,
            Encoder::Tanh { weight, .. } => weight.rows(),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Encoder::Identity { .. } => x.to_vec(),
            Encoder::Tanh { weight, bias } => {
                let mut u = bias.as_slice().to_vec();
                weight.matvec_acc(x, &mut u);
                u.iter_mut().for_each(|v| *v = v.tanh());
                u
            }
        }
    }

    /// `∂u/∂x` given the encoder output `u`.
    pub fn jacobian(&self, u: &[f64]) -> Matrix {
        match self {
            Encoder::Identity { dim } => Matrix::identity(*dim),
            Encoder::Tanh { weight, .. } => {
                let mut j = weight.clone();
                for i in 0..j.rows() {
                    let s = 1.0 - u[i] * u[i];
                    for k in 0..j.cols() {
                        j.set(i, k, j.get(i, k) * s);
                    }
                }
                j
            }
        }
    }

    /// Reverse pass: `d_u = ∂L/∂u` at encoder output `u` for input `x`.
    pub(crate) fn backward(
        &self,
        x: &[f64],
        u: &[f64],
        d_u: &[f64],
        d_x: Option<&mut [f64]>,
        grad: Option<&mut Encoder>,
    ) {
        match self {
            Encoder::Identity { .. } => {
                if let Some(dx) = d_x {
                    for (a, b) in dx.iter_mut().zip(d_u) {
                        *a += b;
                    }
                }
            }
            Encoder::Tanh { weight, .. } => {
                let d_pre: Vec<f64> = d_u.iter().zip(u).map(|(d, v)| d * (1.0 - v * v)).collect();
                if let Some(dx) = d_x {
                    weight.matvec_t_acc(&d_pre, dx);
                }
                if let Some(Encoder::Tanh { weight: gw, bias: gb }) = grad {
                    gw.add_outer(&d_pre, x);
                    for (b, d) in gb.as_mut_slice().iter_mut().zip(&d_pre) {
                        *b += d;
                    }
                }
            }
        }
    }
}

/// Affine readout from the first `p` state entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Decoder {
    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn apply(&self, state: &[f64]) -> Vec<f64> {
        let p = self.weight.cols();
        let mut y = self.bias.as_slice().to_vec();
        self.weight.matvec_acc(&state[..p], &mut y);
        y
    }
}

/// Observation sequence `x_1..x_T`, stored as a `T x d` matrix (row `t` is `x_{t+1}`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSequence {
    steps: Matrix,
}

impl ObservationSequence {
    pub fn new(steps: Matrix) -> Result<Self> {
        if steps.rows() < 2 {
            return Err(Error::Spec(format!(
                "observation sequences need T >= 2, got {}",
                steps.rows()
            )));
        }
        if steps.cols() == 0 {
            return Err(Error::Spec("observation dimension must be >= 1".into()));
        }
        if !steps.is_finite() {
            return Err(Error::InvalidMatrix("non-finite observation".into()));
        }
        Ok(Self { steps })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::ShapeMismatch("ragged observation rows".into()));
            }
            data.extend_from_slice(r);
        }
        Self::new(Matrix::from_vec(rows.len(), d, data)?)
    }

    pub fn len(&self) -> usize {
        self.steps.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.steps.cols()
    }

    /// Observation at 0-based step `t`.
    pub fn step(&self, t: usize) -> &[f64] {
        self.steps.row(t)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.steps
    }

    pub fn scaled(&self, beta: f64) -> Self {
        Self {
            steps: self.steps.scaled(beta),
        }
    }

    /// Copy with one entry replaced.
    pub fn with_entry(&self, t: usize, j: usize, value: f64) -> Self {
        let mut steps = self.steps.clone();
        steps.set(t, j, value);
        Self { steps }
    }

    /// First `len` steps (`len >= 2`).
    pub fn prefix(&self, len: usize) -> Result<Self> {
        let d = self.dim();
        Self::new(Matrix::from_vec(len, d, self.steps.as_slice()[..len * d].to_vec())?)
    }
}

/// Outputs `y_1..y_T` and states `h_0..h_T` (`states[0]` is the zero state).
#[derive(Debug, Clone, PartialEq)]
pub struct OutputSequence {
    pub outputs: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
}

/// Everything the reverse pass needs from a forward run.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    pub encoded: Vec<Vec<f64>>,
    pub caches: Vec<StepCache>,
    pub states: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceModel {
    pub encoder: Encoder,
    pub cell: Cell,
    pub decoder: Decoder,
}

impl SequenceModel {
    pub fn init(spec: &ModelSpec, init: Init, rng: &mut Rng) -> Result<Self> {
        spec.cell.validate()?;
        if spec.output_dim == 0 {
            return Err(Error::Spec("output dimension must be >= 1".into()));
        }
        let d = spec.cell.input_dim;
        let p = spec.cell.hidden_dim;
        let c = spec.output_dim;
        let zeros = init == Init::Zeros;
        let encoder = match spec.encoder {
            EncoderSpec::Identity => Encoder::Identity { dim: d },
            EncoderSpec::Tanh { width } => {
                if width == 0 {
                    return Err(Error::Spec("encoder width must be >= 1".into()));
                }
                Encoder::Tanh {
                    weight: if zeros {
                        Matrix::zeros(width, d)
                    } else {
                        cell::glorot(width, d, rng)
                    },
                    bias: Matrix::zeros(width, 1),
                }
            }
        };
        let e = encoder.output_dim();
        let cell = if zeros {
            Cell::zeros(spec.cell.kind, e, p, spec.cell.lem_dt)
        } else {
            Cell::glorot(spec.cell.kind, e, p, spec.cell.lem_dt, rng)
        };
        let decoder = Decoder {
            weight: if zeros {
                Matrix::zeros(c, p)
            } else {
                cell::glorot(c, p, rng)
            },
            bias: Matrix::zeros(c, 1),
        };
        Ok(Self { encoder, cell, decoder })
    }

    /// Linear recurrence `h_t = A h_{t-1} + C x_t`, `y_t = Q h_t`, identity encoder.
    pub fn linear_recurrence(a: Matrix, c: Matrix, q: Matrix) -> Result<Self> {
        let p = a.rows();
        if !a.is_square() || c.rows() != p || q.cols() != p {
            return Err(Error::ShapeMismatch(format!(
                "A {:?}, C {:?}, Q {:?} are inconsistent",
                a.shape(),
                c.shape(),
                q.shape()
            )));
        }
        let out = q.rows();
        Ok(Self {
            encoder: Encoder::Identity { dim: c.cols() },
            cell: Cell::LinearRec { a, c },
            decoder: Decoder {
                weight: q,
                bias: Matrix::zeros(out, 1),
            },
        })
    }

    /// Shift-register model with `y_s = U x_{s-k}` for `s > k` and `y_s = 0`
    /// before that. The state holds `k + 1` blocks of size `d`; block `j` is
    /// the observation from `j` steps ago.
    pub fn shift_copy(k: usize, readout: &Matrix) -> Result<Self> {
        let d = readout.cols();
        let c = readout.rows();
        if d == 0 || c == 0 {
            return Err(Error::Spec("readout must be non-empty".into()));
        }
        let p = (k + 1) * d;
        let mut a = Matrix::zeros(p, p);
        for block in 1..=k {
            for i in 0..d {
                a.set(block * d + i, (block - 1) * d + i, 1.0);
            }
        }
        let mut cm = Matrix::zeros(p, d);
        for i in 0..d {
            cm.set(i, i, 1.0);
        }
        let mut q = Matrix::zeros(c, p);
        for i in 0..c {
            for j in 0..d {
                q.set(i, k * d + j, readout.get(i, j));
            }
        }
        Self::linear_recurrence(a, cm, q)
    }

    /// Model whose output at step `s` depends on `x_s` only: a `tanh` encoder
    /// feeding a recurrence with zero transition.
    pub fn memoryless(input_dim: usize, width: usize, output_dim: usize, rng: &mut Rng) -> Result<Self> {
        let spec = ModelSpec {
            cell: CellSpec::new(CellKind::LinearRec, input_dim, width),
            encoder: EncoderSpec::Tanh { width },
            output_dim,
        };
        let mut model = Self::init(&spec, Init::Glorot, rng)?;
        if let Cell::LinearRec { a, .. } = &mut model.cell {
            a.fill(0.0);
        }
        Ok(model)
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            cell: CellSpec {
                kind: self.cell.kind(),
                input_dim: self.input_dim(),
                hidden_dim: self.cell.hidden_dim(),
                lem_dt: self.cell.lem_dt().unwrap_or(DEFAULT_LEM_DT),
            },
            encoder: match &self.encoder {
                Encoder::Identity { .. } => EncoderSpec::Identity,
                Encoder::Tanh { weight, .. } => EncoderSpec::Tanh { width: weight.rows() },
            },
            output_dim: self.output_dim(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.decoder.output_dim()
    }

    pub fn state_dim(&self) -> usize {
        self.cell.state_dim()
    }

    /// All-zero model with the same shapes; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut m = self.clone();
        for p in m.params_mut() {
            p.fill(0.0);
        }
        m
    }

    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        if let Encoder::Tanh { weight, bias } = &self.encoder {
            out.push(("encoder.weight".to_string(), weight));
            out.push(("encoder.bias".to_string(), bias));
        }
        out.extend(self.cell.named_params());
        out.push(("decoder.weight".to_string(), &self.decoder.weight));
        out.push(("decoder.bias".to_string(), &self.decoder.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        if let Encoder::Tanh { weight, bias } = &mut self.encoder {
            out.push(weight);
            out.push(bias);
        }
        out.extend(self.cell.params_mut());
        out.push(&mut self.decoder.weight);
        out.push(&mut self.decoder.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_params().iter().all(|(_, m)| m.is_finite())
    }

    /// Model computing `alpha * y_s`.
    pub fn with_output_scale(&self, alpha: f64) -> Self {
        let mut m = self.clone();
        m.decoder.weight.scale_in_place(alpha);
        m.decoder.bias.scale_in_place(alpha);
        m
    }

    /// Model `G` with `G(beta * X) = F(X)`: the first matrices touching the
    /// raw input are divided by `beta`.
    pub fn with_input_scale(&self, beta: f64) -> Self {
        let mut m = self.clone();
        match &mut m.encoder {
            Encoder::Tanh { weight, .. } => weight.scale_in_place(1.0 / beta),
            Encoder::Identity { .. } => {
                for w in m.cell.input_matrices_mut() {
                    w.scale_in_place(1.0 / beta);
                }
            }
        }
        m
    }

    pub fn zero_state(&self) -> Vec<f64> {
        vec![0.0; self.state_dim()]
    }

    pub(crate) fn check_input(&self, x: &ObservationSequence) -> Result<()> {
        if x.dim() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "model expects input dim {}, sequence has {}",
                self.input_dim(),
                x.dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &ObservationSequence) -> Result<OutputSequence> {
        self.check_input(x)?;
        let trace = self.trace_rows((0..x.len()).map(|t| x.step(t)));
        Ok(OutputSequence {
            outputs: trace.outputs,
            states: trace.states,
        })
    }

    /// Runs from the zero state over `rows` and returns the final state.
    pub(crate) fn final_state<'a>(&self, rows: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
        let mut state = self.zero_state();
        for x in rows {
            let u = self.encoder.apply(x);
            state = self.cell.step(&state, &u).0;
        }
        state
    }

    /// Runs from the zero state over `rows` and returns the last output.
    pub(crate) fn last_output<'a>(&self, rows: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
        self.decoder.apply(&self.final_state(rows))
    }

    pub(crate) fn trace(&self, x: &ObservationSequence) -> Trace {
        self.trace_rows((0..x.len()).map(|t| x.step(t)))
    }

    fn trace_rows<'a>(&self, rows: impl Iterator<Item = &'a [f64]>) -> Trace {
        let mut state = self.zero_state();
        let mut trace = Trace {
            encoded: Vec::new(),
            caches: Vec::new(),
            states: vec![state.clone()],
            outputs: Vec::new(),
        };
        for x in rows {
            let u = self.encoder.apply(x);
            let (next, cache) = self.cell.step(&state, &u);
            trace.outputs.push(self.decoder.apply(&next));
            trace.states.push(next.clone());
            trace.caches.push(cache);
            trace.encoded.push(u);
            state = next;
        }
        trace
    }
}

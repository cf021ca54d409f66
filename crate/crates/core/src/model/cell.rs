//! Recurrent cells with hand-written forward and reverse passes.
//!
//! Every cell maps `(state, input) -> state'` and exposes a vector-Jacobian
//! product that returns gradients with respect to the previous state, the
//! input, and (optionally) the cell parameters. Explicit state and input
//! Jacobians are assembled from these products, so each cell's calculus is
//! written exactly once.
//!
//! State layouts (`p` = hidden size):
//!
//! | cell      | state      | equations |
//! |-----------|------------|-----------|
//! | LinearRec | `h` (p)    | `h' = A h + C u` |
//! | GRU       | `h` (p)    | `z = σ(W_z u + U_z h + b_z)`, `r = σ(W_r u + U_r h + b_r)`, `g = tanh(W_g u + U_g (r⊙h) + b_g)`, `h' = (1−z)⊙h + z⊙g` |
//! | LSTM      | `[h; c]`   | `i,f,o = σ(·)`, `g = tanh(·)`, `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')` |
//! | LEM       | `[y; z]`   | `Δ₁ = dt·σ(W₁ y + V₁ u + b₁)`, `Δ₂ = dt·σ(W₂ y + V₂ u + b₂)`, `z' = (1−Δ₁)⊙z + Δ₁⊙tanh(W_z y + V_z u + b_z)`, `y' = (1−Δ₂)⊙y + Δ₂⊙tanh(W_y z' + V_y u + b_y)` |
//!
//! The decoder always reads the first `p` entries of the state.

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    #[serde(rename = "linear")]
    LinearRec,
    Gru,
    Lstm,
    Lem,
}

impl CellKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::LinearRec => "linear",
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
            CellKind::Lem => "lem",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(CellKind::LinearRec),
            "gru" => Some(CellKind::Gru),
            "lstm" => Some(CellKind::Lstm),
            "lem" => Some(CellKind::Lem),
            _ => None,
        }
    }

    /// State size for hidden size `p`.
    pub fn state_dim(self, p: usize) -> usize {
        match self {
            CellKind::LinearRec | CellKind::Gru => p,
            CellKind::Lstm | CellKind::Lem => 2 * p,
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Affine pre-activation `W_in u + W_rec h + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub w_in: Matrix,
    pub w_rec: Matrix,
    pub bias: Matrix,
}

impl Gate {
    fn zeros(p: usize, e: usize, rec: usize) -> Self {
        Self {
            w_in: Matrix::zeros(p, e),
            w_rec: Matrix::zeros(p, rec),
            bias: Matrix::zeros(p, 1),
        }
    }

    fn glorot(p: usize, e: usize, rec: usize, rng: &mut Rng) -> Self {
        Self {
            w_in: glorot(p, e, rng),
            w_rec: glorot(p, rec, rng),
            bias: Matrix::zeros(p, 1),
        }
    }

    fn preact(&self, u: &[f64], h: &[f64]) -> Vec<f64> {
        let mut out = self.bias.as_slice().to_vec();
        self.w_in.matvec_acc(u, &mut out);
        self.w_rec.matvec_acc(h, &mut out);
        out
    }

    fn backward(&self, d_pre: &[f64], u: &[f64], h: &[f64], d_u: &mut [f64], d_h: &mut [f64], grad: Option<&mut Gate>) {
        self.w_in.matvec_t_acc(d_pre, d_u);
        self.w_rec.matvec_t_acc(d_pre, d_h);
        if let Some(g) = grad {
            g.w_in.add_outer(d_pre, u);
            g.w_rec.add_outer(d_pre, h);
            for (b, d) in g.bias.as_mut_slice().iter_mut().zip(d_pre) {
                *b += d;
            }
        }
    }

    fn params(&self) -> [&Matrix; 3] {
        [&self.w_in, &self.w_rec, &self.bias]
    }

    fn params_mut(&mut self) -> [&mut Matrix; 3] {
        [&mut self.w_in, &mut self.w_rec, &mut self.bias]
    }
}

pub(crate) fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform_range(-limit, limit)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    LinearRec {
        a: Matrix,
        c: Matrix,
    },
    Gru {
        z: Gate,
        r: Gate,
        g: Gate,
    },
    Lstm {
        i: Gate,
        f: Gate,
        g: Gate,
        o: Gate,
    },
    Lem {
        dt1: Gate,
        dt2: Gate,
        z: Gate,
        y: Gate,
        dt: f64,
    },
}

/// Quantities saved by the forward step for the reverse pass.
#[derive(Debug, Clone)]
pub enum StepCache {
    LinearRec {
        prev: Vec<f64>,
        input: Vec<f64>,
    },
    Gru {
        prev: Vec<f64>,
        input: Vec<f64>,
        z: Vec<f64>,
        r: Vec<f64>,
        g: Vec<f64>,
        rh: Vec<f64>,
    },
    Lstm {
        prev: Vec<f64>,
        input: Vec<f64>,
        i: Vec<f64>,
        f: Vec<f64>,
        g: Vec<f64>,
        o: Vec<f64>,
        tanh_c: Vec<f64>,
    },
    Lem {
        prev: Vec<f64>,
        input: Vec<f64>,
        s1: Vec<f64>,
        s2: Vec<f64>,
        gz: Vec<f64>,
        gy: Vec<f64>,
        z_new: Vec<f64>,
    },
}

impl Cell {
    pub fn zeros(kind: CellKind, e: usize, p: usize, lem_dt: f64) -> Self {
        match kind {
            CellKind::LinearRec => Cell::LinearRec {
                a: Matrix::zeros(p, p),
                c: Matrix::zeros(p, e),
            },
            CellKind::Gru => Cell::Gru {
                z: Gate::zeros(p, e, p),
                r: Gate::zeros(p, e, p),
                g: Gate::zeros(p, e, p),
            },
            CellKind::Lstm => Cell::Lstm {
                i: Gate::zeros(p, e, p),
                f: Gate::zeros(p, e, p),
                g: Gate::zeros(p, e, p),
                o: Gate::zeros(p, e, p),
            },
            CellKind::Lem => Cell::Lem {
                dt1: Gate::zeros(p, e, p),
                dt2: Gate::zeros(p, e, p),
                z: Gate::zeros(p, e, p),
                y: Gate::zeros(p, e, p),
                dt: lem_dt,
            },
        }
    }

    pub fn glorot(kind: CellKind, e: usize, p: usize, lem_dt: f64, rng: &mut Rng) -> Self {
        match kind {
            // halved so the free recurrence starts near the unit circle
            CellKind::LinearRec => Cell::LinearRec {
                a: glorot(p, p, rng).scaled(0.5),
                c: glorot(p, e, rng),
            },
            CellKind::Gru => Cell::Gru {
                z: Gate::glorot(p, e, p, rng),
                r: Gate::glorot(p, e, p, rng),
                g: Gate::glorot(p, e, p, rng),
            },
            CellKind::Lstm => Cell::Lstm {
                i: Gate::glorot(p, e, p, rng),
                f: Gate::glorot(p, e, p, rng),
                g: Gate::glorot(p, e, p, rng),
                o: Gate::glorot(p, e, p, rng),
            },
            CellKind::Lem => Cell::Lem {
                dt1: Gate::glorot(p, e, p, rng),
                dt2: Gate::glorot(p, e, p, rng),
                z: Gate::glorot(p, e, p, rng),
                y: Gate::glorot(p, e, p, rng),
                dt: lem_dt,
            },
        }
    }

    pub fn kind(&self) -> CellKind {
        match self {
            Cell::LinearRec { .. } => CellKind::LinearRec,
            Cell::Gru { .. } => CellKind::Gru,
            Cell::Lstm { .. } => CellKind::Lstm,
            Cell::Lem { .. } => CellKind::Lem,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        match self {
            Cell::LinearRec { a, .. } => a.rows(),
            Cell::Gru { z, .. } => z.bias.rows(),
            Cell::Lstm { i, .. } => i.bias.rows(),
            Cell::Lem { y, .. } => y.bias.rows(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Cell::LinearRec { c, .. } => c.cols(),
            Cell::Gru { z, .. } => z.w_in.cols(),
            Cell::Lstm { i, .. } => i.w_in.cols(),
            Cell::Lem { y, .. } => y.w_in.cols(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.kind().state_dim(self.hidden_dim())
    }

    pub fn lem_dt(&self) -> Option<f64> {
        match self {
            Cell::Lem { dt, .. } => Some(*dt),
            _ => None,
        }
    }

    /// Named parameter tensors in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        match self {
            Cell::LinearRec { a, c } => {
                out.push(("cell.a".to_string(), a));
                out.push(("cell.c".to_string(), c));
            }
            Cell::Gru { z, r, g } => {
                push_gate(&mut out, "z", z);
                push_gate(&mut out, "r", r);
                push_gate(&mut out, "g", g);
            }
            Cell::Lstm { i, f, g, o } => {
                push_gate(&mut out, "i", i);
                push_gate(&mut out, "f", f);
                push_gate(&mut out, "g", g);
                push_gate(&mut out, "o", o);
            }
            Cell::Lem { dt1, dt2, z, y, .. } => {
                push_gate(&mut out, "dt1", dt1);
                push_gate(&mut out, "dt2", dt2);
                push_gate(&mut out, "z", z);
                push_gate(&mut out, "y", y);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Cell::LinearRec { a, c } => vec![a, c],
            Cell::Gru { z, r, g } => [z, r, g].into_iter().flat_map(|g| g.params_mut()).collect(),
            Cell::Lstm { i, f, g, o } => [i, f, g, o].into_iter().flat_map(|g| g.params_mut()).collect(),
            Cell::Lem { dt1, dt2, z, y, .. } => [dt1, dt2, z, y].into_iter().flat_map(|g| g.params_mut()).collect(),
        }
    }

    /// Matrices multiplying the cell input; rescaled for input reparameterization.
    pub(crate) fn input_matrices_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Cell::LinearRec { c, .. } => vec![c],
            Cell::Gru { z, r, g } => vec![&mut z.w_in, &mut r.w_in, &mut g.w_in],
            Cell::Lstm { i, f, g, o } => {
                vec![&mut i.w_in, &mut f.w_in, &mut g.w_in, &mut o.w_in]
            }
            Cell::Lem { dt1, dt2, z, y, .. } => {
                vec![&mut dt1.w_in, &mut dt2.w_in, &mut z.w_in, &mut y.w_in]
            }
        }
    }

    /// One recurrence step. Returns the new state and the reverse-pass cache.
    pub fn step(&self, prev: &[f64], input: &[f64]) -> (Vec<f64>, StepCache) {
        match self {
            Cell::LinearRec { a, c } => {
                let mut h = a.matvec(prev);
                c.matvec_acc(input, &mut h);
                (
                    h,
                    StepCache::LinearRec {
                        prev: prev.to_vec(),
                        input: input.to_vec(),
                    },
                )
            }
            Cell::Gru { z, r, g } => {
                let zv: Vec<f64> = z.preact(input, prev).into_iter().map(sigmoid).collect();
                let rv: Vec<f64> = r.preact(input, prev).into_iter().map(sigmoid).collect();
                let rh: Vec<f64> = rv.iter().zip(prev).map(|(a, b)| a * b).collect();
                let gv: Vec<f64> = g.preact(input, &rh).into_iter().map(f64::tanh).collect();
                let h = (0..prev.len())
                    .map(|k| (1.0 - zv[k]) * prev[k] + zv[k] * gv[k])
                    .collect();
                (
                    h,
                    StepCache::Gru {
                        prev: prev.to_vec(),
                        input: input.to_vec(),
                        z: zv,
                        r: rv,
                        g: gv,
                        rh,
                    },
                )
            }
            Cell::Lstm { i, f, g, o } => {
                let p = i.bias.rows();
                let (h, c) = prev.split_at(p);
                let iv: Vec<f64> = i.preact(input, h).into_iter().map(sigmoid).collect();
                let fv: Vec<f64> = f.preact(input, h).into_iter().map(sigmoid).collect();
                let gv: Vec<f64> = g.preact(input, h).into_iter().map(f64::tanh).collect();
                let ov: Vec<f64> = o.preact(input, h).into_iter().map(sigmoid).collect();
                let mut next = vec![0.0; 2 * p];
                let mut tanh_c = vec![0.0; p];
                for k in 0..p {
                    let c_new = fv[k] * c[k] + iv[k] * gv[k];
                    tanh_c[k] = c_new.tanh();
                    next[k] = ov[k] * tanh_c[k];
                    next[p + k] = c_new;
                }
                (
                    next,
                    StepCache::Lstm {
                        prev: prev.to_vec(),
                        input: input.to_vec(),
                        i: iv,
                        f: fv,
                        g: gv,
                        o: ov,
                        tanh_c,
                    },
                )
            }
            Cell::Lem { dt1, dt2, z, y, dt } => {
                let p = y.bias.rows();
                let (yv, zv) = prev.split_at(p);
                let s1: Vec<f64> = dt1.preact(input, yv).into_iter().map(sigmoid).collect();
                let s2: Vec<f64> = dt2.preact(input, yv).into_iter().map(sigmoid).collect();
                let gz: Vec<f64> = z.preact(input, yv).into_iter().map(f64::tanh).collect();
                let z_new: Vec<f64> = (0..p)
                    .map(|k| {
                        let d = dt * s1[k];
                        (1.0 - d) * zv[k] + d * gz[k]
                    })
                    .collect();
                let gy: Vec<f64> = y.preact(input, &z_new).into_iter().map(f64::tanh).collect();
                let mut next = vec![0.0; 2 * p];
                for k in 0..p {
                    let d = dt * s2[k];
                    next[k] = (1.0 - d) * yv[k] + d * gy[k];
                    next[p + k] = z_new[k];
                }
                (
                    next,
                    StepCache::Lem {
                        prev: prev.to_vec(),
                        input: input.to_vec(),
                        s1,
                        s2,
                        gz,
                        gy,
                        z_new,
                    },
                )
            }
        }
    }

    /// Reverse pass for one step: given `d_next = ∂L/∂state'`, accumulates
    /// `∂L/∂state` into `d_prev`, `∂L/∂input` into `d_input`, and parameter
    /// gradients into `grad` (a cell of the same kind and shape) if given.
    pub fn backward(
        &self,
        cache: &StepCache,
        d_next: &[f64],
        d_prev: &mut [f64],
        d_input: &mut [f64],
        grad: Option<&mut Cell>,
    ) {
        match (self, cache) {
            (Cell::LinearRec { a, c }, StepCache::LinearRec { prev, input }) => {
                a.matvec_t_acc(d_next, d_prev);
                c.matvec_t_acc(d_next, d_input);
                if let Some(Cell::LinearRec { a: ga, c: gc }) = grad {
                    ga.add_outer(d_next, prev);
                    gc.add_outer(d_next, input);
                }
            }
            (
                Cell::Gru { z, r, g },
                StepCache::Gru {
                    prev,
                    input,
                    z: zv,
                    r: rv,
                    g: gv,
                    rh,
                },
            ) => {
                let p = prev.len();
                let mut d_zpre = vec![0.0; p];
                let mut d_gpre = vec![0.0; p];
                for k in 0..p {
                    let dh = d_next[k];
                    d_prev[k] += dh * (1.0 - zv[k]);
                    d_zpre[k] = dh * (gv[k] - prev[k]) * zv[k] * (1.0 - zv[k]);
                    d_gpre[k] = dh * zv[k] * (1.0 - gv[k] * gv[k]);
                }
                let (mut gz, mut gr, mut gg) = match grad {
                    Some(Cell::Gru { z, r, g }) => (Some(z), Some(r), Some(g)),
                    _ => (None, None, None),
                };
                let mut d_rh = vec![0.0; p];
                g.backward(&d_gpre, input, rh, d_input, &mut d_rh, gg.take());
                let mut d_rpre = vec![0.0; p];
                for k in 0..p {
                    d_prev[k] += d_rh[k] * rv[k];
                    d_rpre[k] = d_rh[k] * prev[k] * rv[k] * (1.0 - rv[k]);
                }
                z.backward(&d_zpre, input, prev, d_input, d_prev, gz.take());
                r.backward(&d_rpre, input, prev, d_input, d_prev, gr.take());
            }
            (
                Cell::Lstm { i, f, g, o },
                StepCache::Lstm {
                    prev,
                    input,
                    i: iv,
                    f: fv,
                    g: gv,
                    o: ov,
                    tanh_c,
                },
            ) => {
                let p = iv.len();
                let (h, c) = prev.split_at(p);
                let mut d_i = vec![0.0; p];
                let mut d_f = vec![0.0; p];
                let mut d_g = vec![0.0; p];
                let mut d_o = vec![0.0; p];
                for k in 0..p {
                    let dh = d_next[k];
                    let dc = d_next[p + k] + dh * ov[k] * (1.0 - tanh_c[k] * tanh_c[k]);
                    d_o[k] = dh * tanh_c[k] * ov[k] * (1.0 - ov[k]);
                    d_f[k] = dc * c[k] * fv[k] * (1.0 - fv[k]);
                    d_i[k] = dc * gv[k] * iv[k] * (1.0 - iv[k]);
                    d_g[k] = dc * iv[k] * (1.0 - gv[k] * gv[k]);
                    d_prev[p + k] += dc * fv[k];
                }
                let (gi, gf, gg, go) = match grad {
                    Some(Cell::Lstm { i, f, g, o }) => (Some(i), Some(f), Some(g), Some(o)),
                    _ => (None, None, None, None),
                };
                let d_h = &mut d_prev[..p];
                i.backward(&d_i, input, h, d_input, d_h, gi);
                f.backward(&d_f, input, h, d_input, d_h, gf);
                g.backward(&d_g, input, h, d_input, d_h, gg);
                o.backward(&d_o, input, h, d_input, d_h, go);
            }
            (
                Cell::Lem { dt1, dt2, z, y, dt },
                StepCache::Lem {
                    prev,
                    input,
                    s1,
                    s2,
                    gz,
                    gy,
                    z_new,
                },
            ) => {
                let p = s1.len();
                let (yv, zv) = prev.split_at(p);
                let (g1, g2, ggz, ggy) = match grad {
                    Some(Cell::Lem { dt1, dt2, z, y, .. }) => (Some(dt1), Some(dt2), Some(z), Some(y)),
                    _ => (None, None, None, None),
                };
                let mut d_ypre = vec![0.0; p];
                let mut d_2pre = vec![0.0; p];
                for k in 0..p {
                    let dy = d_next[k];
                    let d2 = dt * s2[k];
                    d_prev[k] += dy * (1.0 - d2);
                    d_ypre[k] = dy * d2 * (1.0 - gy[k] * gy[k]);
                    d_2pre[k] = dy * (gy[k] - yv[k]) * dt * s2[k] * (1.0 - s2[k]);
                }
                let mut d_znew: Vec<f64> = d_next[p..].to_vec();
                y.backward(&d_ypre, input, z_new, d_input, &mut d_znew, ggy);
                let mut d_zpre = vec![0.0; p];
                let mut d_1pre = vec![0.0; p];
                for k in 0..p {
                    let dz = d_znew[k];
                    let d1 = dt * s1[k];
                    d_prev[p + k] += dz * (1.0 - d1);
                    d_zpre[k] = dz * d1 * (1.0 - gz[k] * gz[k]);
                    d_1pre[k] = dz * (gz[k] - zv[k]) * dt * s1[k] * (1.0 - s1[k]);
                }
                let d_y = &mut d_prev[..p];
                z.backward(&d_zpre, input, yv, d_input, d_y, ggz);
                dt1.backward(&d_1pre, input, yv, d_input, d_y, g1);
                dt2.backward(&d_2pre, input, yv, d_input, d_y, g2);
            }
            _ => panic!("cell/cache kind mismatch"),
        }
    }

    /// Explicit `(∂state'/∂state, ∂state'/∂input)` at the cached point, one
    /// reverse product per state coordinate.
    pub fn step_jacobians(&self, cache: &StepCache) -> (Matrix, Matrix) {
        let n = self.state_dim();
        let e = self.input_dim();
        let mut js = Matrix::zeros(n, n);
        let mut ju = Matrix::zeros(n, e);
        let mut unit = vec![0.0; n];
        let mut d_prev = vec![0.0; n];
        let mut d_in = vec![0.0; e];
        for row in 0..n {
            unit[row] = 1.0;
            d_prev.iter_mut().for_each(|v| *v = 0.0);
            d_in.iter_mut().for_each(|v| *v = 0.0);
            self.backward(cache, &unit, &mut d_prev, &mut d_in, None);
            for j in 0..n {
                js.set(row, j, d_prev[j]);
            }
            for j in 0..e {
                ju.set(row, j, d_in[j]);
            }
            unit[row] = 0.0;
        }
        (js, ju)
    }
}

fn push_gate<'a>(out: &mut Vec<(String, &'a Matrix)>, name: &str, gate: &'a Gate) {
    let [w_in, w_rec, bias] = gate.params();
    out.push((format!("cell.{name}.w_in"), w_in));
    out.push((format!("cell.{name}.w_rec"), w_rec));
    out.push((format!("cell.{name}.bias"), bias));
}

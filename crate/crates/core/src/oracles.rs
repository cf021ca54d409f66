//! Closed-form ranges and the axiom property suite.
//!
//! A linear temporal map `L(z) = Σ_t B_t z_t` over positions `0..T` has
//! `rho = Σ ‖B_t‖ (T-1-t)` and `rho_hat = rho / Σ ‖B_t‖`. The axiom suite
//! samples random maps and checks that a range function satisfies the
//! calibration, additivity, homogeneity and averaging rules that single out
//! this form.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::JacobianMode;
use crate::linalg::{mat_norm, mat_pow, Matrix, NormKind};
use crate::metric::{analyze, temporal_range, Aggregation, InfluenceProfile, NormalizedRange, RangeValue, TrConfig};
use crate::model::{ObservationSequence, SequenceModel};
use crate::rng::Rng;

pub const AXIOM_SCHEMA_VERSION: u32 = 1;
pub const AXIOM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearTemporalMap {
    blocks: Vec<Matrix>,
}

impl LinearTemporalMap {
    pub fn new(blocks: Vec<Matrix>) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::Spec("a temporal map needs at least one block".into()))?;
        let shape = first.shape();
        if shape.0 == 0 || shape.1 == 0 {
            return Err(Error::Spec("blocks must be non-empty".into()));
        }
        for (t, b) in blocks.iter().enumerate() {
            if b.shape() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "block {t} is {}x{}, expected {}x{}",
                    b.rows(),
                    b.cols(),
                    shape.0,
                    shape.1
                )));
            }
            if !b.is_finite() {
                return Err(Error::InvalidMatrix(format!("block {t} has non-finite entries")));
            }
        }
        Ok(Self { blocks })
    }

    /// `L(z) = B z_{T-1-k}`.
    pub fn single(len: usize, lag: usize, b: Matrix) -> Result<Self> {
        if lag >= len {
            return Err(Error::Spec(format!("lag {lag} outside window of {len}")));
        }
        let mut blocks = vec![Matrix::zeros(b.rows(), b.cols()); len];
        blocks[len - 1 - lag] = b;
        Self::new(blocks)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn out_dim(&self) -> usize {
        self.blocks[0].rows()
    }

    pub fn in_dim(&self) -> usize {
        self.blocks[0].cols()
    }

    pub fn blocks(&self) -> &[Matrix] {
        &self.blocks
    }

    pub fn block(&self, t: usize) -> &Matrix {
        &self.blocks[t]
    }

    pub fn lag(&self, t: usize) -> usize {
        self.blocks.len() - 1 - t
    }

    pub fn is_zero(&self) -> bool {
        self.blocks.iter().all(|b| b.max_abs() == 0.0)
    }

    /// Positions with a non-zero block.
    pub fn support(&self) -> Vec<usize> {
        (0..self.len()).filter(|&t| self.blocks[t].max_abs() != 0.0).collect()
    }

    pub fn mass(&self, norm: NormKind) -> Result<f64> {
        self.blocks.iter().map(|b| mat_norm(b, norm)).sum()
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            blocks: self.blocks.iter().map(|b| b.scaled(alpha)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch(format!(
                "maps have {} and {} steps",
                self.len(),
                other.len()
            )));
        }
        let blocks = self
            .blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| a.add(b))
            .collect::<Result<_>>()?;
        Self::new(blocks)
    }

    /// Keeps only the blocks at `positions`.
    pub fn restricted(&self, positions: &[usize]) -> Self {
        let mut blocks: Vec<Matrix> = self.blocks.iter().map(|b| Matrix::zeros(b.rows(), b.cols())).collect();
        for &t in positions {
            blocks[t] = self.blocks[t].clone();
        }
        Self { blocks }
    }

    /// A linear recurrence whose final output is `L` applied to the window:
    /// the state is a shift register of the last `T` inputs and the readout
    /// holds `B_t` against the slot of lag `T-1-t`.
    pub fn to_model(&self) -> Result<SequenceModel> {
        let (len, c, d) = (self.len(), self.out_dim(), self.in_dim());
        let p = len * d;
        let mut a = Matrix::zeros(p, p);
        for i in d..p {
            a.set(i, i - d, 1.0);
        }
        let mut cin = Matrix::zeros(p, d);
        for j in 0..d {
            cin.set(j, j, 1.0);
        }
        let mut q = Matrix::zeros(c, p);
        for t in 0..len {
            let slot = self.lag(t) * d;
            let b = &self.blocks[t];
            for i in 0..c {
                for j in 0..d {
                    q.set(i, slot + j, b.get(i, j));
                }
            }
        }
        SequenceModel::linear_recurrence(a, cin, q)
    }
}

pub fn linear_map_range(map: &LinearTemporalMap, norm: NormKind) -> Result<RangeValue> {
    let weights = map
        .blocks()
        .iter()
        .map(|b| mat_norm(b, norm))
        .collect::<Result<Vec<_>>>()?;
    let profile = InfluenceProfile::new(weights, JacobianMode::FinalOutput, Aggregation::Mean)?;
    Ok(temporal_range(&profile))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrenceSpec {
    pub a: Matrix,
    pub c: Matrix,
    pub q: Matrix,
    pub len: usize,
}

impl RecurrenceSpec {
    pub fn new(a: Matrix, c: Matrix, q: Matrix, len: usize) -> Result<Self> {
        let p = a.rows();
        if !a.is_square() || p == 0 {
            return Err(Error::ShapeMismatch(format!(
                "A must be square, got {}x{}",
                a.rows(),
                a.cols()
            )));
        }
        if c.rows() != p || c.cols() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "C must be {p}xd, got {}x{}",
                c.rows(),
                c.cols()
            )));
        }
        if q.cols() != p || q.rows() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "Q must be cx{p}, got {}x{}",
                q.rows(),
                q.cols()
            )));
        }
        if len < 2 {
            return Err(Error::Spec(format!("window must be >= 2, got {len}")));
        }
        Ok(Self { a, c, q, len })
    }

    pub fn random(rng: &mut Rng, p: usize, d: usize, c: usize, len: usize) -> Result<Self> {
        let mut gauss = |r: usize, k: usize, s: f64| {
            let data = (0..r * k).map(|_| rng.gaussian() * s).collect();
            Matrix::from_vec(r, k, data)
        };
        let a = gauss(p, p, 0.9 / (p as f64).sqrt())?;
        let cm = gauss(p, d, 1.0)?;
        let q = gauss(c, p, 1.0)?;
        Self::new(a, cm, q, len)
    }

    pub fn to_model(&self) -> Result<SequenceModel> {
        SequenceModel::linear_recurrence(self.a.clone(), self.c.clone(), self.q.clone())
    }
}

/// `w_t = ‖Q A^(T-1-t) C‖` from matrix powers.
pub fn recurrence_profile(spec: &RecurrenceSpec, norm: NormKind) -> Result<InfluenceProfile> {
    let mut weights = Vec::with_capacity(spec.len);
    for t in 0..spec.len {
        let power = mat_pow(&spec.a, (spec.len - 1 - t) as u32)?;
        let block = spec.q.matmul(&power)?.matmul(&spec.c)?;
        weights.push(mat_norm(&block, norm)?);
    }
    InfluenceProfile::new(weights, JacobianMode::FinalOutput, Aggregation::Mean)
}

/// Expected normalized range of an exact copy-`k` model.
pub fn copyk_oracle(k: usize, len: usize) -> Result<f64> {
    if k >= len {
        return Err(Error::Spec(format!("copy offset {k} must be below window {len}")));
    }
    Ok(k as f64)
}

/// Mean absolute error of measured ranges against the copy offset.
pub fn copyk_mae(rho_hats: &[f64], k: usize) -> f64 {
    if rho_hats.is_empty() {
        return 0.0;
    }
    rho_hats.iter().map(|r| (r - k as f64).abs()).sum::<f64>() / rho_hats.len() as f64
}

pub type RangeFn = dyn Fn(&LinearTemporalMap, NormKind) -> Result<RangeValue> + Sync;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxiomCheck {
    pub name: String,
    pub trials: usize,
    pub max_residual: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxiomReport {
    pub schema_version: u32,
    pub seed: u64,
    pub trials: usize,
    pub norm: NormKind,
    pub tolerance: f64,
    pub checks: Vec<AxiomCheck>,
    pub passed: bool,
}

impl AxiomReport {
    pub fn check(&self, name: &str) -> Option<&AxiomCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn max_residual(&self) -> f64 {
        self.checks.iter().map(|c| c.max_residual).fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

pub const AXIOM_NAMES: [&str; 8] = [
    "R1-u",
    "R1-n",
    "R2",
    "R3",
    "R4",
    "R4-mass",
    "closed-rho",
    "closed-rho-hat",
];

fn residual(got: f64, expected: f64) -> f64 {
    (got - expected).abs() / expected.abs().max(1.0)
}

fn hat_residual(got: NormalizedRange, expected: f64) -> f64 {
    match got {
        NormalizedRange::Value(v) => residual(v, expected),
        NormalizedRange::Degenerate => f64::INFINITY,
    }
}

fn random_block(rng: &mut Rng, c: usize, d: usize) -> Matrix {
    loop {
        let data = (0..c * d).map(|_| rng.gaussian()).collect();
        let m = Matrix::from_vec(c, d, data).expect("sized");
        if m.max_abs() > 0.0 {
            return m;
        }
    }
}

/// Gaussian blocks, each zeroed with probability 1/4; never the zero map.
pub fn random_map(rng: &mut Rng, len: usize, c: usize, d: usize) -> LinearTemporalMap {
    let blocks = (0..len)
        .map(|_| {
            if rng.uniform() < 0.25 {
                Matrix::zeros(c, d)
            } else {
                random_block(rng, c, d).scaled(rng.uniform_range(0.1, 3.0))
            }
        })
        .collect();
    let mut map = LinearTemporalMap { blocks };
    if map.is_zero() {
        let t = rng.below(len);
        map.blocks[t] = random_block(rng, c, d);
    }
    map
}

/// Random partition of `0..len` into two non-empty sets.
fn partition(rng: &mut Rng, len: usize) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut idx);
    let cut = 1 + rng.below(len - 1);
    let (mut a, mut b) = (idx[..cut].to_vec(), idx[cut..].to_vec());
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

/// Two maps on disjoint time sets, each with a non-zero block.
fn disjoint_pair(rng: &mut Rng, len: usize, c: usize, d: usize) -> (LinearTemporalMap, LinearTemporalMap) {
    let (s1, s2) = partition(rng, len);
    let mut l1 = random_map(rng, len, c, d).restricted(&s1);
    let mut l2 = random_map(rng, len, c, d).restricted(&s2);
    if l1.is_zero() {
        l1.blocks[s1[rng.below(s1.len())]] = random_block(rng, c, d);
    }
    if l2.is_zero() {
        l2.blocks[s2[rng.below(s2.len())]] = random_block(rng, c, d);
    }
    (l1, l2)
}

fn random_coefficient(rng: &mut Rng) -> f64 {
    match rng.below(8) {
        0 => 0.0,
        1 => -1.0,
        _ => rng.uniform_range(-5.0, 5.0),
    }
}

fn trial(rng: &mut Rng, norm: NormKind, range: &RangeFn) -> Result<[f64; 8]> {
    let len = 2 + rng.below(15);
    let c = 1 + rng.below(4);
    let d = 1 + rng.below(4);
    let mut res = [0.0; 8];

    // R1-u, R1-n
    let k = rng.below(len);
    let b = random_block(rng, c, d).scaled(rng.uniform_range(0.1, 5.0));
    let nb = mat_norm(&b, norm)?;
    let single = range(&LinearTemporalMap::single(len, k, b)?, norm)?;
    res[0] = residual(single.rho, nb * k as f64);
    res[1] = hat_residual(single.rho_hat, k as f64);

    // R2
    let (l1, l2) = disjoint_pair(rng, len, c, d);
    let r1 = range(&l1, norm)?;
    let r2 = range(&l2, norm)?;
    let r12 = range(&l1.add(&l2)?, norm)?;
    res[2] = residual(r12.rho, r1.rho + r2.rho);

    // R3
    let l = random_map(rng, len, c, d);
    let alpha = random_coefficient(rng);
    let rl = range(&l, norm)?;
    let ra = range(&l.scaled(alpha), norm)?;
    res[3] = residual(ra.rho, alpha.abs() * rl.rho);

    // R4 on unit-mass maps, and its mass-weighted form on arbitrary ones
    let (mut alpha, beta) = (random_coefficient(rng), random_coefficient(rng));
    if alpha == 0.0 && beta == 0.0 {
        alpha = 1.0;
    }
    let (m1, m2) = (l1.mass(norm)?, l2.mass(norm)?);
    let u1 = l1.scaled(1.0 / m1);
    let u2 = l2.scaled(1.0 / m2);
    let h1 = range(&u1, norm)?.rho_hat.value().unwrap_or(f64::NAN);
    let h2 = range(&u2, norm)?.rho_hat.value().unwrap_or(f64::NAN);
    let mix = range(&u1.scaled(alpha).add(&u2.scaled(beta))?, norm)?;
    let expected = (alpha.abs() * h1 + beta.abs() * h2) / (alpha.abs() + beta.abs());
    res[4] = hat_residual(mix.rho_hat, expected);

    let g1 = r1.rho_hat.value().unwrap_or(f64::NAN);
    let g2 = r2.rho_hat.value().unwrap_or(f64::NAN);
    let mix = range(&l1.scaled(alpha).add(&l2.scaled(beta))?, norm)?;
    let (w1, w2) = (alpha.abs() * m1, beta.abs() * m2);
    res[5] = hat_residual(mix.rho_hat, (w1 * g1 + w2 * g2) / (w1 + w2));

    // Closed forms: decompose into single-step maps
    let rl_hat = rl.rho_hat;
    let (mut rho_sum, mut mass, mut lag_sum) = (0.0, 0.0, 0.0);
    for t in l.support() {
        let bt = l.block(t).clone();
        let n = mat_norm(&bt, norm)?;
        let one = range(&LinearTemporalMap::single(len, l.lag(t), bt.scaled(1.0 / n))?, norm)?;
        rho_sum += n * one.rho;
        mass += n;
        lag_sum += n * one.rho_hat.value().unwrap_or(f64::NAN);
    }
    res[6] = residual(rl.rho, rho_sum);
    res[7] = hat_residual(rl_hat, lag_sum / mass);

    for r in &mut res {
        if r.is_nan() {
            *r = f64::INFINITY;
        }
    }
    Ok(res)
}

/// Runs the suite against [`linear_map_range`].
pub fn axiom_suite(rng: &mut Rng, trials: usize, norm: NormKind) -> Result<AxiomReport> {
    axiom_suite_with(rng, trials, norm, &linear_map_range)
}

/// Runs the suite against an arbitrary range function.
pub fn axiom_suite_with(rng: &mut Rng, trials: usize, norm: NormKind, range: &RangeFn) -> Result<AxiomReport> {
    if trials == 0 {
        return Err(Error::Spec("axiom suite needs at least one trial".into()));
    }
    let seed = rng.seed();
    let streams = rng.split_n(trials);
    let results: Vec<[f64; 8]> = streams
        .into_par_iter()
        .map(|mut r| trial(&mut r, norm, range))
        .collect::<Result<_>>()?;
    let checks: Vec<AxiomCheck> = AXIOM_NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let max_residual = results.iter().map(|r| r[i]).fold(0.0, f64::max);
            AxiomCheck {
                name: name.to_string(),
                trials,
                max_residual,
                passed: max_residual < AXIOM_TOLERANCE,
            }
        })
        .collect();
    Ok(AxiomReport {
        schema_version: AXIOM_SCHEMA_VERSION,
        seed,
        trials,
        norm,
        tolerance: AXIOM_TOLERANCE,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: String,
    pub cases: usize,
    pub max_residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl OracleCheck {
    fn new(name: &str, cases: usize, max_residual: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            cases,
            max_residual,
            tolerance,
            passed: max_residual < tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub schema_version: u32,
    pub seed: u64,
    pub checks: Vec<OracleCheck>,
    pub passed: bool,
}

impl OracleReport {
    pub fn worst(&self) -> Option<&OracleCheck> {
        self.checks
            .iter()
            .max_by(|a, b| (a.max_residual / a.tolerance).total_cmp(&(b.max_residual / b.tolerance)))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

pub const PIPELINE_TOLERANCE: f64 = 1e-9;
pub const MAP_MODEL_TOLERANCE: f64 = 1e-10;
pub const COPYK_OFFSETS: [usize; 4] = [1, 3, 5, 10];

fn random_rollouts(rng: &mut Rng, count: usize, len: usize, d: usize) -> Result<Vec<ObservationSequence>> {
    (0..count)
        .map(|_| {
            let data = (0..len * d).map(|_| rng.gaussian()).collect();
            ObservationSequence::new(Matrix::from_vec(len, d, data)?)
        })
        .collect()
}

/// Shift-copy models analyzed end to end in final-output mode, for both
/// norms and both aggregations: residual `|rho_hat - k|`.
pub fn copyk_exactness(ks: &[usize], len: usize, rng: &mut Rng) -> Result<OracleCheck> {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for &k in ks {
        let expected = copyk_oracle(k, len)?;
        let readout = random_block(rng, 2, 3);
        let model = SequenceModel::shift_copy(k, &readout)?;
        let xs = random_rollouts(rng, 4, len, 3)?;
        for norm in [NormKind::Frobenius, NormKind::Spectral] {
            for aggregation in [Aggregation::Mean, Aggregation::Max] {
                let cfg = TrConfig {
                    norm,
                    aggregation,
                    mode: JacobianMode::FinalOutput,
                    window: len,
                };
                let report = analyze(&model, &xs, &cfg)?;
                let got = report.rho_hat().value().unwrap_or(f64::INFINITY);
                worst = worst.max((got - expected).abs());
                for r in &report.rollouts {
                    worst = worst.max((r.rho_hat.unwrap_or(f64::INFINITY) - expected).abs());
                }
                cases += 1;
            }
        }
    }
    Ok(OracleCheck::new("copy-k exactness", cases, worst, PIPELINE_TOLERANCE))
}

/// Autodiff final-output weights against `‖Q A^(T-1-t) C‖` on random
/// recurrences (`p <= 6`). With `fault`, one autodiff weight is scaled by
/// 1.5 before comparison.
pub fn recurrence_crosscheck(rng: &mut Rng, specs: usize, len: usize, fault: bool) -> Result<OracleCheck> {
    let mut worst = 0.0f64;
    for i in 0..specs {
        let p = 1 + rng.below(6);
        let d = 1 + rng.below(4);
        let c = 1 + rng.below(4);
        let spec = RecurrenceSpec::random(rng, p, d, c, len)?;
        let model = spec.to_model()?;
        let x = random_rollouts(rng, 1, len, d)?.remove(0);
        for norm in [NormKind::Frobenius, NormKind::Spectral] {
            let cfg = TrConfig {
                norm,
                aggregation: Aggregation::Mean,
                mode: JacobianMode::FinalOutput,
                window: len,
            };
            let mut auto = crate::metric::sequence_profile(&model, &x, &cfg)?.weights;
            if fault && i == 0 {
                let last = auto.len() - 1;
                auto[last] *= 1.5;
            }
            let closed = recurrence_profile(&spec, norm)?;
            for (a, b) in auto.iter().zip(&closed.weights) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(OracleCheck::new(
        "linear recurrence closed form",
        specs,
        worst,
        PIPELINE_TOLERANCE,
    ))
}

/// Random temporal maps wrapped as shift-register models: generic analysis
/// against [`linear_map_range`].
pub fn map_model_crosscheck(rng: &mut Rng, maps: usize, len: usize) -> Result<OracleCheck> {
    let mut worst = 0.0f64;
    for _ in 0..maps {
        let c = 1 + rng.below(3);
        let d = 1 + rng.below(3);
        let map = random_map(rng, len, c, d);
        let model = map.to_model()?;
        let x = random_rollouts(rng, 1, len, d)?.remove(0);
        let cfg = TrConfig {
            mode: JacobianMode::FinalOutput,
            window: len,
            ..TrConfig::default()
        };
        let via_model = temporal_range(&crate::metric::sequence_profile(&model, &x, &cfg)?);
        let direct = linear_map_range(&map, NormKind::Frobenius)?;
        worst = worst.max(residual(via_model.rho, direct.rho));
        let (a, b) = (via_model.rho_hat.value(), direct.rho_hat.value());
        worst = worst.max(match (a, b) {
            (Some(a), Some(b)) => (a - b).abs(),
            (None, None) => 0.0,
            _ => f64::INFINITY,
        });
    }
    Ok(OracleCheck::new(
        "temporal map as model",
        maps,
        worst,
        MAP_MODEL_TOLERANCE,
    ))
}

/// All pipeline cross-checks.
pub fn oracle_suite(rng: &mut Rng, specs: usize, len: usize, fault: bool) -> Result<OracleReport> {
    if specs == 0 {
        return Err(Error::Spec("oracle suite needs at least one spec".into()));
    }
    let seed = rng.seed();
    let checks = vec![
        copyk_exactness(&COPYK_OFFSETS, 32, &mut rng.split())?,
        recurrence_crosscheck(&mut rng.split(), specs, len, fault)?,
        map_model_crosscheck(&mut rng.split(), specs, len)?,
    ];
    Ok(OracleReport {
        schema_version: AXIOM_SCHEMA_VERSION,
        seed,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

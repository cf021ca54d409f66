//! Influence weights and the temporal range.
//!
//! For a window of length `T` with 0-based positions `t`, the lag is
//! `T - 1 - t`. Weights aggregate the norms of the Jacobian blocks with
//! origin `t`:
//!
//! * multi-output, mean: `w_t = mean_{s>t} ‖J_{s,t}‖` (and `w_{T-1} = 0`)
//! * multi-output, max: `w_t = max_{s>t} ‖J_{s,t}‖`
//! * final-output: `w_t = ‖J_{T-1,t}‖` for every `t`, lag 0 included
//!
//! `rho = Σ w_t lag(t)` and `rho_hat = rho / Σ w_t`. When all weights vanish
//! the normalized range is [`NormalizedRange::Degenerate`].

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grad::{input_jacobians, JacobianBlocks, JacobianMode};
use crate::linalg::{mat_norm, NormKind};
use crate::model::{ObservationSequence, SequenceModel};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const PROFILE_CSV_VERSION: u32 = 1;
pub const DEFAULT_WINDOW: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Mean => "mean",
            Aggregation::Max => "max",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrConfig {
    pub norm: NormKind,
    pub aggregation: Aggregation,
    pub mode: JacobianMode,
    pub window: usize,
}

impl Default for TrConfig {
    fn default() -> Self {
        Self {
            norm: NormKind::Frobenius,
            aggregation: Aggregation::Mean,
            mode: JacobianMode::MultiOutput,
            window: DEFAULT_WINDOW,
        }
    }
}

impl TrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::Config(format!("window must be >= 2, got {}", self.window)));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        fingerprint_of(self)
    }
}

/// Hex SHA-256 of a value's compact JSON encoding.
pub fn fingerprint_of<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("serializable");
    hex_digest(&json)
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceProfile {
    pub weights: Vec<f64>,
    pub mode: JacobianMode,
    pub aggregation: Aggregation,
}

impl InfluenceProfile {
    pub fn new(weights: Vec<f64>, mode: JacobianMode, aggregation: Aggregation) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Spec("influence weights must be finite and non-negative".into()));
        }
        if mode == JacobianMode::MultiOutput && weights.last().is_some_and(|w| *w != 0.0) {
            return Err(Error::Spec("multi-output profiles have no lag-0 weight".into()));
        }
        Ok(Self {
            weights,
            mode,
            aggregation,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn lag(&self, t: usize) -> usize {
        self.weights.len() - 1 - t
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Position with the largest weight (first on ties).
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (t, w) in self.weights.iter().enumerate() {
            if best.is_none_or(|(_, b)| *w > b) {
                best = Some((t, *w));
            }
        }
        best.map(|(t, _)| t)
    }

    pub fn scaled(&self, lambda: f64) -> Self {
        Self {
            weights: self.weights.iter().map(|w| w * lambda).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormalizedRange {
    Value(f64),
    /// Every influence weight is zero.
    Degenerate,
}

impl NormalizedRange {
    pub fn value(self) -> Option<f64> {
        match self {
            NormalizedRange::Value(v) => Some(v),
            NormalizedRange::Degenerate => None,
        }
    }

    pub fn is_degenerate(self) -> bool {
        matches!(self, NormalizedRange::Degenerate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeValue {
    pub rho: f64,
    pub rho_hat: NormalizedRange,
}

pub fn influence_weights(blocks: &JacobianBlocks, cfg: &TrConfig) -> Result<InfluenceProfile> {
    if blocks.mode() != cfg.mode {
        return Err(Error::Config(format!(
            "blocks were built in {} mode, config asks for {}",
            blocks.mode().as_str(),
            cfg.mode.as_str()
        )));
    }
    if blocks.len() != cfg.window {
        return Err(Error::Config(format!(
            "blocks cover {} steps, config window is {}",
            blocks.len(),
            cfg.window
        )));
    }
    let len = blocks.len();
    let mut weights = vec![0.0; len];
    match cfg.mode {
        JacobianMode::MultiOutput => {
            for (t, w) in weights.iter_mut().enumerate().take(len - 1) {
                let mut acc = 0.0f64;
                for s in t + 1..len {
                    let b = blocks
                        .block(s, t)
                        .ok_or_else(|| Error::Config(format!("missing block ({s}, {t})")))?;
                    let n = mat_norm(b, cfg.norm)?;
                    acc = match cfg.aggregation {
                        Aggregation::Mean => acc + n,
                        Aggregation::Max => acc.max(n),
                    };
                }
                *w = match cfg.aggregation {
                    Aggregation::Mean => acc / (len - 1 - t) as f64,
                    Aggregation::Max => acc,
                };
            }
        }
        // a single block per origin: mean and max coincide
        JacobianMode::FinalOutput => {
            for (t, w) in weights.iter_mut().enumerate() {
                let b = blocks
                    .block(len - 1, t)
                    .ok_or_else(|| Error::Config(format!("missing block ({}, {t})", len - 1)))?;
                *w = mat_norm(b, cfg.norm)?;
            }
        }
    }
    InfluenceProfile::new(weights, cfg.mode, cfg.aggregation)
}

pub fn temporal_range(profile: &InfluenceProfile) -> RangeValue {
    let mut rho = 0.0;
    let mut total = 0.0;
    for (t, w) in profile.weights.iter().enumerate() {
        rho += w * profile.lag(t) as f64;
        total += w;
    }
    let rho_hat = if total > 0.0 {
        NormalizedRange::Value(rho / total)
    } else {
        NormalizedRange::Degenerate
    };
    RangeValue { rho, rho_hat }
}

/// Weights for a single sequence of length `cfg.window`.
pub fn sequence_profile(model: &SequenceModel, x: &ObservationSequence, cfg: &TrConfig) -> Result<InfluenceProfile> {
    cfg.validate()?;
    if x.len() != cfg.window {
        return Err(Error::Spec(format!(
            "rollout has {} steps, window is {}",
            x.len(),
            cfg.window
        )));
    }
    let blocks = input_jacobians(model, x, cfg.mode)?;
    influence_weights(&blocks, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRange {
    pub rho: f64,
    pub rho_hat: Option<f64>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledRange {
    /// Rollout-averaged weights, indexed by position.
    pub weights: Vec<f64>,
    /// Population standard deviation of each weight across rollouts.
    pub weight_std: Vec<f64>,
    pub rho: f64,
    pub rho_hat: Option<f64>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalRangeReport {
    pub schema_version: u32,
    pub config: TrConfig,
    pub fingerprint: String,
    pub rollouts: Vec<RolloutRange>,
    /// Mean normalized range over non-degenerate rollouts (headline value).
    pub rho_hat_mean: Option<f64>,
    pub rho_hat_std: Option<f64>,
    pub rho_mean: f64,
    pub rho_std: f64,
    pub degenerate_rollouts: usize,
    /// True when every rollout is degenerate.
    pub degenerate: bool,
    pub pooled: PooledRange,
}

impl TemporalRangeReport {
    pub fn rho_hat(&self) -> NormalizedRange {
        match self.rho_hat_mean {
            Some(v) => NormalizedRange::Value(v),
            None => NormalizedRange::Degenerate,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Version {
                found: report.schema_version.to_string(),
                expected: REPORT_SCHEMA_VERSION,
            });
        }
        Ok(report)
    }

    /// Per-lag profile CSV: `lag,weight,weight_std_across_rollouts`, lag ascending.
    pub fn write_profile_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["lag", "weight", "weight_std_across_rollouts"])?;
        let len = self.pooled.weights.len();
        for lag in 0..len {
            let t = len - 1 - lag;
            w.write_record([
                lag.to_string(),
                format!("{:?}", self.pooled.weights[t]),
                format!("{:?}", self.pooled.weight_std[t]),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Temporal range over a calibration set. Rollouts are processed in
/// parallel; reductions run in list order so results do not depend on
/// scheduling.
pub fn analyze(model: &SequenceModel, rollouts: &[ObservationSequence], cfg: &TrConfig) -> Result<TemporalRangeReport> {
    cfg.validate()?;
    if rollouts.is_empty() {
        return Err(Error::Spec("analysis needs at least one rollout".into()));
    }
    let profiles: Vec<InfluenceProfile> = rollouts
        .par_iter()
        .map(|x| sequence_profile(model, x, cfg))
        .collect::<Result<_>>()?;

    let ranges: Vec<RolloutRange> = profiles
        .iter()
        .map(|p| {
            let r = temporal_range(p);
            RolloutRange {
                rho: r.rho,
                rho_hat: r.rho_hat.value(),
                degenerate: r.rho_hat.is_degenerate(),
            }
        })
        .collect();

    let defined: Vec<f64> = ranges.iter().filter_map(|r| r.rho_hat).collect();
    let (rho_hat_mean, rho_hat_std) = if defined.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&defined);
        (Some(m), Some(s))
    };
    let rhos: Vec<f64> = ranges.iter().map(|r| r.rho).collect();
    let (rho_mean, rho_std) = mean_std(&rhos);

    let len = cfg.window;
    let mut weights = vec![0.0; len];
    let mut weight_std = vec![0.0; len];
    for t in 0..len {
        let column: Vec<f64> = profiles.iter().map(|p| p.weights[t]).collect();
        let (m, s) = mean_std(&column);
        weights[t] = m;
        weight_std[t] = s;
    }
    let pooled_profile = InfluenceProfile::new(weights.clone(), cfg.mode, cfg.aggregation)?;
    let pooled_range = temporal_range(&pooled_profile);
    let degenerate_rollouts = ranges.iter().filter(|r| r.degenerate).count();

    Ok(TemporalRangeReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: *cfg,
        fingerprint: cfg.fingerprint(),
        degenerate: degenerate_rollouts == ranges.len(),
        degenerate_rollouts,
        rollouts: ranges,
        rho_hat_mean,
        rho_hat_std,
        rho_mean,
        rho_std,
        pooled: PooledRange {
            weights,
            weight_std,
            rho: pooled_range.rho,
            rho_hat: pooled_range.rho_hat.value(),
            degenerate: pooled_range.rho_hat.is_degenerate(),
        },
    })
}

/// Outcome of a rescaling check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub factor: f64,
    /// Expected `rho' / rho`.
    pub expected_ratio: f64,
    pub rho: f64,
    pub rho_transformed: f64,
    pub rho_hat: Option<f64>,
    pub rho_hat_transformed: Option<f64>,
    /// `|rho'/rho − expected| / expected`.
    pub ratio_residual: f64,
    /// `|rho_hat' − rho_hat|`; zero when both are degenerate.
    pub rho_hat_residual: f64,
    pub argmax_preserved: bool,
}

impl InvarianceReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.ratio_residual < tol && self.rho_hat_residual < tol && self.argmax_preserved
    }
}

fn compare(
    factor: f64,
    expected_ratio: f64,
    base: &InfluenceProfile,
    transformed: &InfluenceProfile,
) -> InvarianceReport {
    let a = temporal_range(base);
    let b = temporal_range(transformed);
    let ratio_residual = if a.rho > 0.0 {
        (b.rho / a.rho - expected_ratio).abs() / expected_ratio
    } else {
        b.rho.abs()
    };
    let rho_hat_residual = match (a.rho_hat, b.rho_hat) {
        (NormalizedRange::Value(x), NormalizedRange::Value(y)) => (x - y).abs(),
        (NormalizedRange::Degenerate, NormalizedRange::Degenerate) => 0.0,
        _ => f64::INFINITY,
    };
    InvarianceReport {
        factor,
        expected_ratio,
        rho: a.rho,
        rho_transformed: b.rho,
        rho_hat: a.rho_hat.value(),
        rho_hat_transformed: b.rho_hat.value(),
        ratio_residual,
        rho_hat_residual,
        argmax_preserved: base.argmax() == transformed.argmax(),
    }
}

/// Scales the decoder by `alpha` and compares ranges: `rho_hat` should be
/// unchanged and `rho` multiplied by `|alpha|`.
pub fn check_output_scaling(
    model: &SequenceModel,
    x: &ObservationSequence,
    alpha: f64,
    cfg: &TrConfig,
) -> Result<InvarianceReport> {
    if alpha == 0.0 || !alpha.is_finite() {
        return Err(Error::Spec(format!(
            "output scale must be finite and non-zero, got {alpha}"
        )));
    }
    let base = sequence_profile(model, x, cfg)?;
    let scaled = sequence_profile(&model.with_output_scale(alpha), x, cfg)?;
    Ok(compare(alpha, alpha.abs(), &base, &scaled))
}

/// Changes input units `x* = beta x` with a compensated model so the map is
/// unchanged; `rho_hat` should be unchanged and `rho` divided by `|beta|`.
pub fn check_input_scaling(
    model: &SequenceModel,
    x: &ObservationSequence,
    beta: f64,
    cfg: &TrConfig,
) -> Result<InvarianceReport> {
    if beta == 0.0 || !beta.is_finite() {
        return Err(Error::Spec(format!(
            "input scale must be finite and non-zero, got {beta}"
        )));
    }
    let base = sequence_profile(model, x, cfg)?;
    let scaled = sequence_profile(&model.with_input_scale(beta), &x.scaled(beta), cfg)?;
    Ok(compare(beta, 1.0 / beta.abs(), &base, &scaled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::model::{CellKind, CellSpec, EncoderSpec, Init, ModelSpec};
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn scalar_blocks(mode: JacobianMode, vals: &[(usize, usize, f64)], len: usize) -> JacobianBlocks {
        let mut j = JacobianBlocks::new(len, 1, 1, mode);
        for s in 0..len {
            for t in 0..len {
                if j.is_key(s, t) {
                    j.insert(s, t, Matrix::zeros(1, 1)).unwrap();
                }
            }
        }
        for (s, t, v) in vals {
            j.insert(*s, *t, Matrix::diag(&[*v])).unwrap();
        }
        j
    }

    fn cfg(window: usize, aggregation: Aggregation, mode: JacobianMode) -> TrConfig {
        TrConfig {
            norm: NormKind::Frobenius,
            aggregation,
            mode,
            window,
        }
    }

    fn random_seq(rng: &mut Rng, t: usize, d: usize) -> ObservationSequence {
        let data = (0..t * d).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        ObservationSequence::new(Matrix::from_vec(t, d, data).unwrap()).unwrap()
    }

    // J_{2,1}=1, J_{3,1}=3, J_{3,2}=2 in 1-based indexing
    fn hand_blocks() -> JacobianBlocks {
        scalar_blocks(JacobianMode::MultiOutput, &[(1, 0, 1.0), (2, 0, 3.0), (2, 1, 2.0)], 3)
    }

    #[test]
    fn mean_weights_by_hand() {
        let p = influence_weights(&hand_blocks(), &cfg(3, Aggregation::Mean, JacobianMode::MultiOutput)).unwrap();
        assert_eq!(p.weights, vec![2.0, 2.0, 0.0]);
        let r = temporal_range(&p);
        assert_eq!(r.rho, 6.0);
        assert_eq!(r.rho_hat, NormalizedRange::Value(1.5));
    }

    #[test]
    fn max_weights_by_hand() {
        let p = influence_weights(&hand_blocks(), &cfg(3, Aggregation::Max, JacobianMode::MultiOutput)).unwrap();
        assert_eq!(p.weights, vec![3.0, 2.0, 0.0]);
    }

    #[test]
    fn mode_mismatch_is_config_error() {
        let err = influence_weights(&hand_blocks(), &cfg(3, Aggregation::Mean, JacobianMode::FinalOutput));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn single_weight_gives_its_lag() {
        for k in 0..6 {
            let mut w = vec![0.0; 6];
            w[5 - k] = 2.5;
            let p = InfluenceProfile::new(w, JacobianMode::FinalOutput, Aggregation::Mean).unwrap();
            assert_eq!(temporal_range(&p).rho_hat, NormalizedRange::Value(k as f64));
        }
    }

    #[test]
    fn zero_weights_are_degenerate() {
        let p = InfluenceProfile::new(vec![0.0; 4], JacobianMode::MultiOutput, Aggregation::Mean).unwrap();
        let r = temporal_range(&p);
        assert_eq!(r.rho, 0.0);
        assert!(r.rho_hat.is_degenerate());
    }

    #[test]
    fn shift_copy_final_weights() {
        let u = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 0.0]]).unwrap();
        let m = SequenceModel::shift_copy(4, &u).unwrap();
        let x = random_seq(&mut Rng::new(1), 10, 2);
        let c = cfg(10, Aggregation::Mean, JacobianMode::FinalOutput);
        let p = sequence_profile(&m, &x, &c).unwrap();
        for t in 0..10 {
            let expect = if t == 10 - 1 - 4 { 3.0 } else { 0.0 };
            assert!((p.weights[t] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn analyze_shift_copy() {
        let m = SequenceModel::shift_copy(5, &Matrix::identity(3)).unwrap();
        let mut rng = Rng::new(2);
        let xs: Vec<_> = (0..4).map(|_| random_seq(&mut rng, 16, 3)).collect();
        let r = analyze(&m, &xs, &cfg(16, Aggregation::Mean, JacobianMode::FinalOutput)).unwrap();
        assert_eq!(r.rho_hat_mean, Some(5.0));
        assert_eq!(r.rho_hat_std, Some(0.0));
        assert_eq!(r.pooled.rho_hat, Some(5.0));
    }

    #[test]
    fn analyze_memoryless_is_degenerate() {
        let mut rng = Rng::new(3);
        let m = SequenceModel::memoryless(2, 4, 2, &mut rng).unwrap();
        let xs: Vec<_> = (0..3).map(|_| random_seq(&mut rng, 8, 2)).collect();
        let r = analyze(&m, &xs, &cfg(8, Aggregation::Mean, JacobianMode::MultiOutput)).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.degenerate_rollouts, 3);
        assert!(r.rho_hat().is_degenerate());
        assert!(r.pooled.degenerate);
    }

    #[test]
    fn analyze_linear_rollouts_agree() {
        let mut rng = Rng::new(4);
        let spec = ModelSpec {
            cell: CellSpec::new(CellKind::LinearRec, 2, 3),
            encoder: EncoderSpec::Identity,
            output_dim: 2,
        };
        let m = SequenceModel::init(&spec, Init::Glorot, &mut rng).unwrap();
        let xs: Vec<_> = (0..5).map(|_| random_seq(&mut rng, 8, 2)).collect();
        let r = analyze(&m, &xs, &cfg(8, Aggregation::Mean, JacobianMode::MultiOutput)).unwrap();
        let first = r.rollouts[0].rho_hat.unwrap();
        assert!(r.rollouts.iter().all(|x| x.rho_hat == Some(first)));
        assert!((r.pooled.rho_hat.unwrap() - first).abs() < 1e-12);
    }

    #[test]
    fn analyze_rejects_empty_and_wrong_length() {
        let m = SequenceModel::shift_copy(1, &Matrix::identity(1)).unwrap();
        let c = cfg(4, Aggregation::Mean, JacobianMode::MultiOutput);
        assert!(matches!(analyze(&m, &[], &c), Err(Error::Spec(_))));
        let x = random_seq(&mut Rng::new(0), 5, 1);
        assert!(analyze(&m, &[x], &c).is_err());
    }

    #[test]
    fn output_scaling_checks() {
        let mut rng = Rng::new(5);
        let spec = ModelSpec {
            cell: CellSpec::new(CellKind::Gru, 3, 5),
            encoder: EncoderSpec::Tanh { width: 4 },
            output_dim: 2,
        };
        let m = SequenceModel::init(&spec, Init::Glorot, &mut rng).unwrap();
        let x = random_seq(&mut rng, 10, 3);
        let c = cfg(10, Aggregation::Mean, JacobianMode::MultiOutput);
        let id = check_output_scaling(&m, &x, 1.0, &c).unwrap();
        assert_eq!(id.ratio_residual, 0.0);
        assert_eq!(id.rho_hat_residual, 0.0);
        let r = check_output_scaling(&m, &x, 3.7, &c).unwrap();
        assert!(r.passes(1e-9), "{r:?}");
        let neg = check_output_scaling(&m, &x, -2.0, &c).unwrap();
        assert!((neg.rho_transformed / neg.rho - 2.0).abs() < 1e-9);
        assert!(matches!(check_output_scaling(&m, &x, 0.0, &c), Err(Error::Spec(_))));
    }

    #[test]
    fn input_scaling_checks() {
        let mut rng = Rng::new(6);
        let spec = ModelSpec {
            cell: CellSpec::new(CellKind::LinearRec, 2, 3),
            encoder: EncoderSpec::Identity,
            output_dim: 2,
        };
        let m = SequenceModel::init(&spec, Init::Glorot, &mut rng).unwrap();
        let x = random_seq(&mut rng, 8, 2);
        let c = cfg(8, Aggregation::Mean, JacobianMode::MultiOutput);
        let r = check_input_scaling(&m, &x, 0.25, &c).unwrap();
        assert!((r.rho_transformed / r.rho - 4.0).abs() < 1e-9);
        assert!(r.passes(1e-9));
        assert_eq!(check_input_scaling(&m, &x, 1.0, &c).unwrap().ratio_residual, 0.0);
        assert!(check_input_scaling(&m, &x, 0.0, &c).is_err());

        let copy = SequenceModel::shift_copy(3, &Matrix::identity(2)).unwrap();
        let cf = cfg(8, Aggregation::Mean, JacobianMode::FinalOutput);
        let r = check_input_scaling(&copy, &x, 8.0, &cf).unwrap();
        assert_eq!(r.rho_hat_transformed, Some(3.0));
    }

    #[test]
    fn csv_profile_layout() {
        let m = SequenceModel::shift_copy(2, &Matrix::identity(1)).unwrap();
        let xs = vec![random_seq(&mut Rng::new(7), 4, 1)];
        let r = analyze(&m, &xs, &cfg(4, Aggregation::Mean, JacobianMode::FinalOutput)).unwrap();
        let mut buf = Vec::new();
        r.write_profile_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "lag,weight,weight_std_across_rollouts\n0,0.0,0.0\n1,0.0,0.0\n2,1.0,0.0\n3,0.0,0.0\n"
        );
        let back = TemporalRangeReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn fingerprints_distinguish_configs() {
        let a = cfg(32, Aggregation::Mean, JacobianMode::MultiOutput);
        let b = cfg(32, Aggregation::Max, JacobianMode::MultiOutput);
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint(), a.fingerprint());
    }

    proptest! {
        #[test]
        fn rho_hat_within_window(ws in proptest::collection::vec(0.0f64..10.0, 2..40)) {
            let p = InfluenceProfile::new(ws.clone(), JacobianMode::FinalOutput, Aggregation::Mean).unwrap();
            if let NormalizedRange::Value(v) = temporal_range(&p).rho_hat {
                prop_assert!(v >= 0.0 && v <= (ws.len() - 1) as f64 + 1e-12);
            }
        }

        #[test]
        fn rho_hat_invariant_to_positive_scaling(
            ws in proptest::collection::vec(0.0f64..10.0, 2..40),
            lambda in 1e-3f64..1e3,
        ) {
            let p = InfluenceProfile::new(ws, JacobianMode::FinalOutput, Aggregation::Mean).unwrap();
            let a = temporal_range(&p);
            let b = temporal_range(&p.scaled(lambda));
            match (a.rho_hat, b.rho_hat) {
                (NormalizedRange::Value(x), NormalizedRange::Value(y)) => prop_assert!((x - y).abs() < 1e-9),
                (x, y) => prop_assert_eq!(x.is_degenerate(), y.is_degenerate()),
            }
            prop_assert!((b.rho - lambda * a.rho).abs() <= 1e-9 * (lambda * a.rho).max(1.0));
        }
    }
}

//! Cart-pole balancing with Euler dynamics, partial observations and a
//! linear-feedback expert.

use serde::{Deserialize, Serialize};

use super::LabeledSequence;
use crate::error::{Error, Result};
use crate::grad::Target;
use crate::linalg::dot;
use crate::model::ObservationSequence;
use crate::rng::Rng;

pub const GRAVITY: f64 = 9.8;
pub const CART_MASS: f64 = 1.0;
pub const POLE_MASS: f64 = 0.1;
pub const HALF_LENGTH: f64 = 0.5;
pub const FORCE: f64 = 10.0;
pub const TAU: f64 = 0.02;
pub const X_LIMIT: f64 = 2.4;
pub const THETA_LIMIT: f64 = 12.0 * std::f64::consts::PI / 180.0;
pub const EPISODE_CAP: usize = 500;
pub const DEFAULT_NOISE: f64 = 0.1;
pub const INIT_RANGE: f64 = 0.05;

/// Feedback gains on `(x, x_dot, theta, theta_dot)`.
pub const EXPERT_GAINS: [f64; 4] = [0.5, 1.0, 10.0, 2.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartPoleState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

impl CartPoleState {
    pub const ZERO: Self = Self {
        x: 0.0,
        x_dot: 0.0,
        theta: 0.0,
        theta_dot: 0.0,
    };

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.x_dot, self.theta, self.theta_dot]
    }

    pub fn mirrored(self) -> Self {
        Self {
            x: -self.x,
            x_dot: -self.x_dot,
            theta: -self.theta,
            theta_dot: -self.theta_dot,
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.x.abs() > X_LIMIT || self.theta.abs() > THETA_LIMIT
    }

    pub fn random(rng: &mut Rng) -> Self {
        let mut u = || rng.uniform_range(-INIT_RANGE, INIT_RANGE);
        Self {
            x: u(),
            x_dot: u(),
            theta: u(),
            theta_dot: u(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Left,
    Right,
}

impl Action {
    pub fn index(self) -> usize {
        match self {
            Action::Left => 0,
            Action::Right => 1,
        }
    }

    pub fn mirrored(self) -> Self {
        match self {
            Action::Left => Action::Right,
            Action::Right => Action::Left,
        }
    }
}

/// One Euler step. Returns the successor and whether it is terminal.
pub fn cartpole_step(state: CartPoleState, action: Action) -> (CartPoleState, bool) {
    let force = match action {
        Action::Left => -FORCE,
        Action::Right => FORCE,
    };
    let total = CART_MASS + POLE_MASS;
    let pml = POLE_MASS * HALF_LENGTH;
    let (sin, cos) = state.theta.sin_cos();
    let temp = (force + pml * state.theta_dot * state.theta_dot * sin) / total;
    let theta_acc = (GRAVITY * sin - cos * temp) / (HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / total));
    let x_acc = temp - pml * theta_acc * cos / total;
    let next = CartPoleState {
        x: state.x + TAU * state.x_dot,
        x_dot: state.x_dot + TAU * x_acc,
        theta: state.theta + TAU * state.theta_dot,
        theta_dot: state.theta_dot + TAU * theta_acc,
    };
    (next, next.is_terminal())
}

#[derive(Debug, Clone)]
pub struct CartPoleEnv {
    state: CartPoleState,
    steps: usize,
    cap: usize,
    done: bool,
}

impl CartPoleEnv {
    pub fn new(state: CartPoleState) -> Self {
        Self::with_cap(state, EPISODE_CAP)
    }

    pub fn with_cap(state: CartPoleState, cap: usize) -> Self {
        Self {
            state,
            steps: 0,
            cap,
            done: state.is_terminal() || cap == 0,
        }
    }

    pub fn state(&self) -> CartPoleState {
        self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Advances one step; the episode ends on failure or at the step cap.
    pub fn step(&mut self, action: Action) -> Result<(CartPoleState, bool)> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        let (next, failed) = cartpole_step(self.state, action);
        self.state = next;
        self.steps += 1;
        self.done = failed || self.steps >= self.cap;
        Ok((next, self.done))
    }
}

/// Which pair of state variables a stateless observation keeps hidden.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Hidden {
    #[default]
    Velocities,
    Positions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum ObsVariant {
    Full,
    Stateless { hidden: Hidden },
    NoisyStateless { hidden: Hidden, sigma: f64 },
}

impl ObsVariant {
    pub fn stateless() -> Self {
        ObsVariant::Stateless {
            hidden: Hidden::Velocities,
        }
    }

    pub fn noisy() -> Self {
        ObsVariant::NoisyStateless {
            hidden: Hidden::Velocities,
            sigma: DEFAULT_NOISE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let ObsVariant::NoisyStateless { sigma, .. } = self {
            if !(sigma.is_finite() && *sigma > 0.0) {
                return Err(Error::Spec(format!("noise sigma must be > 0, got {sigma}")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            ObsVariant::Full => 4,
            _ => 2,
        }
    }
}

pub fn observe(state: &CartPoleState, variant: &ObsVariant, rng: &mut Rng) -> Vec<f64> {
    let partial = |hidden: Hidden| match hidden {
        Hidden::Velocities => vec![state.x, state.theta],
        Hidden::Positions => vec![state.x_dot, state.theta_dot],
    };
    match *variant {
        ObsVariant::Full => state.to_array().to_vec(),
        ObsVariant::Stateless { hidden } => partial(hidden),
        ObsVariant::NoisyStateless { hidden, sigma } => partial(hidden)
            .into_iter()
            .map(|v| v + sigma * rng.gaussian())
            .collect(),
    }
}

/// `Right` iff `w · state >= 0`.
pub fn expert_action(state: &CartPoleState) -> Action {
    if dot(&EXPERT_GAINS, &state.to_array()) >= 0.0 {
        Action::Right
    } else {
        Action::Left
    }
}

/// Steps survived by the expert from `start`, up to `cap`.
pub fn expert_episode_length(start: CartPoleState, cap: usize) -> usize {
    let mut env = CartPoleEnv::with_cap(start, cap);
    while !env.is_done() {
        let a = expert_action(&env.state());
        if env.step(a).is_err() {
            break;
        }
    }
    let failed = env.state().is_terminal();
    env.steps() - usize::from(failed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImitationSpec {
    pub variant: ObsVariant,
    pub len: usize,
    /// Expert steps taken before recording starts are drawn from `0..=burn_in`.
    pub burn_in: usize,
}

impl ImitationSpec {
    pub fn new(variant: ObsVariant, len: usize) -> Self {
        Self {
            variant,
            len,
            burn_in: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        if self.len < 2 || self.len + self.burn_in > EPISODE_CAP {
            return Err(Error::Spec(format!(
                "imitation windows need 2 <= T and T + burn_in <= {EPISODE_CAP}, got T={} burn_in={}",
                self.len, self.burn_in
            )));
        }
        Ok(())
    }
}

/// Records a full-state expert rollout and its partial observations.
#[derive(Debug, Clone, PartialEq)]
pub struct ImitationRollout {
    pub states: Vec<CartPoleState>,
    pub sequence: LabeledSequence,
}

fn rollout(spec: &ImitationSpec, rng: &mut Rng) -> Result<ImitationRollout> {
    let mut dynamics = rng.split();
    let mut noise = rng.split();
    loop {
        let mut env = CartPoleEnv::new(CartPoleState::random(&mut dynamics));
        let burn = dynamics.below(spec.burn_in + 1);
        let mut states = Vec::with_capacity(spec.len);
        let mut rows = Vec::with_capacity(spec.len);
        let mut targets = Vec::with_capacity(spec.len);
        let mut ok = true;
        for step in 0..burn + spec.len {
            let s = env.state();
            let a = expert_action(&s);
            if step >= burn {
                states.push(s);
                rows.push(observe(&s, &spec.variant, &mut noise));
                targets.push(Some(Target::Class(a.index())));
            }
            if step + 1 < burn + spec.len && env.step(a)?.1 && env.state().is_terminal() {
                ok = false;
                break;
            }
        }
        if ok {
            let x = ObservationSequence::from_rows(&rows)?;
            return Ok(ImitationRollout {
                states,
                sequence: LabeledSequence::new(x, targets)?,
            });
        }
    }
}

pub fn gen_imitation_rollouts(spec: &ImitationSpec, n: usize, rng: &mut Rng) -> Result<Vec<ImitationRollout>> {
    spec.validate()?;
    (0..n).map(|_| rollout(spec, rng)).collect()
}

pub fn gen_imitation(spec: &ImitationSpec, n: usize, rng: &mut Rng) -> Result<Vec<LabeledSequence>> {
    Ok(gen_imitation_rollouts(spec, n, rng)?
        .into_iter()
        .map(|r| r.sequence)
        .collect())
}

/// Two recorded steps whose current observations nearly coincide while the
/// expert actions differ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AliasedPair {
    pub first: (usize, usize),
    pub second: (usize, usize),
    pub distance: f64,
    pub first_action: usize,
    pub second_action: usize,
}

/// Closest pair of `(sequence, step)` observations with different class
/// targets, if any lies within `tol` (Euclidean).
pub fn find_aliased_pair(data: &[LabeledSequence], tol: f64) -> Option<AliasedPair> {
    let mut points: Vec<(&[f64], usize, (usize, usize))> = Vec::new();
    for (i, seq) in data.iter().enumerate() {
        for s in 0..seq.x.len() {
            if let Some(Target::Class(c)) = seq.targets[s] {
                points.push((seq.x.step(s), c, (i, s)));
            }
        }
    }
    points.sort_by(|a, b| a.0[0].total_cmp(&b.0[0]));
    let mut best: Option<AliasedPair> = None;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let dx = points[j].0[0] - points[i].0[0];
            let limit = best.as_ref().map_or(tol, |b| b.distance);
            if dx > limit {
                break;
            }
            if points[i].1 == points[j].1 {
                continue;
            }
            let d = points[i]
                .0
                .iter()
                .zip(points[j].0)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if d <= limit {
                let (a, b) = if points[i].2 < points[j].2 { (i, j) } else { (j, i) };
                best = Some(AliasedPair {
                    first: points[a].2,
                    second: points[b].2,
                    distance: d,
                    first_action: points[a].1,
                    second_action: points[b].1,
                });
            }
        }
    }
    best
}

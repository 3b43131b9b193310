//! Courteous model predictive control: finite-horizon optimal control over
//! the discretized bicycle model with the perceived risk both as a weighted
//! objective term and as a hard per-step constraint.
//!
//! The transcription is direct single shooting over the N-step horizon with
//! decision variables `(accel_t, steer_t)`. Input box bounds are enforced by
//! projection; risk, state-box and steering-rate constraints by an augmented
//! Lagrangian outer loop around a projected quasi-Newton (L-BFGS) inner
//! minimizer. Gradients flow analytically through the rollout, with a
//! finite-difference fallback.

use serde::{Deserialize, Serialize};

use crate::risk::{
    cvar_tail_multiplier, pairwise_risk_grad_ego, severity_moments, EgoNoise, NoisyAgentState,
    RiskParams,
};
use crate::vehicle::{
    bicycle_step, slip_angle, slip_angle_deriv, ControlInput, EgoState, VehicleGeometry,
};

/// Stage/terminal cost weights. The terminal cost uses the same state terms
/// without the input terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostWeights {
    /// Speed tracking weight.
    pub w_v: f64,
    /// Nearest-lane-center attraction weight.
    pub w_y: f64,
    /// Acceleration effort weight.
    pub w_a: f64,
    /// Steering effort weight.
    pub w_steer: f64,
    /// Steering-change weight.
    pub w_dsteer: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            w_v: 1.0,
            w_y: 0.5,
            w_a: 0.1,
            w_steer: 1.0,
            w_dsteer: 2.0,
        }
    }
}

/// Box bounds on the rolled-out states (x is unbounded on a highway).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StateBounds {
    pub y: (f64, f64),
    pub v: (f64, f64),
    pub phi: (f64, f64),
}

impl Default for StateBounds {
    fn default() -> Self {
        Self {
            y: (0.0, 12.0),
            v: (0.0, 25.0),
            phi: (-0.5, 0.5),
        }
    }
}

/// Box bounds on the control inputs; steering is symmetric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputBounds {
    pub accel: (f64, f64),
    pub steer_max: f64,
}

impl Default for InputBounds {
    fn default() -> Self {
        Self {
            accel: (-6.0, 3.0),
            steer_max: 0.2,
        }
    }
}

/// Gradient computation mode for the inner minimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradientMode {
    Analytic,
    FiniteDifference,
}

/// Solver iteration limits and tolerances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_outer: usize,
    pub max_inner: usize,
    /// Projected-gradient stationarity tolerance.
    pub stat_tol: f64,
    /// Violation tolerance for state-box and rate constraints.
    pub bound_tol: f64,
    pub init_penalty: f64,
    pub gradient: GradientMode,
    /// Try lane-biased and braking initial guesses in addition to zeros.
    pub multi_start: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_outer: 12,
            max_inner: 100,
            stat_tol: 1e-5,
            bound_tol: 1e-5,
            init_penalty: 10.0,
            gradient: GradientMode::Analytic,
            multi_start: true,
        }
    }
}

/// Courteous MPC configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    /// Prediction horizon N (steps).
    pub horizon: usize,
    /// Step duration (s).
    pub dt: f64,
    /// Courtesy weight on the predicted risk in the objective.
    pub p_s: f64,
    /// Target cruise speed (m/s).
    pub v_ref: f64,
    /// Lane center lateral positions (m).
    pub lane_centers: Vec<f64>,
    pub weights: CostWeights,
    pub state_bounds: StateBounds,
    pub input_bounds: InputBounds,
    /// Steering-rate bound (rad per step).
    pub steer_rate_max: f64,
    /// Tolerance on the hard risk constraint.
    pub risk_tol: f64,
    /// Ego vehicle geometry used by the rollout dynamics.
    pub geometry: VehicleGeometry,
    /// Observation noise attributed to the predicted ego states.
    pub ego_noise: EgoNoise,
    /// Linear growth rate of neighbor position covariance during
    /// prediction (m^2 per second); zero holds covariances constant.
    pub cov_growth: f64,
    pub solver: SolverConfig,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            dt: 0.1,
            p_s: 0.25,
            v_ref: 15.0,
            lane_centers: vec![2.0, 6.0, 10.0],
            weights: CostWeights::default(),
            state_bounds: StateBounds::default(),
            input_bounds: InputBounds::default(),
            steer_rate_max: 0.1,
            risk_tol: 1e-6,
            geometry: VehicleGeometry::default(),
            ego_noise: EgoNoise::default(),
            cov_growth: 0.0,
            solver: SolverConfig::default(),
        }
    }
}

impl MpcConfig {
    /// The risk-aware variant keeps the hard risk constraint but removes
    /// the courtesy term from the objective.
    pub fn risk_aware(mut self) -> Self {
        self.p_s = 0.0;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

/// Result of one MPC solve.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    pub controls: Vec<ControlInput>,
    /// Rolled-out states, `predicted_states[0]` is the query state.
    pub predicted_states: Vec<EgoState>,
    /// Aggregated predicted risk per step; `None` when no neighbor is
    /// sensed.
    pub predicted_risks: Vec<Option<f64>>,
    /// Task cost plus the weighted risk term at the returned controls.
    pub objective: f64,
    pub status: SolveStatus,
}

/// Warm-start and cross-cycle context for a solve.
#[derive(Debug, Clone, Default)]
pub struct SolveOptions {
    /// Initial guess, typically the previous solution shifted one step.
    pub warm_start: Option<Vec<ControlInput>>,
    /// Control applied in the previous cycle; anchors the steering-rate
    /// bound and steering-change cost at t = 0.
    pub prev_input: Option<ControlInput>,
}

/// Constant-velocity extrapolation of the observed neighbors `t` steps
/// ahead. Covariances are held constant except for an optional linear
/// growth of the position covariance.
pub fn predict_neighbors(
    others: &[NoisyAgentState],
    t: usize,
    dt: f64,
    cov_growth: f64,
) -> Vec<NoisyAgentState> {
    let horizon_time = t as f64 * dt;
    others
        .iter()
        .map(|o| {
            let mut n = *o;
            n.pos_mean.0 += o.vel_mean.0 * horizon_time;
            n.pos_mean.1 += o.vel_mean.1 * horizon_time;
            n.pos_cov[0] += cov_growth * horizon_time;
            n.pos_cov[1] += cov_growth * horizon_time;
            n
        })
        .collect()
}

/// Distance from `y` to the nearest lane center; ties go to the
/// lower-index lane.
fn nearest_lane_distance(y: f64, centers: &[f64]) -> f64 {
    let mut best = f64::INFINITY;
    for c in centers {
        let d = y - c;
        if d.abs() < best.abs() {
            best = d;
        }
    }
    if best.is_infinite() {
        0.0
    } else {
        best
    }
}

/// Quadratic stage cost around the cruise task.
pub fn stage_cost(s: &EgoState, u: &ControlInput, u_prev: &ControlInput, cfg: &MpcConfig) -> f64 {
    let w = &cfg.weights;
    let dv = s.v - cfg.v_ref;
    let dy = nearest_lane_distance(s.y, &cfg.lane_centers);
    let dsteer = u.steer - u_prev.steer;
    w.w_v * dv * dv
        + w.w_y * dy * dy
        + w.w_a * u.accel * u.accel
        + w.w_steer * u.steer * u.steer
        + w.w_dsteer * dsteer * dsteer
}

fn terminal_cost(s: &EgoState, cfg: &MpcConfig) -> f64 {
    let w = &cfg.weights;
    let dv = s.v - cfg.v_ref;
    let dy = nearest_lane_distance(s.y, &cfg.lane_centers);
    w.w_v * dv * dv + w.w_y * dy * dy
}

/// Ego observation used for risk evaluation along the horizon: the rolled
/// out state with the configured ego noise and a velocity vector from speed
/// and heading.
fn ego_observation(s: &EgoState, noise: &EgoNoise) -> NoisyAgentState {
    NoisyAgentState::new(s.position(), s.velocity(), noise.pos_cov, noise.vel_cov)
}

/// Per-solve context: predicted neighbors and per-pair CVaR multipliers.
struct Prediction {
    /// `[t][neighbor]` for t = 0..=N.
    neighbors: Vec<Vec<NoisyAgentState>>,
    params: Vec<RiskParams>,
    multipliers: Vec<f64>,
}

impl Prediction {
    fn new(others: &[NoisyAgentState], per_pair: &[RiskParams], cfg: &MpcConfig) -> Self {
        assert_eq!(
            others.len(),
            per_pair.len(),
            "one RiskParams per neighbor required"
        );
        let neighbors = (0..=cfg.horizon)
            .map(|t| predict_neighbors(others, t, cfg.dt, cfg.cov_growth))
            .collect();
        let multipliers = per_pair
            .iter()
            .map(|p| cvar_tail_multiplier(p.alpha).expect("validated alpha"))
            .collect();
        Self {
            neighbors,
            params: per_pair.to_vec(),
            multipliers,
        }
    }

    /// Aggregated risk at step t, with the index of the dominating
    /// neighbor.
    fn risk_at(&self, t: usize, ego: &NoisyAgentState) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (idx, (nbr, p)) in self.neighbors[t].iter().zip(self.params.iter()).enumerate() {
            let m = severity_moments(ego, nbr, p);
            let r = m.mean + m.variance.max(0.0).sqrt() * self.multipliers[idx];
            if best.map_or(true, |(b, _)| r > b) {
                best = Some((r, idx));
            }
        }
        best
    }

    /// Risk gradient with respect to the ego state `(x, y, v, phi)` for the
    /// dominating neighbor at step t.
    fn risk_grad_state(
        &self,
        t: usize,
        ego: &NoisyAgentState,
        state: &EgoState,
        nbr_idx: usize,
    ) -> [f64; 4] {
        let (_, g) = pairwise_risk_grad_ego(
            ego,
            &self.neighbors[t][nbr_idx],
            &self.params[nbr_idx],
            self.multipliers[nbr_idx],
        );
        let (sin_phi, cos_phi) = state.phi.sin_cos();
        [
            g[0],
            g[1],
            g[2] * cos_phi + g[3] * sin_phi,
            g[2] * (-state.v * sin_phi) + g[3] * (state.v * cos_phi),
        ]
    }
}

struct Rollout {
    states: Vec<EgoState>,
    /// `(risk, argmax neighbor)` per step 0..=N; `None` without neighbors.
    risks: Vec<Option<(f64, usize)>>,
}

fn rollout(s0: &EgoState, controls: &[ControlInput], cfg: &MpcConfig, pred: &Prediction) -> Rollout {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(*s0);
    for u in controls {
        let next = bicycle_step(states.last().unwrap(), u, &cfg.geometry, cfg.dt);
        states.push(next);
    }
    let risks = states
        .iter()
        .enumerate()
        .map(|(t, s)| pred.risk_at(t, &ego_observation(s, &cfg.ego_noise)))
        .collect();
    Rollout { states, risks }
}

/// Full objective of the courteous controller: task cost plus
/// `p_s * sum_t risk_t`, with absent risks contributing zero.
pub fn objective(
    controls: &[ControlInput],
    s0: &EgoState,
    others: &[NoisyAgentState],
    per_pair: &[RiskParams],
    cfg: &MpcConfig,
    prev_input: Option<ControlInput>,
) -> f64 {
    debug_assert_eq!(controls.len(), cfg.horizon);
    let pred = Prediction::new(others, per_pair, cfg);
    let roll = rollout(s0, controls, cfg, &pred);
    objective_from_rollout(controls, &roll, cfg, prev_input)
}

fn objective_from_rollout(
    controls: &[ControlInput],
    roll: &Rollout,
    cfg: &MpcConfig,
    prev_input: Option<ControlInput>,
) -> f64 {
    let mut total = 0.0;
    let mut u_prev = prev_input.unwrap_or_default();
    for (t, u) in controls.iter().enumerate() {
        total += stage_cost(&roll.states[t], u, &u_prev, cfg);
        u_prev = *u;
    }
    total += terminal_cost(roll.states.last().unwrap(), cfg);
    for r in &roll.risks {
        if let Some((value, _)) = r {
            total += cfg.p_s * value;
        }
    }
    total
}

// ---------------------------------------------------------------------------
// Augmented-Lagrangian solver
// ---------------------------------------------------------------------------

/// Inequality-constraint bookkeeping: risk per step, state boxes, steering
/// rate. All constraints are of the form g <= 0.
struct ConstraintLayout {
    n_risk: usize,
    /// (t, component) pairs for state bounds, t in 1..N.
    state_terms: Vec<(usize, StateBoundKind)>,
    /// Steps with an active rate constraint (t = 0 needs a previous input).
    rate_steps: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum StateBoundKind {
    YHigh,
    YLow,
    VHigh,
    VLow,
    PhiHigh,
    PhiLow,
}

impl ConstraintLayout {
    fn new(cfg: &MpcConfig, has_prev: bool, has_neighbors: bool) -> Self {
        let n = cfg.horizon;
        let mut state_terms = Vec::new();
        for t in 1..n {
            use StateBoundKind::*;
            for kind in [YHigh, YLow, VHigh, VLow, PhiHigh, PhiLow] {
                state_terms.push((t, kind));
            }
        }
        let rate_steps = (if has_prev { 0 } else { 1 }..n).collect();
        Self {
            n_risk: if has_neighbors { n } else { 0 },
            state_terms,
            rate_steps,
        }
    }

    fn len(&self) -> usize {
        self.n_risk + self.state_terms.len() + 2 * self.rate_steps.len()
    }

    /// Evaluate all constraint values g (g <= 0 feasible).
    fn eval(
        &self,
        controls: &[ControlInput],
        roll: &Rollout,
        cfg: &MpcConfig,
        prev_input: Option<ControlInput>,
        out: &mut Vec<f64>,
    ) {
        out.clear();
        for t in 0..self.n_risk {
            // The solver targets R <= 0; feasibility acceptance allows the
            // configured risk tolerance on top.
            let g = match roll.risks[t] {
                Some((r, _)) => r,
                None => f64::NEG_INFINITY,
            };
            out.push(g);
        }
        let b = &cfg.state_bounds;
        for (t, kind) in &self.state_terms {
            let s = &roll.states[*t];
            use StateBoundKind::*;
            out.push(match kind {
                YHigh => s.y - b.y.1,
                YLow => b.y.0 - s.y,
                VHigh => s.v - b.v.1,
                VLow => b.v.0 - s.v,
                PhiHigh => s.phi - b.phi.1,
                PhiLow => b.phi.0 - s.phi,
            });
        }
        for t in &self.rate_steps {
            let prev = if *t == 0 {
                prev_input.unwrap().steer
            } else {
                controls[*t - 1].steer
            };
            let d = controls[*t].steer - prev;
            out.push(d - cfg.steer_rate_max);
            out.push(-d - cfg.steer_rate_max);
        }
    }
}

fn al_penalty(g: f64, lambda: f64, rho: f64) -> f64 {
    if g == f64::NEG_INFINITY {
        return 0.0;
    }
    let shifted = (lambda / rho + g).max(0.0);
    0.5 * rho * shifted * shifted - lambda * lambda / (2.0 * rho)
}

fn al_penalty_slope(g: f64, lambda: f64, rho: f64) -> f64 {
    if g == f64::NEG_INFINITY {
        return 0.0;
    }
    rho * (lambda / rho + g).max(0.0)
}

struct Problem<'a> {
    s0: EgoState,
    cfg: &'a MpcConfig,
    pred: Prediction,
    layout: ConstraintLayout,
    prev_input: Option<ControlInput>,
}

impl<'a> Problem<'a> {
    fn controls_of(&self, z: &[f64]) -> Vec<ControlInput> {
        z.chunks(2)
            .map(|c| ControlInput::new(c[0], c[1]))
            .collect()
    }

    fn project(&self, z: &mut [f64]) {
        let b = &self.cfg.input_bounds;
        for c in z.chunks_mut(2) {
            c[0] = c[0].clamp(b.accel.0, b.accel.1);
            c[1] = c[1].clamp(-b.steer_max, b.steer_max);
        }
    }

    /// Augmented-Lagrangian value at z, with the gradient when requested.
    /// The gradient is assembled by an adjoint sweep through the rollout.
    fn al_eval(
        &self,
        z: &[f64],
        lambda: &[f64],
        rho: f64,
        want_grad: bool,
    ) -> (f64, Option<Vec<f64>>, Rollout) {
        let cfg = self.cfg;
        let n = cfg.horizon;
        let controls = self.controls_of(z);
        let roll = rollout(&self.s0, &controls, cfg, &self.pred);
        let mut g = Vec::with_capacity(self.layout.len());
        self.layout
            .eval(&controls, &roll, cfg, self.prev_input, &mut g);

        let mut value = objective_from_rollout(&controls, &roll, cfg, self.prev_input);
        for (gi, li) in g.iter().zip(lambda.iter()) {
            value += al_penalty(*gi, *li, rho);
        }
        if !want_grad {
            return (value, None, roll);
        }

        // Multiplier on each step's risk gradient: courtesy weight plus the
        // active AL slope of the risk constraint (steps 0..N-1 only).
        let mut risk_weight = vec![cfg.p_s; n + 1];
        for t in 0..self.layout.n_risk {
            risk_weight[t] += al_penalty_slope(g[t], lambda[t], rho);
        }

        // d(cost at step t)/d(state_t) including risk and state-bound terms.
        let mut dq = vec![[0.0f64; 4]; n + 1];
        for t in 0..=n {
            let s = &roll.states[t];
            let w = &cfg.weights;
            // Stage/terminal state terms.
            dq[t][2] += 2.0 * w.w_v * (s.v - cfg.v_ref);
            dq[t][1] += 2.0 * w.w_y * nearest_lane_distance(s.y, &cfg.lane_centers);
            if let Some((_, nbr)) = roll.risks[t] {
                if risk_weight[t] != 0.0 {
                    let ego = ego_observation(s, &cfg.ego_noise);
                    let gr = self.pred.risk_grad_state(t, &ego, s, nbr);
                    for k in 0..4 {
                        dq[t][k] += risk_weight[t] * gr[k];
                    }
                }
            }
        }
        let mut offset = self.layout.n_risk;
        for (idx, (t, kind)) in self.layout.state_terms.iter().enumerate() {
            let slope = al_penalty_slope(g[offset + idx], lambda[offset + idx], rho);
            if slope == 0.0 {
                continue;
            }
            use StateBoundKind::*;
            match kind {
                YHigh => dq[*t][1] += slope,
                YLow => dq[*t][1] -= slope,
                VHigh => dq[*t][2] += slope,
                VLow => dq[*t][2] -= slope,
                PhiHigh => dq[*t][3] += slope,
                PhiLow => dq[*t][3] -= slope,
            }
        }
        offset += self.layout.state_terms.len();

        // Steering-rate AL slopes, signed per step pair (upper, lower).
        let mut rate_slope = vec![0.0f64; n];
        for (k, t) in self.layout.rate_steps.iter().enumerate() {
            let up = al_penalty_slope(g[offset + 2 * k], lambda[offset + 2 * k], rho);
            let down = al_penalty_slope(g[offset + 2 * k + 1], lambda[offset + 2 * k + 1], rho);
            rate_slope[*t] = up - down;
        }

        // Adjoint sweep. lambda_state[t] = d(total)/d(state_t) holding
        // controls fixed downstream.
        let mut grad = vec![0.0f64; 2 * n];
        let mut adj = dq[n];
        for t in (0..n).rev() {
            let s = &roll.states[t];
            let u = &controls[t];
            let beta = slip_angle(u.steer);
            let dbeta = slip_angle_deriv(u.steer);
            let heading = s.phi + beta;
            let (sin_h, cos_h) = heading.sin_cos();
            let dt = cfg.dt;
            let l = cfg.geometry.wheelbase;
            let moving = s.v + u.accel * dt > 0.0;

            // d f / d u, combined with the adjoint.
            let mut du_a = 0.0;
            if moving {
                du_a += adj[2] * dt;
            }
            let mut du_s = adj[0] * (-s.v * sin_h * dbeta * dt)
                + adj[1] * (s.v * cos_h * dbeta * dt)
                + adj[3] * (s.v / l * beta.cos() * dbeta * dt);

            // Control costs at step t.
            let w = &cfg.weights;
            // The objective anchors the steering-change cost at t = 0 to the
            // previous cycle's input, or zero at episode start.
            let prev_steer = if t == 0 {
                self.prev_input.unwrap_or_default().steer
            } else {
                controls[t - 1].steer
            };
            du_a += 2.0 * w.w_a * u.accel;
            du_s += 2.0 * w.w_steer * u.steer;
            du_s += 2.0 * w.w_dsteer * (u.steer - prev_steer);
            if t + 1 < n {
                du_s -= 2.0 * w.w_dsteer * (controls[t + 1].steer - u.steer);
                du_s -= rate_slope[t + 1];
            }
            du_s += rate_slope[t];

            grad[2 * t] = du_a;
            grad[2 * t + 1] = du_s;

            // adj = dq_t/ds + (d f/d s)^T adj_next
            let mut next = dq[t];
            next[0] += adj[0];
            next[1] += adj[1];
            next[2] += adj[0] * cos_h * dt + adj[1] * sin_h * dt + adj[3] * beta.sin() / l * dt;
            if moving {
                next[2] += adj[2];
            }
            next[3] += adj[0] * (-s.v * sin_h * dt) + adj[1] * (s.v * cos_h * dt) + adj[3];
            adj = next;
        }
        (value, Some(grad), roll)
    }

    fn al_grad_fd(&self, z: &[f64], lambda: &[f64], rho: f64) -> Vec<f64> {
        let h = 1e-7;
        let mut grad = vec![0.0; z.len()];
        let mut probe = z.to_vec();
        for i in 0..z.len() {
            probe[i] = z[i] + h;
            let (fp, _, _) = self.al_eval(&probe, lambda, rho, false);
            probe[i] = z[i] - h;
            let (fm, _, _) = self.al_eval(&probe, lambda, rho, false);
            probe[i] = z[i];
            grad[i] = (fp - fm) / (2.0 * h);
        }
        grad
    }

    fn gradient(&self, z: &[f64], lambda: &[f64], rho: f64) -> (f64, Vec<f64>) {
        match self.cfg.solver.gradient {
            GradientMode::Analytic => {
                let (v, g, _) = self.al_eval(z, lambda, rho, true);
                (v, g.unwrap())
            }
            GradientMode::FiniteDifference => {
                let (v, _, _) = self.al_eval(z, lambda, rho, false);
                (v, self.al_grad_fd(z, lambda, rho))
            }
        }
    }

    /// Projected L-BFGS descent on the AL subproblem. Returns the final
    /// point and its projected-gradient norm.
    fn minimize(&self, z0: &[f64], lambda: &[f64], rho: f64) -> (Vec<f64>, f64) {
        let m = 8;
        let mut z = z0.to_vec();
        self.project(&mut z);
        let (mut f, mut grad) = self.gradient(&z, lambda, rho);
        let mut s_hist: Vec<Vec<f64>> = Vec::new();
        let mut y_hist: Vec<Vec<f64>> = Vec::new();
        let mut pg_norm = self.projected_gradient_norm(&z, &grad);
        let mut stall_count = 0usize;

        for _ in 0..self.cfg.solver.max_inner {
            if pg_norm <= self.cfg.solver.stat_tol {
                break;
            }
            // Two-loop recursion for the quasi-Newton direction.
            let mut dir: Vec<f64> = grad.iter().map(|g| -g).collect();
            if !s_hist.is_empty() {
                let k = s_hist.len();
                let mut alpha = vec![0.0; k];
                for i in (0..k).rev() {
                    let sy: f64 = s_hist[i].iter().zip(&y_hist[i]).map(|(a, b)| a * b).sum();
                    let sg: f64 = s_hist[i].iter().zip(&dir).map(|(a, b)| a * b).sum();
                    alpha[i] = sg / sy;
                    for (d, yv) in dir.iter_mut().zip(&y_hist[i]) {
                        *d -= alpha[i] * yv;
                    }
                }
                let last = k - 1;
                let sy: f64 = s_hist[last]
                    .iter()
                    .zip(&y_hist[last])
                    .map(|(a, b)| a * b)
                    .sum();
                let yy: f64 = y_hist[last].iter().map(|v| v * v).sum();
                let scale = sy / yy.max(1e-300);
                for d in dir.iter_mut() {
                    *d *= scale;
                }
                for i in 0..k {
                    let sy: f64 = s_hist[i].iter().zip(&y_hist[i]).map(|(a, b)| a * b).sum();
                    let yg: f64 = y_hist[i].iter().zip(&dir).map(|(a, b)| a * b).sum();
                    let beta = yg / sy;
                    for (d, sv) in dir.iter_mut().zip(&s_hist[i]) {
                        *d += (alpha[i] - beta) * sv;
                    }
                }
            }

            // Backtracking line search along the projected arc. The full
            // quasi-Newton step is usually accepted, so its gradient is
            // computed optimistically and reused.
            let mut step = 1.0;
            let mut accepted = false;
            let mut z_new = z.clone();
            let mut f_new = f;
            let mut grad_new: Option<Vec<f64>> = None;
            for trial in 0..25 {
                for (zi, (z0i, di)) in z_new.iter_mut().zip(z.iter().zip(dir.iter())) {
                    *zi = z0i + step * di;
                }
                self.project(&mut z_new);
                let decrease: f64 = z_new
                    .iter()
                    .zip(z.iter())
                    .zip(grad.iter())
                    .map(|((zn, zo), g)| (zn - zo) * g)
                    .sum();
                let want_grad = trial == 0 && self.cfg.solver.gradient == GradientMode::Analytic;
                let (candidate, maybe_grad, _) = self.al_eval(&z_new, lambda, rho, want_grad);
                if candidate <= f + 1e-4 * decrease && decrease < 0.0 {
                    f_new = candidate;
                    grad_new = maybe_grad;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                // Retry with plain projected gradient before giving up.
                let mut step = 1.0 / (1.0 + pg_norm);
                let mut improved = false;
                for _ in 0..30 {
                    for (zi, (z0i, gi)) in z_new.iter_mut().zip(z.iter().zip(grad.iter())) {
                        *zi = z0i - step * gi;
                    }
                    self.project(&mut z_new);
                    let (candidate, _, _) = self.al_eval(&z_new, lambda, rho, false);
                    if candidate < f {
                        f_new = candidate;
                        improved = true;
                        break;
                    }
                    step *= 0.5;
                }
                if !improved {
                    break;
                }
                s_hist.clear();
                y_hist.clear();
                grad_new = None;
            }

            let grad_new = match grad_new {
                Some(g) => g,
                None => self.gradient(&z_new, lambda, rho).1,
            };

            // Stop once progress stalls; the stationarity test decides the
            // reported status.
            if f - f_new <= 1e-9 * (1.0 + f_new.abs()) {
                stall_count += 1;
                if stall_count >= 2 {
                    z = z_new;
                    pg_norm = self.projected_gradient_norm(&z, &grad_new);
                    break;
                }
            } else {
                stall_count = 0;
            }
            let s_vec: Vec<f64> = z_new.iter().zip(z.iter()).map(|(a, b)| a - b).collect();
            let y_vec: Vec<f64> = grad_new.iter().zip(grad.iter()).map(|(a, b)| a - b).collect();
            let sy: f64 = s_vec.iter().zip(&y_vec).map(|(a, b)| a * b).sum();
            let ss: f64 = s_vec.iter().map(|v| v * v).sum();
            let yy: f64 = y_vec.iter().map(|v| v * v).sum();
            if sy > 1e-12 * ss.sqrt() * yy.sqrt() {
                s_hist.push(s_vec);
                y_hist.push(y_vec);
                if s_hist.len() > m {
                    s_hist.remove(0);
                    y_hist.remove(0);
                }
            }
            z = z_new;
            f = f_new;
            grad = grad_new;
            pg_norm = self.projected_gradient_norm(&z, &grad);
        }
        (z, pg_norm)
    }

    fn projected_gradient_norm(&self, z: &[f64], grad: &[f64]) -> f64 {
        let mut stepped: Vec<f64> = z.iter().zip(grad.iter()).map(|(zi, gi)| zi - gi).collect();
        self.project(&mut stepped);
        stepped
            .iter()
            .zip(z.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Outer augmented-Lagrangian loop from one initial guess.
    fn solve_from(&self, z0: &[f64]) -> CandidateResult {
        let mut z = z0.to_vec();
        self.project(&mut z);
        let mut lambda = vec![0.0; self.layout.len()];
        let mut rho = self.cfg.solver.init_penalty;
        let mut g = Vec::with_capacity(self.layout.len());
        let mut last_viol = f64::INFINITY;
        let mut pg_norm = f64::INFINITY;

        for _ in 0..self.cfg.solver.max_outer {
            let (z_new, pg) = self.minimize(&z, &lambda, rho);
            z = z_new;
            pg_norm = pg;
            let controls = self.controls_of(&z);
            let roll = rollout(&self.s0, &controls, self.cfg, &self.pred);
            self.layout
                .eval(&controls, &roll, self.cfg, self.prev_input, &mut g);
            let viol = self.max_violation(&g);
            if viol <= 0.0 {
                break;
            }
            for (li, gi) in lambda.iter_mut().zip(g.iter()) {
                if gi.is_finite() {
                    *li = (*li + rho * *gi).max(0.0);
                }
            }
            if viol > 0.25 * last_viol {
                rho = (rho * 10.0).min(1e9);
            }
            last_viol = viol;
        }

        let controls = self.controls_of(&z);
        let roll = rollout(&self.s0, &controls, self.cfg, &self.pred);
        self.layout
            .eval(&controls, &roll, self.cfg, self.prev_input, &mut g);
        let viol = self.max_violation(&g);
        let objective = objective_from_rollout(&controls, &roll, self.cfg, self.prev_input);
        CandidateResult {
            controls,
            roll,
            objective,
            violation: viol,
            pg_norm,
        }
    }

    /// Worst violation beyond the per-family acceptance slack: risk_tol for
    /// risk constraints, bound_tol for boxes and rates.
    fn max_violation(&self, g: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (idx, gi) in g.iter().enumerate() {
            if !gi.is_finite() {
                continue;
            }
            let slack = if idx < self.layout.n_risk {
                self.cfg.risk_tol
            } else {
                self.cfg.solver.bound_tol
            };
            worst = worst.max(gi - slack);
        }
        worst
    }
}

struct CandidateResult {
    controls: Vec<ControlInput>,
    roll: Rollout,
    objective: f64,
    violation: f64,
    pg_norm: f64,
}

fn initial_guesses(cfg: &MpcConfig, opts: &SolveOptions) -> Vec<Vec<f64>> {
    let n = cfg.horizon;
    let mut guesses = Vec::new();
    if let Some(warm) = &opts.warm_start {
        let mut z = Vec::with_capacity(2 * n);
        for t in 0..n {
            let u = warm.get(t).copied().unwrap_or_default();
            z.push(u.accel);
            z.push(u.steer);
        }
        guesses.push(z);
    }
    guesses.push(vec![0.0; 2 * n]);
    if cfg.solver.multi_start {
        let steer = (0.6 * cfg.input_bounds.steer_max).min(cfg.steer_rate_max * 0.9);
        for sign in [1.0, -1.0] {
            let mut z = vec![0.0; 2 * n];
            for t in 0..n {
                // Arc toward one side for the first half, back for the rest.
                let s = if t < n / 2 { steer } else { -steer };
                z[2 * t + 1] = sign * s;
            }
            guesses.push(z);
        }
        let mut brake = vec![0.0; 2 * n];
        for t in 0..n {
            brake[2 * t] = 0.7 * cfg.input_bounds.accel.0;
        }
        guesses.push(brake);
    }
    guesses
}

fn solution_from(roll: &Rollout, controls: Vec<ControlInput>, objective: f64, status: SolveStatus) -> MpcSolution {
    MpcSolution {
        controls,
        predicted_states: roll.states.clone(),
        predicted_risks: roll.risks.iter().map(|r| r.map(|(v, _)| v)).collect(),
        objective,
        status,
    }
}

/// Solve the courteous MPC from state `s0` against the observed neighbors.
///
/// `per_pair` carries one `RiskParams` per neighbor (heterogeneous ellipse
/// sizes). Infeasibility is reported through the status, never as an error;
/// the fallback is maximum braking with zero steering.
pub fn solve_mpc(
    s0: &EgoState,
    others: &[NoisyAgentState],
    per_pair: &[RiskParams],
    cfg: &MpcConfig,
    opts: &SolveOptions,
) -> MpcSolution {
    let pred = Prediction::new(others, per_pair, cfg);
    let layout = ConstraintLayout::new(cfg, opts.prev_input.is_some(), !others.is_empty());
    let problem = Problem {
        s0: *s0,
        cfg,
        pred,
        layout,
        prev_input: opts.prev_input,
    };

    // The risk at t = 0 depends only on the fixed initial state: if it
    // already violates the constraint no control can repair that step.
    if let Some((r0, _)) = problem.pred.risk_at(0, &ego_observation(s0, &cfg.ego_noise)) {
        if r0 > cfg.risk_tol {
            let mut sol = fallback_brake(s0, cfg);
            populate_risks(&mut sol, &problem.pred, cfg);
            return sol;
        }
    }

    let mut best: Option<CandidateResult> = None;
    let mut seen: Vec<Vec<u64>> = Vec::new();
    for guess in initial_guesses(cfg, opts) {
        // Warm starts frequently coincide with the zero guess at cruise.
        let key: Vec<u64> = guess.iter().map(|v| v.to_bits()).collect();
        if seen.contains(&key) {
            continue;
        }
        seen.push(key);
        let cand = problem.solve_from(&guess);
        let better = match &best {
            None => true,
            Some(b) => {
                let feas_c = cand.violation <= 0.0;
                let feas_b = b.violation <= 0.0;
                match (feas_c, feas_b) {
                    (true, true) => cand.objective < b.objective,
                    (true, false) => true,
                    (false, false) => cand.violation < b.violation,
                    (false, true) => false,
                }
            }
        };
        if better {
            best = Some(cand);
        }
    }
    let best = best.expect("at least one initial guess");

    if best.violation > 0.0 {
        if std::env::var_os("RISKWAY_MPC_DEBUG").is_some() {
            let mut g = Vec::new();
            let roll = rollout(s0, &best.controls, cfg, &problem.pred);
            problem
                .layout
                .eval(&best.controls, &roll, cfg, opts.prev_input, &mut g);
            let (worst_idx, worst) = g
                .iter()
                .enumerate()
                .filter(|(_, v)| v.is_finite())
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap();
            eprintln!(
                "mpc fallback: violation={:.3e} worst constraint #{worst_idx} (of {} risk, {} state, {} rate pairs) g={worst:.6}",
                best.violation,
                problem.layout.n_risk,
                problem.layout.state_terms.len(),
                problem.layout.rate_steps.len(),
            );
        }
        let mut sol = fallback_brake(s0, cfg);
        populate_risks(&mut sol, &problem.pred, cfg);
        return sol;
    }
    let status = if best.pg_norm <= cfg.solver.stat_tol {
        SolveStatus::Optimal
    } else {
        SolveStatus::MaxIter
    };
    solution_from(&best.roll, best.controls, best.objective, status)
}

fn populate_risks(sol: &mut MpcSolution, pred: &Prediction, cfg: &MpcConfig) {
    sol.predicted_risks = sol
        .predicted_states
        .iter()
        .enumerate()
        .map(|(t, s)| {
            pred.risk_at(t, &ego_observation(s, &cfg.ego_noise))
                .map(|(v, _)| v)
        })
        .collect();
}

/// Maximum-braking, zero-steer fallback; reported as infeasible. Risks are
/// left unset here and filled in by the caller that knows the neighbors.
pub fn fallback_brake(s0: &EgoState, cfg: &MpcConfig) -> MpcSolution {
    let controls = vec![ControlInput::new(cfg.input_bounds.accel.0, 0.0); cfg.horizon];
    let mut states = Vec::with_capacity(cfg.horizon + 1);
    states.push(*s0);
    for u in &controls {
        states.push(bicycle_step(states.last().unwrap(), u, &cfg.geometry, cfg.dt));
    }
    let objective = f64::INFINITY;
    MpcSolution {
        predicted_risks: vec![None; states.len()],
        predicted_states: states,
        controls,
        objective,
        status: SolveStatus::Infeasible,
    }
}

/// Independent post-hoc certificate for a solution: re-rolls the controls
/// through the dynamics and re-evaluates risks and box bounds with the
/// public risk API.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    /// Largest re-evaluated risk over steps 0..N-1, if any neighbor exists.
    pub max_risk: Option<f64>,
    pub risk_ok: bool,
    pub states_ok: bool,
    pub inputs_ok: bool,
}

impl Certificate {
    pub fn ok(&self) -> bool {
        self.risk_ok && self.states_ok && self.inputs_ok
    }
}

/// Minimum center distance between the predicted ego states and the
/// constant-velocity neighbor predictions over the horizon.
pub fn min_predicted_distance(
    sol: &MpcSolution,
    others: &[NoisyAgentState],
    cfg: &MpcConfig,
) -> f64 {
    let mut best = f64::INFINITY;
    for (t, s) in sol.predicted_states.iter().enumerate() {
        for nbr in predict_neighbors(others, t, cfg.dt, cfg.cov_growth) {
            let dx = s.x - nbr.pos_mean.0;
            let dy = s.y - nbr.pos_mean.1;
            best = best.min((dx * dx + dy * dy).sqrt());
        }
    }
    best
}

pub fn certify_solution(
    sol: &MpcSolution,
    others: &[NoisyAgentState],
    per_pair: &[RiskParams],
    cfg: &MpcConfig,
) -> Certificate {
    use crate::risk::aggregate_risk;
    let mut states = vec![sol.predicted_states[0]];
    for u in &sol.controls {
        states.push(bicycle_step(states.last().unwrap(), u, &cfg.geometry, cfg.dt));
    }
    let mut max_risk: Option<f64> = None;
    for (t, s) in states.iter().enumerate().take(cfg.horizon) {
        let ego = ego_observation(s, &cfg.ego_noise);
        let nbrs = predict_neighbors(others, t, cfg.dt, cfg.cov_growth);
        if let Some(r) = aggregate_risk(&ego, &nbrs, per_pair).expect("aligned params") {
            max_risk = Some(max_risk.map_or(r, |m: f64| m.max(r)));
        }
    }
    let risk_ok = max_risk.map_or(true, |r| r <= cfg.risk_tol);
    let b = &cfg.state_bounds;
    let tol = cfg.solver.bound_tol;
    let states_ok = states.iter().skip(1).take(cfg.horizon.saturating_sub(1)).all(|s| {
        s.y >= b.y.0 - tol
            && s.y <= b.y.1 + tol
            && s.v >= b.v.0 - tol
            && s.v <= b.v.1 + tol
            && s.phi >= b.phi.0 - tol
            && s.phi <= b.phi.1 + tol
    });
    let ib = &cfg.input_bounds;
    let inputs_ok = sol.controls.iter().all(|u| {
        u.accel >= ib.accel.0 && u.accel <= ib.accel.1 && u.steer.abs() <= ib.steer_max
    });
    Certificate {
        max_risk,
        risk_ok,
        states_ok,
        inputs_ok,
    }
}

//! Pairwise and aggregated collision-risk evaluation under Gaussian
//! position and velocity noise.
//!
//! The safe set between two vehicles is the exterior of an ellipse,
//! `h = (dx)^2 + (dy/tau)^2 - d_safe^2 >= 0`. The severity of a potential
//! violation is `H = -h_dot - gamma*h + margin`; `H` is propagated through
//! the observation noise with a first-order (delta-method) Gaussian
//! approximation, and the perceived risk is the upper-tail CVaR of that
//! Gaussian. Risk <= 0 certifies pairwise safety with probability at least
//! `1 - alpha` for the step.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::vehicle::VehicleGeometry;

/// Gaussian observation of one vehicle: mean position/velocity plus
/// diagonal covariances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisyAgentState {
    /// Observed position mean (m).
    pub pos_mean: (f64, f64),
    /// Observed velocity mean (m/s).
    pub vel_mean: (f64, f64),
    /// Diagonal of the position covariance (m^2).
    pub pos_cov: [f64; 2],
    /// Diagonal of the velocity covariance (m^2/s^2).
    pub vel_cov: [f64; 2],
}

impl NoisyAgentState {
    pub fn new(pos_mean: (f64, f64), vel_mean: (f64, f64), pos_cov: [f64; 2], vel_cov: [f64; 2]) -> Self {
        Self {
            pos_mean,
            vel_mean,
            pos_cov,
            vel_cov,
        }
    }

    /// A noiseless observation.
    pub fn exact(pos: (f64, f64), vel: (f64, f64)) -> Self {
        Self::new(pos, vel, [0.0; 2], [0.0; 2])
    }

    pub fn with_isotropic_noise(pos: (f64, f64), vel: (f64, f64), pos_var: f64, vel_var: f64) -> Self {
        Self::new(pos, vel, [pos_var; 2], [vel_var; 2])
    }
}

/// Observation noise attributed to the ego vehicle's own state. Zero by
/// default: the ego is assumed to know itself.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EgoNoise {
    pub pos_cov: [f64; 2],
    pub vel_cov: [f64; 2],
}

impl EgoNoise {
    pub fn isotropic(pos_var: f64, vel_var: f64) -> Self {
        Self {
            pos_cov: [pos_var; 2],
            vel_cov: [vel_var; 2],
        }
    }
}

/// Constants of the risk framework.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskParams {
    /// Slope of the class-K function (1/s).
    pub gamma: f64,
    /// CVaR confidence level, in (0, 1).
    pub alpha: f64,
    /// Lateral scaling factor of the safety ellipse; the lateral semi-axis
    /// is `tau * d_safe`.
    pub tau: f64,
    /// Longitudinal safety distance (m).
    pub d_safe: f64,
    /// Sampled-data controller margin added to the severity.
    pub margin: f64,
}

impl Default for RiskParams {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            alpha: 0.1,
            tau: 0.5,
            d_safe: 5.0,
            margin: 0.0,
        }
    }
}

/// Extra clearance added to vehicle half-dimensions when sizing the safety
/// ellipse of a vehicle pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairBuffers {
    /// Added to the longitudinal semi-axis (m).
    pub longitudinal: f64,
    /// Added to the lateral semi-axis (m).
    pub lateral: f64,
}

impl Default for PairBuffers {
    fn default() -> Self {
        Self {
            longitudinal: 1.0,
            lateral: 0.3,
        }
    }
}

/// Ellipse parameters sized for a specific vehicle pair: the longitudinal
/// semi-axis covers the mean body length plus a buffer, and `tau` is chosen
/// so that `tau * d_safe` equals the buffered mean body width.
pub fn pair_params(
    base: &RiskParams,
    ego: &VehicleGeometry,
    other: &VehicleGeometry,
    buffers: &PairBuffers,
) -> RiskParams {
    let d_safe = 0.5 * (ego.body_length + other.body_length) + buffers.longitudinal;
    let lateral = 0.5 * (ego.body_width + other.body_width) + buffers.lateral;
    RiskParams {
        tau: lateral / d_safe,
        d_safe,
        ..*base
    }
}

/// Operating envelope used to bound the sampled-data controller margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingBox {
    /// Largest relative speed between any pair (m/s).
    pub v_rel_max: f64,
    /// Largest center distance at which the risk is evaluated (m).
    pub d_max: f64,
    /// Largest control magnitude (m/s^2).
    pub u_max: f64,
    /// Largest ego speed (m/s).
    pub v_max: f64,
}

/// Conservative estimate of the controller margin over an operating box:
/// a Lipschitz bound on the severity change across one sample interval,
/// `(2*v_rel_max + 2*gamma*d_max + 2*u_max) * v_max * dt`.
pub fn estimate_controller_margin(b: &OperatingBox, gamma: f64, dt: f64) -> f64 {
    (2.0 * b.v_rel_max + 2.0 * gamma * b.d_max + 2.0 * b.u_max) * b.v_max * dt
}

/// Delta-method moments of the severity for one vehicle pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeverityMoments {
    /// Mean of H at the observed means.
    pub mean: f64,
    /// First-order variance of H.
    pub variance: f64,
    /// Gradient of H with respect to
    /// `[x_e, y_e, x_i, y_i, vx_e, vy_e, vx_i, vy_i]`.
    pub gradient: [f64; 8],
}

#[derive(Debug, Error, PartialEq)]
pub enum RiskError {
    #[error("alpha must lie strictly inside (0, 1), got {alpha}")]
    InvalidAlpha { alpha: f64 },
    #[error("{others} neighbors but {params} parameter sets")]
    PairParamsMismatch { others: usize, params: usize },
}

/// Ellipse safe-set value `(dx)^2 + (dy/tau)^2 - d_safe^2`; negative inside
/// the unsafe ellipse.
pub fn eval_h(ego_pos: (f64, f64), other_pos: (f64, f64), p: &RiskParams) -> f64 {
    let dx = ego_pos.0 - other_pos.0;
    let dy = ego_pos.1 - other_pos.1;
    dx * dx + (dy / p.tau).powi(2) - p.d_safe * p.d_safe
}

/// Time derivative of [`eval_h`] along the observed velocities.
pub fn eval_h_dot(ego: &NoisyAgentState, other: &NoisyAgentState, p: &RiskParams) -> f64 {
    let dx = ego.pos_mean.0 - other.pos_mean.0;
    let dy = ego.pos_mean.1 - other.pos_mean.1;
    let dvx = ego.vel_mean.0 - other.vel_mean.0;
    let dvy = ego.vel_mean.1 - other.vel_mean.1;
    2.0 * dx * dvx + 2.0 / (p.tau * p.tau) * dy * dvy
}

/// Severity mean `mu_H = -h_dot - gamma*h + margin` at the observed means.
pub fn severity_mean(ego: &NoisyAgentState, other: &NoisyAgentState, p: &RiskParams) -> f64 {
    -eval_h_dot(ego, other, p) - p.gamma * eval_h(ego.pos_mean, other.pos_mean, p) + p.margin
}

/// Analytic gradient of the severity with respect to
/// `[x_e, y_e, x_i, y_i, vx_e, vy_e, vx_i, vy_i]`, evaluated at the means.
pub fn severity_gradient(
    ego: &NoisyAgentState,
    other: &NoisyAgentState,
    p: &RiskParams,
) -> [f64; 8] {
    let dx = ego.pos_mean.0 - other.pos_mean.0;
    let dy = ego.pos_mean.1 - other.pos_mean.1;
    let dvx = ego.vel_mean.0 - other.vel_mean.0;
    let dvy = ego.vel_mean.1 - other.vel_mean.1;
    let inv_tau2 = 1.0 / (p.tau * p.tau);

    let d_xe = -2.0 * dvx - 2.0 * p.gamma * dx;
    let d_ye = -2.0 * inv_tau2 * dvy - 2.0 * p.gamma * inv_tau2 * dy;
    let d_vxe = -2.0 * dx;
    let d_vye = -2.0 * inv_tau2 * dy;
    [d_xe, d_ye, -d_xe, -d_ye, d_vxe, d_vye, -d_vxe, -d_vye]
}

fn joint_cov_diagonal(ego: &NoisyAgentState, other: &NoisyAgentState) -> [f64; 8] {
    [
        ego.pos_cov[0],
        ego.pos_cov[1],
        other.pos_cov[0],
        other.pos_cov[1],
        ego.vel_cov[0],
        ego.vel_cov[1],
        other.vel_cov[0],
        other.vel_cov[1],
    ]
}

/// First-order severity variance `g^T Sigma g`, with `Sigma` assembled
/// block-diagonally from the two agents' covariances.
pub fn severity_variance(ego: &NoisyAgentState, other: &NoisyAgentState, p: &RiskParams) -> f64 {
    let g = severity_gradient(ego, other, p);
    let cov = joint_cov_diagonal(ego, other);
    g.iter().zip(cov.iter()).map(|(gi, ci)| gi * gi * ci).sum()
}

/// Mean, variance and gradient of the severity in one pass.
pub fn severity_moments(
    ego: &NoisyAgentState,
    other: &NoisyAgentState,
    p: &RiskParams,
) -> SeverityMoments {
    let gradient = severity_gradient(ego, other, p);
    let cov = joint_cov_diagonal(ego, other);
    let variance = gradient
        .iter()
        .zip(cov.iter())
        .map(|(gi, ci)| gi * gi * ci)
        .sum();
    SeverityMoments {
        mean: severity_mean(ego, other, p),
        variance,
        gradient,
    }
}

/// Multiplier `pdf(z)/alpha` with `z = Phi^{-1}(1-alpha)`: the upper-tail
/// CVaR of a standard normal.
pub fn cvar_tail_multiplier(alpha: f64) -> Result<f64, RiskError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(RiskError::InvalidAlpha { alpha });
    }
    let std_normal = Normal::standard();
    let z = std_normal.inverse_cdf(1.0 - alpha);
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    Ok(pdf / alpha)
}

/// Closed-form upper-tail CVaR of a Gaussian `N(mu, sigma^2)`:
/// `mu + sigma * pdf(z)/alpha` with `z = Phi^{-1}(1-alpha)`.
pub fn cvar_gaussian(mu: f64, sigma: f64, alpha: f64) -> Result<f64, RiskError> {
    debug_assert!(sigma >= 0.0, "sigma must be nonnegative");
    let mult = cvar_tail_multiplier(alpha)?;
    if sigma == 0.0 {
        return Ok(mu);
    }
    Ok(mu + sigma * mult)
}

/// Perceived risk of one vehicle pair: CVaR of the delta-method severity.
pub fn pairwise_risk(
    ego: &NoisyAgentState,
    other: &NoisyAgentState,
    p: &RiskParams,
) -> Result<f64, RiskError> {
    let m = severity_moments(ego, other, p);
    cvar_gaussian(m.mean, m.variance.max(0.0).sqrt(), p.alpha)
}

/// Resultant perceived risk: the maximum pairwise risk over all neighbors,
/// or `None` when there are no neighbors.
///
/// `per_pair_params` must be aligned with `others` (heterogeneous vehicle
/// sizes lead to per-pair `tau` and `d_safe`).
pub fn aggregate_risk(
    ego: &NoisyAgentState,
    others: &[NoisyAgentState],
    per_pair_params: &[RiskParams],
) -> Result<Option<f64>, RiskError> {
    if others.len() != per_pair_params.len() {
        return Err(RiskError::PairParamsMismatch {
            others: others.len(),
            params: per_pair_params.len(),
        });
    }
    let mut max: Option<f64> = None;
    for (other, p) in others.iter().zip(per_pair_params.iter()) {
        let r = pairwise_risk(ego, other, p)?;
        max = Some(match max {
            Some(m) if m >= r => m,
            _ => r,
        });
    }
    Ok(max)
}

/// Step-wise probabilistic safety constraint: risk within tolerance.
pub fn check_safety_constraint(risk: f64, tol: f64) -> bool {
    debug_assert!(tol >= 0.0);
    risk <= tol
}

/// Lower bound on the probability that a trajectory of `steps` steps stays
/// safe when each step is safe with probability at least `1 - alpha`.
pub fn trajectory_safety_bound(alpha: f64, steps: u32) -> f64 {
    (1.0 - alpha).powi(steps as i32)
}

/// Pairwise risk together with its gradient with respect to the ego
/// position and velocity `[x_e, y_e, vx_e, vy_e]`. Used by gradient-based
/// controllers; agrees with finite differences of [`pairwise_risk`].
pub fn pairwise_risk_grad_ego(
    ego: &NoisyAgentState,
    other: &NoisyAgentState,
    p: &RiskParams,
    tail_multiplier: f64,
) -> (f64, [f64; 4]) {
    let m = severity_moments(ego, other, p);
    let sigma = m.variance.max(0.0).sqrt();
    let risk = m.mean + sigma * tail_multiplier;

    let g = m.gradient;
    let cov = joint_cov_diagonal(ego, other);
    let inv_tau2 = 1.0 / (p.tau * p.tau);

    // dg_j/d(theta) for theta in [x_e, y_e, vx_e, vy_e]; indices follow the
    // gradient layout. Only the listed entries are nonzero.
    // x_e:  g0 -= 2*gamma, g2 += 2*gamma, g4 -= 2, g6 += 2
    // y_e:  g1 -= 2*gamma/tau^2, g3 += ..., g5 -= 2/tau^2, g7 += ...
    // vx_e: g0 -= 2, g2 += 2
    // vy_e: g1 -= 2/tau^2, g3 += 2/tau^2
    let mut grad = [g[0], g[1], g[4], g[5]]; // d(mean)/d(theta)
    if sigma > 0.0 {
        let dvar_dxe = 2.0
            * (g[0] * cov[0] * (-2.0 * p.gamma)
                + g[2] * cov[2] * (2.0 * p.gamma)
                + g[4] * cov[4] * (-2.0)
                + g[6] * cov[6] * 2.0);
        let dvar_dye = 2.0
            * (g[1] * cov[1] * (-2.0 * p.gamma * inv_tau2)
                + g[3] * cov[3] * (2.0 * p.gamma * inv_tau2)
                + g[5] * cov[5] * (-2.0 * inv_tau2)
                + g[7] * cov[7] * (2.0 * inv_tau2));
        let dvar_dvxe = 2.0 * (g[0] * cov[0] * (-2.0) + g[2] * cov[2] * 2.0);
        let dvar_dvye =
            2.0 * (g[1] * cov[1] * (-2.0 * inv_tau2) + g[3] * cov[3] * (2.0 * inv_tau2));
        let scale = tail_multiplier / (2.0 * sigma);
        grad[0] += scale * dvar_dxe;
        grad[1] += scale * dvar_dye;
        grad[2] += scale * dvar_dvxe;
        grad[3] += scale * dvar_dvye;
    }
    (risk, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal as GaussDist};

    fn params(gamma: f64, tau: f64, d_safe: f64, alpha: f64, margin: f64) -> RiskParams {
        RiskParams {
            gamma,
            alpha,
            tau,
            d_safe,
            margin,
        }
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn h_examples() {
        let p = params(1.0, 2.0, 5.0, 0.1, 0.0);
        assert_eq!(eval_h((0.0, 0.0), (0.0, 0.0), &p), -25.0);
        assert_eq!(eval_h((10.0, 0.0), (0.0, 0.0), &p), 75.0);
        assert_eq!(eval_h((3.0, 4.0), (0.0, 0.0), &p), -12.0);
    }

    #[test]
    fn h_dot_examples() {
        let p = params(1.0, 2.0, 5.0, 0.1, 0.0);
        let mk = |pos: (f64, f64), vel: (f64, f64)| NoisyAgentState::exact(pos, vel);
        assert_eq!(eval_h_dot(&mk((10.0, 0.0), (5.0, 0.0)), &mk((0.0, 0.0), (5.0, 0.0)), &p), 0.0);
        assert_eq!(
            eval_h_dot(&mk((10.0, 0.0), (0.0, 0.0)), &mk((0.0, 0.0), (5.0, 0.0)), &p),
            -100.0
        );
        assert_eq!(
            eval_h_dot(&mk((0.0, 2.0), (0.0, 1.0)), &mk((0.0, 0.0), (0.0, 0.0)), &p),
            1.0
        );
    }

    #[test]
    fn severity_mean_examples() {
        let p = params(1.0, 2.0, 5.0, 0.1, 0.0);
        // h = 75, h_dot = -100  =>  mu_H = 100 - 75 = 25
        let ego = NoisyAgentState::exact((10.0, 0.0), (0.0, 0.0));
        let other = NoisyAgentState::exact((0.0, 0.0), (5.0, 0.0));
        assert_eq!(severity_mean(&ego, &other, &p), 25.0);

        let ego = NoisyAgentState::exact((0.0, 0.0), (15.0, 0.0));
        let other = NoisyAgentState::exact((20.0, 0.0), (15.0, 0.0));
        assert_eq!(severity_mean(&ego, &other, &p), -375.0);
        let with_margin = params(1.0, 2.0, 5.0, 0.1, 2.0);
        assert_eq!(severity_mean(&ego, &other, &with_margin), -373.0);
    }

    #[test]
    fn severity_gradient_reference_case() {
        let p = params(1.0, 2.0, 5.0, 0.1, 0.0);
        let ego = NoisyAgentState::exact((0.0, 0.0), (15.0, 0.0));
        let other = NoisyAgentState::exact((20.0, 0.0), (15.0, 0.0));
        let g = severity_gradient(&ego, &other, &p);
        let expect = [40.0, 0.0, -40.0, 0.0, 40.0, 0.0, -40.0, 0.0];
        for (gi, ei) in g.iter().zip(expect.iter()) {
            assert!(close(*gi, *ei, 1e-12), "{g:?}");
        }

        let coincident = NoisyAgentState::exact((0.0, 0.0), (15.0, 0.0));
        let g0 = severity_gradient(&coincident, &coincident, &p);
        assert!(g0.iter().all(|v| *v == 0.0));
    }

    fn finite_diff_severity(
        ego: &NoisyAgentState,
        other: &NoisyAgentState,
        p: &RiskParams,
        step: f64,
    ) -> [f64; 8] {
        let mut out = [0.0; 8];
        let apply = |idx: usize, delta: f64| {
            let mut e = *ego;
            let mut o = *other;
            match idx {
                0 => e.pos_mean.0 += delta,
                1 => e.pos_mean.1 += delta,
                2 => o.pos_mean.0 += delta,
                3 => o.pos_mean.1 += delta,
                4 => e.vel_mean.0 += delta,
                5 => e.vel_mean.1 += delta,
                6 => o.vel_mean.0 += delta,
                7 => o.vel_mean.1 += delta,
                _ => unreachable!(),
            }
            severity_mean(&e, &o, p)
        };
        for (idx, slot) in out.iter_mut().enumerate() {
            *slot = (apply(idx, step) - apply(idx, -step)) / (2.0 * step);
        }
        out
    }

    #[test]
    fn severity_gradient_matches_finite_differences() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let p = params(
                rng.random_range(0.1..3.0),
                rng.random_range(0.3..3.0),
                rng.random_range(2.0..8.0),
                0.1,
                rng.random_range(0.0..2.0),
            );
            let ego = NoisyAgentState::exact(
                (rng.random_range(-30.0..30.0), rng.random_range(-8.0..8.0)),
                (rng.random_range(-5.0..20.0), rng.random_range(-3.0..3.0)),
            );
            let other = NoisyAgentState::exact(
                (rng.random_range(-30.0..30.0), rng.random_range(-8.0..8.0)),
                (rng.random_range(-5.0..20.0), rng.random_range(-3.0..3.0)),
            );
            let analytic = severity_gradient(&ego, &other, &p);
            let fd = finite_diff_severity(&ego, &other, &p, 1e-6);
            for (a, f) in analytic.iter().zip(fd.iter()) {
                let rel = (a - f).abs() / f.abs().max(1.0);
                assert!(rel <= 1e-5, "analytic {a} vs fd {f}");
            }
        }
    }

    #[test]
    fn variance_examples() {
        let p = params(1.0, 2.0, 5.0, 0.1, 0.0);
        let ego = NoisyAgentState::exact((0.0, 0.0), (15.0, 0.0));
        let other_exact = NoisyAgentState::exact((20.0, 0.0), (15.0, 0.0));
        assert_eq!(severity_variance(&ego, &other_exact, &p), 0.0);

        // Gradient-zero configuration.
        let still = NoisyAgentState::with_isotropic_noise((0.0, 0.0), (0.0, 0.0), 0.5, 0.5);
        assert_eq!(severity_variance(&still, &still, &p), 0.0);

        // diag(0.1) on the neighbor position and velocity, gradient
        // [40,0,-40,0,40,0,-40,0]: 1600*0.1 + 1600*0.1 = 320.
        let other_noisy =
            NoisyAgentState::with_isotropic_noise((20.0, 0.0), (15.0, 0.0), 0.1, 0.1);
        assert!(close(severity_variance(&ego, &other_noisy, &p), 320.0, 1e-9));
    }

    #[test]
    fn cvar_degenerate_and_reference_values() {
        assert_eq!(cvar_gaussian(-7.0, 0.0, 0.3).unwrap(), -7.0);
        // Frozen from a Monte-Carlo tail mean (1e7 samples, 3-sigma band);
        // closed form phi(0)/0.5 = 0.7978845608028654.
        assert!(close(cvar_gaussian(0.0, 1.0, 0.5).unwrap(), 0.7978845608028654, 1e-9));
        // phi(1.2815515655446005)/0.1 = 1.7549833193248681
        assert!(close(cvar_gaussian(-10.0, 1.0, 0.1).unwrap(), -8.245016680675132, 1e-9));
    }

    #[test]
    fn cvar_rejects_bad_alpha() {
        for alpha in [0.0, 1.0, -0.2, 1.7] {
            assert_eq!(
                cvar_gaussian(0.0, 1.0, alpha),
                Err(RiskError::InvalidAlpha { alpha })
            );
        }
    }

    #[test]
    fn cvar_against_monte_carlo_tail_mean() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for &(mu, sigma, alpha) in &[(0.0, 1.0, 0.5_f64), (-10.0, 1.0, 0.1), (3.0, 2.5, 0.25)] {
            let n = 200_000;
            let dist = GaussDist::new(mu, sigma).unwrap();
            let mut samples: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
            let tail_len = ((alpha * n as f64).round() as usize).max(1);
            samples
                .sort_by(|a, b| b.partial_cmp(a).unwrap());
            let tail = &samples[..tail_len];
            let mc_mean = tail.iter().sum::<f64>() / tail_len as f64;
            let tail_var = tail.iter().map(|x| (x - mc_mean).powi(2)).sum::<f64>()
                / (tail_len as f64 - 1.0);
            let se = (tail_var / tail_len as f64).sqrt();
            let closed = cvar_gaussian(mu, sigma, alpha).unwrap();
            assert!(
                (closed - mc_mean).abs() <= 3.0 * se + 1e-3,
                "mu={mu} sigma={sigma} alpha={alpha}: closed {closed} vs MC {mc_mean} (se {se})"
            );
        }
    }

    #[test]
    fn pairwise_risk_examples() {
        let p = params(1.0, 2.0, 5.0, 0.1, 0.0);
        // Noiseless: risk equals the severity mean.
        let ego = NoisyAgentState::exact((10.0, 0.0), (0.0, 0.0));
        let other = NoisyAgentState::exact((0.0, 0.0), (5.0, 0.0));
        assert_eq!(pairwise_risk(&ego, &other, &p).unwrap(), 25.0);

        // mu_H = -375, var = 320.
        let ego = NoisyAgentState::exact((0.0, 0.0), (15.0, 0.0));
        let other = NoisyAgentState::with_isotropic_noise((20.0, 0.0), (15.0, 0.0), 0.1, 0.1);
        assert!(close(
            pairwise_risk(&ego, &other, &p).unwrap(),
            -343.605903988891,
            1e-9
        ));

        // Coincident, zero-velocity, noiseless: risk = gamma * d_safe^2.
        let still = NoisyAgentState::exact((0.0, 0.0), (0.0, 0.0));
        assert_eq!(pairwise_risk(&still, &still, &p).unwrap(), 25.0);
    }

    #[test]
    fn aggregate_examples() {
        let p = RiskParams::default();
        let ego = NoisyAgentState::exact((0.0, 0.0), (15.0, 0.0));
        let mk = |x: f64| NoisyAgentState::exact((x, 0.0), (15.0, 0.0));
        let others = [mk(10.0), mk(20.0), mk(7.0)];
        let ps = [p; 3];
        let all = aggregate_risk(&ego, &others, &ps).unwrap().unwrap();
        let singles: Vec<f64> = others
            .iter()
            .map(|o| pairwise_risk(&ego, o, &p).unwrap())
            .collect();
        assert_eq!(all, singles.iter().cloned().fold(f64::MIN, f64::max));

        assert_eq!(aggregate_risk(&ego, &[], &[]).unwrap(), None);
        assert_eq!(
            aggregate_risk(&ego, &others[..1], &ps[..1]).unwrap(),
            Some(singles[0])
        );
        assert_eq!(
            aggregate_risk(&ego, &others, &ps[..2]),
            Err(RiskError::PairParamsMismatch { others: 3, params: 2 })
        );
    }

    #[test]
    fn constraint_check() {
        assert!(check_safety_constraint(-343.61, 0.0));
        assert!(!check_safety_constraint(25.0, 0.0));
        assert!(check_safety_constraint(1e-9, 1e-6));
    }

    #[test]
    fn trajectory_bound_values() {
        assert_eq!(trajectory_safety_bound(0.1, 0), 1.0);
        assert!(close(trajectory_safety_bound(0.1, 1), 0.9, 1e-15));
        assert!(close(trajectory_safety_bound(0.1, 300), 1.873927703884794e-14, 1e-20));
    }

    #[test]
    fn heterogeneous_pair_sizing() {
        let base = RiskParams::default();
        let car = VehicleGeometry::default(); // 4.8 x 2.0
        let truck = VehicleGeometry::from_body(8.0, 2.4);
        let p = pair_params(&base, &car, &truck, &PairBuffers::default());
        assert!(close(p.d_safe, 0.5 * (4.8 + 8.0) + 1.0, 1e-12));
        let lateral = 0.5 * (2.0 + 2.4) + 0.3;
        assert!(close(p.tau * p.d_safe, lateral, 1e-12));
        assert_eq!(p.gamma, base.gamma);
        assert_eq!(p.alpha, base.alpha);
    }

    #[test]
    fn margin_estimate_formula() {
        let b = OperatingBox {
            v_rel_max: 10.0,
            d_max: 50.0,
            u_max: 6.0,
            v_max: 20.0,
        };
        let m = estimate_controller_margin(&b, 1.0, 0.1);
        assert!(close(m, (20.0 + 100.0 + 12.0) * 20.0 * 0.1, 1e-12));
    }

    #[test]
    fn ego_risk_gradient_matches_finite_differences() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mult = cvar_tail_multiplier(0.1).unwrap();
        for _ in 0..200 {
            let p = params(
                rng.random_range(0.2..2.0),
                rng.random_range(0.3..2.5),
                rng.random_range(3.0..7.0),
                0.1,
                0.0,
            );
            let ego = NoisyAgentState::exact(
                (rng.random_range(-20.0..20.0), rng.random_range(-6.0..6.0)),
                (rng.random_range(0.0..20.0), rng.random_range(-2.0..2.0)),
            );
            let other = NoisyAgentState::with_isotropic_noise(
                (rng.random_range(-20.0..20.0), rng.random_range(-6.0..6.0)),
                (rng.random_range(0.0..20.0), rng.random_range(-2.0..2.0)),
                0.1,
                0.1,
            );
            let (risk, grad) = pairwise_risk_grad_ego(&ego, &other, &p, mult);
            assert!(close(risk, pairwise_risk(&ego, &other, &p).unwrap(), 1e-12));
            let h = 1e-6;
            let eval = |dx: f64, dy: f64, dvx: f64, dvy: f64| {
                let mut e = ego;
                e.pos_mean.0 += dx;
                e.pos_mean.1 += dy;
                e.vel_mean.0 += dvx;
                e.vel_mean.1 += dvy;
                pairwise_risk(&e, &other, &p).unwrap()
            };
            let fd = [
                (eval(h, 0.0, 0.0, 0.0) - eval(-h, 0.0, 0.0, 0.0)) / (2.0 * h),
                (eval(0.0, h, 0.0, 0.0) - eval(0.0, -h, 0.0, 0.0)) / (2.0 * h),
                (eval(0.0, 0.0, h, 0.0) - eval(0.0, 0.0, -h, 0.0)) / (2.0 * h),
                (eval(0.0, 0.0, 0.0, h) - eval(0.0, 0.0, 0.0, -h)) / (2.0 * h),
            ];
            for (a, f) in grad.iter().zip(fd.iter()) {
                let rel = (a - f).abs() / f.abs().max(1.0);
                assert!(rel < 1e-4, "analytic {a} vs fd {f}");
            }
        }
    }

    /// Sample the true severity by drawing neighbor position/velocity from
    /// the stated Gaussians. Independent of the delta-method path.
    fn sample_severity(
        ego: &NoisyAgentState,
        other: &NoisyAgentState,
        p: &RiskParams,
        n: usize,
        seed: u64,
    ) -> (f64, f64, f64) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let draws: Vec<GaussDist<f64>> = [
            other.pos_cov[0],
            other.pos_cov[1],
            other.vel_cov[0],
            other.vel_cov[1],
        ]
        .iter()
        .map(|v| GaussDist::new(0.0, v.sqrt()).unwrap())
        .collect();
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut positive = 0usize;
        for _ in 0..n {
            let o = NoisyAgentState::exact(
                (
                    other.pos_mean.0 + draws[0].sample(&mut rng),
                    other.pos_mean.1 + draws[1].sample(&mut rng),
                ),
                (
                    other.vel_mean.0 + draws[2].sample(&mut rng),
                    other.vel_mean.1 + draws[3].sample(&mut rng),
                ),
            );
            let h_val = severity_mean(ego, &o, p);
            sum += h_val;
            sum_sq += h_val * h_val;
            if h_val >= 0.0 {
                positive += 1;
            }
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        (mean, var, positive as f64 / n as f64)
    }

    #[test]
    fn delta_method_matches_sampled_moments_in_small_noise_regime() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let mut checked = 0;
        while checked < 10 {
            let p = params(1.0, 2.0, 5.0, 0.1, 0.0);
            let dx: f64 = rng.random_range(4.0..30.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            let ego = NoisyAgentState::exact((0.0, 0.0), (15.0, 0.0));
            let other = NoisyAgentState::with_isotropic_noise(
                (dx, rng.random_range(-4.0..4.0)),
                (rng.random_range(8.0..17.0), rng.random_range(-1.0..1.0)),
                0.1,
                0.1,
            );
            let m = severity_moments(&ego, &other, &p);
            if m.mean.abs() < 5.0 {
                continue;
            }
            checked += 1;
            let (s_mean, s_var, _) = sample_severity(&ego, &other, &p, 200_000, 1000 + checked);
            assert!(
                (s_mean - m.mean).abs() / m.mean.abs() < 0.02,
                "mean: sampled {s_mean} vs delta {}",
                m.mean
            );
            assert!(
                (s_var - m.variance).abs() / m.variance.max(1e-9) < 0.02,
                "variance: sampled {s_var} vs delta {}",
                m.variance
            );
        }
    }

    #[test]
    fn tail_bound_holds_when_risk_nonpositive() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let p = params(1.0, 2.0, 5.0, 0.1, 0.0);
        let mut checked = 0;
        while checked < 5 {
            let dx: f64 = rng.random_range(6.0..25.0);
            let ego = NoisyAgentState::exact((0.0, 0.0), (15.0, 0.0));
            let other = NoisyAgentState::with_isotropic_noise(
                (dx, rng.random_range(-3.0..3.0)),
                (rng.random_range(10.0..16.0), 0.0),
                0.1,
                0.1,
            );
            let risk = pairwise_risk(&ego, &other, &p).unwrap();
            if risk > 0.0 {
                continue;
            }
            checked += 1;
            let n = 200_000;
            let (_, _, frac_positive) = sample_severity(&ego, &other, &p, n, 500 + checked);
            let bound = 0.1 + 3.0 * (0.1 * 0.9 / n as f64).sqrt();
            assert!(
                frac_positive <= bound,
                "P(H >= 0) = {frac_positive} exceeds {bound} at risk {risk}"
            );
        }
    }

    proptest! {
        #[test]
        fn cvar_dominates_var(mu in -20.0f64..20.0, sigma in 0.0f64..5.0, alpha in 0.01f64..0.99) {
            let std_normal = Normal::standard();
            let var = mu + sigma * std_normal.inverse_cdf(1.0 - alpha);
            let cvar = cvar_gaussian(mu, sigma, alpha).unwrap();
            if sigma == 0.0 {
                prop_assert!((cvar - var).abs() < 1e-12);
            } else {
                prop_assert!(cvar > var);
            }
        }

        #[test]
        fn cvar_decreasing_in_alpha(mu in -5.0f64..5.0, sigma in 0.01f64..5.0,
                                    a1 in 0.05f64..0.4, bump in 0.05f64..0.5) {
            let a2 = a1 + bump;
            let c1 = cvar_gaussian(mu, sigma, a1).unwrap();
            let c2 = cvar_gaussian(mu, sigma, a2).unwrap();
            prop_assert!(c1 > c2);
        }

        #[test]
        fn translation_invariance(
            shift_x in -50.0f64..50.0, shift_y in -50.0f64..50.0,
            ex in -20.0f64..20.0, ey in -6.0f64..6.0,
            ox in -20.0f64..20.0, oy in -6.0f64..6.0,
            vx in -5.0f64..20.0, ovx in -5.0f64..20.0,
        ) {
            let p = params(1.0, 2.0, 5.0, 0.1, 0.3);
            let ego = NoisyAgentState::with_isotropic_noise((ex, ey), (vx, 0.5), 0.05, 0.02);
            let other = NoisyAgentState::with_isotropic_noise((ox, oy), (ovx, -0.5), 0.1, 0.1);
            let mut ego_s = ego;
            let mut other_s = other;
            ego_s.pos_mean = (ex + shift_x, ey + shift_y);
            other_s.pos_mean = (ox + shift_x, oy + shift_y);

            let lhs = (
                eval_h(ego.pos_mean, other.pos_mean, &p),
                eval_h_dot(&ego, &other, &p),
                severity_mean(&ego, &other, &p),
                pairwise_risk(&ego, &other, &p).unwrap(),
            );
            let rhs = (
                eval_h(ego_s.pos_mean, other_s.pos_mean, &p),
                eval_h_dot(&ego_s, &other_s, &p),
                severity_mean(&ego_s, &other_s, &p),
                pairwise_risk(&ego_s, &other_s, &p).unwrap(),
            );
            prop_assert!((lhs.0 - rhs.0).abs() < 1e-8);
            prop_assert!((lhs.1 - rhs.1).abs() < 1e-8);
            prop_assert!((lhs.2 - rhs.2).abs() < 1e-8);
            prop_assert!((lhs.3 - rhs.3).abs() < 1e-8);
        }

        #[test]
        fn gradient_antisymmetry(
            ex in -20.0f64..20.0, ey in -6.0f64..6.0,
            ox in -20.0f64..20.0, oy in -6.0f64..6.0,
            evx in -5.0f64..20.0, ovy in -3.0f64..3.0,
        ) {
            let p = params(0.7, 1.5, 4.0, 0.1, 0.0);
            let ego = NoisyAgentState::exact((ex, ey), (evx, 1.0));
            let other = NoisyAgentState::exact((ox, oy), (10.0, ovy));
            let g = severity_gradient(&ego, &other, &p);
            prop_assert_eq!(g[2], -g[0]);
            prop_assert_eq!(g[3], -g[1]);
            prop_assert_eq!(g[6], -g[4]);
            prop_assert_eq!(g[7], -g[5]);
        }

        #[test]
        fn aggregate_permutation_invariant_and_monotone(
            xs in proptest::collection::vec((-30.0f64..30.0, -6.0f64..6.0, 5.0f64..18.0), 1..6),
            extra_x in -30.0f64..30.0,
        ) {
            let p = RiskParams::default();
            let ego = NoisyAgentState::exact((0.0, 0.0), (15.0, 0.0));
            let others: Vec<NoisyAgentState> = xs
                .iter()
                .map(|(x, y, v)| NoisyAgentState::with_isotropic_noise((*x, *y), (*v, 0.0), 0.1, 0.1))
                .collect();
            let ps = vec![p; others.len()];
            let forward = aggregate_risk(&ego, &others, &ps).unwrap();

            let mut reversed = others.clone();
            reversed.reverse();
            let backward = aggregate_risk(&ego, &reversed, &ps).unwrap();
            prop_assert_eq!(forward, backward);

            let mut extended = others.clone();
            extended.push(NoisyAgentState::exact((extra_x, 3.0), (12.0, 0.0)));
            let ps_ext = vec![p; extended.len()];
            let bigger = aggregate_risk(&ego, &extended, &ps_ext).unwrap();
            prop_assert!(bigger.unwrap() >= forward.unwrap());
        }
    }
}

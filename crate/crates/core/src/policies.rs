//! Effort-allocation policies: non-adaptive, oracle, distilled sensing,
//! generalized open-loop feedback control (OLFC), and rollout OLFC.
//!
//! A policy maps the current belief state (or the ground truth, for the
//! oracle) and the stage index to a per-component effort plan. The OLFC
//! family plans the whole remaining horizon as a single simplex-constrained
//! problem, spends a calibrated fraction `beta(t)` of the remaining budget
//! on the current stage, and replans after observing. Rollout re-optimizes
//! `beta(t)` online by simulating the generalized policy forward.

use crate::allocator::{waterfill_power_law, solve_general, AllocationProblem};
use crate::belief::{BeliefState, EffortFunction, PriorParams, EPS_OBS};
use crate::error::{Error, Result};
use crate::loss::{g_kernel, LossSpec};
use crate::rng::Stream;

/// Budgets below this fraction of the initial budget are treated as spent.
const BUDGET_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    NonAdaptive,
    Oracle,
    Ds,
    Olfc,
    Rollout,
}

impl PolicyKind {
    pub fn label(&self) -> &'static str {
        match self {
            PolicyKind::NonAdaptive => "nonadaptive",
            PolicyKind::Oracle => "oracle",
            PolicyKind::Ds => "ds",
            PolicyKind::Olfc => "olfc",
            PolicyKind::Rollout => "rollout",
        }
    }

    pub fn parse(s: &str) -> Result<PolicyKind> {
        match s.trim() {
            "nonadaptive" => Ok(PolicyKind::NonAdaptive),
            "oracle" => Ok(PolicyKind::Oracle),
            "ds" => Ok(PolicyKind::Ds),
            "olfc" => Ok(PolicyKind::Olfc),
            "rollout" => Ok(PolicyKind::Rollout),
            other => Err(Error::Config(format!("unknown policy kind `{other}`"))),
        }
    }

    /// Whether the policy reads the Bayesian belief state.
    pub fn uses_belief(&self) -> bool {
        matches!(self, PolicyKind::Olfc | PolicyKind::Rollout)
    }
}

/// Per-stage schedule of a policy: remaining-budget fractions and
/// water-filling exponents, one entry per stage.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    pub kind: PolicyKind,
    pub stages: usize,
    /// Fraction of the remaining budget spent per stage; the final entry is 1.
    pub beta: Vec<f64>,
    /// Water-filling exponent per stage; the final entry is `2/(q+2)`.
    pub gamma: Vec<f64>,
    /// Geometric decay ratio of the distilled-sensing stage fractions.
    pub ds_ratio: f64,
    pub loss: LossSpec,
    /// Futures simulated per rollout grid point.
    pub rollout_mc: usize,
}

impl PolicyParams {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::InvalidParameter("policy needs at least one stage".into()));
        }
        if self.kind.uses_belief() {
            if self.beta.len() != self.stages || self.gamma.len() != self.stages {
                return Err(Error::InvalidParameter(format!(
                    "schedule length mismatch: {} stages, {} beta, {} gamma",
                    self.stages,
                    self.beta.len(),
                    self.gamma.len()
                )));
            }
            for &b in &self.beta {
                if !(0.0..=1.0).contains(&b) {
                    return Err(Error::InvalidParameter(format!("beta {b} not in [0,1]")));
                }
            }
            if (self.beta[self.stages - 1] - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidParameter(
                    "the final stage must exhaust the remaining budget (beta = 1)".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One stage's effort vector with its provenance.
#[derive(Debug, Clone)]
pub struct AllocationPlan {
    pub lambda: Vec<f64>,
    pub stage: usize,
    pub policy: PolicyKind,
}

impl AllocationPlan {
    pub fn total(&self) -> f64 {
        self.lambda.iter().sum()
    }
}

/// Uniform single-stage allocation: the optimal non-adaptive policy under a
/// uniform prior.
pub fn nonadaptive_allocate(prior: &PriorParams) -> AllocationPlan {
    AllocationPlan {
        lambda: vec![prior.lambda0 / prior.n as f64; prior.n],
        stage: 0,
        policy: PolicyKind::NonAdaptive,
    }
}

/// Uniform single-stage allocation over the true support (infeasible
/// reference policy).
pub fn oracle_allocate(true_support: &[bool], lambda0: f64) -> AllocationPlan {
    let n = true_support.len();
    let k = true_support.iter().filter(|&&s| s).count();
    let lambda = if k == 0 {
        log::warn!("oracle policy with an empty support; allocating uniformly");
        vec![lambda0 / n as f64; n]
    } else {
        let share = lambda0 / k as f64;
        true_support
            .iter()
            .map(|&s| if s { share } else { 0.0 })
            .collect()
    };
    AllocationPlan {
        lambda,
        stage: 0,
        policy: PolicyKind::Oracle,
    }
}

/// Geometrically decaying stage fractions with equal first and last stages,
/// normalized to sum to one.
pub fn ds_fractions(stages: usize, ratio: f64) -> Result<Vec<f64>> {
    if stages < 2 {
        return Err(Error::InvalidParameter(format!(
            "distilled sensing needs at least 2 stages, got {stages}"
        )));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "decay ratio {ratio} must be in (0, 1)"
        )));
    }
    let mut weights = Vec::with_capacity(stages);
    weights.push(1.0);
    for t in 1..stages - 1 {
        weights.push(ratio.powi(t as i32));
    }
    weights.push(1.0);
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Linear interpolation of the water-filling exponent from `gamma0` at the
/// first stage to `2/(q+2)` at the last.
pub fn gamma_schedule(gamma0: f64, q: f64, stages: usize) -> Result<Vec<f64>> {
    let gamma_final = 2.0 / (q + 2.0);
    if !(gamma0 > 0.0 && gamma0 <= gamma_final + 1e-12) {
        return Err(Error::InvalidParameter(format!(
            "gamma0 = {gamma0} must lie in (0, {gamma_final}]"
        )));
    }
    if stages == 1 {
        return Ok(vec![gamma_final]);
    }
    Ok((0..stages)
        .map(|t| gamma0 + (gamma_final - gamma0) * t as f64 / (stages - 1) as f64)
        .collect())
}

/// Solve the reduced per-stage problem for the whole remaining budget and
/// horizon. Power-law losses with the identity effort function take the
/// closed form with the scheduled exponent; everything else goes through
/// the projected-gradient solver.
pub fn plan_stage_allocation(
    state: &BeliefState,
    loss: &LossSpec,
    h: &EffortFunction,
    gamma: f64,
    stages_remaining: usize,
) -> Result<Vec<f64>> {
    let lambda = state.budget_remaining;
    if lambda <= BUDGET_EPS {
        return Ok(vec![0.0; state.n()]);
    }
    let prob = AllocationProblem {
        p: &state.p,
        sigma_i_sq: &state.sigma_sq_i,
        sigma_sq: state.sigma_sq,
        lambda,
        stages_remaining,
        loss: *loss,
        h,
        gamma_override: Some(gamma),
    };
    let solved = if matches!(loss, LossSpec::Power { .. }) && h.is_identity() {
        waterfill_power_law(&prob)?
    } else {
        let prob = AllocationProblem {
            gamma_override: None,
            ..prob
        };
        solve_general(&prob)?
    };
    Ok(solved.lambda_bar)
}

/// Exact expected cost of spending `allocation` now and nothing afterwards:
/// `sum_i p_i g(sigma_i^2, h(lambda_i))`. This is the fixed point that
/// anchors the rollout fit at `beta = 1`.
pub fn exact_single_stage_cost(
    state: &BeliefState,
    allocation: &[f64],
    loss: &LossSpec,
    h: &EffortFunction,
) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..state.n() {
        total += state.p[i] * g_kernel(loss, state.sigma_sq_i[i], h.eval(allocation[i]), state.sigma_sq)?;
    }
    Ok(total)
}

/// Simulate a generalized-OLFC schedule forward from `state` over absolute
/// stages `start..stages`, observing a fixed signal hypothesis through the
/// model's channel, and return the exact final-stage cost (the last stage's
/// expected loss is computed in closed form rather than sampled, which
/// removes one layer of Monte Carlo noise).
///
/// Noise is addressed by `(noise_stage_offset + stage) * n + i`, so two
/// simulations that differ only in earlier no-op stages can be aligned
/// exactly by shifting the offset.
#[allow(clippy::too_many_arguments)]
pub(crate) fn simulate_schedule_cost(
    mut state: BeliefState,
    params: &PolicyParams,
    start: usize,
    indicators: &[bool],
    amplitudes: &[f64],
    h: &EffortFunction,
    noise: &Stream,
    noise_stage_offset: usize,
) -> Result<f64> {
    let n = state.n();
    let stages = params.stages;
    debug_assert!(start < stages);

    for t in start..stages - 1 {
        let lambda_bar = plan_stage_allocation(&state, &params.loss, h, params.gamma[t], stages - t)?;
        let beta = params.beta[t];
        let mut alloc = vec![0.0; n];
        let mut obs = vec![None; n];
        if beta > 0.0 {
            for i in 0..n {
                let l = beta * lambda_bar[i];
                if l > EPS_OBS {
                    let v0 = state.sigma_sq / h.eval(l);
                    let truth = if indicators[i] { amplitudes[i] } else { 0.0 };
                    let ctr = ((noise_stage_offset + t) * n + i) as u64;
                    obs[i] = Some(truth + noise.normal_at(ctr) * v0.sqrt());
                    alloc[i] = l;
                }
            }
        }
        state.update(&alloc, &obs, h)?;
    }

    let final_stage = stages - 1;
    let lambda_bar =
        plan_stage_allocation(&state, &params.loss, h, params.gamma[final_stage], 1)?;
    exact_single_stage_cost(&state, &lambda_bar, &params.loss, h)
}

// ---------------------------------------------------------------------------
// Rollout
// ---------------------------------------------------------------------------

/// Grid of budget fractions scanned by the rollout search (step 0.05); the
/// final point `beta = 1` is evaluated exactly rather than simulated.
const ROLLOUT_GRID: usize = 21;

fn fit_anchored_quartic(betas: &[f64], costs: &[f64], anchor: f64) -> Vec<f64> {
    // q(beta) = anchor + (beta - 1) * (d0 + d1 b + d2 b^2 + d3 b^3)
    use nalgebra::{DMatrix, DVector};
    let rows = betas.len();
    let mut a = DMatrix::zeros(rows, 4);
    let mut rhs = DVector::zeros(rows);
    for (j, (&b, &c)) in betas.iter().zip(costs).enumerate() {
        let lead = b - 1.0;
        for k in 0..4 {
            a[(j, k)] = lead * b.powi(k as i32);
        }
        rhs[j] = c - anchor;
    }
    let svd = a.svd(true, true);
    let d = svd.solve(&rhs, 1e-12).unwrap_or_else(|_| DVector::zeros(4));
    d.iter().copied().collect()
}

fn eval_anchored_quartic(coeffs: &[f64], anchor: f64, beta: f64) -> f64 {
    let poly = coeffs[0] + beta * (coeffs[1] + beta * (coeffs[2] + beta * coeffs[3]));
    anchor + (beta - 1.0) * poly
}

/// One rollout decision: estimate the cost-to-go of each budget fraction on
/// a grid by simulating the generalized policy forward from predictive
/// samples, fit a quartic anchored at the exactly computable `beta = 1`
/// cost, and spend the minimizing fraction.
pub fn rollout_allocate(
    state: &BeliefState,
    t: usize,
    params: &PolicyParams,
    h: &EffortFunction,
    stream: &Stream,
) -> Result<AllocationPlan> {
    if params.rollout_mc == 0 {
        return Err(Error::InvalidParameter(
            "rollout needs a positive simulation budget".into(),
        ));
    }
    let stages = params.stages;
    let n = state.n();
    let gamma = params.gamma[t];
    let lambda_bar = plan_stage_allocation(state, &params.loss, h, gamma, stages - t)?;

    if state.budget_remaining <= BUDGET_EPS {
        return Ok(AllocationPlan {
            lambda: vec![0.0; n],
            stage: t,
            policy: PolicyKind::Rollout,
        });
    }

    // last stage: spend everything on the single-stage optimum
    if t + 1 == stages {
        return Ok(AllocationPlan {
            lambda: lambda_bar,
            stage: t,
            policy: PolicyKind::Rollout,
        });
    }

    let anchor = exact_single_stage_cost(state, &lambda_bar, &params.loss, h)?;

    let grid: Vec<f64> = (0..ROLLOUT_GRID - 1)
        .map(|k| k as f64 / (ROLLOUT_GRID - 1) as f64)
        .collect();
    let mut sums = vec![0.0; grid.len()];
    for f in 0..params.rollout_mc {
        let mut sig_rng = stream.substream(&[t as u64, f as u64, 0]).sequence();
        let (ind, amp) = state.posterior_signal_sample(&mut sig_rng);
        let noise = stream.substream(&[t as u64, f as u64, 1]);
        for (j, &beta) in grid.iter().enumerate() {
            let mut trial = params.clone();
            trial.beta[t] = beta;
            sums[j] += simulate_schedule_cost(
                state.clone(),
                &trial,
                t,
                &ind,
                &amp,
                h,
                &noise,
                0,
            )?;
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / params.rollout_mc as f64).collect();

    let coeffs = fit_anchored_quartic(&grid, &means, anchor);
    let mut best = (anchor, 1.0);
    for k in 0..=1000 {
        let beta = k as f64 / 1000.0;
        let value = eval_anchored_quartic(&coeffs, anchor, beta);
        if value < best.0 {
            best = (value, beta);
        }
    }
    let beta_tilde = best.1;

    Ok(AllocationPlan {
        lambda: lambda_bar.iter().map(|&l| beta_tilde * l).collect(),
        stage: t,
        policy: PolicyKind::Rollout,
    })
}

// ---------------------------------------------------------------------------
// Per-trial drivers
// ---------------------------------------------------------------------------

/// Mutable per-trial policy state driven by the harness: produces a plan
/// each stage, records observations, and supplies the final estimate.
#[derive(Debug)]
pub enum PolicyDriver {
    NonAdaptive {
        prior: PriorParams,
        weight: Vec<f64>,
        weighted_obs: Vec<f64>,
    },
    Oracle {
        support: Vec<bool>,
        lambda0: f64,
        weight: Vec<f64>,
        weighted_obs: Vec<f64>,
    },
    Ds {
        fractions: Vec<f64>,
        lambda0: f64,
        active: Vec<bool>,
        weight: Vec<f64>,
        weighted_obs: Vec<f64>,
    },
    Olfc {
        params: PolicyParams,
    },
    Rollout {
        params: PolicyParams,
        stream: Stream,
    },
}

impl PolicyDriver {
    pub fn nonadaptive(prior: PriorParams) -> PolicyDriver {
        PolicyDriver::NonAdaptive {
            weight: vec![0.0; prior.n],
            weighted_obs: vec![0.0; prior.n],
            prior,
        }
    }

    pub fn oracle(support: Vec<bool>, lambda0: f64) -> PolicyDriver {
        let n = support.len();
        PolicyDriver::Oracle {
            support,
            lambda0,
            weight: vec![0.0; n],
            weighted_obs: vec![0.0; n],
        }
    }

    pub fn ds(params: &PolicyParams, n: usize, lambda0: f64) -> Result<PolicyDriver> {
        Ok(PolicyDriver::Ds {
            fractions: ds_fractions(params.stages, params.ds_ratio)?,
            lambda0,
            active: vec![true; n],
            weight: vec![0.0; n],
            weighted_obs: vec![0.0; n],
        })
    }

    pub fn olfc(params: PolicyParams) -> Result<PolicyDriver> {
        params.validate()?;
        Ok(PolicyDriver::Olfc { params })
    }

    pub fn rollout(params: PolicyParams, stream: Stream) -> Result<PolicyDriver> {
        params.validate()?;
        Ok(PolicyDriver::Rollout { params, stream })
    }

    pub fn kind(&self) -> PolicyKind {
        match self {
            PolicyDriver::NonAdaptive { .. } => PolicyKind::NonAdaptive,
            PolicyDriver::Oracle { .. } => PolicyKind::Oracle,
            PolicyDriver::Ds { .. } => PolicyKind::Ds,
            PolicyDriver::Olfc { .. } => PolicyKind::Olfc,
            PolicyDriver::Rollout { .. } => PolicyKind::Rollout,
        }
    }

    /// Number of observation stages this policy actually uses.
    pub fn stages(&self) -> usize {
        match self {
            PolicyDriver::NonAdaptive { .. } | PolicyDriver::Oracle { .. } => 1,
            PolicyDriver::Ds { fractions, .. } => fractions.len(),
            PolicyDriver::Olfc { params } | PolicyDriver::Rollout { params, .. } => params.stages,
        }
    }

    pub fn allocate(&mut self, state: &BeliefState, t: usize, h: &EffortFunction) -> Result<AllocationPlan> {
        match self {
            PolicyDriver::NonAdaptive { prior, .. } => Ok(nonadaptive_allocate(prior)),
            PolicyDriver::Oracle { support, lambda0, .. } => Ok(oracle_allocate(support, *lambda0)),
            PolicyDriver::Ds {
                fractions,
                lambda0,
                active,
                ..
            } => {
                let k = active.iter().filter(|&&a| a).count().max(1);
                let share = fractions[t] * *lambda0 / k as f64;
                Ok(AllocationPlan {
                    lambda: active
                        .iter()
                        .map(|&a| if a { share } else { 0.0 })
                        .collect(),
                    stage: t,
                    policy: PolicyKind::Ds,
                })
            }
            PolicyDriver::Olfc { params } => {
                let lambda_bar =
                    plan_stage_allocation(state, &params.loss, h, params.gamma[t], params.stages - t)?;
                let beta = params.beta[t];
                Ok(AllocationPlan {
                    lambda: lambda_bar.iter().map(|&l| beta * l).collect(),
                    stage: t,
                    policy: PolicyKind::Olfc,
                })
            }
            PolicyDriver::Rollout { params, stream } => {
                rollout_allocate(state, t, params, h, stream)
            }
        }
    }

    /// Record a stage's observations: accumulates precision-weighted
    /// estimates for the observation-average policies and refines the
    /// distilled-sensing working set.
    pub fn record(&mut self, plan: &AllocationPlan, obs: &[Option<f64>], h: &EffortFunction) {
        match self {
            PolicyDriver::NonAdaptive { weight, weighted_obs, .. }
            | PolicyDriver::Oracle { weight, weighted_obs, .. } => {
                accumulate(weight, weighted_obs, plan, obs, h);
            }
            PolicyDriver::Ds {
                active,
                weight,
                weighted_obs,
                ..
            } => {
                accumulate(weight, weighted_obs, plan, obs, h);
                let mut best: Option<(usize, f64)> = None;
                for i in 0..active.len() {
                    if !active[i] {
                        continue;
                    }
                    match obs[i] {
                        Some(y) => {
                            if best.map_or(true, |(_, b)| y > b) {
                                best = Some((i, y));
                            }
                            if y <= 0.0 {
                                active[i] = false;
                            }
                        }
                        None => active[i] = false,
                    }
                }
                if active.iter().all(|&a| !a) {
                    if let Some((i, _)) = best {
                        log::warn!("distilled sensing refined to an empty set; keeping component {i}");
                        active[i] = true;
                    }
                }
            }
            PolicyDriver::Olfc { .. } | PolicyDriver::Rollout { .. } => {}
        }
    }

    /// Final amplitude estimates: posterior means for the Bayesian policies,
    /// precision-weighted observation averages otherwise (restricted to the
    /// final working set for distilled sensing).
    pub fn estimate(&self, state: &BeliefState) -> Vec<f64> {
        match self {
            PolicyDriver::NonAdaptive { weight, weighted_obs, .. }
            | PolicyDriver::Oracle { weight, weighted_obs, .. } => weighted_obs
                .iter()
                .zip(weight)
                .map(|(&wy, &w)| if w > 0.0 { wy / w } else { 0.0 })
                .collect(),
            PolicyDriver::Ds {
                active,
                weight,
                weighted_obs,
                ..
            } => weighted_obs
                .iter()
                .zip(weight)
                .zip(active)
                .map(|((&wy, &w), &a)| if a && w > 0.0 { wy / w } else { 0.0 })
                .collect(),
            PolicyDriver::Olfc { .. } | PolicyDriver::Rollout { .. } => state.mu.clone(),
        }
    }
}

fn accumulate(
    weight: &mut [f64],
    weighted_obs: &mut [f64],
    plan: &AllocationPlan,
    obs: &[Option<f64>],
    h: &EffortFunction,
) {
    for i in 0..weight.len() {
        if let Some(y) = obs[i] {
            let w = h.eval(plan.lambda[i]);
            weight[i] += w;
            weighted_obs[i] += w * y;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::belief::init_state;
    use approx::assert_relative_eq;

    fn prior(n: usize, lambda0: f64) -> PriorParams {
        PriorParams {
            p0: 0.01,
            mu0: 1.0,
            sigma0_sq: 0.0625,
            sigma_sq: 1.0,
            lambda0,
            n,
        }
    }

    fn olfc_params(stages: usize, beta: Vec<f64>, gamma0: f64) -> PolicyParams {
        PolicyParams {
            kind: PolicyKind::Olfc,
            stages,
            gamma: gamma_schedule(gamma0, 2.0, stages).unwrap(),
            beta,
            ds_ratio: 0.75,
            loss: LossSpec::Power { q: 2.0 },
            rollout_mc: 0,
        }
    }

    #[test]
    fn nonadaptive_gives_unit_effort_at_matched_budget() {
        let plan = nonadaptive_allocate(&prior(100, 100.0));
        assert!(plan.lambda.iter().all(|&l| l == 1.0));
        let plan = nonadaptive_allocate(&prior(100, 200.0));
        assert!(plan.lambda.iter().all(|&l| l == 2.0));
        let plan = nonadaptive_allocate(&prior(1, 7.0));
        assert_eq!(plan.lambda, vec![7.0]);
    }

    #[test]
    fn oracle_concentrates_on_support() {
        let support = vec![true, false, true, false];
        let plan = oracle_allocate(&support, 8.0);
        assert_eq!(plan.lambda, vec![4.0, 0.0, 4.0, 0.0]);
        let all = oracle_allocate(&[true; 4], 8.0);
        assert!(all.lambda.iter().all(|&l| l == 2.0));
        let one = oracle_allocate(&[false, true, false], 6.0);
        assert_eq!(one.lambda, vec![0.0, 6.0, 0.0]);
        let none = oracle_allocate(&[false; 4], 8.0);
        assert!(none.lambda.iter().all(|&l| l == 2.0));
    }

    #[test]
    fn ds_fractions_match_the_forced_normalization() {
        let f3 = ds_fractions(3, 0.75).unwrap();
        assert_relative_eq!(f3[0], 4.0 / 11.0, max_relative = 1e-14);
        assert_relative_eq!(f3[1], 3.0 / 11.0, max_relative = 1e-14);
        assert_relative_eq!(f3[2], 4.0 / 11.0, max_relative = 1e-14);
        let f2 = ds_fractions(2, 0.75).unwrap();
        assert_eq!(f2, vec![0.5, 0.5]);
        for t in 2..=10 {
            let f = ds_fractions(t, 0.75).unwrap();
            assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(f.iter().all(|&a| a > 0.0));
        }
        assert!(ds_fractions(1, 0.75).is_err());
    }

    #[test]
    fn gamma_schedule_interpolates() {
        assert_eq!(gamma_schedule(0.5, 2.0, 3).unwrap(), vec![0.5, 0.5, 0.5]);
        assert_eq!(gamma_schedule(0.3, 2.0, 2).unwrap(), vec![0.3, 0.5]);
        let g = gamma_schedule(0.3, 2.0, 5).unwrap();
        for (got, want) in g.iter().zip([0.3, 0.35, 0.4, 0.45, 0.5]) {
            assert_relative_eq!(*got, want, max_relative = 1e-12);
        }
        assert!(gamma_schedule(0.6, 2.0, 3).is_err());
    }

    #[test]
    fn olfc_single_stage_is_the_waterfill_optimum() {
        let h = EffortFunction::Identity;
        let pr = prior(6, 12.0);
        let mut state = init_state(&pr).unwrap();
        // perturb the state so the allocation is non-trivial
        state.p = vec![0.6, 0.1, 0.01, 0.3, 0.05, 0.2];
        let mut driver = PolicyDriver::olfc(olfc_params(1, vec![1.0], 0.5)).unwrap();
        let plan = driver.allocate(&state, 0, &h).unwrap();
        let expected = plan_stage_allocation(&state, &LossSpec::Power { q: 2.0 }, &h, 0.5, 1).unwrap();
        assert_eq!(plan.lambda, expected);
        assert_relative_eq!(plan.total(), 12.0, max_relative = 1e-9);
    }

    #[test]
    fn olfc_first_stage_is_uniform_under_a_uniform_prior() {
        let h = EffortFunction::Identity;
        let pr = prior(8, 8.0);
        let state = init_state(&pr).unwrap();
        let mut driver = PolicyDriver::olfc(olfc_params(2, vec![0.3, 1.0], 0.4)).unwrap();
        let plan = driver.allocate(&state, 0, &h).unwrap();
        for &l in &plan.lambda {
            assert_relative_eq!(l, 0.3 * 1.0, max_relative = 1e-9);
        }
    }

    #[test]
    fn zero_beta_stage_allocates_nothing() {
        let h = EffortFunction::Identity;
        let pr = prior(4, 4.0);
        let mut state = init_state(&pr).unwrap();
        let mut driver = PolicyDriver::olfc(olfc_params(2, vec![0.0, 1.0], 0.5)).unwrap();
        let plan = driver.allocate(&state, 0, &h).unwrap();
        assert!(plan.lambda.iter().all(|&l| l == 0.0));
        let obs = vec![None; 4];
        let before = state.clone();
        state.update(&plan.lambda, &obs, &h).unwrap();
        assert_eq!(state.p, before.p);
        assert_eq!(state.budget_remaining, before.budget_remaining);
    }

    #[test]
    fn ds_driver_spreads_and_refines() {
        let h = EffortFunction::Identity;
        let pr = prior(4, 8.0);
        let state = init_state(&pr).unwrap();
        let params = PolicyParams {
            kind: PolicyKind::Ds,
            stages: 2,
            beta: vec![],
            gamma: vec![],
            ds_ratio: 0.75,
            loss: LossSpec::Power { q: 2.0 },
            rollout_mc: 0,
        };
        let mut driver = PolicyDriver::ds(&params, 4, 8.0).unwrap();
        let plan0 = driver.allocate(&state, 0, &h).unwrap();
        assert!(plan0.lambda.iter().all(|&l| l == 1.0)); // 0.5 * 8 / 4
        let obs = vec![Some(0.4), Some(-0.1), Some(1.2), Some(-2.0)];
        driver.record(&plan0, &obs, &h);
        let plan1 = driver.allocate(&state, 1, &h).unwrap();
        assert_eq!(plan1.lambda, vec![2.0, 0.0, 2.0, 0.0]);

        // all-negative observations collapse to the least-bad component
        let mut driver = PolicyDriver::ds(&params, 4, 8.0).unwrap();
        let plan0 = driver.allocate(&state, 0, &h).unwrap();
        let obs = vec![Some(-0.4), Some(-0.1), Some(-1.2), Some(-2.0)];
        driver.record(&plan0, &obs, &h);
        let plan1 = driver.allocate(&state, 1, &h).unwrap();
        assert_eq!(plan1.lambda, vec![0.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn ds_estimator_is_precision_weighted_and_masked() {
        let h = EffortFunction::Identity;
        let pr = prior(3, 6.0);
        let state = init_state(&pr).unwrap();
        let params = PolicyParams {
            kind: PolicyKind::Ds,
            stages: 2,
            beta: vec![],
            gamma: vec![],
            ds_ratio: 0.75,
            loss: LossSpec::Power { q: 2.0 },
            rollout_mc: 0,
        };
        let mut driver = PolicyDriver::ds(&params, 3, 6.0).unwrap();
        let plan0 = driver.allocate(&state, 0, &h).unwrap();
        driver.record(&plan0, &[Some(1.0), Some(-1.0), Some(2.0)], &h);
        let plan1 = driver.allocate(&state, 1, &h).unwrap();
        driver.record(&plan1, &[Some(2.0), None, Some(1.0)], &h);
        let est = driver.estimate(&state);
        // component 0: weights 1 and 1.5 on observations 1 and 2
        assert_relative_eq!(est[0], (1.0 * 1.0 + 1.5 * 2.0) / 2.5, max_relative = 1e-12);
        assert_eq!(est[1], 0.0); // dropped from the working set
    }

    #[test]
    fn rollout_final_stage_exhausts_budget() {
        let h = EffortFunction::Identity;
        let pr = prior(5, 10.0);
        let state = init_state(&pr).unwrap();
        let params = PolicyParams {
            kind: PolicyKind::Rollout,
            stages: 2,
            beta: vec![0.5, 1.0],
            gamma: vec![0.5, 0.5],
            ds_ratio: 0.75,
            loss: LossSpec::Power { q: 2.0 },
            rollout_mc: 16,
        };
        let stream = Stream::derive(3, &[1]);
        let plan = rollout_allocate(&state, 1, &params, &h, &stream).unwrap();
        assert_relative_eq!(plan.total(), 10.0, max_relative = 1e-9);
    }

    #[test]
    fn rollout_anchor_matches_independent_single_stage_cost() {
        let h = EffortFunction::Identity;
        let pr = prior(4, 4.0);
        let mut state = init_state(&pr).unwrap();
        state.p = vec![0.5, 0.2, 0.05, 0.3];
        let loss = LossSpec::Power { q: 2.0 };
        let lambda_bar = plan_stage_allocation(&state, &loss, &h, 0.5, 1).unwrap();
        let anchor = exact_single_stage_cost(&state, &lambda_bar, &loss, &h).unwrap();
        // independent evaluation of sum_i p_i g(sigma_i^2, lambda_i)
        let mut expected = 0.0;
        for i in 0..4 {
            let prec = 1.0 / state.sigma_sq_i[i] + lambda_bar[i];
            expected += state.p[i] * 0.5 / prec;
        }
        assert!((anchor - expected).abs() < 1e-10, "{anchor} vs {expected}");
    }

    #[test]
    fn simulate_schedule_cost_is_deterministic_given_streams() {
        let h = EffortFunction::Identity;
        let pr = prior(20, 20.0);
        let state = init_state(&pr).unwrap();
        let params = olfc_params(3, vec![0.4, 0.5, 1.0], 0.4);
        let mut sig = Stream::derive(5, &[7]).sequence();
        let (ind, amp) = state.posterior_signal_sample(&mut sig);
        let noise = Stream::derive(5, &[8]);
        let a = simulate_schedule_cost(state.clone(), &params, 0, &ind, &amp, &h, &noise, 0).unwrap();
        let b = simulate_schedule_cost(state.clone(), &params, 0, &ind, &amp, &h, &noise, 0).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite() && a > 0.0);
    }
}

//! Bayesian belief state over a sparse signal and its exact update recursions.
//!
//! Each component `i` carries a posterior support probability `p_i`, and,
//! conditionally on the component being active, a Gaussian amplitude
//! posterior `N(mu_i, sigma_sq_i[i])`. Observations of component `i` with
//! effort `lambda` have noise variance `sigma_sq / h(lambda)`, so the
//! posterior stays in this conjugate family and the update is closed-form:
//! a Gaussian likelihood-ratio step for `p_i` and a precision-weighted
//! average for `(mu_i, sigma_sq_i)`.

use crate::error::{Error, Result};
use crate::rng::SeqStream;

/// Allocations at or below this level count as "observation not taken".
pub const EPS_OBS: f64 = 1e-12;

/// Posterior probabilities are clamped into this range after an update so
/// later log-domain math stays finite. Exact 0 and 1 priors are preserved
/// as fixed points and never clamped.
const P_FLOOR: f64 = 1e-30;
const P_CEIL: f64 = 1.0 - 1e-15;

/// Uniform prior over components plus the experiment-level constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorParams {
    /// Prior support probability, in [0, 1].
    pub p0: f64,
    /// Prior mean of active amplitudes.
    pub mu0: f64,
    /// Prior variance of active amplitudes, >= 0.
    pub sigma0_sq: f64,
    /// Noise variance at unit effort, > 0.
    pub sigma_sq: f64,
    /// Total effort budget, > 0.
    pub lambda0: f64,
    /// Number of components, >= 1.
    pub n: usize,
}

impl PriorParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p0) || !self.p0.is_finite() {
            return Err(Error::InvalidParameter(format!("p0 = {} not in [0,1]", self.p0)));
        }
        if !self.mu0.is_finite() {
            return Err(Error::InvalidParameter(format!("mu0 = {} not finite", self.mu0)));
        }
        if !(self.sigma0_sq >= 0.0) || !self.sigma0_sq.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "sigma0_sq = {} must be >= 0",
                self.sigma0_sq
            )));
        }
        if !(self.sigma_sq > 0.0) || !self.sigma_sq.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "sigma_sq = {} must be > 0",
                self.sigma_sq
            )));
        }
        if !(self.lambda0 > 0.0) || !self.lambda0.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "lambda0 = {} must be > 0",
                self.lambda0
            )));
        }
        if self.n == 0 {
            return Err(Error::InvalidParameter("n must be >= 1".into()));
        }
        Ok(())
    }
}

/// How observation precision scales with sensing effort.
///
/// All variants satisfy `h(0) = 0`, `h` non-decreasing and concave, and the
/// normalization `h(1) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub enum EffortFunction {
    /// `h(lambda) = lambda`.
    Identity,
    /// `h(lambda) = lambda^c` with `0 < c <= 1`.
    Power(f64),
    /// Piecewise-linear interpolation of user-supplied `(lambda, h)` knots.
    Tabulated(Vec<(f64, f64)>),
}

impl EffortFunction {
    pub fn validate(&self) -> Result<()> {
        match self {
            EffortFunction::Identity => Ok(()),
            EffortFunction::Power(c) => {
                if *c > 0.0 && *c <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(format!(
                        "effort exponent {c} must be in (0, 1]"
                    )))
                }
            }
            EffortFunction::Tabulated(pts) => {
                if pts.len() < 2 {
                    return Err(Error::InvalidParameter(
                        "tabulated effort function needs at least 2 points".into(),
                    ));
                }
                if pts[0] != (0.0, 0.0) {
                    return Err(Error::InvalidParameter(
                        "tabulated effort function must start at (0, 0)".into(),
                    ));
                }
                let mut prev_slope = f64::INFINITY;
                for w in pts.windows(2) {
                    let (x0, y0) = w[0];
                    let (x1, y1) = w[1];
                    if x1 <= x0 {
                        return Err(Error::InvalidParameter(
                            "tabulated effort abscissae must strictly increase".into(),
                        ));
                    }
                    if y1 < y0 {
                        return Err(Error::InvalidParameter(
                            "tabulated effort function must be non-decreasing".into(),
                        ));
                    }
                    let slope = (y1 - y0) / (x1 - x0);
                    if slope > prev_slope + 1e-12 {
                        return Err(Error::InvalidParameter(
                            "tabulated effort function must be concave".into(),
                        ));
                    }
                    prev_slope = slope;
                }
                let at_one = self.eval(1.0);
                if (at_one - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidParameter(format!(
                        "effort function must satisfy h(1) = 1, got {at_one}"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Evaluate `h(lambda)`.
    #[inline]
    pub fn eval(&self, lambda: f64) -> f64 {
        match self {
            EffortFunction::Identity => lambda,
            EffortFunction::Power(c) => lambda.powf(*c),
            EffortFunction::Tabulated(pts) => {
                if lambda <= 0.0 {
                    return 0.0;
                }
                let last = pts.len() - 1;
                if lambda >= pts[last].0 {
                    // extrapolate with the final slope (keeps concavity)
                    let (x0, y0) = pts[last - 1];
                    let (x1, y1) = pts[last];
                    return y1 + (lambda - x1) * (y1 - y0) / (x1 - x0);
                }
                let k = pts.partition_point(|&(x, _)| x <= lambda);
                let (x0, y0) = pts[k - 1];
                let (x1, y1) = pts[k];
                y0 + (lambda - x0) * (y1 - y0) / (x1 - x0)
            }
        }
    }

    /// Derivative `h'(lambda)`, used by the iterative allocator.
    #[inline]
    pub fn derivative(&self, lambda: f64) -> f64 {
        match self {
            EffortFunction::Identity => 1.0,
            EffortFunction::Power(c) => c * lambda.max(1e-12).powf(c - 1.0),
            EffortFunction::Tabulated(pts) => {
                let last = pts.len() - 1;
                let lambda = lambda.max(0.0);
                let k = if lambda >= pts[last].0 {
                    last
                } else {
                    pts.partition_point(|&(x, _)| x <= lambda).max(1)
                };
                let (x0, y0) = pts[k - 1];
                let (x1, y1) = pts[k];
                (y1 - y0) / (x1 - x0)
            }
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, EffortFunction::Identity)
    }
}

/// Per-component posterior plus the remaining budget: the sufficient
/// statistic driving all allocation decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefState {
    /// Posterior support probabilities.
    pub p: Vec<f64>,
    /// Posterior amplitude means (conditional on support).
    pub mu: Vec<f64>,
    /// Posterior amplitude variances (conditional on support).
    pub sigma_sq_i: Vec<f64>,
    /// Noise variance at unit effort assumed by this belief.
    pub sigma_sq: f64,
    /// Remaining effort budget.
    pub budget_remaining: f64,
    /// Stage index (number of updates applied).
    pub t: usize,
}

/// Initialize the belief state from a uniform prior.
pub fn init_state(prior: &PriorParams) -> Result<BeliefState> {
    prior.validate()?;
    Ok(BeliefState {
        p: vec![prior.p0; prior.n],
        mu: vec![prior.mu0; prior.n],
        sigma_sq_i: vec![prior.sigma0_sq; prior.n],
        sigma_sq: prior.sigma_sq,
        budget_remaining: prior.lambda0,
        t: 0,
    })
}

#[inline]
fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl BeliefState {
    pub fn n(&self) -> usize {
        self.p.len()
    }

    /// Apply one stage of observations.
    ///
    /// Components with `allocation[i] <= EPS_OBS` are untouched (their
    /// observation entry must be `None`); the rest require `Some(y)` and
    /// follow the conjugate recursions. The stage counter advances and the
    /// spent effort is deducted from the remaining budget.
    pub fn update(
        &mut self,
        allocation: &[f64],
        observations: &[Option<f64>],
        h: &EffortFunction,
    ) -> Result<()> {
        let n = self.n();
        if allocation.len() != n || observations.len() != n {
            return Err(Error::InvalidParameter(format!(
                "update dimension mismatch: state {n}, allocation {}, observations {}",
                allocation.len(),
                observations.len()
            )));
        }
        let mut spent = 0.0;
        for &l in allocation {
            if l < 0.0 || !l.is_finite() {
                return Err(Error::InvalidParameter(format!("negative effort {l}")));
            }
            spent += l;
        }
        if spent > self.budget_remaining * (1.0 + 1e-9) + 1e-12 {
            return Err(Error::BudgetViolation {
                allocated: spent,
                remaining: self.budget_remaining,
            });
        }

        for i in 0..n {
            let lambda = allocation[i];
            if lambda <= EPS_OBS {
                if observations[i].is_some() {
                    return Err(Error::InvalidParameter(format!(
                        "observation supplied for component {i} with no effort"
                    )));
                }
                continue;
            }
            let y = observations[i].ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "missing observation for component {i} with effort {lambda}"
                ))
            })?;
            let hv = h.eval(lambda);
            let v0 = self.sigma_sq / hv;
            let sig_i = self.sigma_sq_i[i];
            let v1 = sig_i + v0;

            // support probability: Gaussian likelihood ratio in log domain
            let p = self.p[i];
            if p > 0.0 && p < 1.0 {
                let llr = 0.5 * (v0 / v1).ln() + y * y / (2.0 * v0)
                    - (y - self.mu[i]) * (y - self.mu[i]) / (2.0 * v1);
                let z = (p / (1.0 - p)).ln() + llr;
                self.p[i] = stable_sigmoid(z).clamp(P_FLOOR, P_CEIL);
            }

            // conditional amplitude posterior (precision-weighted average)
            let denom = self.sigma_sq + hv * sig_i;
            self.mu[i] = (self.sigma_sq * self.mu[i] + hv * sig_i * y) / denom;
            self.sigma_sq_i[i] = self.sigma_sq * sig_i / denom;
        }

        self.budget_remaining = (self.budget_remaining - spent).max(0.0);
        self.t += 1;
        Ok(())
    }

    /// Accumulated precision `sigma_sq / sigma_sq_i + h(pending_effort)` of
    /// component `i`, the quantity the allocation objective depends on.
    ///
    /// Telescopes over updates: after any sequence of stages this equals
    /// `sigma_sq / sigma0_sq + sum_t h(lambda_i(t))`.
    pub fn effective_precision(&self, i: usize, pending_effort: f64, h: &EffortFunction) -> f64 {
        self.sigma_sq / self.sigma_sq_i[i] + h.eval(pending_effort)
    }

    /// Draw one observation of component `i` from the posterior predictive:
    /// a two-component Gaussian mixture.
    pub fn predictive_sample(
        &self,
        i: usize,
        lambda: f64,
        h: &EffortFunction,
        rng: &mut SeqStream,
    ) -> Result<f64> {
        if lambda <= EPS_OBS {
            return Err(Error::NoObservation(lambda));
        }
        let v0 = self.sigma_sq / h.eval(lambda);
        let u = rng.next_uniform();
        let z = rng.next_normal();
        Ok(if u < self.p[i] {
            self.mu[i] + z * (self.sigma_sq_i[i] + v0).sqrt()
        } else {
            z * v0.sqrt()
        })
    }

    /// Draw a full signal hypothesis `(indicators, amplitudes)` from the
    /// current posterior. Simulating the observation channel against such a
    /// draw samples the joint predictive over all future stages, which is
    /// what rollout and calibration need.
    pub fn posterior_signal_sample(&self, rng: &mut SeqStream) -> (Vec<bool>, Vec<f64>) {
        let n = self.n();
        let mut ind = vec![false; n];
        let mut amp = vec![0.0; n];
        for i in 0..n {
            if rng.next_uniform() < self.p[i] {
                ind[i] = true;
                amp[i] = self.mu[i] + rng.next_normal() * self.sigma_sq_i[i].sqrt();
            }
        }
        (ind, amp)
    }
}

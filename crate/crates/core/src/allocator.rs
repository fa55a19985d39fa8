//! Per-stage effort allocation over the simplex `{lambda >= 0, sum = Lambda}`.
//!
//! Two solvers are provided. For power-law losses with the identity effort
//! function the minimizer has an explicit water-filling form: sort the
//! quantities `p_i^gamma * sigma_i^2`, walk the monotone breakpoint sequence
//! `b(k)` to find the support size, and equalize marginal costs across the
//! support. For general convex losses a projected-gradient method with
//! Barzilai-Borwein steps and Armijo backtracking is used.

use crate::belief::EffortFunction;
use crate::error::{Error, Result};
use crate::loss::{g_kernel, g_kernel_dh, LossSpec};

/// One per-stage allocation problem over the remaining budget.
#[derive(Debug, Clone)]
pub struct AllocationProblem<'a> {
    /// Posterior support probabilities.
    pub p: &'a [f64],
    /// Posterior amplitude variances.
    pub sigma_i_sq: &'a [f64],
    /// Unit-effort noise variance.
    pub sigma_sq: f64,
    /// Budget to distribute, > 0.
    pub lambda: f64,
    /// Stages left including the current one, >= 1.
    pub stages_remaining: usize,
    pub loss: LossSpec,
    pub h: &'a EffortFunction,
    /// Water-filling exponent override; defaults to `2/(q+2)`.
    pub gamma_override: Option<f64>,
}

/// Solution of an [`AllocationProblem`].
#[derive(Debug, Clone)]
pub struct AllocationResult {
    /// Non-negative allocation summing to the budget.
    pub lambda_bar: Vec<f64>,
    /// Number of components receiving positive effort.
    pub support_size: usize,
    /// Water-level constant of the closed form (`NaN` for the uniform
    /// fallback; the equalized marginal cost for the iterative solver).
    pub multiplier: f64,
    /// Objective value at the solution.
    pub objective: f64,
}

impl<'a> AllocationProblem<'a> {
    fn validate(&self) -> Result<()> {
        let n = self.p.len();
        if n == 0 || self.sigma_i_sq.len() != n {
            return Err(Error::InvalidParameter(format!(
                "allocation problem dimension mismatch: p {n}, sigma_i_sq {}",
                self.sigma_i_sq.len()
            )));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "budget must be positive, got {}",
                self.lambda
            )));
        }
        if self.stages_remaining == 0 {
            return Err(Error::InvalidParameter("stages_remaining must be >= 1".into()));
        }
        if !(self.sigma_sq > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma_sq must be positive, got {}",
                self.sigma_sq
            )));
        }
        for (i, (&p, &s)) in self.p.iter().zip(self.sigma_i_sq).enumerate() {
            if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                return Err(Error::InvalidParameter(format!("p[{i}] = {p} not in [0,1]")));
            }
            if s < 0.0 || !s.is_finite() {
                return Err(Error::InvalidParameter(format!("sigma_i_sq[{i}] = {s} < 0")));
            }
        }
        Ok(())
    }

    fn gamma(&self) -> Result<f64> {
        let gamma = match self.gamma_override {
            Some(g) => g,
            None => self.loss.gamma_exponent().ok_or_else(|| {
                Error::InvalidParameter(
                    "closed-form water-filling needs a power-law loss or an explicit exponent"
                        .into(),
                )
            })?,
        };
        if gamma > 0.0 && gamma < 1.0 {
            Ok(gamma)
        } else {
            Err(Error::InvalidParameter(format!(
                "water-filling exponent {gamma} must lie in (0, 1)"
            )))
        }
    }

    /// Objective `sum_i p_i g(sigma_i^2, m h(lambda_i / m))`.
    fn objective(&self, lambda_bar: &[f64]) -> Result<f64> {
        let m = self.stages_remaining as f64;
        let mut total = 0.0;
        for i in 0..self.p.len() {
            let h_bar = m * self.h.eval(lambda_bar[i] / m);
            total += self.p[i] * g_kernel(&self.loss, self.sigma_i_sq[i], h_bar, self.sigma_sq)?;
        }
        Ok(total)
    }

    fn gradient(&self, lambda_bar: &[f64], out: &mut [f64]) -> Result<()> {
        let m = self.stages_remaining as f64;
        for i in 0..self.p.len() {
            let per_stage = lambda_bar[i] / m;
            let h_bar = m * self.h.eval(per_stage);
            out[i] = self.p[i]
                * g_kernel_dh(&self.loss, self.sigma_i_sq[i], h_bar, self.sigma_sq)?
                * self.h.derivative(per_stage);
        }
        Ok(())
    }
}

/// Breakpoints `b(1..n)` of the power-law closed form in the sorted order;
/// the budget interval `(b(k-1), b(k)]` determines the support size `k`.
pub fn power_law_breakpoints(
    p: &[f64],
    sigma_i_sq: &[f64],
    sigma_sq: f64,
    gamma: f64,
) -> Vec<f64> {
    let order = sorted_order(p, sigma_i_sq, gamma);
    let n = p.len();
    let mut out = Vec::with_capacity(n);
    let mut sum_pg = 0.0;
    let mut sum_r = 0.0;
    for k in 0..n {
        let i = order[k];
        sum_pg += p[i].powf(gamma);
        sum_r += sigma_sq / sigma_i_sq[i];
        if k + 1 < n {
            let j = order[k + 1];
            let key_next = p[j].powf(gamma) * sigma_i_sq[j];
            out.push(if key_next > 0.0 {
                (sigma_sq / key_next) * sum_pg - sum_r
            } else {
                f64::INFINITY
            });
        } else {
            out.push(f64::INFINITY);
        }
    }
    out
}

/// Sort indices by `p_i^gamma * sigma_i^2` non-increasing, ties broken by
/// ascending component index (stable sort keeps the input order).
fn sorted_order(p: &[f64], sigma_i_sq: &[f64], gamma: f64) -> Vec<usize> {
    let keys: Vec<f64> = p
        .iter()
        .zip(sigma_i_sq)
        .map(|(&pi, &si)| pi.powf(gamma) * si)
        .collect();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]));
    order
}

/// Closed-form water-filling for power-law losses under the identity effort
/// function.
pub fn waterfill_power_law(prob: &AllocationProblem) -> Result<AllocationResult> {
    prob.validate()?;
    if !prob.h.is_identity() {
        return Err(Error::InvalidParameter(
            "the closed form applies to the identity effort function; use solve_general".into(),
        ));
    }
    let gamma = prob.gamma()?;
    let n = prob.p.len();
    let lambda = prob.lambda;
    let order = sorted_order(prob.p, prob.sigma_i_sq, gamma);

    let top = order[0];
    if prob.p[top].powf(gamma) * prob.sigma_i_sq[top] <= 0.0 {
        // nothing to rank: fall back to a uniform spread
        log::warn!("water-filling with an empty effective support; allocating uniformly");
        let lambda_bar = vec![lambda / n as f64; n];
        let objective = prob.objective(&lambda_bar)?;
        return Ok(AllocationResult {
            lambda_bar,
            support_size: n,
            multiplier: f64::NAN,
            objective,
        });
    }

    let mut sum_pg = 0.0;
    let mut sum_r = 0.0;
    let mut support = n;
    for k in 0..n {
        let i = order[k];
        sum_pg += prob.p[i].powf(gamma);
        sum_r += prob.sigma_sq / prob.sigma_i_sq[i];
        let breakpoint = if k + 1 < n {
            let j = order[k + 1];
            let key_next = prob.p[j].powf(gamma) * prob.sigma_i_sq[j];
            if key_next > 0.0 {
                (prob.sigma_sq / key_next) * sum_pg - sum_r
            } else {
                f64::INFINITY
            }
        } else {
            f64::INFINITY
        };
        if lambda <= breakpoint {
            support = k + 1;
            break;
        }
    }

    let multiplier = (lambda + sum_r) / sum_pg;
    let mut lambda_bar = vec![0.0; n];
    for &i in order.iter().take(support) {
        lambda_bar[i] =
            (multiplier * prob.p[i].powf(gamma) - prob.sigma_sq / prob.sigma_i_sq[i]).max(0.0);
    }
    let objective = prob.objective(&lambda_bar)?;
    Ok(AllocationResult {
        lambda_bar,
        support_size: support,
        multiplier,
        objective,
    })
}

/// Euclidean projection onto `{x >= 0, sum x = lambda}` by sort-and-threshold.
pub fn project_simplex(v: &[f64], lambda: f64) -> Vec<f64> {
    let n = v.len();
    let sum: f64 = v.iter().sum();
    if (sum - lambda).abs() <= 1e-12 * lambda.max(1.0) && v.iter().all(|&x| x >= 0.0) {
        return v.to_vec();
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = (sum - lambda) / n as f64;
    for (j, &vj) in sorted.iter().enumerate() {
        cumsum += vj;
        let candidate = (cumsum - lambda) / (j + 1) as f64;
        if vj - candidate > 0.0 {
            tau = candidate;
        } else {
            break;
        }
    }
    v.iter().map(|&x| (x - tau).max(0.0)).collect()
}

const PG_MAX_ITERS: usize = 100_000;
const ARMIJO_C: f64 = 1e-4;

/// Projected-gradient solution of the per-stage problem for any loss
/// passing the convexity check and any concave effort function.
///
/// Callers are expected to have validated the loss via
/// [`crate::loss::check_g_convexity`] once at policy construction.
pub fn solve_general(prob: &AllocationProblem) -> Result<AllocationResult> {
    prob.validate()?;
    let n = prob.p.len();
    let lambda = prob.lambda;
    // target is tighter than the contractual 1e-8 * max(1, Lambda): flat
    // directions (small p, large accumulated precision) need extra margin
    // for the allocation itself, not just the objective, to settle. When
    // the line search hits the f64 noise floor first, the contractual
    // threshold still counts as converged.
    let target = 1e-10 * lambda.max(1.0);
    let contract = 1e-8 * lambda.max(1.0);

    let mut x = vec![lambda / n as f64; n];
    let mut fx = prob.objective(&x)?;
    let mut grad = vec![0.0; n];
    prob.gradient(&x, &mut grad)?;
    let mut prev_x: Option<Vec<f64>> = None;
    let mut prev_grad: Option<Vec<f64>> = None;
    let mut step = {
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm > 0.0 {
            (lambda / n as f64) / gnorm
        } else {
            1.0
        }
    };

    let finish = |x: Vec<f64>, grad: &[f64], fx: f64| {
        let support_size = x.iter().filter(|&&v| v > 1e-12 * lambda.max(1.0)).count();
        let dual = x
            .iter()
            .zip(grad)
            .filter(|(&xi, _)| xi > 1e-12 * lambda.max(1.0))
            .map(|(_, &gi)| -gi)
            .sum::<f64>()
            / support_size.max(1) as f64;
        AllocationResult {
            lambda_bar: x,
            support_size,
            multiplier: dual,
            objective: fx,
        }
    };

    for iter in 0..PG_MAX_ITERS {
        // unit-step projected-gradient residual
        let trial: Vec<f64> = x.iter().zip(&grad).map(|(&xi, &gi)| xi - gi).collect();
        let projected = project_simplex(&trial, lambda);
        let residual: f64 = projected
            .iter()
            .zip(&x)
            .map(|(&pi, &xi)| (pi - xi) * (pi - xi))
            .sum::<f64>()
            .sqrt();
        if residual < target {
            return Ok(finish(x, &grad, fx));
        }

        // Barzilai-Borwein step from the previous iterate
        if let (Some(px), Some(pg)) = (&prev_x, &prev_grad) {
            let mut sy = 0.0;
            let mut ss = 0.0;
            for i in 0..n {
                let s = x[i] - px[i];
                let y = grad[i] - pg[i];
                sy += s * y;
                ss += s * s;
            }
            if sy > 1e-300 {
                step = ss / sy;
            }
        }
        step = step.clamp(1e-12, 1e12);

        // Armijo backtracking along the projection arc
        let mut t = step;
        let mut accepted = false;
        for _ in 0..80 {
            let candidate: Vec<f64> = x
                .iter()
                .zip(&grad)
                .map(|(&xi, &gi)| xi - t * gi)
                .collect();
            let candidate = project_simplex(&candidate, lambda);
            let fc = prob.objective(&candidate)?;
            let decrease: f64 = grad
                .iter()
                .zip(candidate.iter().zip(&x))
                .map(|(&gi, (&ci, &xi))| gi * (ci - xi))
                .sum();
            if fc <= fx + ARMIJO_C * decrease {
                prev_x = Some(std::mem::replace(&mut x, candidate));
                prev_grad = Some(grad.clone());
                fx = fc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // line search collapsed into objective noise; the iterate is as
            // good as f64 allows
            if residual < contract {
                return Ok(finish(x, &grad, fx));
            }
            return Err(Error::NonConvergence {
                iterations: iter,
                residual,
                best: x,
            });
        }
        prob.gradient(&x, &mut grad)?;

        if iter + 1 == PG_MAX_ITERS {
            if residual < contract {
                return Ok(finish(x, &grad, fx));
            }
            return Err(Error::NonConvergence {
                iterations: PG_MAX_ITERS,
                residual,
                best: x,
            });
        }
    }
    unreachable!()
}

/// Equal division of a planned multistage total into per-stage effort.
///
/// For concave `h` the equal split maximizes the accumulated precision
/// `m * h(total / m)`; for the identity any split is optimal and the equal
/// split is used for determinism.
pub fn stage_split(lambda_bar_i: f64, stages_remaining: usize, _h: &EffortFunction) -> f64 {
    lambda_bar_i / stages_remaining.max(1) as f64
}

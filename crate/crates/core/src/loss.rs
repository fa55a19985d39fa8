//! Loss functions, the per-component expected-loss kernel `g`, and the
//! convexity checks that gate the iterative allocator.
//!
//! The kernel
//!
//! ```text
//! g(sigma_i_sq, h_bar) = integral_0^inf L(sigma * theta / sqrt(sigma^2/sigma_i^2 + h_bar)) phi(theta) dtheta
//! ```
//!
//! is the conditional expected loss of a posterior-mean estimate whose
//! accumulated observation precision is `h_bar`. Closed forms are used for
//! the square loss, the absolute loss, and the 0-1 loss; everything else is
//! integrated with an adaptive Gauss-Kronrod rule.

use crate::error::{Error, Result};
use statrs::function::erf::erfc;

const SQRT_2PI: f64 = 2.506628274631000502415765284811;

/// Standard Gaussian tail probability.
#[inline]
pub fn q_function(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

#[inline]
fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// A non-decreasing loss with `L(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossSpec {
    /// `L(a) = a^q`, `q > 0`.
    Power { q: f64 },
    /// `L(a) = 0` for `a <= eps`, `1` beyond.
    ZeroOne { eps: f64 },
    /// `L(a) = 1 - exp(-b a)`, `b > 0`.
    Exponential { b: f64 },
    /// `L(a) = log(1 + b a)`, `b > 0`.
    Log { b: f64 },
    /// Quadratic below the knot, linear beyond: `a^2/2` then `d(a - d/2)`.
    Huber { delta: f64 },
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        let param = match *self {
            LossSpec::Power { q } => q,
            LossSpec::ZeroOne { eps } => eps,
            LossSpec::Exponential { b } => b,
            LossSpec::Log { b } => b,
            LossSpec::Huber { delta } => delta,
        };
        if param > 0.0 && param.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "loss parameter must be strictly positive, got {param}"
            )))
        }
    }

    /// Evaluate `L(a)` for `a >= 0`.
    pub fn loss(&self, a: f64) -> Result<f64> {
        if a < 0.0 || !a.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "loss argument must be a finite non-negative value, got {a}"
            )));
        }
        Ok(self.loss_unchecked(a))
    }

    #[inline]
    fn loss_unchecked(&self, a: f64) -> f64 {
        match *self {
            LossSpec::Power { q } => a.powf(q),
            LossSpec::ZeroOne { eps } => {
                if a > eps {
                    1.0
                } else {
                    0.0
                }
            }
            LossSpec::Exponential { b } => 1.0 - (-b * a).exp(),
            LossSpec::Log { b } => (b * a).ln_1p(),
            LossSpec::Huber { delta } => {
                if a <= delta {
                    0.5 * a * a
                } else {
                    delta * (a - 0.5 * delta)
                }
            }
        }
    }

    /// `L'(a)`; not defined for the 0-1 loss (its `g` has a closed form).
    fn loss_derivative(&self, a: f64) -> f64 {
        match *self {
            LossSpec::Power { q } => q * a.powf(q - 1.0),
            LossSpec::ZeroOne { .. } => unreachable!("0-1 loss has no pointwise derivative"),
            LossSpec::Exponential { b } => b * (-b * a).exp(),
            LossSpec::Log { b } => b / (1.0 + b * a),
            LossSpec::Huber { delta } => a.min(delta),
        }
    }

    /// Water-filling exponent `2 / (q + 2)` for power-law losses.
    pub fn gamma_exponent(&self) -> Option<f64> {
        match *self {
            LossSpec::Power { q } => Some(2.0 / (q + 2.0)),
            _ => None,
        }
    }

    /// Config/CSV syntax, e.g. `power:2`, `zero_one:0.5`.
    pub fn label(&self) -> String {
        match *self {
            LossSpec::Power { q } => format!("power:{q}"),
            LossSpec::ZeroOne { eps } => format!("zero_one:{eps}"),
            LossSpec::Exponential { b } => format!("exponential:{b}"),
            LossSpec::Log { b } => format!("log:{b}"),
            LossSpec::Huber { delta } => format!("huber:{delta}"),
        }
    }

    pub fn parse(s: &str) -> Result<LossSpec> {
        let (kind, param) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("loss spec `{s}` must look like kind:param")))?;
        let value: f64 = param
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad loss parameter in `{s}`")))?;
        let spec = match kind.trim() {
            "power" => LossSpec::Power { q: value },
            "zero_one" => LossSpec::ZeroOne { eps: value },
            "exponential" => LossSpec::Exponential { b: value },
            "log" => LossSpec::Log { b: value },
            "huber" => LossSpec::Huber { delta: value },
            other => return Err(Error::Config(format!("unknown loss kind `{other}`"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

// ---------------------------------------------------------------------------
// Gauss-Kronrod 7-15 adaptive quadrature
// ---------------------------------------------------------------------------

const XGK: [f64; 8] = [
    0.991455371120813,
    0.949107912342759,
    0.864864423359769,
    0.741531185599394,
    0.586087235467691,
    0.405845151377397,
    0.207784955007898,
    0.000000000000000,
];
const WGK: [f64; 8] = [
    0.022935322010529,
    0.063092092629979,
    0.104790010322250,
    0.140653259715525,
    0.169004726639267,
    0.190350578064785,
    0.204432940075298,
    0.209482141084728,
];
const WG: [f64; 4] = [
    0.129484966168870,
    0.279705391489277,
    0.381830050505119,
    0.417959183673469,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let hw = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let x = hw * XGK[j];
        let fv = f(c - x) + f(c + x);
        kronrod += WGK[j] * fv;
        if j % 2 == 1 {
            gauss += WG[j / 2] * fv;
        }
    }
    kronrod *= hw;
    gauss *= hw;
    (kronrod, (kronrod - gauss).abs())
}

/// Adaptive bisection on [a, b] to absolute tolerance `abs_tol`.
fn adaptive_quadrature<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64) -> Result<f64> {
    struct Seg {
        a: f64,
        b: f64,
        val: f64,
        err: f64,
    }
    let (val, err) = gk15(&f, a, b);
    let mut segs = vec![Seg { a, b, val, err }];
    loop {
        let total_err: f64 = segs.iter().map(|s| s.err).sum();
        if total_err <= abs_tol {
            return Ok(segs.iter().map(|s| s.val).sum());
        }
        if segs.len() >= 2048 {
            return Err(Error::Numerical(format!(
                "quadrature on [{a}, {b}] stalled at error {total_err:.3e} after {} segments",
                segs.len()
            )));
        }
        let worst = segs
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.err.total_cmp(&y.1.err))
            .map(|(i, _)| i)
            .unwrap();
        let seg = segs.swap_remove(worst);
        let mid = 0.5 * (seg.a + seg.b);
        let (v1, e1) = gk15(&f, seg.a, mid);
        let (v2, e2) = gk15(&f, mid, seg.b);
        segs.push(Seg { a: seg.a, b: mid, val: v1, err: e1 });
        segs.push(Seg { a: mid, b: seg.b, val: v2, err: e2 });
    }
}

// ---------------------------------------------------------------------------
// The g kernel
// ---------------------------------------------------------------------------

/// Integration range for the standard-normal weight; the tail beyond 12
/// contributes less than 1e-31.
const THETA_MAX: f64 = 12.0;
const QUAD_TOL: f64 = 1e-10;

/// Expected loss of a posterior-mean estimate: `sigma_i_sq` is the current
/// conditional variance, `h_bar` the additional accumulated precision, and
/// `sigma_sq` the unit-effort noise variance.
///
/// `sigma_i_sq = 0` (a fully determined amplitude) yields 0.
pub fn g_kernel(spec: &LossSpec, sigma_i_sq: f64, h_bar: f64, sigma_sq: f64) -> Result<f64> {
    if h_bar < 0.0 {
        return Err(Error::InvalidParameter(format!("h_bar = {h_bar} must be >= 0")));
    }
    if sigma_i_sq < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "sigma_i_sq = {sigma_i_sq} must be >= 0"
        )));
    }
    if sigma_i_sq == 0.0 {
        return Ok(0.0);
    }
    let prec = sigma_sq / sigma_i_sq + h_bar;
    let scale = (sigma_sq / prec).sqrt();
    match *spec {
        LossSpec::Power { q } if q == 2.0 => Ok(0.5 * sigma_sq / prec),
        LossSpec::Power { q } if q == 1.0 => Ok(scale / SQRT_2PI),
        LossSpec::ZeroOne { eps } => Ok(q_function(eps / scale)),
        ref other => {
            let f = |theta: f64| other.loss_unchecked(scale * theta) * std_normal_pdf(theta);
            adaptive_quadrature(f, 0.0, THETA_MAX, QUAD_TOL)
        }
    }
}

/// Gamma function based moment constant `int_0^inf theta^q phi(theta) dtheta`.
fn half_normal_moment(q: f64) -> f64 {
    use statrs::function::gamma::gamma;
    2f64.powf(0.5 * q - 1.0) * gamma(0.5 * (q + 1.0)) / std::f64::consts::PI.sqrt()
}

/// Partial derivative of [`g_kernel`] with respect to `h_bar`; the gradient
/// used by the projected-gradient allocator.
pub fn g_kernel_dh(spec: &LossSpec, sigma_i_sq: f64, h_bar: f64, sigma_sq: f64) -> Result<f64> {
    if sigma_i_sq <= 0.0 {
        return Ok(0.0);
    }
    let prec = sigma_sq / sigma_i_sq + h_bar;
    let scale = (sigma_sq / prec).sqrt();
    match *spec {
        LossSpec::Power { q } => {
            Ok(-0.5 * q * half_normal_moment(q) * sigma_sq.powf(0.5 * q) * prec.powf(-0.5 * q - 1.0))
        }
        LossSpec::ZeroOne { eps } => {
            let u = eps * prec.sqrt() / sigma_sq.sqrt();
            Ok(-std_normal_pdf(u) * eps / (2.0 * sigma_sq.sqrt() * prec.sqrt()))
        }
        ref other => {
            // d scale / d h_bar, then differentiate under the integral
            let dscale = -0.5 * sigma_sq.sqrt() * prec.powf(-1.5);
            let f = |theta: f64| {
                other.loss_derivative(scale * theta) * theta * std_normal_pdf(theta)
            };
            Ok(dscale * adaptive_quadrature(f, 0.0, THETA_MAX, QUAD_TOL)?)
        }
    }
}

// ---------------------------------------------------------------------------
// Convexity verification
// ---------------------------------------------------------------------------

/// Outcome of [`check_g_convexity`].
#[derive(Debug, Clone, Copy)]
pub struct ConvexityReport {
    /// True when `g` is numerically convex in `h_bar` everywhere tested.
    pub pass: bool,
    /// Worst normalized value of `a L''(a) + 3 L'(a)` on the test grid;
    /// `None` for the 0-1 loss. Negative values are allowed (the condition
    /// is sufficient, not necessary) but are reported.
    pub worst_loss_margin: Option<f64>,
    /// Worst second difference of `g` in `h_bar` across the test grid.
    pub worst_g_second_diff: f64,
}

/// Verify the convexity condition that makes the per-stage allocation
/// problem convex: second differences of `g` in `h_bar`, plus the stronger
/// loss-level inequality `a L'' + 3 L' >= 0` where `L` is differentiable.
pub fn check_g_convexity(spec: &LossSpec) -> ConvexityReport {
    // loss-level condition on a log-spaced grid
    let worst_loss_margin = match spec {
        LossSpec::ZeroOne { .. } => None,
        _ => {
            let mut worst = f64::INFINITY;
            let points = 121;
            for k in 0..points {
                let a = 10f64.powf(-4.0 + 8.0 * k as f64 / (points - 1) as f64);
                let step = a * 1e-4;
                let lm = spec.loss_unchecked(a - step);
                let l0 = spec.loss_unchecked(a);
                let lp = spec.loss_unchecked(a + step);
                let d1 = (lp - lm) / (2.0 * step);
                let d2 = (lp - 2.0 * l0 + lm) / (step * step);
                let margin = (a * d2 + 3.0 * d1) / (3.0 * d1.abs()).max(1e-300);
                worst = worst.min(margin);
            }
            Some(worst)
        }
    };

    // direct convexity of g in h_bar by second differences
    let mut worst_g = f64::INFINITY;
    let sigma_sq = 1.0;
    for &sig_i in &[0.05, 0.25, 1.0, 4.0] {
        let dh = 0.1;
        let mut prev = g_kernel(spec, sig_i, 0.0, sigma_sq).unwrap_or(f64::NAN);
        let mut cur = g_kernel(spec, sig_i, dh, sigma_sq).unwrap_or(f64::NAN);
        for k in 2..=100 {
            let next = g_kernel(spec, sig_i, k as f64 * dh, sigma_sq).unwrap_or(f64::NAN);
            worst_g = worst_g.min(prev - 2.0 * cur + next);
            prev = cur;
            cur = next;
        }
    }

    ConvexityReport {
        pass: worst_g >= -1e-8,
        worst_loss_margin,
        worst_g_second_diff: worst_g,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn loss_definitions() {
        assert_eq!(LossSpec::Power { q: 2.0 }.loss(3.0).unwrap(), 9.0);
        assert_eq!(LossSpec::ZeroOne { eps: 1.0 }.loss(0.5).unwrap(), 0.0);
        assert_eq!(LossSpec::ZeroOne { eps: 1.0 }.loss(2.0).unwrap(), 1.0);
        assert_relative_eq!(
            LossSpec::Log { b: 1.0 }.loss(std::f64::consts::E - 1.0).unwrap(),
            1.0,
            max_relative = 1e-12
        );
        assert!(LossSpec::Power { q: 2.0 }.loss(-0.1).is_err());
        assert!(LossSpec::Power { q: 0.0 }.validate().is_err());
    }

    #[test]
    fn parse_round_trips() {
        for s in ["power:2", "power:0.5", "zero_one:0.5", "exponential:1", "log:1", "huber:1.5"] {
            let spec = LossSpec::parse(s).unwrap();
            assert_eq!(LossSpec::parse(&spec.label()).unwrap(), spec);
        }
        assert!(LossSpec::parse("power").is_err());
        assert!(LossSpec::parse("hinge:1").is_err());
    }

    #[test]
    fn g_square_loss_closed_form() {
        // r = 1, h_bar = 1 -> 0.5 * 1/2
        assert_relative_eq!(
            g_kernel(&LossSpec::Power { q: 2.0 }, 1.0, 1.0, 1.0).unwrap(),
            0.25,
            max_relative = 1e-14
        );
        // infinite precision drives the loss to zero
        let tiny = g_kernel(&LossSpec::Power { q: 2.0 }, 1.0, 1e12, 1.0).unwrap();
        assert!(tiny < 1e-11);
        assert_eq!(g_kernel(&LossSpec::Power { q: 2.0 }, 0.0, 1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn g_zero_one_matches_q_function() {
        // eps = sigma, total precision 1 -> Q(1)
        let v = g_kernel(&LossSpec::ZeroOne { eps: 1.0 }, 1e12, 1.0, 1.0).unwrap();
        assert_relative_eq!(v, 0.15865525393145707, max_relative = 1e-10);
    }

    /// Dense trapezoid oracle, independent of the adaptive rule.
    fn trapezoid_oracle(spec: &LossSpec, sigma_i_sq: f64, h_bar: f64, sigma_sq: f64) -> f64 {
        let prec = sigma_sq / sigma_i_sq + h_bar;
        let scale = (sigma_sq / prec).sqrt();
        let n = 1_000_000usize;
        let hi = 12.0;
        let dx = hi / n as f64;
        let mut sum = 0.0;
        for k in 0..=n {
            let theta = k as f64 * dx;
            let w = if k == 0 || k == n { 0.5 } else { 1.0 };
            sum += w * spec.loss_unchecked(scale * theta) * std_normal_pdf(theta);
        }
        sum * dx
    }

    #[test]
    fn g_exponential_matches_trapezoid_oracle() {
        let spec = LossSpec::Exponential { b: 1.0 };
        let got = g_kernel(&spec, 1.0, 0.0, 1.0).unwrap();
        let want = trapezoid_oracle(&spec, 1.0, 0.0, 1.0);
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
    }

    #[test]
    fn closed_forms_agree_with_quadrature() {
        for (spec, sig_i, h_bar) in [
            (LossSpec::Power { q: 2.0 }, 0.25, 3.0),
            (LossSpec::Power { q: 1.0 }, 0.5, 0.7),
            (LossSpec::ZeroOne { eps: 0.4 }, 1.0, 2.0),
        ] {
            let closed = g_kernel(&spec, sig_i, h_bar, 1.0).unwrap();
            let prec = 1.0 / sig_i + h_bar;
            let scale = (1.0 / prec).sqrt();
            let quad = adaptive_quadrature(
                |theta| spec.loss_unchecked(scale * theta) * std_normal_pdf(theta),
                0.0,
                THETA_MAX,
                1e-12,
            )
            .unwrap();
            assert!(
                (closed - quad).abs() < 1e-8,
                "{spec:?}: closed {closed} vs quadrature {quad}"
            );
        }
    }

    #[test]
    fn g_is_non_increasing_in_h_bar() {
        let specs = [
            LossSpec::Power { q: 2.0 },
            LossSpec::Power { q: 0.5 },
            LossSpec::ZeroOne { eps: 0.5 },
            LossSpec::Exponential { b: 1.0 },
            LossSpec::Log { b: 2.0 },
            LossSpec::Huber { delta: 1.0 },
        ];
        for spec in &specs {
            for &sig_i in &[0.0625, 1.0, 9.0] {
                let mut prev = f64::INFINITY;
                for k in 0..40 {
                    let h = k as f64 * 0.5;
                    let v = g_kernel(spec, sig_i, h, 1.0).unwrap();
                    assert!(v <= prev + 1e-12, "{spec:?} increased at h_bar={h}");
                    prev = v;
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let specs = [
            LossSpec::Power { q: 2.0 },
            LossSpec::Power { q: 1.0 },
            LossSpec::Power { q: 3.0 },
            LossSpec::ZeroOne { eps: 0.5 },
            LossSpec::Exponential { b: 1.0 },
            LossSpec::Log { b: 1.0 },
            LossSpec::Huber { delta: 0.8 },
        ];
        for spec in &specs {
            // the 0-1 loss goes through erfc, whose ~1e-8 approximation error
            // is amplified by the finite-difference step
            let tol = match spec {
                LossSpec::ZeroOne { .. } => 1e-4,
                _ => 1e-6,
            };
            for &h in &[0.5, 2.0, 10.0] {
                let d = g_kernel_dh(spec, 0.25, h, 1.0).unwrap();
                let eps = 1e-5;
                let hi = g_kernel(spec, 0.25, h + eps, 1.0).unwrap();
                let lo = g_kernel(spec, 0.25, h - eps, 1.0).unwrap();
                let fd = (hi - lo) / (2.0 * eps);
                assert!(
                    (d - fd).abs() <= tol * fd.abs().max(1e-6),
                    "{spec:?} at h_bar={h}: analytic {d} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn convexity_report_passes_shipped_losses() {
        for spec in [
            LossSpec::Power { q: 2.0 },
            LossSpec::Power { q: 0.5 },
            LossSpec::Log { b: 1.0 },
            LossSpec::ZeroOne { eps: 0.5 },
            LossSpec::Exponential { b: 1.0 },
            LossSpec::Huber { delta: 1.0 },
        ] {
            let report = check_g_convexity(&spec);
            assert!(report.pass, "{spec:?}: {report:?}");
            assert!(report.worst_g_second_diff >= -1e-8);
        }
        // power-law and log losses satisfy the stronger loss-level condition
        for spec in [LossSpec::Power { q: 2.0 }, LossSpec::Power { q: 0.5 }, LossSpec::Log { b: 1.0 }] {
            let report = check_g_convexity(&spec);
            assert!(report.worst_loss_margin.unwrap() > -1e-6, "{spec:?}: {report:?}");
        }
    }
}

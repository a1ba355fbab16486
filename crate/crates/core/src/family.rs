//! Response families: conditional log-density and its derivatives with
//! respect to the linear predictor and the dispersion, CDFs, and
//! mean/variance functions.

use libm::{exp, log, log1p};

use crate::error::{Error, Result};
use crate::model::{check_support, Family};
use crate::special::{
    beta_inc, digamma, digamma_shift, gamma_p, gamma_q, inv_mills, ln_gamma, ln_gamma_shift, logistic, norm_cdf, norm_logcdf, softplus,
    tetragamma, trigamma, LN_SQRT_2PI,
};

/// `log f(y | eta)` and its first three derivatives in `eta`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FamilyEval {
    pub logf: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

/// Partial derivatives with respect to the dispersion `phi` of
/// `log f`, `d1` and `d2`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DispersionEval {
    pub logf: f64,
    pub d1: f64,
    pub d2: f64,
}

/// Distribution function at `y` and its left limit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cdf {
    /// `F(y-)`.
    pub lower: f64,
    /// `F(y)`.
    pub upper: f64,
}

fn check_phi(phi: f64) -> Result<()> {
    if phi > 0.0 && phi.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name: "phi",
            value: phi,
            reason: "dispersion must be positive and finite",
        })
    }
}

fn check_nu(nu: f64) -> Result<()> {
    if nu > 1.0 && nu < 2.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name: "nu",
            value: nu,
            reason: "Tweedie power must lie in (1, 2)",
        })
    }
}

impl Family {
    fn validate_args(self, y: f64, eta: f64, phi: f64, nu: f64) -> Result<()> {
        check_support(self, y)?;
        if !eta.is_finite() {
            return Err(Error::InvalidParameter {
                name: "eta",
                value: eta,
                reason: "linear predictor must be finite",
            });
        }
        if self.has_dispersion() {
            check_phi(phi)?;
        }
        if self == Family::TweedieLog {
            check_nu(nu)?;
        }
        Ok(())
    }

    /// Log-density and `eta`-derivatives. `phi` is ignored by Poisson and
    /// Bernoulli families, `nu` by everything except Tweedie.
    pub fn eval(self, y: f64, eta: f64, phi: f64, nu: f64) -> Result<FamilyEval> {
        self.validate_args(y, eta, phi, nu)?;
        eval_trusted(self, y, eta, phi, nu)
    }

    /// Dispersion derivatives of `log f`, `d1`, `d2`. All zero for families
    /// without a dispersion.
    pub fn eval_dispersion(self, y: f64, eta: f64, phi: f64, nu: f64) -> Result<DispersionEval> {
        self.validate_args(y, eta, phi, nu)?;
        dispersion_trusted(self, y, eta, phi, nu)
    }

    /// Inverse link.
    pub fn mean(self, eta: f64) -> f64 {
        match self {
            Family::GaussianIdentity => eta,
            Family::PoissonLog | Family::NegBinomialLog | Family::TweedieLog => exp(eta),
            Family::BernoulliLogit | Family::BetaLogit => logistic(eta),
            Family::BernoulliProbit => norm_cdf(eta),
        }
    }

    /// Link function.
    pub fn link(self, mu: f64) -> f64 {
        match self {
            Family::GaussianIdentity => mu,
            Family::PoissonLog | Family::NegBinomialLog | Family::TweedieLog => log(mu),
            Family::BernoulliLogit | Family::BetaLogit => log(mu / (1.0 - mu)),
            Family::BernoulliProbit => crate::special::norm_quantile(mu),
        }
    }

    /// Conditional variance as a function of the mean.
    pub fn variance(self, mu: f64, phi: f64, nu: f64) -> f64 {
        match self {
            Family::GaussianIdentity => phi * phi,
            Family::PoissonLog => mu,
            Family::NegBinomialLog => mu + phi * mu * mu,
            Family::BernoulliLogit | Family::BernoulliProbit => mu * (1.0 - mu),
            Family::TweedieLog => phi * libm::pow(mu, nu),
            Family::BetaLogit => mu * (1.0 - mu) / (1.0 + phi),
        }
    }

    /// `F(y)` and `F(y-)`.
    pub fn cdf(self, y: f64, eta: f64, phi: f64, nu: f64) -> Result<Cdf> {
        self.validate_args(y, eta, phi, nu)?;
        cdf_trusted(self, y, eta, phi, nu)
    }
}

/// Family evaluation without argument validation.
pub(crate) fn eval_trusted(family: Family, y: f64, eta: f64, phi: f64, nu: f64) -> Result<FamilyEval> {
    Ok(match family {
        Family::GaussianIdentity => {
            let s2 = phi * phi;
            let r = y - eta;
            FamilyEval {
                logf: -LN_SQRT_2PI - log(phi) - 0.5 * r * r / s2,
                d1: r / s2,
                d2: -1.0 / s2,
                d3: 0.0,
            }
        }
        Family::PoissonLog => {
            let mu = exp(eta);
            FamilyEval {
                logf: y * eta - mu - ln_gamma(y + 1.0),
                d1: y - mu,
                d2: -mu,
                d3: -mu,
            }
        }
        Family::NegBinomialLog => {
            let r = 1.0 / phi;
            let lphi = log(phi);
            let t = logistic(lphi + eta);
            let tc = logistic(-(lphi + eta));
            let w = (y + r) * t * tc;
            FamilyEval {
                logf: ln_gamma_shift(y, phi) - ln_gamma(y + 1.0) + y * eta - (y + r) * softplus(lphi + eta),
                // y - (y + r) t, without cancellation when t is near one
                d1: y * tc - r * t,
                d2: -w,
                d3: -w * (tc - t),
            }
        }
        Family::BernoulliLogit => {
            let mu = logistic(eta);
            let muc = logistic(-eta);
            let v = mu * muc;
            FamilyEval {
                logf: y * eta - softplus(eta),
                d1: y * muc - (1.0 - y) * mu,
                d2: -v,
                d3: -v * (muc - mu),
            }
        }
        Family::BernoulliProbit => {
            let s = 2.0 * y - 1.0;
            let x = s * eta;
            let mills = inv_mills(x);
            let d2 = -mills * (mills + x);
            FamilyEval {
                logf: norm_logcdf(x),
                d1: s * mills,
                d2,
                d3: s * (-d2 * (2.0 * mills + x) - mills),
            }
        }
        Family::TweedieLog => {
            let b = exp((2.0 - nu) * eta);
            if y == 0.0 {
                FamilyEval {
                    logf: -b / (phi * (2.0 - nu)),
                    d1: -b / phi,
                    d2: -(2.0 - nu) * b / phi,
                    d3: -(2.0 - nu) * (2.0 - nu) * b / phi,
                }
            } else {
                let a = exp((1.0 - nu) * eta);
                let series = tweedie_series(y, phi, nu)?;
                FamilyEval {
                    logf: series.log_w + (y * a / (1.0 - nu) - b / (2.0 - nu)) / phi - log(y),
                    d1: (y * a - b) / phi,
                    d2: (y * (1.0 - nu) * a - (2.0 - nu) * b) / phi,
                    d3: (y * (1.0 - nu) * (1.0 - nu) * a - (2.0 - nu) * (2.0 - nu) * b) / phi,
                }
            }
        }
        Family::BetaLogit => {
            let b = BetaTerms::new(y, eta, phi);
            FamilyEval {
                logf: ln_gamma(phi) - ln_gamma(b.a) - ln_gamma(b.b) + (b.a - 1.0) * b.ly + (b.b - 1.0) * b.l1y,
                d1: phi * b.mu1 * b.t,
                d2: phi * b.mu2 * b.t + phi * phi * b.mu1 * b.mu1 * b.s,
                d3: phi
                    * (b.mu3 * b.t
                        + 3.0 * b.mu1 * b.mu2 * phi * b.s
                        + b.mu1 * b.mu1 * b.mu1 * phi * phi * (tetragamma(b.b) - tetragamma(b.a))),
            }
        }
    })
}

/// Like `eval_trusted`, but `logf` omits every term that does not depend on
/// `eta`; for use where only differences in `eta` matter.
pub(crate) fn eval_kernel(family: Family, y: f64, eta: f64, phi: f64, nu: f64) -> Result<FamilyEval> {
    match family {
        Family::PoissonLog => {
            let mu = exp(eta);
            Ok(FamilyEval {
                logf: y * eta - mu,
                d1: y - mu,
                d2: -mu,
                d3: -mu,
            })
        }
        Family::NegBinomialLog => {
            let r = 1.0 / phi;
            let lphi = log(phi);
            let t = logistic(lphi + eta);
            let tc = logistic(-(lphi + eta));
            let w = (y + r) * t * tc;
            Ok(FamilyEval {
                logf: y * eta - (y + r) * softplus(lphi + eta),
                d1: y * tc - r * t,
                d2: -w,
                d3: -w * (tc - t),
            })
        }
        Family::TweedieLog if y > 0.0 => {
            let a = exp((1.0 - nu) * eta);
            let b = exp((2.0 - nu) * eta);
            Ok(FamilyEval {
                logf: (y * a / (1.0 - nu) - b / (2.0 - nu)) / phi,
                d1: (y * a - b) / phi,
                d2: (y * (1.0 - nu) * a - (2.0 - nu) * b) / phi,
                d3: (y * (1.0 - nu) * (1.0 - nu) * a - (2.0 - nu) * (2.0 - nu) * b) / phi,
            })
        }
        _ => eval_trusted(family, y, eta, phi, nu),
    }
}

/// `eval_trusted` and `dispersion_trusted` together, summing the Tweedie
/// series once.
pub(crate) fn eval_both(family: Family, y: f64, eta: f64, phi: f64, nu: f64) -> Result<(FamilyEval, DispersionEval)> {
    if family != Family::TweedieLog || y == 0.0 {
        return Ok((eval_trusted(family, y, eta, phi, nu)?, dispersion_trusted(family, y, eta, phi, nu)?));
    }
    let a = exp((1.0 - nu) * eta);
    let b = exp((2.0 - nu) * eta);
    let series = tweedie_series(y, phi, nu)?;
    let kernel = y * a / (1.0 - nu) - b / (2.0 - nu);
    let e = FamilyEval {
        logf: series.log_w + kernel / phi - log(y),
        d1: (y * a - b) / phi,
        d2: (y * (1.0 - nu) * a - (2.0 - nu) * b) / phi,
        d3: (y * (1.0 - nu) * (1.0 - nu) * a - (2.0 - nu) * (2.0 - nu) * b) / phi,
    };
    let d = DispersionEval {
        logf: -series.mean_index / ((nu - 1.0) * phi) - kernel / (phi * phi),
        d1: -e.d1 / phi,
        d2: -e.d2 / phi,
    };
    Ok((e, d))
}

/// Intermediate quantities shared by the beta log-density derivatives.
struct BetaTerms {
    mu: f64,
    mu1: f64,
    mu2: f64,
    mu3: f64,
    a: f64,
    b: f64,
    ly: f64,
    l1y: f64,
    /// `-psi(a) + psi(b) + log y - log(1 - y)`
    t: f64,
    /// `-psi1(a) - psi1(b)`
    s: f64,
}

impl BetaTerms {
    fn new(y: f64, eta: f64, phi: f64) -> Self {
        let mu = logistic(eta);
        let one_minus = logistic(-eta);
        let mu1 = mu * one_minus;
        let a = mu * phi;
        let b = one_minus * phi;
        let ly = log(y);
        let l1y = log1p(-y);
        BetaTerms {
            mu,
            mu1,
            mu2: mu1 * (one_minus - mu),
            mu3: mu1 * (1.0 - 6.0 * mu * one_minus),
            a,
            b,
            ly,
            l1y,
            t: -digamma(a) + digamma(b) + ly - l1y,
            s: -trigamma(a) - trigamma(b),
        }
    }
}

pub(crate) fn dispersion_trusted(family: Family, y: f64, eta: f64, phi: f64, nu: f64) -> Result<DispersionEval> {
    Ok(match family {
        Family::PoissonLog | Family::BernoulliLogit | Family::BernoulliProbit => DispersionEval::default(),
        Family::GaussianIdentity => {
            let r = y - eta;
            let p3 = phi * phi * phi;
            DispersionEval {
                logf: -1.0 / phi + r * r / p3,
                d1: -2.0 * r / p3,
                d2: 2.0 / p3,
            }
        }
        Family::NegBinomialLog => {
            let r = 1.0 / phi;
            let lphi = log(phi);
            let t = logistic(lphi + eta);
            let tc = logistic(-(lphi + eta));
            let digamma_diff = digamma_shift(y, r);
            let d1 = y * tc - r * t;
            DispersionEval {
                logf: -(digamma_diff - softplus(lphi + eta)) / (phi * phi) + d1 / phi,
                d1: -d1 * t / phi,
                d2: -(t / phi) * tc * (y - 2.0 * (y + r) * t),
            }
        }
        Family::TweedieLog => {
            let b = exp((2.0 - nu) * eta);
            if y == 0.0 {
                let e = eval_trusted(family, y, eta, phi, nu)?;
                DispersionEval {
                    logf: b / (phi * phi * (2.0 - nu)),
                    d1: -e.d1 / phi,
                    d2: -e.d2 / phi,
                }
            } else {
                let a = exp((1.0 - nu) * eta);
                let series = tweedie_series(y, phi, nu)?;
                let d1 = (y * a - b) / phi;
                let d2 = (y * (1.0 - nu) * a - (2.0 - nu) * b) / phi;
                DispersionEval {
                    logf: -series.mean_index / ((nu - 1.0) * phi) - (y * a / (1.0 - nu) - b / (2.0 - nu)) / (phi * phi),
                    d1: -d1 / phi,
                    d2: -d2 / phi,
                }
            }
        }
        Family::BetaLogit => {
            let bt = BetaTerms::new(y, eta, phi);
            let (mu, om) = (bt.mu, 1.0 - bt.mu);
            let t_phi = -mu * trigamma(bt.a) + om * trigamma(bt.b);
            let s_phi = -mu * tetragamma(bt.a) - om * tetragamma(bt.b);
            DispersionEval {
                logf: digamma(phi) - mu * digamma(bt.a) - om * digamma(bt.b) + mu * bt.ly + om * bt.l1y,
                d1: bt.mu1 * bt.t + phi * bt.mu1 * t_phi,
                d2: bt.mu2 * bt.t
                    + phi * bt.mu2 * t_phi
                    + 2.0 * phi * bt.mu1 * bt.mu1 * bt.s
                    + phi * phi * bt.mu1 * bt.mu1 * s_phi,
            }
        }
    })
}

pub(crate) fn cdf_trusted(family: Family, y: f64, eta: f64, phi: f64, nu: f64) -> Result<Cdf> {
    let continuous = |f: f64| Cdf { lower: f, upper: f };
    Ok(match family {
        Family::GaussianIdentity => continuous(norm_cdf((y - eta) / phi)),
        Family::PoissonLog => {
            let mu = exp(eta);
            Cdf {
                lower: if y > 0.0 { gamma_q(y, mu) } else { 0.0 },
                upper: gamma_q(y + 1.0, mu),
            }
        }
        Family::NegBinomialLog => {
            let r = 1.0 / phi;
            let prob = logistic(-(log(phi) + eta));
            Cdf {
                lower: if y > 0.0 { beta_inc(r, y, prob) } else { 0.0 },
                upper: beta_inc(r, y + 1.0, prob),
            }
        }
        Family::BernoulliLogit | Family::BernoulliProbit => {
            let mu = family.mean(eta);
            if y == 0.0 {
                Cdf {
                    lower: 0.0,
                    upper: 1.0 - mu,
                }
            } else {
                Cdf {
                    lower: 1.0 - mu,
                    upper: 1.0,
                }
            }
        }
        Family::TweedieLog => {
            let mu = exp(eta);
            let cp = CompoundPoissonGamma::new(mu, phi, nu);
            let atom = exp(-cp.rate);
            if y == 0.0 {
                Cdf {
                    lower: 0.0,
                    upper: atom,
                }
            } else {
                continuous(cp.cdf_positive(y))
            }
        }
        Family::BetaLogit => {
            let mu = logistic(eta);
            continuous(beta_inc(mu * phi, logistic(-eta) * phi, y))
        }
    })
}

/// Poisson-sum-of-gammas representation of a Tweedie variable with
/// power in (1, 2).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompoundPoissonGamma {
    /// Poisson rate of the number of gamma summands.
    pub rate: f64,
    /// Gamma shape of each summand.
    pub shape: f64,
    /// Gamma scale of each summand.
    pub scale: f64,
}

impl CompoundPoissonGamma {
    pub fn new(mu: f64, phi: f64, nu: f64) -> Self {
        CompoundPoissonGamma {
            rate: libm::pow(mu, 2.0 - nu) / (phi * (2.0 - nu)),
            shape: (2.0 - nu) / (nu - 1.0),
            scale: phi * (nu - 1.0) * libm::pow(mu, nu - 1.0),
        }
    }

    /// `P(Y <= y)` for `y > 0`, summing Poisson-weighted gamma CDFs.
    fn cdf_positive(&self, y: f64) -> f64 {
        let mut total = exp(-self.rate);
        let log_rate = log(self.rate);
        let mode = libm::floor(self.rate).max(1.0) as u64;
        let log_pois = |k: u64| k as f64 * log_rate - self.rate - ln_gamma(k as f64 + 1.0);
        let mut k = mode;
        loop {
            let w = exp(log_pois(k));
            total += w * gamma_p(k as f64 * self.shape, y / self.scale);
            if k > mode && w < 1e-17 {
                break;
            }
            k += 1;
        }
        for k in (1..mode).rev() {
            let w = exp(log_pois(k));
            total += w * gamma_p(k as f64 * self.shape, y / self.scale);
            if w < 1e-17 {
                break;
            }
        }
        total.min(1.0)
    }
}

/// Result of summing the generalized Bessel series of the Tweedie density.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TweedieSeries {
    /// `log W(y, phi, nu)`.
    pub log_w: f64,
    /// Weighted mean of the summation index, `sum k W_k / sum W_k`.
    pub mean_index: f64,
    /// Number of terms summed.
    pub terms: usize,
}

const SERIES_CAP: usize = 1_000_000;
/// Terms smaller than `exp(-40)` relative to the largest are dropped.
const SERIES_LOG_CUTOFF: f64 = -40.0;

/// `log W(y, phi, nu)` for `y > 0`.
pub fn tweedie_log_w(y: f64, phi: f64, nu: f64) -> Result<f64> {
    if !(y > 0.0) {
        return Err(Error::Domain {
            family: Family::TweedieLog,
            y,
            reason: "the series is defined for y > 0",
        });
    }
    check_phi(phi)?;
    check_nu(nu)?;
    tweedie_series(y, phi, nu).map(|s| s.log_w)
}

/// Sums the series outward from its dominant index, in log space.
pub fn tweedie_series(y: f64, phi: f64, nu: f64) -> Result<TweedieSeries> {
    tweedie_series_with_cutoff(y, phi, nu, SERIES_LOG_CUTOFF, None)
}

/// Series with an explicit relative cutoff and optional extra terms past the
/// cutoff on both sides (used for convergence self-checks).
pub fn tweedie_series_with_cutoff(
    y: f64,
    phi: f64,
    nu: f64,
    log_cutoff: f64,
    extra_terms: Option<usize>,
) -> Result<TweedieSeries> {
    let alpha = (2.0 - nu) / (nu - 1.0);
    let z = alpha * log(y) - alpha * log(nu - 1.0) - log(phi) / (nu - 1.0) - log(2.0 - nu);
    let log_term = |k: f64| k * z - ln_gamma(k + 1.0) - ln_gamma(k * alpha);
    let k_star = libm::round(libm::pow(y, 2.0 - nu) / (phi * (2.0 - nu))).max(1.0);
    let peak = log_term(k_star);
    let extra = extra_terms.unwrap_or(0);

    let mut sum = 0.0;
    let mut weighted = 0.0;
    let mut terms = 0usize;
    let mut add = |k: f64, lt: f64| {
        let w = exp(lt - peak);
        sum += w;
        weighted += k * w;
    };

    let mut k = k_star;
    let mut past = 0usize;
    loop {
        let lt = log_term(k);
        add(k, lt);
        terms += 1;
        if lt - peak < log_cutoff {
            past += 1;
            if past > extra {
                break;
            }
        }
        if terms > SERIES_CAP {
            return Err(Error::SeriesNonConvergence { y, phi, nu, terms });
        }
        k += 1.0;
    }
    let mut k = k_star - 1.0;
    let mut past = 0usize;
    while k >= 1.0 {
        let lt = log_term(k);
        add(k, lt);
        terms += 1;
        if lt - peak < log_cutoff {
            past += 1;
            if past > extra {
                break;
            }
        }
        if terms > SERIES_CAP {
            return Err(Error::SeriesNonConvergence { y, phi, nu, terms });
        }
        k -= 1.0;
    }
    Ok(TweedieSeries {
        log_w: peak + log(sum),
        mean_index: weighted / sum,
        terms,
    })
}

//! Data generation from the model.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, Normal, Poisson, StandardNormal};

use crate::error::Result;
use crate::model::{linear_predictor, Family, ModelSpec, Parameters, ResponseData};

/// Keeps beta draws strictly inside (0, 1).
const BETA_EDGE: f64 = 1e-12;

/// RNG for a `(seed, stream)` pair.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct Simulated {
    pub data: ResponseData,
    /// Latent scores used to generate the data, n x p.
    pub scores: DMatrix<f64>,
}

/// Draws one response from the family at linear predictor `eta`.
pub fn sample_response<R: Rng + ?Sized>(family: Family, eta: f64, phi: f64, nu: f64, rng: &mut R) -> f64 {
    let mu = family.mean(eta);
    match family {
        Family::GaussianIdentity => Normal::new(mu, phi).expect("positive sd").sample(rng),
        Family::PoissonLog => poisson(mu, rng),
        Family::NegBinomialLog => {
            // Var = mu + phi mu^2
            let rate = Gamma::new(1.0 / phi, phi * mu).expect("positive gamma").sample(rng);
            poisson(rate, rng)
        }
        Family::BernoulliLogit | Family::BernoulliProbit => {
            if rng.gen::<f64>() < mu {
                1.0
            } else {
                0.0
            }
        }
        Family::TweedieLog => {
            let lambda0 = libm::pow(mu, 2.0 - nu) / (phi * (2.0 - nu));
            let count = poisson(lambda0, rng);
            if count == 0.0 {
                0.0
            } else {
                let shape = (2.0 - nu) / (nu - 1.0);
                let scale = phi * (nu - 1.0) * libm::pow(mu, nu - 1.0);
                Gamma::new(count * shape, scale).expect("positive gamma").sample(rng)
            }
        }
        Family::BetaLogit => {
            let v = Beta::new(mu * phi, (1.0 - mu) * phi).expect("positive beta").sample(rng);
            v.clamp(BETA_EDGE, 1.0 - BETA_EDGE)
        }
    }
}

fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> f64 {
    if !(mean > 0.0) {
        return 0.0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng)
}

/// Simulates responses given covariates `x` and either supplied scores or
/// standard-normal draws.
pub fn simulate_dataset<R: Rng + ?Sized>(
    spec: &ModelSpec,
    truth: &Parameters,
    x: &DMatrix<f64>,
    scores: Option<&DMatrix<f64>>,
    rng: &mut R,
) -> Result<Simulated> {
    spec.validate()?;
    truth.validate(spec)?;
    let u = match scores {
        Some(s) => s.clone(),
        None => DMatrix::from_fn(spec.n, spec.p, |_, _| StandardNormal.sample(rng)),
    };
    let eta = linear_predictor(spec, truth, x, &u)?;
    let y = DMatrix::from_fn(spec.n, spec.m, |i, j| {
        sample_response(spec.family, eta[(i, j)], truth.phi_j(j), spec.nu(), rng)
    });
    Ok(Simulated {
        data: ResponseData::new(y, x.clone())?,
        scores: u,
    })
}

/// Standard-normal covariates, n x q.
pub fn synthetic_covariates<R: Rng + ?Sized>(n: usize, q: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(n, q, |_, _| StandardNormal.sample(rng))
}

/// Random true parameters: intercepts and slopes `Unif(-1, 1)`, loadings
/// `Unif(-1, 1)` below the diagonal and `Unif(0.5, 1.5)` on it, family
/// specific dispersions, zero row effects.
pub fn synthetic_truth<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Parameters {
    let mut params = Parameters::neutral(spec);
    for j in 0..spec.m {
        params.beta0[j] = rng.gen_range(-1.0..1.0);
        for c in 0..spec.q {
            params.b[(j, c)] = rng.gen_range(-1.0..1.0);
        }
        for k in 0..spec.p.min(j + 1) {
            params.gamma[(j, k)] = if j == k {
                rng.gen_range(0.5..1.5)
            } else {
                rng.gen_range(-1.0..1.0)
            };
        }
    }
    let (lo, hi) = dispersion_range(spec.family);
    if let Some(phi) = params.phi.as_mut() {
        for v in phi.iter_mut() {
            *v = rng.gen_range(lo..hi);
        }
    }
    params
}

fn dispersion_range(family: Family) -> (f64, f64) {
    match family {
        Family::GaussianIdentity => (0.5, 1.5),
        Family::NegBinomialLog => (0.2, 1.0),
        Family::TweedieLog => (0.5, 1.5),
        Family::BetaLogit => (1.0, 3.0),
        _ => (1.0, 2.0),
    }
}

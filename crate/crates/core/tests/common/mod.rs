#![allow(dead_code)]

use eva_gllvm_core::Family;

/// 7-point Gauss / 15-point Kronrod nodes on [-1, 1].
const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for k in 0..7 {
        let x = h * XGK[k];
        let s = f(c - x) + f(c + x);
        kronrod += WGK[k] * s;
        if k % 2 == 1 {
            gauss += WG[k / 2] * s;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Adaptive Gauss-Kronrod quadrature by recursive bisection.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        let (v, err) = gk15(f, a, b);
        if err <= tol || depth == 0 {
            return v;
        }
        let c = 0.5 * (a + b);
        rec(f, a, c, 0.5 * tol, depth - 1) + rec(f, c, b, 0.5 * tol, depth - 1)
    }
    rec(f, a, b, tol, 40)
}

pub fn logf(family: Family, y: f64, eta: f64, phi: f64, nu: f64) -> f64 {
    family.eval(y, eta, phi, nu).unwrap().logf
}

/// Central difference.
pub fn central(f: &dyn Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Second central difference.
pub fn central2(f: &dyn Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h)
}

/// Maps a uniform draw to a point of the family's support.
pub fn support_point(family: Family, u: f64) -> f64 {
    match family {
        Family::GaussianIdentity => 6.0 * (u - 0.5),
        Family::PoissonLog | Family::NegBinomialLog => (u * 12.0).floor(),
        Family::BernoulliLogit | Family::BernoulliProbit => (u > 0.5) as u8 as f64,
        Family::TweedieLog => {
            if u < 0.2 {
                0.0
            } else {
                8.0 * (u - 0.2)
            }
        }
        Family::BetaLogit => 0.02 + 0.96 * u,
    }
}

use eva_gllvm_core::{CovStructure, Layout, ModelSpec, Parameters, ResponseData, VariationalParams};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random valid instance: data on the family's support, parameters with
/// moderate magnitudes, and random variational parameters.
pub fn random_instance(
    family: Family,
    n: usize,
    m: usize,
    p: usize,
    q: usize,
    row_effects: bool,
    seed: u64,
) -> (ModelSpec, ResponseData, Parameters, VariationalParams) {
    let mut r = rng(seed);
    let spec = ModelSpec::new(family, n, m, p, q).unwrap().with_row_effects(row_effects).unwrap();
    let y = DMatrix::from_fn(n, m, |_, _| support_point(family, r.gen::<f64>()));
    let x = DMatrix::from_fn(n, q, |_, _| r.gen_range(-1.0..1.0));
    let data = ResponseData::new(y, x).unwrap();
    let mut params = Parameters::neutral(&spec);
    for j in 0..m {
        params.beta0[j] = r.gen_range(-0.5..0.5);
        for c in 0..q {
            params.b[(j, c)] = r.gen_range(-0.5..0.5);
        }
        for k in 0..p.min(j + 1) {
            params.gamma[(j, k)] = if j == k { r.gen_range(0.3..1.0) } else { r.gen_range(-0.7..0.7) };
        }
    }
    if let Some(phi) = params.phi.as_mut() {
        for v in phi.iter_mut() {
            *v = r.gen_range(0.5..2.0);
        }
    }
    if let Some(alpha) = params.alpha.as_mut() {
        for v in alpha.iter_mut().skip(1) {
            *v = r.gen_range(-0.3..0.3);
        }
    }
    let mut var = VariationalParams::isotropic(n, p, 1.0);
    for i in 0..n {
        for k in 0..p {
            var.a[(i, k)] = r.gen_range(-0.8..0.8);
            for c in 0..=k {
                var.chol[i][(k, c)] = if k == c { r.gen_range(0.3..1.0) } else { r.gen_range(-0.3..0.3) };
            }
        }
    }
    (spec, data, params, var)
}

/// Sets off-diagonal Cholesky entries to zero.
pub fn diagonalize(var: &mut VariationalParams) {
    for l in var.chol.iter_mut() {
        for r in 0..l.nrows() {
            for c in 0..r {
                l[(r, c)] = 0.0;
            }
        }
    }
}

/// Central-difference gradient with step `1e-6 (1 + |theta_k|)`.
pub fn fd_gradient(f: &dyn Fn(&[f64]) -> f64, theta: &[f64]) -> Vec<f64> {
    let mut t = theta.to_vec();
    (0..theta.len())
        .map(|k| {
            let h = 1e-6 * (1.0 + theta[k].abs());
            t[k] = theta[k] + h;
            let up = f(&t);
            t[k] = theta[k] - h;
            let down = f(&t);
            t[k] = theta[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|g - fd| / (1 + |g|)`.
pub fn max_rel_error(g: &[f64], fd: &[f64]) -> (f64, usize) {
    g.iter()
        .zip(fd)
        .enumerate()
        .map(|(k, (a, b))| ((a - b).abs() / (1.0 + a.abs()), k))
        .fold((0.0, 0), |acc, v| if v.0 > acc.0 { v } else { acc })
}

pub fn layout(spec: &ModelSpec, structure: CovStructure) -> Layout {
    Layout::new(spec, structure)
}

//! Sobolev norms H^s and L^p_s defined through the spectral calculus, operator
//! bounds between them, and the embedding L^p_s ⊆ L^q.
//!
//! (1+λ) is continuous at λ = 0, so all norms act on every mode including
//! zero modes; H^0 is then exactly L²(μ).

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::psido::spectral_weights;
use crate::spectral::EigenBasis;
use crate::symbol::Symbol;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SobolevNorm {
    pub s: f64,
    pub p: f64,
    /// Dimension used in the exponents (the basis's measured d).
    pub d: f64,
}

impl SobolevNorm {
    pub fn new(s: f64, p: f64, basis: &EigenBasis) -> Result<Self> {
        if !(p >= 1.0) {
            return invalid("integrability exponent p must be ≥ 1");
        }
        Ok(SobolevNorm { s, p, d: basis.d })
    }

    pub fn eval(&self, u: &[f64], basis: &EigenBasis) -> f64 {
        if self.p == 2.0 {
            hs_norm(u, self.s, basis)
        } else {
            lp_s_norm(u, self.s, self.p, basis)
        }
    }
}

/// (1+λ)^{s/(d+1)} on every mode.
fn bessel_weights(basis: &EigenBasis, s: f64) -> Vec<f64> {
    let e = s / (basis.d + 1.0);
    basis.eigenvalues.iter().map(|l| (1.0 + l).powf(e)).collect()
}

/// (Σ_λ (1+λ)^{2s/(d+1)} ‖P_λ u‖²)^{1/2}.
pub fn hs_norm(u: &[f64], s: f64, basis: &EigenBasis) -> f64 {
    let c = basis.coefficients(u);
    let w = bessel_weights(basis, s);
    c.iter().zip(&w).map(|(c, w)| (c * w) * (c * w)).sum::<f64>().sqrt()
}

/// (I−Δ)^{s/(d+1)} u.
pub fn bessel_lift(u: &[f64], s: f64, basis: &EigenBasis) -> Vec<f64> {
    let c = basis.coefficients(u);
    let w = bessel_weights(basis, s);
    let lifted: Vec<f64> = c.iter().zip(&w).map(|(c, w)| c * w).collect();
    basis.synthesize(&lifted)
}

/// Mass-weighted ℓ^p norm; p = ∞ gives the max.
pub fn lp_norm(f: &[f64], p: f64, mass: &[f64]) -> f64 {
    if p.is_infinite() {
        return f.iter().fold(0.0, |a, x| a.max(x.abs()));
    }
    f.iter().zip(mass).map(|(x, m)| x.abs().powf(p) * m).sum::<f64>().powf(1.0 / p)
}

/// ‖(I−Δ)^{s/(d+1)} u‖_{L^p(μ)}.
pub fn lp_s_norm(u: &[f64], s: f64, p: f64, basis: &EigenBasis) -> f64 {
    lp_norm(&bessel_lift(u, s, basis), p, basis.mass())
}

#[derive(Clone, Debug, Serialize)]
pub struct OpBound {
    pub symbol: String,
    pub m: f64,
    pub s: f64,
    pub d: f64,
    pub c: f64,
    pub argmax_index: usize,
    pub argmax_lambda: f64,
}

/// Smallest C with ‖p(−Δ)u‖_{H^{s−m}} ≤ C ‖u‖_{H^s}: the operator is diagonal,
/// so C = max |p(λ_n)| (1+λ_n)^{−m/(d+1)} over the modes p acts on.
pub fn op_bound_hs(p: &Symbol, m: f64, s: f64, basis: &EigenBasis) -> Result<OpBound> {
    let (r, w) = spectral_weights(p, basis)?;
    let mut best = (f64::NEG_INFINITY, r.start);
    for (i, k) in r.clone().enumerate() {
        let v = w[i].norm() * (1.0 + basis.eigenvalues[k]).powf(-m / (basis.d + 1.0));
        if v > best.0 {
            best = (v, k);
        }
    }
    if r.is_empty() {
        return invalid("symbol acts on no modes");
    }
    Ok(OpBound {
        symbol: p.name.clone(),
        m,
        s,
        d: basis.d,
        c: best.0,
        argmax_index: best.1,
        argmax_lambda: basis.eigenvalues[best.1],
    })
}

/// ‖p(−Δ)u‖_{H^{s−m}} / ‖u‖_{H^s} for one input.
pub fn hs_ratio(p: &Symbol, m: f64, s: f64, basis: &EigenBasis, u: &[f64]) -> Result<f64> {
    let (r, w) = spectral_weights(p, basis)?;
    let c = basis.coefficients(u);
    let up = bessel_weights(basis, s - m);
    let down = bessel_weights(basis, s);
    let mut num = 0.0;
    for (i, k) in r.enumerate() {
        num += (w[i] * c[k] * up[k]).norm_sqr();
    }
    let den: f64 = c.iter().zip(&down).map(|(c, w)| (c * w) * (c * w)).sum();
    Ok((num / den).sqrt())
}

#[derive(Clone, Debug, Serialize)]
pub struct EmbeddingReport {
    pub s: f64,
    pub p: f64,
    pub q: f64,
    pub d: f64,
    pub level: usize,
    pub trials: usize,
    pub max_ratio: f64,
    /// Which family produced the max: "rough", "vertex", "smooth" or "mode:<k>".
    pub argmax: String,
}

/// The exponent q with 1/q = 1/p − s/d, when s < d/p.
pub fn embedding_exponent(s: f64, p: f64, d: f64) -> Result<f64> {
    if !(s < d / p) || s < 0.0 || p < 1.0 {
        return invalid(format!("embedding needs 0 ≤ s < d/p (s = {s}, d/p = {})", d / p));
    }
    let inv = 1.0 / p - s / d;
    Ok(1.0 / inv)
}

/// max ‖u‖_q / ‖u‖_{L^p_s} over a deterministic panel of random inputs:
/// rough (±1 coefficients on every mode), raw vertex noise, smooth
/// (coefficients ±(1+λ)^{-1}) and single eigenfunctions.
pub fn embedding_check(s: f64, p: f64, q: f64, basis: &EigenBasis, trials: usize, seed: u64) -> Result<EmbeddingReport> {
    let want = embedding_exponent(s, p, basis.d)?;
    if (1.0 / q - 1.0 / want).abs() > 1e-9 {
        return invalid(format!("exponents violate 1/q = 1/p − s/d: q = {q}, expected {want}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = basis.len();
    let mut best = (0.0, String::new());
    let mut consider = |u: Vec<f64>, tag: String| {
        let den = lp_s_norm(&u, s, p, basis);
        if den > 0.0 {
            let r = lp_norm(&u, q, basis.mass()) / den;
            if r > best.0 {
                best = (r, tag);
            }
        }
    };
    for _ in 0..trials {
        let c: Vec<f64> = (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        consider(basis.synthesize(&c), "rough".into());
        let mut v: Vec<f64> = (0..basis.n_vertices()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if basis.bc == crate::spectral::BoundaryCondition::Dirichlet {
            for &b in &basis.graph.boundary {
                v[b] = 0.0;
            }
        }
        consider(v, "vertex".into());
        let c: Vec<f64> = (0..n).map(|k| rng.gen_range(-1.0..1.0) / (1.0 + basis.eigenvalues[k])).collect();
        consider(basis.synthesize(&c), "smooth".into());
    }
    for k in 0..n.min(trials.max(1) * 4) {
        consider(basis.phi(k), format!("mode:{k}"));
    }
    Ok(EmbeddingReport {
        s,
        p,
        q,
        d: basis.d,
        level: basis.graph.level,
        trials,
        max_ratio: best.0,
        argmax: best.1,
    })
}

/// ⟨u, v⟩_μ for complex outputs of the operator calculus.
pub fn inner_c(a: &[Complex64], b: &[Complex64], mass: &[f64]) -> Complex64 {
    a.iter().zip(b).zip(mass).map(|((x, y), m)| x * y.conj() * m).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build, FractalKind};
    use crate::psido::apply;
    use crate::spectral::{eigensolve, BoundaryCondition};
    use crate::symbol::{bessel, constant, laplacian};
    use nalgebra::DMatrix;

    fn basis(level: usize, bc: BoundaryCondition) -> EigenBasis {
        eigensolve(&build(FractalKind::Gasket, level).unwrap(), bc).unwrap()
    }

    fn random(b: &EigenBasis, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c: Vec<f64> = (0..b.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        b.synthesize(&c)
    }

    #[test]
    fn single_mode_and_h0() {
        let b = basis(3, BoundaryCondition::Neumann);
        for k in [0, 3, 20] {
            let v = hs_norm(&b.phi(k), 1.3, &b);
            let want = (1.0 + b.eigenvalues[k]).powf(1.3 / (b.d + 1.0));
            assert!((v - want).abs() < 1e-12 * want);
        }
        let u = random(&b, 1);
        assert!((hs_norm(&u, 0.0, &b) - b.norm(&u)).abs() < 1e-12 * b.norm(&u));
        let mut last = 0.0;
        for s in [-2.0, -0.5, 0.0, 0.7, 2.0] {
            let v = hs_norm(&u, s, &b);
            assert!(v >= last);
            last = v;
        }
        assert!((hs_norm(&u.iter().map(|x| -3.0 * x).collect::<Vec<_>>(), 1.0, &b) - 3.0 * hs_norm(&u, 1.0, &b)).abs() < 1e-12);
    }

    #[test]
    fn bessel_identity() {
        for bc in [BoundaryCondition::Dirichlet, BoundaryCondition::Neumann] {
            let b = basis(3, bc);
            for seed in 0..5 {
                let u = random(&b, seed);
                for s in [-1.0, 0.5, 2.0] {
                    let lifted = apply(&bessel(Complex64::new(-s / (b.d + 1.0), 0.0), b.d), &b, &u).unwrap();
                    let re: Vec<f64> = lifted.iter().map(|z| z.re).collect();
                    let h = hs_norm(&u, s, &b);
                    assert!((b.norm(&re) - h).abs() < 1e-12 * h);
                }
            }
        }
    }

    #[test]
    fn op_bound_examples() {
        let b = basis(3, BoundaryCondition::Dirichlet);
        let one = op_bound_hs(&constant(1.0), 0.0, 1.0, &b).unwrap();
        assert_eq!(one.c, 1.0);
        let lap = op_bound_hs(&laplacian(b.d), b.d + 1.0, 0.5, &b).unwrap();
        let want = b.eigenvalues.iter().map(|l| l / (1.0 + l)).fold(0.0, f64::max);
        assert!((lap.c - want).abs() < 1e-15 && lap.c < 1.0);
        // attained by the argmax eigenfunction
        let r = hs_ratio(&laplacian(b.d), b.d + 1.0, 0.5, &b, &b.phi(lap.argmax_index)).unwrap();
        assert!((r - lap.c).abs() < 1e-10);
        for seed in 0..100 {
            assert!(hs_ratio(&laplacian(b.d), b.d + 1.0, 0.5, &b, &random(&b, seed)).unwrap() <= lap.c * (1.0 + 1e-12));
        }
    }

    #[test]
    fn op_bound_equals_dense_operator_norm() {
        let b = basis(3, BoundaryCondition::Dirichlet);
        let (m, s) = (b.d + 1.0, 0.5);
        let p = laplacian(b.d);
        let bound = op_bound_hs(&p, m, s, &b).unwrap().c;
        // T = (I−Δ)^{(s−m)/(d+1)} p(−Δ) (I−Δ)^{−s/(d+1)} in μ-orthonormal vertex coordinates
        let free = b.graph.interior();
        let sq: Vec<f64> = free.iter().map(|&v| b.mass()[v].sqrt()).collect();
        let t = DMatrix::from_fn(free.len(), free.len(), |i, j| {
            let mut e = vec![0.0; b.n_vertices()];
            e[free[j]] = 1.0 / sq[j];
            let pre = bessel_lift(&e, -s, &b);
            let mid = apply(&p, &b, &pre).unwrap();
            let midr: Vec<f64> = mid.iter().map(|z| z.re).collect();
            bessel_lift(&midr, s - m, &b)[free[i]] * sq[i]
        });
        let sv = t.singular_values().max();
        assert!((sv - bound).abs() < 1e-6);
    }

    #[test]
    fn lp_s_examples() {
        let b = basis(3, BoundaryCondition::Neumann);
        let u = random(&b, 3);
        assert!((lp_s_norm(&u, 0.8, 2.0, &b) - hs_norm(&u, 0.8, &b)).abs() < 1e-10);
        assert!((lp_s_norm(&u, 0.0, 3.0, &b) - lp_norm(&u, 3.0, b.mass())).abs() < 1e-12);
        for seed in 0..20 {
            let v = random(&b, 100 + seed);
            let (s, p) = (0.6, 3.0);
            let q = p / (p - 1.0);
            let lhs = b.inner(&u, &v).abs();
            assert!(lhs <= lp_s_norm(&u, s, p, &b) * lp_s_norm(&v, -s, q, &b) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn embedding_examples() {
        let b = basis(3, BoundaryCondition::Neumann);
        let r = embedding_check(0.0, 2.0, 2.0, &b, 5, 1).unwrap();
        assert!((r.max_ratio - 1.0).abs() < 1e-12);
        let s = b.d / 4.0;
        let q = embedding_exponent(s, 2.0, b.d).unwrap();
        assert!((q - 4.0).abs() < 1e-12);
        assert!(embedding_check(s, 2.0, 3.0, &b, 5, 1).is_err());
        assert!(embedding_exponent(b.d / 2.0, 2.0, b.d).is_err());
        // a single eigenfunction: closed form from its norms
        let k = 7;
        let phi = b.phi(k);
        let want = lp_norm(&phi, q, b.mass()) / (1.0 + b.eigenvalues[k]).powf(s / (b.d + 1.0));
        assert!((lp_norm(&phi, q, b.mass()) / lp_s_norm(&phi, s, 2.0, &b) - want).abs() < 1e-12);
    }
}

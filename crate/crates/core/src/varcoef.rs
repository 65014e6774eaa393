//! Variable-coefficient operators p(x, −Δ): Tu(x) = Σ_j p(x, λ_j)(P_j u)(x).
//!
//! There is no symbolic calculus here (composition does not multiply
//! symbols), so everything is checked numerically: two evaluation routes,
//! kernel decay across levels, and randomized L^q ratios.

use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::expr::{parse, Expr};
use crate::fit::line_fit;
use crate::graph::{FractalGraph, FractalKind};
use crate::psido::{default_exclusion_radius, KernelMatrix};
use crate::spectral::{BoundaryCondition, EigenBasis};
use crate::symbol::{log_derivatives, scaled_from_log, Symbol};

type VarFn = dyn Fn(usize, f64) -> Complex64 + Send + Sync;

#[derive(Clone)]
pub struct VarSymbol {
    pub name: String,
    pub order: f64,
    /// Act on zero modes too (same policy as `Symbol::zero_mode`).
    pub zero_mode: bool,
    f: Arc<VarFn>,
}

impl std::fmt::Debug for VarSymbol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "VarSymbol({}, order {})", self.name, self.order)
    }
}

impl VarSymbol {
    pub fn new(name: impl Into<String>, order: f64, f: impl Fn(usize, f64) -> Complex64 + Send + Sync + 'static) -> Self {
        VarSymbol { name: name.into(), order, zero_mode: false, f: Arc::new(f) }
    }

    pub fn real(name: impl Into<String>, order: f64, f: impl Fn(usize, f64) -> f64 + Send + Sync + 'static) -> Self {
        Self::new(name, order, move |x, l| Complex64::new(f(x, l), 0.0))
    }

    /// p(x, λ) = a(x)·q(λ).
    pub fn separated(a: Vec<f64>, q: &Symbol) -> Self {
        let q2 = q.clone();
        let mut s = Self::new(format!("a(x)·{}", q.name), q.order, move |x, l| a[x] * q2.eval(l));
        s.zero_mode = q.zero_mode;
        s
    }

    /// The x-independent symbol q viewed as p(x, λ) = q(λ).
    pub fn constant_in_x(q: &Symbol) -> Self {
        let q2 = q.clone();
        let mut s = Self::new(q.name.clone(), q.order, move |_, l| q2.eval(l));
        s.zero_mode = q.zero_mode;
        s
    }

    pub fn with_zero_mode(mut self, on: bool) -> Self {
        self.zero_mode = on;
        self
    }

    pub fn eval(&self, x: usize, lambda: f64) -> Complex64 {
        (self.f)(x, lambda)
    }
}

fn modes(p: &VarSymbol, b: &EigenBasis) -> std::ops::Range<usize> {
    if p.zero_mode {
        0..b.len()
    } else {
        b.active()
    }
}

/// Vertices where the basis can represent a function (interior for Dirichlet).
pub fn support(b: &EigenBasis) -> Vec<usize> {
    if b.bc == BoundaryCondition::Dirichlet {
        b.graph.interior()
    } else {
        (0..b.n_vertices()).collect()
    }
}

/// Table P[x][j] = p(x, λ_j) over the modes p acts on; errors on non-finite values.
fn table(p: &VarSymbol, b: &EigenBasis) -> Result<DMatrix<Complex64>> {
    let r = modes(p, b);
    let n = b.n_vertices();
    let t = DMatrix::from_fn(n, r.len(), |x, j| p.eval(x, b.eigenvalues[r.start + j]));
    let bad: Vec<f64> = (0..r.len())
        .filter(|&j| t.column(j).iter().any(|z| !(z.re.is_finite() && z.im.is_finite())))
        .map(|j| b.eigenvalues[r.start + j])
        .collect();
    if !bad.is_empty() {
        return Err(Error::SymbolUndefined(bad));
    }
    Ok(t)
}

/// Direct route: Tu(x) = Σ_j p(x, λ_j) ⟨u, φ_j⟩ φ_j(x).
pub fn apply_varcoef(p: &VarSymbol, b: &EigenBasis, u: &[f64]) -> Result<Vec<Complex64>> {
    if u.len() != b.n_vertices() {
        return invalid("u has the wrong length");
    }
    let r = modes(p, b);
    let t = table(p, b)?;
    let c = b.coefficients(u);
    Ok((0..b.n_vertices())
        .map(|x| {
            let mut s = Complex64::new(0.0, 0.0);
            for (j, k) in r.clone().enumerate() {
                s += t[(x, j)] * (c[k] * b.vectors[(x, k)]);
            }
            s
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct SymbolExpansion {
    pub symbol: String,
    /// Rows: expansion index k over the full basis; columns: the modes p acts on.
    pub m: DMatrix<Complex64>,
    /// max over supported x and sampled λ of |Σ_k m_k(λ)φ_k(x) − p(x, λ)|.
    pub residual: f64,
    pub modes: std::ops::Range<usize>,
}

/// Largest residual tolerated by `expand_symbol`.
pub const EXPANSION_TOL: f64 = 1e-8;

/// m_k(λ_j) = ⟨p(·, λ_j), φ_k⟩_μ over every basis function φ_k.
pub fn expand_symbol(p: &VarSymbol, b: &EigenBasis) -> Result<SymbolExpansion> {
    let t = table(p, b)?;
    let n = b.len();
    let mass = b.mass();
    let m = DMatrix::from_fn(n, t.ncols(), |k, j| {
        let mut s = Complex64::new(0.0, 0.0);
        for x in 0..b.n_vertices() {
            s += t[(x, j)] * (b.vectors[(x, k)] * mass[x]);
        }
        s
    });
    let mut residual: f64 = 0.0;
    for x in support(b) {
        for j in 0..t.ncols() {
            let mut s = Complex64::new(0.0, 0.0);
            for k in 0..n {
                s += m[(k, j)] * b.vectors[(x, k)];
            }
            residual = residual.max((s - t[(x, j)]).norm());
        }
    }
    let scale = t.iter().map(|z| z.norm()).fold(1.0, f64::max);
    if residual > EXPANSION_TOL * scale {
        return Err(Error::Fit(format!("symbol expansion residual {residual:.3e} exceeds {EXPANSION_TOL:e} (spatial resolution)")));
    }
    Ok(SymbolExpansion { symbol: p.name.clone(), m, residual, modes: modes(p, b) })
}

/// Smallest integer n with α − n < −1.5, the index that makes Σ λ_k^{α−n} converge with margin.
pub fn auxiliary_index(alpha: f64) -> usize {
    let mut n = 0usize;
    while alpha - n as f64 >= -1.5 {
        n += 1;
    }
    n
}

/// Expansion route: Tu(x) = Σ_k (φ_k(x)/λ_k^n)·(m̃_k(−Δ)u)(x), m̃_k = λ_k^n m_k
/// (n = 0 on zero modes).
pub fn apply_by_expansion(e: &SymbolExpansion, b: &EigenBasis, u: &[f64], n_aux: usize) -> Result<Vec<Complex64>> {
    if u.len() != b.n_vertices() {
        return invalid("u has the wrong length");
    }
    let c = b.coefficients(u);
    let nv = b.n_vertices();
    let mut out = vec![Complex64::new(0.0, 0.0); nv];
    for k in 0..b.len() {
        let lk = b.eigenvalues[k];
        let w = if lk > 0.0 { lk.powi(n_aux as i32) } else { 1.0 };
        // (m̃_k(−Δ)u)(x)
        let mut mu = vec![Complex64::new(0.0, 0.0); nv];
        for (j, mode) in e.modes.clone().enumerate() {
            let a = e.m[(k, j)] * w * c[mode];
            if a == Complex64::new(0.0, 0.0) {
                continue;
            }
            for x in 0..nv {
                mu[x] += a * b.vectors[(x, mode)];
            }
        }
        for x in 0..nv {
            out[x] += mu[x] * (b.vectors[(x, k)] / w);
        }
    }
    Ok(out)
}

/// K(x, y) = Σ_j p(x, λ_j) φ_j(x) φ_j(y), rows in parallel.
pub fn kernel_varcoef(p: &VarSymbol, b: &EigenBasis) -> Result<KernelMatrix> {
    let r = modes(p, b);
    let t = table(p, b)?;
    let n = b.n_vertices();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|x| {
            let mut re = vec![0.0; n];
            let mut im = vec![0.0; n];
            for (j, k) in r.clone().enumerate() {
                let a = t[(x, j)] * b.vectors[(x, k)];
                if a.re == 0.0 && a.im == 0.0 {
                    continue;
                }
                for y in 0..n {
                    let v = b.vectors[(y, k)];
                    re[y] += a.re * v;
                    im[y] += a.im * v;
                }
            }
            (re, im)
        })
        .collect();
    let re = DMatrix::from_fn(n, n, |x, y| rows[x].0[y]);
    let real = rows.iter().all(|r| r.1.iter().all(|v| *v == 0.0));
    let im = if real { None } else { Some(DMatrix::from_fn(n, n, |x, y| rows[x].1[y])) };
    Ok(KernelMatrix { symbol: p.name.clone(), basis_hash: b.hash(), re, im, exclusion_radius: default_exclusion_radius(b) })
}

#[derive(Clone, Debug, Serialize)]
pub struct ContinuityReport {
    pub level: usize,
    pub delta: f64,
    /// sup over edges (x, x') and y with R(x, y), R(x', y) ≥ radius of
    /// |K(x,y) − K(x',y)|·R(x,y)^{d+δ}/R(x,x')^δ.
    pub sup: f64,
    pub pairs: usize,
}

/// Hölder exponent of the continuity proxy (finite-energy functions are
/// 1/2-Hölder in the resistance metric).
pub const CONTINUITY_DELTA: f64 = 0.5;

pub fn kernel_continuity(km: &KernelMatrix, b: &EigenBasis) -> ContinuityReport {
    let g = &b.graph;
    let radius = km.exclusion_radius;
    let d = b.d;
    let mut sup: f64 = 0.0;
    let mut pairs = 0;
    for &(x, xp, _) in &g.edges {
        let rxx = b.metric.get(x, xp);
        for y in 0..km.n() {
            let (r1, r2) = (b.metric.get(x, y), b.metric.get(xp, y));
            if r1 < radius || r2 < radius {
                continue;
            }
            pairs += 1;
            let v = (km.get(x, y) - km.get(xp, y)).norm() * r1.min(r2).powf(d + CONTINUITY_DELTA) / rxx.powf(CONTINUITY_DELTA);
            sup = sup.max(v);
        }
    }
    ContinuityReport { level: g.level, delta: CONTINUITY_DELTA, sup, pairs }
}

#[derive(Clone, Debug, Serialize)]
pub struct SupNormFit {
    pub c: f64,
    pub alpha: f64,
    /// (λ, eigenspace sup) for every positive eigenspace.
    pub points: Vec<(f64, f64)>,
}

/// Fits ‖φ‖_∞ ≤ c λ^α over the positive eigenspaces. Each eigenspace
/// contributes max_x (Σ_i φ_i(x)²)^{1/2}, the largest sup-norm of a unit
/// eigenfunction in it, so the fit does not depend on the basis chosen inside
/// degenerate eigenspaces. α is the least-squares slope in log-log; c is then
/// raised until every point lies on or below the envelope.
pub fn supnorm_exponent_fit(b: &EigenBasis) -> Result<SupNormFit> {
    let positive: usize = b.eigenvalues.iter().filter(|l| **l > 0.0).count();
    if positive < 30 {
        return invalid(format!("sup-norm fit needs ≥ 30 eigenfunctions, got {positive}"));
    }
    let mut points = Vec::new();
    for (l, r) in b.eigenspaces() {
        if l <= 0.0 {
            continue;
        }
        let sup = (0..b.n_vertices())
            .map(|x| r.clone().map(|k| b.vectors[(x, k)].powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        points.push((l, sup));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let alpha = if points.len() >= 2 { line_fit(&xs, &ys).ok_or_else(|| Error::Fit("degenerate sup-norm data".into()))?.slope } else { 0.0 };
    let c = points.iter().map(|(l, s)| s / l.powf(alpha)).fold(0.0, f64::max);
    Ok(SupNormFit { c, alpha, points })
}

#[derive(Clone, Debug, Serialize)]
pub struct LqReport {
    pub symbol: String,
    pub q: f64,
    pub level: usize,
    pub trials: usize,
    pub max_ratio: f64,
    /// Σ_k sup_j |m_k(λ_j)|·‖φ_k‖_∞, an upper bound for the L² ratio (only for q = 2).
    pub expansion_bound: Option<f64>,
}

fn lq_norm_c(f: &[Complex64], q: f64, mass: &[f64]) -> f64 {
    f.iter().zip(mass).map(|(z, m)| z.norm().powf(q) * m).sum::<f64>().powf(1.0 / q)
}

/// Randomized maximization of ‖Tu‖_q/‖u‖_q: `trials` random u (half smooth
/// Gaussian vertex values, half rough ± eigen-coefficients), then gradient
/// ascent restarted from the best four.
pub fn lq_bound_check(p: &VarSymbol, b: &EigenBasis, q: f64, trials: usize, seed: u64) -> Result<LqReport> {
    if !(q > 1.0 && q.is_finite()) {
        return invalid("q must lie in (1, ∞)");
    }
    if trials == 0 {
        return invalid("at least one trial is needed");
    }
    let km = kernel_varcoef(p, b)?;
    let mass = b.mass().to_vec();
    let n = b.n_vertices();
    let supp = support(b);
    let apply = |u: &[f64]| -> Vec<Complex64> { km.integrate(u, &mass) };
    let ratio = |u: &[f64]| -> f64 {
        let tu = apply(u);
        let uc: Vec<Complex64> = u.iter().map(|v| Complex64::new(*v, 0.0)).collect();
        let den = lq_norm_c(&uc, q, &mass);
        if den == 0.0 {
            0.0
        } else {
            lq_norm_c(&tu, q, &mass) / den
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cands: Vec<(f64, Vec<f64>)> = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut u = vec![0.0; n];
        if t % 2 == 0 {
            for &x in &supp {
                u[x] = rng.gen_range(-1.0..1.0);
            }
        } else {
            let c: Vec<f64> = (0..b.len()).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
            u = b.synthesize(&c);
        }
        cands.push((ratio(&u), u));
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut best = cands[0].0;
    // gradient of ln‖Tu‖_q − ln‖u‖_q in the μ inner product:
    // Re T*(|Tu|^{q−2}Tu)/‖Tu‖_q^q − |u|^{q−2}u/‖u‖_q^q
    for (_, start) in cands.iter().take(4) {
        let mut u = start.clone();
        let mut cur = ratio(&u);
        for _ in 0..40 {
            let tu = apply(&u);
            let nt: f64 = tu.iter().zip(&mass).map(|(z, m)| z.norm().powf(q) * m).sum();
            let nu: f64 = u.iter().zip(&mass).map(|(v, m)| v.abs().powf(q) * m).sum();
            if nt == 0.0 || nu == 0.0 {
                break;
            }
            let w: Vec<Complex64> = tu.iter().map(|z| if z.norm() == 0.0 { *z } else { z * z.norm().powf(q - 2.0) }).collect();
            let mut grad = vec![0.0; n];
            for &y in &supp {
                let mut s = 0.0;
                for x in 0..n {
                    s += (km.get(x, y).conj() * w[x]).re * mass[x];
                }
                grad[y] = s / nt - u[y].signum() * u[y].abs().powf(q - 1.0) / nu;
            }
            let gn = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            let un = u.iter().map(|g| g * g).sum::<f64>().sqrt();
            if gn == 0.0 {
                break;
            }
            let mut improved = false;
            for step in [1.0, 0.3, 0.1, 0.03, 0.01] {
                let v: Vec<f64> = u.iter().zip(&grad).map(|(a, g)| a + step * un / gn * g).collect();
                let r = ratio(&v);
                if r > cur {
                    u = v;
                    cur = r;
                    improved = true;
                    break;
                }
            }
            if !improved {
                break;
            }
        }
        best = best.max(cur);
    }
    let expansion_bound = if (q - 2.0).abs() < 1e-15 {
        let e = expand_symbol(p, b)?;
        let mut s = 0.0;
        for k in 0..b.len() {
            let sup_m = (0..e.m.ncols()).map(|j| e.m[(k, j)].norm()).fold(0.0, f64::max);
            let sup_phi = b.vectors.column(k).iter().map(|v| v.abs()).fold(0.0, f64::max);
            s += sup_m * sup_phi;
        }
        Some(s)
    } else {
        None
    };
    Ok(LqReport { symbol: p.name.clone(), q, level: b.graph.level, trials, max_ratio: best, expansion_bound })
}

/// max |T_p Q u − Q T_p u| / max |T_p Q u|: nonzero when p depends on x.
pub fn commutator_witness(p: &VarSymbol, qsym: &Symbol, b: &EigenBasis, u: &[f64]) -> Result<f64> {
    let re = |v: &[Complex64]| -> Vec<f64> { v.iter().map(|z| z.re).collect() };
    let im = |v: &[Complex64]| -> Vec<f64> { v.iter().map(|z| z.im).collect() };
    let qu = crate::psido::apply(qsym, b, u)?;
    let a_re = apply_varcoef(p, b, &re(&qu))?;
    let a_im = apply_varcoef(p, b, &im(&qu))?;
    let a: Vec<Complex64> = a_re.iter().zip(&a_im).map(|(x, y)| x + Complex64::i() * y).collect();
    let pu = apply_varcoef(p, b, u)?;
    let c = crate::psido::apply_complex(qsym, b, &pu)?;
    let scale = a.iter().map(|z| z.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    Ok(a.iter().zip(&c).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max) / scale)
}

#[derive(Clone, Debug, Serialize)]
pub struct VarClassReport {
    pub symbol: String,
    pub order: f64,
    /// constants[j][k] = sup |(λ∂_λ)^k Δ_x^j p(x,λ)|·(1+λ)^{−m/(d+1)} over supported x and the grid.
    pub constants: Vec<Vec<f64>>,
    pub finite: bool,
}

/// Finitely checkable part of the variable symbol class: the spatial part by
/// applying the discrete Laplacian j ≤ j_max times to x ↦ p(x, λ) (read off
/// on the basis support, Dirichlet boundary values reset after each step), the
/// spectral part by log-derivatives in λ as for constant symbols.
pub fn var_symbol_class(p: &VarSymbol, b: &EigenBasis, j_max: usize, k_max: usize, grid: &[f64]) -> Result<VarClassReport> {
    if grid.is_empty() || grid.iter().any(|l| !(*l > 0.0)) {
        return invalid("grid must be nonempty and positive");
    }
    // the graph Laplacian with no boundary rows removed: the first application
    // must see p at boundary vertices; later ones act on values kept on the support
    let g = &b.graph;
    let mut op = g.energy_matrix();
    for i in 0..g.n() {
        op.row_mut(i).scale_mut(1.0 / g.mass[i]);
    }
    let n = b.n_vertices();
    let supp = support(b);
    let mut off = vec![true; n];
    for &x in &supp {
        off[x] = false;
    }
    let mut constants = vec![vec![0.0f64; k_max + 1]; j_max + 1];
    for &l in grid {
        let weight = (1.0 + l).powf(-p.order / (b.d + 1.0));
        // derivs[x][k] = (λ∂_λ)^k p(x, λ)
        let derivs: Vec<Vec<Complex64>> = (0..n)
            .map(|x| scaled_from_log(&log_derivatives(&|lam: f64| p.eval(x, lam), l.ln(), k_max)))
            .collect();
        for k in 0..=k_max {
            let mut re = nalgebra::DVector::from_fn(n, |x, _| derivs[x][k].re);
            let mut im = nalgebra::DVector::from_fn(n, |x, _| derivs[x][k].im);
            for (j, row) in constants.iter_mut().enumerate() {
                if j > 0 {
                    re = &op * re;
                    im = &op * im;
                    for x in (0..n).filter(|&x| off[x]) {
                        re[x] = 0.0;
                        im[x] = 0.0;
                    }
                }
                let s = supp.iter().map(|&x| Complex64::new(re[x], im[x]).norm()).fold(0.0, f64::max);
                row[k] = row[k].max(s * weight);
            }
        }
    }
    let finite = constants.iter().flatten().all(|c| c.is_finite());
    Ok(VarClassReport { symbol: p.name.clone(), order: p.order, constants, finite })
}

/// Harmonic function with boundary values e_i (1 at boundary vertex i, 0 at
/// the others), solved from the energy equations at interior vertices.
pub fn harmonic(g: &FractalGraph, i: usize) -> Result<Vec<f64>> {
    if i >= g.boundary.len() {
        return invalid(format!("graph has {} boundary vertices", g.boundary.len()));
    }
    let inner = g.interior();
    let e = g.energy_matrix();
    let mut h = vec![0.0; g.n()];
    h[g.boundary[i]] = 1.0;
    let a = DMatrix::from_fn(inner.len(), inner.len(), |r, c| e[(inner[r], inner[c])]);
    let rhs = nalgebra::DVector::from_fn(inner.len(), |r, _| -e[(inner[r], g.boundary[i])]);
    let sol = a.cholesky().ok_or_else(|| Error::Fit("interior energy matrix not positive definite".into()))?.solve(&rhs);
    for (r, &v) in inner.iter().enumerate() {
        h[v] = sol[r];
    }
    Ok(h)
}

const CORNERS: [(f64, f64); 3] = [(0.0, 0.0), (1.0, 0.0), (0.5, 0.866_025_403_784_438_6)];

/// Planar coordinates of a vertex: F_{a_1…a_{n−1}}(q_{a_n}) for gasket
/// addresses (double-cover copies share them), the unit circle otherwise.
pub fn coordinates(g: &FractalGraph) -> Vec<(f64, f64)> {
    match g.kind {
        FractalKind::Circle => {
            let n = g.n() as f64;
            (0..g.n()).map(|i| {
                let t = std::f64::consts::TAU * i as f64 / n;
                (t.cos(), t.sin())
            }).collect()
        }
        _ => g
            .vertices
            .iter()
            .map(|w| {
                let digits: Vec<usize> = w.bytes().filter(u8::is_ascii_digit).map(|c| (c - b'0') as usize).collect();
                let mut p = (0.0, 0.0);
                let mut s = 1.0;
                for (k, &a) in digits.iter().enumerate() {
                    if k + 1 < digits.len() {
                        s *= 0.5;
                    }
                    p.0 += s * CORNERS[a].0;
                    p.1 += s * CORNERS[a].1;
                }
                p
            })
            .collect(),
    }
}

/// Named vertex functions available to expression symbols: `h0`…`h2`
/// (harmonic, where a boundary exists), `x`, `y` (planar coordinates) and
/// `phiK` (the K-th basis function).
pub struct VertexFeatures {
    names: Vec<String>,
    values: Vec<Vec<f64>>,
    basis: Arc<EigenBasis>,
}

impl VertexFeatures {
    pub fn new(b: Arc<EigenBasis>) -> Result<Self> {
        let g = &b.graph;
        let mut names = Vec::new();
        let mut values = Vec::new();
        for i in 0..g.boundary.len().min(3) {
            names.push(format!("h{i}"));
            values.push(harmonic(g, i)?);
        }
        let xy = coordinates(g);
        names.push("x".into());
        values.push(xy.iter().map(|p| p.0).collect());
        names.push("y".into());
        values.push(xy.iter().map(|p| p.1).collect());
        Ok(VertexFeatures { names, values, basis: b })
    }

    pub fn get(&self, name: &str, v: usize) -> Option<f64> {
        if let Some(i) = self.names.iter().position(|n| n == name) {
            return Some(self.values[i][v]);
        }
        let k: usize = name.strip_prefix("phi")?.parse().ok()?;
        (k < self.basis.len()).then(|| self.basis.vectors[(v, k)])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

fn is_spectral(v: &str) -> bool {
    matches!(v, "l" | "λ" | "lam" | "lambda")
}

/// VarSymbol from an expression over the spectral variable and vertex features.
pub fn parse_var_symbol(src: &str, order: f64, features: Arc<VertexFeatures>) -> Result<VarSymbol> {
    let e: Expr = parse(src)?;
    let mut vars = Vec::new();
    e.variables(&mut vars);
    for v in &vars {
        if !is_spectral(v) && features.get(v, 0).is_none() {
            return Err(Error::Parse(format!("unknown variable '{v}' (features: {}, phiK, l)", features.names().join(", "))));
        }
    }
    Ok(VarSymbol::new(src, order, move |x, l| {
        e.eval(&|name: &str| if is_spectral(name) { Some(l) } else { features.get(name, x) }).unwrap_or(Complex64::new(f64::NAN, 0.0))
    }))
}

/// (1 + h(x))·λ/(1+λ), h the harmonic function with boundary values (1, 0, 0).
pub fn harmonic_ratio_symbol(g: &FractalGraph) -> Result<VarSymbol> {
    let h = harmonic(g, 0)?;
    Ok(VarSymbol::real("(1+h0(x))·l/(1+l)", 0.0, move |x, l| (1.0 + h[x]) * l / (1.0 + l)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build;
    use crate::psido::{apply, decay_report, level_growth};
    use crate::spectral::eigensolve;
    use crate::symbol::{imaginary_power, ratio};

    fn basis(kind: FractalKind, level: usize, bc: BoundaryCondition) -> EigenBasis {
        eigensolve(&build(kind, level).unwrap(), bc).unwrap()
    }

    fn random_u(b: &EigenBasis, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        support_fill(b, |_| rng.gen_range(-1.0..1.0))
    }

    fn support_fill(b: &EigenBasis, mut f: impl FnMut(usize) -> f64) -> Vec<f64> {
        let mut u = vec![0.0; b.n_vertices()];
        for x in support(b) {
            u[x] = f(x);
        }
        u
    }

    fn max_diff(a: &[Complex64], b: &[Complex64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn harmonic_and_coordinates() {
        let g = build(FractalKind::Gasket, 3).unwrap();
        let h: Vec<Vec<f64>> = (0..3).map(|i| harmonic(&g, i).unwrap()).collect();
        // h0 + h1 + h2 = 1 and each is discrete-harmonic inside
        let e = g.energy_matrix();
        for v in 0..g.n() {
            assert!((h[0][v] + h[1][v] + h[2][v] - 1.0).abs() < 1e-12);
        }
        for &v in &g.interior() {
            let s: f64 = (0..g.n()).map(|w| e[(v, w)] * h[0][w]).sum();
            assert!(s.abs() < 1e-9);
        }
        // the 1/5-2/5 rule at the level-1 midpoints
        let m01 = g.index_of("01").unwrap();
        let m12 = g.index_of("12").unwrap();
        assert!((h[0][m01] - 0.4).abs() < 1e-12 && (h[0][m12] - 0.2).abs() < 1e-12);
        let xy = coordinates(&g);
        assert_eq!(xy[g.index_of("01").unwrap()], (0.5, 0.0));
        assert!((xy[g.index_of("2").unwrap()].1 - 0.75f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn expansion_examples() {
        let b = basis(FractalKind::Gasket, 3, BoundaryCondition::Neumann);
        let q = ratio();
        let e = expand_symbol(&VarSymbol::constant_in_x(&q), &b).unwrap();
        let root = b.graph.total_mass().sqrt();
        for (j, mode) in e.modes.clone().enumerate() {
            assert!((e.m[(0, j)] - q.eval(b.eigenvalues[mode]) * root).norm() < 1e-12);
            for k in 1..b.len() {
                assert!(e.m[(k, j)].norm() < 1e-12);
            }
        }
        let phi1 = b.phi(1);
        let e = expand_symbol(&VarSymbol::separated(phi1, &q), &b).unwrap();
        let rows: Vec<usize> = (0..b.len()).filter(|&k| (0..e.m.ncols()).any(|j| e.m[(k, j)].norm() > 1e-12)).collect();
        assert_eq!(rows, vec![1]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..b.n_vertices()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e = expand_symbol(&VarSymbol::separated(a, &imaginary_power(1.0)), &b).unwrap();
        assert!(e.residual < 1e-10, "{}", e.residual);
    }

    #[test]
    fn reductions_and_routes() {
        for bc in [BoundaryCondition::Dirichlet, BoundaryCondition::Neumann] {
            let b = basis(FractalKind::Gasket, 3, bc);
            let u = random_u(&b, 11);
            let q = imaginary_power(1.0);
            let a = apply_varcoef(&VarSymbol::constant_in_x(&q), &b, &u).unwrap();
            assert!(max_diff(&a, &apply(&q, &b, &u).unwrap()) < 1e-12);
            let p = harmonic_ratio_symbol(&b.graph).unwrap();
            for k in [b.active().start, 7, b.len() - 1] {
                let tphi = apply_varcoef(&p, &b, &b.phi(k)).unwrap();
                for x in 0..b.n_vertices() {
                    assert!((tphi[x] - p.eval(x, b.eigenvalues[k]) * b.vectors[(x, k)]).norm() < 1e-12);
                }
            }
            let fit = supnorm_exponent_fit(&b).unwrap();
            let n = auxiliary_index(fit.alpha);
            let e = expand_symbol(&p, &b).unwrap();
            let direct = apply_varcoef(&p, &b, &u).unwrap();
            let other = apply_by_expansion(&e, &b, &u, n).unwrap();
            assert!(max_diff(&direct, &other) < 1e-9, "{bc:?}");
            let k = kernel_varcoef(&p, &b).unwrap();
            let via_k = k.integrate(&u, b.mass());
            assert!(max_diff(&direct, &via_k) < 1e-10);
        }
    }

    #[test]
    fn auxiliary_index_rule() {
        assert_eq!(auxiliary_index(0.0), 2);
        assert_eq!(auxiliary_index(0.4), 2);
        assert_eq!(auxiliary_index(0.5), 3);
        assert_eq!(auxiliary_index(-2.0), 0);
    }

    #[test]
    fn supnorm_fits() {
        let c = basis(FractalKind::Circle, 64, BoundaryCondition::None);
        let f = supnorm_exponent_fit(&c).unwrap();
        assert!(f.alpha.abs() < 0.02, "{}", f.alpha);
        for &(l, s) in &f.points {
            assert!(s <= f.c * l.powf(f.alpha) * (1.0 + 1e-12));
        }
        let small = basis(FractalKind::Circle, 16, BoundaryCondition::None);
        assert!(supnorm_exponent_fit(&small).is_err());
    }

    #[test]
    fn lq_diagonal_bound_and_noncommutativity() {
        let b = basis(FractalKind::Gasket, 3, BoundaryCondition::Dirichlet);
        let q = imaginary_power(1.0);
        let r = lq_bound_check(&VarSymbol::constant_in_x(&q), &b, 2.0, 8, 1).unwrap();
        let sup = b.eigenvalues.iter().map(|l| q.eval(*l).norm()).fold(0.0, f64::max);
        assert!(r.max_ratio <= sup + 1e-9);
        let p = harmonic_ratio_symbol(&b.graph).unwrap();
        let r = lq_bound_check(&p, &b, 2.0, 8, 1).unwrap();
        assert!(r.max_ratio <= r.expansion_bound.unwrap() * (1.0 + 1e-12));
        assert!(r.max_ratio > 0.5);
        let r3 = lq_bound_check(&p, &b, 3.0, 8, 1).unwrap();
        assert!(r3.max_ratio.is_finite() && r3.expansion_bound.is_none());
        assert!(lq_bound_check(&p, &b, 1.0, 8, 1).is_err());
        let w = commutator_witness(&p, &crate::symbol::bessel(Complex64::new(1.0, 0.0), b.d), &b, &random_u(&b, 2)).unwrap();
        assert!(w > 1e-3, "{w}");
        let w0 = commutator_witness(&VarSymbol::constant_in_x(&ratio()), &crate::symbol::bessel(Complex64::new(1.0, 0.0), b.d), &b, &random_u(&b, 2)).unwrap();
        assert!(w0 < 1e-12);
    }

    #[test]
    fn symbol_class_and_parsing() {
        let b = Arc::new(basis(FractalKind::Gasket, 3, BoundaryCondition::Dirichlet));
        let feats = Arc::new(VertexFeatures::new(b.clone()).unwrap());
        let p = parse_var_symbol("(1+h0)*l/(1+l)", 0.0, feats.clone()).unwrap();
        let h = harmonic_ratio_symbol(&b.graph).unwrap();
        for x in 0..b.n_vertices() {
            assert!((p.eval(x, 3.7) - h.eval(x, 3.7)).norm() < 1e-14);
        }
        assert!((parse_var_symbol("phi2 + x*y", 0.0, feats.clone()).unwrap().eval(4, 1.0).re - (b.vectors[(4, 2)] + feats.get("x", 4).unwrap() * feats.get("y", 4).unwrap())).abs() < 1e-14);
        assert!(parse_var_symbol("h7 * l", 0.0, feats).is_err());
        let grid = crate::psido::spectrum_grid(&b, 2).unwrap();
        let r = var_symbol_class(&h, &b, 2, 3, &grid).unwrap();
        assert!(r.finite);
        // h0 is harmonic: interior Laplacians of x ↦ p(x, λ) vanish, up to
        // the finite-difference error of the λ-derivatives
        assert!(r.constants[1][0] < 1e-10, "{:?}", r.constants);
        assert!(r.constants[1].iter().all(|c| *c < 1e-4), "{:?}", r.constants);
        assert!(r.constants[0][0] > 0.5);
    }

    #[test]
    fn kernel_decay_and_continuity_sweep() {
        let mut sups = Vec::new();
        let mut cont = Vec::new();
        for level in 3..=5 {
            let b = basis(FractalKind::Gasket, level, BoundaryCondition::Dirichlet);
            let p = harmonic_ratio_symbol(&b.graph).unwrap();
            let k = kernel_varcoef(&p, &b).unwrap();
            sups.push(decay_report(&k, &b, b.d, 0, 0).unwrap().sup);
            cont.push(kernel_continuity(&k, &b).sup);
        }
        eprintln!("varcoef decay {sups:?} continuity {cont:?}");
        assert!(level_growth(&sups) <= 2.0, "{sups:?}");
    }
}

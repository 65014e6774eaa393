//! Constant-coefficient operators p(−Δ): symbol-class checks, the
//! Littlewood–Paley decomposition, spectral application, kernels and their
//! off-diagonal decay.

use std::ops::Range;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::fit::geomspace;
use crate::spectral::{BoundaryCondition, EigenBasis};
use crate::symbol::{LpWindow, Symbol, Symbol2};

/// Points lo·2^{j/per_octave} until hi is reached (inclusive of one point ≥ hi).
pub fn dyadic_grid(lo: f64, hi: f64, per_octave: usize) -> Vec<f64> {
    let mut out = Vec::new();
    if !(lo > 0.0) || hi < lo || per_octave == 0 {
        return out;
    }
    let step = 2f64.powf(1.0 / per_octave as f64);
    let mut j = 0;
    loop {
        let x = lo * step.powi(j);
        out.push(x);
        if x >= hi {
            break;
        }
        j += 1;
    }
    out
}

/// Dyadic grid over the positive spectrum of a basis.
pub fn spectrum_grid(basis: &EigenBasis, per_octave: usize) -> Result<Vec<f64>> {
    let v = basis.active_eigenvalues();
    let lo = v.iter().copied().find(|x| *x > 0.0).ok_or_else(|| Error::InvalidInput("no positive eigenvalues".into()))?;
    Ok(dyadic_grid(lo, *v.last().unwrap(), per_octave))
}

#[derive(Clone, Debug, Serialize)]
pub struct BadPoint {
    pub k: usize,
    pub lambda: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SymbolClassReport {
    pub symbol: String,
    pub order: f64,
    pub rho: f64,
    pub d: f64,
    pub k_max: usize,
    pub closed_form: bool,
    /// C_k = sup over the grid of |(λ^ρ d/dλ)^k p| (1+λ)^{−m/(d+1)}.
    pub constants: Vec<f64>,
    pub argmax: Vec<f64>,
    /// Same constants on the grid extended upward by 2^10.
    pub extended_constants: Vec<f64>,
    pub saturated: bool,
    pub bad_points: Vec<BadPoint>,
    pub passes: bool,
}

fn class_constants(p: &Symbol, m: f64, rho: f64, k_max: usize, grid: &[f64], d: f64, bad: &mut Vec<BadPoint>) -> (Vec<f64>, Vec<f64>) {
    let mut c = vec![0.0; k_max + 1];
    let mut arg = vec![f64::NAN; k_max + 1];
    for &l in grid {
        let w = (1.0 + l).powf(-m / (d + 1.0));
        let ders = p.rho_derivatives(rho, l, k_max);
        for (k, v) in ders.iter().enumerate() {
            let x = v.norm() * w;
            if !x.is_finite() {
                bad.push(BadPoint { k, lambda: l });
                continue;
            }
            if x > c[k] || arg[k].is_nan() {
                c[k] = x;
                arg[k] = l;
            }
        }
    }
    (c, arg)
}

/// Checks |(λ^ρ d/dλ)^k p(λ)| ≤ C_k (1+λ)^{m/(d+1)} on a grid. Finite
/// constants alone say nothing on a bounded grid, so the grid is also
/// extended upward by 2^10 and the constants must not grow by more than 1.5×.
pub fn verify_symbol_class(p: &Symbol, m: f64, rho: f64, k_max: usize, grid: &[f64], d: f64) -> Result<SymbolClassReport> {
    if k_max > 6 {
        return invalid("k_max ≤ 6: finite differences degrade beyond");
    }
    if grid.is_empty() || grid.iter().any(|l| !(*l > 0.0)) {
        return invalid("grid must be non-empty and positive");
    }
    if !(0.0..=1.0).contains(&rho) {
        return invalid("ρ must lie in [0, 1]");
    }
    let mut bad = Vec::new();
    let (constants, argmax) = class_constants(p, m, rho, k_max, grid, d, &mut bad);
    let hi = grid.iter().copied().fold(0.0, f64::max);
    let ext: Vec<f64> = grid.iter().copied().chain(dyadic_grid(hi, hi * 1024.0, 4).into_iter().skip(1)).collect();
    let (extended, _) = class_constants(p, m, rho, k_max, &ext, d, &mut bad);
    bad.sort_by(|a, b| a.k.cmp(&b.k).then(a.lambda.total_cmp(&b.lambda)));
    bad.dedup_by(|a, b| a.k == b.k && a.lambda == b.lambda);
    let floor = 1e-8 * (1.0 + constants[0]);
    let saturated = constants.iter().zip(&extended).all(|(c, e)| *e <= 1.5 * c + floor);
    let passes = bad.is_empty() && saturated && constants.iter().all(|c| c.is_finite());
    Ok(SymbolClassReport {
        symbol: p.name.clone(),
        order: m,
        rho,
        d,
        k_max,
        closed_form: p.has_closed_form(),
        constants,
        argmax,
        extended_constants: extended,
        saturated,
        bad_points: bad,
        passes,
    })
}

/// p_n(λ) = p(λ) δ(2^{−n} λ), supported in [2^{n−1}, 2^{n+1}].
#[derive(Clone, Debug)]
pub struct LpDecomposition {
    pub pieces: Vec<(i32, Symbol)>,
    pub n_range: (i32, i32),
}

pub fn lp_decompose(p: &Symbol, n_lo: i32, n_hi: i32) -> Result<LpDecomposition> {
    if n_hi < n_lo {
        return invalid("empty dyadic range");
    }
    let pieces = (n_lo..=n_hi)
        .map(|n| {
            let q = p.clone();
            let scale = 2f64.powi(-n);
            let mut s = Symbol::new(format!("{}#{n}", p.name), p.order, move |l| q.eval(l) * LpWindow.delta(scale * l));
            s.rho = p.rho;
            (n, s)
        })
        .collect();
    Ok(LpDecomposition { pieces, n_range: (n_lo, n_hi) })
}

impl LpDecomposition {
    /// Range [2^{n_lo}, 2^{n_hi}] on which the pieces sum to p.
    pub fn covered(&self) -> (f64, f64) {
        (2f64.powi(self.n_range.0), 2f64.powi(self.n_range.1))
    }

    pub fn reconstruct(&self, l: f64) -> Complex64 {
        self.pieces.iter().map(|(_, s)| s.eval(l)).sum()
    }

    pub fn nonzero_pieces(&self, l: f64) -> usize {
        self.pieces.iter().filter(|(_, s)| s.eval(l) != Complex64::new(0.0, 0.0)).count()
    }

    /// Max |Σ p_n − p| over grid points inside the covered range; fails above 1e−10.
    pub fn reconstruction_error(&self, p: &Symbol, grid: &[f64]) -> Result<f64> {
        let (lo, hi) = self.covered();
        let err = grid
            .iter()
            .filter(|l| **l >= lo && **l <= hi)
            .map(|&l| (self.reconstruct(l) - p.eval(l)).norm())
            .fold(0.0, f64::max);
        if err > 1e-10 {
            return Err(Error::Fit(format!("Littlewood–Paley reconstruction error {err:.3e}")));
        }
        Ok(err)
    }
}

/// Mode range and multipliers p(λ_n) a symbol acts with on a basis.
pub fn spectral_weights(p: &Symbol, basis: &EigenBasis) -> Result<(Range<usize>, Vec<Complex64>)> {
    let r = if p.zero_mode { 0..basis.len() } else { basis.active() };
    let w: Vec<Complex64> = basis.eigenvalues[r.clone()].iter().map(|&l| p.eval(l)).collect();
    let bad: Vec<f64> = basis.eigenvalues[r.clone()]
        .iter()
        .zip(&w)
        .filter(|(_, v)| !(v.re.is_finite() && v.im.is_finite()))
        .map(|(l, _)| *l)
        .collect();
    if !bad.is_empty() {
        return Err(Error::SymbolUndefined(bad));
    }
    Ok((r, w))
}

fn is_real(w: &[Complex64]) -> bool {
    w.iter().all(|v| v.im == 0.0)
}

/// Σ_n p(λ_n) ⟨u, φ_n⟩_μ φ_n.
pub fn apply(p: &Symbol, basis: &EigenBasis, u: &[f64]) -> Result<Vec<Complex64>> {
    if u.len() != basis.n_vertices() {
        return invalid("u has the wrong length");
    }
    let (r, w) = spectral_weights(p, basis)?;
    let c = basis.coefficients(u);
    let mut re = vec![0.0; basis.len()];
    let mut im = vec![0.0; basis.len()];
    for (i, k) in r.enumerate() {
        re[k] = w[i].re * c[k];
        im[k] = w[i].im * c[k];
    }
    let a = basis.synthesize(&re);
    let b = basis.synthesize(&im);
    Ok(a.into_iter().zip(b).map(|(x, y)| Complex64::new(x, y)).collect())
}

/// Real-valued application; the symbol must be real on the spectrum.
pub fn apply_real(p: &Symbol, basis: &EigenBasis, u: &[f64]) -> Result<Vec<f64>> {
    let (_, w) = spectral_weights(p, basis)?;
    if !is_real(&w) {
        return invalid(format!("symbol {} is not real on the spectrum", p.name));
    }
    Ok(apply(p, basis, u)?.into_iter().map(|z| z.re).collect())
}

pub fn apply_complex(p: &Symbol, basis: &EigenBasis, u: &[Complex64]) -> Result<Vec<Complex64>> {
    let re: Vec<f64> = u.iter().map(|z| z.re).collect();
    let im: Vec<f64> = u.iter().map(|z| z.im).collect();
    let a = apply(p, basis, &re)?;
    let b = apply(p, basis, &im)?;
    Ok(a.into_iter().zip(b).map(|(x, y)| x + Complex64::i() * y).collect())
}

/// max |p(λ_n)| over the modes p acts on, with the index of the maximiser.
pub fn l2_operator_norm(p: &Symbol, basis: &EigenBasis) -> Result<(f64, usize)> {
    let (r, w) = spectral_weights(p, basis)?;
    let mut best = (0.0, r.start);
    for (i, v) in w.iter().enumerate() {
        if v.norm() > best.0 {
            best = (v.norm(), r.start + i);
        }
    }
    Ok(best)
}

/// Relative deviation of p1(−Δ)p2(−Δ)u from (p1 p2)(−Δ)u.
pub fn compose_check(p1: &Symbol, p2: &Symbol, basis: &EigenBasis, u: &[f64]) -> Result<f64> {
    let inner = apply(p2, basis, u)?;
    let a = apply_complex(p1, basis, &inner)?;
    let b = apply(&p1.product(p2), basis, u)?;
    let scale = b.iter().map(|z| z.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max) / scale)
}

/// Kernel values K(x,y) over all vertex pairs.
#[derive(Clone, Debug)]
pub struct KernelMatrix {
    pub symbol: String,
    pub basis_hash: String,
    pub re: DMatrix<f64>,
    /// None for symbols real on the spectrum.
    pub im: Option<DMatrix<f64>>,
    /// Pairs with R(x,y) below this are near-diagonal.
    pub exclusion_radius: f64,
}

/// Σ_n w_n φ_n(x) φ_n(y) over the given modes, rows in parallel, each entry a
/// sequential sum so the result does not depend on the thread count.
pub(crate) fn outer_sum(vectors: &DMatrix<f64>, modes: Range<usize>, w: &[f64]) -> DMatrix<f64> {
    let n = vectors.nrows();
    let rows: Vec<Vec<f64>> = (0..n).map(|x| modes.clone().map(|k| vectors[(x, k)]).collect()).collect();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|x| {
            let a: Vec<f64> = rows[x].iter().zip(w).map(|(p, w)| p * w).collect();
            (x..n).map(|y| a.iter().zip(&rows[y]).map(|(p, q)| p * q).sum()).collect()
        })
        .collect();
    let mut k = DMatrix::zeros(n, n);
    for (x, row) in upper.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            k[(x, x + j)] = *v;
            k[(x + j, x)] = *v;
        }
    }
    k
}

/// Default exclusion radius: twice the largest finest-cell resistance diameter.
pub fn default_exclusion_radius(basis: &EigenBasis) -> f64 {
    2.0 * basis.metric.finest_cell_diameter(&basis.graph)
}

pub fn kernel(p: &Symbol, basis: &EigenBasis) -> Result<KernelMatrix> {
    let (r, w) = spectral_weights(p, basis)?;
    let re: Vec<f64> = w.iter().map(|z| z.re).collect();
    let kr = outer_sum(&basis.vectors, r.clone(), &re);
    let ki = if is_real(&w) {
        None
    } else {
        let im: Vec<f64> = w.iter().map(|z| z.im).collect();
        Some(outer_sum(&basis.vectors, r, &im))
    };
    Ok(KernelMatrix {
        symbol: p.name.clone(),
        basis_hash: basis.hash(),
        re: kr,
        im: ki,
        exclusion_radius: default_exclusion_radius(basis),
    })
}

impl KernelMatrix {
    pub fn n(&self) -> usize {
        self.re.nrows()
    }

    pub fn get(&self, x: usize, y: usize) -> Complex64 {
        Complex64::new(self.re[(x, y)], self.im.as_ref().map_or(0.0, |m| m[(x, y)]))
    }

    pub fn abs(&self, x: usize, y: usize) -> f64 {
        self.get(x, y).norm()
    }

    /// x ↦ Σ_y K(x,y) u(y) μ(y).
    pub fn integrate(&self, u: &[f64], mass: &[f64]) -> Vec<Complex64> {
        let um: Vec<f64> = u.iter().zip(mass).map(|(a, m)| a * m).collect();
        (0..self.n())
            .map(|x| {
                let re: f64 = (0..self.n()).map(|y| self.re[(x, y)] * um[y]).sum();
                let im: f64 = self.im.as_ref().map_or(0.0, |m| (0..self.n()).map(|y| m[(x, y)] * um[y]).sum());
                Complex64::new(re, im)
            })
            .collect()
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut w: f64 = 0.0;
        for x in 0..self.n() {
            for y in (x + 1)..self.n() {
                w = w.max((self.get(x, y) - self.get(y, x)).norm());
            }
        }
        w
    }

    /// Applies −Δ = M^{−1}E l times in x (rows) and k times in y (columns).
    /// On a Dirichlet basis the boundary rows/columns are reset to zero.
    pub fn with_laplacians(&self, basis: &EigenBasis, l: usize, k: usize) -> KernelMatrix {
        let op = laplacian_matrix(basis);
        let apply = |m: &DMatrix<f64>| {
            let mut out = m.clone();
            for _ in 0..l {
                out = &op * out;
            }
            for _ in 0..k {
                out *= op.transpose();
            }
            out
        };
        KernelMatrix {
            symbol: format!("Δx^{l}Δy^{k}[{}]", self.symbol),
            basis_hash: self.basis_hash.clone(),
            re: apply(&self.re),
            im: self.im.as_ref().map(apply),
            exclusion_radius: self.exclusion_radius,
        }
    }
}

/// M^{−1}E with Dirichlet boundary rows zeroed.
pub fn laplacian_matrix(basis: &EigenBasis) -> DMatrix<f64> {
    let g = &basis.graph;
    let mut op = g.energy_matrix();
    for i in 0..g.n() {
        let m = g.mass[i];
        op.row_mut(i).scale_mut(1.0 / m);
    }
    if basis.bc == BoundaryCondition::Dirichlet {
        for &b in &g.boundary {
            op.row_mut(b).fill(0.0);
            op.column_mut(b).fill(0.0);
        }
    }
    op
}

#[derive(Clone, Debug, Serialize)]
pub struct DecayReport {
    pub symbol: String,
    pub level: usize,
    pub alpha: f64,
    pub l: usize,
    pub k: usize,
    pub sup: f64,
    pub argmax: (usize, usize),
    pub r_at_argmax: f64,
    pub exclusion_radius: f64,
    pub admissible_pairs: usize,
    pub max_abs_offdiag: f64,
}

/// Exponent for the l+k derivative variant: d + (l+k)(d+1).
pub fn derivative_alpha(d: f64, l: usize, k: usize) -> f64 {
    d + (l + k) as f64 * (d + 1.0)
}

/// sup over pairs with R(x,y) ≥ radius of |K(x,y)| R(x,y)^α. The kernel is
/// first hit by l and k discrete Laplacians when requested.
pub fn decay_report(km: &KernelMatrix, basis: &EigenBasis, alpha: f64, l: usize, k: usize) -> Result<DecayReport> {
    let km = if l + k > 0 { km.with_laplacians(basis, l, k) } else { km.clone() };
    let radius = km.exclusion_radius;
    let n = km.n();
    let mut best = (f64::NEG_INFINITY, (0, 0), 0.0);
    let mut count = 0;
    let mut offdiag: f64 = 0.0;
    for x in 0..n {
        for y in 0..n {
            if x == y {
                continue;
            }
            let a = km.abs(x, y);
            offdiag = offdiag.max(a);
            let r = basis.metric.get(x, y);
            if r < radius {
                continue;
            }
            count += 1;
            let v = a * r.powf(alpha);
            if v > best.0 {
                best = (v, (x, y), r);
            }
        }
    }
    if count == 0 {
        return Err(Error::NoAdmissiblePairs(format!("no pair with R ≥ {radius:.4e} at level {}", basis.graph.level)));
    }
    Ok(DecayReport {
        symbol: km.symbol.clone(),
        level: basis.graph.level,
        alpha,
        l,
        k,
        sup: best.0,
        argmax: best.1,
        r_at_argmax: best.2,
        exclusion_radius: radius,
        admissible_pairs: count,
        max_abs_offdiag: offdiag,
    })
}

/// Largest ratio between consecutive values (growth per level).
pub fn level_growth(values: &[f64]) -> f64 {
    values.windows(2).map(|w| w[1] / w[0]).fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize)]
pub struct HormanderReport {
    pub symbol: String,
    pub epsilon: f64,
    pub a: f64,
    /// c_α on the full grid, indexed by |α| (one variable) or flattened (a, b).
    pub orders: Vec<(usize, usize)>,
    pub constants: Vec<f64>,
    /// Same on the grid one decade shorter.
    pub previous_constants: Vec<f64>,
    pub saturated: bool,
    pub passes: bool,
    pub gamma: Option<f64>,
    /// ε > 1/(γ+1), the hypothesis hypoellipticity needs.
    pub hypothesis_met: Option<bool>,
}

fn saturation(full: &[f64], prev: &[f64]) -> bool {
    full.iter().zip(prev).all(|(f, p)| f.is_finite() && *f <= 1.5 * p + 1e-12)
}

/// sup_{λ ≥ A} |p^{(α)}/p| λ^{εα} on [A, A·10^decades], passing when finite and
/// no more than 1.5× the value on [A, A·10^{decades−1}].
pub fn hormander_check(p: &Symbol, eps: f64, a: f64, alpha_max: usize, decades: usize, gamma: Option<f64>) -> Result<HormanderReport> {
    if !(a > 0.0) || decades < 2 || alpha_max > 6 {
        return invalid("hormander_check needs A > 0, at least two decades and α ≤ 6");
    }
    let npts = 20 * decades + 1;
    let grid = geomspace(a, a * 10f64.powi(decades as i32), npts);
    let split = a * 10f64.powi(decades as i32 - 1);
    let pmax = grid.iter().map(|&l| p.eval(l).norm()).fold(0.0, f64::max);
    let mut full = vec![0.0; alpha_max + 1];
    let mut prev = vec![0.0; alpha_max + 1];
    for &l in &grid {
        let d = p.derivatives(l, alpha_max);
        if d[0].norm() <= 1e-14 * pmax || !d[0].norm().is_finite() {
            return invalid(format!("symbol {} vanishes near λ = {l:.6e} beyond A", p.name));
        }
        for al in 0..=alpha_max {
            let v = (d[al] / d[0]).norm() * l.powf(eps * al as f64);
            let v = if v.is_finite() { v } else { f64::INFINITY };
            full[al] = f64::max(full[al], v);
            if l <= split * (1.0 + 1e-12) {
                prev[al] = f64::max(prev[al], v);
            }
        }
    }
    let saturated = saturation(&full, &prev);
    Ok(HormanderReport {
        symbol: p.name.clone(),
        epsilon: eps,
        a,
        orders: (0..=alpha_max).map(|al| (al, 0)).collect(),
        passes: saturated,
        constants: full,
        previous_constants: prev,
        saturated,
        gamma,
        hypothesis_met: gamma.map(|g| eps > 1.0 / (g + 1.0)),
    })
}

/// Two-variable form: |∂^α p / p| |λ|^{ε|α|} over rays of the open quadrant.
pub fn hormander_check2(p: &Symbol2, eps: f64, a: f64, alpha_max: usize, decades: usize, gamma: Option<f64>) -> Result<HormanderReport> {
    if !(a > 0.0) || decades < 2 || alpha_max > 4 {
        return invalid("hormander_check2 needs A > 0, at least two decades and |α| ≤ 4");
    }
    let radii = geomspace(a, a * 10f64.powi(decades as i32), 10 * decades + 1);
    let split = a * 10f64.powi(decades as i32 - 1);
    let orders: Vec<(usize, usize)> = (0..=alpha_max).flat_map(|i| (0..=alpha_max - i).map(move |j| (i, j))).collect();
    let mut full = vec![0.0; orders.len()];
    let mut prev = vec![0.0; orders.len()];
    for &r in &radii {
        for t in 1..10 {
            let th = std::f64::consts::FRAC_PI_2 * t as f64 / 10.0;
            let (l1, l2) = (r * th.cos(), r * th.sin());
            let s = p.scaled_derivatives(l1, l2, alpha_max);
            let p0 = s[0][0];
            if p0.norm() == 0.0 || !p0.norm().is_finite() {
                return invalid(format!("symbol {} vanishes near ({l1:.4e}, {l2:.4e})", p.name));
            }
            for (o, &(i, j)) in orders.iter().enumerate() {
                let der = s[i][j] / (l1.powi(i as i32) * l2.powi(j as i32));
                let v = (der / p0).norm() * r.powf(eps * (i + j) as f64);
                let v = if v.is_finite() { v } else { f64::INFINITY };
                full[o] = f64::max(full[o], v);
                if r <= split * (1.0 + 1e-12) {
                    prev[o] = f64::max(prev[o], v);
                }
            }
        }
    }
    let saturated = saturation(&full, &prev);
    Ok(HormanderReport {
        symbol: p.name.clone(),
        epsilon: eps,
        a,
        orders,
        passes: saturated,
        constants: full,
        previous_constants: prev,
        saturated,
        gamma,
        hypothesis_met: gamma.map(|g| eps > 1.0 / (g + 1.0)),
    })
}

/// Kernel exponent dγ/(ρ(γ+1)−1) for S^m_ρ symbols, and its derivative in γ
/// (how much a misfit γ moves the exponent).
pub fn rho_kernel_exponent(d: f64, gamma: f64, rho: f64) -> Result<(f64, f64)> {
    let den = rho * (gamma + 1.0) - 1.0;
    if !(den > 0.0) {
        return invalid(format!("ρ(γ+1) must exceed 1 (ρ = {rho}, γ = {gamma})"));
    }
    Ok((d * gamma / den, d * (rho - 1.0) / (den * den)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build, FractalKind};
    use crate::heat::heat_kernel_real;
    use crate::spectral::eigensolve;
    use crate::symbol::{bessel, constant, heat, imaginary_power, laplacian, ratio, riesz};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn basis(level: usize, bc: BoundaryCondition) -> EigenBasis {
        eigensolve(&build(FractalKind::Gasket, level).unwrap(), bc).unwrap()
    }

    fn random_u(b: &EigenBasis, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u: Vec<f64> = (0..b.n_vertices()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if b.bc == BoundaryCondition::Dirichlet {
            for &q in &b.graph.boundary {
                u[q] = 0.0;
            }
        }
        u
    }

    fn c(x: f64) -> Complex64 {
        Complex64::new(x, 0.0)
    }

    fn max_diff(a: &[Complex64], b: &[Complex64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn constant_symbol_class() {
        let b = basis(3, BoundaryCondition::Dirichlet);
        let grid = spectrum_grid(&b, 4).unwrap();
        let r = verify_symbol_class(&constant(1.0), 0.0, 1.0, 4, &grid, b.d).unwrap();
        assert!(r.passes);
        assert_eq!(r.constants[0], 1.0);
        assert!(r.constants[1..].iter().all(|c| *c == 0.0));
    }

    #[test]
    fn laplacian_has_order_d_plus_one() {
        let b = basis(3, BoundaryCondition::Dirichlet);
        let grid = spectrum_grid(&b, 4).unwrap();
        assert!(verify_symbol_class(&laplacian(b.d), b.d + 1.0, 1.0, 4, &grid, b.d).unwrap().passes);
        // order 0 is not enough: the constants keep growing on the extended grid
        assert!(!verify_symbol_class(&laplacian(b.d), 0.0, 1.0, 4, &grid, b.d).unwrap().passes);
    }

    #[test]
    fn ratio_constants_match_closed_form() {
        let d = 1.5;
        let grid = dyadic_grid(0.01, 1e4, 4);
        let closed = verify_symbol_class(&ratio(), 0.0, 1.0, 4, &grid, d).unwrap();
        let numeric_sym = Symbol::real("ratio-numeric", 0.0, |l| l / (1.0 + l));
        let numeric = verify_symbol_class(&numeric_sym, 0.0, 1.0, 4, &grid, d).unwrap();
        assert!(closed.passes && numeric.passes && closed.closed_form && !numeric.closed_form);
        // (λ d/dλ) λ/(1+λ) = λ/(1+λ)^2, maximal 1/4 at λ = 1
        assert!((closed.constants[1] - 0.25).abs() < 1e-3);
        for k in 0..=4 {
            let rel = (closed.constants[k] - numeric.constants[k]).abs() / closed.constants[k];
            assert!(rel < 1e-5, "k={k} {} vs {}", closed.constants[k], numeric.constants[k]);
        }
    }

    #[test]
    fn bessel_orders_and_closure() {
        let b = basis(3, BoundaryCondition::Dirichlet);
        let grid = spectrum_grid(&b, 4).unwrap();
        for s in [0.5, 1.0, 2.0] {
            let p = bessel(c(s), b.d);
            assert!(verify_symbol_class(&p, -s * (b.d + 1.0), 1.0, 4, &grid, b.d).unwrap().passes);
        }
        let prod = ratio().product(&imaginary_power(2.0));
        assert!(verify_symbol_class(&prod, 0.0, 1.0, 4, &grid, b.d).unwrap().passes);
        assert!(verify_symbol_class(&bessel(c(0.0), b.d), 0.0, 1.0, 3, &grid, b.d).unwrap().constants[0] == 1.0);
    }

    #[test]
    fn rho_class() {
        // λ^{1/2} sin-free oscillation: exp(i λ^{1/2}) lies in S^0_{1/2}, not S^0_1
        let p = Symbol::new("osc", 0.0, |l: f64| Complex64::new(0.0, l.sqrt()).exp());
        let grid = dyadic_grid(1.0, 1e4, 4);
        assert!(verify_symbol_class(&p, 0.0, 0.5, 2, &grid, 1.0).unwrap().passes);
        assert!(!verify_symbol_class(&p, 0.0, 1.0, 2, &grid, 1.0).unwrap().passes);
        assert!(verify_symbol_class(&p, 0.0, 1.0, 7, &grid, 1.0).is_err());
    }

    #[test]
    fn partition_of_unity() {
        let p = constant(1.0);
        let lp = lp_decompose(&p, -1, 0).unwrap();
        assert!((lp.reconstruct(1.0).re - 1.0).abs() < 1e-15);
        let lp = lp_decompose(&p, -8, 20).unwrap();
        for &l in &dyadic_grid(2f64.powi(-7), 2f64.powi(19), 7) {
            assert!(lp.nonzero_pieces(l) <= 2);
            assert!((lp.reconstruct(l).re - 1.0).abs() < 1e-14);
        }
        for (n, piece) in &lp.pieces {
            let l = 1.3 * 2f64.powi(*n);
            assert_eq!(piece.eval(l).re, LpWindow.delta(1.3));
            assert_eq!(piece.eval(2f64.powi(n + 1) * 1.01).re, 0.0);
            assert_eq!(piece.eval(2f64.powi(n - 1) * 0.99).re, 0.0);
        }
        let grid = dyadic_grid(2f64.powi(-7), 2f64.powi(19), 5);
        let lp = lp_decompose(&ratio(), -8, 20).unwrap();
        assert!(lp.reconstruction_error(&ratio(), &grid).unwrap() < 1e-12);
    }

    #[test]
    fn apply_examples() {
        let b = basis(3, BoundaryCondition::Dirichlet);
        let u = random_u(&b, 1);
        let id = apply(&constant(1.0), &b, &u).unwrap();
        assert!(max_diff(&id, &u.iter().map(|x| c(*x)).collect::<Vec<_>>()) < 1e-12);
        for n in [0, 5, 17] {
            let phi = b.phi(n);
            let got = apply(&ratio(), &b, &phi).unwrap();
            let l = b.eigenvalues[n];
            let want: Vec<Complex64> = phi.iter().map(|x| c(x * l / (1.0 + l))).collect();
            assert!(max_diff(&got, &want) < 1e-12);
        }
        let lap = apply_real(&laplacian(b.d), &b, &u).unwrap();
        let direct = b.graph.neg_laplacian(&u);
        let scale = direct.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        for v in b.graph.interior() {
            assert!((lap[v] - direct[v]).abs() < 1e-8 * scale);
        }
    }

    #[test]
    fn neumann_zero_mode_policy() {
        let b = basis(2, BoundaryCondition::Neumann);
        let one = vec![1.0; b.n_vertices()];
        // constants are annihilated by default, kept by symbols that opt in
        let out = apply(&constant(1.0), &b, &one).unwrap();
        assert!(out.iter().all(|z| z.norm() < 1e-12));
        let out = apply(&bessel(c(1.0), b.d), &b, &one).unwrap();
        assert!(out.iter().all(|z| (z.re - 1.0).abs() < 1e-12));
        let with_zero = b.clone().with_zero_mode(true);
        match apply(&riesz(c(1.0), b.d), &with_zero, &one) {
            Err(Error::SymbolUndefined(v)) => assert_eq!(v.len(), 1),
            other => panic!("expected rejection, got {other:?}"),
        }
        assert!(apply(&riesz(c(1.0), b.d), &b, &one).is_ok());
    }

    #[test]
    fn composition() {
        let b = basis(3, BoundaryCondition::Dirichlet);
        let u = random_u(&b, 2);
        assert!(compose_check(&ratio(), &constant(1.0), &b, &u).unwrap() < 1e-14);
        for s in [0.5, 1.5] {
            let a = bessel(c(s), b.d);
            let inv = bessel(c(-s), b.d);
            let out = apply_complex(&a, &b, &apply(&inv, &b, &u).unwrap()).unwrap();
            assert!(max_diff(&out, &u.iter().map(|x| c(*x)).collect::<Vec<_>>()) < 1e-11);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.1..3.0));
            let r: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.1..3.0));
            let p1 = Symbol::real("r1", 0.0, move |l| (q[0] + q[1] * l) / (q[2] + q[3] * l));
            let p2 = Symbol::real("r2", 0.0, move |l| (r[0] + r[1] * l) / (r[2] + r[3] * l));
            assert!(compose_check(&p1, &p2, &b, &u).unwrap() < 1e-12);
        }
    }

    #[test]
    fn kernel_examples() {
        let b = basis(3, BoundaryCondition::Dirichlet);
        let t = 1e-3;
        let k = kernel(&heat(t), &b).unwrap();
        let h = heat_kernel_real(&b, t).unwrap();
        assert!((&k.re - &h).amax() < 1e-12);
        assert!(k.im.is_none() && k.max_asymmetry() == 0.0);

        let u = random_u(&b, 4);
        let id = kernel(&constant(1.0), &b).unwrap().integrate(&u, b.mass());
        assert!(max_diff(&id, &u.iter().map(|x| c(*x)).collect::<Vec<_>>()) < 1e-10);

        for p in [ratio(), imaginary_power(3.0)] {
            let km = kernel(&p, &b).unwrap();
            let got = km.integrate(&u, b.mass());
            assert!(max_diff(&got, &apply(&p, &b, &u).unwrap()) < 1e-9);
            assert!(km.max_asymmetry() < 1e-12);
        }
    }

    #[test]
    fn bessel_row_sums_match_matrix_oracle() {
        for bc in [BoundaryCondition::Dirichlet, BoundaryCondition::Neumann] {
            let b = basis(3, bc);
            let g = &b.graph;
            let km = kernel(&bessel(c(1.0), b.d), &b).unwrap();
            let free: Vec<usize> = if bc == BoundaryCondition::Dirichlet { g.interior() } else { (0..g.n()).collect() };
            let e = g.energy_matrix();
            let a = DMatrix::from_fn(free.len(), free.len(), |i, j| {
                e[(free[i], free[j])] + if i == j { g.mass[free[i]] } else { 0.0 }
            });
            let rhs = nalgebra::DVector::from_fn(free.len(), |i, _| g.mass[free[i]]);
            let sol = a.lu().solve(&rhs).unwrap();
            let one = vec![1.0; g.n()];
            let sums = km.integrate(&one, b.mass());
            for (i, &v) in free.iter().enumerate() {
                assert!((sums[v].re - sol[i]).abs() < 1e-11, "{bc:?}");
            }
            if bc == BoundaryCondition::Neumann {
                assert!(sums.iter().all(|z| (z.re - 1.0).abs() < 1e-11));
            }
        }
    }

    #[test]
    fn unimodular_symbols() {
        let b = basis(3, BoundaryCondition::Dirichlet);
        let p = bessel(Complex64::new(0.0, 2.0), b.d);
        let (w_range, w) = spectral_weights(&p, &b).unwrap();
        assert_eq!(w_range, 0..b.len());
        assert!(w.iter().all(|z| (z.norm() - 1.0).abs() < 1e-14));
        assert!((l2_operator_norm(&p, &b).unwrap().0 - 1.0).abs() < 1e-10);
        let u = random_u(&b, 5);
        let out = apply(&p, &b, &u).unwrap();
        let n2: f64 = out.iter().zip(b.mass()).map(|(z, m)| z.norm_sqr() * m).sum::<f64>().sqrt();
        assert!((n2 - b.norm(&u)).abs() < 1e-10 * b.norm(&u));
    }

    #[test]
    fn decay_report_basics() {
        let b = basis(3, BoundaryCondition::Dirichlet);
        let km = kernel(&ratio(), &b).unwrap();
        let r0 = decay_report(&km, &b, 0.0, 0, 0).unwrap();
        let mut brute: f64 = 0.0;
        for x in 0..b.n_vertices() {
            for y in 0..b.n_vertices() {
                if x != y && b.metric.get(x, y) >= km.exclusion_radius {
                    brute = brute.max(km.abs(x, y));
                }
            }
        }
        assert_eq!(r0.sup, brute);
        assert!(r0.sup <= r0.max_abs_offdiag);

        let mut hk = kernel(&heat(1e-3), &b).unwrap();
        let mut last = f64::INFINITY;
        for f in [1.0, 1.25, 1.5, 2.0] {
            hk.exclusion_radius = f * default_exclusion_radius(&b);
            let r = decay_report(&hk, &b, b.d, 0, 0).unwrap();
            assert!(r.sup.is_finite() && r.sup <= last);
            last = r.sup;
        }
        hk.exclusion_radius = 1e3;
        assert!(matches!(decay_report(&hk, &b, b.d, 0, 0), Err(Error::NoAdmissiblePairs(_))));
    }

    #[test]
    fn derivative_kernels_are_spectral() {
        let b = basis(3, BoundaryCondition::Dirichlet);
        let p = imaginary_power(1.0);
        let km = kernel(&p, &b).unwrap().with_laplacians(&b, 1, 1);
        let q = Symbol::new("l2p", 0.0, move |l| l * l * p.eval(l));
        let direct = kernel(&q, &b).unwrap();
        let scale = direct.re.amax();
        assert!((&km.re - &direct.re).amax() < 1e-9 * scale);
        assert!((km.im.unwrap() - direct.im.unwrap()).amax() < 1e-9 * scale);
    }

    #[test]
    fn hormander_examples() {
        let elliptic = Symbol::real("1+l", 1.0, |l| 1.0 + l).with_derivatives(|j, l| {
            c(match j {
                0 => 1.0 + l,
                1 => 1.0,
                _ => 0.0,
            })
        });
        for eps in [0.25, 0.5, 1.0] {
            assert!(hormander_check(&elliptic, eps, 1.0, 3, 4, Some(1.0)).unwrap().passes);
        }
        let osc = Symbol::real("sin+2", 0.0, |l| l.sin() + 2.0).with_derivatives(|j, l| {
            c(match j % 4 {
                0 => l.sin() + if j == 0 { 2.0 } else { 0.0 },
                1 => l.cos(),
                2 => -l.sin(),
                _ => -l.cos(),
            })
        });
        assert!(hormander_check(&osc, 0.0, 1.0, 2, 4, None).unwrap().passes);
        assert!(!hormander_check(&osc, 0.5, 1.0, 2, 4, None).unwrap().passes);
        let one = hormander_check(&constant(1.0), 0.5, 1.0, 3, 3, Some(1.0)).unwrap();
        assert!(one.constants[1..].iter().all(|c| *c == 0.0));
        assert_eq!(one.hypothesis_met, Some(false));
        let vanishing = Symbol::real("l-10", 1.0, |l| l - 10.0);
        assert!(hormander_check(&vanishing, 0.5, 1.0, 1, 2, None).is_err());

        let p2 = Symbol2::real("1+l1+l2", 1.0, |a, b| 1.0 + a + b);
        assert!(hormander_check2(&p2, 1.0, 1.0, 2, 3, None).unwrap().passes);
    }

    #[test]
    fn rho_exponent() {
        let (e, s) = rho_kernel_exponent(2.0, 1.0, 1.0).unwrap();
        assert!((e - 2.0).abs() < 1e-15 && s == 0.0);
        assert!(rho_kernel_exponent(2.0, 1.0, 0.4).is_err());
        let (_, s) = rho_kernel_exponent(2.0, 1.0, 0.75).unwrap();
        assert!(s < 0.0);
    }
}

//! Generalized eigenproblem E v = λ M v, the decimation oracle for the
//! gasket, renormalized limits, ratio gaps and Weyl counting.

use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::evd;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fit::{line_fit, LineFit};
use crate::graph::{build, resistance_dimension, FractalGraph, FractalKind, ResistanceMetric};
use crate::provenance::sha256_hex;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryCondition {
    Dirichlet,
    Neumann,
    /// Closed fractafold (empty boundary).
    None,
}

impl BoundaryCondition {
    pub fn name(self) -> &'static str {
        match self {
            BoundaryCondition::Dirichlet => "dirichlet",
            BoundaryCondition::Neumann => "neumann",
            BoundaryCondition::None => "none",
        }
    }
}

impl std::str::FromStr for BoundaryCondition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dirichlet" => Ok(BoundaryCondition::Dirichlet),
            "neumann" => Ok(BoundaryCondition::Neumann),
            "none" | "closed" => Ok(BoundaryCondition::None),
            other => invalid(format!("unknown boundary condition '{other}'")),
        }
    }
}

/// Eigenpairs of one graph and boundary condition. Vectors are stored over
/// all vertices (zero on a Dirichlet boundary) and are mass-orthonormal.
#[derive(Clone, Debug)]
pub struct EigenBasis {
    pub graph: Arc<FractalGraph>,
    pub metric: Arc<ResistanceMetric>,
    pub bc: BoundaryCondition,
    pub eigenvalues: Vec<f64>,
    pub vectors: DMatrix<f64>,
    /// Number of leading zero eigenvalues (constants for Neumann/closed).
    pub zero_modes: usize,
    pub zero_mode_excluded: bool,
    /// Measured resistance-metric dimension of the graph.
    pub d: f64,
}

fn validate_bc(g: &FractalGraph, bc: BoundaryCondition) -> Result<()> {
    match (bc, g.boundary.is_empty()) {
        (BoundaryCondition::None, false) => invalid("bc 'none' is for closed fractafolds; this graph has a boundary"),
        (BoundaryCondition::Dirichlet | BoundaryCondition::Neumann, true) => {
            invalid("dirichlet/neumann need a nonempty boundary")
        }
        _ => Ok(()),
    }
}

/// Raw solver output: eigenvalues ascending and mass-orthonormal vectors over all vertices.
fn solve_raw(g: &FractalGraph, bc: BoundaryCondition) -> Result<(Vec<f64>, DMatrix<f64>)> {
    validate_bc(g, bc)?;
    let active: Vec<usize> = match bc {
        BoundaryCondition::Dirichlet => g.interior(),
        _ => (0..g.n()).collect(),
    };
    let k = active.len();
    if k == 0 {
        return invalid("no free vertices");
    }
    let e = g.energy_matrix();
    let s: Vec<f64> = active.iter().map(|&v| 1.0 / g.mass[v].sqrt()).collect();
    let a = DMatrix::from_fn(k, k, |i, j| e[(active[i], active[j])] * s[i] * s[j]);
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::Eigen("non-finite matrix entries".into()));
    }
    let (mut vals, mut y) = symmetric_eigen(&a)?;
    canonicalize(&mut vals, &mut y);
    let mut v = DMatrix::zeros(g.n(), k);
    for c in 0..k {
        for (r, &vert) in active.iter().enumerate() {
            v[(vert, c)] = y[(r, c)] * s[r];
        }
    }
    Ok((vals, v))
}

/// Dense symmetric eigendecomposition, eigenvalues ascending. Runs single
/// threaded so the output does not depend on the worker count.
fn symmetric_eigen(a: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let k = a.nrows();
    let fa = faer::Mat::<f64>::from_fn(k, k, |i, j| a[(i, j)]);
    let mut u = faer::Mat::<f64>::zeros(k, k);
    let mut s = faer::diag::Diag::<f64>::zeros(k);
    let par = faer::Par::Seq;
    let scratch = evd::self_adjoint_evd_scratch::<f64>(k, evd::ComputeEigenvectors::Yes, par, Default::default());
    evd::self_adjoint_evd(
        fa.as_ref(),
        s.as_mut(),
        Some(u.as_mut()),
        par,
        MemStack::new(&mut MemBuffer::new(scratch)),
        Default::default(),
    )
    .map_err(|e| Error::Eigen(format!("no convergence (n={k}): {e:?}")))?;
    let vals: Vec<f64> = (0..k).map(|i| s[i]).collect();
    let y = DMatrix::from_fn(k, k, |r, c| u[(r, c)]);
    Ok((vals, y))
}

/// Fix a deterministic basis in every eigenspace: clusters are re-spanned by
/// Gram-Schmidt on projected unit vectors taken in vertex order, simple
/// eigenvectors get a sign convention.
fn canonicalize(vals: &mut [f64], y: &mut DMatrix<f64>) {
    let k = vals.len();
    let scale = vals.iter().fold(0.0f64, |a, b| a.max(b.abs())).max(1e-300);
    let mut start = 0;
    while start < k {
        let mut end = start + 1;
        while end < k && vals[end] - vals[end - 1] <= 1e-9 * vals[end].abs() + 1e-11 * scale {
            end += 1;
        }
        if end - start > 1 {
            canonical_cluster(y, start, end);
            let mean = vals[start..end].iter().sum::<f64>() / (end - start) as f64;
            for v in &mut vals[start..end] {
                *v = mean;
            }
        } else {
            fix_sign(y, start);
        }
        start = end;
    }
}

fn fix_sign(y: &mut DMatrix<f64>, c: usize) {
    let col = y.column(c);
    let max = col.amax();
    if let Some(first) = col.iter().find(|x| x.abs() > 1e-6 * max) {
        if *first < 0.0 {
            y.column_mut(c).neg_mut();
        }
    }
}

fn canonical_cluster(y: &mut DMatrix<f64>, start: usize, end: usize) {
    let m = end - start;
    let n = y.nrows();
    let block = y.columns(start, m).into_owned();
    let row_norm_max = (0..n).map(|i| block.row(i).norm()).fold(0.0, f64::max);
    let mut accepted: Vec<nalgebra::DVector<f64>> = Vec::with_capacity(m);
    for i in 0..n {
        if accepted.len() == m {
            break;
        }
        let mut r = block.row(i).transpose();
        for _ in 0..2 {
            for a in &accepted {
                let p = a.dot(&r);
                r -= a * p;
            }
        }
        let nr = r.norm();
        if nr > 1e-5 * row_norm_max {
            accepted.push(r / nr);
        }
    }
    debug_assert_eq!(accepted.len(), m);
    let coeff = DMatrix::from_columns(&accepted);
    let fresh = &block * coeff;
    y.columns_mut(start, m).copy_from(&fresh);
}

fn count_zero_modes(vals: &[f64], bc: BoundaryCondition) -> usize {
    if bc == BoundaryCondition::Dirichlet {
        return 0;
    }
    let top = vals.last().copied().unwrap_or(0.0).abs().max(1.0);
    vals.iter().take_while(|v| v.abs() <= 1e-9 * top).count()
}

pub fn eigensolve(g: &FractalGraph, bc: BoundaryCondition) -> Result<EigenBasis> {
    let (vals, vecs) = solve_raw(g, bc)?;
    assemble(g, bc, vals, vecs)
}

fn assemble(g: &FractalGraph, bc: BoundaryCondition, mut vals: Vec<f64>, mut vecs: DMatrix<f64>) -> Result<EigenBasis> {
    let metric = ResistanceMetric::new(g)?;
    let d = resistance_dimension(g, &metric).map(|f| f.d).unwrap_or(f64::NAN);
    let zero_modes = count_zero_modes(&vals, bc);
    // a connected graph has the constants as its only zero mode; make it exact
    if zero_modes == 1 {
        vals[0] = 0.0;
        let c = 1.0 / g.total_mass().sqrt();
        vecs.column_mut(0).fill(c);
    }
    Ok(EigenBasis {
        graph: Arc::new(g.clone()),
        metric: Arc::new(metric),
        bc,
        eigenvalues: vals,
        vectors: vecs,
        zero_modes,
        zero_mode_excluded: zero_modes > 0,
        d,
    })
}

const CACHE_MAGIC: &[u8; 8] = b"FFEIG001";

fn cache_key(g: &FractalGraph, bc: BoundaryCondition) -> String {
    let mut s = g.to_json_string();
    s.push('|');
    s.push_str(bc.name());
    sha256_hex(s.as_bytes())[..24].to_string()
}

pub fn cache_path(dir: &Path, g: &FractalGraph, bc: BoundaryCondition) -> PathBuf {
    dir.join(format!("eig-{}.bin", cache_key(g, bc)))
}

fn encode(vals: &[f64], vecs: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * (vals.len() + vecs.len()));
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&(vecs.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(vals.len() as u64).to_le_bytes());
    for v in vals {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    for v in vecs.iter() {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    out
}

fn decode(bytes: &[u8]) -> Option<(Vec<f64>, DMatrix<f64>)> {
    if bytes.len() < 24 || &bytes[..8] != CACHE_MAGIC {
        return None;
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().ok()?) as usize;
    let k = u64::from_le_bytes(bytes[16..24].try_into().ok()?) as usize;
    if bytes.len() != 24 + 8 * (k + rows * k) {
        return None;
    }
    let f = |i: usize| f64::from_bits(u64::from_le_bytes(bytes[24 + 8 * i..32 + 8 * i].try_into().unwrap()));
    let vals = (0..k).map(f).collect();
    let vecs = DMatrix::from_iterator(rows, k, (0..rows * k).map(|i| f(k + i)));
    Some((vals, vecs))
}

/// Eigensolve through an on-disk cache keyed by (graph hash, bc). A hit returns
/// the stored bits, which equal a fresh solve bit for bit.
pub fn eigensolve_cached(g: &FractalGraph, bc: BoundaryCondition, dir: Option<&Path>) -> Result<EigenBasis> {
    let Some(dir) = dir else {
        return eigensolve(g, bc);
    };
    let path = cache_path(dir, g, bc);
    if let Ok(bytes) = std::fs::read(&path) {
        if let Some((vals, vecs)) = decode(&bytes) {
            if vecs.nrows() == g.n() {
                return assemble(g, bc, vals, vecs);
            }
        }
    }
    let (vals, vecs) = solve_raw(g, bc)?;
    std::fs::create_dir_all(dir)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode(&vals, &vecs))?;
    std::fs::rename(&tmp, &path)?;
    assemble(g, bc, vals, vecs)
}

impl EigenBasis {
    pub fn n_vertices(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// Indices of the modes operators act on.
    pub fn active(&self) -> Range<usize> {
        if self.zero_mode_excluded {
            self.zero_modes..self.len()
        } else {
            0..self.len()
        }
    }

    pub fn active_eigenvalues(&self) -> &[f64] {
        &self.eigenvalues[self.active()]
    }

    pub fn with_zero_mode(mut self, include: bool) -> Self {
        self.zero_mode_excluded = !include && self.zero_modes > 0;
        self
    }

    pub fn mass(&self) -> &[f64] {
        &self.graph.mass
    }

    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        u.iter().zip(v).zip(self.mass()).map(|((a, b), m)| a * b * m).sum()
    }

    pub fn norm(&self, u: &[f64]) -> f64 {
        self.inner(u, u).sqrt()
    }

    pub fn phi(&self, k: usize) -> Vec<f64> {
        self.vectors.column(k).iter().copied().collect()
    }

    /// ⟨u, φ_k⟩_μ for every mode k (including zero modes).
    pub fn coefficients(&self, u: &[f64]) -> Vec<f64> {
        let mu: Vec<f64> = u.iter().zip(self.mass()).map(|(a, m)| a * m).collect();
        (0..self.len())
            .map(|k| self.vectors.column(k).iter().zip(&mu).map(|(p, w)| p * w).sum())
            .collect()
    }

    /// Σ_k c_k φ_k over all modes.
    pub fn synthesize(&self, c: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_vertices()];
        for (k, ck) in c.iter().enumerate() {
            if *ck == 0.0 {
                continue;
            }
            for (o, p) in out.iter_mut().zip(self.vectors.column(k).iter()) {
                *o += ck * p;
            }
        }
        out
    }

    /// Distinct eigenvalues with the index ranges of their eigenspaces.
    pub fn eigenspaces(&self) -> Vec<(f64, Range<usize>)> {
        let mut out = Vec::new();
        let vals = &self.eigenvalues;
        let mut s = 0;
        while s < vals.len() {
            let mut e = s + 1;
            while e < vals.len() && vals[e] == vals[s] {
                e += 1;
            }
            out.push((vals[s], s..e));
            s = e;
        }
        out
    }

    pub fn max_abs_residual_ratio(&self) -> f64 {
        let e = self.graph.energy_matrix();
        let mut worst: f64 = 0.0;
        for k in 0..self.len() {
            let v = self.vectors.column(k);
            let ev = &e * v;
            let lam = self.eigenvalues[k];
            for i in 0..self.n_vertices() {
                if self.bc == BoundaryCondition::Dirichlet && self.graph.is_boundary(i) {
                    continue;
                }
                let r = (ev[i] - lam * self.graph.mass[i] * v[i]).abs();
                worst = worst.max(r / lam.abs().max(1.0));
            }
        }
        worst
    }

    /// Bit-level encoding of the eigendata (the cache payload).
    pub fn encode(&self) -> Vec<u8> {
        encode(&self.eigenvalues, &self.vectors)
    }

    pub fn hash(&self) -> String {
        sha256_hex(&self.encode())
    }
}

/// The two solutions of λ' (5 − λ') = λ.
pub fn descendants(lambda: f64) -> (f64, f64) {
    let r = (25.0 - 4.0 * lambda).max(0.0).sqrt();
    ((5.0 - r) / 2.0, (5.0 + r) / 2.0)
}

pub fn phi_minus(lambda: f64) -> f64 {
    // cancellation-free form of (5 - sqrt(25 - 4λ))/2
    2.0 * lambda / (5.0 + (25.0 - 4.0 * lambda).max(0.0).sqrt())
}

/// Plain Dirichlet gasket spectrum as (value, multiplicity), ascending, without the dense check.
pub fn decimation_multiset(level: usize) -> Result<Vec<(f64, usize)>> {
    if level == 0 {
        return invalid("decimation starts at level 1");
    }
    let mut spec: Vec<(f64, usize)> = vec![(2.0, 1), (5.0, 2)];
    for l in 1..level {
        let mut next = Vec::with_capacity(2 * spec.len() + 2);
        for &(lam, mult) in &spec {
            if (lam - 6.0).abs() < 1e-9 {
                next.push((3.0, mult));
            } else {
                next.push((phi_minus(lam), mult));
                next.push((descendants(lam).1, mult));
            }
        }
        let p = 3usize.pow(l as u32);
        next.push((5.0, (p + 3) / 2));
        next.push((6.0, (3 * p - 3) / 2));
        next.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, usize)> = Vec::with_capacity(next.len());
        for (v, m) in next {
            match merged.last_mut() {
                Some(last) if (last.0 - v).abs() < 1e-12 => last.1 += m,
                _ => merged.push((v, m)),
            }
        }
        spec = merged;
    }
    Ok(spec)
}

fn expand(ms: &[(f64, usize)]) -> Vec<f64> {
    ms.iter().flat_map(|&(v, m)| std::iter::repeat_n(v, m)).collect()
}

/// Sorted plain Dirichlet spectrum of the level-`level` gasket from the
/// decimation recursion. Levels ≤ 4 are compared against a dense solve and
/// any mismatch is an error carrying the diff.
pub fn decimation_spectrum(level: usize) -> Result<Vec<f64>> {
    let spec = expand(&decimation_multiset(level)?);
    if level <= 4 {
        let g = build(FractalKind::Gasket, level)?.to_plain();
        let (dense, _) = solve_raw(&g, BoundaryCondition::Dirichlet)?;
        multiset_diff(&spec, &dense, 1e-10).map_err(|diff| Error::DecimationMismatch { level, diff })?;
    }
    Ok(spec)
}

/// Ok when both sorted lists have equal length and agree elementwise within tol.
pub fn multiset_diff(a: &[f64], b: &[f64], tol: f64) -> std::result::Result<f64, String> {
    if a.len() != b.len() {
        return Err(format!("sizes differ: {} vs {}", a.len(), b.len()));
    }
    let mut worst: f64 = 0.0;
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let d = (x - y).abs();
        if d > tol {
            return Err(format!("index {i}: {x} vs {y} (|diff| {d:.3e})"));
        }
        worst = worst.max(d);
    }
    Ok(worst)
}

#[derive(Clone, Debug, Serialize)]
pub struct Branch {
    pub start: f64,
    /// c·5^m·λ_m per level.
    pub values: Vec<f64>,
    pub increments: Vec<f64>,
    /// Per-branch least-squares c against the dense renormalized solve.
    pub c_branch: f64,
    pub cauchy: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct LimitsReport {
    pub levels: Vec<usize>,
    pub c: f64,
    pub branches: Vec<Branch>,
}

/// 5^m·λ_m along the φ₋ continuation of a plain eigenvalue, one per level.
pub fn branch_sequence(start: f64, start_level: usize, levels: usize) -> Vec<f64> {
    let mut lam = start;
    let mut out = Vec::with_capacity(levels);
    for j in 0..levels {
        if j > 0 {
            lam = phi_minus(lam);
        }
        out.push(5f64.powi((start_level + j) as i32) * lam);
    }
    out
}

/// Track the lowest `branches` Dirichlet eigenvalues across consecutive levels.
/// The constant c relating 5^m·λ_m to the renormalized generalized spectrum is
/// fitted by least squares against dense solves.
pub fn renormalized_limits(levels: &[usize], branches: usize) -> Result<LimitsReport> {
    if levels.len() < 3 || levels.windows(2).any(|w| w[1] != w[0] + 1) || levels[0] == 0 {
        return invalid("need at least three consecutive levels ≥ 1");
    }
    let starts: Vec<f64> = decimation_multiset(levels[0])?.iter().take(branches).map(|p| p.0).collect();
    if starts.len() < branches {
        return invalid("not enough distinct eigenvalues at the first level");
    }
    let mut dense = Vec::new();
    for &m in levels {
        let g = build(FractalKind::Gasket, m)?;
        let (vals, _) = solve_raw(&g, BoundaryCondition::Dirichlet)?;
        let mut distinct: Vec<f64> = Vec::new();
        for v in vals {
            if distinct.last().is_none_or(|l| (v - l).abs() > 1e-9 * v) {
                distinct.push(v);
            }
        }
        dense.push(distinct);
    }
    let seqs: Vec<Vec<f64>> = starts.iter().map(|&s| branch_sequence(s, levels[0], levels.len())).collect();
    let (mut num, mut den) = (0.0, 0.0);
    let mut per_branch = Vec::new();
    for (b, seq) in seqs.iter().enumerate() {
        let (mut nb, mut db) = (0.0, 0.0);
        for (j, x) in seq.iter().enumerate() {
            let mu = dense[j][b];
            nb += mu * x;
            db += x * x;
        }
        num += nb;
        den += db;
        per_branch.push(nb / db);
    }
    let c = num / den;
    let branches = seqs
        .into_iter()
        .zip(starts)
        .zip(per_branch)
        .map(|((seq, start), cb)| {
            let values: Vec<f64> = seq.iter().map(|x| c * x).collect();
            let increments: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).collect();
            let cauchy = increments.windows(2).all(|w| w[1].abs() <= w[0].abs() + 1e-12);
            Branch { start, values, increments, c_branch: cb, cauchy }
        })
        .collect();
    Ok(LimitsReport { levels: levels.to_vec(), c, branches })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Gap {
    pub alpha: f64,
    pub beta: f64,
    pub relative_width: f64,
    /// Eigenvalue pair realizing α (absent when α = 1).
    pub witness_low: Option<(f64, f64)>,
    pub witness_high: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapList {
    pub gaps: Vec<Gap>,
}

impl GapList {
    pub fn widest(&self) -> Option<&Gap> {
        self.gaps.iter().max_by(|a, b| a.relative_width.total_cmp(&b.relative_width))
    }
}

pub fn distinct_positive(values: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| *x > 0.0).collect();
    v.sort_by(|a, b| a.total_cmp(b));
    let mut out: Vec<f64> = Vec::with_capacity(v.len());
    for x in v {
        if out.last().is_none_or(|l| (x - l) > 1e-9 * x) {
            out.push(x);
        }
    }
    out
}

/// All ratios λ/λ' > 1 of distinct eigenvalues with the realizing pair.
pub fn ratio_set(values: &[f64]) -> Vec<(f64, (f64, f64))> {
    let d = distinct_positive(values);
    let mut r = Vec::with_capacity(d.len() * d.len() / 2);
    for (i, &hi) in d.iter().enumerate() {
        for &lo in &d[..i] {
            r.push((hi / lo, (hi, lo)));
        }
    }
    r.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1 .0.total_cmp(&b.1 .0)));
    r
}

/// Maximal intervals (α, β) of the ratio line above 1 containing no ratio of
/// distinct eigenvalues, keeping those with β/α − 1 ≥ `min_relative_width`.
pub fn ratio_gaps(values: &[f64], min_relative_width: f64) -> GapList {
    let ratios = ratio_set(values);
    let mut gaps = Vec::new();
    let mut prev: (f64, Option<(f64, f64)>) = (1.0, None);
    for (r, pair) in ratios {
        if r > prev.0 * (1.0 + 1e-12) {
            let rel = r / prev.0 - 1.0;
            if rel >= min_relative_width {
                gaps.push(Gap { alpha: prev.0, beta: r, relative_width: rel, witness_low: prev.1, witness_high: pair });
            }
        }
        if r >= prev.0 {
            prev = (r, Some(pair));
        }
    }
    GapList { gaps }
}

pub fn spectral_gaps(basis: &EigenBasis, min_relative_width: f64) -> Result<GapList> {
    let vals = basis.active_eigenvalues();
    if vals.len() < 10 {
        return invalid("need at least 10 eigenvalues for a gap scan");
    }
    Ok(ratio_gaps(vals, min_relative_width))
}

/// Least-squares slope of log N(λ) against log λ, N counting eigenvalues with
/// multiplicity, over positive eigenvalues inside [lo, hi].
pub fn weyl_exponent(values: &[f64], lo: f64, hi: f64) -> Result<LineFit> {
    let mut pos: Vec<f64> = values.iter().copied().filter(|x| *x > 0.0).collect();
    pos.sort_by(|a, b| a.total_cmp(b));
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, &l) in pos.iter().enumerate() {
        if l >= lo && l <= hi {
            xs.push(l.ln());
            ys.push(((i + 1) as f64).ln());
        }
    }
    if xs.len() < 5 {
        return Err(Error::Fit(format!("only {} eigenvalues in the Weyl window", xs.len())));
    }
    line_fit(&xs, &ys).ok_or_else(|| Error::Fit("degenerate Weyl fit".into()))
}

/// Weyl fit over [λ_min, λ_max/10]; the top decade is compressed by the discretization.
pub fn weyl_exponent_default(basis: &EigenBasis) -> Result<LineFit> {
    let v = basis.active_eigenvalues();
    let lo = v.iter().copied().find(|x| *x > 0.0).unwrap_or(0.0);
    let hi = v.last().copied().unwrap_or(0.0) / 10.0;
    weyl_exponent(v, lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build;

    fn plain_dirichlet(level: usize) -> Vec<f64> {
        let g = build(FractalKind::Gasket, level).unwrap().to_plain();
        eigensolve(&g, BoundaryCondition::Dirichlet).unwrap().eigenvalues
    }

    #[test]
    fn level_one_plain_dirichlet() {
        let v = plain_dirichlet(1);
        assert_eq!(v.len(), 3);
        for (a, b) in v.iter().zip([2.0, 5.0, 5.0]) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn circle_plain_spectrum() {
        let g = build(FractalKind::Circle, 8).unwrap().to_plain();
        let b = eigensolve(&g, BoundaryCondition::None).unwrap();
        let mut want: Vec<f64> =
            (0..8).map(|k| 2.0 - 2.0 * (2.0 * std::f64::consts::PI * k as f64 / 8.0).cos()).collect();
        want.sort_by(|a, b| a.total_cmp(b));
        assert!(multiset_diff(&b.eigenvalues, &want, 1e-10).is_ok());
        assert_eq!(b.zero_modes, 1);
    }

    #[test]
    fn bc_validation() {
        let g = build(FractalKind::Gasket, 1).unwrap();
        assert!(eigensolve(&g, BoundaryCondition::None).is_err());
        let c = build(FractalKind::Circle, 5).unwrap();
        assert!(eigensolve(&c, BoundaryCondition::Dirichlet).is_err());
    }

    #[test]
    fn descendants_of_two() {
        let (a, b) = descendants(2.0);
        assert!((a - (5.0 - 17f64.sqrt()) / 2.0).abs() < 1e-15);
        assert!((b - (5.0 + 17f64.sqrt()) / 2.0).abs() < 1e-15);
        assert_eq!(phi_minus(0.0), 0.0);
        assert!((phi_minus(2.0) - a).abs() < 1e-15);
    }

    #[test]
    fn decimation_matches_dense() {
        for level in 1..=4 {
            decimation_spectrum(level).unwrap();
        }
        let five = expand(&decimation_multiset(5).unwrap());
        assert!(multiset_diff(&five, &plain_dirichlet(5), 1e-9).is_ok());
    }

    #[test]
    fn renormalized_is_scaled_plain() {
        let g = build(FractalKind::Gasket, 3).unwrap();
        let b = eigensolve(&g, BoundaryCondition::Dirichlet).unwrap();
        let p = plain_dirichlet(3);
        for (r, q) in b.eigenvalues.iter().zip(&p) {
            assert!((r - 1.5 * 125.0 * q).abs() < 1e-9 * r);
        }
    }

    #[test]
    fn orthonormal_and_residual() {
        for (kind, level, bc) in [
            (FractalKind::Gasket, 3, BoundaryCondition::Dirichlet),
            (FractalKind::Gasket, 3, BoundaryCondition::Neumann),
            (FractalKind::Gasket, 4, BoundaryCondition::Neumann),
            (FractalKind::Gasket, 5, BoundaryCondition::Neumann),
            (FractalKind::Gasket, 5, BoundaryCondition::Dirichlet),
            (FractalKind::GasketDoubleCover, 2, BoundaryCondition::None),
            (FractalKind::GasketDoubleCover, 4, BoundaryCondition::None),
            (FractalKind::Circle, 12, BoundaryCondition::None),
        ] {
            let g = build(kind, level).unwrap();
            let b = eigensolve(&g, bc).unwrap();
            let n = b.len();
            for i in 0..n {
                for j in 0..n {
                    let ip = b.inner(&b.phi(i), &b.phi(j));
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((ip - want).abs() < 1e-10, "{kind:?} ({i},{j}) {ip}");
                }
            }
            let res = b.max_abs_residual_ratio();
            assert!(res < 1e-9, "{kind:?} level {level} {bc:?}: residual {res:.3e}");
        }
    }

    #[test]
    fn degenerate_basis_is_deterministic() {
        let g = build(FractalKind::Gasket, 3).unwrap();
        let a = eigensolve(&g, BoundaryCondition::Dirichlet).unwrap();
        let b = eigensolve(&g, BoundaryCondition::Dirichlet).unwrap();
        assert_eq!(a.encode(), b.encode());
    }

    #[test]
    fn dirichlet_dominates_neumann() {
        for level in 1..=3 {
            let g = build(FractalKind::Gasket, level).unwrap();
            let d = eigensolve(&g, BoundaryCondition::Dirichlet).unwrap().eigenvalues;
            let n = eigensolve(&g, BoundaryCondition::Neumann).unwrap().eigenvalues;
            for (i, x) in d.iter().enumerate() {
                assert!(*x >= n[i] - 1e-9);
            }
        }
    }

    #[test]
    fn limits_constant_and_shrinking_increments() {
        let rep = renormalized_limits(&[2, 3, 4], 5).unwrap();
        assert!((rep.c - 1.5).abs() < 1e-9);
        for b in &rep.branches {
            assert!((b.c_branch / rep.c - 1.0).abs() < 0.05);
            assert!(b.cauchy);
        }
        let low = &rep.branches[0];
        let ratio = low.increments[0] / low.increments[1];
        assert!((ratio - 5.0).abs() < 1.0, "{ratio}");
        assert!(branch_sequence(0.0, 2, 4).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_point_gap() {
        let g = ratio_gaps(&[1.0, 10.0], 0.0);
        assert_eq!(g.gaps.len(), 1);
        assert_eq!((g.gaps[0].alpha, g.gaps[0].beta), (1.0, 10.0));
    }

    #[test]
    fn arithmetic_spectrum_matches_brute_force() {
        let n = 12;
        let vals: Vec<f64> = (1..=n).map(|k| k as f64).collect();
        let g = ratio_gaps(&vals, 0.0);
        let mut ratios: Vec<f64> = Vec::new();
        for a in 1..=n {
            for b in 1..a {
                ratios.push(a as f64 / b as f64);
            }
        }
        ratios.push(1.0);
        ratios.sort_by(|a, b| a.total_cmp(b));
        ratios.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        assert_eq!(g.gaps.len(), ratios.len() - 1);
        for (gap, w) in g.gaps.iter().zip(ratios.windows(2)) {
            assert!((gap.alpha - w[0]).abs() < 1e-12 && (gap.beta - w[1]).abs() < 1e-12);
        }
        let threshold = 1.0 / (n as f64 - 1.0);
        let wide = ratio_gaps(&vals, threshold + 1e-9);
        assert!(wide.gaps.iter().all(|g| g.alpha >= 1.0 + threshold - 1e-12 || g.alpha == 1.0));
    }

    #[test]
    fn cache_roundtrip_bit_identical() {
        let dir = std::env::temp_dir().join(format!("fractafold-cache-{}", std::process::id()));
        let g = build(FractalKind::Gasket, 2).unwrap();
        let fresh = eigensolve(&g, BoundaryCondition::Neumann).unwrap();
        let first = eigensolve_cached(&g, BoundaryCondition::Neumann, Some(&dir)).unwrap();
        let hit = eigensolve_cached(&g, BoundaryCondition::Neumann, Some(&dir)).unwrap();
        assert_eq!(fresh.encode(), first.encode());
        assert_eq!(fresh.encode(), hit.encode());
        let _ = std::fs::remove_dir_all(dir);
    }
}

//! Cone-localized coefficient decay on products of two compact fractafolds.
//!
//! Smoothness of u on a region Ω = a × b asks for some v with v = u on Ω and
//! rapidly decaying coefficients. The witness used here is the extension of
//! u|Ω with least mixed Sobolev norm Σ (1+λ1)^{2σ}(1+λ2)^{2σ}|c|², which
//! factors into one extension operator per factor. Multiplying u by the
//! region's indicator instead would add a jump at the region's boundary
//! points and mark every function as singular. The least-norm extension
//! spreads over all directions, so u itself is tried as a second witness;
//! a cell is smooth when either witness decays there. The choice of
//! witnesses is a heuristic and its verdicts are estimates.

use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::fit::line_fit;
use crate::graph::FractalGraph;
use crate::products::{product_basis, ConeSpec, Field2, ProductBasis};
use crate::spectral::EigenBasis;
use crate::symbol::{riesz_i, Symbol2};

/// Relative floor: coefficients below this times the field maximum count as 0.
pub const COEFF_FLOOR: f64 = 1e-13;
/// Default highest tested decay order n (rates n/(d+1)).
pub const DEFAULT_N_MAX: usize = 2;
pub const VERDICT_MARGIN: f64 = 1.1;
pub const MIN_CONE_POINTS: usize = 20;
/// Fewer non-zero envelope shells than this means nothing is left to decay.
const MIN_SHELLS: usize = 3;

/// Tensor basis over all modes of both factors.
pub fn full_product(b1: &EigenBasis, b2: &EigenBasis) -> Result<ProductBasis> {
    product_basis(Arc::new(b1.clone().with_zero_mode(true)), Arc::new(b2.clone().with_zero_mode(true)))
}

/// Spectral application over all modes. A symbol undefined at the origin
/// (Riesz-type) gets the value 0 there, i.e. it annihilates constants.
pub fn apply_full(p: &Symbol2, fp: &ProductBasis, u: &Field2) -> Result<Field2> {
    let s = DMatrix::from_fn(fp.l1.len(), fp.l2.len(), |i, j| {
        let (a, b) = (fp.l1[i], fp.l2[j]);
        let v = p.eval(a, b);
        if a == 0.0 && b == 0.0 && !(v.re.is_finite() && v.im.is_finite()) {
            Complex64::new(0.0, 0.0)
        } else {
            v
        }
    });
    if let Some(z) = s.iter().find(|z| !(z.re.is_finite() && z.im.is_finite())) {
        return invalid(format!("symbol '{}' is not finite on the spectrum ({z})", p.name));
    }
    let cr = fp.coefficients(&u.re);
    let ci = fp.coefficients(&u.im);
    let re = DMatrix::from_fn(cr.nrows(), cr.ncols(), |i, j| cr[(i, j)] * s[(i, j)].re - ci[(i, j)] * s[(i, j)].im);
    let im = DMatrix::from_fn(cr.nrows(), cr.ncols(), |i, j| cr[(i, j)] * s[(i, j)].im + ci[(i, j)] * s[(i, j)].re);
    Ok(Field2 { re: fp.synthesize(&re), im: fp.synthesize(&im) })
}

/// Coefficient magnitudes on the lattice of eigenvalue pairs. Each entry is
/// the norm of the coefficient block of one pair of eigenspaces, so the field
/// does not depend on the basis chosen inside degenerate eigenspaces.
#[derive(Clone, Debug, PartialEq)]
pub struct CoeffField {
    pub l1: Vec<f64>,
    pub l2: Vec<f64>,
    pub values: DMatrix<f64>,
}

fn spaces(values: &[f64]) -> Vec<(f64, std::ops::Range<usize>)> {
    let mut out = Vec::new();
    let mut s = 0;
    while s < values.len() {
        let mut e = s + 1;
        while e < values.len() && values[e] == values[s] {
            e += 1;
        }
        out.push((values[s], s..e));
        s = e;
    }
    out
}

impl CoeffField {
    pub fn from_coefficients(fp: &ProductBasis, re: &DMatrix<f64>, im: &DMatrix<f64>) -> CoeffField {
        let s1 = spaces(&fp.l1);
        let s2 = spaces(&fp.l2);
        let values = DMatrix::from_fn(s1.len(), s2.len(), |a, b| {
            let mut t = 0.0;
            for i in s1[a].1.clone() {
                for j in s2[b].1.clone() {
                    t += re[(i, j)].powi(2) + im[(i, j)].powi(2);
                }
            }
            t.sqrt()
        });
        CoeffField { l1: s1.iter().map(|s| s.0).collect(), l2: s2.iter().map(|s| s.0).collect(), values }
    }

    pub fn of(fp: &ProductBasis, u: &Field2) -> CoeffField {
        CoeffField::from_coefficients(fp, &fp.coefficients(&u.re), &fp.coefficients(&u.im))
    }

    /// Synthetic field c(λ1, λ2) on a given lattice.
    pub fn from_fn(l1: Vec<f64>, l2: Vec<f64>, f: impl Fn(f64, f64) -> f64) -> CoeffField {
        let values = DMatrix::from_fn(l1.len(), l2.len(), |i, j| f(l1[i], l2[j]));
        CoeffField { l1, l2, values }
    }
}

/// A cone of directions in the closed quadrant, as an interval of the ratio
/// t = λ1/λ2 in [0, ∞]. `lo = 0` adds the λ2 axis (t = 0) and `hi = ∞` the
/// λ1 axis; an interval strictly inside (0, ∞) is an open cone Γ_{a,ε}.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WfCone {
    pub id: String,
    pub lo: f64,
    pub hi: f64,
}

impl WfCone {
    pub fn new(id: impl Into<String>, lo: f64, hi: f64) -> Result<Self> {
        if !(lo >= 0.0 && hi > lo) {
            return invalid(format!("cone needs 0 ≤ lo < hi, got [{lo}, {hi}]"));
        }
        Ok(WfCone { id: id.into(), lo, hi })
    }

    pub fn from_spec(id: impl Into<String>, c: &ConeSpec) -> Self {
        WfCone { id: id.into(), lo: c.lo(), hi: c.hi() }
    }

    pub fn contains(&self, l1: f64, l2: f64) -> bool {
        if l1 == 0.0 && l2 == 0.0 {
            return false;
        }
        let t = if l2 == 0.0 { f64::INFINITY } else { l1 / l2 };
        let above = t > self.lo || (self.lo == 0.0 && t == 0.0);
        let below = t < self.hi || (self.hi == f64::INFINITY && t == f64::INFINITY);
        above && below
    }
}

/// Coarse direction classes used by the tensor-product reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum ConeClass {
    /// Near the λ2 axis (λ1 ≪ λ2).
    YAxis,
    Interior,
    /// Near the λ1 axis (λ2 ≪ λ1).
    XAxis,
}

impl ConeClass {
    pub const ALL: [ConeClass; 3] = [ConeClass::YAxis, ConeClass::Interior, ConeClass::XAxis];

    pub fn name(self) -> &'static str {
        match self {
            ConeClass::YAxis => "y-axis",
            ConeClass::Interior => "interior",
            ConeClass::XAxis => "x-axis",
        }
    }

    /// Panel cone for the class, ratios separated by factors of 4.
    pub fn cone(self) -> WfCone {
        match self {
            ConeClass::YAxis => WfCone { id: "y-axis".into(), lo: 0.0, hi: 0.125 },
            ConeClass::Interior => WfCone { id: "interior".into(), lo: 0.5, hi: 2.0 },
            ConeClass::XAxis => WfCone { id: "x-axis".into(), lo: 8.0, hi: f64::INFINITY },
        }
    }
}

pub fn class_panel() -> Vec<WfCone> {
    ConeClass::ALL.iter().map(|c| c.cone()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Smooth,
    NotSmooth,
    /// The cone holds no lattice point.
    VacuouslySmooth,
    /// Every coefficient in the cone is below the floor, or too few shells remain.
    SmoothWithinTruncation,
}

impl Verdict {
    pub fn is_smooth(self) -> bool {
        self != Verdict::NotSmooth
    }

    pub fn name(self) -> &'static str {
        match self {
            Verdict::Smooth => "smooth",
            Verdict::NotSmooth => "not-smooth",
            Verdict::VacuouslySmooth => "vacuously-smooth",
            Verdict::SmoothWithinTruncation => "smooth-within-truncation",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ConeDecay {
    pub lattice_points: usize,
    pub nonzero: usize,
    pub shells: usize,
    pub slope: Option<f64>,
    pub residual: Option<f64>,
    /// −slope·(d+1): the decay order the envelope supports.
    pub order: Option<f64>,
    pub threshold: f64,
    pub verdict: Verdict,
}

/// Decay of the upper envelope of |c| inside a cone: the lattice points are
/// grouped into shells of width ln 2 in ln(1+λ1+λ2), the largest |c| at or
/// beyond each shell is kept, and log|c| is fitted against log(1+λ).
/// The envelope is used because smoothness bounds every coefficient in the
/// cone; a plain regression would let fast-decaying points hide slow ones.
/// Smooth when slope ≤ −VERDICT_MARGIN·n_max/(d+1).
pub fn cone_decay_exponent(c: &CoeffField, cone: &WfCone, n_max: usize, d: f64) -> Result<ConeDecay> {
    let threshold = -VERDICT_MARGIN * n_max as f64 / (d + 1.0);
    let floor = COEFF_FLOOR * c.values.amax();
    let mut points = 0;
    let mut shells: Vec<Option<(f64, f64)>> = Vec::new();
    let mut nonzero = 0;
    for (i, &a) in c.l1.iter().enumerate() {
        for (j, &b) in c.l2.iter().enumerate() {
            if !cone.contains(a, b) {
                continue;
            }
            points += 1;
            let v = c.values[(i, j)].abs();
            if !(v > floor) {
                continue;
            }
            nonzero += 1;
            let x = (1.0 + a + b).ln();
            let k = (x / std::f64::consts::LN_2) as usize;
            if shells.len() <= k {
                shells.resize(k + 1, None);
            }
            let y = v.ln();
            if shells[k].is_none_or(|(_, best)| y > best) {
                shells[k] = Some((x, y));
            }
        }
    }
    let mut out = ConeDecay { lattice_points: points, nonzero, shells: 0, slope: None, residual: None, order: None, threshold, verdict: Verdict::VacuouslySmooth };
    if points == 0 {
        return Ok(out);
    }
    if points < MIN_CONE_POINTS {
        return invalid(format!("cone '{}' holds {points} lattice points; at least {MIN_CONE_POINTS} are needed", cone.id));
    }
    // Running maximum from the top shell down: the least non-increasing
    // majorant. Shells inside spectral gaps can hold only symmetry-zero
    // coefficients, and without this a round-off value there bends the fit.
    let mut env: Vec<(f64, f64)> = shells.into_iter().flatten().collect();
    for k in (0..env.len().saturating_sub(1)).rev() {
        env[k].1 = env[k].1.max(env[k + 1].1);
    }
    out.shells = env.len();
    if env.len() < MIN_SHELLS {
        out.verdict = Verdict::SmoothWithinTruncation;
        return Ok(out);
    }
    let xs: Vec<f64> = env.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = env.iter().map(|p| p.1).collect();
    let f = line_fit(&xs, &ys).ok_or_else(|| crate::error::Error::Fit("degenerate envelope".into()))?;
    out.slope = Some(f.slope);
    out.residual = Some(f.rms);
    out.order = Some(-f.slope * (d + 1.0));
    out.verdict = if f.slope <= threshold { Verdict::Smooth } else { Verdict::NotSmooth };
    Ok(out)
}

/// A product of cell unions; masks are over the vertices of each factor.
#[derive(Clone, Debug, Serialize)]
pub struct Region {
    pub id: String,
    /// Cell indices (at `level`) of each factor.
    pub cells: (Vec<usize>, Vec<usize>),
    pub level: usize,
    #[serde(skip)]
    pub mask1: Vec<bool>,
    #[serde(skip)]
    pub mask2: Vec<bool>,
}

fn cell_mask(g: &FractalGraph, level: usize, cells: &[usize]) -> Result<Vec<bool>> {
    let lc = g.cells.get(level).ok_or_else(|| crate::error::Error::InvalidInput(format!("graph has no level-{level} cells")))?;
    let mut m = vec![false; g.n()];
    for &c in cells {
        let cell = lc.get(c).ok_or_else(|| crate::error::Error::InvalidInput(format!("no cell {c} at level {level}")))?;
        for &v in &cell.vertices {
            m[v] = true;
        }
    }
    Ok(m)
}

impl Region {
    pub fn new(g1: &FractalGraph, g2: &FractalGraph, level: usize, c1: Vec<usize>, c2: Vec<usize>) -> Result<Region> {
        let mask1 = cell_mask(g1, level, &c1)?;
        let mask2 = cell_mask(g2, level, &c2)?;
        let words = |g: &FractalGraph, cs: &[usize]| cs.iter().map(|&c| g.cells[level][c].word.clone()).collect::<Vec<_>>().join("+");
        let id = format!("{}x{}", words(g1, &c1), words(g2, &c2));
        Ok(Region { id, cells: (c1, c2), level, mask1, mask2 })
    }

    /// Coefficients (all modes) of the least-norm extension of u from the region.
    pub fn extend(&self, fp: &ProductBasis, u: &Field2, sigma: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let e1 = extension_operator(&fp.b1, &self.mask1, sigma);
        let e2 = extension_operator(&fp.b2, &self.mask2, sigma);
        let r1: Vec<usize> = (0..self.mask1.len()).filter(|&i| self.mask1[i]).collect();
        let r2: Vec<usize> = (0..self.mask2.len()).filter(|&j| self.mask2[j]).collect();
        let restrict = |m: &DMatrix<f64>| DMatrix::from_fn(r1.len(), r2.len(), |i, j| m[(r1[i], r2[j])]);
        let t2 = e2.transpose();
        (&e1 * restrict(&u.re) * &t2, &e1 * restrict(&u.im) * &t2)
    }
}

/// Relative cutoff for the pseudo-inverse in `extension_operator`.
pub const EXTENSION_RCOND: f64 = 1e-12;

/// Maps data on the masked vertices to the coefficients (all modes) of the
/// extension minimizing Σ (1+λ_k)^{2σ} c_k². With B = A W^{-1/2}, A the
/// eigenvectors at the masked rows, this is W^{-1/2} B⁺.
pub fn extension_operator(b: &EigenBasis, mask: &[bool], sigma: f64) -> DMatrix<f64> {
    let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let n = b.len();
    let wi: Vec<f64> = b.eigenvalues.iter().map(|l| (1.0 + l.max(0.0)).powf(-sigma)).collect();
    let bm = DMatrix::from_fn(rows.len(), n, |i, k| b.vectors[(rows[i], k)] * wi[k]);
    let svd = bm.svd(true, true);
    let cut = EXTENSION_RCOND * svd.singular_values.max();
    let pinv = svd.pseudo_inverse(cut).expect("both factors computed");
    let mut e = pinv;
    for k in 0..n {
        e.row_mut(k).scale_mut(wi[k]);
    }
    e
}

/// Every product of single cells at `level`.
pub fn region_panel(g1: &FractalGraph, g2: &FractalGraph, level: usize) -> Result<Vec<Region>> {
    let n1 = g1.cells.get(level).map_or(0, |c| c.len());
    let n2 = g2.cells.get(level).map_or(0, |c| c.len());
    if n1 == 0 || n2 == 0 {
        return invalid(format!("no level-{level} cells"));
    }
    let mut out = Vec::with_capacity(n1 * n2);
    for a in 0..n1 {
        for b in 0..n2 {
            out.push(Region::new(g1, g2, level, vec![a], vec![b])?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct WfEntry {
    pub region: String,
    pub region_index: usize,
    pub cone: String,
    pub cone_index: usize,
    pub decay: ConeDecay,
    /// "extension" or "self".
    pub witness: &'static str,
    pub flagged: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct WfGrid {
    pub n_max: usize,
    pub d: f64,
    pub entries: Vec<WfEntry>,
}

impl WfGrid {
    /// (region index, cone index) pairs flagged as wavefront.
    pub fn flagged(&self) -> Vec<(usize, usize)> {
        self.entries.iter().filter(|e| e.flagged).map(|e| (e.region_index, e.cone_index)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("region,cone,witness,lattice_points,shells,slope,order,verdict\n");
        for e in &self.entries {
            let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
            s += &format!(
                "{},{},{},{},{},{},{},{}\n",
                e.region,
                e.cone,
                e.witness,
                e.decay.lattice_points,
                e.decay.shells,
                opt(e.decay.slope),
                opt(e.decay.order),
                e.decay.verdict.name()
            );
        }
        s
    }
}

/// Smoothness of the extension witness: one power of λ (an operator of order
/// d+1) above n_max+1 orders, so that elliptic second-order symbols do not
/// push smooth cells over the threshold.
pub fn extension_sigma(n_max: usize, d: f64) -> f64 {
    1.0 + (n_max as f64 + 1.0) / (d + 1.0)
}

/// Extends u from each region, expands, and runs the cone verdict on every
/// (region, cone) cell of the grid.
pub fn wf_estimate(u: &Field2, fp: &ProductBasis, regions: &[Region], cones: &[WfCone], n_max: usize) -> Result<WfGrid> {
    let d = 0.5 * (fp.b1.d + fp.b2.d);
    wf_estimate_with_sigma(u, fp, regions, cones, n_max, extension_sigma(n_max, d))
}

pub fn wf_estimate_with_sigma(u: &Field2, fp: &ProductBasis, regions: &[Region], cones: &[WfCone], n_max: usize, sigma: f64) -> Result<WfGrid> {
    if u.re.shape() != fp.shape() {
        return invalid("u has the wrong shape");
    }
    if fp.l1.len() != fp.b1.len() || fp.l2.len() != fp.b2.len() {
        return invalid("wavefront estimates need a full product basis (zero modes included)");
    }
    let d = 0.5 * (fp.b1.d + fp.b2.d);
    let fields: Vec<CoeffField> = regions
        .par_iter()
        .map(|r| {
            let (re, im) = r.extend(fp, u, sigma);
            CoeffField::from_coefficients(fp, &re, &im)
        })
        .collect();
    let own = CoeffField::of(fp, u);
    let jobs: Vec<(usize, usize)> = (0..regions.len()).flat_map(|r| (0..cones.len()).map(move |c| (r, c))).collect();
    let decays: Vec<Result<(ConeDecay, ConeDecay)>> = jobs
        .par_iter()
        .map(|&(r, c)| Ok((cone_decay_exponent(&fields[r], &cones[c], n_max, d)?, cone_decay_exponent(&own, &cones[c], n_max, d)?)))
        .collect();
    let mut entries = Vec::with_capacity(jobs.len());
    for (&(r, c), decay) in jobs.iter().zip(decays) {
        let (ext, slf) = decay?;
        let (decay, witness) = if !ext.verdict.is_smooth() && slf.verdict.is_smooth() { (slf, "self") } else { (ext, "extension") };
        entries.push(WfEntry {
            region: regions[r].id.clone(),
            region_index: r,
            cone: cones[c].id.clone(),
            cone_index: c,
            flagged: !decay.verdict.is_smooth(),
            witness,
            decay,
        });
    }
    Ok(WfGrid { n_max, d, entries })
}

/// Tensor-product classification for u1 ⊗ u2 on single-cell regions: with
/// S_i the cells meeting singsupp(u_i), a region a×b carries every class when
/// a ∈ S1 and b ∈ S2, the y-axis class when only b ∈ S2, the x-axis class
/// when only a ∈ S1, and nothing otherwise.
pub fn tensor_wf_reference(sing1: &[usize], sing2: &[usize], n_cells1: usize, n_cells2: usize) -> Vec<((usize, usize), ConeClass)> {
    let mut out = Vec::new();
    for a in 0..n_cells1 {
        for b in 0..n_cells2 {
            let (s1, s2) = (sing1.contains(&a), sing2.contains(&b));
            for c in ConeClass::ALL {
                let hit = match c {
                    ConeClass::Interior => s1 && s2,
                    ConeClass::YAxis => s2,
                    ConeClass::XAxis => s1,
                };
                if hit {
                    out.push(((a, b), c));
                }
            }
        }
    }
    out
}

/// Flagged grid entries as ((cell1, cell2), class), for grids built on a
/// `region_panel` and the `class_panel`.
pub fn flagged_classes(grid: &WfGrid, regions: &[Region]) -> Vec<((usize, usize), ConeClass)> {
    let mut out: Vec<((usize, usize), ConeClass)> = grid
        .entries
        .iter()
        .filter(|e| e.flagged)
        .map(|e| ((regions[e.region_index].cells.0[0], regions[e.region_index].cells.1[0]), ConeClass::ALL[e.cone_index]))
        .collect();
    out.sort();
    out
}

/// Eigenfunctions vanishing outside shrinking cell neighbourhoods of x.
#[derive(Clone, Debug)]
pub struct LocalizedMode {
    pub lambda: f64,
    /// Level of the cells whose union around x supports the mode.
    pub level: usize,
    pub values: Vec<f64>,
}

/// For each positive eigenspace, the orthonormal eigenfunctions supported in
/// N_k(x) (the union of level-k cells containing x, minus the points it
/// shares with other level-k cells), using the finest k ≥ `min_level` that
/// admits any. Found as null vectors of the eigenspace basis restricted to
/// the vertices outside the support.
pub fn localized_modes(b: &EigenBasis, x: usize, min_level: usize) -> Result<Vec<LocalizedMode>> {
    let g = &b.graph;
    if x >= g.n() {
        return invalid("vertex out of range");
    }
    let mut supports = Vec::new();
    for k in (min_level..g.cells.len()).rev() {
        let cells = &g.cells[k];
        let mut inside = vec![false; g.n()];
        let mut outside = vec![false; g.n()];
        for c in cells {
            let target = if c.vertices.binary_search(&x).is_ok() { &mut inside } else { &mut outside };
            for &v in &c.vertices {
                target[v] = true;
            }
        }
        let allowed: Vec<bool> = (0..g.n()).map(|v| inside[v] && !outside[v]).collect();
        supports.push((k, allowed));
    }
    let mut out = Vec::new();
    for (lambda, range) in b.eigenspaces() {
        if lambda <= 0.0 {
            continue;
        }
        let m = range.len();
        let e = b.vectors.columns(range.start, m);
        for (k, allowed) in &supports {
            let rows: Vec<usize> = (0..g.n()).filter(|&v| !allowed[v]).collect();
            let mut r = DMatrix::zeros(rows.len().max(m), m);
            for (i, &v) in rows.iter().enumerate() {
                r.row_mut(i).copy_from(&e.row(v));
            }
            let svd = r.svd(false, true);
            let vt = svd.v_t.expect("requested");
            let scale = e.amax().max(1.0);
            let null: Vec<usize> = (0..m).filter(|&i| svd.singular_values[i] < 1e-9 * scale).collect();
            if null.is_empty() {
                continue;
            }
            for i in null {
                let coef = vt.row(i).transpose();
                let mut v: Vec<f64> = (e * coef).iter().copied().collect();
                for (w, a) in v.iter_mut().zip(allowed) {
                    if !a {
                        *w = 0.0;
                    }
                }
                let n = b.norm(&v);
                // fix the sign so the largest entry is positive
                let big = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
                let s = if big < 0.0 { -1.0 / n } else { 1.0 / n };
                out.push(LocalizedMode { lambda, level: *k, values: v.iter().map(|w| w * s).collect() });
            }
            break;
        }
    }
    Ok(out)
}

/// u = Σ ψ_j ⊗ ψ_k over pairs of localized modes with (λ_j, λ_k) in the cone.
pub fn localized_series(m1: &[LocalizedMode], m2: &[LocalizedMode], cone: &WfCone) -> (DMatrix<f64>, usize) {
    let n1 = m1.first().map_or(0, |m| m.values.len());
    let n2 = m2.first().map_or(0, |m| m.values.len());
    let mut u = DMatrix::zeros(n1, n2);
    let mut terms = 0;
    for a in m1 {
        for b in m2 {
            if cone.contains(a.lambda, b.lambda) {
                terms += 1;
                for i in 0..n1 {
                    if a.values[i] == 0.0 {
                        continue;
                    }
                    for j in 0..n2 {
                        u[(i, j)] += a.values[i] * b.values[j];
                    }
                }
            }
        }
    }
    (u, terms)
}

/// A vertex of level-1 cell `cell` lying in exactly two level-2 cells and in
/// no other level-1 cell: an interior junction point of that cell.
pub fn junction_vertex(g: &FractalGraph, cell: usize) -> Result<usize> {
    if g.cells.len() < 3 || cell >= g.cells[1].len() {
        return invalid("junction points need a level-2 graph and an existing level-1 cell");
    }
    let count = |k: usize, v: usize| g.cells[k].iter().filter(|c| c.vertices.binary_search(&v).is_ok()).count();
    g.cells[1][cell]
        .vertices
        .iter()
        .copied()
        .find(|&v| count(2, v) == 2 && count(1, v) == 1)
        .ok_or_else(|| crate::error::Error::InvalidInput(format!("cell {cell} has no interior junction")))
}

#[derive(Clone, Debug, Serialize)]
pub struct PanelCase {
    pub name: String,
    pub expected: Vec<((usize, usize), ConeClass)>,
    pub flagged: Vec<((usize, usize), ConeClass)>,
    pub passes: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct PanelCheck {
    pub case: String,
    pub symbol: String,
    /// "subset" or "equal".
    pub relation: &'static str,
    pub flagged: Vec<((usize, usize), ConeClass)>,
    pub passes: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct PanelReport {
    pub level: usize,
    pub sigma: f64,
    pub threshold: f64,
    pub cases: Vec<PanelCase>,
    pub localized_terms: usize,
    pub checks: Vec<PanelCheck>,
    pub passes: bool,
}

/// The four panel inputs on X × X with their reference classifications, and
/// the number of localized-series terms.
pub fn panel_fields(b: &EigenBasis) -> Result<(Vec<(&'static str, Field2, Vec<((usize, usize), ConeClass)>)>, usize)> {
    let g = &b.graph;
    let n = b.n_vertices();
    if b.len() < 4 {
        return invalid("the panel needs at least four modes");
    }
    let smooth = |w: f64| -> Vec<f64> { (0..n).map(|i| 1.0 + w * b.vectors[(i, 1)] + 0.2 * b.vectors[(i, 3)]).collect() };
    let spike = |f: &[f64], x: usize| -> Vec<f64> {
        let mut f = f.to_vec();
        f[x] += 1.0 / b.mass()[x];
        f
    };
    let tensor = |a: &[f64], c: &[f64]| Field2::real(DMatrix::from_fn(n, n, |i, j| a[i] * c[j]));
    let (s1, s2) = (smooth(0.3), smooth(-0.25));
    let (x1, x2) = (junction_vertex(g, 1)?, junction_vertex(g, 2)?);
    let (t1, t2) = (spike(&s1, x1), spike(&s2, x2));
    let modes = localized_modes(b, junction_vertex(g, 0)?, 1)?;
    let (loc, localized_terms) = localized_series(&modes, &modes, &ConeClass::Interior.cone());
    let inputs = vec![
        ("smooth", tensor(&s1, &s2), tensor_wf_reference(&[], &[], 3, 3)),
        ("singular-x", tensor(&t1, &s2), tensor_wf_reference(&[1], &[], 3, 3)),
        ("singular-both", tensor(&t1, &t2), tensor_wf_reference(&[1], &[2], 3, 3)),
        ("localized", Field2::real(loc), vec![((0, 0), ConeClass::Interior)]),
    ];
    Ok((inputs, localized_terms))
}

/// The example panel on X × X (X a Neumann gasket basis, level ≥ 2), regions
/// the 3 × 3 products of level-1 cells:
/// smooth ⊗ smooth, (smooth + δ at a junction of cell 1) ⊗ smooth, and the
/// same with a δ at a junction of cell 2 in the second factor, each against
/// the tensor classification; the localized-mode series at a junction of
/// cell 0 over the interior cone against {(0,0)} × interior; monotonicity
/// under both Riesz symbols and invariance under 1+λ1+λ2 for every case.
pub fn example_panel(b: &EigenBasis, n_max: usize) -> Result<PanelReport> {
    let g = &b.graph;
    let fp = full_product(b, b)?;
    let regions = region_panel(g, g, 1)?;
    let cones = class_panel();
    let sigma = extension_sigma(n_max, b.d);
    let threshold = -VERDICT_MARGIN * n_max as f64 / (b.d + 1.0);
    let (inputs, localized_terms) = panel_fields(b)?;
    let symbols: [(Symbol2, &'static str); 3] =
        [(riesz_i(1), "subset"), (riesz_i(2), "subset"), (Symbol2::real("1+l1+l2", b.d + 1.0, |a, c| 1.0 + a + c), "equal")];
    let mut cases = Vec::new();
    let mut checks = Vec::new();
    for (name, u, expected) in inputs {
        let flagged = flagged_classes(&wf_estimate_with_sigma(&u, &fp, &regions, &cones, n_max, sigma)?, &regions);
        for (p, relation) in &symbols {
            let pu = apply_full(p, &fp, &u)?;
            let fl = flagged_classes(&wf_estimate_with_sigma(&pu, &fp, &regions, &cones, n_max, sigma)?, &regions);
            let passes = if *relation == "equal" { fl == flagged } else { fl.iter().all(|e| flagged.contains(e)) };
            checks.push(PanelCheck { case: name.into(), symbol: p.name.clone(), relation, flagged: fl, passes });
        }
        cases.push(PanelCase { name: name.into(), passes: flagged == expected, expected, flagged });
    }
    let passes = cases.iter().all(|c| c.passes) && checks.iter().all(|c| c.passes);
    Ok(PanelReport { level: g.level, sigma, threshold, cases, localized_terms, checks, passes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lattice() -> Vec<f64> {
        (0..40).map(|k| if k == 0 { 0.0 } else { 3.0 * 1.2f64.powi(k) }).collect()
    }

    #[test]
    fn synthetic_power_law() {
        let d = 2.0;
        let f = CoeffField::from_fn(lattice(), lattice(), |a, b| (1.0 + a + b).powf(-10.0 / (d + 1.0)));
        let r = cone_decay_exponent(&f, &ConeClass::Interior.cone(), 2, d).unwrap();
        let s = r.slope.unwrap();
        assert!((s + 10.0 / (d + 1.0)).abs() < 0.05 * 10.0 / (d + 1.0), "{s}");
        assert_eq!(r.verdict, Verdict::Smooth);
        let one = CoeffField::from_fn(lattice(), lattice(), |_, _| 1.0);
        let r = cone_decay_exponent(&one, &ConeClass::Interior.cone(), 2, d).unwrap();
        assert!(r.slope.unwrap().abs() < 1e-12);
        assert_eq!(r.verdict, Verdict::NotSmooth);
    }

    #[test]
    fn cone_membership_and_special_verdicts() {
        let x = ConeClass::XAxis.cone();
        let y = ConeClass::YAxis.cone();
        assert!(x.contains(5.0, 0.0) && !x.contains(0.0, 5.0) && !x.contains(0.0, 0.0));
        assert!(y.contains(0.0, 5.0) && !y.contains(5.0, 0.0));
        let gap = WfCone::new("gap", 100.0, 101.0).unwrap();
        let f = CoeffField::from_fn(vec![1.0, 2.0], vec![1.0, 2.0], |_, _| 1.0);
        assert_eq!(cone_decay_exponent(&f, &gap, 2, 2.0).unwrap().verdict, Verdict::VacuouslySmooth);
        let zero = CoeffField::from_fn(lattice(), lattice(), |a, b| if a + b < 20.0 { 1.0 } else { 0.0 });
        assert_eq!(cone_decay_exponent(&zero, &ConeClass::Interior.cone(), 2, 2.0).unwrap().verdict, Verdict::SmoothWithinTruncation);
        assert!(cone_decay_exponent(&f, &WfCone::new("few", 0.5, 2.0).unwrap(), 2, 2.0).is_err());
    }

    #[test]
    fn reference_cases() {
        assert!(tensor_wf_reference(&[], &[], 3, 3).is_empty());
        assert_eq!(tensor_wf_reference(&[0, 1, 2], &[0, 1, 2], 3, 3).len(), 27);
        let one = tensor_wf_reference(&[1], &[], 3, 3);
        assert_eq!(one, vec![((1, 0), ConeClass::XAxis), ((1, 1), ConeClass::XAxis), ((1, 2), ConeClass::XAxis)]);
    }

    fn neumann(level: usize) -> EigenBasis {
        let g = crate::graph::build(crate::graph::FractalKind::Gasket, level).unwrap();
        crate::spectral::eigensolve(&g, crate::spectral::BoundaryCondition::Neumann).unwrap()
    }

    #[test]
    fn example_panel_level_4() {
        let b = neumann(4);
        let r = example_panel(&b, DEFAULT_N_MAX).unwrap();
        for c in &r.cases {
            assert!(c.passes, "{}: {:?} vs {:?}", c.name, c.flagged, c.expected);
        }
        for c in &r.checks {
            assert!(c.passes, "{} under {}: {:?}", c.case, c.symbol, c.flagged);
        }
        assert!(r.passes && r.localized_terms > 20);
    }

    #[test]
    fn csv_and_scaling() {
        let b = neumann(3);
        let g = &b.graph;
        let fp = full_product(&b, &b).unwrap();
        let regions = region_panel(g, g, 1).unwrap();
        let n = b.n_vertices();
        let x = junction_vertex(g, 1).unwrap();
        let u = Field2::real(DMatrix::from_fn(n, n, |i, j| if i == x { 1.0 } else { 0.0 } + b.vectors[(j, 2)]));
        let a = wf_estimate(&u, &fp, &regions, &class_panel(), 2).unwrap();
        let scaled = Field2 { re: &u.re * -250.0, im: u.im.clone() };
        let c = wf_estimate(&scaled, &fp, &regions, &class_panel(), 2).unwrap();
        assert_eq!(a.flagged(), c.flagged());
        for (e, f) in a.entries.iter().zip(&c.entries) {
            if let (Some(s), Some(t)) = (e.decay.slope, f.decay.slope) {
                assert!((s - t).abs() < 1e-6, "{} {} {s} {t}", e.region, e.cone);
            }
        }
        let csv = a.to_csv();
        assert!(csv.starts_with("region,cone,witness,"));
        assert_eq!(csv.lines().count(), 1 + 27);
    }
}

//! Heat kernels from the eigenbasis, on-diagonal and sub-Gaussian fits, and
//! complex-time bounds.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::fit::{geomspace, line_fit};
use crate::spectral::EigenBasis;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct HeatParameters {
    pub d: f64,
    pub gamma: f64,
    pub beta: f64,
    pub c1: f64,
    pub c2: f64,
}

impl HeatParameters {
    pub fn new(d: f64, gamma: f64, c1: f64, c2: f64) -> Result<Self> {
        let p = HeatParameters { d, gamma, beta: d / (d + 1.0), c1, c2 };
        if [d, gamma, c1, c2].iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return invalid("heat parameters must be positive and finite");
        }
        Ok(p)
    }

    /// c1 t^{-β} exp(-c2 (R^{d+1}/t)^γ)
    pub fn bound(&self, t: f64, r: f64) -> f64 {
        self.c1 * t.powf(-self.beta) * (-self.c2 * (r.powf(self.d + 1.0) / t).powf(self.gamma)).exp()
    }
}

#[derive(Clone, Debug)]
pub struct HeatKernelSlice {
    pub z: Complex64,
    pub values: DMatrix<Complex64>,
}

impl HeatKernelSlice {
    pub fn real_part(&self) -> DMatrix<f64> {
        self.values.map(|c| c.re)
    }
}

/// Active eigenvectors as an n×k matrix.
pub(crate) fn active_block(basis: &EigenBasis) -> DMatrix<f64> {
    let r = basis.active();
    basis.vectors.columns(r.start, r.len()).into_owned()
}

/// K = Σ_n w_n φ_n φ_n^T over active modes.
pub(crate) fn weighted_outer(basis: &EigenBasis, weights: &[f64]) -> DMatrix<f64> {
    let phi = active_block(basis);
    let mut scaled = phi.clone();
    for (c, w) in weights.iter().enumerate() {
        scaled.column_mut(c).scale_mut(*w);
    }
    let mut k = scaled * phi.transpose();
    // mirror the upper triangle so the kernel is exactly symmetric
    for i in 0..k.nrows() {
        for j in (i + 1)..k.ncols() {
            k[(j, i)] = k[(i, j)];
        }
    }
    k
}

pub fn heat_kernel_real(basis: &EigenBasis, t: f64) -> Result<DMatrix<f64>> {
    if !(t > 0.0) {
        return invalid("heat kernel needs t > 0");
    }
    let w: Vec<f64> = basis.active_eigenvalues().iter().map(|l| (-l * t).exp()).collect();
    Ok(weighted_outer(basis, &w))
}

/// h_z(x,y) = Σ_n e^{-λ_n z} φ_n(x) φ_n(y) over the active modes, Re z > 0.
pub fn heat_kernel(basis: &EigenBasis, z: Complex64) -> Result<HeatKernelSlice> {
    if !(z.re > 0.0) {
        return invalid("heat kernel needs Re z > 0");
    }
    let w: Vec<Complex64> = basis.active_eigenvalues().iter().map(|l| (-z * l).exp()).collect();
    let re: Vec<f64> = w.iter().map(|c| c.re).collect();
    let im: Vec<f64> = w.iter().map(|c| c.im).collect();
    let a = weighted_outer(basis, &re);
    let b = weighted_outer(basis, &im);
    let values = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| Complex64::new(a[(i, j)], b[(i, j)]));
    Ok(HeatKernelSlice { z, values })
}

pub fn heat_value(basis: &EigenBasis, z: Complex64, x: usize, y: usize) -> Complex64 {
    let mut s = Complex64::new(0.0, 0.0);
    for k in basis.active() {
        s += (-z * basis.eigenvalues[k]).exp() * (basis.vectors[(x, k)] * basis.vectors[(y, k)]);
    }
    s
}

/// Σ_n e^{-λ_n t} over the active modes.
pub fn heat_trace(basis: &EigenBasis, t: f64) -> f64 {
    basis.active_eigenvalues().iter().map(|l| (-l * t).exp()).sum()
}

/// Composition (A ∘ B)(x,y) = Σ_w A(x,w) B(w,y) μ(w).
pub fn compose(a: &DMatrix<f64>, b: &DMatrix<f64>, mass: &[f64]) -> DMatrix<f64> {
    let mut bm = b.clone();
    for (r, m) in mass.iter().enumerate() {
        bm.row_mut(r).scale_mut(*m);
    }
    a * bm
}

/// Scaling window [10/λ_max, 0.1/λ_min]: the resolved range shrunk by one decade each side.
pub fn default_window(basis: &EigenBasis) -> Result<(f64, f64)> {
    let v = basis.active_eigenvalues();
    let lo = v.iter().copied().find(|x| *x > 0.0).ok_or_else(|| Error::Fit("no positive eigenvalues".into()))?;
    let hi = *v.last().unwrap();
    Ok((10.0 / hi, 0.1 / lo))
}

pub fn default_grid(basis: &EigenBasis) -> Result<Vec<f64>> {
    let (a, b) = default_window(basis)?;
    if a >= b {
        return Err(Error::Fit(format!("scaling window empty: [{a:.3e}, {b:.3e}]")));
    }
    Ok(geomspace(a, b, 40))
}

#[derive(Clone, Debug, Serialize)]
pub struct OnDiagonalFit {
    pub beta: f64,
    /// Standard deviation of per-vertex slopes.
    pub spread: f64,
    pub per_vertex_min: f64,
    pub per_vertex_max: f64,
    pub window: (f64, f64),
    pub sample_count: usize,
    pub residual_max: f64,
}

fn check_grid(t_grid: &[f64]) -> Result<()> {
    if t_grid.len() < 5 || t_grid.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::Fit("window too narrow: need at least 5 positive times".into()));
    }
    let (a, b) = (t_grid[0], *t_grid.last().unwrap());
    if b / a < 10f64.powf(0.5) {
        return Err(Error::Fit(format!("window too narrow: [{a:.3e}, {b:.3e}]")));
    }
    Ok(())
}

/// −slope of log Σ e^{−λt} against log t.
pub fn trace_slope(eigenvalues: &[f64], t_grid: &[f64]) -> Result<f64> {
    let xs: Vec<f64> = t_grid.iter().map(|t| t.ln()).collect();
    let ys: Vec<f64> = t_grid.iter().map(|t| eigenvalues.iter().map(|l| (-l * t).exp()).sum::<f64>().ln()).collect();
    Ok(-line_fit(&xs, &ys).ok_or_else(|| Error::Fit("degenerate fit".into()))?.slope)
}

/// β from the measure-averaged on-diagonal kernel Σ_x μ(x) h_t(x,x) (the
/// trace) against log t. Per-vertex slopes are reported as the spread.
pub fn fit_on_diagonal(basis: &EigenBasis, t_grid: &[f64]) -> Result<OnDiagonalFit> {
    check_grid(t_grid)?;
    let n = basis.n_vertices();
    let total: f64 = basis.mass().iter().sum();
    let lt: Vec<f64> = t_grid.iter().map(|t| t.ln()).collect();
    let mut avg = Vec::with_capacity(t_grid.len());
    let mut diag = vec![Vec::with_capacity(t_grid.len()); n];
    let lams = basis.active_eigenvalues();
    let r = basis.active();
    for &t in t_grid {
        let w: Vec<f64> = lams.iter().map(|l| (-l * t).exp()).collect();
        let mut mean = 0.0;
        for (x, dx) in diag.iter_mut().enumerate() {
            let h: f64 = r.clone().zip(&w).map(|(k, wk)| wk * basis.vectors[(x, k)].powi(2)).sum();
            mean += basis.mass()[x] * h;
            dx.push(h);
        }
        avg.push((mean / total).ln());
    }
    let f = line_fit(&lt, &avg).ok_or_else(|| Error::Fit("degenerate on-diagonal fit".into()))?;
    let mut slopes = Vec::new();
    for dx in &diag {
        if dx.iter().all(|h| *h > 0.0) {
            let ys: Vec<f64> = dx.iter().map(|h| h.ln()).collect();
            if let Some(s) = line_fit(&lt, &ys) {
                slopes.push(-s.slope);
            }
        }
    }
    let m = slopes.iter().sum::<f64>() / slopes.len().max(1) as f64;
    let var = slopes.iter().map(|s| (s - m).powi(2)).sum::<f64>() / slopes.len().max(1) as f64;
    Ok(OnDiagonalFit {
        beta: -f.slope,
        spread: var.sqrt(),
        per_vertex_min: slopes.iter().copied().fold(f64::INFINITY, f64::min),
        per_vertex_max: slopes.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        window: (t_grid[0], *t_grid.last().unwrap()),
        sample_count: slopes.len(),
        residual_max: f.residual_max,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SubGaussianFit {
    pub parameters: HeatParameters,
    /// max over samples of log h − log bound; ≤ 0 means the bound holds.
    pub residual_max: f64,
    /// RMS of the least-squares fit before the upward shift.
    pub fit_rms: f64,
    pub window: (f64, f64),
    pub sample_count: usize,
    /// (t, x, y, h) samples excluded because h was not resolved as positive.
    pub excluded: Vec<(f64, usize, usize, f64)>,
}

/// Fit log h_t(x,y) + β log t = log c1 − c2 (R^{d+1}/t)^γ with γ scanned on a
/// grid and (log c1, c2) by least squares; c1 is then raised so that the
/// bound dominates every sample.
pub fn fit_subgaussian(basis: &EigenBasis, t_grid: &[f64], pairs: &[(usize, usize)], d: f64) -> Result<SubGaussianFit> {
    check_grid(t_grid)?;
    if !(d > 0.0) {
        return invalid("dimension must be positive");
    }
    let beta = d / (d + 1.0);
    let mut samples = Vec::new();
    let mut excluded = Vec::new();
    for &t in t_grid {
        let k = heat_kernel_real(basis, t)?;
        let scale = k.diagonal().max();
        for &(x, y) in pairs {
            let h = k[(x, y)];
            if h > 1e-12 * scale {
                let r = basis.metric.get(x, y);
                samples.push((t, r, h.ln() + beta * t.ln()));
            } else {
                excluded.push((t, x, y, h));
            }
        }
    }
    if samples.len() < 3 {
        return Err(Error::Fit("too few positive kernel samples".into()));
    }
    let ys: Vec<f64> = samples.iter().map(|s| s.2).collect();
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for step in 0..=300 {
        let gamma = 0.2 + 0.01 * step as f64;
        let xs: Vec<f64> = samples.iter().map(|&(t, r, _)| (r.powf(d + 1.0) / t).powf(gamma)).collect();
        if let Some(f) = line_fit(&xs, &ys) {
            if f.slope < 0.0 && best.is_none_or(|b| f.rms < b.3) {
                best = Some((gamma, f.intercept, -f.slope, f.rms));
            }
        }
    }
    let (gamma, a, c2, rms) = best.ok_or_else(|| Error::Fit("no decaying sub-Gaussian fit on the γ grid".into()))?;
    let shift = samples
        .iter()
        .map(|&(t, r, y)| y - (a - c2 * (r.powf(d + 1.0) / t).powf(gamma)))
        .fold(f64::NEG_INFINITY, f64::max);
    let params = HeatParameters::new(d, gamma, (a + shift).exp(), c2)?;
    let residual_max = samples
        .iter()
        .map(|&(t, r, y)| y - params.c1.ln() + c2 * (r.powf(d + 1.0) / t).powf(gamma))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(SubGaussianFit {
        parameters: params,
        residual_max,
        fit_rms: rms,
        window: (t_grid[0], *t_grid.last().unwrap()),
        sample_count: samples.len(),
        excluded,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ComplexSample {
    pub re: f64,
    pub im: f64,
    pub max_abs: f64,
    /// max_x h_{Re z}(x,x) at the same real part.
    pub real_diag_max: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ComplexBoundReport {
    pub beta: f64,
    /// Smallest C with |h_z| ≤ C (Re z)^{-β} on the samples.
    pub c_re: f64,
    /// Smallest C with |h_z| ≤ C 2^β (|z| cos θ)^{-β} on the samples.
    pub c_polar: f64,
    /// Smallest C with max_x h_t(x,x) ≤ C t^{-β} along the real parts.
    pub c_real_axis: f64,
    /// Every sample obeys |h_z| ≤ c_real_axis (Re z)^{-β}.
    pub real_constant_suffices: bool,
    pub samples: Vec<ComplexSample>,
}

pub fn complex_bound_check(basis: &EigenBasis, z_samples: &[Complex64], d: f64) -> Result<ComplexBoundReport> {
    let beta = d / (d + 1.0);
    let mut samples = Vec::new();
    let (mut c_re, mut c_polar, mut c_real): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for &z in z_samples {
        let k = heat_kernel(basis, z)?;
        let max_abs = k.values.iter().map(|c| c.norm()).fold(0.0, f64::max);
        let kr = heat_kernel_real(basis, z.re)?;
        let diag_max = kr.diagonal().max();
        let theta = z.im.atan2(z.re);
        c_re = c_re.max(max_abs * z.re.powf(beta));
        c_polar = c_polar.max(max_abs * (z.norm() * theta.cos()).powf(beta) / 2f64.powf(beta));
        c_real = c_real.max(diag_max * z.re.powf(beta));
        samples.push(ComplexSample { re: z.re, im: z.im, max_abs, real_diag_max: diag_max });
    }
    let real_constant_suffices = samples.iter().all(|s| s.max_abs <= c_real * s.re.powf(-beta) * (1.0 + 1e-9));
    Ok(ComplexBoundReport { beta, c_re, c_polar, c_real_axis: c_real, real_constant_suffices, samples })
}

/// Relative Cauchy–Riemann defect |∂f/∂x + i ∂f/∂y| / |∂f/∂x| of z ↦ h_z(x,y),
/// by central differences with step `h`.
pub fn cauchy_riemann_residual(basis: &EigenBasis, z: Complex64, x: usize, y: usize, h: f64) -> f64 {
    let f = |w: Complex64| heat_value(basis, w, x, y);
    let fx = (f(z + h) - f(z - h)) / (2.0 * h);
    let fy = (f(z + Complex64::new(0.0, h)) - f(z - Complex64::new(0.0, h))) / (2.0 * h);
    let defect = fx + Complex64::new(0.0, 1.0) * fy;
    defect.norm() / fx.norm().max(1e-300)
}

/// CSV rows "t,x,y,R,h" for plotting.
pub fn csv_dump(basis: &EigenBasis, t_grid: &[f64], pairs: &[(usize, usize)]) -> Result<String> {
    let mut out = String::from("t,x,y,R,h\n");
    for &t in t_grid {
        let k = heat_kernel_real(basis, t)?;
        for &(x, y) in pairs {
            out.push_str(&format!("{:e},{},{},{:e},{:e}\n", t, x, y, basis.metric.get(x, y), k[(x, y)]));
        }
    }
    Ok(out)
}

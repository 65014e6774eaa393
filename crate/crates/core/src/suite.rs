//! The acceptance battery: eleven checks at pinned tolerances, each reported
//! with the hashes of the bases it used. Levels are relative to a base level
//! L (default 3); level sweeps run over L..=L+2.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{invalid, Result};
use crate::graph::{build, FractalKind};
use crate::heat::{default_grid, fit_on_diagonal};
use crate::products::{
    apply2, elliptic_check, elliptic_check_spectrum, elliptic_extension, gap_cones, product_basis, product_decay, quasi_inverse_check, widest_cone,
    EllipticGrid,
};
use crate::provenance::json_hash;
use crate::psido::{compose_check, decay_report, derivative_alpha, kernel, level_growth};
use crate::sobolev::{bessel_lift, hs_norm, hs_ratio, lp_norm, op_bound_hs};
use crate::spectral::{decimation_spectrum, eigensolve_cached, multiset_diff, weyl_exponent, BoundaryCondition, EigenBasis};
use crate::symbol::{bessel, heat, imaginary_power, ratio, riesz_i, Symbol, Symbol2};
use crate::varcoef::{
    apply_by_expansion, apply_varcoef, auxiliary_index, expand_symbol, harmonic_ratio_symbol, kernel_varcoef, lq_bound_check, supnorm_exponent_fit,
    VarSymbol,
};
use crate::wavefront::{example_panel, DEFAULT_N_MAX};

pub const DEFAULT_LEVEL: usize = 3;
pub const CHECK_COUNT: usize = 11;

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub level: usize,
    pub seed: u64,
    /// Only changes where bases come from, never their bits, so it is not hashed.
    pub cache_dir: Option<PathBuf>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig { level: DEFAULT_LEVEL, seed: 0, cache_dir: None }
    }
}

impl SuiteConfig {
    pub fn to_json(&self) -> Value {
        json!({ "command": "suite", "level": self.level, "seed": self.seed })
    }

    pub fn hash(&self) -> String {
        json_hash(&self.to_json())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub id: usize,
    pub name: &'static str,
    pub passes: bool,
    pub summary: String,
    pub details: Value,
    pub basis_hashes: Vec<String>,
    #[serde(skip)]
    pub elapsed: Duration,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub config: Value,
    pub config_hash: String,
    pub checks: Vec<Check>,
    pub passes: bool,
}

impl SuiteReport {
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("report serializes");
        v.push(b'\n');
        v
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,name,passes,summary,config_hash\n");
        for c in &self.checks {
            s += &format!("{},{},{},\"{}\",{}\n", c.id, c.name, c.passes, c.summary.replace('"', "'"), self.config_hash);
        }
        s
    }

    /// One line per check, for terminals.
    pub fn table(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            s += &format!("[{}] {:>2} {:<28} {}\n", if c.passes { "PASS" } else { "FAIL" }, c.id, c.name, c.summary);
        }
        s
    }
}

/// Bases loaded once per run (through the cache when one is configured).
pub struct Bases {
    cache_dir: Option<PathBuf>,
    map: BTreeMap<(String, usize, &'static str, bool), Arc<EigenBasis>>,
}

impl Bases {
    pub fn new(cache_dir: Option<PathBuf>) -> Self {
        Bases { cache_dir, map: BTreeMap::new() }
    }

    pub fn get(&mut self, kind: FractalKind, level: usize, bc: BoundaryCondition, plain: bool) -> Result<Arc<EigenBasis>> {
        let key = (kind.name().to_string(), level, bc.name(), plain);
        if let Some(b) = self.map.get(&key) {
            return Ok(b.clone());
        }
        let mut g = build(kind, level)?;
        if plain {
            g = g.to_plain();
        }
        let b = Arc::new(eigensolve_cached(&g, bc, self.cache_dir.as_deref())?);
        self.map.insert(key, b.clone());
        Ok(b)
    }
}

pub const CHECK_NAMES: [&str; CHECK_COUNT] = [
    "eigensolver-exactness",
    "decimation-oracle",
    "weyl-heat-consistency",
    "symbolic-calculus",
    "kernel-decay",
    "sobolev-identities",
    "products",
    "quasielliptic-pipeline",
    "wavefront-examples",
    "variable-coefficients",
    "determinism",
];

struct Ctx<'a> {
    cfg: &'a SuiteConfig,
    bases: &'a mut Bases,
    used: Vec<String>,
}

impl Ctx<'_> {
    fn basis(&mut self, kind: FractalKind, level: usize, bc: BoundaryCondition, plain: bool) -> Result<Arc<EigenBasis>> {
        let b = self.bases.get(kind, level, bc, plain)?;
        let h = b.hash();
        if !self.used.contains(&h) {
            self.used.push(h);
        }
        Ok(b)
    }

    fn gasket(&mut self, level: usize, bc: BoundaryCondition) -> Result<Arc<EigenBasis>> {
        self.basis(FractalKind::Gasket, level, bc, false)
    }

    fn rng(&self, id: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_mul(1_000_003).wrapping_add(id as u64))
    }
}

fn random_u(b: &EigenBasis, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let c: Vec<f64> = (0..b.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    b.synthesize(&c)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

type Outcome = (bool, String, Value);

fn check1(cx: &mut Ctx) -> Result<Outcome> {
    let t = Instant::now();
    let g = cx.basis(FractalKind::Gasket, 1, BoundaryCondition::Dirichlet, true)?;
    let gasket_err = multiset_diff(&g.eigenvalues, &[2.0, 5.0, 5.0], 1e-10).unwrap_or(f64::INFINITY);
    let c = cx.basis(FractalKind::Circle, 8, BoundaryCondition::None, true)?;
    let mut want: Vec<f64> = (0..8).map(|k| 2.0 - 2.0 * (std::f64::consts::TAU * k as f64 / 8.0).cos()).collect();
    want.sort_by(f64::total_cmp);
    let circle_err = multiset_diff(&c.eigenvalues, &want, 1e-10).unwrap_or(f64::INFINITY);
    let fast = t.elapsed() < Duration::from_secs(1);
    let ok = gasket_err <= 1e-10 && circle_err <= 1e-10 && fast;
    Ok((
        ok,
        format!("gasket L1 {{2,5,5}} err {gasket_err:.1e}, circle n=8 err {circle_err:.1e} (tol 1e-10, < 1 s)"),
        json!({ "gasket_level1_error": gasket_err, "circle8_error": circle_err, "tolerance": 1e-10, "under_time_limit": fast }),
    ))
}

fn check2(cx: &mut Ctx) -> Result<Outcome> {
    let t = Instant::now();
    let l = cx.cfg.level;
    let mut rows = Vec::new();
    let mut ok = true;
    for level in l.saturating_sub(1).max(1)..=l + 1 {
        let dense = cx.basis(FractalKind::Gasket, level, BoundaryCondition::Dirichlet, true)?;
        let dec = decimation_spectrum(level)?;
        let err = multiset_diff(&dense.eigenvalues, &dec, 1e-10);
        ok &= err.is_ok();
        rows.push(json!({ "level": level, "count": dec.len(), "max_error": err.as_ref().ok(), "mismatch": err.err() }));
    }
    let fast = t.elapsed() < Duration::from_secs(30);
    Ok((ok && fast, format!("decimation = dense at levels {}..={} (tol 1e-10, < 30 s)", l.saturating_sub(1).max(1), l + 1), json!({ "levels": rows, "under_time_limit": fast })))
}

fn check3(cx: &mut Ctx) -> Result<Outcome> {
    let t = Instant::now();
    let level = cx.cfg.level + 2;
    let b = cx.gasket(level, BoundaryCondition::Dirichlet)?;
    let grid = default_grid(&b)?;
    let fit = fit_on_diagonal(&b, &grid)?;
    let (t0, t1) = (grid[0], *grid.last().unwrap());
    let weyl = weyl_exponent(b.active_eigenvalues(), 1.0 / t1, 1.0 / t0)?.slope;
    let target = 3f64.ln() / 5f64.ln();
    let fast = t.elapsed() < Duration::from_secs(60);
    let ok = (fit.beta - target).abs() < 0.05 && (fit.beta - weyl).abs() < 0.02 && fast;
    Ok((
        ok,
        format!("beta {:.4} (target {target:.4} ± 0.05), Weyl {weyl:.4} (± 0.02) at level {level}", fit.beta),
        json!({ "level": level, "beta": fit.beta, "target": target, "weyl": weyl, "window": [t0, t1], "under_time_limit": fast }),
    ))
}

fn random_symbol(rng: &mut ChaCha8Rng, d: f64) -> Symbol {
    match rng.gen_range(0..4) {
        0 => bessel(Complex64::new(rng.gen_range(-1.5..1.5), rng.gen_range(-2.0..2.0)), d),
        1 => imaginary_power(rng.gen_range(-5.0..5.0)),
        2 => heat(rng.gen_range(1e-3..1e-1)),
        _ => ratio(),
    }
}

fn check4(cx: &mut Ctx) -> Result<Outcome> {
    let b = cx.gasket(cx.cfg.level, BoundaryCondition::Dirichlet)?;
    let mut rng = cx.rng(4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let p1 = random_symbol(&mut rng, b.d);
        let p2 = random_symbol(&mut rng, b.d);
        let u = random_u(&b, &mut rng);
        worst = worst.max(compose_check(&p1, &p2, &b, &u)?);
    }
    Ok((worst <= 1e-12, format!("max relative deviation {worst:.2e} over 100 trials (tol 1e-12)"), json!({ "trials": 100, "max_deviation": worst })))
}

fn check5(cx: &mut Ctx) -> Result<Outcome> {
    let l = cx.cfg.level;
    let symbols = [ratio(), imaginary_power(1.0), imaginary_power(5.0)];
    let variants = [(0usize, 0usize), (1, 0), (1, 1)];
    let mut sups: BTreeMap<(String, usize, usize), Vec<f64>> = BTreeMap::new();
    for level in l..=l + 2 {
        let b = cx.gasket(level, BoundaryCondition::Dirichlet)?;
        for p in &symbols {
            let k = kernel(p, &b)?;
            for &(a, c) in &variants {
                let r = decay_report(&k, &b, derivative_alpha(b.d, a, c), a, c)?;
                sups.entry((p.name.clone(), a, c)).or_default().push(r.sup);
            }
        }
    }
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for ((name, a, c), v) in &sups {
        let g = level_growth(v);
        if !(g <= 2.0) {
            failed.push(format!("{name} l+k={} ({g:.2}x)", a + c));
        }
        rows.push(json!({ "symbol": name, "l": a, "k": c, "sups": v, "growth": g }));
    }
    let worst = sups.values().map(|v| level_growth(v)).fold(0.0, f64::max);
    let summary = if failed.is_empty() {
        format!("max growth {worst:.2}x per level over levels {l}..={} (limit 2x)", l + 2)
    } else {
        format!("growth above 2x: {}", failed.join(", "))
    };
    Ok((failed.is_empty(), summary, json!({ "levels": [l, l + 1, l + 2], "bc": "dirichlet", "variants": rows, "limit": 2.0 })))
}

fn check6(cx: &mut Ctx) -> Result<Outcome> {
    let b = cx.gasket(cx.cfg.level, BoundaryCondition::Neumann)?;
    let mut rng = cx.rng(6);
    let mut norm_err: f64 = 0.0;
    for _ in 0..20 {
        let u = random_u(&b, &mut rng);
        let s = rng.gen_range(-2.0..2.0);
        let direct = lp_norm(&bessel_lift(&u, s, &b), 2.0, b.mass());
        norm_err = norm_err.max(rel(hs_norm(&u, s, &b), direct));
    }
    let mut attain_err: f64 = 0.0;
    let cases = [(bessel(Complex64::new(-1.0, 0.0), b.d), b.d + 1.0), (ratio(), 0.0), (imaginary_power(2.0), 0.0)];
    for (p, m) in &cases {
        for s in [-1.0, 0.0, 1.5] {
            let ob = op_bound_hs(p, *m, s, &b)?;
            let r = hs_ratio(p, *m, s, &b, &b.phi(ob.argmax_index))?;
            attain_err = attain_err.max(rel(r, ob.c));
        }
    }
    let ok = norm_err <= 1e-12 && attain_err <= 1e-10;
    Ok((
        ok,
        format!("H^s identity err {norm_err:.1e} (tol 1e-12), bound attained err {attain_err:.1e} (tol 1e-10)"),
        json!({ "hs_identity_error": norm_err, "attainment_error": attain_err }),
    ))
}

fn product_symbols() -> Vec<Symbol2> {
    vec![riesz_i(1), Symbol2::new("(1+l1+l2)^i", 0.0, |a, b| Complex64::new(0.0, (1.0 + a + b).ln()).exp())]
}

fn check7(cx: &mut Ctx) -> Result<Outcome> {
    let l = cx.cfg.level;
    let lo = l.saturating_sub(1).max(2);
    let b = cx.gasket(lo, BoundaryCondition::Neumann)?;
    let pb = product_basis(b.clone(), b.clone())?;
    let mut rng = cx.rng(7);
    let mut riesz_err: f64 = 0.0;
    for _ in 0..10 {
        let c = DMatrix::from_fn(pb.l1.len(), pb.l2.len(), |_, _| rng.gen_range(-1.0..1.0));
        let u = pb.synthesize(&c);
        let s = apply2(&riesz_i(1), &pb, &u)?.re + apply2(&riesz_i(2), &pb, &u)?.re;
        riesz_err = riesz_err.max((&s - &u).amax() / u.amax());
    }
    let powers = [[0usize, 0usize], [1, 0], [1, 1]];
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    let mut sups: BTreeMap<(String, [usize; 2]), Vec<f64>> = BTreeMap::new();
    for level in lo..=lo + 1 {
        let f = cx.gasket(level, BoundaryCondition::Neumann)?;
        let pb = product_basis(f.clone(), f)?;
        for p in product_symbols() {
            for pw in powers {
                sups.entry((p.name.clone(), pw)).or_default().push(product_decay(&p, &pb, pw)?.sup);
            }
        }
    }
    for ((name, pw), v) in &sups {
        let g = level_growth(v);
        worst = worst.max(g);
        rows.push(json!({ "symbol": name, "powers": pw, "sups": v, "growth": g }));
    }
    let ok = riesz_err <= 1e-12 && worst <= 2.0;
    Ok((
        ok,
        format!("Σ riesz_i = I err {riesz_err:.1e} (tol 1e-12), product decay growth {worst:.2}x at factor levels {lo}->{} (limit 2x)", lo + 1),
        json!({ "riesz_identity_error": riesz_err, "factor_levels": [lo, lo + 1], "bc": "neumann", "variants": rows }),
    ))
}

fn check8(cx: &mut Ctx) -> Result<Outcome> {
    let level = cx.cfg.level + 1;
    let b = cx.gasket(level, BoundaryCondition::Neumann)?;
    let pb = product_basis(b.clone(), b.clone())?;
    let cones = gap_cones(&pb, 0.0)?;
    let Some(w) = widest_cone(&cones) else {
        return Ok((false, format!("no gap cone at factor level {level}"), json!({ "cones": 0 })));
    };
    let q = quasi_inverse_check(w.a, &pb);
    let d = b.d;
    let a = w.a;
    let p = Symbol2::real("l1-a*l2", d + 1.0, move |x, y| x - a * y);
    let grid = EllipticGrid::new(pb.l1[0], 2f64.sqrt() * pb.l1[pb.l1.len() - 1], &[w.a, w.lo(), w.hi()])?;
    let ext = elliptic_extension(&p, d + 1.0, w, pb.l1[0], &grid, d)?;
    let ell = elliptic_check(&ext, d + 1.0, &grid, d);
    let spec = elliptic_check_spectrum(&p, d + 1.0, pb.l1[0], &pb);
    let mut rng = cx.rng(8);
    let mut diff: f64 = 0.0;
    for _ in 0..50 {
        let c = DMatrix::from_fn(pb.l1.len(), pb.l2.len(), |_, _| rng.gen_range(-1.0..1.0));
        let u = pb.synthesize(&c);
        let (e1, e2) = (apply2(&ext, &pb, &u)?, apply2(&p, &pb, &u)?);
        diff = diff.max(e1.max_diff(&e2) / e2.amax());
    }
    let ok = q.inf_ratio > 0.0 && diff <= 1e-12 && ell.passes;
    Ok((
        ok,
        format!(
            "{} gap cones, widest a={:.4} (ε={:.4}); quasi-inverse inf {:.3e}; extension = original err {diff:.1e} (tol 1e-12); elliptic on grid: {}",
            cones.len(),
            w.a,
            w.eps,
            q.inf_ratio,
            ell.passes
        ),
        json!({ "factor_level": level, "cones": cones.len(), "widest": { "a": w.a, "eps": w.eps, "lo": w.lo(), "hi": w.hi() },
                "quasi_inverse": q, "extension_difference": diff, "extension_elliptic": ell, "spectrum_elliptic": spec }),
    ))
}

fn check9(cx: &mut Ctx) -> Result<Outcome> {
    let level = cx.cfg.level + 1;
    let b = cx.gasket(level, BoundaryCondition::Neumann)?;
    let r = example_panel(&b, DEFAULT_N_MAX)?;
    let cases = r.cases.iter().filter(|c| c.passes).count();
    let checks = r.checks.iter().filter(|c| c.passes).count();
    Ok((
        r.passes,
        format!("level {level}: {cases}/{} reference cases, {checks}/{} monotonicity/invariance checks", r.cases.len(), r.checks.len()),
        serde_json::to_value(&r)?,
    ))
}

fn check10(cx: &mut Ctx) -> Result<Outcome> {
    let l = cx.cfg.level;
    let mut rng = cx.rng(10);
    let b = cx.gasket(l, BoundaryCondition::Dirichlet)?;
    let p = harmonic_ratio_symbol(&b.graph)?;
    let u = random_u(&b, &mut rng);
    let fit = supnorm_exponent_fit(&b)?;
    let n_aux = auxiliary_index(fit.alpha);
    let e = expand_symbol(&p, &b)?;
    let direct = apply_varcoef(&p, &b, &u)?;
    let other = apply_by_expansion(&e, &b, &u, n_aux)?;
    let routes = direct.iter().zip(&other).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
    let q = imaginary_power(1.0);
    let reduced = apply_varcoef(&VarSymbol::constant_in_x(&q), &b, &u)?;
    let plain = crate::psido::apply(&q, &b, &u)?;
    let reduction = reduced.iter().zip(&plain).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
    let mut ratios = Vec::new();
    let mut bounds = Vec::new();
    let mut sups = Vec::new();
    for level in l..=l + 2 {
        let b = cx.gasket(level, BoundaryCondition::Dirichlet)?;
        let p = harmonic_ratio_symbol(&b.graph)?;
        let r = lq_bound_check(&p, &b, 2.0, 16, cx.cfg.seed.wrapping_add(level as u64))?;
        ratios.push(r.max_ratio);
        bounds.push(r.expansion_bound.unwrap_or(f64::INFINITY));
        let k = kernel_varcoef(&p, &b)?;
        sups.push(decay_report(&k, &b, b.d, 0, 0)?.sup);
    }
    let bounded = ratios.iter().zip(&bounds).all(|(r, b)| r.is_finite() && r <= &(b * (1.0 + 1e-12)));
    let (lg, kg) = (level_growth(&ratios), level_growth(&sups));
    let ok = routes <= 1e-9 && reduction <= 1e-12 && bounded && lg <= 1.5 && kg <= 2.0;
    Ok((
        ok,
        format!(
            "routes {routes:.1e} (tol 1e-9), reduction {reduction:.1e} (tol 1e-12), L2 ratio growth {lg:.3}x (limit 1.5x), kernel growth {kg:.2}x (limit 2x)"
        ),
        json!({ "symbol": p.name, "route_difference": routes, "auxiliary_index": n_aux, "supnorm_alpha": fit.alpha, "reduction_difference": reduction,
                "levels": [l, l + 1, l + 2], "l2_ratios": ratios, "expansion_bounds": bounds, "kernel_sups": sups }),
    ))
}

/// Runs one of checks 1..=10.
pub fn run_check(id: usize, cfg: &SuiteConfig, bases: &mut Bases) -> Result<Check> {
    if !(1..=10).contains(&id) {
        return invalid(format!("check {id} does not exist (1..=10; 11 needs the whole battery)"));
    }
    let t = Instant::now();
    let mut cx = Ctx { cfg, bases, used: Vec::new() };
    let f: fn(&mut Ctx) -> Result<Outcome> = match id {
        1 => check1,
        2 => check2,
        3 => check3,
        4 => check4,
        5 => check5,
        6 => check6,
        7 => check7,
        8 => check8,
        9 => check9,
        _ => check10,
    };
    let (passes, summary, details) = f(&mut cx)?;
    Ok(Check { id, name: CHECK_NAMES[id - 1], passes, summary, details, basis_hashes: cx.used, elapsed: t.elapsed() })
}

fn battery(cfg: &SuiteConfig, bases: &mut Bases) -> Result<Vec<Check>> {
    (1..=10).map(|id| run_check(id, cfg, bases)).collect()
}

/// Checks 1..=10, then the battery again with fresh bases (cache still
/// honoured) for check 11: both serializations must be byte-identical.
pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    if cfg.level < 2 {
        return invalid("suite level must be ≥ 2");
    }
    let mut bases = Bases::new(cfg.cache_dir.clone());
    let mut checks = battery(cfg, &mut bases)?;
    let t = Instant::now();
    let again = battery(cfg, &mut Bases::new(cfg.cache_dir.clone()))?;
    let (a, b) = (serde_json::to_vec(&checks)?, serde_json::to_vec(&again)?);
    let same = a == b;
    checks.push(Check {
        id: 11,
        name: CHECK_NAMES[10],
        passes: same,
        summary: format!("second run {} ({} bytes)", if same { "byte-identical" } else { "differs" }, a.len()),
        details: json!({ "bytes": a.len(), "identical": same, "sha256": crate::provenance::sha256_hex(&a) }),
        basis_hashes: Vec::new(),
        elapsed: t.elapsed(),
    });
    let passes = checks.iter().all(|c| c.passes);
    Ok(SuiteReport { config: cfg.to_json(), config_hash: cfg.hash(), checks, passes })
}

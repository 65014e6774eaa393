use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use fractafold::error::{Error, Result};
use fractafold::expr;
use fractafold::graph::{build, FractalGraph, FractalKind};
use fractafold::heat::{csv_dump, default_grid, fit_on_diagonal, fit_subgaussian};
use fractafold::products::{gap_cones, product_basis, product_decay, quasi_inverse_check, widest_cone, write_kernel2};
use fractafold::provenance::json_hash;
use fractafold::psido::{decay_report, kernel, level_growth, spectrum_grid, verify_symbol_class};
use fractafold::sobolev::{hs_ratio, op_bound_hs};
use fractafold::spectral::{eigensolve_cached, weyl_exponent, BoundaryCondition, EigenBasis};
use fractafold::suite::{run_suite, SuiteConfig};
use fractafold::symbol::{parse_symbol, parse_symbol2};
use fractafold::varcoef::{
    apply_by_expansion, apply_varcoef, auxiliary_index, expand_symbol, kernel_continuity, kernel_varcoef, lq_bound_check, parse_var_symbol,
    supnorm_exponent_fit, VertexFeatures,
};
use fractafold::wavefront::{class_panel, example_panel, full_product, panel_fields, region_panel, wf_estimate, DEFAULT_N_MAX};

#[derive(Parser)]
#[command(name = "fractafold", version, about = "Spectral operators on post-critically finite fractals")]
struct Cli {
    /// Directory for cached eigenbases.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Write reports here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Stdout format when --out is not given.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Format {
    Json,
    Csv,
    Text,
}

#[derive(Args, Clone, Serialize)]
struct Space {
    #[arg(long, default_value = "gasket")]
    kind: String,
    #[arg(long, default_value_t = 3)]
    level: usize,
    /// dirichlet | neumann | closed
    #[arg(long, default_value = "dirichlet")]
    bc: String,
    /// Unit-weight graph Laplacian instead of the renormalized one.
    #[arg(long)]
    plain: bool,
}

#[derive(Subcommand, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Cmd {
    /// Build a graph approximation and dump it as JSON.
    Build {
        #[arg(long, default_value = "gasket")]
        kind: String,
        #[arg(long, default_value_t = 3)]
        level: usize,
        #[arg(long)]
        plain: bool,
    },
    /// Solve (or load) an eigenbasis.
    Eig {
        #[command(flatten)]
        space: Space,
        /// Only report the lowest N eigenvalues.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Heat kernel on-diagonal and sub-Gaussian fits.
    HeatFit {
        #[command(flatten)]
        space: Space,
        /// Number of off-diagonal sample pairs.
        #[arg(long, default_value_t = 16)]
        pairs: usize,
    },
    /// Symbol class constants on the spectrum.
    SymbolVerify {
        #[command(flatten)]
        space: Space,
        #[arg(long)]
        symbol: String,
        /// Order, may use d (e.g. "d+1").
        #[arg(long, default_value = "0")]
        order: String,
        #[arg(long, default_value_t = 1.0)]
        rho: f64,
        #[arg(long, default_value_t = 4)]
        kmax: usize,
        #[arg(long, default_value_t = 8)]
        per_octave: usize,
    },
    /// Off-diagonal kernel decay sweep over levels.
    KernelDecay {
        #[arg(long, default_value = "gasket")]
        kind: String,
        #[arg(long, default_value = "dirichlet")]
        bc: String,
        #[arg(long)]
        symbol: String,
        #[arg(long, default_value = "0")]
        order: String,
        /// Decay exponent, may use d.
        #[arg(long, default_value = "d")]
        alpha: String,
        #[arg(long, value_delimiter = ',', default_value = "3,4,5")]
        levels: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        l: usize,
        #[arg(long, default_value_t = 0)]
        k: usize,
    },
    /// H^s operator bounds and their attainment.
    Sobolev {
        #[command(flatten)]
        space: Space,
        #[arg(long)]
        symbol: String,
        #[arg(long, default_value = "0")]
        order: String,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-1,0,1")]
        s: Vec<f64>,
    },
    /// Product-space kernels (chunked file) or their decay.
    Product {
        #[arg(value_enum)]
        action: ProductAction,
        #[command(flatten)]
        space: Space,
        #[arg(long, default_value = "riesz:1")]
        symbol: String,
        #[arg(long, default_value = "0")]
        order: String,
        #[arg(long, value_delimiter = ',', default_value = "0,0")]
        powers: Vec<usize>,
        /// Kernel file name, inside --out when given.
        #[arg(long, default_value = "product_kernel.bin")]
        file: PathBuf,
    },
    /// Gap cones of the product spectrum.
    Gaps {
        #[command(flatten)]
        space: Space,
        #[arg(long, default_value_t = 0.0)]
        min_width: f64,
    },
    /// Wavefront panel verdicts.
    Wavefront {
        #[command(flatten)]
        space: Space,
    },
    /// Variable-coefficient operator checks.
    Varcoef {
        #[command(flatten)]
        space: Space,
        /// Expression in λ (or l) and vertex features (h0, h1, h2, x, y, phiK).
        #[arg(long, default_value = "(1+h0)*l/(1+l)")]
        symbol: String,
        #[arg(long, default_value = "0")]
        order: String,
        #[arg(long, default_value_t = 2.0)]
        q: f64,
        #[arg(long, default_value_t = 16)]
        trials: usize,
    },
    /// The full acceptance battery at levels L..L+2.
    Suite {
        #[arg(long, default_value_t = 3)]
        level: usize,
    },
}

#[derive(Clone, Copy, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ProductAction {
    Kernel,
    Decay,
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Build { .. } => "build",
            Cmd::Eig { .. } => "eig",
            Cmd::HeatFit { .. } => "heat-fit",
            Cmd::SymbolVerify { .. } => "symbol-verify",
            Cmd::KernelDecay { .. } => "kernel-decay",
            Cmd::Sobolev { .. } => "sobolev",
            Cmd::Product { .. } => "product",
            Cmd::Gaps { .. } => "gaps",
            Cmd::Wavefront { .. } => "wavefront",
            Cmd::Varcoef { .. } => "varcoef",
            Cmd::Suite { .. } => "suite",
        }
    }

    fn default_format(&self) -> Format {
        match self {
            Cmd::Eig { .. } | Cmd::Suite { .. } => Format::Text,
            Cmd::KernelDecay { .. } | Cmd::Gaps { .. } | Cmd::Wavefront { .. } => Format::Csv,
            _ => Format::Json,
        }
    }
}

/// What a command produced, before it is written anywhere.
struct Outcome {
    result: Value,
    basis_hashes: Vec<String>,
    csv: Option<Csv>,
    summary: String,
    passes: bool,
    files: Vec<(PathBuf, Vec<u8>)>,
}

struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    fn new(header: &[&'static str]) -> Self {
        Csv { header: header.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    /// Every row carries the provenance columns.
    fn render(&self, config_hash: &str, basis: &str) -> String {
        let mut s = self.header.join(",") + ",basis_hash,config_hash\n";
        for r in &self.rows {
            s += &format!("{},{basis},{config_hash}\n", r.join(","));
        }
        s
    }
}

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}

/// Resolves a numeric token that may mention the measured dimension d.
fn resolve(token: &str, d: f64) -> Result<f64> {
    let e = expr::parse(token)?;
    let v = e.eval(&|name| (name == "d").then_some(d))?;
    if v.im != 0.0 || !v.re.is_finite() {
        return config_err(format!("'{token}' is not a finite real number"));
    }
    Ok(v.re)
}

fn num(x: f64) -> String {
    if x == x.round() && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x:e}")
    }
}

/// Rounds to ten significant decimals for human-facing lists.
fn short(x: f64) -> String {
    let s = format!("{x:.10}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

struct Ctx {
    cache_dir: Option<PathBuf>,
    seed: u64,
    used: Vec<String>,
}

impl Ctx {
    fn graph(&self, kind: &str, level: usize, plain: bool) -> Result<FractalGraph> {
        let kind: FractalKind = kind.parse()?;
        let g = build(kind, level)?;
        Ok(if plain { g.to_plain() } else { g })
    }

    fn basis(&mut self, kind: &str, level: usize, bc: &str, plain: bool) -> Result<Arc<EigenBasis>> {
        let bc: BoundaryCondition = bc.parse()?;
        let g = self.graph(kind, level, plain)?;
        let b = eigensolve_cached(&g, bc, self.cache_dir.as_deref())?;
        let h = b.hash();
        if !self.used.contains(&h) {
            self.used.push(h);
        }
        Ok(Arc::new(b))
    }

    fn space(&mut self, s: &Space) -> Result<Arc<EigenBasis>> {
        self.basis(&s.kind, s.level, &s.bc, s.plain)
    }

    fn done(&mut self, result: Value, csv: Option<Csv>, summary: String, passes: bool) -> Result<Outcome> {
        Ok(Outcome { result, basis_hashes: std::mem::take(&mut self.used), csv, summary, passes, files: Vec::new() })
    }
}

fn run(cmd: &Cmd, cx: &mut Ctx, config_hash: &str) -> Result<Outcome> {
    match cmd {
        Cmd::Build { kind, level, plain } => {
            let g = cx.graph(kind, *level, *plain)?;
            cx.used.push(g.hash());
            let summary = format!("{} level {level}: {} vertices, hash {}", kind, g.n(), g.hash());
            cx.done(g.to_json(), None, summary, true)
        }
        Cmd::Eig { space, count } => {
            let b = cx.space(space)?;
            let n = count.unwrap_or(b.eigenvalues.len()).min(b.eigenvalues.len());
            let vals = &b.eigenvalues[..n];
            let mut csv = Csv::new(&["index", "eigenvalue"]);
            for (i, v) in vals.iter().enumerate() {
                csv.push(vec![i.to_string(), format!("{v:e}")]);
            }
            let summary = format!("{{{}}}", vals.iter().map(|&v| short(v)).collect::<Vec<_>>().join(", "));
            let result = json!({ "kind": space.kind, "level": space.level, "bc": space.bc, "plain": space.plain, "d": b.d,
                                 "n_vertices": b.n_vertices(), "zero_modes": b.zero_modes, "eigenvalues": vals });
            cx.done(result, Some(csv), summary, true)
        }
        Cmd::HeatFit { space, pairs } => {
            let b = cx.space(space)?;
            let grid = default_grid(&b)?;
            let on = fit_on_diagonal(&b, &grid)?;
            let n = b.n_vertices();
            let x = n / 2;
            let step = (n / pairs.max(&1)).max(1);
            let pairs: Vec<(usize, usize)> = (0..n).step_by(step).map(|y| (x, y)).collect();
            let sub = fit_subgaussian(&b, &grid, &pairs, b.d)?;
            let (t0, t1) = (grid[0], grid[grid.len() - 1]);
            let weyl = weyl_exponent(b.active_eigenvalues(), 1.0 / t1, 1.0 / t0)?.slope;
            let dump = csv_dump(&b, &grid, &pairs)?;
            let mut lines = dump.lines();
            let mut csv = Csv::new(&[]);
            csv.header = lines.next().unwrap_or("").split(',').map(String::from).collect();
            for l in lines {
                csv.push(l.split(',').map(String::from).collect());
            }
            let passes = sub.residual_max <= 0.0;
            let summary = format!("beta {:.4} (Weyl {weyl:.4}), gamma {:.3}, bound residual {:.2e}", on.beta, sub.parameters.gamma, sub.residual_max);
            cx.done(json!({ "on_diagonal": on, "subgaussian": sub, "weyl_exponent": weyl, "t_grid": grid }), Some(csv), summary, passes)
        }
        Cmd::SymbolVerify { space, symbol, order, rho, kmax, per_octave } => {
            let b = cx.space(space)?;
            let m = resolve(order, b.d)?;
            let p = parse_symbol(symbol, b.d, m)?;
            let grid = spectrum_grid(&b, *per_octave)?;
            let r = verify_symbol_class(&p, m, *rho, *kmax, &grid, b.d)?;
            let mut csv = Csv::new(&["k", "constant", "extended_constant", "argmax"]);
            for k in 0..r.constants.len() {
                csv.push(vec![k.to_string(), format!("{:e}", r.constants[k]), format!("{:e}", r.extended_constants[k]), format!("{:e}", r.argmax[k])]);
            }
            let summary = format!("{} order {m:.4}: C_k = {:?}, {}", r.symbol, r.constants.iter().map(|c| format!("{c:.3e}")).collect::<Vec<_>>(), verdict(r.passes));
            let passes = r.passes;
            cx.done(serde_json::to_value(&r)?, Some(csv), summary, passes)
        }
        Cmd::KernelDecay { kind, bc, symbol, order, alpha, levels, l, k } => {
            let mut levels = levels.clone();
            levels.sort_unstable();
            levels.dedup();
            if levels.is_empty() {
                return config_err("--levels is empty");
            }
            let mut csv = Csv::new(&["level", "symbol", "alpha", "l", "k", "sup", "argmax_x", "argmax_y", "r_at_argmax", "admissible_pairs"]);
            let mut reports = Vec::new();
            let mut hashes = Vec::new();
            for &level in &levels {
                let b = cx.basis(kind, level, bc, false)?;
                let a = resolve(alpha, b.d)?;
                let p = parse_symbol(symbol, b.d, resolve(order, b.d)?)?;
                let r = decay_report(&kernel(&p, &b)?, &b, a, *l, *k)?;
                csv.push(vec![
                    level.to_string(),
                    r.symbol.clone(),
                    format!("{a:e}"),
                    l.to_string(),
                    k.to_string(),
                    format!("{:e}", r.sup),
                    r.argmax.0.to_string(),
                    r.argmax.1.to_string(),
                    format!("{:e}", r.r_at_argmax),
                    r.admissible_pairs.to_string(),
                ]);
                hashes.push(b.hash());
                reports.push(r);
            }
            let sups: Vec<f64> = reports.iter().map(|r| r.sup).collect();
            let growth = level_growth(&sups);
            let passes = growth <= 2.0;
            let summary = format!("sups {:?}, growth {growth:.3}x per level (limit 2x)", sups.iter().map(|s| format!("{s:.4e}")).collect::<Vec<_>>());
            let mut out = cx.done(json!({ "reports": reports, "growth": growth, "limit": 2.0 }), None, summary, passes)?;
            let mut rows = csv;
            rows.header.push("level_basis_hash".into());
            for (r, h) in rows.rows.iter_mut().zip(&hashes) {
                r.push(h.clone());
            }
            out.csv = Some(rows);
            Ok(out)
        }
        Cmd::Sobolev { space, symbol, order, s } => {
            let b = cx.space(space)?;
            let m = resolve(order, b.d)?;
            let p = parse_symbol(symbol, b.d, m)?;
            let mut csv = Csv::new(&["s", "bound", "argmax_index", "attained_ratio", "relative_gap"]);
            let mut bounds = Vec::new();
            let mut worst: f64 = 0.0;
            for &si in s {
                let ob = op_bound_hs(&p, m, si, &b)?;
                let r = hs_ratio(&p, m, si, &b, &b.phi(ob.argmax_index))?;
                let gap = (r - ob.c).abs() / ob.c.abs().max(f64::MIN_POSITIVE);
                worst = worst.max(gap);
                csv.push(vec![num(si), format!("{:e}", ob.c), ob.argmax_index.to_string(), format!("{r:e}"), format!("{gap:e}")]);
                bounds.push(json!({ "s": si, "bound": ob, "attained_ratio": r }));
            }
            let summary = format!("{} order {m:.4}: bound attained within {worst:.1e} (tol 1e-10)", p.name);
            cx.done(json!({ "symbol": p.name, "order": m, "bounds": bounds }), Some(csv), summary, worst <= 1e-10)
        }
        Cmd::Product { action, space, symbol, order, powers, file } => {
            let b = cx.space(space)?;
            let p = parse_symbol2(symbol, b.d, resolve(order, b.d)?)?;
            let pb = product_basis(b.clone(), b)?;
            match action {
                ProductAction::Kernel => {
                    let mut bytes = Vec::new();
                    let header = write_kernel2(&p, &pb, config_hash, &mut bytes)?;
                    let summary = format!("{} kernel {:?} in {} chunks, {} bytes -> {}", header.symbol, header.shape, header.chunks, bytes.len(), file.display());
                    let mut out = cx.done(serde_json::to_value(&header)?, None, summary, true)?;
                    out.files.push((file.clone(), bytes));
                    Ok(out)
                }
                ProductAction::Decay => {
                    let [a, c] = powers[..] else {
                        return config_err("--powers takes two integers");
                    };
                    let r = product_decay(&p, &pb, [a, c])?;
                    let summary = format!("{} powers ({a},{c}): sup {:.4e}", p.name, r.sup);
                    cx.done(serde_json::to_value(&r)?, None, summary, r.sup.is_finite())
                }
            }
        }
        Cmd::Gaps { space, min_width } => {
            let b = cx.space(space)?;
            let pb = product_basis(b.clone(), b)?;
            let cones = gap_cones(&pb, *min_width)?;
            let mut csv = Csv::new(&["a", "eps", "lo", "hi"]);
            for c in &cones {
                csv.push(vec![format!("{:e}", c.a), format!("{:e}", c.eps), format!("{:e}", c.lo()), format!("{:e}", c.hi())]);
            }
            let widest = widest_cone(&cones);
            let qi = widest.map(|w| quasi_inverse_check(w.a, &pb));
            let summary = match widest {
                Some(w) => format!("{} gap cones, widest a={:.4} eps={:.4}", cones.len(), w.a, w.eps),
                None => "no gap cones".into(),
            };
            let passes = !cones.is_empty();
            cx.done(json!({ "cones": cones, "widest": widest, "quasi_inverse": qi }), Some(csv), summary, passes)
        }
        Cmd::Wavefront { space } => {
            let b = cx.space(space)?;
            let panel = example_panel(&b, DEFAULT_N_MAX)?;
            let fp = full_product(&b, &b)?;
            let regions = region_panel(&b.graph, &b.graph, 1)?;
            let cones = class_panel();
            let (inputs, _) = panel_fields(&b)?;
            let mut csv = Csv::new(&["case", "region", "cone", "witness", "lattice_points", "shells", "slope", "order", "verdict"]);
            for (name, u, _) in &inputs {
                let grid = wf_estimate(u, &fp, &regions, &cones, DEFAULT_N_MAX)?;
                for line in grid.to_csv().lines().skip(1) {
                    let mut row = vec![name.to_string()];
                    row.extend(line.split(',').map(String::from));
                    csv.push(row);
                }
            }
            let summary = format!(
                "{}/{} reference cases, {}/{} symbol checks",
                panel.cases.iter().filter(|c| c.passes).count(),
                panel.cases.len(),
                panel.checks.iter().filter(|c| c.passes).count(),
                panel.checks.len()
            );
            let passes = panel.passes;
            cx.done(serde_json::to_value(&panel)?, Some(csv), summary, passes)
        }
        Cmd::Varcoef { space, symbol, order, q, trials } => {
            let b = cx.space(space)?;
            let m = resolve(order, b.d)?;
            let feats = Arc::new(VertexFeatures::new(b.clone())?);
            let p = parse_var_symbol(symbol, m, feats)?;
            let fit = supnorm_exponent_fit(&b)?;
            let e = expand_symbol(&p, &b)?;
            let n_aux = auxiliary_index(fit.alpha);
            let u: Vec<f64> = (0..b.n_vertices()).map(|i| ((i as f64 + 1.0) * 0.7).sin()).collect();
            let direct = apply_varcoef(&p, &b, &u)?;
            let other = apply_by_expansion(&e, &b, &u, n_aux)?;
            let routes = direct.iter().zip(&other).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
            let lq = lq_bound_check(&p, &b, *q, *trials, cx.seed)?;
            let km = kernel_varcoef(&p, &b)?;
            let decay = decay_report(&km, &b, b.d + m, 0, 0)?;
            let cont = kernel_continuity(&km, &b);
            let summary = format!(
                "{}: routes agree to {routes:.1e} (tol 1e-9), L^{q} ratio {:.4}, kernel sup {:.4e}, continuity {:.4e}",
                p.name, lq.max_ratio, decay.sup, cont.sup
            );
            let result = json!({ "symbol": p.name, "order": m, "supnorm_fit": fit, "auxiliary_index": n_aux, "expansion_modes": e.modes,
                                 "expansion_residual": e.residual, "route_difference": routes, "lq": lq, "kernel_decay": decay, "continuity": cont });
            cx.done(result, None, summary, routes <= 1e-9)
        }
        Cmd::Suite { level } => {
            let cfg = SuiteConfig { level: *level, seed: cx.seed, cache_dir: cx.cache_dir.clone() };
            let r = run_suite(&cfg)?;
            let mut csv = Csv::new(&["id", "name", "passes", "summary"]);
            let mut hashes: Vec<String> = Vec::new();
            for c in &r.checks {
                csv.push(vec![c.id.to_string(), c.name.into(), c.passes.to_string(), format!("\"{}\"", c.summary.replace('"', "'"))]);
                for h in &c.basis_hashes {
                    if !hashes.contains(h) {
                        hashes.push(h.clone());
                    }
                }
            }
            cx.used = hashes;
            let passes = r.passes;
            let summary = r.table().trim_end().to_string();
            cx.done(serde_json::to_value(&r)?, Some(csv), summary, passes)
        }
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "fail"
    }
}

fn is_config_error(e: &Error) -> bool {
    matches!(e, Error::InvalidInput(_) | Error::Parse(_) | Error::SymbolUndefined(_))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(Error::from)
}

/// Stdout that tolerates a closed pipe (`| head`).
fn emit(s: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(s.as_bytes());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 || rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            eprintln!("error: --threads must be a positive integer");
            return ExitCode::from(2);
        }
    }
    // Only inputs that can change the numbers are hashed.
    let config = json!({ "command": cli.cmd.name(), "args": &cli.cmd, "seed": cli.seed });
    let config_hash = match &cli.cmd {
        Cmd::Suite { level } => SuiteConfig { level: *level, seed: cli.seed, cache_dir: None }.hash(),
        _ => json_hash(&config),
    };
    let mut cx = Ctx { cache_dir: cli.cache_dir.clone(), seed: cli.seed, used: Vec::new() };
    let out = match run(&cli.cmd, &mut cx, &config_hash) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(if is_config_error(&e) { 2 } else { 1 });
        }
    };
    let report = json!({ "command": cli.cmd.name(), "config": config, "config_hash": config_hash, "basis_hashes": out.basis_hashes,
                         "passes": out.passes, "result": out.result });
    let mut json_bytes = serde_json::to_vec_pretty(&report).expect("report serializes");
    json_bytes.push(b'\n');
    let csv = out.csv.as_ref().map(|c| c.render(&config_hash, &out.basis_hashes.join(";")));
    let name = cli.cmd.name();
    match &cli.out {
        Some(dir) => {
            let mut files = vec![(PathBuf::from(format!("{name}.json")), json_bytes)];
            if let Some(c) = csv {
                files.push((PathBuf::from(format!("{name}.csv")), c.into_bytes()));
            }
            files.extend(out.files);
            let res = std::fs::create_dir_all(dir).map_err(Error::from).and_then(|_| files.iter().try_for_each(|(p, b)| write(&dir.join(p), b)));
            if let Err(e) = res {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
            println!("{}", out.summary);
        }
        None => {
            for (p, b) in &out.files {
                if let Err(e) = write(p, b) {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            }
            match cli.format.unwrap_or(cli.cmd.default_format()) {
                Format::Json => emit(&String::from_utf8_lossy(&json_bytes)),
                Format::Csv => match csv {
                    Some(c) => emit(&c),
                    None => {
                        eprintln!("error: {name} has no CSV form");
                        return ExitCode::from(2);
                    }
                },
                Format::Text => emit(&format!("{}\n", out.summary)),
            }
        }
    }
    if out.passes {
        ExitCode::SUCCESS
    } else {
        eprintln!("{name}: check failed");
        ExitCode::from(1)
    }
}

//! Spectral symbols of one and two variables, their derivatives, and the
//! Littlewood–Paley window.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{invalid, Error, Result};
use crate::expr;

pub type Eval = Arc<dyn Fn(f64) -> Complex64 + Send + Sync>;
/// `deriv(j, λ)` returns the ordinary derivative d^j p/dλ^j.
pub type DerivEval = Arc<dyn Fn(usize, f64) -> Complex64 + Send + Sync>;
pub type Eval2 = Arc<dyn Fn(f64, f64) -> Complex64 + Send + Sync>;

#[derive(Clone)]
pub struct Symbol {
    pub name: String,
    pub order: f64,
    pub rho: f64,
    /// The symbol extends continuously to λ = 0 and may act on zero modes.
    pub zero_mode: bool,
    eval: Eval,
    deriv: Option<DerivEval>,
}

impl fmt::Debug for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Symbol")
            .field("name", &self.name)
            .field("order", &self.order)
            .field("rho", &self.rho)
            .field("closed_form_derivatives", &self.deriv.is_some())
            .finish()
    }
}

impl Symbol {
    pub fn new(name: impl Into<String>, order: f64, f: impl Fn(f64) -> Complex64 + Send + Sync + 'static) -> Self {
        Symbol { name: name.into(), order, rho: 1.0, zero_mode: false, eval: Arc::new(f), deriv: None }
    }

    pub fn real(name: impl Into<String>, order: f64, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Symbol::new(name, order, move |l| Complex64::new(f(l), 0.0))
    }

    pub fn with_derivatives(mut self, d: impl Fn(usize, f64) -> Complex64 + Send + Sync + 'static) -> Self {
        self.deriv = Some(Arc::new(d));
        self
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn with_zero_mode(mut self, on: bool) -> Self {
        self.zero_mode = on;
        self
    }

    pub fn eval(&self, lambda: f64) -> Complex64 {
        (self.eval)(lambda)
    }

    pub fn has_closed_form(&self) -> bool {
        self.deriv.is_some()
    }

    /// Pointwise product; orders add, closed-form derivatives combine by Leibniz.
    pub fn product(&self, other: &Symbol) -> Symbol {
        let (a, b) = (self.eval.clone(), other.eval.clone());
        let mut s = Symbol::new(format!("({})*({})", self.name, other.name), self.order + other.order, move |l| a(l) * b(l));
        s.zero_mode = self.zero_mode && other.zero_mode;
        s.rho = self.rho.min(other.rho);
        if let (Some(da), Some(db)) = (self.deriv.clone(), other.deriv.clone()) {
            s.deriv = Some(Arc::new(move |k, l| {
                let mut acc = Complex64::new(0.0, 0.0);
                let mut binom = 1.0;
                for i in 0..=k {
                    acc += binom * da(i, l) * db(k - i, l);
                    binom = binom * (k - i) as f64 / (i + 1) as f64;
                }
                acc
            }));
        }
        s
    }

    /// Ordinary derivatives p^{(j)}(λ), j = 0..=kmax.
    pub fn derivatives(&self, lambda: f64, kmax: usize) -> Vec<Complex64> {
        if let Some(d) = &self.deriv {
            return (0..=kmax).map(|j| d(j, lambda)).collect();
        }
        let q = log_derivatives(&|s: f64| self.eval(s.exp()), lambda.ln(), kmax);
        ordinary_from_log(&q, lambda)
    }

    /// (λ^ρ d/dλ)^k p(λ) for k = 0..=kmax.
    pub fn rho_derivatives(&self, rho: f64, lambda: f64, kmax: usize) -> Vec<Complex64> {
        if rho == 1.0 && self.deriv.is_none() {
            // the Euler operator is d/ds in s = ln λ
            return log_derivatives(&|s: f64| self.eval(s.exp()), lambda.ln(), kmax);
        }
        let d = self.derivatives(lambda, kmax);
        rho_from_ordinary(&d, rho, lambda)
    }
}

/// Step in s = ln λ for a k-th derivative: grows with k so that roundoff
/// (∝ ε/h^k) stays below the Richardson-reduced truncation error.
pub fn log_step(k: usize) -> f64 {
    2e-3 * 10f64.powf(0.45 * (k.max(1) - 1) as f64)
}

fn binomial(k: usize, i: usize) -> f64 {
    let mut b = 1.0;
    for j in 0..i {
        b = b * (k - j) as f64 / (j + 1) as f64;
    }
    b
}

/// Central stencil offsets (in units of h) and weights for the k-th derivative.
fn stencil(k: usize) -> Vec<(f64, f64)> {
    (0..=k)
        .map(|i| {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            (k as f64 / 2.0 - i as f64, sign * binomial(k, i))
        })
        .collect()
}

fn richardson(d1: Complex64, d2: Complex64, d4: Complex64) -> Complex64 {
    let a = (4.0 * d2 - d1) / 3.0;
    let b = (4.0 * d4 - d2) / 3.0;
    (16.0 * b - a) / 15.0
}

/// q^{(k)}(s) for k = 0..=kmax by Richardson-extrapolated central differences.
pub fn log_derivatives(q: &dyn Fn(f64) -> Complex64, s: f64, kmax: usize) -> Vec<Complex64> {
    let mut out = vec![q(s)];
    for k in 1..=kmax {
        let st = stencil(k);
        let diff = |h: f64| -> Complex64 {
            let mut acc = Complex64::new(0.0, 0.0);
            for &(o, w) in &st {
                acc += w * q(s + o * h);
            }
            acc / h.powi(k as i32)
        };
        let h = log_step(k);
        out.push(richardson(diff(h), diff(h / 2.0), diff(h / 4.0)));
    }
    out
}

/// Mixed derivatives ∂_{s1}^a ∂_{s2}^b q for a, b ≤ kmax (indexed [a][b]).
pub fn log_derivatives2(q: &dyn Fn(f64, f64) -> Complex64, s1: f64, s2: f64, kmax: usize) -> Vec<Vec<Complex64>> {
    let mut out = vec![vec![Complex64::new(0.0, 0.0); kmax + 1]; kmax + 1];
    for a in 0..=kmax {
        for b in 0..=kmax {
            if a + b == 0 {
                out[0][0] = q(s1, s2);
                continue;
            }
            let (sa, sb) = (stencil(a), stencil(b));
            let diff = |h: f64| -> Complex64 {
                let mut acc = Complex64::new(0.0, 0.0);
                for &(oa, wa) in &sa {
                    for &(ob, wb) in &sb {
                        acc += wa * wb * q(s1 + oa * h, s2 + ob * h);
                    }
                }
                acc / h.powi((a + b) as i32)
            };
            let h = log_step(a + b);
            out[a][b] = richardson(diff(h), diff(h / 2.0), diff(h / 4.0));
        }
    }
    out
}

/// Signed Stirling numbers of the first kind: λ^j d^j/dλ^j = Σ_i s(j,i) (λ d/dλ)^i.
pub fn stirling1(n: usize) -> Vec<Vec<f64>> {
    let mut s = vec![vec![0.0; n + 1]; n + 1];
    s[0][0] = 1.0;
    for j in 0..n {
        for i in 1..=j + 1 {
            s[j + 1][i] = s[j][i - 1] - j as f64 * s[j][i];
        }
    }
    s
}

/// λ^j p^{(j)} from Euler derivatives q^{(i)}.
pub fn scaled_from_log(q: &[Complex64]) -> Vec<Complex64> {
    let st = stirling1(q.len() - 1);
    (0..q.len()).map(|j| (0..=j).map(|i| st[j][i] * q[i]).sum()).collect()
}

pub fn ordinary_from_log(q: &[Complex64], lambda: f64) -> Vec<Complex64> {
    scaled_from_log(q).into_iter().enumerate().map(|(j, v)| v / lambda.powi(j as i32)).collect()
}

/// (λ^ρ d/dλ)^k p = Σ_j c_{k,j} λ^{kρ−k+j} p^{(j)} with c_{k+1,j} = (kρ−k+j) c_{k,j} + c_{k,j−1}.
pub fn rho_from_ordinary(d: &[Complex64], rho: f64, lambda: f64) -> Vec<Complex64> {
    let kmax = d.len() - 1;
    let mut c = vec![1.0];
    let mut out = vec![d[0]];
    for k in 0..kmax {
        let mut next = vec![0.0; k + 2];
        for (j, cj) in c.iter().enumerate() {
            let e = k as f64 * rho - k as f64 + j as f64;
            next[j] += e * cj;
            next[j + 1] += cj;
        }
        c = next;
        let kk = (k + 1) as f64;
        let v: Complex64 = c
            .iter()
            .enumerate()
            .map(|(j, cj)| *cj * lambda.powf(kk * rho - kk + j as f64) * d[j])
            .sum();
        out.push(v);
    }
    out
}

fn falling(s: Complex64, j: usize) -> Complex64 {
    let mut acc = Complex64::new(1.0, 0.0);
    for i in 0..j {
        acc *= s - i as f64;
    }
    acc
}

/// (1+λ)^{−s}; order −s(d+1) for real s ≥ 0, continuous at 0.
pub fn bessel(s: Complex64, d: f64) -> Symbol {
    let e = -s;
    Symbol::new(format!("bessel:{}", fmt_c(s)), -s.re * (d + 1.0), move |l| Complex64::new(1.0 + l, 0.0).powc(e))
        .with_derivatives(move |j, l| falling(e, j) * Complex64::new(1.0 + l, 0.0).powc(e - j as f64))
        .with_zero_mode(true)
}

/// λ^{−s}; requires the zero mode excluded.
pub fn riesz(s: Complex64, d: f64) -> Symbol {
    let e = -s;
    Symbol::new(format!("riesz:{}", fmt_c(s)), -s.re * (d + 1.0), move |l| Complex64::new(l, 0.0).powc(e))
        .with_derivatives(move |j, l| falling(e, j) * Complex64::new(l, 0.0).powc(e - j as f64))
}

/// (1+λ)^{iτ}, order 0.
pub fn imaginary_power(tau: f64) -> Symbol {
    let mut s = bessel(Complex64::new(0.0, -tau), 1.0);
    s.name = format!("imaginary-power:{tau}");
    s.order = 0.0;
    s.zero_mode = false;
    s
}

/// λ/(1+λ), order 0.
pub fn ratio() -> Symbol {
    Symbol::real("ratio", 0.0, |l| l / (1.0 + l))
        .with_derivatives(|j, l| {
            if j == 0 {
                Complex64::new(l / (1.0 + l), 0.0)
            } else {
                // λ/(1+λ) = 1 − (1+λ)^{-1}
                let sign = if j % 2 == 0 { -1.0 } else { 1.0 };
                let fact: f64 = (1..=j).map(|i| i as f64).product();
                Complex64::new(sign * fact * (1.0 + l).powi(-(j as i32) - 1), 0.0)
            }
        })
        .with_zero_mode(true)
}

/// e^{−λt}.
pub fn heat(t: f64) -> Symbol {
    Symbol::real(format!("heat:{t}"), f64::NEG_INFINITY, move |l| (-l * t).exp())
        .with_derivatives(move |j, l| Complex64::new((-t).powi(j as i32) * (-l * t).exp(), 0.0))
}

pub fn constant(c: f64) -> Symbol {
    Symbol::real(format!("const:{c}"), 0.0, move |_| c)
        .with_derivatives(move |j, _| Complex64::new(if j == 0 { c } else { 0.0 }, 0.0))
}

/// p(λ) = λ, order d+1.
pub fn laplacian(d: f64) -> Symbol {
    Symbol::real("lambda", d + 1.0, |l| l)
        .with_derivatives(|j, l| {
            Complex64::new(
                match j {
                    0 => l,
                    1 => 1.0,
                    _ => 0.0,
                },
                0.0,
            )
        })
        .with_zero_mode(true)
}

fn fmt_c(s: Complex64) -> String {
    if s.im == 0.0 {
        format!("{}", s.re)
    } else {
        format!("{}{:+}i", s.re, s.im)
    }
}

fn parse_complex(s: &str) -> Result<Complex64> {
    let t = s.trim();
    if let Some(body) = t.strip_suffix('i') {
        // forms "a+bi", "a-bi", "bi"
        if let Some(pos) = body.rfind(['+', '-']).filter(|&p| p > 0) {
            let re: f64 = body[..pos].parse().map_err(|_| Error::Parse(format!("bad complex '{s}'")))?;
            let im: f64 = body[pos..].parse().map_err(|_| Error::Parse(format!("bad complex '{s}'")))?;
            return Ok(Complex64::new(re, im));
        }
        let im: f64 = if body.is_empty() { 1.0 } else { body.parse().map_err(|_| Error::Parse(format!("bad complex '{s}'")))? };
        return Ok(Complex64::new(0.0, im));
    }
    Ok(Complex64::new(t.parse().map_err(|_| Error::Parse(format!("bad number '{s}'")))?, 0.0))
}

/// Symbol registry: `bessel:s`, `riesz:s`, `ratio`, `heat:t`,
/// `imaginary-power:tau`, `lambda`, `const:c`, or `expr:<expression>` with an
/// explicit order given separately.
pub fn parse_symbol(spec: &str, d: f64, expr_order: f64) -> Result<Symbol> {
    let (head, arg) = match spec.split_once(':') {
        Some((h, a)) => (h, Some(a)),
        None => (spec, None),
    };
    fn need<'a>(head: &str, a: Option<&'a str>) -> Result<&'a str> {
        a.ok_or_else(|| Error::Parse(format!("symbol '{head}' needs a parameter")))
    }
    match head {
        "bessel" => Ok(bessel(parse_complex(need(head, arg)?)?, d)),
        "riesz" => Ok(riesz(parse_complex(need(head, arg)?)?, d)),
        "ratio" => Ok(ratio()),
        "heat" => Ok(heat(parse_complex(need(head, arg)?)?.re)),
        "imaginary-power" => Ok(imaginary_power(parse_complex(need(head, arg)?)?.re)),
        "lambda" => Ok(laplacian(d)),
        "const" => Ok(constant(parse_complex(need(head, arg)?)?.re)),
        "expr" => {
            let src = need(head, arg)?;
            let e = expr::parse(src)?;
            let mut vars = Vec::new();
            e.variables(&mut vars);
            if vars.iter().any(|v| v != "lambda") {
                return invalid(format!("symbol expressions may only use λ, found {vars:?}"));
            }
            Ok(Symbol::new(format!("expr:{src}"), expr_order, move |l| {
                e.eval(&|_| Some(l)).unwrap_or(Complex64::new(f64::NAN, 0.0))
            }))
        }
        other => invalid(format!("unknown symbol '{other}'")),
    }
}

#[derive(Clone)]
pub struct Symbol2 {
    pub name: String,
    pub order: f64,
    eval: Eval2,
}

impl fmt::Debug for Symbol2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Symbol2").field("name", &self.name).field("order", &self.order).finish()
    }
}

impl Symbol2 {
    pub fn new(name: impl Into<String>, order: f64, f: impl Fn(f64, f64) -> Complex64 + Send + Sync + 'static) -> Self {
        Symbol2 { name: name.into(), order, eval: Arc::new(f) }
    }

    pub fn real(name: impl Into<String>, order: f64, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        Symbol2::new(name, order, move |a, b| Complex64::new(f(a, b), 0.0))
    }

    pub fn eval(&self, l1: f64, l2: f64) -> Complex64 {
        (self.eval)(l1, l2)
    }

    pub fn separable(f: &Symbol, g: &Symbol) -> Symbol2 {
        let (a, b) = (f.clone(), g.clone());
        Symbol2::new(format!("{}⊗{}", f.name, g.name), f.order + g.order, move |x, y| a.eval(x) * b.eval(y))
    }

    pub fn product(&self, other: &Symbol2) -> Symbol2 {
        let (a, b) = (self.eval.clone(), other.eval.clone());
        Symbol2::new(format!("({})*({})", self.name, other.name), self.order + other.order, move |x, y| a(x, y) * b(x, y))
    }

    /// λ^α ∂^α p = λ1^a λ2^b ∂1^a ∂2^b p for a, b ≤ kmax, indexed [a][b].
    pub fn scaled_derivatives(&self, l1: f64, l2: f64, kmax: usize) -> Vec<Vec<Complex64>> {
        let q = log_derivatives2(&|s1, s2| self.eval(s1.exp(), s2.exp()), l1.ln(), l2.ln(), kmax);
        let st = stirling1(kmax);
        let mut out = vec![vec![Complex64::new(0.0, 0.0); kmax + 1]; kmax + 1];
        for a in 0..=kmax {
            for b in 0..=kmax {
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..=a {
                    for j in 0..=b {
                        acc += st[a][i] * st[b][j] * q[i][j];
                    }
                }
                out[a][b] = acc;
            }
        }
        out
    }
}

/// Riesz transform symbols λ_i/(λ1+λ2).
pub fn riesz_i(i: usize) -> Symbol2 {
    Symbol2::real(format!("riesz-{i}"), 0.0, move |a, b| if i == 1 { a / (a + b) } else { b / (a + b) })
}

/// Two-variable registry: `riesz:1`, `riesz:2`, `sum` (λ1+λ2, order d+1),
/// `sep:<spec>,<spec>` for f(λ1)g(λ2), or `expr:<expression>` in l1, l2.
pub fn parse_symbol2(spec: &str, d: f64, expr_order: f64) -> Result<Symbol2> {
    let (head, arg) = match spec.split_once(':') {
        Some((h, a)) => (h, Some(a)),
        None => (spec, None),
    };
    let need = || arg.ok_or_else(|| Error::Parse(format!("symbol '{head}' needs a parameter")));
    match head {
        "riesz" => match need()?.trim() {
            "1" => Ok(riesz_i(1)),
            "2" => Ok(riesz_i(2)),
            other => invalid(format!("riesz index must be 1 or 2, got '{other}'")),
        },
        "sum" => Ok(Symbol2::real("l1+l2", d + 1.0, |a, b| a + b)),
        "sep" => {
            let (f, g) = need()?.split_once(',').ok_or_else(|| Error::Parse("sep needs two comma-separated symbols".into()))?;
            Ok(Symbol2::separable(&parse_symbol(f.trim(), d, expr_order)?, &parse_symbol(g.trim(), d, expr_order)?))
        }
        "expr" => {
            let src = need()?;
            let e = expr::parse(src)?;
            let mut vars = Vec::new();
            e.variables(&mut vars);
            if let Some(v) = vars.iter().find(|v| !matches!(v.as_str(), "l1" | "l2")) {
                return invalid(format!("two-variable expressions use l1 and l2, found '{v}'"));
            }
            Ok(Symbol2::new(format!("expr:{src}"), expr_order, move |a, b| {
                e.eval(&|v| Some(if v == "l1" { a } else { b })).unwrap_or(Complex64::new(f64::NAN, 0.0))
            }))
        }
        other => invalid(format!("unknown two-variable symbol '{other}'")),
    }
}

/// e^{-1/x} for x > 0, 0 otherwise.
pub fn glue(x: f64) -> f64 {
    if x > 0.0 {
        (-1.0 / x).exp()
    } else {
        0.0
    }
}

/// Smooth step: 0 for x ≤ 0, 1 for x ≥ 1.
pub fn smooth_step(x: f64) -> f64 {
    let a = glue(x);
    let b = glue(1.0 - x);
    if a + b == 0.0 {
        return if x >= 1.0 { 1.0 } else { 0.0 };
    }
    a / (a + b)
}

/// Littlewood–Paley window: η = 1 on [0,1], 0 on [2,∞), η(λ) = 1 − S(λ−1).
#[derive(Clone, Copy, Debug, Default)]
pub struct LpWindow;

impl LpWindow {
    pub fn eta(&self, l: f64) -> f64 {
        1.0 - smooth_step(l - 1.0)
    }

    /// δ(λ) = η(λ) − η(2λ), supported in (1/2, 2).
    pub fn delta(&self, l: f64) -> f64 {
        self.eta(l) - self.eta(2.0 * l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_two_variable() {
        assert_eq!(parse_symbol2("riesz:2", 1.5, 0.0).unwrap().eval(1.0, 3.0).re, 0.75);
        assert_eq!(parse_symbol2("expr:l1*l2+1", 1.5, 0.0).unwrap().eval(2.0, 3.0).re, 7.0);
        assert_eq!(parse_symbol2("sep:ratio,const:2", 1.5, 0.0).unwrap().eval(1.0, 9.0).re, 1.0);
        assert!(parse_symbol2("riesz:3", 1.5, 0.0).is_err());
        assert!(parse_symbol2("expr:lambda", 1.5, 0.0).is_err());
    }

    #[test]
    fn stirling_small() {
        let s = stirling1(4);
        assert_eq!(s[3][1], 2.0);
        assert_eq!(s[3][2], -3.0);
        assert_eq!(s[4][1], -6.0);
        assert_eq!(s[4][4], 1.0);
    }

    #[test]
    fn numeric_derivatives_match_closed_form() {
        let b = bessel(Complex64::new(0.7, 0.0), 2.0);
        let mut numeric = b.clone();
        numeric.deriv = None;
        for &l in &[0.3, 3.0, 40.0, 900.0] {
            let a = b.derivatives(l, 4);
            let n = numeric.derivatives(l, 4);
            for j in 0..=4 {
                let scale = a[j].norm() * l.powi(j as i32);
                let err = (a[j] - n[j]).norm() * l.powi(j as i32);
                assert!(err <= 1e-6 * scale.max(1e-3), "λ={l} j={j} {} {}", a[j], n[j]);
            }
        }
    }

    #[test]
    fn euler_derivatives_of_power() {
        // (λ d/dλ)^k λ^a = a^k λ^a
        let a = 0.6;
        let s = Symbol::real("pow", 0.0, move |l| l.powf(a));
        let l = 7.0;
        let d = s.rho_derivatives(1.0, l, 6);
        for (k, v) in d.iter().enumerate() {
            let want = a.powi(k as i32) * l.powf(a);
            assert!((v.re - want).abs() < 1e-6 * want.max(1.0), "k={k} {} vs {want}", v.re);
        }
    }

    #[test]
    fn rho_operator_against_closed_form() {
        // (λ^ρ d/dλ)^2 λ = λ^ρ d/dλ λ^ρ = ρ λ^{2ρ-1}
        let rho = 0.6;
        let s = laplacian(1.0);
        let l = 5.0;
        let d = s.rho_derivatives(rho, l, 2);
        assert!((d[1].re - l.powf(rho)).abs() < 1e-12);
        assert!((d[2].re - rho * l.powf(2.0 * rho - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn window_partition_of_unity() {
        let w = LpWindow;
        assert_eq!(w.eta(0.5), 1.0);
        assert_eq!(w.eta(2.5), 0.0);
        assert!((w.delta(2.0) + w.delta(1.0) - 1.0).abs() < 1e-15);
        for &l in &[0.01, 0.37, 1.0, 3.3, 1234.5] {
            let total: f64 = (-20..=20).map(|n| w.delta(l * 2f64.powi(-n))).sum();
            let nonzero = (-20..=20).filter(|n| w.delta(l * 2f64.powi(-n)) != 0.0).count();
            assert!((total - 1.0).abs() < 1e-14);
            assert!(nonzero <= 2);
        }
    }

    #[test]
    fn registry() {
        assert!(parse_symbol("bessel:0.5", 2.0, 0.0).is_ok());
        let r = parse_symbol("riesz:1", 2.0, 0.0).unwrap();
        assert!((r.eval(4.0).re - 0.25).abs() < 1e-15);
        let ip = parse_symbol("imaginary-power:5", 2.0, 0.0).unwrap();
        assert!((ip.eval(3.0).norm() - 1.0).abs() < 1e-14);
        let e = parse_symbol("expr:λ/(1+λ)", 2.0, 0.0).unwrap();
        assert!((e.eval(1.0).re - 0.5).abs() < 1e-15);
        assert!(parse_symbol("expr:x*λ", 2.0, 0.0).is_err());
        assert!(parse_symbol("nonsense", 2.0, 0.0).is_err());
        let c = parse_complex("0.5-2i").unwrap();
        assert_eq!((c.re, c.im), (0.5, -2.0));
    }

    #[test]
    fn product_leibniz() {
        let p = bessel(Complex64::new(0.5, 0.0), 1.0).product(&ratio());
        let mut q = p.clone();
        q.deriv = None;
        let l = 2.0;
        let a = p.derivatives(l, 3);
        let b = q.derivatives(l, 3);
        for j in 0..=3 {
            assert!((a[j] - b[j]).norm() < 1e-7, "{j}");
        }
    }
}

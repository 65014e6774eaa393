//! Tiny arithmetic grammar for user symbols: numbers, variables, + - * / ^,
//! unary minus, parentheses and the functions exp, log, sin, cos, sqrt.
//! `λ`, `l`, `lam` and `lambda` all name the spectral variable.

use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(String),
    Neg(Box<Expr>),
    Bin(char, Box<Expr>, Box<Expr>),
    Call(String, Box<Expr>),
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
}

fn lex(src: &str) -> Result<Vec<Tok>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            ' ' | '\t' => i += 1,
            '0'..='9' | '.' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                    i += 1;
                }
                if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                    let save = i;
                    i += 1;
                    if i < chars.len() && (chars[i] == '+' || chars[i] == '-') {
                        i += 1;
                    }
                    if i < chars.len() && chars[i].is_ascii_digit() {
                        while i < chars.len() && chars[i].is_ascii_digit() {
                            i += 1;
                        }
                    } else {
                        i = save;
                    }
                }
                let s: String = chars[start..i].iter().collect();
                out.push(Tok::Num(s.parse().map_err(|_| Error::Parse(format!("bad number '{s}'")))?));
            }
            '+' | '-' | '*' | '/' | '^' => {
                out.push(Tok::Op(c));
                i += 1;
            }
            '×' => {
                out.push(Tok::Op('*'));
                i += 1;
            }
            '÷' => {
                out.push(Tok::Op('/'));
                i += 1;
            }
            '−' => {
                out.push(Tok::Op('-'));
                i += 1;
            }
            '(' => {
                out.push(Tok::LParen);
                i += 1;
            }
            ')' => {
                out.push(Tok::RParen);
                i += 1;
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                out.push(Tok::Ident(chars[start..i].iter().collect()));
            }
            other => return Err(Error::Parse(format!("unexpected character '{other}'"))),
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn sum(&mut self) -> Result<Expr> {
        let mut lhs = self.product()?;
        while let Some(Tok::Op(op @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(self.product()?));
        }
        Ok(lhs)
    }

    fn product(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Op(op @ ('*' | '/'))) = self.peek().cloned() {
            self.pos += 1;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(self.unary()?));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        if let Some(Tok::Op('-')) = self.peek() {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if let Some(Tok::Op('+')) = self.peek() {
            self.pos += 1;
        }
        self.power()
    }

    // right associative; binds tighter than unary minus on its left operand
    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if let Some(Tok::Op('^')) = self.peek() {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Expr::Bin('^', Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.next() {
            Some(Tok::Num(v)) => Ok(Expr::Num(v)),
            Some(Tok::LParen) => {
                let e = self.sum()?;
                match self.next() {
                    Some(Tok::RParen) => Ok(e),
                    _ => Err(Error::Parse("missing ')'".into())),
                }
            }
            Some(Tok::Ident(name)) => {
                if let Some(Tok::LParen) = self.peek() {
                    if !matches!(name.as_str(), "exp" | "log" | "sin" | "cos" | "sqrt") {
                        return Err(Error::Parse(format!("unknown function '{name}'")));
                    }
                    self.pos += 1;
                    let arg = self.sum()?;
                    match self.next() {
                        Some(Tok::RParen) => Ok(Expr::Call(name, Box::new(arg))),
                        _ => Err(Error::Parse("missing ')' after function argument".into())),
                    }
                } else {
                    let name = match name.as_str() {
                        "λ" | "l" | "lam" | "lambda" => "lambda".to_string(),
                        _ => name,
                    };
                    Ok(Expr::Var(name))
                }
            }
            other => Err(Error::Parse(format!("unexpected token {other:?}"))),
        }
    }
}

pub fn parse(src: &str) -> Result<Expr> {
    let toks = lex(src)?;
    if toks.is_empty() {
        return Err(Error::Parse("empty expression".into()));
    }
    let mut p = Parser { toks, pos: 0 };
    let e = p.sum()?;
    if p.pos != p.toks.len() {
        return Err(Error::Parse(format!("trailing input at token {}", p.pos)));
    }
    Ok(e)
}

impl Expr {
    pub fn eval(&self, vars: &dyn Fn(&str) -> Option<f64>) -> Result<Complex64> {
        Ok(match self {
            Expr::Num(v) => Complex64::new(*v, 0.0),
            Expr::Var(name) => Complex64::new(vars(name).ok_or_else(|| Error::Parse(format!("unknown variable '{name}'")))?, 0.0),
            Expr::Neg(e) => -e.eval(vars)?,
            Expr::Bin(op, a, b) => {
                let (x, y) = (a.eval(vars)?, b.eval(vars)?);
                match op {
                    '+' => x + y,
                    '-' => x - y,
                    '*' => x * y,
                    '/' => x / y,
                    _ => {
                        if y.im == 0.0 && x.im == 0.0 && (x.re > 0.0 || y.re.fract() == 0.0) {
                            Complex64::new(x.re.powf(y.re), 0.0)
                        } else {
                            x.powc(y)
                        }
                    }
                }
            }
            Expr::Call(f, a) => {
                let x = a.eval(vars)?;
                match f.as_str() {
                    "exp" => x.exp(),
                    "log" => x.ln(),
                    "sin" => x.sin(),
                    "cos" => x.cos(),
                    _ => x.sqrt(),
                }
            }
        })
    }

    pub fn variables(&self, out: &mut Vec<String>) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(v) => {
                if !out.contains(v) {
                    out.push(v.clone());
                }
            }
            Expr::Neg(e) | Expr::Call(_, e) => e.variables(out),
            Expr::Bin(_, a, b) => {
                a.variables(out);
                b.variables(out);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(src: &str, lam: f64) -> Complex64 {
        parse(src).unwrap().eval(&|n| (n == "lambda").then_some(lam)).unwrap()
    }

    #[test]
    fn precedence_and_functions() {
        assert_eq!(at("1+2*3", 0.0).re, 7.0);
        assert_eq!(at("2^3^2", 0.0).re, 512.0);
        assert_eq!(at("-2^2", 0.0).re, -4.0);
        assert!((at("λ/(1+λ)", 3.0).re - 0.75).abs() < 1e-15);
        assert!((at("exp(log(l))", 2.5).re - 2.5).abs() < 1e-15);
        assert!((at("sin(lambda)+2", 1.0).re - (1f64.sin() + 2.0)).abs() < 1e-15);
        assert_eq!(at("6÷3×2", 0.0).re, 4.0);
        assert_eq!(at("1.5e2", 0.0).re, 150.0);
    }

    #[test]
    fn errors() {
        assert!(parse("1+").is_err());
        assert!(parse("foo(1)").is_err());
        assert!(parse("(1").is_err());
        assert!(parse("1 $ 2").is_err());
        assert!(parse("x+1").unwrap().eval(&|_| None).is_err());
    }
}

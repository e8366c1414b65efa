//! JSON file formats and the infix polynomial parser.
//!
//! Polynomials are stored as explicit term lists
//! `{"terms": [{"coeff": c, "exps": [e1, ..., en]}]}`. Every document
//! carries a `schema_version`; only version 1 exists.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::{PolyError, Polynomial};
use crate::sde::{SdeError, SdeSystem, SemialgebraicSet};
use crate::sos::{DriftCertificate, VariantCertificate};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Sde(#[from] SdeError),
}

fn schema(msg: impl Into<String>) -> IoError {
    IoError::Schema(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermJson {
    pub coeff: f64,
    pub exps: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolyJson {
    pub terms: Vec<TermJson>,
}

impl PolyJson {
    pub fn from_poly(p: &Polynomial) -> Self {
        PolyJson { terms: p.terms().map(|(m, c)| TermJson { coeff: c, exps: m.exps().to_vec() }).collect() }
    }

    pub fn to_poly(&self, n: usize, what: &str) -> Result<Polynomial, IoError> {
        for (k, t) in self.terms.iter().enumerate() {
            if t.exps.len() != n {
                return Err(schema(format!("{what}: term {k} has {} exponents, expected n = {n}", t.exps.len())));
            }
            if !t.coeff.is_finite() {
                return Err(schema(format!("{what}: term {k} has a non-finite coefficient")));
            }
        }
        Ok(Polynomial::from_terms(n, self.terms.iter().map(|t| (t.coeff, t.exps.clone())))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetJson {
    pub constraints: Vec<PolyJson>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpecFile {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub n: usize,
    pub m: usize,
    pub f: Vec<PolyJson>,
    pub g: Vec<Vec<PolyJson>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetJson>,
}

fn check_version(v: u32) -> Result<(), IoError> {
    if v != SCHEMA_VERSION {
        return Err(schema(format!("unsupported schema_version {v}, expected {SCHEMA_VERSION}")));
    }
    Ok(())
}

/// A validated system file.
#[derive(Debug, Clone)]
pub struct LoadedSystem {
    pub system: SdeSystem,
    pub target: Option<SemialgebraicSet>,
}

impl SystemSpecFile {
    pub fn parse(text: &str) -> Result<Self, IoError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_system(sys: &SdeSystem, target: Option<&SemialgebraicSet>) -> Self {
        SystemSpecFile {
            schema_version: SCHEMA_VERSION,
            description: None,
            n: sys.n(),
            m: sys.m(),
            f: sys.drift().iter().map(PolyJson::from_poly).collect(),
            g: sys.diffusion().iter().map(|row| row.iter().map(PolyJson::from_poly).collect()).collect(),
            target: target.map(|t| TargetJson { constraints: t.constraints().iter().map(PolyJson::from_poly).collect() }),
        }
    }

    /// Checks shapes and exponent lengths, then builds the system.
    pub fn load(&self) -> Result<LoadedSystem, IoError> {
        check_version(self.schema_version)?;
        if self.n == 0 || self.m == 0 {
            return Err(schema("n and m must be positive"));
        }
        if self.f.len() != self.n {
            return Err(schema(format!("f has {} entries, expected n = {}", self.f.len(), self.n)));
        }
        if self.g.len() != self.n || self.g.iter().any(|row| row.len() != self.m) {
            return Err(schema(format!("g must be {}x{}", self.n, self.m)));
        }
        let f = self.f.iter().enumerate().map(|(i, p)| p.to_poly(self.n, &format!("f[{i}]"))).collect::<Result<Vec<_>, _>>()?;
        let g = self
            .g
            .iter()
            .enumerate()
            .map(|(i, row)| row.iter().enumerate().map(|(j, p)| p.to_poly(self.n, &format!("g[{i}][{j}]"))).collect())
            .collect::<Result<Vec<Vec<_>>, _>>()?;
        let target = match &self.target {
            None => None,
            Some(t) => {
                if t.constraints.is_empty() {
                    return Err(schema("target needs at least one constraint"));
                }
                let cs = t
                    .constraints
                    .iter()
                    .enumerate()
                    .map(|(i, p)| p.to_poly(self.n, &format!("target.constraints[{i}]")))
                    .collect::<Result<Vec<_>, _>>()?;
                Some(SemialgebraicSet::new(cs)?)
            }
        };
        Ok(LoadedSystem { system: SdeSystem::new(f, g)?, target })
    }
}

pub fn load_system(text: &str) -> Result<LoadedSystem, IoError> {
    SystemSpecFile::parse(text)?.load()
}

/// Dense matrix as rows.
pub type Rows = Vec<Vec<f64>>;

/// `(A, B)` when `f = A x` and `g = B` is constant.
pub fn linear_parts(sys: &SdeSystem) -> Option<(Rows, Rows)> {
    let n = sys.n();
    let mut a = vec![vec![0.0; n]; n];
    for (i, fi) in sys.drift().iter().enumerate() {
        for (mono, c) in fi.terms() {
            if mono.degree() != 1 {
                return None;
            }
            let j = mono.exps().iter().position(|e| *e == 1)?;
            a[i][j] = c;
        }
    }
    let mut b = Vec::with_capacity(n);
    for row in sys.diffusion() {
        let mut out = Vec::with_capacity(row.len());
        for p in row {
            if p.degree() > 0 {
                return None;
            }
            out.push(p.coeff_of(&vec![0; n]));
        }
        b.push(out);
    }
    Some((a, b))
}

/// Dense row-major matrix: a JSON array of equal-length numeric rows.
pub fn parse_matrix(text: &str) -> Result<Vec<Vec<f64>>, IoError> {
    let rows: Vec<Vec<f64>> = serde_json::from_str(text)?;
    if rows.is_empty() || rows[0].is_empty() {
        return Err(schema("matrix must be non-empty"));
    }
    if rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(schema("matrix rows have different lengths"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(schema("matrix entries must be finite"));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CertificateBody {
    Drift {
        v: PolyJson,
        degree: u32,
        gamma0: f64,
        lambda0: f64,
        gamma1: f64,
        lambda1: f64,
        compact_radius: f64,
    },
    Variant {
        zeta: PolyJson,
        lambda: f64,
        mu: f64,
        alpha: Vec<f64>,
        epsilon: f64,
        #[serde(default)]
        s_multipliers: Vec<PolyJson>,
        #[serde(default)]
        trace: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateFile {
    pub schema_version: u32,
    pub n: usize,
    #[serde(flatten)]
    pub body: CertificateBody,
}

pub enum Certificate {
    Drift(DriftCertificate),
    Variant(VariantCertificate),
}

impl CertificateFile {
    pub fn from_drift(c: &DriftCertificate) -> Self {
        CertificateFile {
            schema_version: SCHEMA_VERSION,
            n: c.v.dim(),
            body: CertificateBody::Drift {
                v: PolyJson::from_poly(&c.v),
                degree: c.degree,
                gamma0: c.gamma0,
                lambda0: c.lambda0,
                gamma1: c.gamma1,
                lambda1: c.lambda1,
                compact_radius: c.compact_radius,
            },
        }
    }

    pub fn from_variant(c: &VariantCertificate) -> Self {
        CertificateFile {
            schema_version: SCHEMA_VERSION,
            n: c.zeta.dim(),
            body: CertificateBody::Variant {
                zeta: PolyJson::from_poly(&c.zeta),
                lambda: c.lambda,
                mu: c.mu,
                alpha: c.alpha.clone(),
                epsilon: c.epsilon,
                s_multipliers: c.s_multipliers.iter().map(PolyJson::from_poly).collect(),
                trace: c.trace.clone(),
            },
        }
    }

    pub fn parse(text: &str) -> Result<Self, IoError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Gram matrices are not stored, so loaded certificates carry none.
    pub fn load(&self) -> Result<Certificate, IoError> {
        check_version(self.schema_version)?;
        let n = self.n;
        Ok(match &self.body {
            CertificateBody::Drift { v, degree, gamma0, lambda0, gamma1, lambda1, compact_radius } => {
                Certificate::Drift(DriftCertificate {
                    v: v.to_poly(n, "v")?,
                    degree: *degree,
                    gamma0: *gamma0,
                    lambda0: *lambda0,
                    gamma1: *gamma1,
                    lambda1: *lambda1,
                    compact_radius: *compact_radius,
                    grams: Vec::new(),
                })
            }
            CertificateBody::Variant { zeta, lambda, mu, alpha, epsilon, s_multipliers, trace } => {
                if !(*lambda > 0.0) {
                    return Err(schema(format!("lambda = {lambda} must be positive")));
                }
                Certificate::Variant(VariantCertificate {
                    zeta: zeta.to_poly(n, "zeta")?,
                    lambda: *lambda,
                    mu: *mu,
                    alpha: alpha.clone(),
                    s_multipliers: s_multipliers
                        .iter()
                        .enumerate()
                        .map(|(i, p)| p.to_poly(n, &format!("s_multipliers[{i}]")))
                        .collect::<Result<_, _>>()?,
                    lambda_multiplier: Polynomial::zero(n),
                    epsilon: *epsilon,
                    grams: Vec::new(),
                    trace: trace.clone(),
                })
            }
        })
    }
}

/// Pretty JSON with a trailing newline, for byte-stable output files.
pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Var(usize),
    Op(char),
}

fn tokenize(s: &str, n: usize) -> Result<Vec<(usize, Tok)>, IoError> {
    let b = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let c = b[i] as char;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < b.len() && (b[i].is_ascii_digit() || b[i] == b'.') {
                i += 1;
            }
            // exponent part, only if digits follow
            if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
                let mut j = i + 1;
                if j < b.len() && (b[j] == b'+' || b[j] == b'-') {
                    j += 1;
                }
                if j < b.len() && b[j].is_ascii_digit() {
                    while j < b.len() && b[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let v: f64 = s[start..i].parse().map_err(|_| IoError::Parse { pos: start, msg: format!("bad number {:?}", &s[start..i]) })?;
            out.push((start, Tok::Num(v)));
        } else if c == 'x' {
            let start = i;
            i += 1;
            let ds = i;
            while i < b.len() && b[i].is_ascii_digit() {
                i += 1;
            }
            let k: usize = s[ds..i].parse().map_err(|_| IoError::Parse { pos: start, msg: "expected a variable index after 'x'".into() })?;
            if k == 0 || k > n {
                return Err(IoError::Parse { pos: start, msg: format!("variable x{k} outside x1..x{n}") });
            }
            out.push((start, Tok::Var(k - 1)));
        } else if "+-*^()".contains(c) {
            out.push((i, Tok::Op(c)));
            i += 1;
        } else {
            return Err(IoError::Parse { pos: i, msg: format!("unexpected character {c:?}") });
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    n: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.1)
    }

    fn here(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |t| t.0)
    }

    fn err<T>(&self, msg: &str) -> Result<T, IoError> {
        Err(IoError::Parse { pos: self.here(), msg: msg.into() })
    }

    fn expr(&mut self) -> Result<Polynomial, IoError> {
        let mut acc = self.term()?;
        while let Some(Tok::Op(c @ ('+' | '-'))) = self.peek() {
            let c = *c;
            self.pos += 1;
            let rhs = self.term()?;
            acc = if c == '+' { acc.add(&rhs)? } else { acc.sub(&rhs)? };
        }
        Ok(acc)
    }

    fn term(&mut self) -> Result<Polynomial, IoError> {
        let mut acc = self.unary()?;
        loop {
            match self.peek() {
                Some(Tok::Op('*')) => {
                    self.pos += 1;
                    acc = acc.mul(&self.unary()?)?;
                }
                // juxtaposition such as `2x1` or `3(x1 + 1)`
                Some(Tok::Num(_) | Tok::Var(_) | Tok::Op('(')) => acc = acc.mul(&self.power()?)?,
                _ => return Ok(acc),
            }
        }
    }

    fn unary(&mut self) -> Result<Polynomial, IoError> {
        match self.peek() {
            Some(Tok::Op('-')) => {
                self.pos += 1;
                Ok(self.unary()?.neg())
            }
            Some(Tok::Op('+')) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Polynomial, IoError> {
        let base = self.atom()?;
        if let Some(Tok::Op('^')) = self.peek() {
            self.pos += 1;
            match self.peek() {
                Some(Tok::Num(v)) if v.fract() == 0.0 && *v >= 0.0 && *v <= 1000.0 => {
                    let k = *v as u32;
                    self.pos += 1;
                    return Ok(base.pow(k));
                }
                _ => return self.err("exponent must be a non-negative integer"),
            }
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Polynomial, IoError> {
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Polynomial::constant(self.n, v))
            }
            Some(Tok::Var(i)) => {
                self.pos += 1;
                Ok(Polynomial::var(self.n, i)?)
            }
            Some(Tok::Op('(')) => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(&Tok::Op(')')) {
                    return self.err("expected ')'");
                }
                self.pos += 1;
                Ok(e)
            }
            _ => self.err("expected a number, variable or '('"),
        }
    }
}

/// Parses infix text over `x1..xn`, e.g. `"-4*x1^3 + 4 x1"`.
pub fn parse_poly(text: &str, n: usize) -> Result<Polynomial, IoError> {
    if n == 0 {
        return Err(schema("n must be positive"));
    }
    let mut p = Parser { toks: tokenize(text, n)?, pos: 0, n, end: text.len() };
    let out = p.expr()?;
    if p.pos != p.toks.len() {
        return p.err("unexpected trailing input");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const DW: &str = r#"{"schema_version": 1, "n": 1, "m": 1,
        "f": [{"terms": [{"coeff": -4, "exps": [3]}, {"coeff": 4, "exps": [1]}]}],
        "g": [[{"terms": [{"coeff": 0.6324555320336759, "exps": [0]}]}]],
        "target": {"constraints": [{"terms": [{"coeff": 1, "exps": [2]}, {"coeff": -2, "exps": [1]}, {"coeff": 0.84, "exps": [0]}]}]}}"#;

    #[test]
    fn loads_and_round_trips() {
        let loaded = load_system(DW).unwrap();
        assert_eq!(loaded.system.n(), 1);
        assert!(loaded.target.as_ref().unwrap().contains(&[1.0]));
        let back = SystemSpecFile::from_system(&loaded.system, loaded.target.as_ref());
        let again = back.load().unwrap();
        assert_eq!(again.system.drift(), loaded.system.drift());
    }

    #[test]
    fn rejects_short_exponent_vectors() {
        let bad = DW.replace(r#""exps": [3]"#, r#""exps": [3, 0]"#);
        assert!(matches!(load_system(&bad), Err(IoError::Schema(_))));
    }

    #[test]
    fn rejects_bad_shapes_and_versions() {
        assert!(matches!(load_system(&DW.replace(r#""m": 1"#, r#""m": 2"#)), Err(IoError::Schema(_))));
        assert!(matches!(load_system(&DW.replace(r#""schema_version": 1"#, r#""schema_version": 9"#)), Err(IoError::Schema(_))));
        assert!(matches!(load_system("{not json"), Err(IoError::Json(_))));
        assert!(matches!(load_system(&DW.replace(r#""n": 1"#, r#""n": 1, "extra": 0"#)), Err(IoError::Json(_))));
    }

    #[test]
    fn parses_infix() {
        let p = parse_poly("-4*x1^3 + 4 x1", 1).unwrap();
        let q = Polynomial::from_terms(1, [(-4.0, vec![3]), (4.0, vec![1])]).unwrap();
        assert_eq!(p, q);
        let r = parse_poly("(x1 - 1)^2*(x1 + 1)^2", 1).unwrap();
        assert_eq!(r, parse_poly("x1^4 - 2x1^2 + 1", 1).unwrap());
        let s = parse_poly("x1^4 + x2^4 - 2*x1^2 - 4*x2^2 + x1*x2 + 0.3*x1 + 0.1*x2", 2).unwrap();
        assert_eq!(s.coeff_of(&[1, 1]), 1.0);
        assert_eq!(s.coeff_of(&[1, 0]), 0.3);
        assert_eq!(parse_poly("-x1^2", 1).unwrap().coeff_of(&[2]), -1.0);
        assert_eq!(parse_poly("1e-3 x1", 1).unwrap().coeff_of(&[1]), 1e-3);
    }

    #[test]
    fn parse_errors_have_positions() {
        assert!(matches!(parse_poly("x3", 2), Err(IoError::Parse { pos: 0, .. })));
        assert!(matches!(parse_poly("x1 + ", 1), Err(IoError::Parse { pos: 5, .. })));
        assert!(matches!(parse_poly("x1^1.5", 1), Err(IoError::Parse { .. })));
        assert!(matches!(parse_poly("(x1", 1), Err(IoError::Parse { .. })));
        assert!(matches!(parse_poly("x1 $", 1), Err(IoError::Parse { pos: 3, .. })));
    }

    #[test]
    fn linear_parts_detects_linear_systems() {
        let sys = SdeSystem::linear(&[vec![0.0, 1.0], vec![0.0, 0.0]], &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let (a, b) = linear_parts(&sys).unwrap();
        assert_eq!(a, vec![vec![0.0, 1.0], vec![0.0, 0.0]]);
        assert_eq!(b, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(linear_parts(&load_system(DW).unwrap().system).is_none());
    }

    #[test]
    fn certificate_round_trip() {
        let c = crate::verify::doublewell_certificate(0.2, 16.0).unwrap();
        let text = to_json_pretty(&CertificateFile::from_variant(&c));
        assert!(text.contains("\"kind\": \"variant\""));
        match CertificateFile::parse(&text).unwrap().load().unwrap() {
            Certificate::Variant(v) => {
                assert_eq!(v.zeta, c.zeta);
                assert_eq!(v.mu, c.mu);
            }
            Certificate::Drift(_) => panic!("wrong kind"),
        }
    }

    #[test]
    fn matrices() {
        assert_eq!(parse_matrix("[[1, 2], [3, 4]]").unwrap()[1][0], 3.0);
        assert!(parse_matrix("[[1, 2], [3]]").is_err());
        assert!(parse_matrix("[]").is_err());
    }
}

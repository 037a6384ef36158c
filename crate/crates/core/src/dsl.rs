//! Proxy formulas over captured layer statistics.
//!
//! A formula is a nested call expression over the twenty statistic
//! identifiers, e.g. `kl_div(l1_norm(pass_fwd_output), pass_perturbation_wt)`.
//! Redundant parentheses and arbitrary whitespace are accepted.
//!
//! Evaluation runs the expression once per layer, reduces each layer result
//! to the mean of its elements and sums over layers. A non-finite total is
//! reported as 0.
//!
//! Binary operators on operands of different shapes flatten both and
//! truncate to the shorter length, so evaluation never fails on shapes.

use std::collections::BTreeMap;
use std::fmt;

use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::config::{self, ConfigError};
use crate::linalg;
use crate::probe::{LayerStats, ProbeRecord, Stat};
use crate::seed;
use crate::tensor::{gemm, Tensor};

const EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Abs,
    Log,
    Relu,
    Sigmoid,
    Heaviside,
    LessThanZero,
    Power,
    ElementWiseInvert,
    Normalize,
    Softmax,
    OnesLike,
    GaussianInit,
    Sum,
    Numel,
    L1Norm,
    FrobeniusNorm,
    NormalizedSum,
    Determinant,
    Transpose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Sum,
    Subtract,
    ElementWiseProduct,
    Min,
    Max,
    GreaterThan,
    LessThan,
    Equal,
    CosineSimilarity,
    KlDiv,
    MatMul,
}

impl UnaryOp {
    pub const ALL: [UnaryOp; 19] = [
        UnaryOp::Abs,
        UnaryOp::Log,
        UnaryOp::Relu,
        UnaryOp::Sigmoid,
        UnaryOp::Heaviside,
        UnaryOp::LessThanZero,
        UnaryOp::Power,
        UnaryOp::ElementWiseInvert,
        UnaryOp::Normalize,
        UnaryOp::Softmax,
        UnaryOp::OnesLike,
        UnaryOp::GaussianInit,
        UnaryOp::Sum,
        UnaryOp::Numel,
        UnaryOp::L1Norm,
        UnaryOp::FrobeniusNorm,
        UnaryOp::NormalizedSum,
        UnaryOp::Determinant,
        UnaryOp::Transpose,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Abs => "abs",
            UnaryOp::Log => "log",
            UnaryOp::Relu => "relu",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Heaviside => "heaviside",
            UnaryOp::LessThanZero => "less_than_zero",
            UnaryOp::Power => "power",
            UnaryOp::ElementWiseInvert => "element_wise_invert",
            UnaryOp::Normalize => "normalize",
            UnaryOp::Softmax => "softmax",
            UnaryOp::OnesLike => "ones_like",
            UnaryOp::GaussianInit => "gaussian_init",
            UnaryOp::Sum => "sum",
            UnaryOp::Numel => "numel",
            UnaryOp::L1Norm => "l1_norm",
            UnaryOp::FrobeniusNorm => "frobenius_norm",
            UnaryOp::NormalizedSum => "normalized_sum",
            UnaryOp::Determinant => "determinant",
            UnaryOp::Transpose => "transpose",
        }
    }
}

impl BinaryOp {
    pub const ALL: [BinaryOp; 11] = [
        BinaryOp::Sum,
        BinaryOp::Subtract,
        BinaryOp::ElementWiseProduct,
        BinaryOp::Min,
        BinaryOp::Max,
        BinaryOp::GreaterThan,
        BinaryOp::LessThan,
        BinaryOp::Equal,
        BinaryOp::CosineSimilarity,
        BinaryOp::KlDiv,
        BinaryOp::MatMul,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Sum => "sum",
            BinaryOp::Subtract => "subtract",
            BinaryOp::ElementWiseProduct => "element_wise_product",
            BinaryOp::Min => "min",
            BinaryOp::Max => "max",
            BinaryOp::GreaterThan => "greater_than",
            BinaryOp::LessThan => "less_than",
            BinaryOp::Equal => "equal",
            BinaryOp::CosineSimilarity => "cosine_similarity",
            BinaryOp::KlDiv => "kl_div",
            BinaryOp::MatMul => "mat_mul",
        }
    }
}

/// Formula syntax tree.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Expr {
    Stat(Stat),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn unary(op: UnaryOp, child: Expr) -> Self {
        Expr::Unary(op, Box::new(child))
    }

    pub fn binary(op: BinaryOp, left: Expr, right: Expr) -> Self {
        Expr::Binary(op, Box::new(left), Box::new(right))
    }

    pub fn node_count(&self) -> usize {
        match self {
            Expr::Stat(_) => 1,
            Expr::Unary(_, c) => 1 + c.node_count(),
            Expr::Binary(_, l, r) => 1 + l.node_count() + r.node_count(),
        }
    }

    /// Distinct statistics referenced by the formula.
    pub fn stats(&self) -> Vec<Stat> {
        fn walk(e: &Expr, out: &mut Vec<Stat>) {
            match e {
                Expr::Stat(s) => {
                    if !out.contains(s) {
                        out.push(*s)
                    }
                }
                Expr::Unary(_, c) => walk(c, out),
                Expr::Binary(_, l, r) => {
                    walk(l, out);
                    walk(r, out);
                }
            }
        }
        let mut out = Vec::new();
        walk(self, &mut out);
        out.sort();
        out
    }
}

/// Canonical text: no redundant parentheses, `", "` between arguments.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Stat(s) => write!(f, "{s}"),
            Expr::Unary(op, c) => write!(f, "{}({c})", op.name()),
            Expr::Binary(op, l, r) => write!(f, "{}({l}, {r})", op.name()),
        }
    }
}

pub fn pretty_print(expr: &Expr) -> String {
    expr.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("empty formula")]
    Empty,
    #[error("unknown operator `{name}` at offset {offset}")]
    UnknownOperator { name: String, offset: usize },
    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("`{name}` at offset {offset} takes {expected} argument(s), got {got}")]
    Arity {
        name: String,
        offset: usize,
        expected: &'static str,
        got: usize,
    },
    #[error("unbalanced parentheses at offset {offset}")]
    Unbalanced { offset: usize },
    #[error("unexpected {found} at offset {offset}")]
    Unexpected { found: String, offset: usize },
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Ident(String),
    Open,
    Close,
    Comma,
}

fn tokenize(text: &str) -> Result<Vec<(Token, usize)>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => i += 1,
            b'(' => {
                out.push((Token::Open, i));
                i += 1;
            }
            b')' => {
                out.push((Token::Close, i));
                i += 1;
            }
            b',' => {
                out.push((Token::Comma, i));
                i += 1;
            }
            c if c.is_ascii_alphanumeric() || c == b'_' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((Token::Ident(text[start..i].to_string()), start));
            }
            _ => {
                let ch = text[i..].chars().next().unwrap_or('?');
                return Err(ParseError::Unexpected {
                    found: format!("character `{ch}`"),
                    offset: i,
                });
            }
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(Token, usize)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(t, _)| t)
    }

    fn offset(&self) -> usize {
        self.tokens.get(self.pos).map_or(self.end, |(_, o)| *o)
    }

    fn describe(&self) -> String {
        match self.peek() {
            None => "end of input".into(),
            Some(Token::Ident(s)) => format!("identifier `{s}`"),
            Some(Token::Open) => "`(`".into(),
            Some(Token::Close) => "`)`".into(),
            Some(Token::Comma) => "`,`".into(),
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let offset = self.offset();
        match self.peek().cloned() {
            Some(Token::Open) => {
                self.pos += 1;
                let inner = self.expr()?;
                match self.peek() {
                    Some(Token::Close) => {
                        self.pos += 1;
                        Ok(inner)
                    }
                    None => Err(ParseError::Unbalanced { offset }),
                    _ => Err(ParseError::Unexpected {
                        found: self.describe(),
                        offset: self.offset(),
                    }),
                }
            }
            Some(Token::Ident(name)) => {
                self.pos += 1;
                if self.peek() == Some(&Token::Open) {
                    self.call(name, offset)
                } else {
                    name.parse::<Stat>()
                        .map(Expr::Stat)
                        .map_err(|_| ParseError::UnknownIdentifier { name, offset })
                }
            }
            Some(Token::Close) | Some(Token::Comma) | None => Err(ParseError::Unexpected {
                found: self.describe(),
                offset,
            }),
        }
    }

    fn call(&mut self, name: String, offset: usize) -> Result<Expr, ParseError> {
        let unary = UnaryOp::ALL.into_iter().find(|op| op.name() == name);
        let binary = BinaryOp::ALL.into_iter().find(|op| op.name() == name);
        if unary.is_none() && binary.is_none() {
            return Err(ParseError::UnknownOperator { name, offset });
        }
        let open = self.offset();
        self.pos += 1; // `(`
        let mut args = vec![self.expr()?];
        loop {
            match self.peek() {
                Some(Token::Comma) => {
                    self.pos += 1;
                    args.push(self.expr()?);
                }
                Some(Token::Close) => {
                    self.pos += 1;
                    break;
                }
                None => return Err(ParseError::Unbalanced { offset: open }),
                _ => {
                    return Err(ParseError::Unexpected {
                        found: self.describe(),
                        offset: self.offset(),
                    })
                }
            }
        }
        let expected = match (unary, binary) {
            (Some(_), Some(_)) => "1 or 2",
            (Some(_), None) => "1",
            _ => "2",
        };
        let got = args.len();
        let mut args = args.into_iter();
        match (got, unary, binary) {
            (1, Some(op), _) => Ok(Expr::unary(op, args.next().unwrap())),
            (2, _, Some(op)) => Ok(Expr::binary(op, args.next().unwrap(), args.next().unwrap())),
            _ => Err(ParseError::Arity {
                name,
                offset,
                expected,
                got,
            }),
        }
    }
}

pub fn parse(text: &str) -> Result<Expr, ParseError> {
    let tokens = tokenize(text)?;
    if tokens.is_empty() {
        return Err(ParseError::Empty);
    }
    let mut p = Parser {
        tokens,
        pos: 0,
        end: text.len(),
    };
    let expr = p.expr()?;
    if p.pos < p.tokens.len() {
        let offset = p.offset();
        return Err(match p.peek() {
            Some(Token::Close) => ParseError::Unbalanced { offset },
            _ => ParseError::Unexpected {
                found: p.describe(),
                offset,
            },
        });
    }
    Ok(expr)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("statistic `{stat}` missing for layer {layer} ({name})")]
    MissingStat { stat: String, layer: usize, name: String },
}

fn flat(t: &Tensor) -> Tensor {
    Tensor::vector(t.data().to_vec())
}

/// Operand pair after the shape rule: untouched when shapes agree, otherwise
/// both flattened and truncated to the shorter length.
fn align(a: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
    if a.shape() == b.shape() {
        return (a.clone(), b.clone());
    }
    let n = a.numel().min(b.numel());
    (
        Tensor::vector(a.data()[..n].to_vec()),
        Tensor::vector(b.data()[..n].to_vec()),
    )
}

fn softmax_flat(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn as_matrix(t: &Tensor) -> (usize, usize, &[f64]) {
    let (r, c) = t.flatten2d();
    (r, c, t.data())
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn eval_unary(op: UnaryOp, x: Tensor, gaussian_seed: u64) -> Tensor {
    match op {
        UnaryOp::Abs => x.map(f64::abs),
        UnaryOp::Log => x.map(|v| (v.abs() + EPS).ln()),
        UnaryOp::Relu => x.map(|v| v.max(0.0)),
        UnaryOp::Sigmoid => x.map(|v| 1.0 / (1.0 + (-v).exp())),
        UnaryOp::Heaviside => x.map(|v| indicator(v > 0.0)),
        UnaryOp::LessThanZero => x.map(|v| indicator(v < 0.0)),
        UnaryOp::Power => x.map(|v| v * v),
        UnaryOp::ElementWiseInvert => x.map(|v| 1.0 / (v + if v >= 0.0 { EPS } else { -EPS })),
        UnaryOp::Normalize => {
            let n = x.numel() as f64;
            let mean = x.mean();
            let std = (x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            x.map(|v| (v - mean) / (std + EPS))
        }
        UnaryOp::Softmax => {
            let data = softmax_flat(x.data());
            Tensor::new(x.shape().to_vec(), data).expect("same shape")
        }
        UnaryOp::OnesLike => Tensor::ones(x.shape()),
        UnaryOp::GaussianInit => {
            let mut rng = seed::rng(gaussian_seed, 0x6a55);
            x.map(|_| StandardNormal.sample(&mut rng))
        }
        UnaryOp::Sum => Tensor::scalar(x.sum()),
        UnaryOp::Numel => Tensor::scalar(x.numel() as f64),
        UnaryOp::L1Norm => Tensor::scalar(x.data().iter().map(|v| v.abs()).sum()),
        UnaryOp::FrobeniusNorm => Tensor::scalar(x.l2_norm()),
        UnaryOp::NormalizedSum => Tensor::scalar(x.mean()),
        UnaryOp::Determinant => {
            let (r, c, data) = as_matrix(&x);
            Tensor::scalar(linalg::log_abs_det(&linalg::gram(data, r, c), r))
        }
        UnaryOp::Transpose => {
            let (r, c, data) = as_matrix(&x);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = data[i * c + j];
                }
            }
            Tensor::new(vec![c, r], out).expect("same size")
        }
    }
}

fn eval_binary(op: BinaryOp, a: Tensor, b: Tensor) -> Tensor {
    let elementwise = |f: fn(f64, f64) -> f64| {
        let (a, b) = align(&a, &b);
        a.zip_map(&b, "dsl", f).expect("aligned")
    };
    match op {
        BinaryOp::Sum => elementwise(|x, y| x + y),
        BinaryOp::Subtract => elementwise(|x, y| x - y),
        BinaryOp::ElementWiseProduct => elementwise(|x, y| x * y),
        BinaryOp::Min => elementwise(f64::min),
        BinaryOp::Max => elementwise(f64::max),
        BinaryOp::GreaterThan => elementwise(|x, y| indicator(x > y)),
        BinaryOp::LessThan => elementwise(|x, y| indicator(x < y)),
        BinaryOp::Equal => elementwise(|x, y| indicator(x == y)),
        BinaryOp::CosineSimilarity => {
            let (a, b) = align(&flat(&a), &flat(&b));
            let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
            let denom = a.l2_norm() * b.l2_norm();
            Tensor::scalar(if denom > 0.0 { dot / denom } else { 0.0 })
        }
        BinaryOp::KlDiv => {
            let (a, b) = align(&flat(&a), &flat(&b));
            let p = softmax_flat(a.data());
            let q = softmax_flat(b.data());
            let kl = p
                .iter()
                .zip(&q)
                .map(|(&p, &q)| {
                    let (p, q) = (p.max(EPS), q.max(EPS));
                    p * (p / q).ln()
                })
                .sum();
            Tensor::scalar(kl)
        }
        BinaryOp::MatMul => {
            let (m, k1, da) = as_matrix(&a);
            let (k2, n, db) = as_matrix(&b);
            let k = k1.min(k2);
            let lhs: Vec<f64> = (0..m).flat_map(|i| da[i * k1..i * k1 + k].iter().copied()).collect();
            let rhs = &db[..k * n];
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, &lhs, false, rhs, false, &mut out, false);
            Tensor::new(vec![m, n], out).expect("sized")
        }
    }
}

struct EvalCtx<'a> {
    layer: &'a LayerStats,
    layer_index: usize,
    record_seed: u64,
    next_node: usize,
}

impl EvalCtx<'_> {
    fn eval(&mut self, expr: &Expr) -> Result<Tensor, EvalError> {
        let node = self.next_node;
        self.next_node += 1;
        match expr {
            Expr::Stat(s) => self.layer.get(*s).cloned().ok_or_else(|| EvalError::MissingStat {
                stat: s.to_string(),
                layer: self.layer_index,
                name: self.layer.name.clone(),
            }),
            Expr::Unary(op, c) => {
                let x = self.eval(c)?;
                Ok(eval_unary(*op, x, seed::derive(self.record_seed, node as u64)))
            }
            Expr::Binary(op, l, r) => {
                let a = self.eval(l)?;
                let b = self.eval(r)?;
                Ok(eval_binary(*op, a, b))
            }
        }
    }
}

/// Evaluate `expr` on one layer, returning the un-reduced tensor.
pub fn eval_layer(expr: &Expr, layer: &LayerStats, layer_index: usize, record_seed: u64) -> Result<Tensor, EvalError> {
    EvalCtx {
        layer,
        layer_index,
        record_seed,
        next_node: 0,
    }
    .eval(expr)
}

/// Per-layer evaluation, mean reduction, sum over layers; non-finite → 0.
pub fn eval_formula(expr: &Expr, record: &ProbeRecord) -> Result<f64, EvalError> {
    let mut total = 0.0;
    for (i, layer) in record.layers.iter().enumerate() {
        total += eval_layer(expr, layer, i, record.seed)?.mean();
    }
    Ok(if total.is_finite() { total } else { 0.0 })
}

pub const DEFAULT_REGISTRY: &str = include_str!("../registry/default.reg");

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("line {line}: formula `{id}`: {source}")]
    Formula {
        id: String,
        line: usize,
        #[source]
        source: ParseError,
    },
    #[error("formula `{0}` is not registered")]
    Missing(String),
}

/// Named formulas, in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FormulaRegistry {
    formulas: BTreeMap<String, Expr>,
    order: Vec<String>,
}

impl FormulaRegistry {
    pub fn parse(text: &str) -> Result<Self, RegistryError> {
        let mut reg = Self::default();
        for entry in config::parse_entries(text)? {
            let expr = parse(&entry.value).map_err(|source| RegistryError::Formula {
                id: entry.key.clone(),
                line: entry.line,
                source,
            })?;
            reg.insert(entry.key, expr);
        }
        Ok(reg)
    }

    /// The shipped registry: `gm_a` .. `gm_j` and a default `eznas` slot.
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_REGISTRY).expect("built-in registry parses")
    }

    pub fn insert(&mut self, id: impl Into<String>, expr: Expr) {
        let id = id.into();
        if self.formulas.insert(id.clone(), expr).is_none() {
            self.order.push(id);
        }
    }

    pub fn get(&self, id: &str) -> Result<&Expr, RegistryError> {
        self.formulas
            .get(id)
            .ok_or_else(|| RegistryError::Missing(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    /// Textual form accepted by [`parse`](Self::parse).
    pub fn to_text(&self) -> String {
        self.order
            .iter()
            .map(|id| format!("{id} = {}\n", self.formulas[id]))
            .collect()
    }
}

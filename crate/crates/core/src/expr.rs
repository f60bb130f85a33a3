//! Arithmetic expressions over chart coordinates.
//!
//! Grammar (whitespace insensitive):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := ('-' | '+') unary | power
//! power   := primary ('^' unary)?
//! primary := number | variable | 'pi' | func '(' args ')' | '(' expr ')'
//! func    := sin | cos | exp | sqrt | ln | atan2
//! ```
//!
//! Variables are `q1..qn`, `p1..pn` and the aliases `z1..z2n`, with
//! `z = (q1, …, qn, p1, …, pn)`. For `n = 1` the bare names `q` and `p` are
//! accepted too. `^` is right associative and binds tighter than unary minus,
//! so `-q1^2` is `-(q1^2)`.
//!
//! Expressions are closed under exact differentiation: [`Expression::derivative`]
//! returns another expression, lightly simplified (constant folding and the
//! `0`/`1` identities), so `d/dq1 (1+q1^2)` prints as `2*q1`.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Evaluation failures. These are the only ways a parsed expression can fail.
#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("square root of a negative number")]
    SqrtOfNegative,
    #[error("logarithm of a non-positive number")]
    LogOfNonPositive,
    #[error("non-integer power of a negative number")]
    NegativeBase,
    #[error("non-finite result")]
    NonFinite,
}

/// Syntax error with a 0-based character offset into the parsed text.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("column {}: expected {}, found {found}", .offset + 1, .expected.join(" or "))]
pub struct ParseError {
    pub offset: usize,
    pub expected: Vec<&'static str>,
    pub found: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func {
    Sin,
    Cos,
    Exp,
    Sqrt,
    Ln,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Sqrt => "sqrt",
            Func::Ln => "ln",
        }
    }
}

type Link = Arc<Node>;

fn has_variables(node: &Node) -> bool {
    match node {
        Node::Num(_) => false,
        Node::Var(_) => true,
        Node::Neg(a) | Node::Call(_, a) => has_variables(a),
        Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) | Node::Pow(a, b) | Node::Atan2(a, b) => {
            has_variables(a) || has_variables(b)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(usize),
    Neg(Link),
    Add(Link, Link),
    Sub(Link, Link),
    Mul(Link, Link),
    Div(Link, Link),
    Pow(Link, Link),
    Call(Func, Link),
    Atan2(Link, Link),
}

/// A parsed expression in `2n` variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    root: Link,
    n: usize,
}

impl Expression {
    /// Parses `text` as an expression in the coordinates of a `2n`-dimensional chart.
    pub fn parse(text: &str, n: usize) -> Result<Expression, ParseError> {
        let tokens = tokenize(text)?;
        let mut parser = Parser {
            tokens,
            pos: 0,
            n,
            end: text.chars().count(),
            open: Vec::new(),
        };
        let root = parser.expr()?;
        if let Some(tok) = parser.peek() {
            return Err(ParseError {
                offset: tok.offset,
                expected: vec!["operator", "end of input"],
                found: tok.kind.describe(),
            });
        }
        Ok(Expression { root, n })
    }

    pub fn constant(n: usize, value: f64) -> Expression {
        Expression {
            root: Arc::new(Node::Num(value)),
            n,
        }
    }

    /// The coordinate `z_{index+1}`.
    pub fn variable(n: usize, index: usize) -> Expression {
        assert!(index < 2 * n, "variable index out of range");
        Expression {
            root: Arc::new(Node::Var(index)),
            n,
        }
    }

    /// Half the chart dimension.
    pub fn degrees_of_freedom(&self) -> usize {
        self.n
    }

    pub fn eval(&self, z: &[f64]) -> Result<f64, EvalError> {
        eval(&self.root, z)
    }

    /// Exact partial derivative with respect to `z_{var+1}`.
    pub fn derivative(&self, var: usize) -> Expression {
        Expression {
            root: diff(&self.root, var),
            n: self.n,
        }
    }

    pub fn gradient(&self) -> Vec<Expression> {
        (0..2 * self.n).map(|k| self.derivative(k)).collect()
    }

    pub fn is_constant(&self) -> bool {
        matches!(*self.root, Node::Num(_))
    }

    /// Value of a variable-free expression.
    pub fn as_constant(&self) -> Option<f64> {
        if has_variables(&self.root) {
            return None;
        }
        self.eval(&vec![0.0; 2 * self.n]).ok()
    }

    pub fn powf(&self, exponent: f64) -> Expression {
        self.lift(pow(self.root.clone(), num(exponent)))
    }

    pub fn sin(&self) -> Expression {
        self.lift(call(Func::Sin, self.root.clone()))
    }

    pub fn cos(&self) -> Expression {
        self.lift(call(Func::Cos, self.root.clone()))
    }

    pub fn exp(&self) -> Expression {
        self.lift(call(Func::Exp, self.root.clone()))
    }

    fn lift(&self, root: Link) -> Expression {
        Expression { root, n: self.n }
    }

    fn binary(self, rhs: Expression, op: fn(Link, Link) -> Link) -> Expression {
        assert_eq!(self.n, rhs.n, "expressions over different charts");
        Expression {
            root: op(self.root, rhs.root),
            n: self.n,
        }
    }
}

impl std::ops::Add for Expression {
    type Output = Expression;
    fn add(self, rhs: Expression) -> Expression {
        self.binary(rhs, add)
    }
}

impl std::ops::Sub for Expression {
    type Output = Expression;
    fn sub(self, rhs: Expression) -> Expression {
        self.binary(rhs, sub)
    }
}

impl std::ops::Mul for Expression {
    type Output = Expression;
    fn mul(self, rhs: Expression) -> Expression {
        self.binary(rhs, mul)
    }
}

impl std::ops::Div for Expression {
    type Output = Expression;
    fn div(self, rhs: Expression) -> Expression {
        self.binary(rhs, div)
    }
}

impl std::ops::Neg for Expression {
    type Output = Expression;
    fn neg(self) -> Expression {
        Expression {
            root: neg(self.root),
            n: self.n,
        }
    }
}

impl std::ops::Mul<Expression> for f64 {
    type Output = Expression;
    fn mul(self, rhs: Expression) -> Expression {
        Expression::constant(rhs.n, self) * rhs
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_node(f, &self.root, self.n, 0)
    }
}

// ---------------------------------------------------------------------------
// evaluation

fn eval(node: &Node, z: &[f64]) -> Result<f64, EvalError> {
    let v = match node {
        Node::Num(c) => *c,
        Node::Var(i) => z[*i],
        Node::Neg(a) => -eval(a, z)?,
        Node::Add(a, b) => eval(a, z)? + eval(b, z)?,
        Node::Sub(a, b) => eval(a, z)? - eval(b, z)?,
        Node::Mul(a, b) => eval(a, z)? * eval(b, z)?,
        Node::Div(a, b) => {
            let d = eval(b, z)?;
            if d == 0.0 {
                return Err(EvalError::DivisionByZero);
            }
            eval(a, z)? / d
        }
        Node::Pow(a, b) => {
            let base = eval(a, z)?;
            let e = eval(b, z)?;
            if e.fract() == 0.0 && e.abs() < 1024.0 {
                if base == 0.0 && e < 0.0 {
                    return Err(EvalError::DivisionByZero);
                }
                base.powi(e as i32)
            } else if base < 0.0 {
                return Err(EvalError::NegativeBase);
            } else {
                base.powf(e)
            }
        }
        Node::Call(func, a) => {
            let x = eval(a, z)?;
            match func {
                Func::Sin => x.sin(),
                Func::Cos => x.cos(),
                Func::Exp => x.exp(),
                Func::Sqrt => {
                    if x < 0.0 {
                        return Err(EvalError::SqrtOfNegative);
                    }
                    x.sqrt()
                }
                Func::Ln => {
                    if x <= 0.0 {
                        return Err(EvalError::LogOfNonPositive);
                    }
                    x.ln()
                }
            }
        }
        Node::Atan2(y, x) => eval(y, z)?.atan2(eval(x, z)?),
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EvalError::NonFinite)
    }
}

// ---------------------------------------------------------------------------
// simplifying constructors

fn num(c: f64) -> Link {
    Arc::new(Node::Num(c))
}

fn as_num(a: &Node) -> Option<f64> {
    match a {
        Node::Num(c) => Some(*c),
        _ => None,
    }
}

fn folded(v: f64) -> Option<Link> {
    v.is_finite().then(|| num(v))
}

fn neg(a: Link) -> Link {
    match &*a {
        Node::Num(c) => num(-c),
        Node::Neg(inner) => inner.clone(),
        _ => Arc::new(Node::Neg(a)),
    }
}

fn add(a: Link, b: Link) -> Link {
    match (as_num(&a), as_num(&b)) {
        (Some(x), Some(y)) => folded(x + y).unwrap_or_else(|| Arc::new(Node::Add(a, b))),
        (Some(0.0), _) => b,
        (_, Some(0.0)) => a,
        _ => Arc::new(Node::Add(a, b)),
    }
}

fn sub(a: Link, b: Link) -> Link {
    match (as_num(&a), as_num(&b)) {
        (Some(x), Some(y)) => folded(x - y).unwrap_or_else(|| Arc::new(Node::Sub(a, b))),
        (_, Some(0.0)) => a,
        (Some(0.0), _) => neg(b),
        _ => Arc::new(Node::Sub(a, b)),
    }
}

fn mul(a: Link, b: Link) -> Link {
    match (as_num(&a), as_num(&b)) {
        (Some(x), Some(y)) => folded(x * y).unwrap_or_else(|| Arc::new(Node::Mul(a, b))),
        (Some(0.0), _) | (_, Some(0.0)) => num(0.0),
        (Some(1.0), _) => b,
        (_, Some(1.0)) => a,
        (Some(-1.0), _) => neg(b),
        (_, Some(-1.0)) => neg(a),
        _ => Arc::new(Node::Mul(a, b)),
    }
}

fn div(a: Link, b: Link) -> Link {
    match (as_num(&a), as_num(&b)) {
        (Some(x), Some(y)) if y != 0.0 => {
            folded(x / y).unwrap_or_else(|| Arc::new(Node::Div(a, b)))
        }
        (_, Some(1.0)) => a,
        _ => Arc::new(Node::Div(a, b)),
    }
}

fn pow(a: Link, b: Link) -> Link {
    match (as_num(&a), as_num(&b)) {
        (_, Some(1.0)) => a,
        (_, Some(0.0)) => num(1.0),
        (Some(x), Some(e)) if x > 0.0 || e.fract() == 0.0 => {
            folded(x.powf(e)).unwrap_or_else(|| Arc::new(Node::Pow(a, b)))
        }
        _ => Arc::new(Node::Pow(a, b)),
    }
}

fn call(func: Func, a: Link) -> Link {
    Arc::new(Node::Call(func, a))
}

// ---------------------------------------------------------------------------
// differentiation

fn diff(node: &Link, k: usize) -> Link {
    match &**node {
        Node::Num(_) => num(0.0),
        Node::Var(i) => num(if *i == k { 1.0 } else { 0.0 }),
        Node::Neg(a) => neg(diff(a, k)),
        Node::Add(a, b) => add(diff(a, k), diff(b, k)),
        Node::Sub(a, b) => sub(diff(a, k), diff(b, k)),
        Node::Mul(a, b) => add(
            mul(diff(a, k), b.clone()),
            mul(a.clone(), diff(b, k)),
        ),
        Node::Div(a, b) => {
            let da = diff(a, k);
            let db = diff(b, k);
            if as_num(&db) == Some(0.0) {
                div(da, b.clone())
            } else {
                div(
                    sub(mul(da, b.clone()), mul(a.clone(), db)),
                    pow(b.clone(), num(2.0)),
                )
            }
        }
        Node::Pow(a, b) => {
            let da = diff(a, k);
            let db = diff(b, k);
            match (as_num(b), as_num(&db)) {
                (Some(e), _) => mul(mul(num(e), pow(a.clone(), num(e - 1.0))), da),
                (None, Some(0.0)) => mul(
                    mul(b.clone(), pow(a.clone(), sub(b.clone(), num(1.0)))),
                    da,
                ),
                _ if as_num(&da) == Some(0.0) => {
                    mul(mul(node.clone(), call(Func::Ln, a.clone())), db)
                }
                _ => mul(
                    node.clone(),
                    add(
                        mul(db, call(Func::Ln, a.clone())),
                        div(mul(b.clone(), da), a.clone()),
                    ),
                ),
            }
        }
        Node::Call(func, a) => {
            let da = diff(a, k);
            if as_num(&da) == Some(0.0) {
                return num(0.0);
            }
            let outer = match func {
                Func::Sin => call(Func::Cos, a.clone()),
                Func::Cos => neg(call(Func::Sin, a.clone())),
                Func::Exp => node.clone(),
                Func::Sqrt => div(num(1.0), mul(num(2.0), node.clone())),
                Func::Ln => div(num(1.0), a.clone()),
            };
            mul(outer, da)
        }
        Node::Atan2(y, x) => {
            let dy = diff(y, k);
            let dx = diff(x, k);
            let r2 = add(pow(x.clone(), num(2.0)), pow(y.clone(), num(2.0)));
            div(sub(mul(x.clone(), dy), mul(y.clone(), dx)), r2)
        }
    }
}

// ---------------------------------------------------------------------------
// printing

const PREC_ADD: u8 = 1;
const PREC_MUL: u8 = 2;
const PREC_UNARY: u8 = 3;
const PREC_POW: u8 = 4;
const PREC_ATOM: u8 = 5;

fn precedence(node: &Node) -> u8 {
    match node {
        Node::Num(c) if *c < 0.0 || (*c == 0.0 && c.is_sign_negative()) => PREC_UNARY,
        Node::Num(_) | Node::Var(_) | Node::Call(..) | Node::Atan2(..) => PREC_ATOM,
        Node::Neg(_) => PREC_UNARY,
        Node::Add(..) | Node::Sub(..) => PREC_ADD,
        Node::Mul(..) | Node::Div(..) => PREC_MUL,
        Node::Pow(..) => PREC_POW,
    }
}

fn var_name(i: usize, n: usize) -> String {
    if i < n {
        format!("q{}", i + 1)
    } else {
        format!("p{}", i - n + 1)
    }
}

fn write_node(f: &mut fmt::Formatter<'_>, node: &Node, n: usize, min_prec: u8) -> fmt::Result {
    let prec = precedence(node);
    let paren = prec < min_prec;
    if paren {
        f.write_str("(")?;
    }
    match node {
        Node::Num(c) => write!(f, "{c}")?,
        Node::Var(i) => f.write_str(&var_name(*i, n))?,
        Node::Neg(a) => {
            f.write_str("-")?;
            // `--x` parses, but `-(-x)` reads better.
            write_node(f, a, n, PREC_UNARY + 1)?;
        }
        Node::Add(a, b) | Node::Sub(a, b) => {
            write_node(f, a, n, PREC_ADD)?;
            f.write_str(if matches!(node, Node::Add(..)) { "+" } else { "-" })?;
            write_node(f, b, n, PREC_ADD + 1)?;
        }
        Node::Mul(a, b) | Node::Div(a, b) => {
            write_node(f, a, n, PREC_MUL)?;
            f.write_str(if matches!(node, Node::Mul(..)) { "*" } else { "/" })?;
            write_node(f, b, n, PREC_MUL + 1)?;
        }
        Node::Pow(a, b) => {
            write_node(f, a, n, PREC_ATOM)?;
            f.write_str("^")?;
            write_node(f, b, n, PREC_UNARY)?;
        }
        Node::Call(func, a) => {
            write!(f, "{}(", func.name())?;
            write_node(f, a, n, 0)?;
            f.write_str(")")?;
        }
        Node::Atan2(y, x) => {
            f.write_str("atan2(")?;
            write_node(f, y, n, 0)?;
            f.write_str(",")?;
            write_node(f, x, n, 0)?;
            f.write_str(")")?;
        }
    }
    if paren {
        f.write_str(")")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// parsing

#[derive(Debug, Clone, PartialEq)]
enum TokenKind {
    Number(f64),
    Ident(String),
    Op(char),
}

impl TokenKind {
    fn describe(&self) -> String {
        match self {
            TokenKind::Number(v) => format!("number `{v}`"),
            TokenKind::Ident(s) => format!("`{s}`"),
            TokenKind::Op(c) => format!("`{c}`"),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokenKind,
    offset: usize,
}

fn tokenize(text: &str) -> Result<Vec<Token>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let lexeme: String = chars[start..i].iter().collect();
            let value = lexeme.parse::<f64>().map_err(|_| ParseError {
                offset: start,
                expected: vec!["number"],
                found: format!("`{lexeme}`"),
            })?;
            tokens.push(Token {
                kind: TokenKind::Number(value),
                offset: start,
            });
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            tokens.push(Token {
                kind: TokenKind::Ident(chars[start..i].iter().collect()),
                offset: start,
            });
        } else if "+-*/^(),".contains(c) {
            tokens.push(Token {
                kind: TokenKind::Op(c),
                offset: i,
            });
            i += 1;
        } else {
            return Err(ParseError {
                offset: i,
                expected: vec!["expression"],
                found: format!("`{c}`"),
            });
        }
    }
    Ok(tokens)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    n: usize,
    end: usize,
    open: Vec<usize>,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn peek_op(&self) -> Option<char> {
        match self.peek() {
            Some(Token {
                kind: TokenKind::Op(c),
                ..
            }) => Some(*c),
            _ => None,
        }
    }

    fn error(&self, expected: Vec<&'static str>) -> ParseError {
        match self.peek() {
            Some(tok) => ParseError {
                offset: tok.offset,
                expected,
                found: tok.kind.describe(),
            },
            // Input ran out: point at the innermost unclosed parenthesis if any.
            None => ParseError {
                offset: self.open.last().copied().unwrap_or(self.end),
                expected,
                found: "end of input".to_string(),
            },
        }
    }

    fn expect_op(&mut self, c: char, what: &'static str) -> Result<(), ParseError> {
        if self.peek_op() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(vec![what]))
        }
    }

    fn expr(&mut self) -> Result<Link, ParseError> {
        let mut lhs = self.term()?;
        while let Some(op @ ('+' | '-')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Arc::new(if op == '+' {
                Node::Add(lhs, rhs)
            } else {
                Node::Sub(lhs, rhs)
            });
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Link, ParseError> {
        let mut lhs = self.unary()?;
        while let Some(op @ ('*' | '/')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Arc::new(if op == '*' {
                Node::Mul(lhs, rhs)
            } else {
                Node::Div(lhs, rhs)
            });
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Link, ParseError> {
        match self.peek_op() {
            Some('-') => {
                self.pos += 1;
                let inner = self.unary()?;
                // Fold literal negation so printed negative constants re-parse identically.
                Ok(match &*inner {
                    Node::Num(c) => num(-c),
                    _ => Arc::new(Node::Neg(inner)),
                })
            }
            Some('+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Link, ParseError> {
        let base = self.primary()?;
        if self.peek_op() == Some('^') {
            self.pos += 1;
            let exponent = self.unary()?;
            return Ok(Arc::new(Node::Pow(base, exponent)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Link, ParseError> {
        let Some(tok) = self.peek().cloned() else {
            return Err(self.error(vec!["expression"]));
        };
        match tok.kind {
            TokenKind::Number(v) => {
                self.pos += 1;
                Ok(num(v))
            }
            TokenKind::Op('(') => {
                self.pos += 1;
                self.open.push(tok.offset);
                let inner = self.expr()?;
                self.expect_op(')', "`)`")?;
                self.open.pop();
                Ok(inner)
            }
            TokenKind::Ident(name) => {
                self.pos += 1;
                if let Some(func) = function(&name) {
                    let paren = self.peek().map(|t| t.offset).unwrap_or(self.end);
                    self.expect_op('(', "`(`")?;
                    self.open.push(paren);
                    let first = self.expr()?;
                    let node = if name == "atan2" {
                        self.expect_op(',', "`,`")?;
                        let second = self.expr()?;
                        Node::Atan2(first, second)
                    } else {
                        Node::Call(func.expect("unary function"), first)
                    };
                    self.expect_op(')', "`)`")?;
                    self.open.pop();
                    return Ok(Arc::new(node));
                }
                if name == "pi" {
                    return Ok(num(std::f64::consts::PI));
                }
                match variable_index(&name, self.n) {
                    Some(i) => Ok(Arc::new(Node::Var(i))),
                    None => Err(ParseError {
                        offset: tok.offset,
                        expected: vec!["variable", "function"],
                        found: format!("`{name}`"),
                    }),
                }
            }
            TokenKind::Op(_) => Err(self.error(vec!["expression"])),
        }
    }
}

/// `Some(None)` marks `atan2`, which takes two arguments.
fn function(name: &str) -> Option<Option<Func>> {
    Some(match name {
        "sin" => Some(Func::Sin),
        "cos" => Some(Func::Cos),
        "exp" => Some(Func::Exp),
        "sqrt" => Some(Func::Sqrt),
        "ln" => Some(Func::Ln),
        "atan2" => None,
        _ => return None,
    })
}

/// Resolves a coordinate name to its index in `z = (q, p)`.
pub fn variable_index(name: &str, n: usize) -> Option<usize> {
    if n == 1 {
        match name {
            "q" => return Some(0),
            "p" => return Some(1),
            _ => {}
        }
    }
    let (prefix, digits) = name.split_at(1);
    let k: usize = digits.parse().ok().filter(|_| !digits.starts_with('0'))?;
    match prefix {
        "q" if (1..=n).contains(&k) => Some(k - 1),
        "p" if (1..=n).contains(&k) => Some(n + k - 1),
        "z" if (1..=2 * n).contains(&k) => Some(k - 1),
        _ => None,
    }
}

//! Configuration files.
//!
//! ```text
//! # comment
//! [system]
//! name = harmonic_oscillator      # a catalog entry, or an inline system:
//! n = 1
//! lower = [-2, -2]                # or half_width = 2
//! upper = [2, 2]
//!
//! [omega]                          # omega_ij for 1 ≤ i < j ≤ 2n; absent pairs are 0.
//! omega_12 = "1 + q1^2"           # an empty section means the standard form
//!
//! [hamiltonians]
//! h1 = "(p1^2)/2 + q1"
//!
//! [task]
//! point = [0.5, 0]
//! seed = 42
//!
//! [output]
//! dir = "out"
//! ```
//!
//! Values are quoted strings, bracketed lists or bare text up to a comment.
//! Numbers may be constant expressions such as `pi/2`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;

use crate::expr::Expression;
use crate::flows::IntegrableSystemSpec;
use crate::geometry::{coordinate_name, ChartDomain, ScalarField, SymplecticStructure, TwoForm};
use crate::systems;

/// A configuration problem, positioned where possible (1-based line and column).
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}, column {column}: expected {}, found {found}", .expected.join(" or "))]
    Parse {
        line: usize,
        column: usize,
        expected: Vec<&'static str>,
        found: String,
    },
    #[error("line {line}, column {column}: {message}")]
    Invalid { line: usize, column: usize, message: String },
    #[error("{0}")]
    Validation(String),
}

impl ConfigError {
    /// `(line, column)` of the offending text.
    pub fn position(&self) -> Option<(usize, usize)> {
        match self {
            ConfigError::Parse { line, column, .. } | ConfigError::Invalid { line, column, .. } => Some((*line, *column)),
            ConfigError::Validation(_) => None,
        }
    }
}

/// The system under study.
#[derive(Debug, Clone, PartialEq)]
pub enum SystemConfig {
    Named(String),
    Inline(InlineSystem),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InlineSystem {
    pub n: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// `((i, j), ω_ij)` with 0-based `i < j`; empty means the standard form.
    pub omega: Vec<((usize, usize), Expression)>,
    /// Either empty or `n` functions.
    pub hamiltonians: Vec<Expression>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    /// Base point; the catalog sample point or the chart centre otherwise.
    pub point: Option<Vec<f64>>,
    /// Points per axis of the verification grid.
    pub grid: usize,
    /// Sample count for `linearize` and `darboux`.
    pub samples: usize,
    /// Lattice search horizon.
    pub horizon: f64,
    /// Half width of the random flow times in the linearity check.
    pub time_width: f64,
    /// Integrator tolerance.
    pub rtol: f64,
    pub seed: u64,
    /// First flow-box radius for `darboux`.
    pub radius: f64,
    /// Threshold for chart residuals.
    pub tol_residual: f64,
    pub tol_commute: f64,
    pub tol_return: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            point: None,
            grid: 5,
            samples: 200,
            horizon: 20.0,
            time_width: 0.3,
            rtol: 1e-12,
            seed: 42,
            radius: 0.5,
            tol_residual: 1e-6,
            tol_commute: 1e-8,
            tol_return: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigDocument {
    pub system: SystemConfig,
    pub task: TaskConfig,
    pub output: OutputConfig,
}

/// A system ready for the numerical pipeline.
#[derive(Debug, Clone)]
pub struct ResolvedSystem {
    pub label: String,
    pub omega: SymplecticStructure,
    pub hamiltonians: Vec<ScalarField>,
    pub point: Vec<f64>,
}

impl ResolvedSystem {
    pub fn n(&self) -> usize {
        self.omega.chart().n()
    }

    pub fn spec(&self) -> Result<IntegrableSystemSpec, ConfigError> {
        if self.hamiltonians.len() != self.n() {
            return Err(ConfigError::Validation(format!(
                "this command needs {} Hamiltonians, the config has {}",
                self.n(),
                self.hamiltonians.len()
            )));
        }
        IntegrableSystemSpec::new(self.omega.clone(), self.hamiltonians.clone())
            .map_err(|e| ConfigError::Validation(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// lexing

#[derive(Debug, Clone, PartialEq)]
enum RawValue {
    Text(String),
    List(Vec<(String, usize)>),
}

#[derive(Debug, Clone)]
struct Entry {
    key: String,
    value: RawValue,
    line: usize,
    key_column: usize,
    value_column: usize,
    quoted: bool,
}

const SECTIONS: [&str; 5] = ["system", "omega", "hamiltonians", "task", "output"];

fn parse_error(line: usize, column: usize, expected: Vec<&'static str>, found: impl Into<String>) -> ConfigError {
    ConfigError::Parse {
        line,
        column,
        expected,
        found: found.into(),
    }
}

fn describe(rest: &[char]) -> String {
    match rest.first() {
        None => "end of line".into(),
        Some(_) => format!("`{}`", rest.iter().take(12).collect::<String>().trim_end()),
    }
}

fn skip_ws(chars: &[char], mut i: usize) -> usize {
    while i < chars.len() && chars[i].is_whitespace() {
        i += 1;
    }
    i
}

fn expect_end(chars: &[char], i: usize, line: usize) -> Result<(), ConfigError> {
    let i = skip_ws(chars, i);
    if i < chars.len() && chars[i] != '#' {
        return Err(parse_error(line, i + 1, vec!["end of line", "`#`"], describe(&chars[i..])));
    }
    Ok(())
}

fn lex(text: &str) -> Result<BTreeMap<&'static str, Vec<Entry>>, ConfigError> {
    let mut sections: BTreeMap<&'static str, Vec<Entry>> = BTreeMap::new();
    let mut current: Option<&'static str> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let chars: Vec<char> = raw.chars().collect();
        let i = skip_ws(&chars, 0);
        if i == chars.len() || chars[i] == '#' {
            continue;
        }
        if chars[i] == '[' {
            let start = skip_ws(&chars, i + 1);
            let mut j = start;
            while j < chars.len() && (chars[j].is_ascii_alphanumeric() || chars[j] == '_') {
                j += 1;
            }
            let name: String = chars[start..j].iter().collect();
            let Some(section) = SECTIONS.iter().find(|s| **s == name) else {
                return Err(parse_error(
                    line,
                    start + 1,
                    vec!["`system`", "`omega`", "`hamiltonians`", "`task`", "`output`"],
                    describe(&chars[start..]),
                ));
            };
            let close = skip_ws(&chars, j);
            if close >= chars.len() || chars[close] != ']' {
                return Err(parse_error(line, close + 1, vec!["`]`"], describe(&chars[close..])));
            }
            expect_end(&chars, close + 1, line)?;
            current = Some(section);
            sections.entry(section).or_default();
            continue;
        }
        let Some(section) = current else {
            return Err(parse_error(line, i + 1, vec!["a `[section]` header"], describe(&chars[i..])));
        };
        if !(chars[i].is_ascii_alphabetic() || chars[i] == '_') {
            return Err(parse_error(line, i + 1, vec!["a key"], describe(&chars[i..])));
        }
        let mut j = i;
        while j < chars.len() && (chars[j].is_ascii_alphanumeric() || chars[j] == '_') {
            j += 1;
        }
        let key: String = chars[i..j].iter().collect();
        let eq = skip_ws(&chars, j);
        if eq >= chars.len() || chars[eq] != '=' {
            return Err(parse_error(line, eq + 1, vec!["`=`"], describe(&chars[eq..])));
        }
        let v = skip_ws(&chars, eq + 1);
        let value = match chars.get(v) {
            None | Some('#') => return Err(parse_error(line, v + 1, vec!["a value"], describe(&chars[v..]))),
            Some('"') => {
                let mut s = String::new();
                let mut k = v + 1;
                loop {
                    match chars.get(k) {
                        None => return Err(parse_error(line, k + 1, vec!["`\"`"], "end of line")),
                        Some('"') => break,
                        Some('\\') if matches!(chars.get(k + 1), Some('"') | Some('\\')) => {
                            s.push(chars[k + 1]);
                            k += 2;
                        }
                        Some(c) => {
                            s.push(*c);
                            k += 1;
                        }
                    }
                }
                expect_end(&chars, k + 1, line)?;
                RawValue::Text(s)
            }
            Some('[') => {
                let mut items = Vec::new();
                let mut k = v + 1;
                let mut item_start = k;
                let mut item = String::new();
                loop {
                    match chars.get(k) {
                        None | Some('#') => return Err(parse_error(line, k + 1, vec!["`]`"], describe(&chars[k..]))),
                        Some(c @ (',' | ']')) => {
                            let trimmed = item.trim();
                            let lead = item.len() - item.trim_start().len();
                            if trimmed.is_empty() {
                                if *c == ']' && items.is_empty() {
                                    break;
                                }
                                return Err(parse_error(line, k + 1, vec!["a number"], format!("`{c}`")));
                            }
                            items.push((trimmed.to_string(), item_start + lead + 1));
                            item.clear();
                            item_start = k + 1;
                            if *c == ']' {
                                break;
                            }
                        }
                        Some(c) => item.push(*c),
                    }
                    k += 1;
                }
                expect_end(&chars, k + 1, line)?;
                RawValue::List(items)
            }
            Some(_) => {
                let end = chars[v..].iter().position(|c| *c == '#').map_or(chars.len(), |p| v + p);
                RawValue::Text(chars[v..end].iter().collect::<String>().trim_end().to_string())
            }
        };
        let entries = sections.entry(section).or_default();
        if entries.iter().any(|e| e.key == key) {
            return Err(ConfigError::Invalid {
                line,
                column: i + 1,
                message: format!("duplicate key `{key}` in [{section}]"),
            });
        }
        entries.push(Entry {
            key,
            quoted: chars[v] == '"',
            value,
            line,
            key_column: i + 1,
            value_column: v + 1,
        });
    }
    Ok(sections)
}

// ---------------------------------------------------------------------------
// interpretation

impl Entry {
    fn invalid(&self, message: impl Into<String>) -> ConfigError {
        ConfigError::Invalid {
            line: self.line,
            column: self.value_column,
            message: message.into(),
        }
    }

    fn text(&self) -> Result<&str, ConfigError> {
        match &self.value {
            RawValue::Text(s) => Ok(s),
            RawValue::List(_) => Err(self.invalid(format!("`{}` takes a single value, not a list", self.key))),
        }
    }

    /// Column of the expression text inside the line.
    fn text_column(&self) -> usize {
        self.value_column + usize::from(self.quoted)
    }

    fn expression(&self, n: usize) -> Result<Expression, ConfigError> {
        parse_expression(self.text()?, n, self.line, self.text_column())
    }

    fn number(&self) -> Result<f64, ConfigError> {
        constant(self.text()?, self.line, self.text_column())
    }

    fn count(&self) -> Result<usize, ConfigError> {
        let v = self.number()?;
        if v >= 0.0 && v.fract() == 0.0 && v < 1e15 {
            Ok(v as usize)
        } else {
            Err(self.invalid(format!("`{}` must be a non-negative integer", self.key)))
        }
    }

    fn list(&self) -> Result<Vec<f64>, ConfigError> {
        match &self.value {
            RawValue::List(items) => items.iter().map(|(s, col)| constant(s, self.line, *col)).collect(),
            RawValue::Text(_) => Err(self.invalid(format!("`{}` takes a list `[a, b, …]`", self.key))),
        }
    }
}

fn parse_expression(text: &str, n: usize, line: usize, column: usize) -> Result<Expression, ConfigError> {
    Expression::parse(text, n).map_err(|e| parse_error(line, column + e.offset, e.expected, e.found))
}

fn constant(text: &str, line: usize, column: usize) -> Result<f64, ConfigError> {
    let e = parse_expression(text, 1, line, column)?;
    match e.as_constant() {
        Some(v) if v.is_finite() => Ok(v),
        _ => Err(ConfigError::Invalid {
            line,
            column,
            message: format!("`{text}` is not a finite constant"),
        }),
    }
}

fn unknown_key(entry: &Entry, section: &str) -> ConfigError {
    ConfigError::Invalid {
        line: entry.line,
        column: entry.key_column,
        message: format!("unknown key `{}` in [{section}]", entry.key),
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<ConfigDocument, ConfigError> {
    let sections = lex(text)?;
    let empty = Vec::new();
    let get = |s: &str| sections.get(s).unwrap_or(&empty);

    let system = parse_system(get("system"), get("omega"), get("hamiltonians"))?;
    let task = parse_task(get("task"))?;
    let mut output = OutputConfig::default();
    for e in get("output") {
        match e.key.as_str() {
            "dir" => output.dir = PathBuf::from(e.text()?),
            _ => return Err(unknown_key(e, "output")),
        }
    }
    let doc = ConfigDocument { system, task, output };
    doc.resolve()?;
    Ok(doc)
}

fn parse_system(system: &[Entry], omega: &[Entry], hamiltonians: &[Entry]) -> Result<SystemConfig, ConfigError> {
    let find = |k: &str| system.iter().find(|e| e.key == k);
    for e in system {
        if !["name", "n", "lower", "upper", "half_width"].contains(&e.key.as_str()) {
            return Err(unknown_key(e, "system"));
        }
    }
    if let Some(name) = find("name") {
        if let Some(e) = system.iter().find(|e| e.key != "name") {
            return Err(ConfigError::Invalid {
                line: e.line,
                column: e.key_column,
                message: format!("`{}` cannot be combined with a catalog `name`", e.key),
            });
        }
        if let Some(e) = omega.iter().chain(hamiltonians).next() {
            return Err(ConfigError::Invalid {
                line: e.line,
                column: e.key_column,
                message: "catalog systems take no [omega] or [hamiltonians] entries".into(),
            });
        }
        let id = name.text()?;
        if systems::lookup(id).is_err() {
            return Err(name.invalid(format!("unknown system `{id}`; known: {}", systems::IDS.join(", "))));
        }
        return Ok(SystemConfig::Named(id.to_string()));
    }
    let Some(n_entry) = find("n") else {
        return Err(ConfigError::Validation("[system] needs `name` or `n`".into()));
    };
    let n = n_entry.count()?;
    if n == 0 {
        return Err(n_entry.invalid("`n` must be at least 1"));
    }
    let dim = 2 * n;
    let (lower, upper) = match (find("lower"), find("upper"), find("half_width")) {
        (Some(lo), Some(hi), None) => {
            let (l, u) = (lo.list()?, hi.list()?);
            for (e, v) in [(lo, &l), (hi, &u)] {
                if v.len() != dim {
                    return Err(e.invalid(format!("`{}` needs {dim} entries, got {}", e.key, v.len())));
                }
            }
            if let Some(i) = (0..dim).find(|&i| !(l[i] < u[i])) {
                return Err(hi.invalid(format!("empty range on axis {}", coordinate_name(i, n))));
            }
            (l, u)
        }
        (None, None, Some(h)) => {
            let w = h.number()?;
            if !(w > 0.0) {
                return Err(h.invalid("`half_width` must be positive"));
            }
            (vec![-w; dim], vec![w; dim])
        }
        (None, None, None) => return Err(n_entry.invalid("inline systems need `lower`/`upper` or `half_width`")),
        (_, _, Some(h)) => {
            return Err(ConfigError::Invalid {
                line: h.line,
                column: h.key_column,
                message: "use either `half_width` or `lower`/`upper`".into(),
            })
        }
        (lo, hi, None) => return Err(lo.or(hi).expect("one given").invalid("`lower` and `upper` go together")),
    };

    let mut form = Vec::new();
    for e in omega {
        let pair = e
            .key
            .strip_prefix("omega_")
            .and_then(|ij| {
                let digits: Vec<char> = ij.chars().collect();
                // omega_ij with single digits, or omega_i_j.
                if let Some((a, b)) = ij.split_once('_') {
                    Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?))
                } else if digits.len() == 2 {
                    Some((digits[0].to_digit(10)? as usize, digits[1].to_digit(10)? as usize))
                } else {
                    None
                }
            })
            .filter(|&(i, j)| 1 <= i && i < j && j <= dim);
        let Some((i, j)) = pair else {
            return Err(ConfigError::Invalid {
                line: e.line,
                column: e.key_column,
                message: format!("expected `omega_ij` with 1 ≤ i < j ≤ {dim}, found `{}`", e.key),
            });
        };
        if form.iter().any(|(p, _)| *p == (i - 1, j - 1)) {
            return Err(e.invalid(format!("ω_{i}{j} given twice")));
        }
        form.push(((i - 1, j - 1), e.expression(n)?));
    }
    let mut hs: Vec<(usize, Expression, &Entry)> = Vec::new();
    for e in hamiltonians {
        let Some(k) = e.key.strip_prefix('h').and_then(|k| k.parse::<usize>().ok()).filter(|k| (1..=n).contains(k)) else {
            return Err(ConfigError::Invalid {
                line: e.line,
                column: e.key_column,
                message: format!("expected `h1` … `h{n}`, found `{}`", e.key),
            });
        };
        hs.push((k, e.expression(n)?, e));
    }
    hs.sort_by_key(|h| h.0);
    if !hs.is_empty() && hs.len() != n {
        return Err(ConfigError::Validation(format!("[hamiltonians] needs h1 … h{n}, found {} entries", hs.len())));
    }
    Ok(SystemConfig::Inline(InlineSystem {
        n,
        lower,
        upper,
        omega: form,
        hamiltonians: hs.into_iter().map(|h| h.1).collect(),
    }))
}

fn parse_task(entries: &[Entry]) -> Result<TaskConfig, ConfigError> {
    let mut t = TaskConfig::default();
    for e in entries {
        let positive = |v: f64| if v > 0.0 { Ok(v) } else { Err(e.invalid(format!("`{}` must be positive", e.key))) };
        match e.key.as_str() {
            "point" => t.point = Some(e.list()?),
            "grid" => {
                t.grid = e.count()?;
                if t.grid < 2 {
                    return Err(e.invalid("`grid` needs at least 2 points per axis"));
                }
            }
            "samples" => t.samples = e.count()?.max(1),
            "horizon" => t.horizon = positive(e.number()?)?,
            "time_width" => t.time_width = positive(e.number()?)?,
            "rtol" => t.rtol = positive(e.number()?)?,
            "seed" => t.seed = e.count()? as u64,
            "radius" => t.radius = positive(e.number()?)?,
            "tol_residual" => t.tol_residual = positive(e.number()?)?,
            "tol_commute" => t.tol_commute = positive(e.number()?)?,
            "tol_return" => t.tol_return = positive(e.number()?)?,
            _ => return Err(unknown_key(e, "task")),
        }
    }
    Ok(t)
}

impl ConfigDocument {
    /// Builds the symplectic structure, Hamiltonians and base point.
    pub fn resolve(&self) -> Result<ResolvedSystem, ConfigError> {
        let (label, omega, hamiltonians, default_point) = match &self.system {
            SystemConfig::Named(id) => {
                let sys = systems::lookup(id).map_err(|e| ConfigError::Validation(e.to_string()))?;
                (
                    id.clone(),
                    sys.spec.omega().clone(),
                    sys.spec.hamiltonians().to_vec(),
                    sys.sample_point.clone(),
                )
            }
            SystemConfig::Inline(s) => {
                let bounds: Vec<(f64, f64)> = s.lower.iter().copied().zip(s.upper.iter().copied()).collect();
                let chart = ChartDomain::new(s.n, &bounds).map_err(|e| ConfigError::Validation(e.to_string()))?;
                let omega = if s.omega.is_empty() {
                    SymplecticStructure::standard(chart.clone())
                } else {
                    let form = TwoForm::from_expressions(s.n, &s.omega).map_err(|e| ConfigError::Validation(e.to_string()))?;
                    SymplecticStructure::new(chart.clone(), form).map_err(|e| ConfigError::Validation(e.to_string()))?
                };
                let hs = s.hamiltonians.iter().cloned().map(ScalarField::from_expression).collect();
                ("inline".to_string(), omega, hs, chart.center())
            }
        };
        let point = self.task.point.clone().unwrap_or(default_point);
        if point.len() != omega.dim() {
            return Err(ConfigError::Validation(format!(
                "`point` has {} entries, the system has dimension {}",
                point.len(),
                omega.dim()
            )));
        }
        if !omega.chart().contains(&point) {
            return Err(ConfigError::Validation(format!("`point` {point:?} lies outside the chart")));
        }
        Ok(ResolvedSystem {
            label,
            omega,
            hamiltonians,
            point,
        })
    }

    /// The document in the grammar accepted by [`parse_config`].
    pub fn to_config_string(&self) -> String {
        let list = |v: &[f64]| format!("[{}]", v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", "));
        let mut s = String::from("[system]\n");
        match &self.system {
            SystemConfig::Named(id) => writeln!(s, "name = {id}").unwrap(),
            SystemConfig::Inline(sys) => {
                writeln!(s, "n = {}", sys.n).unwrap();
                writeln!(s, "lower = {}", list(&sys.lower)).unwrap();
                writeln!(s, "upper = {}", list(&sys.upper)).unwrap();
                s.push_str("\n[omega]\n");
                for ((i, j), e) in &sys.omega {
                    writeln!(s, "omega_{}_{} = \"{e}\"", i + 1, j + 1).unwrap();
                }
                if !sys.hamiltonians.is_empty() {
                    s.push_str("\n[hamiltonians]\n");
                    for (k, e) in sys.hamiltonians.iter().enumerate() {
                        writeln!(s, "h{} = \"{e}\"", k + 1).unwrap();
                    }
                }
            }
        }
        let t = &self.task;
        s.push_str("\n[task]\n");
        if let Some(p) = &t.point {
            writeln!(s, "point = {}", list(p)).unwrap();
        }
        writeln!(s, "grid = {}", t.grid).unwrap();
        writeln!(s, "samples = {}", t.samples).unwrap();
        writeln!(s, "horizon = {}", t.horizon).unwrap();
        writeln!(s, "time_width = {}", t.time_width).unwrap();
        writeln!(s, "rtol = {:e}", t.rtol).unwrap();
        writeln!(s, "seed = {}", t.seed).unwrap();
        writeln!(s, "radius = {}", t.radius).unwrap();
        writeln!(s, "tol_residual = {:e}", t.tol_residual).unwrap();
        writeln!(s, "tol_commute = {:e}", t.tol_commute).unwrap();
        writeln!(s, "tol_return = {:e}", t.tol_return).unwrap();
        s.push_str("\n[output]\n");
        writeln!(s, "dir = \"{}\"", self.output.dir.display()).unwrap();
        s
    }
}

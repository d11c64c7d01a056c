//! Boolean signal temporal logic over uniformly sampled traces.
//!
//! Time intervals map to sample offsets `⌊a/T_s⌋ ..= ⌈b/T_s⌉`. An interval
//! reaching past the end of the trace leaves the verdict undetermined unless
//! the available samples already decide it; an unbounded interval is clipped
//! to the trace end and the verdict is flagged as clipped.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StlError {
    #[error("interval reaches past the end of the trace at sample {0}")]
    InsufficientHorizon(usize),
    #[error("unknown signal `{0}`")]
    UnknownSignal(String),
    #[error("unbound parameter `{0}`")]
    UnboundParameter(String),
    #[error("sample index {index} outside trace of length {len}")]
    OutOfTrace { index: usize, len: usize },
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
    #[error("malformed formula: {0}")]
    Malformed(String),
    #[error("parse error at token {pos}: {msg}")]
    Parse { pos: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cmp {
    Ge,
    Gt,
    Le,
    Lt,
}

impl Cmp {
    fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Cmp::Ge => lhs >= rhs,
            Cmp::Gt => lhs > rhs,
            Cmp::Le => lhs <= rhs,
            Cmp::Lt => lhs < rhs,
        }
    }

    fn keyword(self) -> &'static str {
        match self {
            Cmp::Ge => "ge",
            Cmp::Gt => "gt",
            Cmp::Le => "le",
            Cmp::Lt => "lt",
        }
    }
}

/// A number or a named parameter.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Num(f64),
    Param(String),
    /// Negated parameter, written `-$name`.
    NegParam(String),
}

impl Value {
    fn num(&self) -> Result<f64, StlError> {
        match self {
            Value::Num(v) => Ok(*v),
            Value::Param(p) | Value::NegParam(p) => Err(StlError::UnboundParameter(p.clone())),
        }
    }
}

/// Time interval `[a, b]` in seconds; `b` may be `+∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct Interval {
    pub a: Value,
    pub b: Value,
}

impl Interval {
    pub fn new(a: f64, b: f64) -> Self {
        Self { a: Value::Num(a), b: Value::Num(b) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Formula {
    True,
    Pred { signal: String, cmp: Cmp, threshold: Value },
    Not(Box<Formula>),
    And(Box<Formula>, Box<Formula>),
    Until(Interval, Box<Formula>, Box<Formula>),
    Always(Interval, Box<Formula>),
    Eventually(Interval, Box<Formula>),
}

impl Formula {
    pub fn pred(signal: &str, cmp: Cmp, threshold: f64) -> Self {
        Formula::Pred { signal: signal.into(), cmp, threshold: Value::Num(threshold) }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(f: Formula) -> Self {
        Formula::Not(Box::new(f))
    }

    pub fn and(a: Formula, b: Formula) -> Self {
        Formula::And(Box::new(a), Box::new(b))
    }

    /// `¬(¬a ∧ ¬b)`.
    pub fn or(a: Formula, b: Formula) -> Self {
        Self::not(Self::and(Self::not(a), Self::not(b)))
    }

    pub fn until(a: f64, b: f64, lhs: Formula, rhs: Formula) -> Self {
        Formula::Until(Interval::new(a, b), Box::new(lhs), Box::new(rhs))
    }

    pub fn always(a: f64, b: f64, f: Formula) -> Self {
        Formula::Always(Interval::new(a, b), Box::new(f))
    }

    pub fn eventually(a: f64, b: f64, f: Formula) -> Self {
        Formula::Eventually(Interval::new(a, b), Box::new(f))
    }

    pub fn depth(&self) -> usize {
        match self {
            Formula::True | Formula::Pred { .. } => 0,
            Formula::Not(f) | Formula::Always(_, f) | Formula::Eventually(_, f) => 1 + f.depth(),
            Formula::And(a, b) | Formula::Until(_, a, b) => 1 + a.depth().max(b.depth()),
        }
    }

    /// Parameter names in order of first appearance.
    pub fn parameters(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit_values(&mut |v| {
            if let Value::Param(p) | Value::NegParam(p) = v {
                if !out.contains(p) {
                    out.push(p.clone());
                }
            }
        });
        out
    }

    fn visit_values(&self, f: &mut impl FnMut(&Value)) {
        match self {
            Formula::True => {}
            Formula::Pred { threshold, .. } => f(threshold),
            Formula::Not(g) => g.visit_values(f),
            Formula::And(a, b) => {
                a.visit_values(f);
                b.visit_values(f);
            }
            Formula::Until(i, a, b) => {
                f(&i.a);
                f(&i.b);
                a.visit_values(f);
                b.visit_values(f);
            }
            Formula::Always(i, g) | Formula::Eventually(i, g) => {
                f(&i.a);
                f(&i.b);
                g.visit_values(f);
            }
        }
    }

    /// Substitute named parameters; names absent from `params` stay symbolic.
    pub fn bind(&self, params: &HashMap<String, f64>) -> Formula {
        let v = |x: &Value| match x {
            Value::Param(p) => params.get(p).map_or_else(|| x.clone(), |n| Value::Num(*n)),
            Value::NegParam(p) => params.get(p).map_or_else(|| x.clone(), |n| Value::Num(-*n)),
            Value::Num(_) => x.clone(),
        };
        let iv = |i: &Interval| Interval { a: v(&i.a), b: v(&i.b) };
        match self {
            Formula::True => Formula::True,
            Formula::Pred { signal, cmp, threshold } => {
                Formula::Pred { signal: signal.clone(), cmp: *cmp, threshold: v(threshold) }
            }
            Formula::Not(g) => Formula::Not(Box::new(g.bind(params))),
            Formula::And(a, b) => Formula::And(Box::new(a.bind(params)), Box::new(b.bind(params))),
            Formula::Until(i, a, b) => Formula::Until(iv(i), Box::new(a.bind(params)), Box::new(b.bind(params))),
            Formula::Always(i, g) => Formula::Always(iv(i), Box::new(g.bind(params))),
            Formula::Eventually(i, g) => Formula::Eventually(iv(i), Box::new(g.bind(params))),
        }
    }

    /// Parse the prefix form, e.g. `(always 0 inf (ge omega_2 -0.05))`.
    pub fn parse(text: &str) -> Result<Formula, StlError> {
        let tokens = tokenize(text);
        let mut pos = 0;
        let f = parse_expr(&tokens, &mut pos)?;
        if pos != tokens.len() {
            return Err(StlError::Parse { pos, msg: "trailing input".into() });
        }
        Ok(f)
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Num(v) if v.is_infinite() && *v > 0.0 => write!(f, "inf"),
            Value::Num(v) => write!(f, "{v}"),
            Value::Param(p) => write!(f, "${p}"),
            Value::NegParam(p) => write!(f, "-${p}"),
        }
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Formula::True => write!(f, "true"),
            Formula::Pred { signal, cmp, threshold } => write!(f, "({} {signal} {threshold})", cmp.keyword()),
            Formula::Not(g) => write!(f, "(not {g})"),
            Formula::And(a, b) => write!(f, "(and {a} {b})"),
            Formula::Until(i, a, b) => write!(f, "(until {} {} {a} {b})", i.a, i.b),
            Formula::Always(i, g) => write!(f, "(always {} {} {g})", i.a, i.b),
            Formula::Eventually(i, g) => write!(f, "(eventually {} {} {g})", i.a, i.b),
        }
    }
}

fn tokenize(text: &str) -> Vec<String> {
    text.replace('(', " ( ").replace(')', " ) ").split_whitespace().map(str::to_string).collect()
}

fn parse_value(tok: &str, pos: usize) -> Result<Value, StlError> {
    let (neg, rest) = match tok.strip_prefix("-$") {
        Some(r) => (true, Some(r)),
        None => (false, tok.strip_prefix('$')),
    };
    if let Some(name) = rest {
        if name.is_empty() {
            return Err(StlError::Parse { pos, msg: "empty parameter name".into() });
        }
        return Ok(if neg { Value::NegParam(name.into()) } else { Value::Param(name.into()) });
    }
    match tok {
        "inf" | "+inf" => Ok(Value::Num(f64::INFINITY)),
        _ => tok
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(Value::Num)
            .ok_or_else(|| StlError::Parse { pos, msg: format!("expected a number, got `{tok}`") }),
    }
}

fn parse_expr(tokens: &[String], pos: &mut usize) -> Result<Formula, StlError> {
    let err = |pos: usize, msg: &str| StlError::Parse { pos, msg: msg.into() };
    let tok = tokens.get(*pos).ok_or_else(|| err(*pos, "unexpected end of input"))?;
    *pos += 1;
    match tok.as_str() {
        "true" => return Ok(Formula::True),
        "false" => return Ok(Formula::not(Formula::True)),
        "(" => {}
        _ => return Err(err(*pos - 1, "expected `(`")),
    }
    let head = tokens.get(*pos).ok_or_else(|| err(*pos, "unexpected end of input"))?.clone();
    *pos += 1;
    let value = |pos: &mut usize| -> Result<Value, StlError> {
        let t = tokens.get(*pos).ok_or_else(|| err(*pos, "unexpected end of input"))?;
        *pos += 1;
        parse_value(t, *pos - 1)
    };
    let f = match head.as_str() {
        "ge" | "gt" | "le" | "lt" => {
            let cmp = match head.as_str() {
                "ge" => Cmp::Ge,
                "gt" => Cmp::Gt,
                "le" => Cmp::Le,
                _ => Cmp::Lt,
            };
            let signal = tokens.get(*pos).ok_or_else(|| err(*pos, "missing signal"))?.clone();
            if signal == "(" || signal == ")" {
                return Err(err(*pos, "expected a signal name"));
            }
            *pos += 1;
            Formula::Pred { signal, cmp, threshold: value(pos)? }
        }
        "not" => Formula::not(parse_expr(tokens, pos)?),
        "and" | "or" => {
            let mut args = vec![parse_expr(tokens, pos)?];
            while tokens.get(*pos).is_some_and(|t| t != ")") {
                args.push(parse_expr(tokens, pos)?);
            }
            let join = if head == "and" { Formula::and } else { Formula::or };
            args.into_iter().reduce(join).expect("at least one argument")
        }
        "always" | "eventually" => {
            let i = Interval { a: value(pos)?, b: value(pos)? };
            let g = Box::new(parse_expr(tokens, pos)?);
            if head == "always" {
                Formula::Always(i, g)
            } else {
                Formula::Eventually(i, g)
            }
        }
        "until" => {
            let i = Interval { a: value(pos)?, b: value(pos)? };
            let a = parse_expr(tokens, pos)?;
            let b = parse_expr(tokens, pos)?;
            Formula::Until(i, Box::new(a), Box::new(b))
        }
        other => return Err(err(*pos - 1, &format!("unknown operator `{other}`"))),
    };
    match tokens.get(*pos) {
        Some(t) if t == ")" => {
            *pos += 1;
            Ok(f)
        }
        _ => Err(err(*pos, "expected `)`")),
    }
}

/// Uniformly sampled named signals.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTrace {
    t0: f64,
    ts: f64,
    len: usize,
    channels: BTreeMap<String, Vec<f64>>,
}

impl SampledTrace {
    pub fn uniform(t0: f64, ts: f64, channels: BTreeMap<String, Vec<f64>>) -> Result<Self, StlError> {
        if !(ts > 0.0) {
            return Err(StlError::MalformedTrace("sample time must be positive".into()));
        }
        let len = channels.values().next().map_or(0, Vec::len);
        if channels.values().any(|c| c.len() != len) {
            return Err(StlError::MalformedTrace("channels differ in length".into()));
        }
        Ok(Self { t0, ts, len, channels })
    }

    /// From explicit timestamps, which must be uniformly spaced within 1e-12.
    pub fn from_timestamps(times: &[f64], channels: BTreeMap<String, Vec<f64>>) -> Result<Self, StlError> {
        if times.len() < 2 {
            return Err(StlError::MalformedTrace("need at least two timestamps".into()));
        }
        let ts = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
        for (k, t) in times.iter().enumerate() {
            if (t - (times[0] + k as f64 * ts)).abs() > 1e-12 * (1.0 + t.abs()) {
                return Err(StlError::MalformedTrace(format!("non-uniform sample at index {k}")));
            }
        }
        let trace = Self::uniform(times[0], ts, channels)?;
        if trace.len != times.len() {
            return Err(StlError::MalformedTrace("channel length differs from timestamps".into()));
        }
        Ok(trace)
    }

    pub fn single(name: &str, ts: f64, values: Vec<f64>) -> Self {
        let mut ch = BTreeMap::new();
        ch.insert(name.to_string(), values);
        Self::uniform(0.0, ts, ch).expect("positive sample time")
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn sample_time(&self) -> f64 {
        self.ts
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.ts
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        self.channels.get(name).map(Vec::as_slice)
    }

    pub fn channel_names(&self) -> impl Iterator<Item = &str> {
        self.channels.keys().map(String::as_str)
    }
}

/// Kleene truth value used while a verdict may depend on missing samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tri {
    F,
    U,
    T,
}

impl Tri {
    fn from(b: bool) -> Self {
        if b {
            Tri::T
        } else {
            Tri::F
        }
    }

    fn not(self) -> Self {
        match self {
            Tri::T => Tri::F,
            Tri::F => Tri::T,
            Tri::U => Tri::U,
        }
    }

    fn and(self, o: Tri) -> Tri {
        self.min(o)
    }

    fn or(self, o: Tri) -> Tri {
        self.max(o)
    }

    fn min(self, o: Tri) -> Tri {
        if self.rank() <= o.rank() {
            self
        } else {
            o
        }
    }

    fn max(self, o: Tri) -> Tri {
        if self.rank() >= o.rank() {
            self
        } else {
            o
        }
    }

    fn rank(self) -> u8 {
        match self {
            Tri::F => 0,
            Tri::U => 1,
            Tri::T => 2,
        }
    }
}

/// Boolean verdict; `clipped` records that an unbounded interval was cut at
/// the end of the trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verdict {
    pub value: bool,
    pub clipped: bool,
}

struct Eval<'a> {
    trace: &'a SampledTrace,
    clipped: bool,
}

/// Sample window of an interval relative to `k`: `(first, last, clipped)`,
/// with `last` possibly past the trace end.
fn window(i: &Interval, ts: f64, k: usize, len: usize) -> Result<(usize, usize, bool), StlError> {
    let a = i.a.num()?;
    let b = i.b.num()?;
    if !(a >= 0.0 && b >= a) || !a.is_finite() {
        return Err(StlError::Malformed(format!("interval [{a}, {b}]")));
    }
    let lo = k + (a / ts + 1e-9).floor() as usize;
    if b.is_infinite() {
        return Ok((lo, len.saturating_sub(1).max(k), true));
    }
    let hi = k + (b / ts - 1e-9).ceil().max(0.0) as usize;
    Ok((lo, hi.max(lo), false))
}

impl Eval<'_> {
    fn at(&mut self, f: &Formula, k: usize) -> Result<Tri, StlError> {
        let len = self.trace.len;
        if k >= len {
            return Ok(Tri::U);
        }
        Ok(match f {
            Formula::True => Tri::T,
            Formula::Pred { signal, cmp, threshold } => {
                let x = self.trace.channel(signal).ok_or_else(|| StlError::UnknownSignal(signal.clone()))?;
                Tri::from(cmp.holds(x[k], threshold.num()?))
            }
            Formula::Not(g) => self.at(g, k)?.not(),
            Formula::And(a, b) => {
                let va = self.at(a, k)?;
                if va == Tri::F {
                    return Ok(Tri::F);
                }
                va.and(self.at(b, k)?)
            }
            Formula::Until(i, lhs, rhs) => self.until(i, Some(lhs), rhs, k)?,
            Formula::Eventually(i, g) => self.until(i, None, g, k)?,
            Formula::Always(i, g) => self.always(i, g, k)?,
        })
    }

    /// `∃ k' ∈ window: rhs(k') ∧ ∀ k'' ∈ [k, k']: lhs(k'')`; `lhs = None` is ⊤.
    fn until(&mut self, i: &Interval, lhs: Option<&Formula>, rhs: &Formula, k: usize) -> Result<Tri, StlError> {
        let len = self.trace.len;
        let (lo, hi, clipped) = window(i, self.trace.ts, k, len)?;
        if clipped {
            self.clipped = true;
        }
        let mut prefix = Tri::T;
        let mut result = Tri::F;
        if let Some(l) = lhs {
            for j in k..lo.min(len) {
                prefix = prefix.and(self.at(l, j)?);
                if prefix == Tri::F {
                    return Ok(Tri::F);
                }
            }
        }
        for j in lo..=hi {
            if j >= len {
                if clipped {
                    break;
                }
                result = result.or(Tri::U);
                break;
            }
            if let Some(l) = lhs {
                prefix = prefix.and(self.at(l, j)?);
            }
            if prefix == Tri::F {
                break;
            }
            result = result.or(prefix.and(self.at(rhs, j)?));
            if result == Tri::T {
                break;
            }
        }
        Ok(result)
    }

    fn always(&mut self, i: &Interval, g: &Formula, k: usize) -> Result<Tri, StlError> {
        let len = self.trace.len;
        let (lo, hi, clipped) = window(i, self.trace.ts, k, len)?;
        if clipped {
            self.clipped = true;
        }
        let mut result = Tri::T;
        for j in lo..=hi {
            if j >= len {
                if !clipped {
                    result = result.and(Tri::U);
                }
                break;
            }
            result = result.and(self.at(g, j)?);
            if result == Tri::F {
                break;
            }
        }
        Ok(result)
    }
}

/// Evaluate `f` at sample `k`. Parameters must already be bound.
pub fn evaluate(f: &Formula, trace: &SampledTrace, k: usize) -> Result<Verdict, StlError> {
    if k >= trace.len() {
        return Err(StlError::OutOfTrace { index: k, len: trace.len() });
    }
    if let Some(p) = f.parameters().into_iter().next() {
        return Err(StlError::UnboundParameter(p));
    }
    let mut ev = Eval { trace, clipped: false };
    match ev.at(f, k)? {
        Tri::T => Ok(Verdict { value: true, clipped: ev.clipped }),
        Tri::F => Ok(Verdict { value: false, clipped: ev.clipped }),
        Tri::U => Err(StlError::InsufficientHorizon(k)),
    }
}

/// Empirical order check: on every trace, `f1` at sample 0 implies `f2`.
pub fn entails(f1: &Formula, f2: &Formula, traces: &[SampledTrace]) -> Result<bool, StlError> {
    Ok(counterexample(f1, f2, traces)?.is_none())
}

/// Index of the first trace where `f1` holds and `f2` fails.
pub fn counterexample(f1: &Formula, f2: &Formula, traces: &[SampledTrace]) -> Result<Option<usize>, StlError> {
    for (idx, tr) in traces.iter().enumerate() {
        if evaluate(f1, tr, 0)?.value && !evaluate(f2, tr, 0)?.value {
            return Ok(Some(idx));
        }
    }
    Ok(None)
}

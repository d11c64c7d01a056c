//! Bottom-up table evaluation of the STL semantics, written independently of
//! the library's recursive monitor, plus random formula/trace generators.

// Folds over unknown cells must not short-circuit.
#![allow(clippy::manual_try_fold)]

use netcbf::stl::{Cmp, Formula, Interval, SampledTrace, Value};
use rand::Rng;
use std::collections::BTreeMap;

/// Three-valued truth: `None` marks a sample outside the trace.
pub type Cell = Option<bool>;

fn and3(a: Cell, b: Cell) -> Cell {
    match (a, b) {
        (Some(false), _) | (_, Some(false)) => Some(false),
        (Some(true), Some(true)) => Some(true),
        _ => None,
    }
}

fn or3(a: Cell, b: Cell) -> Cell {
    match (a, b) {
        (Some(true), _) | (_, Some(true)) => Some(true),
        (Some(false), Some(false)) => Some(false),
        _ => None,
    }
}

fn num(v: &Value) -> f64 {
    match v {
        Value::Num(x) => *x,
        Value::Param(p) | Value::NegParam(p) => panic!("unbound {p}"),
    }
}

/// Sample indices `(k + ⌊a/T_s⌋) ..= (k + ⌈b/T_s⌉)`, the infinite case
/// ending at the last sample.
fn indices(i: &Interval, ts: f64, k: usize, len: usize) -> Vec<usize> {
    let a = num(&i.a);
    let b = num(&i.b);
    let lo = k + (a / ts + 1e-9).floor() as usize;
    let hi = if b.is_infinite() { (len - 1).max(k) } else { k + (b / ts - 1e-9).ceil().max(0.0) as usize };
    (lo..=hi.max(lo)).filter(|j| !(b.is_infinite() && *j >= len)).collect()
}

/// Truth table of `f` at every sample of the trace.
pub fn table(f: &Formula, tr: &SampledTrace) -> Vec<Cell> {
    let len = tr.len();
    let ts = tr.sample_time();
    let get = |t: &Vec<Cell>, j: usize| if j < len { t[j] } else { None };
    match f {
        Formula::True => vec![Some(true); len],
        Formula::Pred { signal, cmp, threshold } => {
            let x = tr.channel(signal).unwrap();
            let th = num(threshold);
            x.iter()
                .map(|v| {
                    Some(match cmp {
                        Cmp::Ge => *v >= th,
                        Cmp::Gt => *v > th,
                        Cmp::Le => *v <= th,
                        Cmp::Lt => *v < th,
                    })
                })
                .collect()
        }
        Formula::Not(g) => table(g, tr).into_iter().map(|c| c.map(|b| !b)).collect(),
        Formula::And(a, b) => table(a, tr).into_iter().zip(table(b, tr)).map(|(x, y)| and3(x, y)).collect(),
        Formula::Eventually(i, g) => {
            let tg = table(g, tr);
            (0..len).map(|k| indices(i, ts, k, len).into_iter().fold(Some(false), |acc, j| or3(acc, get(&tg, j)))).collect()
        }
        Formula::Always(i, g) => {
            let tg = table(g, tr);
            (0..len).map(|k| indices(i, ts, k, len).into_iter().fold(Some(true), |acc, j| and3(acc, get(&tg, j)))).collect()
        }
        Formula::Until(i, a, b) => {
            let ta = table(a, tr);
            let tb = table(b, tr);
            (0..len)
                .map(|k| {
                    indices(i, ts, k, len).into_iter().fold(Some(false), |acc, j| {
                        let through = (k..=j).fold(Some(true), |c, m| and3(c, get(&ta, m)));
                        or3(acc, and3(get(&tb, j), through))
                    })
                })
                .collect()
        }
    }
}

/// Whether any unbounded interval in `f` is evaluated (the clipped flag).
pub fn has_unbounded(f: &Formula) -> bool {
    match f {
        Formula::True | Formula::Pred { .. } => false,
        Formula::Not(g) => has_unbounded(g),
        Formula::And(a, b) => has_unbounded(a) || has_unbounded(b),
        Formula::Until(i, a, b) => num(&i.b).is_infinite() || has_unbounded(a) || has_unbounded(b),
        Formula::Always(i, g) | Formula::Eventually(i, g) => num(&i.b).is_infinite() || has_unbounded(g),
    }
}

const BOUNDS: [f64; 7] = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, f64::INFINITY];

fn interval<R: Rng>(rng: &mut R) -> Interval {
    let a = BOUNDS[rng.gen_range(0..5)];
    let b = loop {
        let b = BOUNDS[rng.gen_range(0..BOUNDS.len())];
        if b >= a {
            break b;
        }
    };
    Interval::new(a, b)
}

pub fn random_formula<R: Rng>(rng: &mut R, depth: usize) -> Formula {
    let leaf = depth == 0 || rng.gen_bool(0.2);
    if leaf {
        if rng.gen_bool(0.1) {
            return Formula::True;
        }
        let cmp = [Cmp::Ge, Cmp::Gt, Cmp::Le, Cmp::Lt][rng.gen_range(0..4)];
        let sig = if rng.gen_bool(0.5) { "x" } else { "y" };
        return Formula::pred(sig, cmp, (rng.gen_range(-4..=4) as f64) * 0.5);
    }
    let sub = |rng: &mut R| random_formula(rng, depth - 1);
    match rng.gen_range(0..5) {
        0 => Formula::not(sub(rng)),
        1 => Formula::and(sub(rng), sub(rng)),
        2 => Formula::Until(interval(rng), Box::new(sub(rng)), Box::new(sub(rng))),
        3 => Formula::Always(interval(rng), Box::new(sub(rng))),
        _ => Formula::Eventually(interval(rng), Box::new(sub(rng))),
    }
}

pub fn random_trace<R: Rng>(rng: &mut R) -> SampledTrace {
    let len = rng.gen_range(1..=20);
    let ts = if rng.gen_bool(0.5) { 1.0 } else { 0.5 };
    let mut ch = BTreeMap::new();
    for name in ["x", "y"] {
        ch.insert(name.to_string(), (0..len).map(|_| (rng.gen_range(-4..=4) as f64) * 0.5).collect());
    }
    SampledTrace::uniform(0.0, ts, ch).unwrap()
}

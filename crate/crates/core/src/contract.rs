//! Assume-guarantee contracts between subsystems.
//!
//! Node `i` maps a bound on its neighbours' outputs to the output bound its
//! own RCI guarantees, `λ_i`. A bound vector `y` is a valid contract when
//! `Λ(y) ≤ y`, in which case the product of the node RCIs is invariant for
//! the network. `λ_i` is sampled on a grid and replaced by its ceiling
//! lookup, which over-approximates it because it is nondecreasing.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::polytope::{Polytope, PolytopeError};
use crate::rci::{
    compute_mrci, compute_mrci_with_delay, DisturbanceSpec, LinearSubsystem, RciError, RciOptions, RciResult, RowCap,
};
use crate::serde_util;
use crate::stl::{evaluate, Cmp, Formula, SampledTrace, StlError, Value};

/// Componentwise slack used by every `≤` between bound vectors.
pub const VALIDITY_TOL: f64 = 1e-9;

const MAX_AXES: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContractError {
    #[error("coupling column {column} is not a positive multiple of the first")]
    NotSummable { column: usize },
    #[error("node {node}: value {value} above sampled range {max} on axis {axis}")]
    OutOfRange { node: usize, axis: usize, value: f64, max: f64 },
    #[error("node {node}: no finite guarantee at grid point {point:?}")]
    NoGuarantee { node: usize, point: Vec<usize> },
    #[error("no valid contract: node {node} left the sampled domain at iterate {iterate:?}")]
    NoValidContract { node: usize, iterate: Vec<f64> },
    #[error("small-gain condition violated: ν1·ν2 = {0}")]
    SmallGainViolated(f64),
    #[error("malformed: {0}")]
    Malformed(String),
    #[error(transparent)]
    Rci(#[from] RciError),
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
    #[error(transparent)]
    Stl(#[from] StlError),
}

/// One coupling axis: the weighted sum `Σ w·y_j` of neighbour bounds.
pub type AxisInputs = Vec<(usize, f64)>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelaySpec {
    pub omega_max: f64,
    pub tau: f64,
}

/// Everything needed to evaluate `λ_i` for one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeProblem {
    pub id: usize,
    /// One coupling column per axis.
    pub sys: LinearSubsystem,
    pub axes: Vec<AxisInputs>,
    #[serde(with = "serde_util::matrix")]
    pub template: DMatrix<f64>,
    #[serde(with = "serde_util::vector")]
    pub q0: DVector<f64>,
    /// Environment set over the exogenous inputs.
    pub exo: Polytope,
    #[serde(with = "serde_util::vector")]
    pub w_u_max: DVector<f64>,
    pub input: Polytope,
    #[serde(default)]
    pub caps: Vec<RowCap>,
    #[serde(default)]
    pub delay: Option<DelaySpec>,
    #[serde(default)]
    pub options: RciOptions,
}

impl NodeProblem {
    pub fn validate(&self) -> Result<(), ContractError> {
        self.sys.validate()?;
        if self.sys.coupling_dim() != self.axes.len() {
            return Err(ContractError::Malformed(format!("node {}: one coupling column per axis", self.id)));
        }
        if self.exo.dim() != self.sys.e_exo.ncols() {
            return Err(ContractError::Malformed(format!("node {}: exogenous set dimension", self.id)));
        }
        if self.template.nrows() != self.q0.len() || self.template.ncols() != self.sys.states() {
            return Err(ContractError::Malformed(format!("node {}: template shape", self.id)));
        }
        Ok(())
    }

    /// Axis values for a network bound vector.
    pub fn axis_values(&self, y: &[f64]) -> Vec<f64> {
        self.axes.iter().map(|ax| ax.iter().map(|&(j, w)| w * y[j]).sum()).collect()
    }

    /// Measured set `{|y_N,k| ≤ bounds_k} × D`.
    pub fn disturbance(&self, bounds: &[f64]) -> DisturbanceSpec {
        let coupling = Polytope::symmetric_box(bounds);
        let measured = if self.exo.dim() == 0 { coupling } else { coupling.product(&self.exo) };
        DisturbanceSpec { measured, w_u_max: self.w_u_max.clone(), input: self.input.clone() }
    }

    fn solve(&self, bounds: &[f64], floor: Option<&DVector<f64>>) -> Result<RciResult, RciError> {
        let dist = self.disturbance(bounds);
        match self.delay {
            Some(d) => compute_mrci_with_delay(
                &self.sys,
                &self.template,
                &self.q0,
                &dist,
                d.omega_max,
                d.tau,
                &self.caps,
                floor,
                &self.options,
            ),
            None => compute_mrci(&self.sys, &self.template, &self.q0, &dist, &self.caps, floor, &self.options),
        }
    }
}

/// `λ` at one coupling bound together with the RCI that certifies it.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaPoint {
    pub value: f64,
    pub rci: RciResult,
}

/// `max |c x|` over the RCI computed for the given axis bounds.
pub fn eval_lambda(node: &NodeProblem, bounds: &[f64]) -> Result<LambdaPoint, ContractError> {
    eval_lambda_from(node, bounds, None)
}

fn eval_lambda_from(
    node: &NodeProblem,
    bounds: &[f64],
    floor: Option<&DVector<f64>>,
) -> Result<LambdaPoint, ContractError> {
    if bounds.len() != node.axes.len() || bounds.iter().any(|b| !(*b >= 0.0)) {
        return Err(ContractError::Malformed(format!("node {}: bounds {bounds:?}", node.id)));
    }
    let rci = node.solve(bounds, floor)?;
    let value = rci.set.output_bound(&node.sys.output)?;
    Ok(LambdaPoint { value, rci })
}

/// Bound on the sum of summable signals.
pub fn combine_summable(bounds: &[f64]) -> f64 {
    bounds.iter().sum()
}

/// Collapse coupling columns that are positive multiples of one another into
/// a single column. The combined signal is the weighted average
/// `Σ w_j y_j` with `w_j ∝ ‖column_j‖`, so its bound stays in output units.
/// A node without neighbours gets one zero column and an empty axis.
pub fn combine_coupling(sys: &LinearSubsystem) -> Result<(LinearSubsystem, AxisInputs), ContractError> {
    let cols = sys.coupling_dim();
    if cols == 0 {
        let mut isolated = sys.clone();
        isolated.e_coupling = DMatrix::zeros(sys.states(), 1);
        return Ok((isolated, Vec::new()));
    }
    let reference = sys.e_coupling.column(0).into_owned();
    let norm2 = reference.norm_squared();
    if norm2 == 0.0 {
        return Err(ContractError::NotSummable { column: 0 });
    }
    let mut kappa = Vec::with_capacity(cols);
    for j in 0..cols {
        let c = sys.e_coupling.column(j);
        let k = reference.dot(&c) / norm2;
        let residual = (c - &reference * k).amax();
        if !(k > 0.0) || residual > 1e-9 * c.amax().max(1.0) {
            return Err(ContractError::NotSummable { column: j });
        }
        kappa.push(k);
    }
    let total: f64 = kappa.iter().sum();
    let mut combined = sys.clone();
    combined.e_coupling = DMatrix::from_column_slice(sys.states(), 1, (&reference * total).as_slice());
    let ids: Vec<usize> = if sys.neighbors.len() == cols { sys.neighbors.clone() } else { (0..cols).collect() };
    let axis = ids.iter().zip(&kappa).map(|(&j, k)| (j, k / total)).collect();
    Ok((combined, axis))
}

/// Sampled `λ_i` on a rectangular grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSamples {
    pub node: usize,
    pub inputs: Vec<AxisInputs>,
    /// Per axis, strictly increasing and starting at zero.
    pub axes: Vec<Vec<f64>>,
    /// Row-major over the grid, last axis fastest; `None` where no finite
    /// guarantee exists.
    pub values: Vec<Option<f64>>,
    pub monotone: bool,
    #[serde(default)]
    pub rcis: Vec<Option<RciResult>>,
}

impl LambdaSamples {
    /// Samples from known values, e.g. an analytic `λ`.
    pub fn from_values(
        node: usize,
        inputs: Vec<AxisInputs>,
        axes: Vec<Vec<f64>>,
        values: Vec<Option<f64>>,
    ) -> Result<Self, ContractError> {
        let mut s = Self { node, inputs, axes, values, monotone: true, rcis: Vec::new() };
        s.check_shape()?;
        s.rcis = vec![None; s.values.len()];
        s.monotone = s.is_monotone();
        Ok(s)
    }

    fn check_shape(&self) -> Result<(), ContractError> {
        if self.inputs.len() != self.axes.len() {
            return Err(ContractError::Malformed("one input list per axis".into()));
        }
        for ax in &self.axes {
            if ax.first() != Some(&0.0) || ax.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(ContractError::Malformed("axes must increase strictly from zero".into()));
            }
        }
        if self.values.len() != self.grid_size() {
            return Err(ContractError::Malformed("value count does not match the grid".into()));
        }
        Ok(())
    }

    fn grid_size(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.axes.len()];
        for a in (0..self.axes.len().saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * self.axes[a + 1].len();
        }
        strides
    }

    fn unflatten(&self, mut flat: usize) -> Vec<usize> {
        self.strides()
            .iter()
            .map(|s| {
                let i = flat / s;
                flat %= s;
                i
            })
            .collect()
    }

    /// Flat indices one step below `flat` along each axis.
    fn predecessors(&self, flat: usize) -> Vec<usize> {
        let idx = self.unflatten(flat);
        self.strides().iter().zip(&idx).filter(|(_, &i)| i > 0).map(|(s, _)| flat - s).collect()
    }

    fn is_monotone(&self) -> bool {
        (0..self.values.len()).all(|f| {
            self.predecessors(f).into_iter().all(|p| match (self.values[p], self.values[f]) {
                (Some(lo), Some(hi)) => hi >= lo - VALIDITY_TOL,
                (None, v) => v.is_none(),
                (Some(_), None) => true,
            })
        })
    }

    fn ceiling(&self, bounds: &[f64]) -> Result<usize, ContractError> {
        let strides = self.strides();
        let mut flat = 0;
        for (a, (&b, ax)) in bounds.iter().zip(&self.axes).enumerate() {
            let max = *ax.last().unwrap_or(&0.0);
            let i = ax.iter().position(|&g| g >= b - 1e-12).ok_or(ContractError::OutOfRange {
                node: self.node,
                axis: a,
                value: b,
                max,
            })?;
            flat += i * strides[a];
        }
        Ok(flat)
    }

    /// RCI stored at the ceiling grid point of `bounds`, if sampled by RCI.
    pub fn rci_at(&self, bounds: &[f64]) -> Result<Option<&RciResult>, ContractError> {
        let flat = self.ceiling(bounds)?;
        Ok(self.rcis.get(flat).and_then(Option::as_ref))
    }

    /// Sampled `λ_i` evaluated at a network bound vector.
    pub fn at_network(&self, y: &[f64]) -> Result<f64, ContractError> {
        let bounds: Vec<f64> = self.inputs.iter().map(|ax| ax.iter().map(|&(j, w)| w * y[j]).sum()).collect();
        lambda_inner(self, &bounds)
    }

    /// Grid points as `(axis values, λ)` rows for plotting.
    pub fn surface(&self) -> Vec<(Vec<f64>, Option<f64>)> {
        (0..self.values.len())
            .map(|f| {
                let idx = self.unflatten(f);
                (idx.iter().zip(&self.axes).map(|(&i, ax)| ax[i]).collect(), self.values[f])
            })
            .collect()
    }
}

/// Value at the componentwise smallest grid point `≥ bounds`.
pub fn lambda_inner(samples: &LambdaSamples, bounds: &[f64]) -> Result<f64, ContractError> {
    if bounds.len() != samples.axes.len() {
        return Err(ContractError::Malformed(format!("node {}: expected {} bounds", samples.node, samples.axes.len())));
    }
    let flat = samples.ceiling(bounds)?;
    samples.values[flat].ok_or_else(|| ContractError::NoGuarantee { node: samples.node, point: samples.unflatten(flat) })
}

/// Evaluate `λ` on `{0, Δ, …, axis_max}` per axis. Each point is warm-started
/// from the sets of its grid predecessors, so the recorded values are
/// nondecreasing; points above a divergent one are marked divergent too.
pub fn sample_epigraph(node: &NodeProblem, axis_max: f64, points: usize) -> Result<LambdaSamples, ContractError> {
    node.validate()?;
    if points < 2 || !(axis_max > 0.0) {
        return Err(ContractError::Malformed("need at least two points over a positive range".into()));
    }
    if node.axes.len() > MAX_AXES {
        return Err(ContractError::Malformed(format!(
            "node {}: {} coupling axes; combine summable neighbours first",
            node.id,
            node.axes.len()
        )));
    }
    let axis: Vec<f64> = (0..points).map(|k| axis_max * k as f64 / (points - 1) as f64).collect();
    let mut s = LambdaSamples {
        node: node.id,
        inputs: node.axes.clone(),
        axes: vec![axis; node.axes.len()],
        values: Vec::new(),
        monotone: true,
        rcis: Vec::new(),
    };
    let size = s.grid_size();
    s.values = vec![None; size];
    s.rcis = vec![None; size];
    for flat in 0..size {
        let preds = s.predecessors(flat);
        let mut floor: Option<DVector<f64>> = None;
        let mut blocked = false;
        for p in preds {
            match &s.rcis[p] {
                Some(r) => {
                    let q = r.set.offsets();
                    floor = Some(floor.map_or_else(|| q.clone(), |f| f.sup(q)));
                }
                None => blocked = true,
            }
        }
        if blocked {
            continue;
        }
        let idx = s.unflatten(flat);
        let bounds: Vec<f64> = idx.iter().zip(&s.axes).map(|(&i, ax)| ax[i]).collect();
        match eval_lambda_from(node, &bounds, floor.as_ref()) {
            Ok(pt) if pt.rci.converged && pt.value.is_finite() => {
                s.values[flat] = Some(pt.value);
                s.rcis[flat] = Some(pt.rci);
            }
            Ok(_) | Err(ContractError::Rci(RciError::Diverged { .. } | RciError::Infeasible { .. })) => {
                log::debug!("node {}: no finite guarantee at {bounds:?}", node.id);
            }
            Err(e) => return Err(e),
        }
    }
    s.monotone = s.is_monotone();
    Ok(s)
}

/// [`sample_epigraph`] for every node, in parallel.
pub fn sample_network(nodes: &[NodeProblem], axis_max: f64, points: usize) -> Result<Vec<LambdaSamples>, ContractError> {
    nodes.par_iter().map(|n| sample_epigraph(n, axis_max, points)).collect()
}

/// Network bound vector with the RCIs that certify it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractState {
    pub y_max: Vec<f64>,
    pub rcis: Vec<Option<RciResult>>,
    pub iterations: usize,
    /// `Λ(0), Λ²(0), …` as visited by the search.
    pub history: Vec<Vec<f64>>,
}

/// Where `Λ` comes from.
#[derive(Debug, Clone, Copy)]
pub enum LambdaSource<'a> {
    Samples(&'a [LambdaSamples]),
    Exact(&'a [NodeProblem]),
}

/// `Λ(y)` from samples (ceiling lookup) or from fresh RCI computations.
pub fn lambda_network(y: &[f64], source: LambdaSource<'_>) -> Result<Vec<f64>, ContractError> {
    match source {
        LambdaSource::Samples(s) => s.par_iter().map(|s| s.at_network(y)).collect(),
        LambdaSource::Exact(nodes) => {
            nodes.par_iter().map(|n| eval_lambda(n, &n.axis_values(y)).map(|p| p.value)).collect()
        }
    }
}

/// `Λ(y) ≤ y` componentwise within [`VALIDITY_TOL`].
pub fn check_validity(y_max: &[f64], source: LambdaSource<'_>) -> Result<bool, ContractError> {
    let lam = lambda_network(y_max, source)?;
    Ok(dominated(&lam, y_max))
}

fn dominated(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| *x <= *y + VALIDITY_TOL)
}

fn check_node_order(samples: &[LambdaSamples]) -> Result<(), ContractError> {
    match samples.iter().enumerate().find(|(i, s)| s.node != *i) {
        Some((i, _)) => Err(ContractError::Malformed(format!("samples[{i}] is not node {i}"))),
        None => Ok(()),
    }
}

fn escape(e: ContractError, y: &[f64]) -> ContractError {
    match e {
        ContractError::OutOfRange { node, .. } | ContractError::NoGuarantee { node, .. } => {
            ContractError::NoValidContract { node, iterate: y.to_vec() }
        }
        other => other,
    }
}

/// Least fixed point of the sampled `Λ` above `Λ(0)`.
pub fn search_contract(samples: &[LambdaSamples], max_iter: usize) -> Result<ContractState, ContractError> {
    check_node_order(samples)?;
    let n = samples.len();
    let zero = vec![0.0; n];
    let source = LambdaSource::Samples(samples);
    let mut y = lambda_network(&zero, source).map_err(|e| escape(e, &zero))?;
    let mut history = vec![y.clone()];
    for it in 1..=max_iter {
        let next = lambda_network(&y, source).map_err(|e| escape(e, &y))?;
        if dominated(&next, &y) {
            let rcis = samples
                .iter()
                .map(|s| {
                    let bounds: Vec<f64> =
                        s.inputs.iter().map(|ax| ax.iter().map(|&(j, w)| w * y[j]).sum()).collect();
                    s.rci_at(&bounds).map(|r| r.cloned())
                })
                .collect::<Result<_, _>>()?;
            return Ok(ContractState { y_max: y, rcis, iterations: it, history });
        }
        let node = (0..n).max_by(|&a, &b| (next[a] - y[a]).total_cmp(&(next[b] - y[b]))).unwrap_or(0);
        if it == max_iter {
            return Err(ContractError::NoValidContract { node, iterate: next });
        }
        y = next;
        history.push(y.clone());
    }
    Err(ContractError::NoValidContract { node: 0, iterate: y })
}

/// Parameter map between bound vectors.
pub type ParamMap = Box<dyn Fn(&[f64]) -> Result<Vec<f64>, ContractError> + Send + Sync>;

/// Parametric STL contract: environment and neighbour assumptions, a
/// guarantee, and the maps `λ̂` (assumption to guarantee parameters) and `Γ`
/// (guarantee to assumption parameters).
pub struct StlContract {
    pub assume_env: Formula,
    pub assume_neighbors: Formula,
    pub guarantee: Formula,
    pub assumption_params: Vec<String>,
    pub guarantee_params: Vec<String>,
    pub lambda_hat: ParamMap,
    pub gamma: ParamMap,
}

fn bind(f: &Formula, names: &[String], values: &[f64]) -> Formula {
    let map: HashMap<String, f64> = names.iter().cloned().zip(values.iter().copied()).collect();
    f.bind(&map)
}

/// `always (−$p ≤ s ≤ $p)` for each signal, conjoined.
pub fn bound_formula(signals: &[String], params: &[String]) -> Formula {
    signals
        .iter()
        .zip(params)
        .map(|(s, p)| {
            let le = Formula::Pred { signal: s.clone(), cmp: Cmp::Le, threshold: Value::Param(p.clone()) };
            let ge = Formula::Pred { signal: s.clone(), cmp: Cmp::Ge, threshold: Value::NegParam(p.clone()) };
            Formula::always(0.0, f64::INFINITY, Formula::and(le, ge))
        })
        .reduce(Formula::and)
        .unwrap_or(Formula::True)
}

impl StlContract {
    /// Output bounds on every node, with `λ̂` the sampled `Λ` and `Γ` the
    /// identity.
    pub fn bound_contract(samples: Vec<LambdaSamples>, signals: Vec<String>) -> Result<Self, ContractError> {
        check_node_order(&samples)?;
        if signals.len() != samples.len() {
            return Err(ContractError::Malformed("one signal per node".into()));
        }
        let params: Vec<String> = (0..samples.len()).map(|i| format!("y_{i}")).collect();
        let phi = bound_formula(&signals, &params);
        Ok(Self {
            assume_env: Formula::True,
            assume_neighbors: phi.clone(),
            guarantee: phi,
            assumption_params: params.clone(),
            guarantee_params: params,
            lambda_hat: Box::new(move |y| lambda_network(y, LambdaSource::Samples(&samples))),
            gamma: Box::new(|p| Ok(p.to_vec())),
        })
    }

    pub fn assumption(&self, p_af: &[f64]) -> Formula {
        Formula::and(self.assume_env.clone(), bind(&self.assume_neighbors, &self.assumption_params, p_af))
    }

    pub fn guarantee_at(&self, p_g: &[f64]) -> Formula {
        bind(&self.guarantee, &self.guarantee_params, p_g)
    }

    /// Whether `assumption ⇒ guarantee` holds on the trace at its first sample.
    pub fn holds_on(&self, trace: &SampledTrace, p_af: &[f64], p_g: &[f64]) -> Result<bool, ContractError> {
        let assumed = evaluate(&self.assumption(p_af), trace, 0)?.value;
        Ok(!assumed || evaluate(&self.guarantee_at(p_g), trace, 0)?.value)
    }
}

/// `p_g[k] = λ̂(p_af[k])`, `p_af[k+1] = Γ(p_g[k])` for `k < steps`. When a
/// trace is given, `p_af0` must satisfy the neighbour assumption on it.
pub fn iterate_contract(
    contract: &StlContract,
    p_af0: &[f64],
    steps: usize,
    trace: Option<&SampledTrace>,
) -> Result<Vec<Vec<f64>>, ContractError> {
    if let Some(tr) = trace {
        if !evaluate(&contract.assumption(p_af0), tr, 0)?.value {
            return Err(ContractError::Malformed("initial assumption fails on the trace".into()));
        }
    }
    let mut p_af = p_af0.to_vec();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let p_g = (contract.lambda_hat)(&p_af)?;
        p_af = (contract.gamma)(&p_g)?;
        out.push(p_g);
    }
    Ok(out)
}

/// Closed-form bounds for two nodes with `‖y₁‖ ≤ μ₁‖d₁‖ + ν₁‖y₂‖` and
/// `‖y₂‖ ≤ μ₂‖d₂‖ + ν₂‖y₁‖`.
pub fn small_gain_bounds(mu1: f64, mu2: f64, nu1: f64, nu2: f64, d1: f64, d2: f64) -> Result<(f64, f64), ContractError> {
    if [mu1, mu2, nu1, nu2, d1, d2].iter().any(|v| !(*v >= 0.0)) {
        return Err(ContractError::Malformed("small-gain parameters must be nonnegative".into()));
    }
    let loop_gain = nu1 * nu2;
    if loop_gain >= 1.0 {
        return Err(ContractError::SmallGainViolated(loop_gain));
    }
    let den = 1.0 - loop_gain;
    Ok(((mu1 * d1 + mu2 * nu1 * d2) / den, (mu1 * nu2 * d1 + mu2 * d2) / den))
}

//! Contingency recovery: a delay-constrained reference plan computed once by
//! a condensed QP, error tubes from the RCI machinery, and barrier-function
//! tracking of the plan.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cbf::{CbfError, Supervisor};
use crate::contract::{eval_lambda, ContractError, NodeProblem};
use crate::grid::{GridNetwork, LinearNetwork};
use crate::optim::{solve_qp, OptimError, QpProblem};
use crate::polytope::Polytope;
use crate::rci::RciResult;

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("source bus {0} is not in the network")]
    SourceMissing(usize),
    #[error("reference plan infeasible at step {step} on bus {bus}")]
    PlanInfeasible { step: usize, bus: usize },
    #[error("invalid plan setup: {0}")]
    Invalid(String),
    #[error("Riccati iteration did not converge")]
    Riccati,
    #[error(transparent)]
    Contract(#[from] ContractError),
    #[error(transparent)]
    Cbf(#[from] CbfError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("io: {0}")]
    Io(String),
}

/// Per-bus number of samples before the plan reaches the bus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayStructure {
    /// Source bus id.
    pub source: usize,
    pub edges_per_step: usize,
    /// Activation step per bus index; `tp` for buses the plan never reaches.
    pub activation: Vec<usize>,
}

impl DelayStructure {
    pub fn is_active(&self, bus: usize, t: usize) -> bool {
        t >= self.activation[bus]
    }

    /// Activation step keyed by bus id.
    pub fn by_id(&self, net: &GridNetwork) -> Vec<(usize, usize)> {
        net.buses.iter().zip(&self.activation).map(|(b, &a)| (b.id, a)).collect()
    }
}

/// Activation step `⌈hops / edges_per_step⌉` from a breadth-first search over
/// in-service lines.
pub fn delay_structure(
    net: &GridNetwork,
    source: usize,
    edges_per_step: usize,
    tp: usize,
) -> Result<DelayStructure, MpcError> {
    let s = net.index_of(source).filter(|&i| net.buses[i].in_service).ok_or(MpcError::SourceMissing(source))?;
    if edges_per_step == 0 {
        return Err(MpcError::Invalid("edges per step must be positive".into()));
    }
    let n = net.len();
    let mut adj = vec![Vec::new(); n];
    for (i, j, _) in net.active_lines() {
        adj[i].push(j);
        adj[j].push(i);
    }
    let mut hops = vec![None; n];
    hops[s] = Some(0usize);
    let mut queue = VecDeque::from([s]);
    while let Some(v) = queue.pop_front() {
        let h = hops[v].unwrap_or(0);
        for &w in &adj[v] {
            if hops[w].is_none() {
                hops[w] = Some(h + 1);
                queue.push_back(w);
            }
        }
    }
    let activation = hops
        .iter()
        .enumerate()
        .map(|(i, h)| match h {
            Some(h) => h.div_ceil(edges_per_step).min(tp),
            None => {
                if net.buses[i].in_service {
                    log::warn!("bus {} is unreachable from bus {source}; it never acts", net.buses[i].id);
                }
                tp
            }
        })
        .collect();
    Ok(DelayStructure { source, edges_per_step, activation })
}

/// Stage and terminal weights of the reference plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcWeights {
    pub q_theta: f64,
    pub q_omega: f64,
    pub r: f64,
    /// Terminal weight as a multiple of the stage weight.
    pub terminal: f64,
}

impl Default for MpcWeights {
    fn default() -> Self {
        Self { q_theta: 10.0, q_omega: 100.0, r: 1.0, terminal: 10.0 }
    }
}

impl MpcWeights {
    fn state_weights(&self, generator: &[bool]) -> DVector<f64> {
        let mut w = Vec::new();
        for &g in generator {
            w.push(self.q_theta);
            if g {
                w.push(self.q_omega);
            }
        }
        DVector::from_vec(w)
    }
}

/// Everything the planner needs, in coordinates relative to the target.
#[derive(Debug, Clone)]
pub struct PlanSetup<'a> {
    /// Discrete linear network at the target operating point.
    pub model: &'a LinearNetwork,
    pub generator: &'a [bool],
    pub bus_ids: &'a [usize],
    /// Initial state minus the target.
    pub x0: DVector<f64>,
    /// Absolute target state (angles, then frequency for generators).
    pub x_star: DVector<f64>,
    /// Input that holds the plant at the target.
    pub u_ss: DVector<f64>,
    pub u_max: &'a [f64],
    /// Predicted disturbance per step; zero when absent.
    pub d_hat: Option<&'a [DVector<f64>]>,
    pub omega_ff: f64,
    pub weights: MpcWeights,
    pub delay: &'a DelayStructure,
    pub tp: usize,
    pub ts: f64,
}

/// Planned states and inputs. States are stored relative to `x_star`,
/// inputs are absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTrajectory {
    pub ts: f64,
    pub tp: usize,
    pub bus_ids: Vec<usize>,
    pub generator: Vec<bool>,
    pub x_star: Vec<f64>,
    pub u_ss: Vec<f64>,
    /// `x̂(0..=len)`.
    pub x_hat: Vec<Vec<f64>>,
    /// `û(0..len)`.
    pub u_hat: Vec<Vec<f64>>,
    pub d_hat: Vec<Vec<f64>>,
    pub cost: f64,
    /// Largest stationarity residual of the plan QP.
    pub kkt_residual: f64,
}

impl ReferenceTrajectory {
    pub fn len(&self) -> usize {
        self.u_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u_hat.is_empty()
    }

    /// Deviation `x̂(t) − x*`; held after the last step.
    pub fn state(&self, t: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.x_hat[t.min(self.x_hat.len() - 1)])
    }

    /// Absolute planned input; `u_ss` after the last step.
    pub fn input(&self, t: usize) -> DVector<f64> {
        match self.u_hat.get(t) {
            Some(u) => DVector::from_column_slice(u),
            None => DVector::from_column_slice(&self.u_ss),
        }
    }

    pub fn disturbance(&self, t: usize) -> DVector<f64> {
        match self.d_hat.get(t) {
            Some(d) => DVector::from_column_slice(d),
            None => DVector::zeros(self.u_ss.len()),
        }
    }

    /// Continue the recursion with `û = u_ss − K x̂` for `steps` more samples.
    pub fn extend(&mut self, model: &LinearNetwork, gain: &DMatrix<f64>, steps: usize) {
        let u_ss = DVector::from_column_slice(&self.u_ss);
        let mut x = self.state(self.x_hat.len() - 1);
        for _ in 0..steps {
            let u = &u_ss - gain * &x;
            x = &model.a * &x + &model.b * (&u - &u_ss);
            self.u_hat.push(u.iter().copied().collect());
            self.d_hat.push(vec![0.0; u_ss.len()]);
            self.x_hat.push(x.iter().copied().collect());
        }
    }

    /// Largest `|x̂(t+1) − (A x̂ + B(û − u_ss) + E d̂)|` over the trajectory.
    pub fn recursion_residual(&self, model: &LinearNetwork) -> f64 {
        let u_ss = DVector::from_column_slice(&self.u_ss);
        (0..self.len())
            .map(|t| {
                let next = &model.a * self.state(t) + &model.b * (self.input(t) - &u_ss) + &model.e * self.disturbance(t);
                (next - self.state(t + 1)).amax()
            })
            .fold(0.0, f64::max)
    }

    /// CSV with absolute planned angles, generator frequencies and inputs.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), MpcError> {
        let io = |e: csv::Error| MpcError::Io(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend(self.bus_ids.iter().map(|id| format!("theta_{id}")));
        header.extend(self.bus_ids.iter().zip(&self.generator).filter(|p| *p.1).map(|(id, _)| format!("omega_{id}")));
        header.extend(self.bus_ids.iter().map(|id| format!("u_{id}")));
        w.write_record(&header).map_err(io)?;
        for t in 0..self.x_hat.len() {
            let x = &self.x_hat[t];
            let (mut thetas, mut omegas) = (Vec::new(), Vec::new());
            let mut k = 0;
            for &g in &self.generator {
                thetas.push(x[k] + self.x_star[k]);
                k += 1;
                if g {
                    omegas.push(x[k] + self.x_star[k]);
                    k += 1;
                }
            }
            let u = self.input(t);
            let mut row = vec![format!("{}", t as f64 * self.ts)];
            row.extend(thetas.iter().chain(&omegas).chain(u.iter()).map(|v| format!("{v}")));
            w.write_record(&row).map_err(io)?;
        }
        w.flush().map_err(|e| MpcError::Io(e.to_string()))
    }
}

/// Solve the condensed reference QP over the inputs each bus may use.
pub fn plan(setup: &PlanSetup<'_>) -> Result<ReferenceTrajectory, MpcError> {
    let model = setup.model;
    let (n, m, tp) = (model.a.nrows(), model.b.ncols(), setup.tp);
    if setup.x0.len() != n || setup.u_ss.len() != m || setup.u_max.len() != m || setup.delay.activation.len() != m {
        return Err(MpcError::Invalid("state or input dimension".into()));
    }
    if tp == 0 {
        return Err(MpcError::Invalid("horizon must be positive".into()));
    }
    let d_hat: Vec<DVector<f64>> = match setup.d_hat {
        Some(d) if d.len() >= tp => d[..tp].to_vec(),
        Some(_) => return Err(MpcError::Invalid("disturbance prediction shorter than the horizon".into())),
        None => vec![DVector::zeros(m); tp],
    };

    // Free inputs (bus, step) after activation.
    let vars: Vec<(usize, usize)> =
        (0..tp).flat_map(|t| (0..m).map(move |i| (i, t))).filter(|&(i, t)| setup.delay.is_active(i, t)).collect();
    let nv = vars.len();

    // Free response f(t) and input map Γ(t) for t = 1..=tp.
    let mut powers = vec![DMatrix::identity(n, n)];
    for k in 1..=tp {
        powers.push(&model.a * &powers[k - 1]);
    }
    let drift: Vec<DVector<f64>> = d_hat.iter().map(|d| -&model.b * &setup.u_ss + &model.e * d).collect();
    let mut free = Vec::with_capacity(tp);
    let mut x = setup.x0.clone();
    for c in &drift {
        x = &model.a * &x + c;
        free.push(x.clone());
    }
    let mut gamma = DMatrix::zeros(n * tp, nv);
    for (v, &(i, s)) in vars.iter().enumerate() {
        let b = model.b.column(i);
        for t in s + 1..=tp {
            gamma.view_mut((n * (t - 1), v), (n, 1)).copy_from(&(&powers[t - 1 - s] * b));
        }
    }
    let f = DVector::from_iterator(n * tp, free.iter().flat_map(|x| x.iter().copied()));

    let stage = setup.weights.state_weights(setup.generator);
    if stage.len() != n {
        return Err(MpcError::Invalid("generator flags do not match the state".into()));
    }
    let q = DVector::from_fn(n * tp, |k, _| {
        let w = stage[k % n];
        if k / n == tp - 1 {
            w * setup.weights.terminal
        } else {
            w
        }
    });
    let r = setup.weights.r;
    let gq = DMatrix::from_fn(n * tp, nv, |row, c| gamma[(row, c)] * q[row]);
    let mut hessian = gamma.transpose() * &gq * 2.0;
    for v in 0..nv {
        hessian[(v, v)] += 2.0 * r;
    }
    hessian = (&hessian + hessian.transpose()) * 0.5;
    let u_ref = DVector::from_iterator(nv, vars.iter().map(|&(i, _)| setup.u_ss[i]));
    let linear = gq.transpose() * &f * 2.0 - &u_ref * (2.0 * r);

    // Rows: frequency caps (upper, lower) per generator and step, then input bounds.
    let omega_rows: Vec<(usize, usize)> = (1..=tp)
        .flat_map(|t| {
            let mut k = 0;
            let mut out = Vec::new();
            for (i, &g) in setup.generator.iter().enumerate() {
                k += 1;
                if g {
                    out.push((t, i, k));
                    k += 1;
                }
            }
            out.into_iter().map(|(t, i, k)| (n * (t - 1) + k, t * m + i))
        })
        .collect();
    let rows = 2 * omega_rows.len() + 2 * nv;
    let mut a = DMatrix::zeros(rows, nv);
    let mut b = DVector::zeros(rows);
    let mut origin = Vec::with_capacity(rows);
    for (k, &(row, tag)) in omega_rows.iter().enumerate() {
        a.row_mut(2 * k).copy_from(&gamma.row(row));
        b[2 * k] = setup.omega_ff - f[row];
        a.row_mut(2 * k + 1).copy_from(&(-gamma.row(row)));
        b[2 * k + 1] = setup.omega_ff + f[row];
        origin.push(tag);
        origin.push(tag);
    }
    let base = 2 * omega_rows.len();
    for (v, &(i, t)) in vars.iter().enumerate() {
        a[(base + 2 * v, v)] = 1.0;
        b[base + 2 * v] = setup.u_max[i];
        a[(base + 2 * v + 1, v)] = -1.0;
        b[base + 2 * v + 1] = setup.u_max[i];
        origin.push(t * m + i);
        origin.push(t * m + i);
    }
    // Frequency rows whose free response already breaks the cap with no input to fix it.
    for (k, &(row, tag)) in omega_rows.iter().enumerate() {
        if gamma.row(row).amax() == 0.0 && (b[2 * k] < 0.0 || b[2 * k + 1] < 0.0) {
            return Err(MpcError::PlanInfeasible { step: tag / m, bus: setup.bus_ids[tag % m] });
        }
    }

    let qp = QpProblem::new(hessian, linear).with_ub(a, b);
    let sol = match solve_qp(&qp) {
        Ok(s) => s,
        Err(OptimError::Infeasible { constraint }) => {
            let tag = origin.get(constraint).copied().unwrap_or(0);
            return Err(MpcError::PlanInfeasible { step: tag / m, bus: setup.bus_ids[tag % m] });
        }
        Err(e) => return Err(e.into()),
    };
    let stationarity = (&qp.hessian * &sol.point + &qp.linear + qp.a_ub.transpose() * &sol.duals.ineq).amax();

    let mut u_hat = vec![vec![0.0; m]; tp];
    for (v, &(i, t)) in vars.iter().enumerate() {
        u_hat[t][i] = sol.point[v];
    }
    let states = &f + &gamma * &sol.point;
    let mut x_hat = vec![setup.x0.iter().copied().collect::<Vec<_>>()];
    for t in 0..tp {
        x_hat.push(states.rows(n * t, n).iter().copied().collect());
    }
    let cost = sol.value + (f.component_mul(&q)).dot(&f) + r * u_ref.dot(&u_ref);
    Ok(ReferenceTrajectory {
        ts: setup.ts,
        tp,
        bus_ids: setup.bus_ids.to_vec(),
        generator: setup.generator.to_vec(),
        x_star: setup.x_star.iter().copied().collect(),
        u_ss: setup.u_ss.iter().copied().collect(),
        x_hat,
        u_hat,
        d_hat: d_hat.iter().map(|d| d.iter().copied().collect()).collect(),
        cost,
        kkt_residual: stationarity,
    })
}

/// Discrete LQR gain `K` (for `u = −K x`) by iterating the Riccati recursion.
pub fn dlqr(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>, MpcError> {
    let mut p = q.clone();
    for _ in 0..100_000 {
        let btp = b.transpose() * &p;
        let s = r + &btp * b;
        let k = s.clone().lu().solve(&(&btp * a)).ok_or(MpcError::Riccati)?;
        let next = q + a.transpose() * &p * a - a.transpose() * &p * b * &k;
        let next = (&next + next.transpose()) * 0.5;
        let done = (&next - &p).amax() <= 1e-12 * next.amax().max(1.0);
        p = next;
        if done {
            let btp = b.transpose() * &p;
            return (r + &btp * b).lu().solve(&(&btp * a)).ok_or(MpcError::Riccati);
        }
    }
    Err(MpcError::Riccati)
}

/// Tube cross-section of one node for the given neighbour error bounds.
pub fn error_rci(node: &NodeProblem, coupling_bounds: &[f64]) -> Result<RciResult, MpcError> {
    Ok(eval_lambda(node, coupling_bounds)?.rci)
}

/// Largest `|ω|` half-width of a tube in the second state coordinate.
pub fn omega_halfwidth(tube: &Polytope) -> Result<f64, MpcError> {
    let up = tube.support_point(&DVector::from_vec(vec![0.0, 1.0])).map_err(ContractError::from)?.0;
    let down = tube.support_point(&DVector::from_vec(vec![0.0, -1.0])).map_err(ContractError::from)?.0;
    Ok(up.max(down))
}

/// Per-bus tracking controller: LQR feedback on the error, supervised so the
/// error stays in its tube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tracker {
    pub supervisor: Supervisor,
    #[serde(with = "crate::serde_util::matrix")]
    pub gain: DMatrix<f64>,
    pub u_max: f64,
}

impl Tracker {
    /// `u = û + Δu` with `Δu` the supervised `−K e`, inputs shifted by `û`.
    pub fn track(&self, e: &DVector<f64>, w_m: &DVector<f64>, u_hat: f64) -> Result<f64, MpcError> {
        let mut sup = self.supervisor.clone();
        sup.input = Polytope::from_box(&[-self.u_max - u_hat], &[self.u_max - u_hat]);
        let du0 = -(&self.gain * e);
        let du = sup.supervise(e, w_m, &du0)?;
        Ok(u_hat + du[0])
    }
}

//! End-to-end pipelines on a [`GridNetwork`]: per-bus RCIs composed by a
//! contract, barrier-function supervision of a legacy controller, and the
//! data they exchange.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cbf::{BarrierFunction, CbfError, Supervisor};
use crate::contract::{combine_coupling, sample_network, search_contract, ContractError, ContractState, LambdaSamples, NodeProblem};
use crate::grid::{
    discretize, reach, simulate, ContingencyEvent, ControlOutput, EventKind, FlowModel, GridError, GridNetwork,
    GridState, LegacyController, LegacyGains, Trace,
};
use crate::tube_mpc::{delay_structure, dlqr, omega_halfwidth, plan, DelayStructure, MpcError, MpcWeights, PlanSetup, ReferenceTrajectory, Tracker};
use crate::polytope::Polytope;
use crate::rci::{fan_template, interval_template, LinearSubsystem, RciOptions, RowCap};
use crate::stl::{evaluate, Formula, StlError};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Contract(#[from] ContractError),
    #[error(transparent)]
    Cbf(#[from] CbfError),
    #[error(transparent)]
    Stl(#[from] StlError),
    #[error("contract bound {bound} on bus {bus} exceeds the angle budget {budget}")]
    BudgetExceeded { bus: usize, bound: f64, budget: f64 },
    #[error("no RCI stored for bus {0}")]
    MissingRci(usize),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error("tube frequency half-width {fb} leaves no room below omega_max {omega_max}")]
    NoFeedforwardRoom { fb: f64, omega_max: f64 },
}

fn default_ts() -> f64 {
    0.05
}

/// Synthesis parameters for the safety pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SafetyConfig {
    #[serde(default = "default_ts")]
    pub ts: f64,
    /// Angle deviation budget (rad) assumed when bounding the linearization
    /// error; the contract must land inside it.
    pub theta_budget: f64,
    /// Fraction of `ω_max` used as the frequency cap of the RCIs.
    pub omega_margin: f64,
    /// Assumed bound on neighbour `|θ̇|` within one sample (rad/s).
    pub angle_rate: f64,
    /// Relative margin on the unmeasured-disturbance bound.
    pub w_u_margin: f64,
    pub fan_directions: usize,
    pub seed_offset: f64,
    pub points: usize,
    pub max_search_iter: usize,
    /// Barrier decay `γ(s) = α s`. Minimal RCIs are tight around the one-step
    /// disturbance reach, so only `α = 0` is feasible everywhere inside them.
    pub alpha: f64,
    pub rci: RciOptions,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self {
            ts: default_ts(),
            theta_budget: 0.05,
            omega_margin: 0.9,
            angle_rate: 0.05,
            w_u_margin: 0.1,
            fan_directions: 8,
            seed_offset: 1e-3,
            points: 9,
            max_search_iter: 200,
            alpha: 0.0,
            rci: RciOptions::default(),
        }
    }
}

/// Discrete per-bus model with its combined coupling axis and disturbance
/// bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct BusModel {
    pub sys: LinearSubsystem,
    pub axis: Vec<(usize, f64)>,
    pub w_u_max: DVector<f64>,
}

/// `∫|e^{As}g|ds` quadrature nodes.
const REACH_POINTS: usize = 41;

/// Discretize every bus, combine its neighbour couplings into one axis and
/// bound the unmeasured disturbance: sine linearization error over the
/// angle budget plus the drift of held neighbour angles within a sample.
pub fn bus_models(net: &GridNetwork, theta0: &[f64], cfg: &SafetyConfig) -> Result<Vec<BusModel>, ScenarioError> {
    let cont = net.linearize(theta0)?;
    let budget = vec![cfg.theta_budget; net.len()];
    let lin_err = net.linearization_error_bound(theta0, &net.line_deviation(&budget));
    cont.iter()
        .enumerate()
        .map(|(i, c)| {
            let disc = discretize(c, cfg.ts);
            let (sys, axis) = combine_coupling(&disc)?;
            let scale = net.buses[i].rate_scale();
            let exo = c.e_exo.column(0).into_owned();
            let mut w = reach(&c.a, &exo, cfg.ts, REACH_POINTS) * (lin_err[i] * scale);
            for k in 0..c.coupling_dim() {
                let col = c.e_coupling.column(k).into_owned();
                w += reach(&c.a, &col, cfg.ts, REACH_POINTS) * (cfg.angle_rate * cfg.ts);
            }
            let w_u_max = w * (1.0 + cfg.w_u_margin);
            Ok(BusModel { sys, axis, w_u_max })
        })
        .collect()
}

/// Template, seed and caps for one bus: an angle/frequency fan with capped
/// frequency rows on generators, an interval on loads.
fn bus_template(net: &GridNetwork, i: usize, cfg: &SafetyConfig) -> (DMatrix<f64>, Vec<RowCap>) {
    if net.buses[i].is_generator() {
        let (p, _) = fan_template(cfg.fan_directions, [cfg.theta_budget, net.omega_max]);
        let caps = (0..p.nrows())
            .filter(|&k| p[(k, 0)].abs() < 1e-12 && p[(k, 1)] != 0.0)
            .map(|k| (k, cfg.omega_margin * net.omega_max * p[(k, 1)].abs()))
            .collect();
        (p, caps)
    } else {
        (interval_template() / cfg.theta_budget, Vec::new())
    }
}

pub fn node_problems(net: &GridNetwork, theta0: &[f64], cfg: &SafetyConfig) -> Result<Vec<NodeProblem>, ScenarioError> {
    let models = bus_models(net, theta0, cfg)?;
    Ok(models
        .into_iter()
        .enumerate()
        .map(|(i, m)| {
            let bus = &net.buses[i];
            let (template, caps) = bus_template(net, i, cfg);
            let mut options = cfg.rci.clone();
            if bus.is_generator() {
                options.feedback_columns = Some(vec![1]);
            }
            NodeProblem {
                id: i,
                sys: m.sys,
                axes: vec![m.axis],
                q0: DVector::from_element(template.nrows(), cfg.seed_offset),
                template,
                exo: Polytope::symmetric_box(&[bus.d_max]),
                w_u_max: m.w_u_max,
                input: Polytope::symmetric_box(&[bus.u_max]),
                caps,
                delay: None,
                options,
            }
        })
        .collect())
}

/// Contract, RCIs and supervisors for the whole network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyDesign {
    pub theta0: Vec<f64>,
    pub nodes: Vec<NodeProblem>,
    pub samples: Vec<LambdaSamples>,
    pub contract: ContractState,
    pub supervisors: Vec<Supervisor>,
}

pub fn design_safety(net: &GridNetwork, cfg: &SafetyConfig) -> Result<SafetyDesign, ScenarioError> {
    let theta0 = net.operating_point()?;
    let nodes = node_problems(net, &theta0, cfg)?;
    let samples = sample_network(&nodes, cfg.theta_budget, cfg.points)?;
    let contract = search_contract(&samples, cfg.max_search_iter)?;
    for (i, &y) in contract.y_max.iter().enumerate() {
        if y > cfg.theta_budget {
            return Err(ScenarioError::BudgetExceeded { bus: net.buses[i].id, bound: y, budget: cfg.theta_budget });
        }
    }
    let supervisors = nodes
        .iter()
        .zip(&contract.rcis)
        .map(|(n, r)| {
            let r = r.as_ref().ok_or(ScenarioError::MissingRci(net.buses[n.id].id))?;
            let barrier = BarrierFunction::new(r.set.clone(), cfg.alpha)?;
            Ok(Supervisor::new(barrier, n.sys.clone(), r.w_u_max.clone(), n.input.clone())?.with_tolerance(r.gap))
        })
        .collect::<Result<Vec<_>, ScenarioError>>()?;
    Ok(SafetyDesign { theta0, nodes, samples, contract, supervisors })
}

/// Sinusoidal injection deviations at every bus with `d_max > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SineDisturbance {
    /// Multiple of `d_max`.
    pub scale: f64,
    /// Hz.
    pub frequency: f64,
}

impl Default for SineDisturbance {
    fn default() -> Self {
        Self { scale: 1.0, frequency: 0.1 }
    }
}

impl SineDisturbance {
    pub fn at(&self, net: &GridNetwork, t: f64) -> Vec<f64> {
        let n = net.len().max(1) as f64;
        net.buses
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let phase = 2.0 * std::f64::consts::PI * i as f64 / n;
                self.scale * b.d_max * (2.0 * std::f64::consts::PI * self.frequency * t + phase).sin()
            })
            .collect()
    }
}

/// Bus-local state in the coordinates of its linear model.
pub fn local_state(net: &GridNetwork, i: usize, dtheta: f64, omega: f64) -> DVector<f64> {
    if net.buses[i].is_generator() {
        DVector::from_vec(vec![dtheta, omega])
    } else {
        DVector::from_element(1, dtheta)
    }
}

/// Simulate the legacy controller, optionally behind the supervisors.
pub fn run_safety(
    net: &GridNetwork,
    design: &SafetyDesign,
    legacy: LegacyGains,
    disturbance: SineDisturbance,
    supervised: bool,
    t_end: f64,
    ts: f64,
) -> Result<Trace, ScenarioError> {
    let theta0 = &design.theta0;
    let mut legacy = LegacyController::new(legacy, net.len(), ts);
    let controller = |s: &crate::grid::Sample<'_>| -> Result<ControlOutput, GridError> {
        let dtheta: Vec<f64> = s.state.theta.iter().zip(theta0).map(|(a, b)| a - b).collect();
        let u0 = legacy.control(s.net, &dtheta, &s.state.omega);
        if !supervised {
            return Ok(ControlOutput { applied: u0.clone(), legacy: u0 });
        }
        let mut applied = Vec::with_capacity(u0.len());
        for (i, sup) in design.supervisors.iter().enumerate() {
            let x = local_state(s.net, i, dtheta[i], s.state.omega[i]);
            let axis = &design.nodes[i].axes[0];
            let coupling: f64 = axis.iter().map(|&(j, w)| w * dtheta[j]).sum();
            let w_m = DVector::from_vec(vec![coupling, s.d[i]]);
            let u = sup
                .supervise(&x, &w_m, &DVector::from_element(1, u0[i]))
                .map_err(|e| GridError::Controller { t: s.t, msg: format!("bus {}: {e}", s.net.buses[i].id) })?;
            let limit = s.net.buses[i].u_max;
            applied.push(u[0].clamp(-limit, limit));
        }
        Ok(ControlOutput { legacy: u0, applied })
    };
    Ok(simulate(net, &GridState::at_rest(theta0), controller, |_, t| disturbance.at(net, t), &[], t_end, ts)?)
}

/// `always (|dtheta_i| ≤ y_i)` per bus, evaluated on the trace.
pub fn angle_verdicts(net: &GridNetwork, trace: &Trace, theta0: &[f64], y: &[f64]) -> Result<Vec<bool>, ScenarioError> {
    let st = trace.to_stl(theta0)?;
    net.buses
        .iter()
        .zip(y)
        .map(|(b, &bound)| {
            let f = Formula::parse(&format!(
                "(always 0 inf (and (le dtheta_{id} {bound:e}) (ge dtheta_{id} {neg:e})))",
                id = b.id,
                neg = -bound
            ))?;
            Ok(evaluate(&f, &st, 0)?.value)
        })
        .collect()
}

/// Bus-loss (or other) contingency handled by the tube MPC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContingencyConfig {
    pub event: EventKind,
    /// Bus that detects the event and computes the plan.
    pub source: usize,
    #[serde(default = "one_edge")]
    pub edges_per_step: usize,
    #[serde(default = "default_tp")]
    pub tp: usize,
    #[serde(default)]
    pub weights: MpcWeights,
    /// LQR weights of the fixed-point controller that takes over after the
    /// plan horizon (`terminal` unused).
    #[serde(default = "default_settle_weights")]
    pub settle_weights: MpcWeights,
    /// Tube synthesis; the angle budget is widened by the operating-point shift.
    #[serde(default)]
    pub tube: SafetyConfig,
    #[serde(default)]
    pub disturbance: SineDisturbance,
    /// Simulated time after the event (s).
    #[serde(default = "default_tail")]
    pub t_end: f64,
}

impl ContingencyConfig {
    /// Defaults for everything but the event and its source bus.
    pub fn new(event: EventKind, source: usize) -> Self {
        Self {
            event,
            source,
            edges_per_step: one_edge(),
            tp: default_tp(),
            weights: MpcWeights::default(),
            settle_weights: default_settle_weights(),
            tube: SafetyConfig::default(),
            disturbance: SineDisturbance::default(),
            t_end: default_tail(),
        }
    }
}

fn one_edge() -> usize {
    1
}

fn default_tp() -> usize {
    50
}

fn default_settle_weights() -> MpcWeights {
    MpcWeights { q_theta: 100.0, ..Default::default() }
}

fn default_tail() -> f64 {
    10.0
}

/// Everything computed when the contingency is detected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContingencyDesign {
    pub theta0: Vec<f64>,
    pub theta_star: Vec<f64>,
    pub p_in: Vec<f64>,
    pub delay: DelayStructure,
    pub nodes: Vec<NodeProblem>,
    pub contract: ContractState,
    pub trackers: Vec<Tracker>,
    pub reference: ReferenceTrajectory,
    pub omega_fb: f64,
    pub omega_ff: f64,
}

fn stacked(net: &GridNetwork, theta: &[f64]) -> DVector<f64> {
    let mut out = Vec::new();
    for (i, b) in net.buses.iter().enumerate() {
        out.push(theta[i]);
        if b.is_generator() {
            out.push(0.0);
        }
    }
    DVector::from_vec(out)
}

pub fn design_contingency(net: &GridNetwork, cfg: &ContingencyConfig) -> Result<ContingencyDesign, ScenarioError> {
    let ts = cfg.tube.ts;
    let theta0 = net.operating_point()?;
    let after = net.with_event(&cfg.event)?;
    let (mut theta_star, p_in) = after.new_operating_point(FlowModel::Ac)?;
    // Flows depend on angle differences only; use the rotation nearest the
    // pre-event angles so the plan does not drive a common-mode shift.
    let live: Vec<usize> = (0..after.len()).filter(|&i| after.buses[i].in_service).collect();
    let rotation = live.iter().map(|&i| theta0[i] - theta_star[i]).sum::<f64>() / live.len().max(1) as f64;
    for (i, b) in after.buses.iter().enumerate() {
        theta_star[i] = if b.in_service { theta_star[i] + rotation } else { theta0[i] };
    }
    let mut target = after.clone();
    for (b, &p) in target.buses.iter_mut().zip(&p_in) {
        b.p_in = p;
    }
    let u_ss = DVector::from_iterator(net.len(), net.buses.iter().zip(&p_in).map(|(b, p)| b.p_in - p));
    let model = target.linearize_network(&theta_star)?.discretize(ts);
    let delay = delay_structure(&after, cfg.source, cfg.edges_per_step, cfg.tp)?;

    let shift = theta0.iter().zip(&theta_star).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let tube_cfg = SafetyConfig { theta_budget: cfg.tube.theta_budget + shift, ..cfg.tube.clone() };
    let nodes = node_problems(&target, &theta_star, &tube_cfg)?;
    let samples = sample_network(&nodes, tube_cfg.theta_budget, tube_cfg.points)?;
    let contract = search_contract(&samples, tube_cfg.max_search_iter)?;

    let mut omega_fb: f64 = 0.0;
    let mut trackers = Vec::with_capacity(nodes.len());
    for (i, n) in nodes.iter().enumerate() {
        let bus = &target.buses[i];
        let rci = contract.rcis[i].as_ref().ok_or(ScenarioError::MissingRci(bus.id))?;
        if bus.is_generator() && bus.in_service {
            omega_fb = omega_fb.max(omega_halfwidth(&rci.set)?);
        }
        let q = if bus.is_generator() {
            DMatrix::from_diagonal(&DVector::from_vec(vec![cfg.weights.q_theta, cfg.weights.q_omega]))
        } else {
            DMatrix::from_element(1, 1, cfg.weights.q_theta)
        };
        let k = dlqr(&n.sys.a, &n.sys.b, &q, &DMatrix::from_element(1, 1, cfg.weights.r))?;
        let barrier = BarrierFunction::new(rci.set.clone(), tube_cfg.alpha)?;
        let supervisor = Supervisor::new(barrier, n.sys.clone(), rci.w_u_max.clone(), n.input.clone())?
            .with_tolerance(rci.gap);
        trackers.push(Tracker { supervisor, gain: k, u_max: bus.u_max });
    }
    let omega_ff = net.omega_max - omega_fb;
    if !(omega_ff > 0.0) {
        return Err(ScenarioError::NoFeedforwardRoom { fb: omega_fb, omega_max: net.omega_max });
    }

    let x_star = stacked(net, &theta_star);
    let x0 = stacked(net, &theta0) - &x_star;
    let generator: Vec<bool> = net.buses.iter().map(|b| b.is_generator()).collect();
    let bus_ids: Vec<usize> = net.buses.iter().map(|b| b.id).collect();
    let u_max: Vec<f64> = after.buses.iter().map(|b| if b.in_service { b.u_max } else { 0.0 }).collect();
    let setup = PlanSetup {
        model: &model,
        generator: &generator,
        bus_ids: &bus_ids,
        x0,
        x_star,
        u_ss,
        u_max: &u_max,
        d_hat: None,
        omega_ff,
        weights: cfg.weights,
        delay: &delay,
        tp: cfg.tp,
        ts,
    };
    let mut reference = plan(&setup)?;
    let gain = network_gain(&target, &model, &generator, cfg.settle_weights)?;
    let tail = ((cfg.t_end / ts).ceil() as usize + 1).saturating_sub(cfg.tp);
    reference.extend(&model, &gain, tail);
    Ok(ContingencyDesign {
        theta0,
        theta_star,
        p_in,
        delay,
        nodes,
        contract,
        trackers,
        reference,
        omega_fb,
        omega_ff,
    })
}

/// Centralized LQR gain over in-service buses. Local gains are designed
/// against each bus's own restoring term and can leave the network's common
/// angle mode unstable, so the reference after the plan uses this one.
fn network_gain(
    net: &GridNetwork,
    model: &crate::grid::LinearNetwork,
    generator: &[bool],
    weights: MpcWeights,
) -> Result<DMatrix<f64>, ScenarioError> {
    let mut q = Vec::new();
    for (b, &g) in net.buses.iter().zip(generator) {
        let on = if b.in_service { 1.0 } else { 0.0 };
        q.push(weights.q_theta * on);
        if g {
            q.push(weights.q_omega * on);
        }
    }
    let mut b = model.b.clone();
    for (i, bus) in net.buses.iter().enumerate() {
        if !bus.in_service {
            b.column_mut(i).fill(0.0);
        }
    }
    let r = DMatrix::identity(net.len(), net.len()) * weights.r;
    Ok(dlqr(&model.a, &b, &DMatrix::from_diagonal(&DVector::from_vec(q)), &r)?)
}

/// Outcome of a contingency run.
#[derive(Debug, Clone)]
pub struct ContingencyRun {
    pub trace: Trace,
    /// Per bus, the largest tube-row violation `max_k (P_k e − q_k)` from one
    /// step after activation on; `None` for buses out of service.
    pub tube_violation: Vec<Option<f64>>,
    /// Largest `|θ − θ*|` or generator `|ω|` from `settle_time` on.
    pub settle_deviation: f64,
    pub settle_time: f64,
    /// Largest generator `|ω|` once every bus is active.
    pub max_omega_active: f64,
}

/// Simulate the event at `t = 0` from the pre-event equilibrium, with buses
/// idle until the plan reaches them and tracking their tube afterwards.
pub fn run_contingency(
    net: &GridNetwork,
    design: &ContingencyDesign,
    cfg: &ContingencyConfig,
) -> Result<ContingencyRun, ScenarioError> {
    let ts = cfg.tube.ts;
    let reference = &design.reference;
    let offsets = net.state_offsets();
    let mut errors: Vec<Vec<(usize, DVector<f64>)>> = vec![Vec::new(); net.len()];
    let controller = |s: &crate::grid::Sample<'_>| -> Result<ControlOutput, GridError> {
        let t = s.k;
        let x_ref = reference.state(t) + DVector::from_column_slice(&reference.x_star);
        let u_hat = reference.input(t);
        let d_hat = reference.disturbance(t);
        let mut applied = vec![0.0; s.net.len()];
        for (i, b) in s.net.buses.iter().enumerate() {
            if !b.in_service || !design.delay.is_active(i, t) {
                continue;
            }
            let e = local_state(s.net, i, s.state.theta[i], s.state.omega[i]) - x_ref.rows(offsets[i], b.states());
            let axis = &design.nodes[i].axes[0];
            let coupling: f64 = axis.iter().map(|&(j, w)| w * (s.state.theta[j] - x_ref[offsets[j]])).sum();
            let w_m = DVector::from_vec(vec![coupling, s.d[i] - d_hat[i]]);
            let u = design.trackers[i]
                .track(&e, &w_m, u_hat[i])
                .map_err(|err| GridError::Controller { t: s.t, msg: format!("bus {}: {err}", b.id) })?;
            applied[i] = u.clamp(-b.u_max, b.u_max);
            errors[i].push((t, e));
        }
        Ok(ControlOutput { legacy: u_hat.iter().copied().collect(), applied })
    };
    let events = [ContingencyEvent { time: 0.0, kind: cfg.event.clone() }];
    let trace = simulate(net, &GridState::at_rest(&design.theta0), controller, |_, t| cfg.disturbance.at(net, t), &events, cfg.t_end, ts)?;

    let after = net.with_event(&cfg.event)?;
    let mut tube_violation = Vec::with_capacity(net.len());
    for (i, b) in after.buses.iter().enumerate() {
        if !b.in_service {
            tube_violation.push(None);
            continue;
        }
        let set = &design.trackers[i].supervisor.barrier.set;
        let worst = errors[i]
            .iter()
            .filter(|(t, _)| *t > design.delay.activation[i])
            .map(|(_, e)| (set.normals() * e - set.offsets()).max())
            .fold(f64::NEG_INFINITY, f64::max);
        tube_violation.push(Some(worst));
    }
    let settle_time = cfg.tp as f64 * ts + 5.0;
    let last_activation = after
        .buses
        .iter()
        .zip(&design.delay.activation)
        .filter(|(b, _)| b.in_service)
        .map(|(_, &a)| a)
        .max()
        .unwrap_or(0);
    let (mut settle_deviation, mut max_omega_active) = (0.0f64, 0.0f64);
    for (k, &t) in trace.t.iter().enumerate() {
        for (i, b) in after.buses.iter().enumerate() {
            if !b.in_service {
                continue;
            }
            let omega = trace.omega[k][i];
            if b.is_generator() && k > last_activation {
                max_omega_active = max_omega_active.max(omega.abs());
            }
            if t >= settle_time - 1e-9 {
                let dev = (trace.theta[k][i] - design.theta_star[i]).abs();
                let w = if b.is_generator() { omega.abs() } else { 0.0 };
                settle_deviation = settle_deviation.max(dev).max(w);
            }
        }
    }
    Ok(ContingencyRun { trace, tube_violation, settle_deviation, settle_time, max_omega_active })
}

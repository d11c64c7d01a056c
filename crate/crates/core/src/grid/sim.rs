use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{GridError, GridNetwork};
use crate::stl::{SampledTrace, StlError};

/// RK4 substeps per sample.
pub const SUBSTEPS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    BusLoss { bus: usize },
    LineTrip { from: usize, to: usize },
    InjectionStep { bus: usize, delta: f64 },
}

impl std::fmt::Display for EventKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EventKind::BusLoss { bus } => write!(f, "bus_loss:{bus}"),
            EventKind::LineTrip { from, to } => write!(f, "line_trip:{from}-{to}"),
            EventKind::InjectionStep { bus, delta } => write!(f, "injection_step:{bus}:{delta}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContingencyEvent {
    pub time: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Angles and generator frequencies; `omega` entries of load buses are unused.
#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
}

impl GridState {
    pub fn at_rest(theta: &[f64]) -> Self {
        Self { theta: theta.to_vec(), omega: vec![0.0; theta.len()] }
    }
}

/// What a controller sees at sample `k`.
pub struct Sample<'a> {
    pub k: usize,
    pub t: f64,
    pub net: &'a GridNetwork,
    pub state: &'a GridState,
    /// `θ̇` per bus (equal to `ω` on generators).
    pub rate: &'a [f64],
    pub d: &'a [f64],
    /// Events applied at this sample.
    pub events: &'a [EventKind],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    pub legacy: Vec<f64>,
    pub applied: Vec<f64>,
}

/// Sampled simulation output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub ts: f64,
    pub bus_ids: Vec<usize>,
    pub generator: Vec<bool>,
    pub t: Vec<f64>,
    pub theta: Vec<Vec<f64>>,
    /// `θ̇` per bus; the generator frequency on generator buses.
    pub omega: Vec<Vec<f64>>,
    pub u0: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
    pub events: Vec<String>,
    pub islanded: bool,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Largest generator `|ω|` over the trace.
    pub fn max_generator_omega(&self) -> f64 {
        self.omega
            .iter()
            .flat_map(|row| row.iter().zip(&self.generator).filter(|p| *p.1).map(|p| p.0.abs()))
            .fold(0.0, f64::max)
    }

    /// Channels `dtheta_<id>` (deviation from `theta_ref`) and `omega_<id>`.
    pub fn to_stl(&self, theta_ref: &[f64]) -> Result<SampledTrace, StlError> {
        let mut ch = BTreeMap::new();
        for (i, id) in self.bus_ids.iter().enumerate() {
            ch.insert(format!("dtheta_{id}"), self.theta.iter().map(|r| r[i] - theta_ref[i]).collect());
            ch.insert(format!("omega_{id}"), self.omega.iter().map(|r| r[i]).collect());
        }
        SampledTrace::uniform(self.t.first().copied().unwrap_or(0.0), self.ts, ch)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), GridError> {
        let err = |e: csv::Error| GridError::Io(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        for id in &self.bus_ids {
            header.push(format!("theta_{id}"));
        }
        for (id, g) in self.bus_ids.iter().zip(&self.generator) {
            if *g {
                header.push(format!("omega_{id}"));
            }
        }
        for name in ["u0", "u", "d"] {
            header.extend(self.bus_ids.iter().map(|id| format!("{name}_{id}")));
        }
        header.push("event".into());
        w.write_record(&header).map_err(err)?;
        for k in 0..self.len() {
            let mut row = vec![self.t[k].to_string()];
            row.extend(self.theta[k].iter().map(f64::to_string));
            row.extend(self.omega[k].iter().zip(&self.generator).filter(|p| *p.1).map(|p| p.0.to_string()));
            for series in [&self.u0, &self.u, &self.d] {
                row.extend(series[k].iter().map(f64::to_string));
            }
            row.push(self.events[k].clone());
            w.write_record(&row).map_err(err)?;
        }
        w.flush().map_err(|e| GridError::Io(e.to_string()))
    }
}

/// `(θ̇, ω̇)` of the nonlinear model with `u` and `d` held.
pub fn derivative(net: &GridNetwork, x: &GridState, u: &[f64], d: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = net.len();
    let flows = net.flows(&x.theta);
    let mut dtheta = vec![0.0; n];
    let mut domega = vec![0.0; n];
    for (i, b) in net.buses.iter().enumerate() {
        if !b.in_service {
            continue;
        }
        let power = net.net_injection(i) + d[i] - u[i] - flows[i];
        if b.is_generator() {
            dtheta[i] = x.omega[i];
            domega[i] = (power - b.damping * x.omega[i]) / b.inertia;
        } else {
            dtheta[i] = power / b.damping;
        }
    }
    (dtheta, domega)
}

fn axpy(x: &GridState, h: f64, k: &(Vec<f64>, Vec<f64>)) -> GridState {
    GridState {
        theta: x.theta.iter().zip(&k.0).map(|(a, b)| a + h * b).collect(),
        omega: x.omega.iter().zip(&k.1).map(|(a, b)| a + h * b).collect(),
    }
}

/// Advance by `ts` with `SUBSTEPS` classical RK4 steps.
pub fn step(net: &GridNetwork, x: &GridState, u: &[f64], d: &[f64], ts: f64) -> GridState {
    let h = ts / SUBSTEPS as f64;
    let mut x = x.clone();
    for _ in 0..SUBSTEPS {
        let k1 = derivative(net, &x, u, d);
        let k2 = derivative(net, &axpy(&x, h / 2.0, &k1), u, d);
        let k3 = derivative(net, &axpy(&x, h / 2.0, &k2), u, d);
        let k4 = derivative(net, &axpy(&x, h, &k3), u, d);
        for i in 0..x.theta.len() {
            x.theta[i] += h / 6.0 * (k1.0[i] + 2.0 * k2.0[i] + 2.0 * k3.0[i] + k4.0[i]);
            x.omega[i] += h / 6.0 * (k1.1[i] + 2.0 * k2.1[i] + 2.0 * k3.1[i] + k4.1[i]);
        }
    }
    x
}

/// Simulate from `x0` over `[0, t_end]` at sample time `ts`. Control and
/// disturbance are evaluated at each sample and held until the next one;
/// events take effect at the first sample at or after their time.
pub fn simulate<C, W>(
    net: &GridNetwork,
    x0: &GridState,
    mut controller: C,
    mut disturbance: W,
    events: &[ContingencyEvent],
    t_end: f64,
    ts: f64,
) -> Result<Trace, GridError>
where
    C: FnMut(&Sample<'_>) -> Result<ControlOutput, GridError>,
    W: FnMut(usize, f64) -> Vec<f64>,
{
    if !(ts > 0.0) || !(t_end >= 0.0) {
        return Err(GridError::Invalid("sample time and horizon must be positive".into()));
    }
    if events.iter().any(|e| !(e.time >= 0.0)) || events.windows(2).any(|w| w[1].time < w[0].time) {
        return Err(GridError::Invalid("events must have nonnegative, sorted times".into()));
    }
    let steps = (t_end / ts + 1e-9).floor() as usize;
    let n = net.len();
    let mut net = net.clone();
    let mut x = x0.clone();
    let mut trace = Trace {
        ts,
        bus_ids: net.buses.iter().map(|b| b.id).collect(),
        generator: net.buses.iter().map(|b| b.is_generator()).collect(),
        t: Vec::with_capacity(steps + 1),
        theta: Vec::with_capacity(steps + 1),
        omega: Vec::with_capacity(steps + 1),
        u0: Vec::with_capacity(steps + 1),
        u: Vec::with_capacity(steps + 1),
        d: Vec::with_capacity(steps + 1),
        events: Vec::with_capacity(steps + 1),
        islanded: false,
    };
    let mut next_event = 0;
    for k in 0..=steps {
        let t = k as f64 * ts;
        let mut fired = Vec::new();
        while next_event < events.len() && events[next_event].time <= t + 1e-9 {
            net = net.with_event(&events[next_event].kind)?;
            fired.push(events[next_event].kind.clone());
            next_event += 1;
        }
        if !fired.is_empty() && !net.is_connected() {
            trace.islanded = true;
        }
        let d = disturbance(k, t);
        if d.len() != n {
            return Err(GridError::Invalid("disturbance length".into()));
        }
        let zeros = vec![0.0; n];
        let (rate, _) = derivative(&net, &x, &zeros, &d);
        let out = controller(&Sample { k, t, net: &net, state: &x, rate: &rate, d: &d, events: &fired })?;
        for (i, b) in net.buses.iter().enumerate() {
            if out.applied[i].abs() > b.u_max + 1e-8 {
                return Err(GridError::InputOutOfRange { bus: b.id, value: out.applied[i], limit: b.u_max, t });
            }
        }
        let (rate, _) = derivative(&net, &x, &out.applied, &d);
        trace.t.push(t);
        trace.theta.push(x.theta.clone());
        trace.omega.push(rate);
        trace.u0.push(out.legacy);
        trace.d.push(d.clone());
        trace.events.push(fired.iter().map(ToString::to_string).collect::<Vec<_>>().join(";"));
        if k < steps {
            x = step(&net, &x, &out.applied, &d, ts);
        }
        trace.u.push(out.applied);
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LegacyGains {
    /// Droop gain on generator frequency.
    pub kp: f64,
    /// Integral gain on generator frequency.
    pub ki: f64,
    /// Proportional gain on load-bus angle deviation.
    pub kp_load: f64,
}

impl Default for LegacyGains {
    fn default() -> Self {
        Self { kp: 2.0, ki: 0.2, kp_load: 1.0 }
    }
}

/// Droop-plus-integral stand-in for an existing frequency controller.
#[derive(Debug, Clone, PartialEq)]
pub struct LegacyController {
    pub gains: LegacyGains,
    integral: Vec<f64>,
    ts: f64,
}

impl LegacyController {
    pub fn new(gains: LegacyGains, buses: usize, ts: f64) -> Self {
        Self { gains, integral: vec![0.0; buses], ts }
    }

    /// Saturated `u0` per bus; advances the integrators by one sample.
    pub fn control(&mut self, net: &GridNetwork, dtheta: &[f64], omega: &[f64]) -> Vec<f64> {
        net.buses
            .iter()
            .enumerate()
            .map(|(i, b)| {
                if !b.in_service {
                    return 0.0;
                }
                let raw = if b.is_generator() {
                    let u = self.gains.kp * omega[i] + self.gains.ki * self.integral[i];
                    self.integral[i] += omega[i] * self.ts;
                    u
                } else {
                    self.gains.kp_load * dtheta[i]
                };
                raw.clamp(-b.u_max, b.u_max)
            })
            .collect()
    }
}

//! Reduced-order power network: swing-equation generators and first-order
//! load buses coupled through lossless lines.
//!
//! ```text
//! θ̇_i = ω_i,  M_i ω̇_i = P_i − r_i + d_i − u_i − D_i ω_i − Σ_j (V_iV_j/X_ij) sin(θ_i − θ_j)   (generator)
//!             D_i θ̇_i = P_i − r_i + d_i − u_i − Σ_j (V_iV_j/X_ij) sin(θ_i − θ_j)             (load)
//! ```
//!
//! `u_i` is a controllable load and `d_i` an injection deviation.

mod sim;

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rci::LinearSubsystem;

pub use sim::{
    derivative, simulate, step, ContingencyEvent, ControlOutput, EventKind, GridState, LegacyController, LegacyGains,
    Sample, Trace, SUBSTEPS,
};

/// Largest per-bus power mismatch accepted as an equilibrium.
pub const EQUILIBRIUM_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("not an equilibrium: bus {bus} mismatch {residual:e}")]
    NotAnEquilibrium { bus: usize, residual: f64 },
    #[error("singular flow problem: {0}")]
    Singular(String),
    #[error("invalid network: {0}")]
    Invalid(String),
    #[error("network is islanded")]
    Islanded,
    #[error("bus {bus}: input {value} outside ±{limit} at t = {t}")]
    InputOutOfRange { bus: usize, value: f64, limit: f64, t: f64 },
    #[error("controller failed at t = {t}: {msg}")]
    Controller { t: f64, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Generator,
    Load,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    #[serde(default)]
    pub inertia: f64,
    pub damping: f64,
    #[serde(default = "one")]
    pub voltage: f64,
    #[serde(default)]
    pub p_in: f64,
    /// Uncontrollable load `r_i`.
    #[serde(default)]
    pub load: f64,
    /// Controllable-load range `|u_i| ≤ u_max`.
    #[serde(default)]
    pub u_max: f64,
    /// Injection deviation range `|d_i| ≤ d_max`.
    #[serde(default)]
    pub d_max: f64,
    #[serde(default = "yes")]
    pub in_service: bool,
}

impl Bus {
    pub fn is_generator(&self) -> bool {
        self.kind == BusKind::Generator
    }

    /// State count of the bus model.
    pub fn states(&self) -> usize {
        if self.is_generator() {
            2
        } else {
            1
        }
    }

    /// Coefficient of `θ̇` (or `ω̇`) in the power balance.
    pub fn rate_scale(&self) -> f64 {
        if self.is_generator() {
            self.inertia
        } else {
            self.damping
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub reactance: f64,
    #[serde(default = "yes")]
    pub in_service: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridNetwork {
    #[serde(rename = "bus")]
    pub buses: Vec<Bus>,
    #[serde(rename = "line")]
    pub lines: Vec<Line>,
    /// Frequency safety bound (rad/s).
    pub omega_max: f64,
    /// Operating point; solved from the injections when absent.
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
}

/// Lossless flow model used by [`GridNetwork::new_operating_point`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowModel {
    /// `Σ_j b_ij (θ_i − θ_j) = P_i`.
    Dc,
    /// DC solution refined by Newton's method on the sine flows.
    Ac,
}

impl GridNetwork {
    pub fn from_toml_str(text: &str) -> Result<Self, GridError> {
        let net: Self = toml::from_str(text).map_err(|e| GridError::Config(e.to_string()))?;
        net.validate()?;
        Ok(net)
    }

    pub fn load(path: &Path) -> Result<Self, GridError> {
        let text = std::fs::read_to_string(path).map_err(|e| GridError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let bad = |m: String| Err(GridError::Invalid(m));
        let mut seen = BTreeSet::new();
        for b in &self.buses {
            if !seen.insert(b.id) {
                return bad(format!("duplicate bus id {}", b.id));
            }
            if b.is_generator() && !(b.inertia > 0.0) {
                return bad(format!("generator {} needs positive inertia", b.id));
            }
            if !(b.damping > 0.0) || !(b.voltage > 0.0) {
                return bad(format!("bus {} needs positive damping and voltage", b.id));
            }
            if b.u_max < 0.0 || b.d_max < 0.0 {
                return bad(format!("bus {}: negative bound", b.id));
            }
        }
        for l in &self.lines {
            if self.index_of(l.from).is_none() || self.index_of(l.to).is_none() || l.from == l.to {
                return bad(format!("line {}-{} references unknown buses", l.from, l.to));
            }
            if !(l.reactance > 0.0) {
                return bad(format!("line {}-{} needs positive reactance", l.from, l.to));
            }
        }
        if !(self.omega_max > 0.0) {
            return bad("omega_max must be positive".into());
        }
        if let Some(t) = &self.theta0 {
            if t.len() != self.buses.len() {
                return bad("theta0 length".into());
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.buses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buses.is_empty()
    }

    pub fn index_of(&self, id: usize) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn generators(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.buses[i].is_generator() && self.buses[i].in_service).collect()
    }

    fn line_ends(&self, l: &Line) -> Option<(usize, usize)> {
        let (i, j) = (self.index_of(l.from)?, self.index_of(l.to)?);
        (l.in_service && self.buses[i].in_service && self.buses[j].in_service).then_some((i, j))
    }

    /// In-service lines as index pairs with `V_iV_j/X`.
    pub fn active_lines(&self) -> Vec<(usize, usize, f64)> {
        self.lines
            .iter()
            .filter_map(|l| {
                let (i, j) = self.line_ends(l)?;
                Some((i, j, self.buses[i].voltage * self.buses[j].voltage / l.reactance))
            })
            .collect()
    }

    /// Neighbour indices of bus `i` with the summed line gain `V_iV_j/X`,
    /// sorted by index.
    pub fn neighbors(&self, i: usize) -> Vec<(usize, f64)> {
        let mut acc: HashMap<usize, f64> = HashMap::new();
        for (a, b, g) in self.active_lines() {
            if a == i {
                *acc.entry(b).or_default() += g;
            } else if b == i {
                *acc.entry(a).or_default() += g;
            }
        }
        let mut out: Vec<_> = acc.into_iter().collect();
        out.sort_by_key(|p| p.0);
        out
    }

    /// `P_i − r_i`.
    pub fn net_injection(&self, i: usize) -> f64 {
        let b = &self.buses[i];
        if b.in_service {
            b.p_in - b.load
        } else {
            0.0
        }
    }

    /// `Σ_j (V_iV_j/X_ij) sin(θ_i − θ_j)` for every bus.
    pub fn flows(&self, theta: &[f64]) -> Vec<f64> {
        let mut f = vec![0.0; self.len()];
        for (i, j, g) in self.active_lines() {
            let p = g * (theta[i] - theta[j]).sin();
            f[i] += p;
            f[j] -= p;
        }
        f
    }

    /// Power-balance residual `P − r − flow` at `ω = 0`, `u = d = 0`.
    pub fn mismatch(&self, theta: &[f64]) -> Vec<f64> {
        let f = self.flows(theta);
        (0..self.len()).map(|i| if self.buses[i].in_service { self.net_injection(i) - f[i] } else { 0.0 }).collect()
    }

    /// Connected components of in-service buses, each sorted.
    pub fn islands(&self) -> Vec<Vec<usize>> {
        let n = self.len();
        let mut adj = vec![Vec::new(); n];
        for (i, j, _) in self.active_lines() {
            adj[i].push(j);
            adj[j].push(i);
        }
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for s in 0..n {
            if seen[s] || !self.buses[s].in_service {
                continue;
            }
            let mut comp = vec![s];
            seen[s] = true;
            let mut queue = VecDeque::from([s]);
            while let Some(v) = queue.pop_front() {
                for &w in &adj[v] {
                    if !seen[w] {
                        seen[w] = true;
                        comp.push(w);
                        queue.push_back(w);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        self.islands().len() <= 1
    }

    /// Configured operating point, or the AC flow solution with the last bus
    /// as angle reference.
    pub fn operating_point(&self) -> Result<Vec<f64>, GridError> {
        match &self.theta0 {
            Some(t) => Ok(t.clone()),
            None => Ok(self.solve_flow(&self.injections(), FlowModel::Ac)?),
        }
    }

    fn injections(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.net_injection(i)).collect()
    }

    /// Rebalance each island by shifting generator injections in proportion
    /// to inertia, then solve the flow equations with the last bus of each
    /// island as zero-angle reference. Returns the angles and the adjusted
    /// `P_in` per bus.
    pub fn new_operating_point(&self, model: FlowModel) -> Result<(Vec<f64>, Vec<f64>), GridError> {
        let mut p_in: Vec<f64> = self.buses.iter().map(|b| b.p_in).collect();
        for island in self.islands() {
            let imbalance: f64 = island.iter().map(|&i| self.net_injection(i)).sum();
            let gens: Vec<usize> = island.iter().copied().filter(|&i| self.buses[i].is_generator()).collect();
            if gens.is_empty() {
                return Err(GridError::Singular(format!("island {:?} has no generator", self.ids(&island))));
            }
            let total: f64 = gens.iter().map(|&g| self.buses[g].inertia).sum();
            for &g in &gens {
                p_in[g] -= imbalance * self.buses[g].inertia / total;
            }
        }
        let injections: Vec<f64> =
            (0..self.len()).map(|i| if self.buses[i].in_service { p_in[i] - self.buses[i].load } else { 0.0 }).collect();
        let theta = self.solve_flow(&injections, model)?;
        Ok((theta, p_in))
    }

    fn ids(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.buses[i].id).collect()
    }

    fn solve_flow(&self, injections: &[f64], model: FlowModel) -> Result<Vec<f64>, GridError> {
        let mut theta = vec![0.0; self.len()];
        for island in self.islands() {
            let dc = self.solve_island_dc(&island, injections)?;
            for (k, &i) in island.iter().enumerate() {
                theta[i] = dc[k];
            }
            if model == FlowModel::Ac {
                self.newton_island(&island, injections, &mut theta)?;
            }
        }
        Ok(theta)
    }

    /// Reduced Laplacian over the island without its reference (last) bus.
    fn island_laplacian(&self, island: &[usize], theta: Option<&[f64]>) -> DMatrix<f64> {
        let m = island.len() - 1;
        let pos: HashMap<usize, usize> = island.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        let mut l = DMatrix::zeros(m, m);
        for (i, j, g) in self.active_lines() {
            let (Some(&a), Some(&b)) = (pos.get(&i), pos.get(&j)) else { continue };
            let w = match theta {
                Some(t) => g * (t[i] - t[j]).cos(),
                None => g,
            };
            if a < m {
                l[(a, a)] += w;
            }
            if b < m {
                l[(b, b)] += w;
            }
            if a < m && b < m {
                l[(a, b)] -= w;
                l[(b, a)] -= w;
            }
        }
        l
    }

    fn solve_island_dc(&self, island: &[usize], injections: &[f64]) -> Result<Vec<f64>, GridError> {
        let m = island.len() - 1;
        if m == 0 {
            return Ok(vec![0.0]);
        }
        let l = self.island_laplacian(island, None);
        let p = DVector::from_iterator(m, island[..m].iter().map(|&i| injections[i]));
        let sol = l.lu().solve(&p).ok_or_else(|| GridError::Singular("DC flow matrix".into()))?;
        let mut out: Vec<f64> = sol.iter().copied().collect();
        out.push(0.0);
        Ok(out)
    }

    fn newton_island(&self, island: &[usize], injections: &[f64], theta: &mut [f64]) -> Result<(), GridError> {
        let m = island.len() - 1;
        for _ in 0..50 {
            let f = self.flows(theta);
            let r = DVector::from_iterator(m, island[..m].iter().map(|&i| injections[i] - f[i]));
            if r.amax() <= 1e-13 {
                return Ok(());
            }
            let j = self.island_laplacian(island, Some(theta));
            let step = j.lu().solve(&r).ok_or_else(|| GridError::Singular("flow Jacobian".into()))?;
            for (k, &i) in island[..m].iter().enumerate() {
                theta[i] += step[k];
            }
        }
        let worst = self.mismatch(theta).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if worst <= 1e-10 {
            Ok(())
        } else {
            Err(GridError::Singular(format!("AC flow did not converge (mismatch {worst:e})")))
        }
    }

    /// Copy with the event applied.
    pub fn with_event(&self, kind: &EventKind) -> Result<GridNetwork, GridError> {
        let mut net = self.clone();
        match *kind {
            EventKind::BusLoss { bus } => {
                let i = self.index_of(bus).ok_or_else(|| GridError::Invalid(format!("unknown bus {bus}")))?;
                net.buses[i].in_service = false;
                for l in &mut net.lines {
                    if l.from == bus || l.to == bus {
                        l.in_service = false;
                    }
                }
            }
            EventKind::LineTrip { from, to } => {
                let mut hit = false;
                for l in &mut net.lines {
                    if (l.from, l.to) == (from, to) || (l.from, l.to) == (to, from) {
                        l.in_service = false;
                        hit = true;
                    }
                }
                if !hit {
                    return Err(GridError::Invalid(format!("unknown line {from}-{to}")));
                }
            }
            EventKind::InjectionStep { bus, delta } => {
                let i = self.index_of(bus).ok_or_else(|| GridError::Invalid(format!("unknown bus {bus}")))?;
                net.buses[i].p_in += delta;
            }
        }
        Ok(net)
    }

    /// Per-bus continuous-time linearization at `theta0`; coupling columns
    /// follow [`GridNetwork::neighbors`] and the exogenous column carries `d_i`.
    pub fn linearize(&self, theta0: &[f64]) -> Result<Vec<LinearSubsystem>, GridError> {
        self.check_equilibrium(theta0)?;
        Ok((0..self.len()).map(|i| self.linearize_bus(i, theta0)).collect())
    }

    fn check_equilibrium(&self, theta0: &[f64]) -> Result<(), GridError> {
        if theta0.len() != self.len() {
            return Err(GridError::Invalid("operating point length".into()));
        }
        let r = self.mismatch(theta0);
        match (0..self.len()).max_by(|&a, &b| r[a].abs().total_cmp(&r[b].abs())) {
            Some(i) if r[i].abs() > EQUILIBRIUM_TOL => {
                Err(GridError::NotAnEquilibrium { bus: self.buses[i].id, residual: r[i] })
            }
            _ => Ok(()),
        }
    }

    /// Small-signal gains `B_ij = (V_iV_j/X_ij) cos(θ_i⁰ − θ_j⁰)`.
    pub fn sensitivities(&self, i: usize, theta0: &[f64]) -> Vec<(usize, f64)> {
        self.neighbors(i).into_iter().map(|(j, g)| (j, g * (theta0[i] - theta0[j]).cos())).collect()
    }

    fn linearize_bus(&self, i: usize, theta0: &[f64]) -> LinearSubsystem {
        let bus = &self.buses[i];
        let nb = self.sensitivities(i, theta0);
        let sum: f64 = nb.iter().map(|p| p.1).sum();
        let s = bus.rate_scale();
        let n = bus.states();
        let row = n - 1;
        let mut a = DMatrix::zeros(n, n);
        if bus.is_generator() {
            a[(0, 1)] = 1.0;
            a[(1, 0)] = -sum / s;
            a[(1, 1)] = -bus.damping / s;
        } else {
            a[(0, 0)] = -sum / s;
        }
        let mut b = DMatrix::zeros(n, 1);
        b[(row, 0)] = -1.0 / s;
        let mut e_coupling = DMatrix::zeros(n, nb.len());
        for (k, &(_, g)) in nb.iter().enumerate() {
            e_coupling[(row, k)] = g / s;
        }
        let mut e_exo = DMatrix::zeros(n, 1);
        e_exo[(row, 0)] = 1.0 / s;
        let mut output = DVector::zeros(n);
        output[0] = 1.0;
        LinearSubsystem { a, b, e_coupling, e_exo, output, ts: 0.0, neighbors: nb.iter().map(|p| p.0).collect() }
    }

    /// Offset of each bus block in the stacked network state.
    pub fn state_offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.len());
        let mut acc = 0;
        for b in &self.buses {
            off.push(acc);
            acc += b.states();
        }
        off
    }

    /// Whole-network continuous linearization `ẋ = A x + B u + E d` over the
    /// stacked state (`θ, ω` per generator, `θ` per load).
    pub fn linearize_network(&self, theta0: &[f64]) -> Result<LinearNetwork, GridError> {
        let subs = self.linearize(theta0)?;
        let off = self.state_offsets();
        let n: usize = self.buses.iter().map(Bus::states).sum();
        let m = self.len();
        let (mut a, mut b, mut e) = (DMatrix::zeros(n, n), DMatrix::zeros(n, m), DMatrix::zeros(n, m));
        for (i, s) in subs.iter().enumerate() {
            let k = s.states();
            a.view_mut((off[i], off[i]), (k, k)).copy_from(&s.a);
            b.view_mut((off[i], i), (k, 1)).copy_from(&s.b);
            e.view_mut((off[i], i), (k, 1)).copy_from(&s.e_exo);
            for (c, &j) in s.neighbors.iter().enumerate() {
                for r in 0..k {
                    a[(off[i] + r, off[j])] += s.e_coupling[(r, c)];
                }
            }
        }
        Ok(LinearNetwork { a, b, e, offsets: off })
    }
}

/// Stacked linear network model.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearNetwork {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub offsets: Vec<usize>,
}

impl LinearNetwork {
    /// Zero-order-hold discretization of `(A, [B E])`.
    pub fn discretize(&self, ts: f64) -> LinearNetwork {
        let (ad, cols) = zoh(&self.a, &[&self.b, &self.e], ts);
        LinearNetwork { a: ad, b: cols[0].clone(), e: cols[1].clone(), offsets: self.offsets.clone() }
    }
}

/// `(e^{A T}, [∫₀ᵀ e^{A s} ds · G_k])` via the exponential of the augmented matrix.
fn zoh(a: &DMatrix<f64>, inputs: &[&DMatrix<f64>], ts: f64) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    let n = a.nrows();
    let m: usize = inputs.iter().map(|g| g.ncols()).sum();
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * ts));
    let mut c = n;
    for g in inputs {
        aug.view_mut((0, c), (n, g.ncols())).copy_from(&(*g * ts));
        c += g.ncols();
    }
    let ex = aug.exp();
    let ad = ex.view((0, 0), (n, n)).into_owned();
    let mut out = Vec::with_capacity(inputs.len());
    let mut c = n;
    for g in inputs {
        out.push(ex.view((0, c), (n, g.ncols())).into_owned());
        c += g.ncols();
    }
    (ad, out)
}

/// Exact zero-order-hold discretization; inputs, coupling and exogenous
/// signals are all held over the sample.
pub fn discretize(sys: &LinearSubsystem, ts: f64) -> LinearSubsystem {
    assert!(ts > 0.0, "sample time must be positive");
    let (a, cols) = zoh(&sys.a, &[&sys.b, &sys.e_coupling, &sys.e_exo], ts);
    LinearSubsystem {
        a,
        b: cols[0].clone(),
        e_coupling: cols[1].clone(),
        e_exo: cols[2].clone(),
        output: sys.output.clone(),
        ts,
        neighbors: sys.neighbors.clone(),
    }
}

/// `∫₀ᵀ |e^{A s} g| ds` per state, by the trapezoid rule on `points` nodes.
/// For the short horizons used here the integrand is smooth and the rule is
/// accurate to well below the margins it feeds.
pub fn reach(a: &DMatrix<f64>, g: &DVector<f64>, ts: f64, points: usize) -> DVector<f64> {
    let h = ts / (points - 1) as f64;
    let mut acc = DVector::zeros(g.len());
    for k in 0..points {
        let w = if k == 0 || k + 1 == points { 0.5 } else { 1.0 };
        acc += ((a * (h * k as f64)).exp() * g).abs() * (w * h);
    }
    acc
}

/// Largest `|sin(φ + δ) − sin φ − δ cos φ|` over `|δ| ≤ Δ`, by a dense scan.
pub fn sine_error(phi: f64, delta: f64) -> f64 {
    const POINTS: usize = 10_000;
    if delta <= 0.0 {
        return 0.0;
    }
    let (s, c) = phi.sin_cos();
    (0..=POINTS)
        .map(|k| {
            let d = -delta + 2.0 * delta * k as f64 / POINTS as f64;
            ((phi + d).sin() - s - d * c).abs()
        })
        .fold(0.0, f64::max)
}

impl GridNetwork {
    /// Per-bus bound on the linearization error of the rate equation
    /// (`ω̇` for generators, `θ̇` for loads), given the angle-difference
    /// deviation range of each in-service line in `active_lines` order.
    pub fn linearization_error_bound(&self, theta0: &[f64], line_dev: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for (&(i, j, g), &dev) in self.active_lines().iter().zip(line_dev) {
            let e = g * sine_error(theta0[i] - theta0[j], dev);
            out[i] += e / self.buses[i].rate_scale();
            out[j] += e / self.buses[j].rate_scale();
        }
        out
    }

    /// Line deviation ranges `y_i + y_j` from per-bus angle deviation bounds.
    pub fn line_deviation(&self, bus_dev: &[f64]) -> Vec<f64> {
        self.active_lines().iter().map(|&(i, j, _)| bus_dev[i] + bus_dev[j]).collect()
    }
}

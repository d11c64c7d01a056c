use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use netcbf::cbf::{certify_cbf, Certification};
use netcbf::contract::{eval_lambda, sample_network, search_contract, ContractError, LambdaSamples};
use netcbf::grid::{GridNetwork, Trace};
use netcbf::polytope::Polytope;
use netcbf::scenario::{
    angle_verdicts, design_contingency, design_safety, node_problems, run_contingency, run_safety, SafetyDesign,
    ScenarioError,
};
use netcbf::stl::{evaluate, Formula};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::Scenario;
use crate::error::CliError;

/// Largest post-settling deviation accepted by `mpc`.
const SETTLE_TOL: f64 = 1e-3;
/// Tube membership tolerance.
const TUBE_TOL: f64 = 1e-6;

fn join(v: impl IntoIterator<Item = f64>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// Names the failing node by bus id.
fn contract_error(net: &GridNetwork, e: ContractError) -> CliError {
    match e {
        ContractError::NoValidContract { node, iterate } => CliError::infeasible(format!(
            "no valid contract: bus {} left the sampled domain at iterate [{}]",
            net.buses[node].id,
            join(iterate)
        )),
        other => other.into(),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}

/// Per-bus RCIs with every neighbour at the full angle budget.
pub fn rci(sc: &Scenario, out: &Path) -> Result<(), CliError> {
    let net = &sc.net;
    let cfg = &sc.config.safety;
    let theta0 = net.operating_point()?;
    let nodes = node_problems(net, &theta0, cfg)?;
    let budget = vec![cfg.theta_budget; net.len()];
    let results: Vec<_> = nodes.par_iter().map(|n| eval_lambda(n, &n.axis_values(&budget))).collect();
    let dir = out.join("rci");
    fs::create_dir_all(&dir)?;
    let mut summary = csv::Writer::from_path(out.join("rci_summary.csv"))?;
    summary.write_record(["bus", "rows", "iterations", "converged", "lambda", "q", "k_ff", "k_fb"])?;
    for (node, result) in nodes.iter().zip(results) {
        let id = net.buses[node.id].id;
        let point = result.map_err(|e| {
            let e = CliError::from(e);
            CliError { code: e.code, msg: format!("bus {id}: {}", e.msg) }
        })?;
        let r = &point.rci;
        write_json(&dir.join(format!("bus_{id}.json")), r)?;
        summary.write_record([
            id.to_string(),
            r.set.num_rows().to_string(),
            r.iterations.to_string(),
            r.converged.to_string(),
            point.value.to_string(),
            join(r.set.offsets().iter().copied()),
            join(r.k_ff.iter().copied()),
            join(r.k_fb.iter().copied()),
        ])?;
    }
    summary.flush()?;
    println!("wrote {} RCIs to {}", nodes.len(), dir.display());
    Ok(())
}

fn write_epigraph(path: &Path, s: &LambdaSamples) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..s.axes.len()).map(|k| format!("axis_{k}")).collect();
    header.push("lambda".into());
    w.write_record(&header)?;
    for (flat, value) in s.values.iter().enumerate() {
        let mut rest = flat;
        let mut coords = vec![0.0; s.axes.len()];
        for (k, axis) in s.axes.iter().enumerate().rev() {
            coords[k] = axis[rest % axis.len()];
            rest /= axis.len();
        }
        let mut row: Vec<String> = coords.iter().map(|c| c.to_string()).collect();
        row.push(value.map_or(String::new(), |v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Sampled epigraphs and the least valid contract above them.
pub fn contract(sc: &Scenario, out: &Path) -> Result<(), CliError> {
    let net = &sc.net;
    let cfg = &sc.config.safety;
    let theta0 = net.operating_point()?;
    let nodes = node_problems(net, &theta0, cfg)?;
    let samples = sample_network(&nodes, cfg.theta_budget, cfg.points)?;
    for s in &samples {
        write_epigraph(&out.join(format!("epigraph_bus_{}.csv", net.buses[s.node].id)), s)?;
    }
    let state = search_contract(&samples, cfg.max_search_iter).map_err(|e| contract_error(net, e))?;
    write_json(&out.join("contract.json"), &state)?;
    println!("contract after {} iterations: y* = [{}]", state.iterations, join(state.y_max.iter().copied()));
    Ok(())
}

struct Verdict {
    label: String,
    holds: bool,
    first_violation: Option<f64>,
}

#[derive(Default)]
struct Report(Vec<Verdict>);

impl Report {
    fn push(&mut self, label: String, holds: bool, first_violation: Option<f64>) {
        self.0.push(Verdict { label, holds, first_violation });
    }

    /// Writes the report and fails with the first violated guarantee.
    fn finish(self, path: &Path) -> Result<(), CliError> {
        let mut w = BufWriter::new(File::create(path)?);
        for v in &self.0 {
            let status = if v.holds { "PASS" } else { "FAIL" };
            let line = match v.first_violation {
                Some(t) => format!("{status} {} (first violation at t = {t:.3} s)", v.label),
                None => format!("{status} {}", v.label),
            };
            writeln!(w, "{line}")?;
            println!("{line}");
        }
        w.flush()?;
        match self.0.iter().find(|v| !v.holds) {
            None => Ok(()),
            Some(v) => Err(CliError::violation(match v.first_violation {
                Some(t) => format!("guarantee violated: {} at t = {t:.3} s", v.label),
                None => format!("guarantee violated: {}", v.label),
            })),
        }
    }
}

fn first_exceed(trace: &Trace, series: impl Fn(usize) -> f64, bound: f64) -> Option<f64> {
    (0..trace.t.len()).find(|&k| series(k).abs() > bound).map(|k| trace.t[k])
}

fn frequency_verdicts(net: &GridNetwork, trace: &Trace, report: &mut Report) {
    for (i, b) in net.buses.iter().enumerate().filter(|(_, b)| b.is_generator() && b.in_service) {
        let first = first_exceed(trace, |k| trace.omega[k][i], net.omega_max);
        report.push(format!("generator {} frequency |omega| <= {}", b.id, net.omega_max), first.is_none(), first);
    }
}

/// `sign · x_coord ≥ bound` as a polytope in `dim` dimensions.
fn beyond(dim: usize, coord: usize, sign: f64, bound: f64) -> Polytope {
    let mut row = DMatrix::zeros(1, dim);
    row[(0, coord)] = -sign;
    Polytope::new(row, DVector::from_element(1, -bound)).expect("one finite row")
}

fn certify(sc: &Scenario, design: &SafetyDesign, report: &mut Report) -> Result<(), CliError> {
    let net = &sc.net;
    let mut rng = ChaCha8Rng::seed_from_u64(sc.config.seed);
    for (i, (node, sup)) in design.nodes.iter().zip(&design.supervisors).enumerate() {
        let b = &net.buses[i];
        let dim = node.sys.states();
        let mut danger = vec![
            beyond(dim, 0, 1.0, sc.config.safety.theta_budget),
            beyond(dim, 0, -1.0, sc.config.safety.theta_budget),
        ];
        if b.is_generator() {
            danger.push(beyond(dim, 1, 1.0, net.omega_max));
            danger.push(beyond(dim, 1, -1.0, net.omega_max));
        }
        let initial = Polytope::symmetric_box(&vec![1e-9; dim]);
        let measured = node.disturbance(&node.axis_values(&design.contract.y_max)).measured;
        let result = certify_cbf(sup, &initial, &danger, &measured, sc.config.simulate.certify_samples, &mut rng)?;
        let label = match &result {
            Certification::Certified => format!("bus {} barrier certificate", b.id),
            Certification::Failed(c) => format!("bus {} barrier certificate ({c:?} condition fails)", b.id),
        };
        report.push(label, result.is_certified(), None);
    }
    Ok(())
}

/// Supervised (or plain legacy) run with its STL verdicts.
pub fn simulate(sc: &Scenario, out: &Path) -> Result<(), CliError> {
    let net = &sc.net;
    let cfg = &sc.config;
    let design = design_safety(net, &cfg.safety).map_err(|e| match e {
        ScenarioError::Contract(c) => contract_error(net, c),
        other => other.into(),
    })?;
    write_json(&out.join("contract.json"), &design.contract)?;
    let sim = &cfg.simulate;
    let trace = run_safety(net, &design, cfg.legacy, cfg.disturbance, sim.supervised, sim.t_end, cfg.safety.ts)?;
    trace.write_csv(File::create(out.join("trace.csv"))?)?;

    let mut report = Report::default();
    if sim.supervised {
        certify(sc, &design, &mut report)?;
    }
    let y = &design.contract.y_max;
    let angles = angle_verdicts(net, &trace, &design.theta0, y)?;
    for (i, holds) in angles.into_iter().enumerate() {
        let first = first_exceed(&trace, |k| trace.theta[k][i] - design.theta0[i], y[i]);
        report.push(format!("bus {} angle |dtheta| <= {}", net.buses[i].id, y[i]), holds, first);
    }
    frequency_verdicts(net, &trace, &mut report);
    if !sim.formulas.is_empty() {
        let st = trace.to_stl(&design.theta0)?;
        for text in &sim.formulas {
            let f = Formula::parse(text)?;
            let holds = evaluate(&f, &st, 0)?.value;
            report.push(format!("formula {text}"), holds, None);
        }
    }
    report.finish(&out.join("verdicts.txt"))
}

/// Contingency plan, tracked run and tube verdicts.
pub fn mpc(sc: &Scenario, out: &Path) -> Result<(), CliError> {
    let Some(cfg) = sc.contingency()? else {
        log::info!("no contingency scheduled; running the fixed-point pipeline");
        return simulate(sc, out);
    };
    let net = &sc.net;
    let after = net.with_event(&cfg.event)?;
    let islands = after.islands();
    if islands.len() > 1 {
        for island in &islands {
            let ids: Vec<usize> = island.iter().map(|&i| after.buses[i].id).collect();
            log::warn!("after {}: island {ids:?} is rebalanced on its own generators", cfg.event);
        }
    }
    let design = design_contingency(net, &cfg)?;
    let mut delay = csv::Writer::from_path(out.join("delay.csv"))?;
    delay.write_record(["bus", "activation"])?;
    for (id, k) in design.delay.by_id(net) {
        delay.write_record([id.to_string(), k.to_string()])?;
    }
    delay.flush()?;
    design.reference.write_csv(File::create(out.join("reference.csv"))?)?;
    let run = run_contingency(net, &design, &cfg)?;
    run.trace.write_csv(File::create(out.join("trace.csv"))?)?;

    let mut report = Report::default();
    for (i, v) in run.tube_violation.iter().enumerate() {
        if let Some(v) = v {
            let label = format!("bus {} error stays in its tube after activation (excess {v:e})", net.buses[i].id);
            report.push(label, *v <= TUBE_TOL, None);
        }
    }
    let label = format!(
        "settled within {SETTLE_TOL} of the new operating point from t = {} s (deviation {:e})",
        run.settle_time, run.settle_deviation
    );
    report.push(label, run.settle_deviation <= SETTLE_TOL, None);
    frequency_verdicts(&after, &run.trace, &mut report);
    report.finish(&out.join("verdicts.txt"))
}

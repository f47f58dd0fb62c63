use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use photherm::apparatus::run_experiment;
use photherm::certify::{certify_run, CertifyOptions};
use photherm::exec::derive_seed;
use photherm::fock::{output_distribution_with, sample_indices};
use photherm::gge::{
    equilibration_trace_with, find_recurrence, gge_prediction, joint_tvd, momentum_occupations, trace_csv,
    RecurrenceScan,
};
use photherm::hamiltonian::evolution;
use photherm::{Execution, FockDistribution};
use serde_json::{json, Value};

use crate::config::{Plan, Resolved};
use crate::CliError;

/// Files of one run, written in order once every computation has succeeded.
#[derive(Debug, Default)]
pub struct Output {
    pub files: Vec<(String, String)>,
}

impl Output {
    fn csv(&mut self, resolved: &Resolved, name: String, body: &str) {
        self.files.push((name, format!("# config: {}\n{body}", resolved.compact())));
    }

    fn json(&mut self, resolved: &Resolved, name: String, mut value: Value) {
        value.as_object_mut().expect("json object").insert("config".into(), resolved.json());
        let mut text = serde_json::to_string_pretty(&value).expect("json serialises");
        text.push('\n');
        self.files.push((name, text));
    }
}

/// Compute the outputs of `resolved.command`.
pub fn compute(resolved: &Resolved, exec: Execution) -> Result<Output, CliError> {
    let plan = Plan::new(resolved)?;
    let mut out = Output::default();
    match resolved.command.as_str() {
        "evolve" => evolve(resolved, &plan, exec, &mut out)?,
        "gge" => gge(resolved, &plan, exec, &mut out)?,
        "certify" => certify(resolved, &plan, exec, &mut out)?,
        other => return Err(CliError::Validation(format!("unknown command {other:?}"))),
    }
    out.json(
        resolved,
        "run.json".into(),
        json!({ "command": resolved.command, "files": out.files.iter().map(|f| &f.0).collect::<Vec<_>>() }),
    );
    Ok(out)
}

/// Compute and write into `<out>/<hash>/`; returns the run directory.
pub fn run(resolved: &Resolved, out_dir: &Path, force: bool, exec: Execution) -> Result<PathBuf, CliError> {
    let dir = out_dir.join(resolved.hash());
    if dir.exists() {
        if !force {
            return Err(CliError::Exists(format!("{} exists; pass --force to replace it", dir.display())));
        }
        if !dir.join("run.json").is_file() {
            return Err(CliError::Exists(format!("{} is not a run directory; not replacing it", dir.display())));
        }
    }
    let output = compute(resolved, exec)?;
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    }
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    for (name, text) in &output.files {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(dir)
}

fn seed_for(master: u64, instance: usize, model: usize, time: usize) -> u64 {
    derive_seed(derive_seed(derive_seed(master, instance as u64), model as u64), time as u64)
}

fn evolve(resolved: &Resolved, plan: &Plan, exec: Execution, out: &mut Output) -> Result<(), CliError> {
    let c = &resolved.config;
    let (n, m) = (plan.input.total(), plan.input.modes());
    for (i, h) in plan.hamiltonians.iter().enumerate() {
        for (k, (name, model)) in plan.models.iter().enumerate() {
            let mut points = Vec::new();
            for (j, &t) in plan.times.iter().enumerate() {
                let u = evolution(h, t)?;
                let exact = output_distribution_with(&u, &plan.input, model, exec)?;
                let seed = seed_for(c.seed, i, k, j);
                let sampled = match &plan.apparatus {
                    Some(app) => run_experiment(h, t, model, app, c.shots, seed)?.corrected,
                    None => {
                        let mut w = vec![0.0; exact.basis().len()];
                        for idx in sample_indices(&exact, c.shots, seed, exec) {
                            w[idx] += 1.0;
                        }
                        FockDistribution::from_weights(n, m, w)?
                    }
                };
                out.csv(resolved, format!("evolve_{name}_i{i}_t{j}.csv"), &sampled.to_csv());
                out.csv(resolved, format!("exact_{name}_i{i}_t{j}.csv"), &exact.to_csv());
                points.push(json!({
                    "t": t,
                    "tvd_to_exact": joint_tvd(&sampled, &exact)?,
                    "sampled": sampled,
                    "exact": exact,
                }));
            }
            out.json(
                resolved,
                format!("evolve_{name}_i{i}.json"),
                json!({ "instance": i, "hamiltonian": h, "model": name, "points": points }),
            );
        }
    }
    Ok(())
}

fn gge(resolved: &Resolved, plan: &Plan, exec: Execution, out: &mut Output) -> Result<(), CliError> {
    let g = &resolved.config.gge;
    let (n, m) = (plan.input.total(), plan.input.modes());
    let prediction = gge_prediction(n, m);
    let momentum = momentum_occupations(&plan.input);
    for (i, h) in plan.hamiltonians.iter().enumerate() {
        for (name, model) in &plan.models {
            let trace = equilibration_trace_with(h, &plan.input, &plan.times, model, g.mode, exec)?;
            let best = trace.iter().min_by(|a, b| a.tvd.total_cmp(&b.tvd)).expect("non-empty trace");
            let recurrence = if g.recurrence {
                let scan = RecurrenceScan {
                    t_max: g.recurrence_t_max,
                    points: g.recurrence_points,
                    mode: g.mode,
                    ..RecurrenceScan::default()
                };
                find_recurrence(h, &plan.input, model, scan, exec)?
            } else {
                None
            };
            out.csv(resolved, format!("gge_{name}_i{i}.csv"), &trace_csv(&trace));
            out.json(
                resolved,
                format!("gge_{name}_i{i}.json"),
                json!({
                    "instance": i,
                    "hamiltonian": h,
                    "model": name,
                    "mode": g.mode,
                    "prediction": prediction,
                    "momentum_occupations": momentum,
                    "min_tvd": { "t": best.t, "tvd": best.tvd },
                    "recurrence": recurrence,
                    "trace": trace,
                }),
            );
        }
    }
    Ok(())
}

fn certify(resolved: &Resolved, plan: &Plan, exec: Execution, out: &mut Output) -> Result<(), CliError> {
    let c = &resolved.config;
    let cert =
        c.certification.as_ref().ok_or_else(|| CliError::Validation("certify needs a [certification] block".into()))?;
    for (i, h) in plan.hamiltonians.iter().enumerate() {
        for (k, (name, model)) in plan.models.iter().enumerate() {
            let mut table =
                String::from("t,epsilon,p1,k1,p2,k2,delta,lambda_min,f_lower,witness_threshold,entangled\n");
            let mut points = Vec::new();
            let mut lambdas = None;
            for (j, &t) in plan.times.iter().enumerate() {
                let mut trace = String::from("epsilon,batches,records1,records2,inv_sqrt_t,p1,p2,f_lower\n");
                for &eps in &cert.epsilons {
                    // one seed per time step: every ε reads the same records
                    let opts = CertifyOptions {
                        shots: c.shots,
                        batches: cert.batches,
                        seed: seed_for(c.seed, i, k, j),
                        epsilon1: eps,
                        epsilon2: eps,
                        variance: cert.variance,
                        bipartition: cert.bipartition,
                        period: cert.period,
                        exec,
                    };
                    let run = certify_run(h, t, &plan.input, model, &opts, plan.apparatus.as_ref())?;
                    let r = &run.result;
                    let threshold = r.witness_threshold.expect("witness attached");
                    let entangled = r.entangled.expect("witness attached");
                    writeln!(
                        table,
                        "{t},{eps},{},{},{},{},{},{},{},{threshold},{entangled}",
                        r.p1, r.k1, r.p2, r.k2, r.delta, r.lambda_min, r.f_lower
                    )
                    .unwrap();
                    for p in &run.convergence {
                        writeln!(
                            trace,
                            "{eps},{},{},{},{},{},{},{}",
                            p.batches, p.records1, p.records2, p.inv_sqrt_t, p.p1, p.p2, p.f_lower
                        )
                        .unwrap();
                    }
                    points.push(json!({ "t": t, "epsilon": eps, "result": r, "convergence": run.convergence }));
                    lambdas.get_or_insert(run.lambdas);
                }
                out.csv(resolved, format!("convergence_{name}_i{i}_t{j}.csv"), &trace);
            }
            out.csv(resolved, format!("certify_{name}_i{i}.csv"), &table);
            out.json(
                resolved,
                format!("certify_{name}_i{i}.json"),
                json!({ "instance": i, "hamiltonian": h, "model": name, "lambdas": lambdas, "points": points }),
            );
        }
    }
    Ok(())
}

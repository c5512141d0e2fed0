//! Command implementations. Each returns the full report text so output can
//! be compared byte for byte.

use std::path::Path;

use markov_machines::dist::{Dist, Kernel};
use markov_machines::filtering::{
    belief_cap_from_env, build_filter, check_interpretation, exchangeability_check,
    filter_sequence, filter_step, is_unifilar_morphism_into_filter, posterior_oracle, Wiring,
};
use markov_machines::gauss::kalman_step;
use markov_machines::machines::{check_comb, MealyMachine, UnifilarMachine};
use markov_machines::transducer::{process_update, unroll as unroll_process};
use markov_machines::{random, Error, Rat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::format::{
    self, dist_record, fmt_dense, parse_dense, parse_labels, Kind, KalmanRecord, LoadedMachine,
    TraceResult, TraceStep, VERSION,
};
use crate::{read_file, CliError, Outcome, Suite, EXIT_CHECK, EXIT_IMPOSSIBLE, MAX_ORACLE_HORIZON, MAX_TRIALS};

fn line(out: &mut String, v: &impl serde::Serialize) {
    out.push_str(&serde_json::to_string(v).expect("report values serialise"));
    out.push('\n');
}

fn source_name(p: &Path) -> String {
    p.display().to_string()
}

pub fn load_machine(path: &Path) -> Result<LoadedMachine, CliError> {
    let text = read_file(path)?;
    Ok(format::parse_machine(&text, &source_name(path))?)
}

fn prior_or_uniform(m: &MealyMachine, prior: Option<&str>, source: &str) -> Result<Dist, CliError> {
    match prior {
        Some(p) => Ok(parse_dense(m.states(), p, source)?),
        None => Ok(Dist::uniform(m.states().clone())),
    }
}

/// `Σ_h b(h) · output_dist(i, h)`.
pub fn predicted_output(m: &MealyMachine, b: &Dist, i: usize) -> Dist {
    let mut w = vec![Rat::zero(); m.outputs().len()];
    for (h, p) in b.support() {
        for (o, q) in m.output_dist(i, h).support() {
            w[o] += &(p * q);
        }
    }
    Dist::from_dense(m.outputs().clone(), w).expect("mixture of distributions")
}

pub fn filter(machine: &Path, prior: Option<&str>, inputs: Option<&str>, outputs: &str) -> Result<Outcome, CliError> {
    let loaded = load_machine(machine)?;
    let m = &loaded.mealy;
    let b0 = prior_or_uniform(m, prior, "--prior")?;
    let outs = parse_labels(m.outputs(), outputs, "outputs", "--outputs")?;
    let ins = match inputs {
        Some(text) => parse_labels(m.inputs(), text, "inputs", "--inputs")?,
        None if m.inputs().len() == 1 => vec![0; outs.len()],
        None => return Err(CliError::Usage("--inputs is required when the machine has more than one input".into())),
    };
    if ins.len() != outs.len() {
        return Err(CliError::Usage(format!("{} inputs but {} outputs", ins.len(), outs.len())));
    }
    let mut out = String::new();
    line(
        &mut out,
        &json!({
            "version": VERSION,
            "command": "filter",
            "args": {
                "machine": source_name(machine),
                "prior": fmt_dense(&b0),
                "inputs": ins.iter().map(|&i| m.inputs().label(i)).collect::<Vec<_>>(),
                "outputs": outs.iter().map(|&o| m.outputs().label(o)).collect::<Vec<_>>(),
            }
        }),
    );
    let mut b = b0;
    for (k, (&i, &o)) in ins.iter().zip(&outs).enumerate() {
        let predicted = predicted_output(m, &b, i);
        match filter_step(m, &b, i, o) {
            Ok(post) => {
                line(
                    &mut out,
                    &TraceStep {
                        step: k + 1,
                        input: m.inputs().label(i).to_string(),
                        output: m.outputs().label(o).to_string(),
                        predicted: dist_record(&predicted),
                        posterior: dist_record(&post),
                    },
                );
                b = post;
            }
            Err(Error::ImpossibleObservation { .. }) => {
                line(&mut out, &TraceResult::ImpossibleObservation { step: k + 1 });
                return Ok(Outcome { output: out, exit_code: EXIT_IMPOSSIBLE });
            }
            Err(e) => return Err(e.into()),
        }
    }
    line(
        &mut out,
        &TraceResult::Posterior {
            posterior: dist_record(&b),
            dense: fmt_dense(&b),
        },
    );
    Ok(Outcome::ok(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Pass,
    Fail,
    Skip,
}

struct CheckLine {
    check: &'static str,
    status: Status,
    detail: String,
}

impl CheckLine {
    fn new(check: &'static str, status: Status, detail: impl Into<String>) -> CheckLine {
        CheckLine { check, status, detail: detail.into() }
    }

    fn json(&self) -> Value {
        let status = match self.status {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::Skip => "skip",
        };
        json!({"check": self.check, "status": status, "detail": self.detail})
    }
}

fn comb_check(m: &MealyMachine) -> CheckLine {
    match check_comb(m) {
        Ok(_) => CheckLine::new("comb", Status::Pass, "output law does not depend on the input"),
        Err(e) => CheckLine::new("comb", Status::Fail, e.to_string()),
    }
}

fn unifilar_check(m: &MealyMachine) -> CheckLine {
    match check_comb(m).and_then(UnifilarMachine::new) {
        Ok(_) => CheckLine::new("unifilar", Status::Pass, "next state is a function of output, input and state"),
        Err(e) => CheckLine::new("unifilar", Status::Fail, e.to_string()),
    }
}

fn verdict(name: &'static str, r: markov_machines::Result<bool>, ok: String, bad: &str) -> CheckLine {
    match r {
        Ok(true) => CheckLine::new(name, Status::Pass, ok),
        Ok(false) => CheckLine::new(name, Status::Fail, bad),
        Err(e) => CheckLine::new(name, Status::Fail, e.to_string()),
    }
}

/// The reachable part of the belief machine from `prior` interprets the
/// model, and its inclusion is a unifilar morphism into the filter.
fn interpretation_checks(m: &MealyMachine, prior: &Dist, depth: usize) -> Vec<CheckLine> {
    let comb = match check_comb(m) {
        Ok(c) => c,
        Err(e) => return vec![CheckLine::new("interpretation", Status::Fail, e.to_string())],
    };
    let filter = build_filter(m).expect("comb already checked");
    let mut lines = vec![match filter.materialize_within(std::slice::from_ref(prior), belief_cap_from_env(), depth) {
        Err(Error::Truncated { cap }) => CheckLine::new(
            "interpretation",
            Status::Skip,
            format!("more than {cap} reachable beliefs"),
        ),
        Err(Error::DepthExceeded { depth }) => CheckLine::new(
            "interpretation",
            Status::Skip,
            format!("reachable beliefs not closed within {depth} steps"),
        ),
        Err(e) => CheckLine::new("interpretation", Status::Fail, e.to_string()),
        Ok(mat) => {
            let psi = mat.psi();
            let r = check_interpretation(&psi, mat.machine.mealy(), comb.mealy(), Wiring::Comb).and_then(|ok| {
                Ok(ok && is_unifilar_morphism_into_filter(&mat.inclusion(), mat.machine.mealy(), &filter)?)
            });
            verdict(
                "interpretation",
                r,
                format!("{} reachable beliefs interpret the model", mat.beliefs.len()),
                "reachable belief machine violates the interpretation equation",
            )
        }
    }];
    if let Ok(u) = UnifilarMachine::new(comb.clone()) {
        let id = Kernel::identity(u.comb().states());
        lines.push(verdict(
            "interpretation_identity",
            check_interpretation(&id, m, m, Wiring::Comb),
            "identity interprets the machine as its own model".into(),
            "identity violates the interpretation equation",
        ));
    }
    lines
}

fn exchangeability(m: &MealyMachine) -> CheckLine {
    verdict(
        "exchangeability",
        exchangeability_check(m),
        "two-step output law is symmetric".into(),
        "two-step output law is not symmetric",
    )
}

/// A single input and a state that never changes.
fn is_generator(m: &MealyMachine) -> bool {
    let ns = m.states().len();
    m.inputs().len() == 1 && (0..ns).all(|s| m.row(0, s).support().all(|(os, _)| os % ns == s))
}

pub fn check(machine: &Path, suite: Suite, prior: Option<&str>, depth: usize) -> Result<Outcome, CliError> {
    let loaded = load_machine(machine)?;
    let m = &loaded.mealy;
    let b0 = prior_or_uniform(m, prior, "--prior")?;
    let suite_name = match suite {
        Suite::Comb => "comb",
        Suite::Unifilar => "unifilar",
        Suite::Interpretation => "interpretation",
        Suite::Exchangeability => "exchangeability",
        Suite::All => "all",
    };
    let mut lines = Vec::new();
    match suite {
        Suite::Comb => lines.push(comb_check(m)),
        Suite::Unifilar => lines.push(unifilar_check(m)),
        Suite::Interpretation => lines.extend(interpretation_checks(m, &b0, depth)),
        Suite::Exchangeability => lines.push(exchangeability(m)),
        Suite::All => {
            let declared = format!("declared kind {}", loaded.kind);
            if loaded.kind == Kind::Mealy {
                for name in ["comb", "unifilar", "interpretation", "exchangeability"] {
                    lines.push(CheckLine::new(name, Status::Skip, declared.clone()));
                }
            } else {
                lines.push(comb_check(m));
                if loaded.kind == Kind::Unifilar {
                    lines.push(unifilar_check(m));
                } else {
                    lines.push(CheckLine::new("unifilar", Status::Skip, declared));
                }
                lines.extend(interpretation_checks(m, &b0, depth));
                if is_generator(m) {
                    lines.push(exchangeability(m));
                } else {
                    lines.push(CheckLine::new("exchangeability", Status::Skip, "not a generator"));
                }
            }
        }
    }
    let mut out = String::new();
    line(
        &mut out,
        &json!({
            "version": VERSION,
            "command": "check",
            "args": {"machine": source_name(machine), "suite": suite_name, "prior": fmt_dense(&b0), "horizon": depth}
        }),
    );
    for l in &lines {
        line(&mut out, &l.json());
    }
    let count = |s: Status| lines.iter().filter(|l| l.status == s).count();
    let failed = count(Status::Fail);
    line(
        &mut out,
        &json!({
            "result": if failed == 0 { "pass" } else { "fail" },
            "passed": count(Status::Pass),
            "failed": failed,
            "skipped": count(Status::Skip),
        }),
    );
    Ok(Outcome {
        output: out,
        exit_code: if failed == 0 { 0 } else { EXIT_CHECK },
    })
}

/// Index drawn from `d` with one uniform variate.
fn sample<R: Rng>(rng: &mut R, d: &Dist) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in d.support() {
        acc += p.to_f64();
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

enum Trial {
    Agree,
    ImpossibleAgree,
    Mismatch(Value),
}

fn describe(r: &markov_machines::Result<Dist>) -> Value {
    match r {
        Ok(d) => json!({"posterior": fmt_dense(d)}),
        Err(Error::ImpossibleObservation { step }) => json!({"impossible_observation": step}),
        Err(e) => json!({"error": e.to_string()}),
    }
}

/// One seeded trial: random prior and inputs; outputs simulated from the
/// machine half of the time, uniform otherwise (so impossible traces occur).
fn oracle_trial(m: &MealyMachine, seed: u64, t: usize, horizon: usize) -> Trial {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64);
    let prior = random::dist(&mut rng, m.states(), 4);
    let (ni, no, ns) = (m.inputs().len(), m.outputs().len(), m.states().len());
    let inputs: Vec<usize> = (0..horizon).map(|_| rng.random_range(0..ni)).collect();
    let outputs: Vec<usize> = if rng.random_bool(0.5) {
        let mut s = sample(&mut rng, &prior);
        inputs
            .iter()
            .map(|&i| {
                let os = sample(&mut rng, m.row(i, s));
                s = os % ns;
                os / ns
            })
            .collect()
    } else {
        (0..horizon).map(|_| rng.random_range(0..no)).collect()
    };
    let a = filter_sequence(m, &prior, &inputs, &outputs);
    let b = posterior_oracle(m, &prior, &inputs, &outputs);
    match (&a, &b) {
        (Ok(x), Ok(y)) if x == y => Trial::Agree,
        (Err(Error::ImpossibleObservation { step: x }), Err(Error::ImpossibleObservation { step: y })) if x == y => {
            Trial::ImpossibleAgree
        }
        _ => Trial::Mismatch(json!({
            "trial": t,
            "prior": fmt_dense(&prior),
            "inputs": inputs.iter().map(|&i| m.inputs().label(i)).collect::<Vec<_>>(),
            "outputs": outputs.iter().map(|&o| m.outputs().label(o)).collect::<Vec<_>>(),
            "filter": describe(&a),
            "oracle": describe(&b),
        })),
    }
}

pub fn oracle(machine: &Path, trials: usize, horizon: usize, seed: u64, parallel: bool) -> Result<Outcome, CliError> {
    if trials > MAX_TRIALS {
        return Err(CliError::Usage(format!("--trials {trials} exceeds the cap {MAX_TRIALS}")));
    }
    if horizon > MAX_ORACLE_HORIZON {
        return Err(CliError::Usage(format!("--horizon {horizon} exceeds the cap {MAX_ORACLE_HORIZON}")));
    }
    let loaded = load_machine(machine)?;
    let m = &loaded.mealy;
    let results: Vec<Trial> = if parallel {
        (0..trials).into_par_iter().map(|t| oracle_trial(m, seed, t, horizon)).collect()
    } else {
        (0..trials).map(|t| oracle_trial(m, seed, t, horizon)).collect()
    };
    let mut agree = 0;
    let mut impossible = 0;
    let mut mismatches = Vec::new();
    for r in results {
        match r {
            Trial::Agree => agree += 1,
            Trial::ImpossibleAgree => impossible += 1,
            Trial::Mismatch(v) => mismatches.push(v),
        }
    }
    let mut out = String::new();
    line(
        &mut out,
        &json!({
            "version": VERSION,
            "command": "oracle",
            "args": {"machine": source_name(machine), "trials": trials, "horizon": horizon, "seed": seed}
        }),
    );
    line(
        &mut out,
        &json!({"agree": agree, "impossible_agree": impossible, "mismatches": mismatches.len()}),
    );
    for v in mismatches.iter().take(10) {
        line(&mut out, v);
    }
    Ok(Outcome {
        output: out,
        exit_code: if mismatches.is_empty() { 0 } else { EXIT_CHECK },
    })
}

pub fn unroll(machine: &Path, prior: Option<&str>, horizon: usize) -> Result<Outcome, CliError> {
    if horizon == 0 {
        return Err(CliError::Usage("--horizon must be at least 1".into()));
    }
    let loaded = load_machine(machine)?;
    let b0 = prior_or_uniform(&loaded.mealy, prior, "--prior")?;
    let comb = match &loaded.comb {
        Some(c) => c.clone(),
        None => check_comb(&loaded.mealy)?,
    };
    let p = unroll_process(&comb, &b0, horizon)?;
    Ok(Outcome::ok(format::write_process(&p)))
}

pub fn condition(process: &Path, input: &str, output: &str) -> Result<Outcome, CliError> {
    let text = read_file(process)?;
    let p = format::parse_process(&text, &source_name(process))?;
    let i = p.inputs().index_of(input).map_err(|e| CliError::Usage(format!("--input: {e}")))?;
    let o = p.outputs().index_of(output).map_err(|e| CliError::Usage(format!("--output: {e}")))?;
    if p.horizon() < 2 {
        return Err(CliError::Usage(format!("process horizon {} is too short to condition", p.horizon())));
    }
    let q = process_update(&p, i, o)?;
    Ok(Outcome::ok(format::write_process(&q)))
}

pub fn kalman(system: &Path, observations: &Path) -> Result<Outcome, CliError> {
    let sys = format::parse_kalman_system(&read_file(system)?, &source_name(system))?;
    let m = sys.model.out_dim() - sys.prior.dim();
    let obs = format::parse_observations(&read_file(observations)?, &source_name(observations), m)?;
    let mut out = String::new();
    let mut state = sys.prior.clone();
    line(&mut out, &KalmanRecord::new(0, &state));
    for (k, o) in obs.iter().enumerate() {
        state = kalman_step(&sys.model, &state, o)?;
        line(&mut out, &KalmanRecord::new(k + 1, &state));
    }
    Ok(Outcome::ok(out))
}

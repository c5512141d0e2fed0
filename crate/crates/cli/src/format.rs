//! On-disk formats, all JSON with a `"version": "v1"` field.
//!
//! * machine files: label lists plus sparse transition entries;
//! * process files: a header line followed by one record per level and
//!   input tuple;
//! * filter traces: one record per step and a final result line;
//! * Kalman system and observation files, with matrices as arrays of rows.
//!
//! Probabilities are always written as `"p/q"` strings.

use std::collections::BTreeMap;
use std::fmt;

use markov_machines::dist::{Dist, FinSet, Kernel, Set};
use markov_machines::gauss::{GaussMorphism, KalmanState};
use markov_machines::machines::{check_comb, CombMachine, MealyMachine, UnifilarMachine};
use markov_machines::transducer::ControlledProcess;
use markov_machines::Rat;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const VERSION: &str = "v1";

/// A load failure with the offending location.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ParseError {
    pub source_name: String,
    pub line: Option<usize>,
    pub field: String,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.source_name)?;
        if let Some(line) = self.line {
            write!(f, ":{line}")?;
        }
        if !self.field.is_empty() {
            write!(f, ": {}", self.field)?;
        }
        write!(f, ": {}", self.message)
    }
}

struct Ctx<'a> {
    source: &'a str,
    line: Option<usize>,
}

impl Ctx<'_> {
    fn err(&self, field: impl Into<String>, message: impl fmt::Display) -> ParseError {
        ParseError {
            source_name: self.source.to_string(),
            line: self.line,
            field: field.into(),
            message: message.to_string(),
        }
    }

    fn json<T: for<'de> Deserialize<'de>>(&self, text: &str) -> Result<T, ParseError> {
        serde_json::from_str(text).map_err(|e| ParseError {
            source_name: self.source.to_string(),
            line: Some(self.line.unwrap_or(0) + e.line()),
            field: String::new(),
            message: e.to_string(),
        })
    }

    fn version(&self, v: &str) -> Result<(), ParseError> {
        if v == VERSION {
            Ok(())
        } else {
            Err(self.err("version", format!("unsupported version {v:?}, expected {VERSION:?}")))
        }
    }

    fn set(&self, field: &str, labels: &[String]) -> Result<Set, ParseError> {
        if labels.is_empty() {
            return Err(self.err(field, "empty label list"));
        }
        FinSet::new(set_name(field), labels.iter().cloned()).map_err(|e| self.err(field, e))
    }

    fn index(&self, field: String, set: &Set, label: &str) -> Result<usize, ParseError> {
        set.index_of(label).map_err(|e| self.err(field, e))
    }

    fn rat(&self, field: String, text: &str) -> Result<Rat, ParseError> {
        let q: Rat = text.parse().map_err(|e| self.err(field.clone(), e))?;
        if q.is_negative() {
            return Err(self.err(field, format!("negative probability {q}")));
        }
        Ok(q)
    }
}

fn set_name(field: &str) -> &'static str {
    match field {
        "inputs" => "I",
        "outputs" => "O",
        "states" => "S",
        _ => "X",
    }
}

/// `"p/q"`, also for integers.
pub fn fmt_rat(q: &Rat) -> String {
    format!("{}/{}", q.numer(), q.denom())
}

/// Dense weights in carrier order, `"p/q,p/q,..."`.
pub fn fmt_dense(d: &Dist) -> String {
    d.to_dense().iter().map(fmt_rat).collect::<Vec<_>>().join(",")
}

/// Label → `"p/q"` for every element of the carrier.
pub fn dist_record(d: &Dist) -> Map<String, Value> {
    d.to_dense()
        .iter()
        .enumerate()
        .map(|(i, q)| (d.carrier().label(i).to_string(), Value::String(fmt_rat(q))))
        .collect()
}

/// Parse `"p/q,p/q,..."` as a distribution over `carrier`.
pub fn parse_dense(carrier: &Set, text: &str, source: &str) -> Result<Dist, ParseError> {
    let ctx = Ctx { source, line: None };
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != carrier.len() {
        return Err(ctx.err(
            "prior",
            format!("{} weights for {} states", parts.len(), carrier.len()),
        ));
    }
    let mut weights = Vec::with_capacity(parts.len());
    for (k, p) in parts.iter().enumerate() {
        weights.push(ctx.rat(format!("prior[{k}]"), p)?);
    }
    Dist::from_dense(carrier.clone(), weights).map_err(|e| ctx.err("prior", e))
}

/// Comma-separated labels; the empty string is the empty list.
pub fn parse_labels(set: &Set, text: &str, field: &str, source: &str) -> Result<Vec<usize>, ParseError> {
    let ctx = Ctx { source, line: None };
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .enumerate()
        .map(|(k, l)| ctx.index(format!("{field}[{k}]"), set, l.trim()))
        .collect()
}

#[derive(Serialize, Deserialize, Debug, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Mealy,
    Comb,
    Unifilar,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Mealy => "mealy",
            Kind::Comb => "comb",
            Kind::Unifilar => "unifilar",
        })
    }
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct TransitionEntry {
    pub input: String,
    pub state: String,
    pub output: String,
    pub next_state: String,
    pub prob: String,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct ReadoutEntry {
    pub state: String,
    pub output: String,
    pub prob: String,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct MachineSpec {
    pub version: String,
    pub kind: Kind,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub states: Vec<String>,
    pub transition: Vec<TransitionEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub readout: Option<Vec<ReadoutEntry>>,
}

/// A machine file after validation against its declared kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedMachine {
    pub kind: Kind,
    pub mealy: MealyMachine,
    pub comb: Option<CombMachine>,
}

impl LoadedMachine {
    pub fn new(kind: Kind, mealy: MealyMachine) -> Result<LoadedMachine, markov_machines::Error> {
        let comb = match kind {
            Kind::Mealy => None,
            Kind::Comb => Some(check_comb(&mealy)?),
            Kind::Unifilar => Some(UnifilarMachine::new(check_comb(&mealy)?)?.comb().clone()),
        };
        Ok(LoadedMachine { kind, mealy, comb })
    }

    pub fn states(&self) -> &Set {
        self.mealy.states()
    }
}

pub fn parse_machine(text: &str, source: &str) -> Result<LoadedMachine, ParseError> {
    let ctx = Ctx { source, line: None };
    let spec: MachineSpec = ctx.json(text)?;
    ctx.version(&spec.version)?;
    let i = ctx.set("inputs", &spec.inputs)?;
    let o = ctx.set("outputs", &spec.outputs)?;
    let s = ctx.set("states", &spec.states)?;
    let (ni, ns) = (i.len(), s.len());
    let mut rows: Vec<Vec<(usize, Rat)>> = vec![Vec::new(); ni * ns];
    for (k, e) in spec.transition.iter().enumerate() {
        let f = |name: &str| format!("transition[{k}].{name}");
        let ii = ctx.index(f("input"), &i, &e.input)?;
        let si = ctx.index(f("state"), &s, &e.state)?;
        let oi = ctx.index(f("output"), &o, &e.output)?;
        let ti = ctx.index(f("next_state"), &s, &e.next_state)?;
        let p = ctx.rat(f("prob"), &e.prob)?;
        rows[ii * ns + si].push((oi * ns + ti, p));
    }
    let target = FinSet::pair(&o, &s);
    let mut dists = Vec::with_capacity(rows.len());
    for (k, row) in rows.into_iter().enumerate() {
        let (ii, si) = (k / ns, k % ns);
        let field = format!("transition (input {}, state {})", i.label(ii), s.label(si));
        if row.is_empty() {
            return Err(ctx.err(field, "no entries"));
        }
        dists.push(Dist::new(target.clone(), row).map_err(|e| ctx.err(field, e))?);
    }
    let kernel = Kernel::new(FinSet::pair(&i, &s), target, dists).map_err(|e| ctx.err("transition", e))?;
    let mealy = MealyMachine::new(i, o.clone(), s.clone(), kernel).map_err(|e| ctx.err("transition", e))?;
    let loaded = LoadedMachine::new(spec.kind, mealy).map_err(|e| ctx.err("kind", format!("declared {}: {e}", spec.kind)))?;
    if let Some(entries) = &spec.readout {
        let comb = loaded
            .comb
            .as_ref()
            .ok_or_else(|| ctx.err("readout", "only comb and unifilar machines have a readout"))?;
        let mut rows: Vec<Vec<(usize, Rat)>> = vec![Vec::new(); s.len()];
        for (k, e) in entries.iter().enumerate() {
            let si = ctx.index(format!("readout[{k}].state"), &s, &e.state)?;
            let oi = ctx.index(format!("readout[{k}].output"), &o, &e.output)?;
            rows[si].push((oi, ctx.rat(format!("readout[{k}].prob"), &e.prob)?));
        }
        for (si, row) in rows.into_iter().enumerate() {
            let d = Dist::new(o.clone(), row).map_err(|e| ctx.err(format!("readout (state {})", s.label(si)), e))?;
            if &d != comb.readout().row(si) {
                return Err(ctx.err(
                    format!("readout (state {})", s.label(si)),
                    format!("declared {} but transition gives {}", fmt_dense(&d), fmt_dense(comb.readout().row(si))),
                ));
            }
        }
    }
    Ok(loaded)
}

pub fn machine_spec(m: &LoadedMachine) -> MachineSpec {
    let mealy = &m.mealy;
    let labels = |s: &Set| s.elements().to_vec();
    let (ni, ns) = (mealy.inputs().len(), mealy.states().len());
    let mut transition = Vec::new();
    for ii in 0..ni {
        for si in 0..ns {
            for (os, p) in mealy.row(ii, si).support() {
                transition.push(TransitionEntry {
                    input: mealy.inputs().label(ii).to_string(),
                    state: mealy.states().label(si).to_string(),
                    output: mealy.outputs().label(os / ns).to_string(),
                    next_state: mealy.states().label(os % ns).to_string(),
                    prob: fmt_rat(p),
                });
            }
        }
    }
    let readout = m.comb.as_ref().map(|c| {
        let mut out = Vec::new();
        for si in 0..ns {
            for (oi, p) in c.readout().row(si).support() {
                out.push(ReadoutEntry {
                    state: mealy.states().label(si).to_string(),
                    output: mealy.outputs().label(oi).to_string(),
                    prob: fmt_rat(p),
                });
            }
        }
        out
    });
    MachineSpec {
        version: VERSION.into(),
        kind: m.kind,
        inputs: labels(mealy.inputs()),
        outputs: labels(mealy.outputs()),
        states: labels(mealy.states()),
        transition,
        readout,
    }
}

pub fn write_machine(m: &LoadedMachine) -> String {
    let mut s = serde_json::to_string_pretty(&machine_spec(m)).expect("machine spec serialises");
    s.push('\n');
    s
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct ProcessHeader {
    pub version: String,
    pub kind: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub horizon: usize,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct OutcomeEntry {
    pub outputs: Vec<String>,
    pub prob: String,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct LevelRecord {
    pub n: usize,
    pub input_tuple: Vec<String>,
    pub output_dist: Vec<OutcomeEntry>,
}

pub fn write_process(p: &ControlledProcess) -> String {
    let header = ProcessHeader {
        version: VERSION.into(),
        kind: "process".into(),
        inputs: p.inputs().elements().to_vec(),
        outputs: p.outputs().elements().to_vec(),
        horizon: p.horizon(),
    };
    let mut out = serde_json::to_string(&header).expect("header serialises");
    out.push('\n');
    for n in 1..=p.horizon() {
        let tuples = FinSet::power(p.outputs(), n);
        for (tuple, d) in p.level(n) {
            let record = LevelRecord {
                n,
                input_tuple: tuple.iter().map(|&i| p.inputs().label(i).to_string()).collect(),
                output_dist: d
                    .support()
                    .map(|(code, q)| OutcomeEntry {
                        outputs: tuples
                            .decode(code)
                            .iter()
                            .map(|&o| p.outputs().label(o).to_string())
                            .collect(),
                        prob: fmt_rat(q),
                    })
                    .collect(),
            };
            out.push_str(&serde_json::to_string(&record).expect("record serialises"));
            out.push('\n');
        }
    }
    out
}

pub fn parse_process(text: &str, source: &str) -> Result<ControlledProcess, ParseError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hl, first) = lines.next().ok_or_else(|| ParseError {
        source_name: source.into(),
        line: None,
        field: String::new(),
        message: "empty process file".into(),
    })?;
    let ctx = Ctx { source, line: Some(hl + 1) };
    let header: ProcessHeader = Ctx { source, line: Some(hl) }.json(first)?;
    ctx.version(&header.version)?;
    if header.kind != "process" {
        return Err(ctx.err("kind", format!("expected \"process\", found {:?}", header.kind)));
    }
    let i = ctx.set("inputs", &header.inputs)?;
    let o = ctx.set("outputs", &header.outputs)?;
    let no = o.len();
    let mut levels: Vec<BTreeMap<Vec<usize>, Dist>> = vec![BTreeMap::new(); header.horizon];
    for (ln, line) in lines {
        let ctx = Ctx { source, line: Some(ln + 1) };
        let rec: LevelRecord = Ctx { source, line: Some(ln) }.json(line)?;
        if rec.n == 0 || rec.n > header.horizon {
            return Err(ctx.err("n", format!("level {} outside 1..={}", rec.n, header.horizon)));
        }
        if rec.input_tuple.len() + 1 != rec.n {
            return Err(ctx.err("input_tuple", format!("level {} needs {} inputs", rec.n, rec.n - 1)));
        }
        let tuple = rec
            .input_tuple
            .iter()
            .enumerate()
            .map(|(k, l)| ctx.index(format!("input_tuple[{k}]"), &i, l))
            .collect::<Result<Vec<_>, _>>()?;
        let mut entries = Vec::with_capacity(rec.output_dist.len());
        for (k, e) in rec.output_dist.iter().enumerate() {
            if e.outputs.len() != rec.n {
                return Err(ctx.err(format!("output_dist[{k}].outputs"), format!("expected {} outputs", rec.n)));
            }
            let mut code = 0;
            for (j, l) in e.outputs.iter().enumerate() {
                code = code * no + ctx.index(format!("output_dist[{k}].outputs[{j}]"), &o, l)?;
            }
            entries.push((code, ctx.rat(format!("output_dist[{k}].prob"), &e.prob)?));
        }
        let d = Dist::new(FinSet::power(&o, rec.n), entries).map_err(|e| ctx.err("output_dist", e))?;
        if levels[rec.n - 1].insert(tuple, d).is_some() {
            return Err(ctx.err("input_tuple", "duplicate record"));
        }
    }
    ControlledProcess::new(i, o, levels).map_err(|e| ParseError {
        source_name: source.into(),
        line: None,
        field: "levels".into(),
        message: e.to_string(),
    })
}

/// One filtering step as written to a trace.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TraceStep {
    pub step: usize,
    pub input: String,
    pub output: String,
    pub predicted: Map<String, Value>,
    pub posterior: Map<String, Value>,
}

/// Last line of a filter trace.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
#[serde(tag = "result", rename_all = "snake_case", deny_unknown_fields)]
pub enum TraceResult {
    Posterior {
        posterior: Map<String, Value>,
        dense: String,
    },
    ImpossibleObservation {
        step: usize,
    },
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
#[serde(untagged)]
pub enum TraceLine {
    Step(TraceStep),
    Result(TraceResult),
}

pub fn parse_trace(text: &str, source: &str) -> Result<Vec<TraceLine>, ParseError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(ln, l)| Ctx { source, line: Some(ln) }.json(l))
        .collect()
}

fn finite(ctx: &Ctx<'_>, field: &str, xs: &[f64]) -> Result<(), ParseError> {
    match xs.iter().position(|x| !x.is_finite()) {
        Some(k) => Err(ctx.err(format!("{field}[{k}]"), "not a finite number")),
        None => Ok(()),
    }
}

fn matrix(ctx: &Ctx<'_>, field: &str, rows: &[Vec<f64>], r: usize, c: usize) -> Result<DMatrix<f64>, ParseError> {
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(ctx.err(field, format!("expected {r} rows of {c} numbers")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    finite(ctx, field, &flat)?;
    Ok(DMatrix::from_row_slice(r, c, &flat))
}

fn vector(ctx: &Ctx<'_>, field: &str, xs: &[f64], n: usize) -> Result<DVector<f64>, ParseError> {
    if xs.len() != n {
        return Err(ctx.err(field, format!("expected {n} numbers, found {}", xs.len())));
    }
    finite(ctx, field, xs)?;
    Ok(DVector::from_column_slice(xs))
}

pub fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

/// A linear-Gaussian model `h ↦ N(A h + c, Σ)` on `H ⊕ O` (hidden block
/// first) together with a prior.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct KalmanSystemSpec {
    pub version: String,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub a: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    pub noise: Vec<Vec<f64>>,
    pub prior_mean: Vec<f64>,
    pub prior_cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanSystem {
    pub model: GaussMorphism,
    pub prior: KalmanState,
}

pub fn parse_kalman_system(text: &str, source: &str) -> Result<KalmanSystem, ParseError> {
    let ctx = Ctx { source, line: None };
    let spec: KalmanSystemSpec = ctx.json(text)?;
    ctx.version(&spec.version)?;
    let (n, m) = (spec.hidden_dim, spec.output_dim);
    let a = matrix(&ctx, "a", &spec.a, n + m, n)?;
    let c = vector(&ctx, "c", &spec.c, n + m)?;
    let noise = matrix(&ctx, "noise", &spec.noise, n + m, n + m)?;
    let model = GaussMorphism::new(a, c, noise).map_err(|e| ctx.err("noise", e))?;
    let mean = vector(&ctx, "prior_mean", &spec.prior_mean, n)?;
    let cov = matrix(&ctx, "prior_cov", &spec.prior_cov, n, n)?;
    let prior = KalmanState::new(mean, cov).map_err(|e| ctx.err("prior_cov", e))?;
    Ok(KalmanSystem { model, prior })
}

pub fn kalman_system_spec(sys: &KalmanSystem) -> KalmanSystemSpec {
    let n = sys.prior.dim();
    KalmanSystemSpec {
        version: VERSION.into(),
        hidden_dim: n,
        output_dim: sys.model.out_dim() - n,
        a: rows_of(sys.model.matrix()),
        c: sys.model.offset().iter().copied().collect(),
        noise: rows_of(sys.model.noise()),
        prior_mean: sys.prior.hbar().iter().copied().collect(),
        prior_cov: rows_of(sys.prior.sigma_p()),
    }
}

pub fn write_kalman_system(sys: &KalmanSystem) -> String {
    let mut s = serde_json::to_string_pretty(&kalman_system_spec(sys)).expect("system serialises");
    s.push('\n');
    s
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ObservationsSpec {
    pub version: String,
    pub observations: Vec<Vec<f64>>,
}

pub fn parse_observations(text: &str, source: &str, dim: usize) -> Result<Vec<DVector<f64>>, ParseError> {
    let ctx = Ctx { source, line: None };
    let spec: ObservationsSpec = ctx.json(text)?;
    ctx.version(&spec.version)?;
    spec.observations
        .iter()
        .enumerate()
        .map(|(k, o)| vector(&ctx, &format!("observations[{k}]"), o, dim))
        .collect()
}

/// One line of a Kalman state trace.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct KalmanRecord {
    pub step: usize,
    pub hbar: Vec<f64>,
    pub sigma_p: Vec<Vec<f64>>,
}

impl KalmanRecord {
    pub fn new(step: usize, s: &KalmanState) -> KalmanRecord {
        KalmanRecord {
            step,
            hbar: s.hbar().iter().copied().collect(),
            sigma_p: rows_of(s.sigma_p()),
        }
    }
}

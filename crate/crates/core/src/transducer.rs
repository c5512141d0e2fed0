//! Finite-horizon controlled stochastic processes: the behaviours of comb
//! machines, truncated at a horizon.
//!
//! Level `n` of a process maps each input tuple `(i_1..i_{n-1})` to a
//! distribution over output tuples `(o_0..o_{n-1})`. Output tuples are coded
//! lexicographically with `o_0` most significant.

use std::collections::BTreeMap;
use std::fmt;

use crate::dist::{Dist, FinSet, Set};
use crate::error::{Error, Result};
use crate::filtering::Belief;
use crate::machines::CombMachine;
use crate::rat::Rat;

/// First place where a family violates causality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CausalityWitness {
    /// Level whose marginal disagrees with level `n - 1`.
    pub n: usize,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub marginal: String,
    pub expected: String,
}

impl fmt::Display for CausalityWitness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "level {} inputs ({}) outputs ({}): marginal {} but level {} gives {}",
            self.n,
            self.inputs.join(","),
            self.outputs.join(","),
            self.marginal,
            self.n - 1,
            self.expected
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ControlledProcess {
    inputs: Set,
    outputs: Set,
    levels: Vec<BTreeMap<Vec<usize>, Dist>>,
}

fn input_tuples(ni: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|t| {
                (0..ni).map(move |i| {
                    let mut t = t.clone();
                    t.push(i);
                    t
                })
            })
            .collect();
    }
    out
}

impl ControlledProcess {
    /// Validates shapes: level `n` (1-based) must hold a distribution over
    /// `O^n` for every tuple in `I^(n-1)`. Causality is checked separately
    /// by [`check_causality`].
    pub fn new(inputs: Set, outputs: Set, levels: Vec<BTreeMap<Vec<usize>, Dist>>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::HorizonTooShort { min: 1, found: 0 });
        }
        for (k, level) in levels.iter().enumerate() {
            let n = k + 1;
            let carrier = FinSet::power(&outputs, n);
            let expected = inputs.len().pow(k as u32);
            if level.len() != expected {
                return Err(Error::RowCount {
                    expected,
                    found: level.len(),
                });
            }
            for (tuple, d) in level {
                if tuple.len() != k || tuple.iter().any(|&i| i >= inputs.len()) {
                    return Err(Error::ShapeMismatch {
                        context: "process input tuple",
                        expected: format!("{k} inputs"),
                        found: format!("{tuple:?}"),
                    });
                }
                carrier.require_same(d.carrier(), "process level")?;
            }
        }
        Ok(ControlledProcess {
            inputs,
            outputs,
            levels,
        })
    }

    /// As [`ControlledProcess::new`], additionally rejecting non-causal
    /// families.
    pub fn causal(inputs: Set, outputs: Set, levels: Vec<BTreeMap<Vec<usize>, Dist>>) -> Result<Self> {
        let p = ControlledProcess::new(inputs, outputs, levels)?;
        check_causality(&p).map_err(|w| Error::NotCausal(Box::new(w)))?;
        Ok(p)
    }

    /// The product family `p_n = q^⊗n` for every input tuple.
    pub fn iid(inputs: Set, q: &Dist, horizon: usize) -> Result<Self> {
        let outputs = q.carrier().clone();
        let no = outputs.len();
        let mut levels = Vec::with_capacity(horizon);
        let mut current: BTreeMap<usize, Rat> = BTreeMap::from([(0, Rat::one())]);
        for k in 0..horizon {
            let mut next = BTreeMap::new();
            for (code, p) in &current {
                for (o, w) in q.support() {
                    next.insert(code * no + o, p * w);
                }
            }
            current = next;
            let d = Dist::new(FinSet::power(&outputs, k + 1), current.clone())?;
            levels.push(
                input_tuples(inputs.len(), k)
                    .into_iter()
                    .map(|t| (t, d.clone()))
                    .collect(),
            );
        }
        ControlledProcess::new(inputs, outputs, levels)
    }

    pub fn inputs(&self) -> &Set {
        &self.inputs
    }

    pub fn outputs(&self) -> &Set {
        &self.outputs
    }

    pub fn horizon(&self) -> usize {
        self.levels.len()
    }

    /// Level `n`, 1-based.
    pub fn level(&self, n: usize) -> &BTreeMap<Vec<usize>, Dist> {
        &self.levels[n - 1]
    }

    pub fn levels(&self) -> &[BTreeMap<Vec<usize>, Dist>] {
        &self.levels
    }

    /// `p_n(· | inputs)` with `n = inputs.len() + 1`.
    pub fn get(&self, inputs: &[usize]) -> Option<&Dist> {
        self.levels.get(inputs.len())?.get(inputs)
    }

    /// `p_n(outputs | inputs)`; `outputs` must be one longer than `inputs`.
    pub fn prob(&self, outputs: &[usize], inputs: &[usize]) -> Rat {
        assert_eq!(outputs.len(), inputs.len() + 1, "output tuple length");
        let no = self.outputs.len();
        let code = outputs.iter().fold(0, |acc, &o| acc * no + o);
        self.get(inputs).map(|d| d.prob(code)).unwrap_or_else(Rat::zero)
    }

    /// Levelwise convex combination of processes on the same sets and
    /// horizon.
    pub fn mixture(components: &[(Rat, ControlledProcess)]) -> Result<ControlledProcess> {
        let (_, first) = components.first().ok_or(Error::NotNormalized {
            set: "mixture".into(),
            sum: "0".into(),
        })?;
        let mut levels = Vec::with_capacity(first.horizon());
        for k in 0..first.horizon() {
            let mut level = BTreeMap::new();
            for tuple in first.levels[k].keys() {
                let mut parts = Vec::with_capacity(components.len());
                for (w, p) in components {
                    first.inputs.require_same(&p.inputs, "mixture inputs")?;
                    first.outputs.require_same(&p.outputs, "mixture outputs")?;
                    if p.horizon() != first.horizon() {
                        return Err(Error::HorizonMismatch {
                            expected: first.horizon(),
                            found: p.horizon(),
                        });
                    }
                    parts.push((w, &p.levels[k][tuple]));
                }
                let carrier = FinSet::power(&first.outputs, k + 1);
                level.insert(tuple.clone(), Dist::mixture(carrier, parts)?);
            }
            levels.push(level);
        }
        ControlledProcess::new(first.inputs.clone(), first.outputs.clone(), levels)
    }
}

/// The horizon-`N` behaviour of `m` started from `s0`: for each input
/// tuple, `n - 1` transitions followed by one readout.
pub fn unroll(m: &CombMachine, s0: &Belief, horizon: usize) -> Result<ControlledProcess> {
    if horizon == 0 {
        return Err(Error::HorizonTooShort { min: 1, found: 0 });
    }
    m.states().require_same(s0.carrier(), "unroll belief")?;
    let (ni, no, ns) = (m.inputs().len(), m.outputs().len(), m.states().len());
    let mut levels: Vec<BTreeMap<Vec<usize>, Dist>> = vec![BTreeMap::new(); horizon];
    // (input tuple, frontier over (output code, state))
    let start: BTreeMap<(usize, usize), Rat> =
        s0.support().map(|(s, p)| ((0, s), p.clone())).collect();
    let mut stack = vec![(Vec::new(), start)];
    while let Some((tuple, frontier)) = stack.pop() {
        let k = tuple.len();
        let mut out: BTreeMap<usize, Rat> = BTreeMap::new();
        for ((code, s), p) in &frontier {
            for (o, q) in m.readout().row(*s).support() {
                *out.entry(code * no + o).or_insert_with(Rat::zero) += &(p * q);
            }
        }
        levels[k].insert(
            tuple.clone(),
            Dist::new(FinSet::power(m.outputs(), k + 1), out)?,
        );
        if k + 1 == horizon {
            continue;
        }
        for i in 0..ni {
            let mut next: BTreeMap<(usize, usize), Rat> = BTreeMap::new();
            for ((code, s), p) in &frontier {
                for (os, q) in m.mealy().row(i, *s).support() {
                    let key = (code * no + os / ns, os % ns);
                    *next.entry(key).or_insert_with(Rat::zero) += &(p * q);
                }
            }
            let mut t = tuple.clone();
            t.push(i);
            stack.push((t, next));
        }
    }
    ControlledProcess::new(m.inputs().clone(), m.outputs().clone(), levels)
}

/// Exact check that discarding the last output and dropping the last input
/// of level `n` gives level `n - 1`, for every `n ≥ 2` and input tuple.
pub fn check_causality(p: &ControlledProcess) -> std::result::Result<(), CausalityWitness> {
    let no = p.outputs.len();
    for k in 1..p.horizon() {
        let n = k + 1;
        for (tuple, d) in &p.levels[k] {
            let prefix = &tuple[..k - 1];
            let expected = &p.levels[k - 1][prefix];
            let mut marginal: BTreeMap<usize, Rat> = BTreeMap::new();
            for (code, w) in d.support() {
                *marginal.entry(code / no).or_insert_with(Rat::zero) += w;
            }
            let mut bad = None;
            for code in marginal.keys().copied().chain(expected.support().map(|(c, _)| c)) {
                let got = marginal.get(&code).cloned().unwrap_or_else(Rat::zero);
                if got != expected.prob(code) {
                    bad = Some((code, got));
                    break;
                }
            }
            if let Some((code, got)) = bad {
                let outs = FinSet::power(&p.outputs, k).decode(code);
                return Err(CausalityWitness {
                    n,
                    inputs: tuple.iter().map(|&i| p.inputs.label(i).to_string()).collect(),
                    outputs: outs.iter().map(|&o| p.outputs.label(o).to_string()).collect(),
                    marginal: got.to_string(),
                    expected: expected.prob(code).to_string(),
                });
            }
        }
    }
    Ok(())
}

/// Condition on the first step: `p^{i,o}_n(o_0.. | i_1..) =
/// p_{n+1}(o, o_0.. | i, i_1..) / p_1(o)`.
pub fn process_update(p: &ControlledProcess, i: usize, o: usize) -> Result<ControlledProcess> {
    if p.horizon() < 2 {
        return Err(Error::HorizonTooShort {
            min: 2,
            found: p.horizon(),
        });
    }
    let p1 = p.levels[0][&Vec::new()].prob(o);
    let inv = p1.recip().ok_or(Error::ImpossibleObservation { step: 1 })?;
    let no = p.outputs.len();
    let mut levels = Vec::with_capacity(p.horizon() - 1);
    for k in 0..p.horizon() - 1 {
        let n = k + 1;
        let block = no.pow(n as u32);
        let carrier = FinSet::power(&p.outputs, n);
        let mut level = BTreeMap::new();
        for tuple in input_tuples(p.inputs.len(), k) {
            let mut src = Vec::with_capacity(k + 1);
            src.push(i);
            src.extend_from_slice(&tuple);
            let d = &p.levels[k + 1][&src];
            let entries = d
                .support()
                .filter(|(code, _)| code / block == o)
                .map(|(code, w)| (code % block, w * &inv));
            level.insert(tuple, Dist::new(carrier.clone(), entries)?);
        }
        levels.push(level);
    }
    ControlledProcess::new(p.inputs.clone(), p.outputs.clone(), levels)
}

/// Equal horizon-`N` behaviour of two started machines.
pub fn behaviour_equal(
    m1: &CombMachine,
    b1: &Belief,
    m2: &CombMachine,
    b2: &Belief,
    horizon: usize,
) -> Result<bool> {
    m1.inputs().require_same(m2.inputs(), "behaviour inputs")?;
    m1.outputs().require_same(m2.outputs(), "behaviour outputs")?;
    Ok(unroll(m1, b1, horizon)? == unroll(m2, b2, horizon)?)
}

//! Stochastic Mealy, comb and unifilar machines over `Dist`.
//!
//! A Mealy machine is a state set `S` with a transition kernel
//! `α: I×S → O×S`. A comb machine additionally has an output that cannot
//! depend on the current input: summing out the next state gives a readout
//! `α•: S → O` that is the same for every input. A unifilar machine is a
//! comb machine whose transition is deterministic given the output, so that
//! all randomness sits in the emitted symbol.

use std::collections::BTreeMap;
use std::fmt;

use crate::dist::{Dist, FinSet, Kernel, Set, Side};
use crate::error::{Error, Result};
use crate::rat::Rat;

/// Transition `α: I×S → O×S` with `α(o,s'|i,s)`.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct MealyMachine {
    inputs: Set,
    outputs: Set,
    states: Set,
    transition: Kernel,
}

impl MealyMachine {
    pub fn new(inputs: Set, outputs: Set, states: Set, transition: Kernel) -> Result<Self> {
        FinSet::pair(&inputs, &states).require_same(transition.source(), "transition source")?;
        FinSet::pair(&outputs, &states).require_same(transition.target(), "transition target")?;
        Ok(MealyMachine {
            inputs,
            outputs,
            states,
            transition,
        })
    }

    /// Build the transition row by row; `row(i, s)` is a distribution over
    /// `O×S`.
    pub fn from_fn<F>(inputs: Set, outputs: Set, states: Set, mut row: F) -> Result<Self>
    where
        F: FnMut(usize, usize) -> Result<Dist>,
    {
        let ns = states.len();
        let source = FinSet::pair(&inputs, &states);
        let target = FinSet::pair(&outputs, &states);
        let transition = Kernel::from_fn(source, target, |is| row(is / ns, is % ns))?;
        MealyMachine::new(inputs, outputs, states, transition)
    }

    pub fn inputs(&self) -> &Set {
        &self.inputs
    }

    pub fn outputs(&self) -> &Set {
        &self.outputs
    }

    pub fn states(&self) -> &Set {
        &self.states
    }

    pub fn transition(&self) -> &Kernel {
        &self.transition
    }

    /// Distribution over `O×S` after input `i` in state `s`.
    pub fn row(&self, i: usize, s: usize) -> &Dist {
        self.transition.row(i * self.states.len() + s)
    }

    /// `α(o,s'|i,s)`.
    pub fn prob(&self, i: usize, s: usize, o: usize, next: usize) -> Rat {
        self.row(i, s).prob(o * self.states.len() + next)
    }

    /// Output distribution at `(i,s)` with the next state summed out.
    pub fn output_dist(&self, i: usize, s: usize) -> Dist {
        let ns = self.states.len();
        let mut map: BTreeMap<usize, Rat> = BTreeMap::new();
        for (os, p) in self.row(i, s).support() {
            *map.entry(os / ns).or_insert_with(Rat::zero) += p;
        }
        Dist::from_map_unchecked(self.outputs.clone(), map)
    }

    /// Canonical update map `u: O×I×S → S`, the conditional of `α` given
    /// the output: `u(s'|o,i,s) = α(o,s'|i,s) / Σ_t α(o,t|i,s)`, uniform
    /// where the output has probability zero.
    pub fn update_map(&self) -> Kernel {
        let ns = self.states.len();
        let source = FinSet::product(&[self.outputs.clone(), self.inputs.clone(), self.states.clone()]);
        let mut rows = Vec::with_capacity(source.len());
        for o in 0..self.outputs.len() {
            for i in 0..self.inputs.len() {
                for s in 0..ns {
                    let row = self.row(i, s);
                    let masses = (0..ns).map(|t| (t, row.prob(o * ns + t)));
                    rows.push(
                        Dist::normalized(self.states.clone(), masses)
                            .unwrap_or_else(|| Dist::uniform(self.states.clone())),
                    );
                }
            }
        }
        Kernel::new(source, self.states.clone(), rows).expect("update map shape")
    }

    /// The transition regrouped as `I×S → O×S` is deterministic given `O`.
    pub fn is_deterministic_given_output(&self) -> bool {
        self.transition
            .is_deterministic_given_first()
            .expect("transition target is a product")
    }

    /// Apply a state relabelling `σ: S → T` (a bijection given as a map of
    /// indices) to obtain the isomorphic machine on `T`.
    pub fn relabel(&self, states: Set, sigma: &[usize]) -> Result<MealyMachine> {
        if sigma.len() != self.states.len() || states.len() != self.states.len() {
            return Err(Error::RowCount {
                expected: self.states.len(),
                found: sigma.len(),
            });
        }
        let mut inverse = vec![usize::MAX; sigma.len()];
        for (s, &t) in sigma.iter().enumerate() {
            inverse[t] = s;
        }
        let ns = self.states.len();
        let target = FinSet::pair(&self.outputs, &states);
        MealyMachine::from_fn(
            self.inputs.clone(),
            self.outputs.clone(),
            states.clone(),
            |i, t| {
                let src = self.row(i, inverse[t]);
                Dist::new(
                    target.clone(),
                    src.support().map(|(os, p)| ((os / ns) * ns + sigma[os % ns], p.clone())),
                )
            },
        )
    }
}

/// Counterexample to the comb condition: at `state`, the probability of
/// `output` differs between two inputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CombWitness {
    pub state: String,
    pub input_a: String,
    pub input_b: String,
    pub output: String,
    pub prob_a: Rat,
    pub prob_b: Rat,
}

impl fmt::Display for CombWitness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "state {} emits {} with probability {} under input {} but {} under input {}",
            self.state, self.output, self.prob_a, self.input_a, self.prob_b, self.input_b
        )
    }
}

/// A Mealy machine whose output distribution does not depend on the input,
/// together with that readout `α•: S → O`.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CombMachine {
    mealy: MealyMachine,
    readout: Kernel,
}

/// Accept `m` as a comb machine, deriving `α•(o|s) = Σ_{s'} α(o,s'|i,s)`,
/// or report where the sum depends on `i`.
pub fn check_comb(m: &MealyMachine) -> Result<CombMachine> {
    let mut rows = Vec::with_capacity(m.states.len());
    for s in 0..m.states.len() {
        let first = m.output_dist(0, s);
        for i in 1..m.inputs.len() {
            let other = m.output_dist(i, s);
            if other != first {
                let o = (0..m.outputs.len())
                    .find(|&o| first.prob(o) != other.prob(o))
                    .expect("distributions differ somewhere");
                return Err(Error::NotAComb(Box::new(CombWitness {
                    state: m.states.label(s).to_string(),
                    input_a: m.inputs.label(0).to_string(),
                    input_b: m.inputs.label(i).to_string(),
                    output: m.outputs.label(o).to_string(),
                    prob_a: first.prob(o),
                    prob_b: other.prob(o),
                })));
            }
        }
        rows.push(first);
    }
    let readout = Kernel::new(m.states.clone(), m.outputs.clone(), rows)?;
    Ok(CombMachine {
        mealy: m.clone(),
        readout,
    })
}

impl CombMachine {
    /// Assemble `α(o,s'|i,s) = α•(o|s) u(s'|o,i,s)` from a readout and an
    /// update map `u: O×I×S → S`.
    pub fn from_parts(inputs: Set, readout: &Kernel, update: &Kernel) -> Result<CombMachine> {
        let states = readout.source().clone();
        let outputs = readout.target().clone();
        FinSet::product(&[outputs.clone(), inputs.clone(), states.clone()])
            .require_same(update.source(), "update source")?;
        states.require_same(update.target(), "update target")?;
        let (ni, ns) = (inputs.len(), states.len());
        let target = FinSet::pair(&outputs, &states);
        let mealy = MealyMachine::from_fn(inputs, outputs, states.clone(), |i, s| {
            let mut entries = Vec::new();
            for (o, p) in readout.row(s).support() {
                for (t, q) in update.row((o * ni + i) * ns + s).support() {
                    entries.push((o * ns + t, p * q));
                }
            }
            Dist::new(target.clone(), entries)
        })?;
        check_comb(&mealy)
    }

    pub fn mealy(&self) -> &MealyMachine {
        &self.mealy
    }

    pub fn readout(&self) -> &Kernel {
        &self.readout
    }

    pub fn inputs(&self) -> &Set {
        &self.mealy.inputs
    }

    pub fn outputs(&self) -> &Set {
        &self.mealy.outputs
    }

    pub fn states(&self) -> &Set {
        &self.mealy.states
    }

    pub fn transition(&self) -> &Kernel {
        &self.mealy.transition
    }
}

/// Canonical update map of a comb machine; see [`MealyMachine::update_map`].
pub fn extract_update(m: &CombMachine) -> Kernel {
    m.mealy.update_map()
}

/// Recompose `α•(o|s)·u(s'|o,i,s)` into a transition `I×S → O×S`.
pub fn recompose(readout: &Kernel, update: &Kernel, inputs: &Set) -> Result<Kernel> {
    Ok(CombMachine::from_parts(inputs.clone(), readout, update)?
        .mealy
        .transition)
}

pub fn is_unifilar(m: &CombMachine) -> bool {
    m.mealy.is_deterministic_given_output()
}

/// A comb machine whose transition is deterministic given the output.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct UnifilarMachine {
    comb: CombMachine,
    update: Kernel,
}

impl UnifilarMachine {
    pub fn new(comb: CombMachine) -> Result<UnifilarMachine> {
        if !is_unifilar(&comb) {
            return Err(Error::NotUnifilar);
        }
        let update = extract_update(&comb);
        Ok(UnifilarMachine { comb, update })
    }

    /// Readout `α•` plus a next-state function `next(o, i, s)`.
    pub fn from_readout<F>(inputs: Set, readout: &Kernel, next: F) -> Result<UnifilarMachine>
    where
        F: Fn(usize, usize, usize) -> usize,
    {
        let states = readout.source().clone();
        let outputs = readout.target().clone();
        let (ni, ns) = (inputs.len(), states.len());
        let source = FinSet::product(&[outputs, inputs.clone(), states.clone()]);
        let update = Kernel::deterministic(source, states, |ois| {
            let (o, rest) = (ois / (ni * ns), ois % (ni * ns));
            next(o, rest / ns, rest % ns)
        });
        UnifilarMachine::new(CombMachine::from_parts(inputs, readout, &update)?)
    }

    pub fn comb(&self) -> &CombMachine {
        &self.comb
    }

    pub fn mealy(&self) -> &MealyMachine {
        &self.comb.mealy
    }

    pub fn readout(&self) -> &Kernel {
        &self.comb.readout
    }

    /// Canonical update map; a point mass wherever `α•(o|s) > 0`.
    pub fn update(&self) -> &Kernel {
        &self.update
    }

    /// Next state after emitting `o` on input `i` in state `s`, when that
    /// output is possible.
    pub fn next_state(&self, o: usize, i: usize, s: usize) -> Option<usize> {
        if !self.comb.readout.row(s).in_support(o) {
            return None;
        }
        let (ni, ns) = (self.comb.inputs().len(), self.comb.states().len());
        self.update.row((o * ni + i) * ns + s).as_point()
    }
}

/// `α ⨟ (id_O ⊗ f) = (id_I ⊗ f) ⨟ β` as kernels `I×S → O×T`.
pub fn is_machine_morphism(f: &Kernel, m: &MealyMachine, n: &MealyMachine) -> Result<bool> {
    m.inputs.require_same(&n.inputs, "morphism inputs")?;
    m.outputs.require_same(&n.outputs, "morphism outputs")?;
    m.states.require_same(f.source(), "morphism source")?;
    n.states.require_same(f.target(), "morphism target")?;
    let lhs = m
        .transition
        .compose(&Kernel::identity(&m.outputs).tensor(f))?;
    let rhs = Kernel::identity(&m.inputs)
        .tensor(f)
        .compose(&n.transition)?;
    Ok(lhs == rhs)
}

/// Morphism of unifilar machines: a deterministic machine morphism.
pub fn is_unifilar_morphism(f: &Kernel, m: &UnifilarMachine, n: &UnifilarMachine) -> Result<bool> {
    Ok(f.is_deterministic() && is_machine_morphism(f, m.mealy(), n.mealy())?)
}

/// `α• = f ⨟ β•`. Implied by [`is_machine_morphism`] for comb machines.
pub fn readout_commutes(f: &Kernel, m: &CombMachine, n: &CombMachine) -> Result<bool> {
    Ok(m.readout == f.compose(&n.readout)?)
}

/// Exact joint distribution over `S × O^n` of the final state and the
/// outputs `o_1..o_n` produced by chaining the transition from `prior` under
/// `inputs`.
pub fn run_joint(m: &MealyMachine, prior: &Dist, inputs: &[usize], horizon: usize) -> Result<Dist> {
    if inputs.len() != horizon {
        return Err(Error::HorizonMismatch {
            expected: horizon,
            found: inputs.len(),
        });
    }
    m.states.require_same(prior.carrier(), "run_joint prior")?;
    let ns = m.states.len();
    let no = m.outputs.len();
    // (output-tuple code, state) -> mass
    let mut frontier: BTreeMap<(usize, usize), Rat> =
        prior.support().map(|(s, p)| ((0, s), p.clone())).collect();
    for &i in inputs {
        let mut next: BTreeMap<(usize, usize), Rat> = BTreeMap::new();
        for ((code, s), p) in &frontier {
            for (os, q) in m.row(i, *s).support() {
                let key = (code * no + os / ns, os % ns);
                *next.entry(key).or_insert_with(Rat::zero) += &(p * q);
            }
        }
        frontier = next;
    }
    let outs = FinSet::power(&m.outputs, horizon);
    let carrier = FinSet::pair(&m.states, &outs);
    let n_out = outs.len();
    Dist::new(
        carrier,
        frontier
            .into_iter()
            .map(|((code, s), p)| (s * n_out + code, p)),
    )
}

/// Marginal of a transition on the next state only, `I×S → S`.
pub fn state_kernel(m: &MealyMachine) -> Kernel {
    m.transition
        .marginal(Side::Second)
        .expect("transition target is a product")
}

//! Bayesian filtering as the belief machine `B(κ)` of a comb machine.
//!
//! The state space of `B(κ)` is the (infinite) set of beliefs `PH`. It is
//! never enumerated: [`BeliefMachine`] computes readouts and updates for the
//! beliefs it is asked about, and [`BeliefMachine::materialize`] builds the
//! finite sub-machine on a reachable set when one is needed.

use std::collections::{BTreeMap, HashMap, VecDeque};

use crate::dist::{Dist, FinSet, Kernel, Mixture, Set};
use crate::error::{Error, Result};
use crate::machines::{check_comb, run_joint, CombMachine, MealyMachine, UnifilarMachine};
use crate::rat::Rat;

/// A distribution over hidden states.
pub type Belief = Dist;

/// Default cap on the number of distinct beliefs enumerated by
/// [`BeliefMachine::reachable`].
pub const DEFAULT_BELIEF_CAP: usize = 10_000;

/// Environment variable overriding [`DEFAULT_BELIEF_CAP`].
pub const BELIEF_CAP_ENV: &str = "MARKOV_MACHINES_MAX_BELIEFS";

pub fn belief_cap_from_env() -> usize {
    std::env::var(BELIEF_CAP_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(DEFAULT_BELIEF_CAP)
}

/// One filtering step:
/// `b'(h') ∝ Σ_h b(h) κ(o,h'|i,h)`.
///
/// Fails with `ImpossibleObservation` (step 1) when `o` has zero predicted
/// probability under `b`.
pub fn filter_step(k: &MealyMachine, b: &Belief, i: usize, o: usize) -> Result<Belief> {
    k.states().require_same(b.carrier(), "filter_step belief")?;
    let nh = k.states().len();
    let mut masses: BTreeMap<usize, Rat> = BTreeMap::new();
    for (h, p) in b.support() {
        for (oh, q) in k.row(i, h).support() {
            if oh / nh == o {
                *masses.entry(oh % nh).or_insert_with(Rat::zero) += &(p * q);
            }
        }
    }
    Dist::normalized(k.states().clone(), masses).ok_or(Error::ImpossibleObservation { step: 1 })
}

/// Left fold of [`filter_step`]. Impossible observations report their
/// 1-based step index.
pub fn filter_sequence(
    k: &MealyMachine,
    b0: &Belief,
    inputs: &[usize],
    outputs: &[usize],
) -> Result<Belief> {
    if inputs.len() != outputs.len() {
        return Err(Error::HorizonMismatch {
            expected: inputs.len(),
            found: outputs.len(),
        });
    }
    let mut b = b0.clone();
    for (step, (&i, &o)) in inputs.iter().zip(outputs).enumerate() {
        b = filter_step(k, &b, i, o).map_err(|e| match e {
            Error::ImpossibleObservation { .. } => Error::ImpossibleObservation { step: step + 1 },
            other => other,
        })?;
    }
    Ok(b)
}

/// Brute-force posterior: build the joint over final state and all outputs
/// with [`run_joint`], then condition on the observed output tuple. The step
/// reported for an impossible tuple is the shortest prefix with zero
/// marginal probability.
pub fn posterior_oracle(
    k: &MealyMachine,
    b0: &Belief,
    inputs: &[usize],
    outputs: &[usize],
) -> Result<Belief> {
    let n = outputs.len();
    let joint = run_joint(k, b0, inputs, n)?;
    let no = k.outputs().len();
    let n_out = no.pow(n as u32);
    let code = outputs.iter().fold(0, |acc, &o| acc * no + o);
    let masses = (0..k.states().len()).map(|s| (s, joint.prob(s * n_out + code)));
    if let Some(post) = Dist::normalized(k.states().clone(), masses) {
        return Ok(post);
    }
    for len in 1..=n {
        let prefix = outputs[..len].iter().fold(0, |acc, &o| acc * no + o);
        let shift = no.pow((n - len) as u32);
        let mass: Rat = joint
            .support()
            .filter(|(idx, _)| (idx % n_out) / shift == prefix)
            .map(|(_, p)| p.clone())
            .sum();
        if mass.is_zero() {
            return Err(Error::ImpossibleObservation { step: len });
        }
    }
    unreachable!("full tuple has zero mass so some prefix does")
}

/// The belief machine `B(κ)` of a comb machine `κ`.
#[derive(Clone, Debug)]
pub struct BeliefMachine {
    model: CombMachine,
}

/// `B` on objects. Fails with `NotAComb` when `k` violates the comb
/// condition.
pub fn build_filter(k: &MealyMachine) -> Result<BeliefMachine> {
    Ok(BeliefMachine {
        model: check_comb(k)?,
    })
}

impl BeliefMachine {
    pub fn from_comb(model: CombMachine) -> BeliefMachine {
        BeliefMachine { model }
    }

    pub fn model(&self) -> &CombMachine {
        &self.model
    }

    pub fn hidden(&self) -> &Set {
        self.model.states()
    }

    /// Predicted output distribution `b ⨟ κ•`.
    pub fn readout(&self, b: &Belief) -> Result<Dist> {
        self.model.readout().pushforward(b)
    }

    pub fn update(&self, b: &Belief, i: usize, o: usize) -> Result<Belief> {
        filter_step(self.model.mealy(), b, i, o)
    }

    /// `Bκ(o, b'|i, b)`: one entry per output of positive predicted
    /// probability, paired with its posterior.
    pub fn transition(&self, b: &Belief, i: usize) -> Result<BTreeMap<(usize, Belief), Rat>> {
        let pred = self.readout(b)?;
        let mut out = BTreeMap::new();
        for (o, p) in pred.support() {
            let post = self.update(b, i, o)?;
            out.insert((o, post), p.clone());
        }
        Ok(out)
    }

    /// Beliefs reachable from `starts` under every input and every output of
    /// positive predicted probability, in discovery order. Fails with
    /// `Truncated` once more than `cap` distinct beliefs are found.
    pub fn reachable(&self, starts: &[Belief], cap: usize) -> Result<Vec<Belief>> {
        self.reachable_within(starts, cap, usize::MAX)
    }

    /// [`reachable`](Self::reachable), additionally failing with
    /// `DepthExceeded` when beliefs first seen after `max_depth` steps still
    /// lead to new beliefs.
    pub fn reachable_within(&self, starts: &[Belief], cap: usize, max_depth: usize) -> Result<Vec<Belief>> {
        let mut seen: HashMap<Belief, usize> = HashMap::new();
        let mut order = Vec::new();
        let mut queue = VecDeque::new();
        for b in starts {
            self.hidden().require_same(b.carrier(), "reachable start")?;
            if !seen.contains_key(b) {
                if order.len() == cap {
                    return Err(Error::Truncated { cap });
                }
                seen.insert(b.clone(), order.len());
                order.push(b.clone());
                queue.push_back((b.clone(), 0));
            }
        }
        while let Some((b, depth)) = queue.pop_front() {
            for i in 0..self.model.inputs().len() {
                for ((_, next), _) in self.transition(&b, i)? {
                    if !seen.contains_key(&next) {
                        if depth >= max_depth {
                            return Err(Error::DepthExceeded { depth: max_depth });
                        }
                        if order.len() == cap {
                            return Err(Error::Truncated { cap });
                        }
                        seen.insert(next.clone(), order.len());
                        order.push(next.clone());
                        queue.push_back((next, depth + 1));
                    }
                }
            }
        }
        Ok(order)
    }

    /// The finite unifilar sub-machine of `B(κ)` on the beliefs reachable
    /// from `starts`.
    pub fn materialize(&self, starts: &[Belief], cap: usize) -> Result<MaterializedFilter> {
        self.materialize_within(starts, cap, usize::MAX)
    }

    /// [`materialize`](Self::materialize) with the depth bound of
    /// [`reachable_within`](Self::reachable_within).
    pub fn materialize_within(&self, starts: &[Belief], cap: usize, max_depth: usize) -> Result<MaterializedFilter> {
        let beliefs = self.reachable_within(starts, cap, max_depth)?;
        let index: HashMap<&Belief, usize> =
            beliefs.iter().enumerate().map(|(k, b)| (b, k)).collect();
        let states = FinSet::new("B", (0..beliefs.len()).map(|k| format!("b{k}")))?;
        let inputs = self.model.inputs().clone();
        let outputs = self.model.outputs().clone();
        let target = FinSet::pair(&outputs, &states);
        let ns = states.len();
        let mealy = MealyMachine::from_fn(inputs, outputs, states, |i, s| {
            let entries = self
                .transition(&beliefs[s], i)?
                .into_iter()
                .map(|((o, post), p)| (o * ns + index[&post], p));
            Dist::new(target.clone(), entries)
        })?;
        let machine = UnifilarMachine::new(check_comb(&mealy)?)?;
        Ok(MaterializedFilter { machine, beliefs })
    }
}

/// Finite reachable part of `B(κ)` with the belief each state stands for.
#[derive(Clone, Debug)]
pub struct MaterializedFilter {
    pub machine: UnifilarMachine,
    pub beliefs: Vec<Belief>,
}

impl MaterializedFilter {
    /// The inclusion of reachable states into `PH`.
    pub fn inclusion(&self) -> BeliefAssignment {
        BeliefAssignment {
            source: self.machine.comb().states().clone(),
            hidden: self.beliefs[0].carrier().clone(),
            beliefs: self.beliefs.clone(),
        }
    }

    /// Interpretation map `S → H` reading each state as its belief.
    pub fn psi(&self) -> Kernel {
        transpose_down(&self.inclusion())
    }
}

/// `B` on morphisms: pushforward of beliefs along `f: S → T`.
#[derive(Clone, Debug)]
pub struct BeliefMap {
    kernel: Kernel,
}

pub fn b_on_morphism(f: &Kernel) -> BeliefMap {
    BeliefMap { kernel: f.clone() }
}

impl BeliefMap {
    pub fn apply(&self, b: &Belief) -> Result<Belief> {
        self.kernel.pushforward(b)
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &BeliefMap) -> Result<BeliefMap> {
        Ok(BeliefMap {
            kernel: self.kernel.compose(&next.kernel)?,
        })
    }
}

/// A deterministic map `S → PH`, stored as one belief per element of `S`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BeliefAssignment {
    source: Set,
    hidden: Set,
    beliefs: Vec<Belief>,
}

impl BeliefAssignment {
    pub fn new(source: Set, hidden: Set, beliefs: Vec<Belief>) -> Result<BeliefAssignment> {
        if beliefs.len() != source.len() {
            return Err(Error::RowCount {
                expected: source.len(),
                found: beliefs.len(),
            });
        }
        for b in &beliefs {
            hidden.require_same(b.carrier(), "belief assignment")?;
        }
        Ok(BeliefAssignment {
            source,
            hidden,
            beliefs,
        })
    }

    pub fn source(&self) -> &Set {
        &self.source
    }

    pub fn hidden(&self) -> &Set {
        &self.hidden
    }

    pub fn get(&self, s: usize) -> &Belief {
        &self.beliefs[s]
    }

    pub fn beliefs(&self) -> &[Belief] {
        &self.beliefs
    }
}

/// `f ↦ f□`: each state is sent to its row, read as a belief.
pub fn transpose_up(f: &Kernel) -> BeliefAssignment {
    BeliefAssignment {
        source: f.source().clone(),
        hidden: f.target().clone(),
        beliefs: f.rows().to_vec(),
    }
}

/// Inverse of [`transpose_up`]: compose with sampling.
pub fn transpose_down(g: &BeliefAssignment) -> Kernel {
    Kernel::new(g.source.clone(), g.hidden.clone(), g.beliefs.clone())
        .expect("assignment rows live on the hidden set")
}

/// Whether `g: S → PH` underlies a morphism of unifilar machines from
/// `(S, α)` into `B(κ)`: `α ⨟ (id_O ⊗ g) = (id_I ⊗ g) ⨟ Bκ`, where both
/// sides are distributions over `O × PH` compared exactly.
pub fn is_unifilar_morphism_into_filter(
    g: &BeliefAssignment,
    m: &MealyMachine,
    filter: &BeliefMachine,
) -> Result<bool> {
    m.states().require_same(&g.source, "assignment source")?;
    filter.hidden().require_same(&g.hidden, "assignment target")?;
    m.inputs().require_same(filter.model.inputs(), "inputs")?;
    m.outputs().require_same(filter.model.outputs(), "outputs")?;
    let ns = m.states().len();
    for i in 0..m.inputs().len() {
        for s in 0..ns {
            let mut lhs: BTreeMap<(usize, Belief), Rat> = BTreeMap::new();
            for (os, p) in m.row(i, s).support() {
                let key = (os / ns, g.beliefs[os % ns].clone());
                *lhs.entry(key).or_insert_with(Rat::zero) += p;
            }
            if lhs != filter.transition(&g.beliefs[s], i)? {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Which interpretation equation to check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wiring {
    /// Output first from the readout `ψ ⨟ κ•`, then the update.
    Comb,
    /// Input first; the predicted output is the output marginal of
    /// `ψ ⨟ κ` at that input.
    Mealy,
}

/// Check that `ψ: S → H` interprets the unifilar machine `m` as a filter for
/// `κ`.
///
/// Both wirings compare `(id_I⊗ψ) ⨟ κ` with the kernel that predicts the
/// output, updates the machine state with `m`'s update map and then applies
/// `ψ`, exactly as kernels `I×S → O×H`. The comb wiring additionally checks
/// `α• = ψ ⨟ κ•`. The update map only enters multiplied by the predicted
/// output probability, so its off-support values cannot affect the result.
pub fn check_interpretation(
    psi: &Kernel,
    m: &MealyMachine,
    k: &MealyMachine,
    wiring: Wiring,
) -> Result<bool> {
    m.states().require_same(psi.source(), "interpretation source")?;
    k.states().require_same(psi.target(), "interpretation target")?;
    m.inputs().require_same(k.inputs(), "interpretation inputs")?;
    m.outputs().require_same(k.outputs(), "interpretation outputs")?;
    let (ni, ns, nh) = (m.inputs().len(), m.states().len(), k.states().len());
    let comb_pred = match wiring {
        Wiring::Comb => {
            let m_comb = check_comb(m)?;
            let k_comb = check_comb(k)?;
            let pred = psi.compose(k_comb.readout())?;
            if m_comb.readout() != &pred {
                return Ok(false);
            }
            Some(pred)
        }
        Wiring::Mealy => None,
    };
    let update = m.update_map();
    let lhs = Kernel::identity(m.inputs()).tensor(psi).compose(k.transition())?;
    for i in 0..ni {
        for s in 0..ns {
            let lhs_row = lhs.row(i * ns + s);
            let pred = match &comb_pred {
                Some(p) => p.row(s).clone(),
                None => {
                    let mut map: BTreeMap<usize, Rat> = BTreeMap::new();
                    for (oh, p) in lhs_row.support() {
                        *map.entry(oh / nh).or_insert_with(Rat::zero) += p;
                    }
                    Dist::from_map_unchecked(m.outputs().clone(), map)
                }
            };
            let mut rhs: BTreeMap<usize, Rat> = BTreeMap::new();
            for (o, p) in pred.support() {
                let next = update.row((o * ni + i) * ns + s);
                let hidden = psi.pushforward(next)?;
                for (h, q) in hidden.support() {
                    *rhs.entry(o * nh + h).or_insert_with(Rat::zero) += &(p * q);
                }
            }
            if lhs_row.map() != &rhs {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// The generator `f°: Θ → Θ×X` of a statistical model `f: Θ → X`: a comb
/// machine with a single input whose parameter never changes.
pub fn generator(f: &Kernel) -> CombMachine {
    let theta = f.source().clone();
    let x = f.target().clone();
    let nt = theta.len();
    let target = FinSet::pair(&x, &theta);
    let mealy = MealyMachine::from_fn(FinSet::unit(), x, theta, |_, t| {
        Dist::new(
            target.clone(),
            f.row(t).support().map(|(xi, p)| (xi * nt + t, p.clone())),
        )
    })
    .expect("generator shape");
    check_comb(&mealy).expect("generators ignore their input")
}

/// Bayes' rule for a statistical model `f: Θ → X`.
#[derive(Clone, Debug)]
pub struct BayesRule {
    model: Kernel,
}

pub fn bayes_f(f: &Kernel) -> BayesRule {
    BayesRule { model: f.clone() }
}

impl BayesRule {
    /// `post(θ) ∝ prior(θ) f(x|θ)`.
    pub fn posterior(&self, prior: &Belief, x: usize) -> Result<Belief> {
        self.model.source().require_same(prior.carrier(), "bayes_f prior")?;
        let masses = prior.support().map(|(t, p)| (t, p * &self.model.prob(t, x)));
        Dist::normalized(prior.carrier().clone(), masses)
            .ok_or(Error::ImpossibleObservation { step: 1 })
    }

    pub fn fold(&self, prior: &Belief, data: &[usize]) -> Result<Belief> {
        let mut b = prior.clone();
        for (step, &x) in data.iter().enumerate() {
            b = self
                .posterior(&b, x)
                .map_err(|_| Error::ImpossibleObservation { step: step + 1 })?;
        }
        Ok(b)
    }
}

/// Inference about an unknown distribution on `X` from one sample:
/// each component `d` is reweighted by `d(x)`.
pub fn bayes_x(prior: &Mixture, x: usize) -> Result<Mixture> {
    if x >= prior.carrier().len() {
        return Err(Error::UnknownElement {
            set: prior.carrier().name().to_string(),
            element: format!("#{x}"),
        });
    }
    let weighted: Vec<(Dist, Rat)> = prior
        .components()
        .map(|(d, w)| (d.clone(), w * &d.prob(x)))
        .filter(|(_, w)| !w.is_zero())
        .collect();
    let total: Rat = weighted.iter().map(|(_, w)| w).sum();
    let inv = total
        .recip()
        .ok_or(Error::ImpossibleObservation { step: 1 })?;
    Ok(Mixture::from_map_unchecked(
        prior.carrier().clone(),
        weighted.into_iter().map(|(d, w)| (d, w * &inv)).collect(),
    ))
}

/// Conjugacy of `ψ: S → Θ` for `f: Θ → X` with hyperparameter update
/// `u: X×S → S`, checked at every `s`:
/// `ψ(θ|s) f(x|θ) = (ψ⨟f)(x|s) Σ_{s'} u(s'|x,s) ψ(θ|s')`.
pub fn conjugate_check(psi: &Kernel, f: &Kernel, u: &Kernel) -> Result<bool> {
    conjugate_check_on(psi, f, u, 0..psi.source().len())
}

/// [`conjugate_check`] restricted to the given hyperparameter states.
pub fn conjugate_check_on<I>(psi: &Kernel, f: &Kernel, u: &Kernel, states: I) -> Result<bool>
where
    I: IntoIterator<Item = usize>,
{
    let s = psi.source();
    let x = f.target();
    psi.target().require_same(f.source(), "conjugate model")?;
    FinSet::pair(x, s).require_same(u.source(), "conjugate update source")?;
    s.require_same(u.target(), "conjugate update target")?;
    let predictive = psi.compose(f)?;
    let (ns, nx) = (s.len(), x.len());
    for si in states {
        let mut lhs: BTreeMap<(usize, usize), Rat> = BTreeMap::new();
        for (t, p) in psi.row(si).support() {
            for (xi, q) in f.row(t).support() {
                lhs.insert((t, xi), p * q);
            }
        }
        let mut rhs: BTreeMap<(usize, usize), Rat> = BTreeMap::new();
        for (xi, p) in predictive.row(si).support() {
            let hidden = psi.pushforward(u.row(xi * ns + si))?;
            for (t, q) in hidden.support() {
                *rhs.entry((t, xi)).or_insert_with(Rat::zero) += &(p * q);
            }
        }
        debug_assert!(lhs.keys().all(|&(_, xi)| xi < nx));
        if lhs != rhs {
            return Ok(false);
        }
    }
    Ok(true)
}

/// A finite conjugate family for `f: Θ → X` indexed by count vectors.
///
/// States are count vectors `c` with `|c| ≤ n + 1`, `ψ(θ|c) ∝ prior(θ) Π_x
/// f(x|θ)^{c_x}`, and the update adds one to the observed count. Counts of
/// total `n + 1` saturate, so the conjugacy equation holds exactly on
/// [`CountingFamily::interior`], the states with `|c| ≤ n`.
#[derive(Clone, Debug)]
pub struct CountingFamily {
    pub psi: Kernel,
    pub model: Kernel,
    pub update: Kernel,
    pub interior: Vec<usize>,
}

impl CountingFamily {
    pub fn check(&self) -> Result<bool> {
        conjugate_check_on(&self.psi, &self.model, &self.update, self.interior.iter().copied())
    }
}

/// Requires `f` to have full support so every count vector is possible.
pub fn counting_family(prior: &Belief, f: &Kernel, n: usize) -> Result<CountingFamily> {
    f.source().require_same(prior.carrier(), "counting family prior")?;
    let nx = f.target().len();
    for t in 0..f.source().len() {
        if f.row(t).support_len() != nx {
            return Err(Error::NotNormalized {
                set: f.source().label(t).to_string(),
                sum: "row without full support".into(),
            });
        }
    }
    fn vectors(nx: usize, total: usize) -> Vec<Vec<usize>> {
        if nx == 1 {
            return vec![vec![total]];
        }
        (0..=total)
            .rev()
            .flat_map(|first| {
                vectors(nx - 1, total - first).into_iter().map(move |mut rest| {
                    rest.insert(0, first);
                    rest
                })
            })
            .collect()
    }
    let counts: Vec<Vec<usize>> = (0..=n + 1).flat_map(|t| vectors(nx, t)).collect();
    let labels = counts.iter().map(|c| {
        let parts: Vec<String> = c.iter().map(|k| k.to_string()).collect();
        format!("({})", parts.join(","))
    });
    let states = FinSet::new("C", labels)?;
    let index: HashMap<&Vec<usize>, usize> = counts.iter().enumerate().map(|(k, c)| (c, k)).collect();
    let psi = Kernel::from_fn(states.clone(), f.source().clone(), |k| {
        let masses = prior.support().map(|(t, p)| {
            let mut w = p.clone();
            for (x, &c) in counts[k].iter().enumerate() {
                for _ in 0..c {
                    w *= &f.prob(t, x);
                }
            }
            (t, w)
        });
        Ok(Dist::normalized(f.source().clone(), masses).expect("full support keeps mass"))
    })?;
    let ns = states.len();
    let update = Kernel::deterministic(FinSet::pair(f.target(), &states), states.clone(), |xs| {
        let (x, k) = (xs / ns, xs % ns);
        let c = &counts[k];
        if c.iter().sum::<usize>() > n {
            return k;
        }
        let mut next = c.clone();
        next[x] += 1;
        index[&next]
    });
    let interior = (0..ns).filter(|&k| counts[k].iter().sum::<usize>() <= n).collect();
    Ok(CountingFamily {
        psi,
        model: f.clone(),
        update,
        interior,
    })
}

/// The universal conjugate family: beliefs reachable from `prior` under
/// [`bayes_f`], read through the inclusion, with Bayes' rule as update.
/// Evidence with zero predictive probability leaves the belief unchanged;
/// such entries carry no weight in the conjugacy equation.
pub fn reachable_conjugate(prior: &Belief, f: &Kernel, cap: usize) -> Result<(Kernel, Kernel)> {
    let gen = generator(f);
    let filter = BeliefMachine::from_comb(gen);
    let beliefs = filter.reachable(std::slice::from_ref(prior), cap)?;
    let index: HashMap<&Belief, usize> = beliefs.iter().enumerate().map(|(k, b)| (b, k)).collect();
    let states = FinSet::new("B", (0..beliefs.len()).map(|k| format!("b{k}")))?;
    let psi = transpose_down(&BeliefAssignment::new(
        states.clone(),
        f.source().clone(),
        beliefs.clone(),
    )?);
    let rule = bayes_f(f);
    let ns = states.len();
    let update = Kernel::deterministic(FinSet::pair(f.target(), &states), states, |xs| {
        let (x, k) = (xs / ns, xs % ns);
        match rule.posterior(&beliefs[k], x) {
            Ok(post) => index[&post],
            Err(_) => k,
        }
    });
    Ok((psi, update))
}

/// Two steps of a generator, as a joint over `(s', o₁, o₂)`, are invariant
/// under swapping the two outputs.
pub fn exchangeability_check(k: &MealyMachine) -> Result<bool> {
    if k.inputs().len() != 1 {
        return Err(Error::NotAGenerator(k.inputs().len()));
    }
    let (ns, no) = (k.states().len(), k.outputs().len());
    for s in 0..ns {
        let mut joint: BTreeMap<(usize, usize, usize), Rat> = BTreeMap::new();
        for (os1, p) in k.row(0, s).support() {
            let (o1, s1) = (os1 / ns, os1 % ns);
            for (os2, q) in k.row(0, s1).support() {
                let key = (os2 % ns, o1, os2 / ns);
                *joint.entry(key).or_insert_with(Rat::zero) += &(p * q);
            }
        }
        for (&(t, o1, o2), p) in &joint {
            debug_assert!(o1 < no && o2 < no);
            let swapped = joint.get(&(t, o2, o1)).cloned().unwrap_or_else(Rat::zero);
            if &swapped != p {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// The belief MDP of a comb machine: outputs summed out of `B(κ)`.
#[derive(Clone, Debug)]
pub struct BeliefMdp {
    filter: BeliefMachine,
}

pub fn belief_mdp(k: &MealyMachine) -> Result<BeliefMdp> {
    Ok(BeliefMdp {
        filter: build_filter(k)?,
    })
}

impl BeliefMdp {
    /// Distribution over next beliefs: with probability `(b⨟κ•)(o)` move to
    /// the posterior after `(i, o)`.
    pub fn step(&self, b: &Belief, i: usize) -> Result<BTreeMap<Belief, Rat>> {
        let mut out: BTreeMap<Belief, Rat> = BTreeMap::new();
        for ((_, post), p) in self.filter.transition(b, i)? {
            *out.entry(post).or_insert_with(Rat::zero) += &p;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rat::r;

    /// Hidden state persists; κ•(0|a) = 3/4, κ•(0|b) = 1/4.
    pub(crate) fn persist() -> MealyMachine {
        let h = FinSet::new("H", ["a", "b"]).unwrap();
        let o = FinSet::new("O", ["0", "1"]).unwrap();
        let readout =
            Kernel::from_dense(h.clone(), o, vec![vec![r(3, 4), r(1, 4)], vec![r(1, 4), r(3, 4)]]).unwrap();
        UnifilarMachine::from_readout(FinSet::unit(), &readout, |_, _, s| s)
            .unwrap()
            .mealy()
            .clone()
    }

    fn uniform(k: &MealyMachine) -> Belief {
        Dist::uniform(k.states().clone())
    }

    #[test]
    fn predicted_output_is_mixture_of_rows() {
        let k = persist();
        let f = build_filter(&k).unwrap();
        assert_eq!(f.readout(&uniform(&k)).unwrap().to_dense(), vec![r(1, 2), r(1, 2)]);
        for h in 0..2 {
            let point = Dist::point(k.states().clone(), h);
            assert_eq!(&f.readout(&point).unwrap(), f.model().readout().row(h));
        }
    }

    #[test]
    fn singleton_hidden_set() {
        let h = FinSet::unit();
        let o = FinSet::range("O", 3);
        let readout = Kernel::from_dense(h, o, vec![vec![r(1, 2), r(1, 3), r(1, 6)]]).unwrap();
        let k = UnifilarMachine::from_readout(FinSet::unit(), &readout, |_, _, _| 0).unwrap();
        let f = build_filter(k.mealy()).unwrap();
        let b = Dist::point(k.comb().states().clone(), 0);
        assert_eq!(&f.readout(&b).unwrap(), readout.row(0));
        assert_eq!(f.update(&b, 0, 2).unwrap(), b);
    }

    #[test]
    fn step_on_persist_machine() {
        let k = persist();
        let post = filter_step(&k, &uniform(&k), 0, 0).unwrap();
        assert_eq!(post.to_dense(), vec![r(3, 4), r(1, 4)]);
    }

    #[test]
    fn step_deterministic_and_impossible() {
        let h = FinSet::new("H", ["a", "b"]).unwrap();
        let o = FinSet::new("O", ["x", "y"]).unwrap();
        let readout = Kernel::deterministic(h.clone(), o, |s| s);
        let k = UnifilarMachine::from_readout(FinSet::unit(), &readout, |_, _, s| 1 - s).unwrap();
        let b = Dist::point(h.clone(), 0);
        assert_eq!(filter_step(k.mealy(), &b, 0, 0).unwrap(), Dist::point(h, 1));
        assert_eq!(
            filter_step(k.mealy(), &b, 0, 1),
            Err(Error::ImpossibleObservation { step: 1 })
        );
    }

    #[test]
    fn sequence_matches_hand_posterior() {
        let k = persist();
        let b0 = uniform(&k);
        assert_eq!(filter_sequence(&k, &b0, &[], &[]).unwrap(), b0);
        let post = filter_sequence(&k, &b0, &[0, 0], &[0, 0]).unwrap();
        assert_eq!(post.to_dense(), vec![r(9, 10), r(1, 10)]);
        assert_eq!(posterior_oracle(&k, &b0, &[0, 0], &[0, 0]).unwrap(), post);
    }

    #[test]
    fn impossible_sequences_agree_on_step() {
        let h = FinSet::new("H", ["a", "b"]).unwrap();
        let o = FinSet::new("O", ["x", "y"]).unwrap();
        let readout = Kernel::deterministic(h.clone(), o, |s| s);
        let k = UnifilarMachine::from_readout(FinSet::unit(), &readout, |_, _, s| 1 - s).unwrap();
        let b = Dist::point(h, 0);
        let outs = [0, 1, 1];
        let e1 = filter_sequence(k.mealy(), &b, &[0, 0, 0], &outs).unwrap_err();
        let e2 = posterior_oracle(k.mealy(), &b, &[0, 0, 0], &outs).unwrap_err();
        assert_eq!(e1, Error::ImpossibleObservation { step: 3 });
        assert_eq!(e1, e2);
    }

    #[test]
    fn b_respects_identity_and_relabeling() {
        let s = FinSet::new("S", ["p", "q"]).unwrap();
        let b = Dist::from_dense(s.clone(), vec![r(1, 3), r(2, 3)]).unwrap();
        assert_eq!(b_on_morphism(&Kernel::identity(&s)).apply(&b).unwrap(), b);
        let t = FinSet::new("T", ["u", "v"]).unwrap();
        let flip = Kernel::deterministic(s, t.clone(), |i| 1 - i);
        assert_eq!(
            b_on_morphism(&flip).apply(&b).unwrap().to_dense(),
            vec![r(2, 3), r(1, 3)]
        );
        let mix = Kernel::from_dense(
            b.carrier().clone(),
            t,
            vec![vec![r(1, 2), r(1, 2)], vec![r(1, 4), r(3, 4)]],
        )
        .unwrap();
        // 1/3·(1/2,1/2) + 2/3·(1/4,3/4) = (1/3, 2/3)
        assert_eq!(
            b_on_morphism(&mix).apply(&b).unwrap().to_dense(),
            vec![r(1, 3), r(2, 3)]
        );
    }

    #[test]
    fn transposes_round_trip() {
        let s = FinSet::new("S", ["p", "q"]).unwrap();
        let h = FinSet::new("H", ["a", "b"]).unwrap();
        let f = Kernel::from_dense(s.clone(), h.clone(), vec![vec![r(1, 2), r(1, 2)], vec![Rat::one(), Rat::zero()]])
            .unwrap();
        let up = transpose_up(&f);
        assert_eq!(up.get(0).to_dense(), vec![r(1, 2), r(1, 2)]);
        assert_eq!(up.get(1), &Dist::point(h.clone(), 0));
        assert_eq!(transpose_down(&up), f);
        let det = Kernel::deterministic(s, h, |i| i);
        assert!(transpose_up(&det).beliefs().iter().all(|b| b.as_point().is_some()));
    }

    #[test]
    fn interpretation_identity_on_unifilar() {
        let k = persist();
        let psi = Kernel::identity(k.states());
        assert!(check_interpretation(&psi, &k, &k, Wiring::Comb).unwrap());
        assert!(check_interpretation(&psi, &k, &k, Wiring::Mealy).unwrap());
    }

    #[test]
    fn interpretation_fails_on_marginal_mismatch() {
        let k = persist();
        let flip = Kernel::deterministic(k.states().clone(), k.states().clone(), |s| 1 - s);
        assert!(!check_interpretation(&flip, &k, &k, Wiring::Comb).unwrap());
    }

    #[test]
    fn bayes_f_two_coins() {
        let theta = FinSet::new("Θ", ["t1", "t2"]).unwrap();
        let x = FinSet::new("X", ["heads", "tails"]).unwrap();
        let f = Kernel::from_dense(theta.clone(), x, vec![vec![r(3, 4), r(1, 4)], vec![r(1, 4), r(3, 4)]]).unwrap();
        let bayes = bayes_f(&f);
        let prior = Dist::uniform(theta.clone());
        let post = bayes.posterior(&prior, 0).unwrap();
        assert_eq!(post.to_dense(), vec![r(3, 4), r(1, 4)]);
        let gen = generator(&f);
        assert_eq!(filter_step(gen.mealy(), &prior, 0, 0).unwrap(), post);
        let dogmatic = Dist::point(theta, 1);
        assert_eq!(bayes.posterior(&dogmatic, 0).unwrap(), dogmatic);
    }

    #[test]
    fn bayes_f_impossible_evidence() {
        let theta = FinSet::new("Θ", ["t1", "t2"]).unwrap();
        let x = FinSet::new("X", ["a", "b"]).unwrap();
        let f = Kernel::from_dense(theta.clone(), x, vec![vec![Rat::one(), Rat::zero()], vec![r(1, 2), r(1, 2)]]).unwrap();
        assert_eq!(
            bayes_f(&f).posterior(&Dist::point(theta, 0), 1),
            Err(Error::ImpossibleObservation { step: 1 })
        );
    }

    #[test]
    fn bayes_x_cases() {
        let x = FinSet::new("X", ["a", "b"]).unwrap();
        let certain = Dist::point(x.clone(), 0);
        let fair = Dist::uniform(x.clone());
        let single = Mixture::point(fair.clone());
        assert_eq!(bayes_x(&single, 1).unwrap(), single);

        let prior = Mixture::new(x.clone(), [(certain.clone(), r(1, 2)), (fair.clone(), r(1, 2))]).unwrap();
        assert_eq!(bayes_x(&prior, 1).unwrap(), Mixture::point(fair));

        let biased_a = Dist::from_dense(x.clone(), vec![r(3, 4), r(1, 4)]).unwrap();
        let biased_b = Dist::from_dense(x.clone(), vec![r(1, 4), r(3, 4)]).unwrap();
        let sym = Mixture::new(x, [(biased_a.clone(), r(1, 2)), (biased_b.clone(), r(1, 2))]).unwrap();
        let after = bayes_x(&bayes_x(&sym, 0).unwrap(), 1).unwrap();
        assert_eq!(after.weight_of(&biased_a), after.weight_of(&biased_b));
        assert!(matches!(
            bayes_x(&Mixture::point(certain), 1),
            Err(Error::ImpossibleObservation { .. })
        ));
    }

    #[test]
    fn exchangeability_cases() {
        let theta = FinSet::new("Θ", ["t1", "t2"]).unwrap();
        let x = FinSet::new("X", ["a", "b", "c"]).unwrap();
        let f = Kernel::from_dense(
            theta,
            x.clone(),
            vec![vec![r(1, 2), r(1, 3), r(1, 6)], vec![r(1, 5), Rat::zero(), r(4, 5)]],
        )
        .unwrap();
        assert!(exchangeability_check(generator(&f).mealy()).unwrap());

        let h = FinSet::new("H", ["even", "odd"]).unwrap();
        let o = FinSet::new("O", ["0", "1"]).unwrap();
        let alt = UnifilarMachine::from_readout(FinSet::unit(), &Kernel::deterministic(h, o, |s| s), |_, _, s| 1 - s)
            .unwrap();
        assert!(!exchangeability_check(alt.mealy()).unwrap());

        let iid = Kernel::state(&Dist::uniform(x));
        let single = UnifilarMachine::from_readout(FinSet::unit(), &iid, |_, _, _| 0).unwrap();
        assert!(exchangeability_check(single.mealy()).unwrap());

        let two_inputs = FinSet::range("I", 2);
        let h = FinSet::unit();
        let o = FinSet::range("O", 2);
        let m = UnifilarMachine::from_readout(two_inputs, &Kernel::deterministic(h, o, |_| 0), |_, _, _| 0).unwrap();
        assert_eq!(exchangeability_check(m.mealy()), Err(Error::NotAGenerator(2)));
    }

    #[test]
    fn belief_mdp_on_persist_machine() {
        let k = persist();
        let mdp = belief_mdp(&k).unwrap();
        let branches = mdp.step(&uniform(&k), 0).unwrap();
        let a = Dist::from_dense(k.states().clone(), vec![r(3, 4), r(1, 4)]).unwrap();
        let b = Dist::from_dense(k.states().clone(), vec![r(1, 4), r(3, 4)]).unwrap();
        assert_eq!(branches.len(), 2);
        assert_eq!(branches[&a], r(1, 2));
        assert_eq!(branches[&b], r(1, 2));
    }

    #[test]
    fn belief_mdp_deterministic_emission() {
        let h = FinSet::new("H", ["a", "b"]).unwrap();
        let o = FinSet::new("O", ["x", "y"]).unwrap();
        let k = UnifilarMachine::from_readout(FinSet::unit(), &Kernel::deterministic(h.clone(), o, |s| s), |_, _, s| 1 - s)
            .unwrap();
        let mdp = belief_mdp(k.mealy()).unwrap();
        let step = mdp.step(&Dist::point(h.clone(), 0), 0).unwrap();
        assert_eq!(step.len(), 1);
        assert_eq!(step[&Dist::point(h, 1)], Rat::one());
    }

    #[test]
    fn reachable_truncates() {
        let k = persist();
        let f = build_filter(&k).unwrap();
        assert_eq!(
            f.reachable(&[uniform(&k)], 50).unwrap_err(),
            Error::Truncated { cap: 50 }
        );
        assert_eq!(
            f.reachable_within(&[uniform(&k)], 50, 3).unwrap_err(),
            Error::DepthExceeded { depth: 3 }
        );
        // point beliefs are fixed by a persisting state
        let corners = [Dist::point(k.states().clone(), 0), Dist::point(k.states().clone(), 1)];
        assert_eq!(f.reachable_within(&corners, 50, 0).unwrap().len(), 2);
    }

    fn coins() -> Kernel {
        let theta = FinSet::new("Θ", ["t1", "t2"]).unwrap();
        let x = FinSet::new("X", ["heads", "tails"]).unwrap();
        Kernel::from_dense(theta, x, vec![vec![r(3, 4), r(1, 4)], vec![r(1, 4), r(3, 4)]]).unwrap()
    }

    #[test]
    fn counting_family_is_conjugate() {
        let f = coins();
        let prior = Dist::uniform(f.source().clone());
        for n in 0..=4 {
            let fam = counting_family(&prior, &f, n).unwrap();
            assert!(fam.check().unwrap(), "n = {n}");
        }
        let fam = counting_family(&prior, &f, 2).unwrap();
        // ψ(t1 | 2 heads, 0 tails) = 9/10
        let c = fam.psi.source().index_of("(2,0)").unwrap();
        assert_eq!(fam.psi.row(c).to_dense(), vec![r(9, 10), r(1, 10)]);
    }

    #[test]
    fn identity_update_is_not_conjugate() {
        let f = coins();
        let prior = Dist::uniform(f.source().clone());
        let fam = counting_family(&prior, &f, 2).unwrap();
        let ns = fam.psi.source().len();
        let stuck = Kernel::deterministic(fam.update.source().clone(), fam.psi.source().clone(), |xs| xs % ns);
        assert!(!conjugate_check_on(&fam.psi, &f, &stuck, fam.interior.iter().copied()).unwrap());
    }

    #[test]
    fn reachable_beliefs_are_conjugate() {
        // each parameter is uniform on two of three symbols
        let theta = FinSet::new("Θ", ["ab", "bc", "ca"]).unwrap();
        let x = FinSet::new("X", ["a", "b", "c"]).unwrap();
        let h = r(1, 2);
        let z = Rat::zero();
        let f = Kernel::from_dense(
            theta.clone(),
            x,
            vec![vec![h.clone(), h.clone(), z.clone()], vec![z.clone(), h.clone(), h.clone()], vec![h.clone(), z, h]],
        )
        .unwrap();
        let prior = Dist::from_dense(theta, vec![r(1, 2), r(1, 3), r(1, 6)]).unwrap();
        let (psi, update) = reachable_conjugate(&prior, &f, 100).unwrap();
        assert_eq!(psi.source().len(), 7);
        assert!(conjugate_check(&psi, &f, &update).unwrap());
    }
}

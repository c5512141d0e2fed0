//! Seeded generators of random rational kernels, machines and linear-Gaussian
//! systems, for property tests and the randomised CLI commands.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dist::{Dist, FinSet, Kernel, Set};
use crate::gauss::{GaussMorphism, KalmanState};
use crate::machines::{CombMachine, MealyMachine, UnifilarMachine};
use crate::rat::Rat;

/// Integer weights in `0..=max_weight`, so exact zeros occur; at least one
/// entry is positive.
pub fn dist<R: Rng>(rng: &mut R, carrier: &Set, max_weight: u32) -> Dist {
    let n = carrier.len();
    loop {
        let w: Vec<i64> = (0..n).map(|_| rng.random_range(0..=max_weight) as i64).collect();
        let total: i64 = w.iter().sum();
        if total > 0 {
            return Dist::new(
                carrier.clone(),
                w.into_iter().enumerate().map(|(i, x)| (i, Rat::new(x, total))),
            )
            .expect("normalised by construction");
        }
    }
}

/// Like [`dist`] but with every entry positive.
pub fn full_dist<R: Rng>(rng: &mut R, carrier: &Set, max_weight: u32) -> Dist {
    let n = carrier.len();
    let w: Vec<i64> = (0..n).map(|_| rng.random_range(1..=max_weight.max(1)) as i64).collect();
    let total: i64 = w.iter().sum();
    Dist::new(
        carrier.clone(),
        w.into_iter().enumerate().map(|(i, x)| (i, Rat::new(x, total))),
    )
    .expect("normalised by construction")
}

pub fn kernel<R: Rng>(rng: &mut R, source: &Set, target: &Set, max_weight: u32) -> Kernel {
    let rows = (0..source.len()).map(|_| dist(rng, target, max_weight)).collect();
    Kernel::new(source.clone(), target.clone(), rows).expect("rows on target")
}

pub fn function<R: Rng>(rng: &mut R, source: &Set, target: &Set) -> Kernel {
    let images: Vec<usize> = (0..source.len()).map(|_| rng.random_range(0..target.len())).collect();
    Kernel::deterministic(source.clone(), target.clone(), |a| images[a])
}

/// Labelled sets `I`, `O`, `S` of the given sizes.
pub fn sets(ni: usize, no: usize, ns: usize) -> (Set, Set, Set) {
    let named = |name: &str, prefix: &str, n: usize| {
        FinSet::new(name, (0..n).map(|k| format!("{prefix}{k}"))).expect("distinct labels")
    };
    (named("I", "i", ni), named("O", "o", no), named("S", "s", ns))
}

/// A comb machine with random readout and random update, both with zeros.
pub fn comb<R: Rng>(rng: &mut R, ni: usize, no: usize, ns: usize, max_weight: u32) -> CombMachine {
    let (i, o, s) = sets(ni, no, ns);
    let readout = kernel(rng, &s, &o, max_weight);
    let update = kernel(rng, &FinSet::product(&[o, i.clone(), s.clone()]), &s, max_weight);
    CombMachine::from_parts(i, &readout, &update).expect("comb by construction")
}

pub fn unifilar<R: Rng>(rng: &mut R, ni: usize, no: usize, ns: usize, max_weight: u32) -> UnifilarMachine {
    let (i, o, s) = sets(ni, no, ns);
    let readout = kernel(rng, &s, &o, max_weight);
    let next: Vec<usize> = (0..no * ni * ns).map(|_| rng.random_range(0..ns)).collect();
    UnifilarMachine::from_readout(i, &readout, |oo, ii, ss| next[(oo * ni + ii) * ns + ss])
        .expect("unifilar by construction")
}

/// An arbitrary Mealy machine; typically not a comb.
pub fn mealy<R: Rng>(rng: &mut R, ni: usize, no: usize, ns: usize, max_weight: u32) -> MealyMachine {
    let (i, o, s) = sets(ni, no, ns);
    let target = FinSet::pair(&o, &s);
    let t = kernel(rng, &FinSet::pair(&i, &s), &target, max_weight);
    MealyMachine::new(i, o, s, t).expect("shapes by construction")
}

fn uniform_matrix<R: Rng>(rng: &mut R, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// `L Lᵀ` for a random `dim × rank` factor.
pub fn psd<R: Rng>(rng: &mut R, dim: usize, rank: usize) -> DMatrix<f64> {
    let l = uniform_matrix(rng, dim, rank);
    let m = &l * l.transpose();
    (&m + m.transpose()) * 0.5
}

/// A random system `h ↦ N(A h + c, Σ)` with `n` hidden and `m` output
/// coordinates and a random prior. With `singular_output` the predicted
/// output covariance is rank deficient: for `m ≥ 2` the last output
/// duplicates the first, for `m = 1` the output is identically zero.
pub fn gauss_system<R: Rng>(
    rng: &mut R,
    n: usize,
    m: usize,
    singular_output: bool,
) -> (GaussMorphism, KalmanState) {
    let d = n + m;
    let mut a = uniform_matrix(rng, d, n);
    let mut c = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
    let rank = rng.random_range(1..=d);
    let mut factor = uniform_matrix(rng, d, rank);
    if singular_output {
        if m >= 2 {
            let first = n;
            let last = d - 1;
            let row = a.row(first).into_owned();
            a.set_row(last, &row);
            c[last] = c[first];
            let frow = factor.row(first).into_owned();
            factor.set_row(last, &frow);
        } else {
            a.row_mut(n).fill(0.0);
            c[n] = 0.0;
            factor.row_mut(n).fill(0.0);
        }
    }
    let noise = &factor * factor.transpose();
    let k = GaussMorphism::new(a, c, (&noise + noise.transpose()) * 0.5).expect("psd by construction");
    let prior_rank = rng.random_range(0..=n);
    let state = KalmanState::new(
        DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0)),
        psd(rng, n, prior_rank),
    )
    .expect("psd by construction");
    (k, state)
}

/// A unifilar machine `(S, α)`, a comb machine `(H, κ)` and a kernel
/// `f: S → H`.
#[derive(Clone, Debug)]
pub struct AdjunctionInstance {
    pub machine: UnifilarMachine,
    pub model: MealyMachine,
    pub map: Kernel,
}

/// An instance where `f` is a morphism: each state is spread over its own
/// block of hidden states, and `κ` runs `α` on the block's state before
/// spreading the next state the same way. Needs `nh ≥ ns`.
pub fn split_instance<R: Rng>(
    rng: &mut R,
    ni: usize,
    no: usize,
    ns: usize,
    nh: usize,
    max_weight: u32,
) -> AdjunctionInstance {
    assert!(nh >= ns, "every state needs a hidden state");
    let machine = unifilar(rng, ni, no, ns, max_weight);
    let s = machine.comb().states().clone();
    let h = FinSet::new("H", (0..nh).map(|k| format!("h{k}"))).expect("distinct labels");
    let owner: Vec<usize> = (0..nh)
        .map(|k| if k < ns { k } else { rng.random_range(0..ns) })
        .collect();
    let rows = (0..ns)
        .map(|st| {
            let block: Vec<usize> = (0..nh).filter(|&k| owner[k] == st).collect();
            let w: Vec<i64> = block.iter().map(|_| rng.random_range(1..=max_weight.max(1)) as i64).collect();
            let total: i64 = w.iter().sum();
            Dist::new(
                h.clone(),
                block.iter().zip(&w).map(|(&k, &x)| (k, Rat::new(x, total))),
            )
            .expect("normalised by construction")
        })
        .collect();
    let map = Kernel::new(s.clone(), h.clone(), rows).expect("rows on H");
    let retract = Kernel::deterministic(h.clone(), s, |k| owner[k]);
    let mealy = machine.mealy();
    let t = Kernel::identity(mealy.inputs())
        .tensor(&retract)
        .compose(mealy.transition())
        .and_then(|k| k.compose(&Kernel::identity(mealy.outputs()).tensor(&map)))
        .expect("composable by construction");
    let model = MealyMachine::new(mealy.inputs().clone(), mealy.outputs().clone(), h, t)
        .expect("shapes by construction");
    AdjunctionInstance {
        machine,
        model,
        map,
    }
}

/// Random `(S, α)`, comb `(H, κ)` and `f: S → H` with no relation between
/// them; such `f` is rarely a morphism.
pub fn unrelated_instance<R: Rng>(
    rng: &mut R,
    ni: usize,
    no: usize,
    ns: usize,
    nh: usize,
    max_weight: u32,
) -> AdjunctionInstance {
    let machine = unifilar(rng, ni, no, ns, max_weight);
    let model = comb(rng, ni, no, nh, max_weight).mealy().clone();
    let hs = model.states().clone();
    let map = if rng.random_bool(0.5) {
        function(rng, machine.comb().states(), &hs)
    } else {
        kernel(rng, machine.comb().states(), &hs, max_weight)
    };
    AdjunctionInstance {
        machine,
        model,
        map,
    }
}

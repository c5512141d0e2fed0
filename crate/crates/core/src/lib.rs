//! Exact filtering for finite stochastic machines, with a Gaussian
//! counterpart.
//!
//! * [`dist`]: exact finite kernels, conditionals and representability.
//! * [`machines`]: Mealy, comb and unifilar machines and their morphisms.
//! * [`filtering`]: the belief machine, Bayesian filtering and inference.
//! * [`transducer`]: controlled stochastic processes and unrolling.
//! * [`gauss`]: linear-Gaussian kernels and the Kalman filter.

pub mod dist;
pub mod error;
pub mod filtering;
pub mod gauss;
pub mod machines;
pub mod random;
pub mod rat;
pub mod transducer;

pub use dist::{Diamond, Dist, FinSet, Kernel, Mixture, Set, Side};
pub use error::{Error, Result};
pub use filtering::{
    b_on_morphism, bayes_f, bayes_x, belief_mdp, build_filter, check_interpretation,
    conjugate_check, conjugate_check_on, exchangeability_check, filter_sequence, filter_step,
    generator, is_unifilar_morphism_into_filter, posterior_oracle, transpose_down, transpose_up,
    Belief, BeliefAssignment, BeliefMachine, Wiring,
};
pub use machines::{check_comb, CombMachine, MealyMachine, UnifilarMachine};
pub use rat::{r, Rat};
pub use transducer::{
    behaviour_equal, check_causality, process_update, unroll, CausalityWitness, ControlledProcess,
};

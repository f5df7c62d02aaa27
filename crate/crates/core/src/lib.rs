//! Antidistillation tooling for reasoning traces.
//!
//! The crate is organised around five pieces:
//!
//! * [`trace`]: reasoning-trace corpora, sentence segmentation and token
//!   accounting.
//! * [`poison`]: branching-sentence removal (TraceGuard) and the
//!   random-removal baseline.
//! * [`logit_sim`]: a toy categorical teacher whose logits are perturbed with
//!   sparse Gaussian noise under an `(eta, k)` detectability budget.
//! * [`detect`]: KL-divergence detectability bounds for that perturbation and
//!   the identities behind them.
//! * [`game`]: exhaustive solvers for finite antidistillation Stackelberg
//!   games.
//!
//! [`report`] aggregates poisoning reports into budget tables and [`synth`]
//! generates seeded synthetic corpora with known ground truth.

pub mod detect;
pub mod game;
pub mod logit_sim;
pub mod poison;
pub mod report;
pub mod seed;
pub mod synth;
pub mod trace;

pub use detect::{KlEstimate, NoiseConvention};
pub use game::{Equilibrium, GameInstance};
pub use logit_sim::{ConstraintParams, LogitTable, PerturbationOutcome};
pub use poison::{BranchingSet, PoisonMethod, PoisonReport};
pub use trace::{ReasoningTrace, Sentence};

//! User pairing and BS association for multi-cell NOMA networks, with a
//! pointer-network policy trained by REINFORCE and the classical baselines it
//! is measured against.

pub mod assignment;
pub mod baselines;
pub mod error;
pub mod harness;
pub mod netsim;
pub mod ptrnet;
pub mod rates;
pub mod reinforce;
pub mod solver;
pub mod tensorcore;

pub use assignment::{score_permutation, Assignment, SlotReport};
pub use baselines::{exhaustive_noma, optimal_oma, random_heuristic, Solution, DEFAULT_EXHAUSTIVE_BUDGET};
pub use error::{Error, Result};
pub use netsim::{sample_instance, CsiMatrix, NetworkConfig, NetworkInstance};
pub use ptrnet::{PolicySolver, PtrNet, PtrNetConfig};
pub use rates::RadioParams;
pub use reinforce::{train, TrainConfig};
pub use solver::{Solver, SolverRegistry};

//! Named solver registry. Every pairing/association strategy implements
//! [`Solver`] and is selected at runtime by name.

use std::collections::BTreeMap;

use rand::RngCore;

use crate::baselines::{exhaustive_noma, optimal_oma, random_heuristic, Solution, DEFAULT_EXHAUSTIVE_BUDGET};
use crate::error::{Error, Result};
use crate::netsim::NetworkInstance;

pub trait Solver: Send + Sync {
    fn name(&self) -> &str;

    /// Solves one instance. Deterministic solvers ignore `rng`.
    fn solve(&self, instance: &NetworkInstance, rng: &mut dyn RngCore) -> Result<Solution>;
}

#[derive(Debug, Clone, Copy)]
pub struct ExhaustiveSolver {
    pub budget: u128,
}

impl Default for ExhaustiveSolver {
    fn default() -> Self {
        ExhaustiveSolver {
            budget: DEFAULT_EXHAUSTIVE_BUDGET,
        }
    }
}

impl Solver for ExhaustiveSolver {
    fn name(&self) -> &str {
        "exhaustive"
    }

    fn solve(&self, instance: &NetworkInstance, _rng: &mut dyn RngCore) -> Result<Solution> {
        exhaustive_noma(instance, self.budget)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RandomSolver;

impl Solver for RandomSolver {
    fn name(&self) -> &str {
        "random"
    }

    fn solve(&self, instance: &NetworkInstance, rng: &mut dyn RngCore) -> Result<Solution> {
        random_heuristic(instance, rng)
    }
}

/// Optimal OMA association. Its `phi` is the OMA aggregate rate.
#[derive(Debug, Clone, Copy, Default)]
pub struct OmaSolver;

impl Solver for OmaSolver {
    fn name(&self) -> &str {
        "oma"
    }

    fn solve(&self, instance: &NetworkInstance, _rng: &mut dyn RngCore) -> Result<Solution> {
        optimal_oma(instance)
    }
}

#[derive(Default)]
pub struct SolverRegistry {
    solvers: BTreeMap<String, Box<dyn Solver>>,
}

impl SolverRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry holding `exhaustive`, `random` and `oma`.
    pub fn with_baselines(budget: u128) -> Self {
        let mut registry = Self::new();
        registry.register(Box::new(ExhaustiveSolver { budget }));
        registry.register(Box::new(RandomSolver));
        registry.register(Box::new(OmaSolver));
        registry
    }

    /// Adds a solver, replacing any previous one with the same name.
    pub fn register(&mut self, solver: Box<dyn Solver>) {
        self.solvers.insert(solver.name().to_string(), solver);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Solver> {
        self.solvers.get(name).map(Box::as_ref).ok_or_else(|| {
            Error::Config(format!(
                "unknown solver '{name}'; available: {}",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.solvers.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.solvers.keys().map(String::as_str)
    }
}

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{ExperimentId, SuggestionId};
use crate::store::Observation;

use super::grid::grid_enumerate;
use super::space::{Assignment, Domain, ParamValue, ParameterSpace};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    #[default]
    Random,
    Grid,
    Evolutionary,
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(match self {
            StrategyKind::Random => "random",
            StrategyKind::Grid => "grid",
            StrategyKind::Evolutionary => "evolutionary",
        })
    }
}

/// Tunables of the evolutionary strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionParams {
    /// μ: number of best successful observations kept as parents.
    pub population: usize,
    /// Mutation standard deviation as a fraction of the parameter range on its sampling scale.
    pub mutation_scale: f64,
    /// Probability that a categorical value is resampled.
    pub categorical_mutation: f64,
}

impl Default for EvolutionParams {
    fn default() -> Self {
        EvolutionParams {
            population: 5,
            mutation_scale: 0.1,
            categorical_mutation: 0.2,
        }
    }
}

impl EvolutionParams {
    pub fn validate(&self) -> Result<()> {
        if self.population == 0 {
            return Err(Error::validation(
                "evolution.population",
                "population must be positive",
            ));
        }
        if !(self.mutation_scale.is_finite() && self.mutation_scale >= 0.0) {
            return Err(Error::validation(
                "evolution.mutation_scale",
                "mutation_scale must be a non-negative number",
            ));
        }
        if !(0.0..=1.0).contains(&self.categorical_mutation) {
            return Err(Error::validation(
                "evolution.categorical_mutation",
                "categorical_mutation must lie in [0, 1]",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySettings {
    pub kind: StrategyKind,
    pub seed: u64,
    #[serde(default)]
    pub evolution: EvolutionParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestionSource {
    pub strategy: StrategyKind,
    pub sequence_index: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub suggestion_id: SuggestionId,
    pub assignment: Assignment,
    pub source: SuggestionSource,
}

/// A population entry of the evolutionary strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub suggestion_id: SuggestionId,
    pub assignment: Assignment,
    pub value: f64,
    arrival: u64,
}

#[derive(Debug, Clone)]
pub struct StrategyState {
    settings: StrategySettings,
    issued: u64,
    open: BTreeSet<SuggestionId>,
    /// Sorted by value descending; earlier arrivals win ties.
    population: Vec<Member>,
    arrivals: u64,
    grid: Option<Vec<Assignment>>,
}

/// Independent random stream for suggestion `index`.
fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn sample_assignment<R: Rng + ?Sized>(space: &ParameterSpace, rng: &mut R) -> Assignment {
    space
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.sample(rng)))
        .collect()
}

impl StrategyState {
    pub fn new(
        settings: StrategySettings,
        space: &ParameterSpace,
        grid_cap: usize,
    ) -> Result<Self> {
        settings.evolution.validate()?;
        let grid = match settings.kind {
            StrategyKind::Grid => Some(grid_enumerate(space, grid_cap)?),
            _ => None,
        };
        Ok(StrategyState {
            settings,
            issued: 0,
            open: BTreeSet::new(),
            population: Vec::new(),
            arrivals: 0,
            grid,
        })
    }

    /// Rebuilds state for an experiment that already issued `issued` suggestions and
    /// received `observations`. Suggestions without an observation are treated as lost.
    pub fn restore(
        settings: StrategySettings,
        space: &ParameterSpace,
        grid_cap: usize,
        issued: u64,
        observations: &[Observation],
    ) -> Result<Self> {
        let mut state = Self::new(settings, space, grid_cap)?;
        state.issued = issued;
        for obs in observations {
            state.absorb(obs);
        }
        Ok(state)
    }

    pub fn settings(&self) -> &StrategySettings {
        &self.settings
    }

    pub fn issued(&self) -> u64 {
        self.issued
    }

    pub fn open(&self) -> &BTreeSet<SuggestionId> {
        &self.open
    }

    pub fn population(&self) -> &[Member] {
        &self.population
    }

    /// Size of the grid for grid search, `None` for the other strategies.
    pub fn grid_len(&self) -> Option<usize> {
        self.grid.as_ref().map(Vec::len)
    }

    /// Produces the next suggestion.
    ///
    /// Fails with [`Error::Exhausted`] once a grid has been fully issued. Budget accounting
    /// is the caller's responsibility.
    pub fn suggest(
        &mut self,
        experiment: &ExperimentId,
        space: &ParameterSpace,
    ) -> Result<Suggestion> {
        let index = self.issued;
        let assignment = match self.settings.kind {
            StrategyKind::Random => {
                sample_assignment(space, &mut stream(self.settings.seed, index))
            }
            StrategyKind::Grid => {
                let grid = self
                    .grid
                    .as_ref()
                    .expect("grid is enumerated at construction");
                grid.get(index as usize).cloned().ok_or_else(|| {
                    Error::Exhausted(format!("all {} grid points issued", grid.len()))
                })?
            }
            StrategyKind::Evolutionary => self.evolve(space, index),
        };
        let suggestion = Suggestion {
            suggestion_id: experiment.suggestion_id(index),
            assignment,
            source: SuggestionSource {
                strategy: self.settings.kind,
                sequence_index: index,
            },
        };
        self.issued += 1;
        self.open.insert(suggestion.suggestion_id.clone());
        Ok(suggestion)
    }

    fn evolve(&self, space: &ParameterSpace, index: u64) -> Assignment {
        let params = self.settings.evolution;
        let mut rng = stream(self.settings.seed, index);
        if self.population.len() < params.population {
            return sample_assignment(space, &mut rng);
        }
        let parent = &self.population[rng.random_range(0..self.population.len())];
        space
            .params()
            .iter()
            .map(|p| {
                let current = &parent.assignment[&p.name];
                let child = match (&p.domain, current) {
                    (Domain::Categorical { values }, _) => {
                        if rng.random_bool(params.categorical_mutation) {
                            ParamValue::Categorical(
                                values[rng.random_range(0..values.len())].clone(),
                            )
                        } else {
                            current.clone()
                        }
                    }
                    _ => {
                        let (lo, hi) = p.sampling_range().expect("numeric domain");
                        let sigma = params.mutation_scale * (hi - lo);
                        let u = p.to_sampling_scale(current.as_f64().expect("numeric value"));
                        let step = if sigma > 0.0 {
                            Normal::new(0.0, sigma)
                                .expect("finite sigma")
                                .sample(&mut rng)
                        } else {
                            0.0
                        };
                        p.at_sampling_position_clamped((u + step).clamp(lo, hi))
                    }
                };
                (p.name.clone(), child)
            })
            .collect()
    }

    /// Closes the observation's suggestion and, for successes, offers it to the population.
    pub fn ingest(&mut self, obs: &Observation) -> Result<()> {
        if !self.open.contains(&obs.suggestion_id) {
            return Err(Error::Rejected(format!(
                "suggestion {} is not open",
                obs.suggestion_id
            )));
        }
        self.absorb(obs);
        Ok(())
    }

    /// Drops an open suggestion that will never be observed.
    pub fn abandon(&mut self, id: &SuggestionId) {
        self.open.remove(id);
    }

    fn absorb(&mut self, obs: &Observation) {
        self.open.remove(&obs.suggestion_id);
        let arrival = self.arrivals;
        self.arrivals += 1;
        if self.settings.kind != StrategyKind::Evolutionary {
            return;
        }
        let Some(value) = obs.value.filter(|_| !obs.failed) else {
            return;
        };
        let mu = self.settings.evolution.population;
        if self.population.len() == mu
            && self
                .population
                .last()
                .is_some_and(|worst| value <= worst.value)
        {
            return;
        }
        let at = self.population.partition_point(|m| m.value >= value);
        self.population.insert(
            at,
            Member {
                suggestion_id: obs.suggestion_id.clone(),
                assignment: obs.assignment.clone(),
                value,
                arrival,
            },
        );
        self.population.truncate(mu);
    }
}

/// Best successful observation; ties go to the earliest.
pub fn best_assignment(observations: &[Observation]) -> Option<(Assignment, f64)> {
    let mut best: Option<&Observation> = None;
    for obs in observations {
        if let (false, Some(v)) = (obs.failed, obs.value) {
            if best.and_then(|b| b.value).is_none_or(|b| v > b) {
                best = Some(obs);
            }
        }
    }
    best.map(|o| (o.assignment.clone(), o.value.expect("successful")))
}

/// Running maximum of successful values, one entry per observation. Entries before the
/// first success are `None`.
pub fn best_trace(observations: &[Observation]) -> Vec<Option<f64>> {
    let mut best: Option<f64> = None;
    observations
        .iter()
        .map(|obs| {
            if let (false, Some(v)) = (obs.failed, obs.value) {
                best = Some(best.map_or(v, |b| b.max(v)));
            }
            best
        })
        .collect()
}

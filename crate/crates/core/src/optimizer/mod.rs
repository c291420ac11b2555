//! Embedded suggestion engine.
//!
//! A [`ParameterSpace`] describes what may be tuned; a [`StrategyState`] hands out
//! [`Suggestion`]s for it and learns from observations. Three strategies are supported:
//! random search, grid search, and a small (μ + 1)-style evolutionary strategy.
//!
//! The optimization direction is fixed to maximization. Users wanting to minimize a loss
//! report its negation.
//!
//! Every random draw is taken from a counter-based stream keyed by `(seed, sequence index)`,
//! so the i-th suggestion of a random-search experiment does not depend on the order in which
//! earlier evaluations finished.

mod grid;
mod space;
mod strategy;

pub use grid::{grid_enumerate, DEFAULT_GRID_CAP, DEFAULT_GRID_COUNT};
pub use space::{
    validate_space, Assignment, Bounds, Domain, Param, ParamKind, ParamValue, ParameterDef,
    ParameterSpace, Scale,
};
pub use strategy::{
    best_assignment, best_trace, EvolutionParams, Member, StrategyKind, StrategySettings,
    StrategyState, Suggestion, SuggestionSource,
};

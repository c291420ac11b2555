//! Sequential optimizer drivers and the frozen random-search golden value.
//!
//! Shared by the core property tests and the acceptance suite via `#[path]`.

#![allow(dead_code)]

use chrono::Utc;
use orchestrate_core::ids::ExperimentId;
use orchestrate_core::optimizer::{
    best_assignment, best_trace, validate_space, Assignment, Bounds, EvolutionParams, ParamKind,
    ParamValue, ParameterDef, ParameterSpace, Scale, StrategyKind, StrategySettings, StrategyState,
    Suggestion, DEFAULT_GRID_CAP,
};
use orchestrate_core::store::Observation;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random search, seed 7, budget 100 on `-(x - 0.3)^2` over x in [0, 1]. Produced once by
/// the ignored `print_golden_random_best` test and frozen here.
pub const GOLDEN_SEED: u64 = 7;
pub const GOLDEN_BUDGET: usize = 100;
pub const GOLDEN_BEST_X: f64 = 0.3001283809047113;

pub fn settings(kind: StrategyKind, seed: u64, population: usize) -> StrategySettings {
    StrategySettings {
        kind,
        seed,
        evolution: EvolutionParams {
            population,
            ..Default::default()
        },
    }
}

/// Deterministic stand-in objective: a hash of the assignment mapped to [-1, 1], with
/// roughly one in eight evaluations failing.
pub fn hashed_objective(a: &Assignment) -> Option<f64> {
    let text = serde_json::to_string(a).unwrap();
    let h = text.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    });
    (h % 8 != 0).then(|| (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0)
}

pub fn observation(id: &ExperimentId, s: &Suggestion, value: Option<f64>) -> Observation {
    Observation {
        suggestion_id: s.suggestion_id.clone(),
        assignment: s.assignment.clone(),
        value,
        failed: value.is_none(),
        run_id: id.run_id(s.source.sequence_index),
        reported_at: Utc::now(),
    }
}

pub fn unit_x() -> ParameterSpace {
    validate_space(&[ParameterDef {
        name: "x".into(),
        kind: ParamKind::Double,
        bounds: Some(Bounds { min: 0.0, max: 1.0 }),
        scale: Scale::Linear,
        values: vec![],
        grid_count: None,
    }])
    .unwrap()
}

pub fn neg_quadratic(a: &Assignment) -> f64 {
    let ParamValue::Double(x) = a["x"] else {
        panic!("{:?}", a["x"])
    };
    -(x - 0.3) * (x - 0.3)
}

/// Best of a sequential run on `-(x - 0.3)^2` over x in [0, 1].
pub fn run_sequential(kind: StrategyKind, seed: u64, budget: usize) -> (Assignment, f64) {
    let space = unit_x();
    let id = ExperimentId::from("e");
    let mut st = StrategyState::new(settings(kind, seed, 5), &space, DEFAULT_GRID_CAP).unwrap();
    let mut observations = Vec::new();
    for _ in 0..budget {
        let s = st.suggest(&id, &space).unwrap();
        let obs = observation(&id, &s, Some(neg_quadratic(&s.assignment)));
        st.ingest(&obs).unwrap();
        observations.push(obs);
    }
    best_assignment(&observations).unwrap()
}

fn random_def(rng: &mut impl Rng, i: usize) -> ParameterDef {
    let name = format!("p{i}");
    match rng.random_range(0..3) {
        0 => {
            let min = rng.random_range(1e-3..10.0);
            ParameterDef {
                name,
                kind: ParamKind::Double,
                bounds: Some(Bounds {
                    min,
                    max: min + rng.random_range(1e-3..100.0),
                }),
                scale: if rng.random_bool(0.5) {
                    Scale::Log
                } else {
                    Scale::Linear
                },
                values: vec![],
                grid_count: Some(rng.random_range(1..5)),
            }
        }
        1 => {
            let min = rng.random_range(-20..20i64);
            ParameterDef {
                name,
                kind: ParamKind::Int,
                bounds: Some(Bounds {
                    min: min as f64,
                    max: (min + rng.random_range(1..30)) as f64,
                }),
                scale: Scale::Linear,
                values: vec![],
                grid_count: Some(rng.random_range(1..6)),
            }
        }
        _ => ParameterDef {
            name,
            kind: ParamKind::Categorical,
            bounds: None,
            scale: Scale::Linear,
            values: (0..rng.random_range(1..5))
                .map(|v| format!("v{v}"))
                .collect(),
            grid_count: None,
        },
    }
}

/// Runs `n` randomized experiments (random space, strategy, seed, budget, bandwidth and
/// completion order) and checks each best-seen trace against a running maximum computed
/// here. Returns one message per violation.
pub fn trace_property(n: usize, seed: u64) -> Vec<String> {
    const KINDS: [StrategyKind; 3] = [
        StrategyKind::Random,
        StrategyKind::Grid,
        StrategyKind::Evolutionary,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut problems = Vec::new();
    for case in 0..n {
        let defs: Vec<_> = (0..rng.random_range(1..5))
            .map(|i| random_def(&mut rng, i))
            .collect();
        let space = validate_space(&defs).unwrap();
        let kind = KINDS[rng.random_range(0..3)];
        let budget = rng.random_range(1..40usize);
        let bandwidth = rng.random_range(1..6usize);
        let id = ExperimentId::from("e");
        let mut st = StrategyState::new(
            settings(kind, rng.random(), rng.random_range(1..6)),
            &space,
            DEFAULT_GRID_CAP,
        )
        .unwrap();
        let mut open: Vec<Suggestion> = Vec::new();
        let mut observed = Vec::new();
        let mut exhausted = false;
        while observed.len() < budget {
            while !exhausted && open.len() < bandwidth && observed.len() + open.len() < budget {
                match st.suggest(&id, &space) {
                    Ok(s) => open.push(s),
                    Err(_) => exhausted = true,
                }
            }
            if open.is_empty() {
                break;
            }
            let s = open.swap_remove(rng.random_range(0..open.len()));
            let obs = observation(&id, &s, hashed_objective(&s.assignment));
            st.ingest(&obs).unwrap();
            observed.push(obs);
        }
        let mut running: Option<f64> = None;
        let expected: Vec<Option<f64>> = observed
            .iter()
            .map(|o| {
                if let Some(v) = o.value {
                    running = Some(running.map_or(v, |r| r.max(v)));
                }
                running
            })
            .collect();
        let trace = best_trace(&observed);
        if trace != expected {
            problems.push(format!(
                "case {case}: trace {trace:?} != running max {expected:?}"
            ));
        }
        if trace.windows(2).any(|w| match (w[0], w[1]) {
            (Some(a), Some(b)) => b < a,
            (Some(_), None) => true,
            _ => false,
        }) {
            problems.push(format!("case {case}: trace decreases: {trace:?}"));
        }
    }
    problems
}

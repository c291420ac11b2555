use crate::error::{Error, Result};

use super::space::{Assignment, Domain, ParamValue, ParameterSpace, Scale};

/// Points per numeric parameter when `grid_count` is not given.
pub const DEFAULT_GRID_COUNT: u32 = 3;

/// Largest grid that will be materialized.
pub const DEFAULT_GRID_CAP: usize = 10_000;

/// Enumerates the full grid for `space`, last parameter varying fastest.
///
/// Doubles are spaced evenly on their sampling scale, endpoints included. Ints are spaced
/// evenly, rounded, and deduplicated, so an int axis may end up shorter than its
/// `grid_count`. Categoricals contribute every value in declaration order.
pub fn grid_enumerate(space: &ParameterSpace, cap: usize) -> Result<Vec<Assignment>> {
    let axes: Vec<Vec<ParamValue>> = space.params().iter().map(axis_points).collect();

    let size = axes
        .iter()
        .try_fold(1usize, |acc, axis| acc.checked_mul(axis.len()))
        .filter(|&n| n <= cap)
        .ok_or_else(|| {
            Error::validation(
                "parameters",
                format!("grid has more than {cap} points; lower grid_count values"),
            )
        })?;

    let mut out = Vec::with_capacity(size);
    let mut digits = vec![0usize; axes.len()];
    for _ in 0..size {
        out.push(
            space
                .params()
                .iter()
                .zip(&axes)
                .zip(&digits)
                .map(|((p, axis), &d)| (p.name.clone(), axis[d].clone()))
                .collect(),
        );
        // odometer increment, rightmost axis first
        for k in (0..axes.len()).rev() {
            digits[k] += 1;
            if digits[k] < axes[k].len() {
                break;
            }
            digits[k] = 0;
        }
    }
    Ok(out)
}

fn axis_points(param: &super::space::Param) -> Vec<ParamValue> {
    let count = param.grid_count.unwrap_or(DEFAULT_GRID_COUNT) as usize;
    match &param.domain {
        Domain::Double { min, max, scale } => {
            let (lo, hi) = match scale {
                Scale::Linear => (*min, *max),
                Scale::Log => (min.log10(), max.log10()),
            };
            (0..count)
                .map(|k| {
                    let v = if k == 0 {
                        *min
                    } else if k == count - 1 {
                        *max
                    } else {
                        let u = lo + (hi - lo) * k as f64 / (count - 1) as f64;
                        match scale {
                            Scale::Linear => u,
                            Scale::Log => 10f64.powf(u),
                        }
                    };
                    ParamValue::Double(v)
                })
                .collect()
        }
        Domain::Int { min, max } => {
            let mut points: Vec<i64> = (0..count)
                .map(|k| {
                    if count == 1 {
                        *min
                    } else {
                        let u = *min as f64 + (*max - *min) as f64 * k as f64 / (count - 1) as f64;
                        u.round() as i64
                    }
                })
                .collect();
            points.dedup();
            points.into_iter().map(ParamValue::Int).collect()
        }
        Domain::Categorical { values } => values
            .iter()
            .cloned()
            .map(ParamValue::Categorical)
            .collect(),
    }
}

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single parameter value as it appears in suggestions and observation records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Double(f64),
    Categorical(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            ParamValue::Int(v) => Some(v as f64),
            ParamValue::Double(v) => Some(v),
            ParamValue::Categorical(_) => None,
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Int(v) => write!(f, "{v}"),
            ParamValue::Double(v) => write!(f, "{v}"),
            ParamValue::Categorical(v) => f.pad(v),
        }
    }
}

pub type Assignment = BTreeMap<String, ParamValue>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Double,
    Int,
    Categorical,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Linear,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: f64,
    pub max: f64,
}

/// Parameter definition as written in an experiment configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterDef {
    pub name: String,
    #[serde(rename = "type", alias = "kind")]
    pub kind: ParamKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Bounds>,
    #[serde(default, skip_serializing_if = "is_linear")]
    pub scale: Scale,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub values: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_count: Option<u32>,
}

fn is_linear(scale: &Scale) -> bool {
    *scale == Scale::Linear
}

#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    Double { min: f64, max: f64, scale: Scale },
    Int { min: i64, max: i64 },
    Categorical { values: Vec<String> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub domain: Domain,
    pub grid_count: Option<u32>,
}

impl Param {
    /// Maps a numeric value onto the scale it is sampled and mutated on.
    pub(crate) fn to_sampling_scale(&self, v: f64) -> f64 {
        match self.domain {
            Domain::Double {
                scale: Scale::Log, ..
            } => v.ln(),
            _ => v,
        }
    }

    pub(crate) fn at_sampling_position(&self, u: f64) -> f64 {
        match self.domain {
            Domain::Double {
                scale: Scale::Log, ..
            } => u.exp(),
            _ => u,
        }
    }

    /// `(low, high)` of the numeric domain on its sampling scale.
    pub(crate) fn sampling_range(&self) -> Option<(f64, f64)> {
        match self.domain {
            Domain::Double { min, max, .. } => {
                Some((self.to_sampling_scale(min), self.to_sampling_scale(max)))
            }
            Domain::Int { min, max } => Some((min as f64, max as f64)),
            Domain::Categorical { .. } => None,
        }
    }

    pub(crate) fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamValue {
        match &self.domain {
            Domain::Double { min, max, scale } => {
                let v = match scale {
                    Scale::Linear => rng.random_range(*min..=*max),
                    Scale::Log => rng.random_range(min.ln()..=max.ln()).exp(),
                };
                ParamValue::Double(v.clamp(*min, *max))
            }
            Domain::Int { min, max } => ParamValue::Int(rng.random_range(*min..=*max)),
            Domain::Categorical { values } => {
                ParamValue::Categorical(values[rng.random_range(0..values.len())].clone())
            }
        }
    }

    /// Clamps a numeric value on the sampling scale back into the domain.
    pub(crate) fn at_sampling_position_clamped(&self, u: f64) -> ParamValue {
        match self.domain {
            Domain::Double { min, max, .. } => {
                ParamValue::Double(self.at_sampling_position(u).clamp(min, max))
            }
            Domain::Int { min, max } => ParamValue::Int((u.round() as i64).clamp(min, max)),
            Domain::Categorical { .. } => unreachable!("categorical parameters have no scale"),
        }
    }

    pub fn contains(&self, value: &ParamValue) -> bool {
        match (&self.domain, value) {
            (Domain::Double { min, max, .. }, ParamValue::Double(v)) => {
                v.is_finite() && *min <= *v && *v <= *max
            }
            (Domain::Int { min, max }, ParamValue::Int(v)) => *min <= *v && *v <= *max,
            (Domain::Categorical { values }, ParamValue::Categorical(v)) => values.contains(v),
            _ => false,
        }
    }
}

/// A validated, ordered parameter space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ParameterDef>", into = "Vec<ParameterDef>")]
pub struct ParameterSpace {
    params: Vec<Param>,
}

impl ParameterSpace {
    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// True when `assignment` names exactly this space's parameters with in-domain values.
    pub fn admits(&self, assignment: &Assignment) -> bool {
        assignment.len() == self.params.len()
            && self
                .params
                .iter()
                .all(|p| assignment.get(&p.name).is_some_and(|v| p.contains(v)))
    }
}

impl TryFrom<Vec<ParameterDef>> for ParameterSpace {
    type Error = Error;

    fn try_from(defs: Vec<ParameterDef>) -> Result<Self> {
        validate_space(&defs)
    }
}

impl From<ParameterSpace> for Vec<ParameterDef> {
    fn from(space: ParameterSpace) -> Self {
        space
            .params
            .into_iter()
            .map(|p| {
                let mut def = ParameterDef {
                    name: p.name,
                    kind: ParamKind::Double,
                    bounds: None,
                    scale: Scale::Linear,
                    values: Vec::new(),
                    grid_count: p.grid_count,
                };
                match p.domain {
                    Domain::Double { min, max, scale } => {
                        def.bounds = Some(Bounds { min, max });
                        def.scale = scale;
                    }
                    Domain::Int { min, max } => {
                        def.kind = ParamKind::Int;
                        def.bounds = Some(Bounds {
                            min: min as f64,
                            max: max as f64,
                        });
                    }
                    Domain::Categorical { values } => {
                        def.kind = ParamKind::Categorical;
                        def.values = values;
                    }
                }
                def
            })
            .collect()
    }
}

/// Checks parameter definitions and normalizes them into a [`ParameterSpace`].
///
/// Errors carry the field path of the first offending definition, e.g.
/// `parameters[1].bounds`.
pub fn validate_space(defs: &[ParameterDef]) -> Result<ParameterSpace> {
    if defs.is_empty() {
        return Err(Error::validation(
            "parameters",
            "at least one parameter is required",
        ));
    }
    let mut seen = HashSet::new();
    let mut params = Vec::with_capacity(defs.len());
    for (i, def) in defs.iter().enumerate() {
        let at = |field: &str| format!("parameters[{i}].{field}");
        if def.name.trim().is_empty() {
            return Err(Error::validation(at("name"), "name must not be empty"));
        }
        if !seen.insert(def.name.as_str()) {
            return Err(Error::validation(
                at("name"),
                format!("duplicate parameter name `{}`", def.name),
            ));
        }
        if def.grid_count == Some(0) {
            return Err(Error::validation(
                at("grid_count"),
                "grid_count must be positive",
            ));
        }
        let domain = match def.kind {
            ParamKind::Double | ParamKind::Int => {
                let Some(Bounds { min, max }) = def.bounds else {
                    return Err(Error::validation(
                        at("bounds"),
                        "numeric parameters need bounds {min, max}",
                    ));
                };
                if !def.values.is_empty() {
                    return Err(Error::validation(
                        at("values"),
                        "values apply to categorical parameters only",
                    ));
                }
                if !min.is_finite() || !max.is_finite() {
                    return Err(Error::validation(at("bounds"), "bounds must be finite"));
                }
                if min >= max {
                    return Err(Error::validation(at("bounds"), "min must be < max"));
                }
                if def.kind == ParamKind::Int {
                    if def.scale == Scale::Log {
                        return Err(Error::validation(
                            at("scale"),
                            "log scale applies to double parameters only",
                        ));
                    }
                    if min.fract() != 0.0 || max.fract() != 0.0 {
                        return Err(Error::validation(
                            at("bounds"),
                            "int bounds must be whole numbers",
                        ));
                    }
                    Domain::Int {
                        min: min as i64,
                        max: max as i64,
                    }
                } else {
                    if def.scale == Scale::Log && min <= 0.0 {
                        return Err(Error::validation(
                            at("bounds"),
                            "log scale requires min > 0",
                        ));
                    }
                    Domain::Double {
                        min,
                        max,
                        scale: def.scale,
                    }
                }
            }
            ParamKind::Categorical => {
                if def.values.is_empty() {
                    return Err(Error::validation(
                        at("values"),
                        "categorical parameters need at least one value",
                    ));
                }
                if def.bounds.is_some() {
                    return Err(Error::validation(
                        at("bounds"),
                        "bounds apply to numeric parameters only",
                    ));
                }
                let mut distinct = HashSet::new();
                if let Some(dup) = def.values.iter().find(|v| !distinct.insert(v.as_str())) {
                    return Err(Error::validation(
                        at("values"),
                        format!("duplicate categorical value `{dup}`"),
                    ));
                }
                Domain::Categorical {
                    values: def.values.clone(),
                }
            }
        };
        params.push(Param {
            name: def.name.clone(),
            domain,
            grid_count: def.grid_count,
        });
    }
    Ok(ParameterSpace { params })
}

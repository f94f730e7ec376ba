//! The four explanation methods and the attribution map they produce.
//!
//! Sign convention everywhere: positive relevance pushes the target score up
//! relative to the baseline (or relative to the masked input for occlusion).

mod conductance;
mod deeplift;
mod ig;
mod occlusion;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Model, Target};
use crate::tensor::Tensor;

pub use conductance::{conductance, conductance_many};
pub use deeplift::{deeplift_many, deeplift_rescale};
pub use ig::{integrated_gradients, integrated_gradients_many, integrated_gradients_refined};
pub use occlusion::{
    mask_positions, occlusion, occlusion_with, DirectScorer, MaskConfig, OcclusionResult,
    OcclusionScorer, SegmentedScorer,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Occlusion,
    Ig,
    DeepLift,
    Conductance,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Occlusion => "occlusion",
            Method::Ig => "ig",
            Method::DeepLift => "deeplift",
            Method::Conductance => "conductance",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "occlusion" => Ok(Method::Occlusion),
            "ig" => Ok(Method::Ig),
            "deeplift" => Ok(Method::DeepLift),
            "conductance" => Ok(Method::Conductance),
            _ => Err(Error::Format(format!("unknown method `{s}`"))),
        }
    }
}

/// Relevance values aligned with the explained tensor, plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    pub values: Tensor,
    pub method: Method,
    pub target: Target,
    /// Content hash of the baseline; `None` for occlusion.
    pub baseline_id: Option<String>,
    /// |sum(values) - (F(x) - F(x'))| as measured when the map was built.
    pub completeness_gap: Option<f64>,
}

/// Quadrature rule for path integrals over `alpha in [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    #[default]
    Trapezoid,
    Midpoint,
}

impl FromStr for Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trapezoid" => Ok(Rule::Trapezoid),
            "midpoint" => Ok(Rule::Midpoint),
            _ => Err(Error::Format(format!("unknown integration rule `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathConfig {
    pub steps: usize,
    pub rule: Rule,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            steps: 64,
            rule: Rule::Trapezoid,
        }
    }
}

impl PathConfig {
    pub fn new(steps: usize, rule: Rule) -> Self {
        Self { steps, rule }
    }

    pub fn trapezoid(steps: usize) -> Self {
        Self::new(steps, Rule::Trapezoid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Domain("path steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Quadrature nodes `(alpha, weight)`; weights sum to 1.
    pub fn nodes(&self) -> Vec<(f64, f64)> {
        let m = self.steps as f64;
        match self.rule {
            Rule::Trapezoid => (0..=self.steps)
                .map(|k| {
                    let w = if k == 0 || k == self.steps { 0.5 / m } else { 1.0 / m };
                    (k as f64 / m, w)
                })
                .collect(),
            Rule::Midpoint => (0..self.steps)
                .map(|k| ((k as f64 + 0.5) / m, 1.0 / m))
                .collect(),
        }
    }
}

/// Reference input for IG, DeepLIFT and conductance.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Baseline {
    /// The empty spectrogram.
    #[default]
    Zero,
    Constant(f32),
    Tensor(Tensor),
}

impl Baseline {
    /// Materializes the baseline for an input of `shape`.
    pub fn resolve(&self, shape: &[usize]) -> Result<Tensor> {
        match self {
            Baseline::Zero => Tensor::zeros(shape),
            Baseline::Constant(v) => Tensor::new(shape, *v),
            Baseline::Tensor(t) => {
                if t.shape() != shape {
                    return Err(Error::Shape(format!(
                        "baseline shape {:?} does not match input {shape:?}",
                        t.shape()
                    )));
                }
                Ok(t.clone())
            }
        }
    }
}

/// |reduce_sum(map) - (F_target(x) - F_target(x'))| for a map built on (model, input, baseline).
pub fn completeness_gap(
    map: &AttributionMap,
    model: &Model,
    input: &Tensor,
    baseline: &Tensor,
) -> Result<f64> {
    if map.method == Method::Occlusion {
        return Err(Error::MethodMismatch(map.method.to_string()));
    }
    let delta = difference_from_reference(model, input, baseline, map.target)?;
    Ok((map.values.reduce_sum() - delta).abs())
}

/// F_target(input) - F_target(baseline).
pub fn difference_from_reference(
    model: &Model,
    input: &Tensor,
    baseline: &Tensor,
    target: Target,
) -> Result<f64> {
    input.ensure_same_shape(baseline)?;
    let (fx, _) = model.forward(input)?;
    let (fb, _) = model.forward(baseline)?;
    Ok(model.target_value(&fx, target)? - model.target_value(&fb, target)?)
}

/// Shared validation for the reference-based methods.
fn check_inputs(model: &Model, input: &Tensor, baseline: &Tensor, targets: &[Target]) -> Result<()> {
    input.ensure_same_shape(baseline)?;
    if input.shape() != model.input_shape() {
        return Err(Error::Shape(format!(
            "model expects input {:?}, got {:?}",
            model.input_shape(),
            input.shape()
        )));
    }
    for &t in targets {
        model.check_target(t)?;
    }
    Ok(())
}

/// Point on the straight path in 64-bit; exact at both ends.
pub(crate) fn path_point_f64(x: &[f64], b: &[f64], alpha: f64) -> Vec<f64> {
    if alpha == 0.0 {
        return b.to_vec();
    }
    if alpha == 1.0 {
        return x.to_vec();
    }
    x.iter().zip(b).map(|(&x, &b)| b + alpha * (x - b)).collect()
}

/// Splits a batched `[element][target]` buffer into one map per target.
fn split_maps(
    shape: &[usize],
    values: &[f64],
    targets: &[Target],
    method: Method,
    baseline_id: &str,
    deltas: &[f64],
) -> Result<Vec<AttributionMap>> {
    let t = targets.len();
    targets
        .iter()
        .enumerate()
        .map(|(j, &target)| {
            let column: Vec<f64> = values.iter().skip(j).step_by(t).copied().collect();
            let sum = column.iter().fold(0.0f64, |acc, &v| acc + v);
            if column.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invariant(format!("{method} produced non-finite relevance")));
            }
            Ok(AttributionMap {
                values: Tensor::from_f64(shape, &column)?,
                method,
                target,
                baseline_id: Some(baseline_id.to_string()),
                completeness_gap: Some((sum - deltas[j]).abs()),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trapezoid_nodes() {
        let nodes = PathConfig::trapezoid(4).nodes();
        assert_eq!(nodes.len(), 5);
        assert_eq!(nodes[0], (0.0, 0.125));
        assert_eq!(nodes[4], (1.0, 0.125));
        let total: f64 = nodes.iter().map(|n| n.1).sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn midpoint_nodes() {
        let nodes = PathConfig::new(2, Rule::Midpoint).nodes();
        assert_eq!(nodes, vec![(0.25, 0.5), (0.75, 0.5)]);
        assert!(PathConfig::trapezoid(0).validate().is_err());
    }

    #[test]
    fn baseline_resolution() {
        assert_eq!(Baseline::Zero.resolve(&[2]).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(Baseline::Constant(1.5).resolve(&[1]).unwrap().data(), &[1.5]);
        let t = Tensor::zeros(&[3]).unwrap();
        assert!(Baseline::Tensor(t).resolve(&[2]).is_err());
    }

    #[test]
    fn method_round_trips_through_text() {
        for m in [Method::Occlusion, Method::Ig, Method::DeepLift, Method::Conductance] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
    }
}

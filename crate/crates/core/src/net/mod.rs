//! CNN engine: model definition, traced forward evaluation and reverse-mode
//! gradients with respect to the input or any recorded activation.

pub mod init;
pub mod layer;
pub mod manifest;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use layer::{Conv2d, Dense, Layer, Pool2d, RESCALE_EPSILON};
use layer::Site;

/// Which scalar an attribution explains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    /// One channel of the feature vector.
    Feature(usize),
    /// The optional dense quality head on top of the features.
    Head,
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Feature(k) => write!(f, "feature:{k}"),
            Target::Head => f.write_str("head"),
        }
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "head" {
            return Ok(Target::Head);
        }
        s.strip_prefix("feature:")
            .and_then(|k| k.parse().ok())
            .map(Target::Feature)
            .ok_or_else(|| Error::Format(format!("bad target `{s}` (want feature:K or head)")))
    }
}

/// Per-layer activations of one forward pass; index 0 is the input itself.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
}

impl ActivationTrace {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn shape(&self, index: usize) -> &[usize] {
        &self.shapes[index]
    }

    /// Raw 64-bit activations of `index`.
    pub fn values(&self, index: usize) -> &[f64] {
        &self.values[index]
    }

    /// Activations of `index` rounded to a tensor.
    pub fn tensor(&self, index: usize) -> Result<Tensor> {
        Tensor::from_f64(&self.shapes[index], &self.values[index])
    }

    /// The final activation (the feature vector).
    pub fn features(&self) -> &[f64] {
        self.values.last().expect("trace always holds the input")
    }
}

/// An immutable layer stack with a statically checked shape plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    name: String,
    seed: Option<u64>,
    layers: Vec<Layer>,
    head: Option<Dense>,
    shapes: Vec<Vec<usize>>,
}

impl Model {
    pub fn new(input_shape: &[usize], layers: Vec<Layer>, head: Option<Dense>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Shape(format!("invalid input shape {input_shape:?}")));
        }
        let mut shapes = vec![input_shape.to_vec()];
        for (i, layer) in layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes.last().unwrap())
                .map_err(|e| Error::Shape(format!("layer {i} ({}): {e}", layer.kind())))?;
            shapes.push(next);
        }
        let output_dim: usize = shapes.last().unwrap().iter().product();
        if let Some(head) = &head {
            if head.in_dim != output_dim || head.out_dim != 1 {
                return Err(Error::Shape(format!(
                    "head must map {output_dim} features to 1, got {}->{}",
                    head.in_dim, head.out_dim
                )));
            }
        }
        Ok(Self {
            name: String::from("model"),
            seed: None,
            layers,
            head,
            shapes,
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn head(&self) -> Option<&Dense> {
        self.head.as_ref()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    /// Shape of `trace[index]`.
    pub fn activation_shape(&self, index: usize) -> &[usize] {
        &self.shapes[index]
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().unwrap().iter().product()
    }

    pub fn check_target(&self, target: Target) -> Result<()> {
        match target {
            Target::Feature(k) if k < self.output_dim() => Ok(()),
            Target::Head if self.head.is_some() => Ok(()),
            Target::Head => Err(Error::TargetOutOfRange("head (model has no head)".into())),
            Target::Feature(k) => Err(Error::TargetOutOfRange(format!(
                "feature:{k} (output dim {})",
                self.output_dim()
            ))),
        }
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer > self.layers.len() {
            return Err(Error::LayerOutOfRange {
                index: layer,
                max: self.layers.len(),
            });
        }
        Ok(())
    }

    /// Evaluates the model, returning the feature vector and the full trace.
    pub fn forward(&self, input: &Tensor) -> Result<(Vec<f64>, ActivationTrace)> {
        if input.shape() != self.input_shape() {
            return Err(Error::Shape(format!(
                "model expects input {:?}, got {:?}",
                self.input_shape(),
                input.shape()
            )));
        }
        let trace = self.trace_unchecked(input.to_f64());
        Ok((trace.features().to_vec(), trace))
    }

    /// Forward pass on a 64-bit input buffer laid out as `input_shape`.
    pub fn trace(&self, input: Vec<f64>) -> Result<ActivationTrace> {
        let want: usize = self.input_shape().iter().product();
        if input.len() != want {
            return Err(Error::Shape(format!(
                "model expects {want} input values, got {}",
                input.len()
            )));
        }
        Ok(self.trace_unchecked(input))
    }

    fn trace_unchecked(&self, input: Vec<f64>) -> ActivationTrace {
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(input);
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.forward(&values[i], &self.shapes[i], &self.shapes[i + 1]);
            values.push(next);
        }
        ActivationTrace {
            shapes: self.shapes.clone(),
            values,
        }
    }

    /// Re-runs layers `from..` starting at a (possibly perturbed) activation of `trace[from]`.
    pub fn forward_from(&self, from: usize, activation: Vec<f64>) -> Result<Vec<f64>> {
        self.check_layer(from)?;
        let want: usize = self.shapes[from].iter().product();
        if activation.len() != want {
            return Err(Error::Shape(format!(
                "layer {from} activation has {want} values, got {}",
                activation.len()
            )));
        }
        let mut cur = activation;
        for i in from..self.layers.len() {
            cur = self.layers[i].forward(&cur, &self.shapes[i], &self.shapes[i + 1]);
        }
        Ok(cur)
    }

    /// Value of `target` given a feature vector.
    pub fn target_value(&self, features: &[f64], target: Target) -> Result<f64> {
        self.check_target(target)?;
        Ok(match target {
            Target::Feature(k) => features[k],
            Target::Head => self.head.as_ref().unwrap().apply(features)[0],
        })
    }

    /// Gradient of `target` with respect to the model input at the traced point.
    pub fn backward_input_grad(&self, trace: &ActivationTrace, target: Target) -> Result<Tensor> {
        self.backward_from_layer(trace, 0, target)
    }

    /// Gradient of `target` with respect to `trace[layer]`.
    pub fn backward_from_layer(
        &self,
        trace: &ActivationTrace,
        layer: usize,
        target: Target,
    ) -> Result<Tensor> {
        self.check_layer(layer)?;
        self.check_trace(trace)?;
        let seed = self.seed_cotangent(&[target])?;
        let grad = self.backprop(trace, None, layer, seed, 1);
        Tensor::from_f64(&self.shapes[layer], &grad)
    }

    /// Pulls a cotangent on `trace[from]` back to `trace[to]` (`to <= from`).
    pub fn pullback(
        &self,
        trace: &ActivationTrace,
        from: usize,
        to: usize,
        cotangent: &Tensor,
    ) -> Result<Tensor> {
        self.check_layer(from)?;
        self.check_trace(trace)?;
        if to > from {
            return Err(Error::LayerOutOfRange { index: to, max: from });
        }
        if cotangent.shape() != self.shapes[from].as_slice() {
            return Err(Error::Shape(format!(
                "cotangent {:?} does not match layer {from} shape {:?}",
                cotangent.shape(),
                self.shapes[from]
            )));
        }
        let grad = self.backprop_range(trace, None, from, to, cotangent.to_f64(), 1);
        Tensor::from_f64(&self.shapes[to], &grad)
    }

    pub(crate) fn check_trace(&self, trace: &ActivationTrace) -> Result<()> {
        if trace.shapes != self.shapes {
            return Err(Error::Shape("trace was not produced by this model".into()));
        }
        Ok(())
    }

    /// Batched cotangent on the feature vector, `[feature][target]`.
    pub(crate) fn seed_cotangent(&self, targets: &[Target]) -> Result<Vec<f64>> {
        let t = targets.len();
        let mut seed = vec![0.0; self.output_dim() * t];
        for (j, &target) in targets.iter().enumerate() {
            self.check_target(target)?;
            match target {
                Target::Feature(k) => seed[k * t + j] = 1.0,
                Target::Head => {
                    let w = self.head.as_ref().unwrap().weights_f64();
                    for (k, &wk) in w.iter().enumerate() {
                        seed[k * t + j] = wk;
                    }
                }
            }
        }
        Ok(seed)
    }

    /// Propagates a batched cotangent from the features down to `trace[stop]`.
    pub(crate) fn backprop(
        &self,
        trace: &ActivationTrace,
        reference: Option<&ActivationTrace>,
        stop: usize,
        seed: Vec<f64>,
        t: usize,
    ) -> Vec<f64> {
        self.backprop_range(trace, reference, self.layers.len(), stop, seed, t)
    }

    fn backprop_range(
        &self,
        trace: &ActivationTrace,
        reference: Option<&ActivationTrace>,
        from: usize,
        stop: usize,
        seed: Vec<f64>,
        t: usize,
    ) -> Vec<f64> {
        let mut grad = seed;
        for i in (stop..from).rev() {
            let site = Site {
                in_shape: &self.shapes[i],
                out_shape: &self.shapes[i + 1],
                x_in: &trace.values[i],
                x_out: &trace.values[i + 1],
                reference: reference.map(|r| (r.values[i].as_slice(), r.values[i + 1].as_slice())),
            };
            grad = self.layers[i].backward(&site, &grad, t);
        }
        grad
    }

    /// On/off state of every ReLU and the chosen cell of every max-pool window.
    ///
    /// Two points with equal patterns lie in the same linear piece of the network.
    pub fn switching_pattern(&self, trace: &ActivationTrace) -> Vec<usize> {
        let mut pattern = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Relu => pattern.extend(trace.values[i].iter().map(|&v| usize::from(v > 0.0))),
                Layer::MaxPool2d(pool) => layer::for_each_window(
                    pool,
                    &self.shapes[i],
                    &self.shapes[i + 1],
                    |cells| pattern.push(layer::argmax(&trace.values[i], cells.iter().copied())),
                ),
                _ => {}
            }
        }
        pattern
    }

    /// Smallest |pre-activation| over all ReLU inputs in the trace.
    pub fn min_relu_margin(&self, trace: &ActivationTrace) -> f64 {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Relu))
            .flat_map(|(i, _)| trace.values[i].iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear() -> Model {
        init::linear_fixture()
    }

    fn relu_model() -> Model {
        let dense = Dense::new(
            1,
            1,
            Tensor::from_vec(&[1, 1], vec![1.0]).unwrap(),
            Tensor::zeros(&[1]).unwrap(),
        )
        .unwrap();
        Model::new(&[1], vec![Layer::Dense(dense), Layer::Relu], None).unwrap()
    }

    #[test]
    fn linear_fixture_forward_and_gradient() {
        let m = linear();
        let x = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let (f, trace) = m.forward(&x).unwrap();
        assert_eq!(f, vec![5.0]);
        assert_eq!(trace.len(), m.layers().len() + 1);
        let g = m.backward_input_grad(&trace, Target::Feature(0)).unwrap();
        assert_eq!(g.data(), &[2.0, 3.0]);
        assert!(matches!(
            m.backward_input_grad(&trace, Target::Feature(1)),
            Err(Error::TargetOutOfRange(_))
        ));
        assert!(matches!(
            m.backward_input_grad(&trace, Target::Head),
            Err(Error::TargetOutOfRange(_))
        ));
    }

    #[test]
    fn inactive_relu_has_zero_gradient() {
        let m = relu_model();
        for x in [-1.0f32, 0.0] {
            let (_, trace) = m.forward(&Tensor::from_vec(&[1], vec![x]).unwrap()).unwrap();
            let g = m.backward_input_grad(&trace, Target::Feature(0)).unwrap();
            assert_eq!(g.data(), &[0.0]);
        }
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let m = linear();
        assert!(matches!(
            m.forward(&Tensor::zeros(&[3]).unwrap()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn backward_from_layer_errors_and_layer_zero() {
        let m = init::nisqa_like(3, 15, true);
        let x = Tensor::new(&[1, 48, 15], 0.5).unwrap();
        let (_, trace) = m.forward(&x).unwrap();
        let a = m.backward_from_layer(&trace, 0, Target::Feature(2)).unwrap();
        let b = m.backward_input_grad(&trace, Target::Feature(2)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            m.backward_from_layer(&trace, m.layers().len() + 1, Target::Head),
            Err(Error::LayerOutOfRange { .. })
        ));
    }

    #[test]
    fn global_pool_gradient_selects_channel() {
        let m = init::nisqa_like(5, 15, false);
        let x = Tensor::new(&[1, 48, 15], 0.25).unwrap();
        let (_, trace) = m.forward(&x).unwrap();
        let last = m.layers().len() - 1;
        assert!(matches!(m.layers()[last], Layer::GlobalAvgPool));
        let g = m.backward_from_layer(&trace, last, Target::Feature(7)).unwrap();
        let shape = g.shape().to_vec();
        let plane = shape[1] * shape[2];
        let expect = (1.0 / plane as f64) as f32;
        for (i, &v) in g.data().iter().enumerate() {
            if i / plane == 7 {
                assert_eq!(v, expect);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let m = init::nisqa_like(11, 15, true);
        let data: Vec<f32> = (0..720).map(|i| ((i * 37) % 101) as f32 / 101.0).collect();
        let x = Tensor::from_vec(&[1, 48, 15], data).unwrap();
        let (a, ta) = m.forward(&x).unwrap();
        let (b, tb) = m.forward(&x).unwrap();
        assert_eq!(a.len(), 20);
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(ta, tb);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn target_parsing() {
        assert_eq!("head".parse::<Target>().unwrap(), Target::Head);
        assert_eq!("feature:19".parse::<Target>().unwrap(), Target::Feature(19));
        assert!("feature:x".parse::<Target>().is_err());
        assert_eq!(Target::Feature(3).to_string(), "feature:3");
    }
}

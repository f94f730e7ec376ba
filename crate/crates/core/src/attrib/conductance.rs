use rayon::prelude::*;

use super::ig::NODE_CHUNK;
use super::{check_inputs, path_point_f64, split_maps, AttributionMap, Method, PathConfig, Rule};
use crate::error::Result;
use crate::net::{Model, Target};
use crate::tensor::Tensor;

/// Conductance of every unit of `trace[layer]` for several targets.
///
/// The path is cut into `steps` intervals `[α_{k-1}, α_k]`. Each interval adds
/// `ĝ_k · (y(α_k) - y(α_{k-1}))` where `y` is the hidden activation and `ĝ_k`
/// the hidden-layer gradient estimate for the interval: the mean of the two
/// endpoint gradients (trapezoid) or the gradient at the interval midpoint.
/// At `layer = 0` this is exactly integrated gradients under the same rule.
pub fn conductance_many(
    model: &Model,
    input: &Tensor,
    baseline: &Tensor,
    layer: usize,
    targets: &[Target],
    path: PathConfig,
) -> Result<Vec<AttributionMap>> {
    path.validate()?;
    model.check_layer(layer)?;
    check_inputs(model, input, baseline, targets)?;
    let (x, b) = (input.to_f64(), baseline.to_f64());
    let t = targets.len();
    let seed = model.seed_cotangent(targets)?;
    let m = path.steps;
    let unit_count: usize = model.activation_shape(layer).iter().product();

    // Per node: hidden activation and (optionally) its batched gradient.
    let eval = |alpha: f64, with_grad: bool| -> Result<(Vec<f64>, Vec<f64>)> {
        let trace = model.trace(path_point_f64(&x, &b, alpha))?;
        let grad = if with_grad {
            model.backprop(&trace, None, layer, seed.clone(), t)
        } else {
            Vec::new()
        };
        Ok((trace.values(layer).to_vec(), grad))
    };

    let mut cond = vec![0.0f64; unit_count * t];
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    for start in (0..=m).step_by(NODE_CHUNK) {
        let end = (start + NODE_CHUNK).min(m + 1);
        let nodes: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (start..end)
            .into_par_iter()
            .map(|k| {
                let alpha = k as f64 / m as f64;
                let (y, g) = eval(alpha, path.rule == Rule::Trapezoid)?;
                let mid_grad = if path.rule == Rule::Midpoint && k > 0 {
                    eval((k as f64 - 0.5) / m as f64, true)?.1
                } else {
                    Vec::new()
                };
                Ok((y, g, mid_grad))
            })
            .collect::<Result<_>>()?;
        for (y, g, mid) in nodes {
            if let Some((py, pg)) = &prev {
                for u in 0..unit_count {
                    let dy = y[u] - py[u];
                    if dy == 0.0 {
                        continue;
                    }
                    for j in 0..t {
                        let i = u * t + j;
                        let grad = match path.rule {
                            Rule::Trapezoid => 0.5 * (g[i] + pg[i]),
                            Rule::Midpoint => mid[i],
                        };
                        cond[i] += grad * dy;
                    }
                }
            }
            prev = Some((y, g));
        }
    }

    let fx = model.trace(x.clone())?;
    let fb = model.trace(b.clone())?;
    let deltas = targets
        .iter()
        .map(|&tg| Ok(model.target_value(fx.features(), tg)? - model.target_value(fb.features(), tg)?))
        .collect::<Result<Vec<_>>>()?;
    split_maps(
        model.activation_shape(layer),
        &cond,
        targets,
        Method::Conductance,
        &baseline.content_hash(),
        &deltas,
    )
}

pub fn conductance(
    model: &Model,
    input: &Tensor,
    baseline: &Tensor,
    layer: usize,
    target: Target,
    path: PathConfig,
) -> Result<AttributionMap> {
    Ok(conductance_many(model, input, baseline, layer, &[target], path)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attrib::integrated_gradients;
    use crate::error::Error;
    use crate::net::{init, Layer, Model};

    fn sample() -> Tensor {
        let data: Vec<f32> = (0..720).map(|i| ((i * 11) % 37) as f32 / 37.0).collect();
        Tensor::from_vec(&[1, 48, 15], data).unwrap()
    }

    #[test]
    fn layer_zero_reproduces_ig() {
        let m = init::nisqa_like(8, 15, true);
        let (x, b) = (sample(), Tensor::zeros(&[1, 48, 15]).unwrap());
        for rule in [Rule::Trapezoid, Rule::Midpoint] {
            let path = PathConfig::new(16, rule);
            let c = conductance(&m, &x, &b, 0, Target::Feature(3), path).unwrap();
            let ig = integrated_gradients(&m, &x, &b, Target::Feature(3), path).unwrap();
            assert!(c.values.max_abs_diff(&ig.values).unwrap() < 1e-6, "{rule:?}");
        }
    }

    #[test]
    fn flatten_layer_equals_ig_per_cell() {
        let inner = init::linear_model(&[0.5, -1.0, 2.0, 0.25], 0.1);
        let dense = match &inner.layers()[0] {
            Layer::Dense(d) => d.clone(),
            _ => unreachable!(),
        };
        let m = Model::new(&[1, 2, 2], vec![Layer::Flatten, Layer::Dense(dense)], None).unwrap();
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let b = Tensor::zeros(&[1, 2, 2]).unwrap();
        let path = PathConfig::trapezoid(8);
        let c = conductance(&m, &x, &b, 1, Target::Feature(0), path).unwrap();
        let ig = integrated_gradients(&m, &x, &b, Target::Feature(0), path).unwrap();
        assert_eq!(c.values.shape(), &[4]);
        let ig_flat = ig.values.reshape(&[4]).unwrap();
        assert!(c.values.max_abs_diff(&ig_flat).unwrap() < 1e-6);
    }

    #[test]
    fn hidden_layer_sum_is_nearly_complete() {
        let m = init::nisqa_like(8, 15, true);
        let (x, b) = (sample(), Tensor::zeros(&[1, 48, 15]).unwrap());
        let delta = crate::attrib::difference_from_reference(&m, &x, &b, Target::Head).unwrap();
        for layer in [2, 5, 8] {
            let c = conductance(&m, &x, &b, layer, Target::Head, PathConfig::trapezoid(128)).unwrap();
            assert_eq!(c.values.shape(), m.activation_shape(layer));
            assert!(c.completeness_gap.unwrap() < 0.01 * delta.abs(), "layer {layer}");
        }
    }

    #[test]
    fn layer_out_of_range() {
        let m = init::linear_fixture();
        let x = Tensor::zeros(&[2]).unwrap();
        assert!(matches!(
            conductance(&m, &x, &x, 5, Target::Feature(0), PathConfig::default()),
            Err(Error::LayerOutOfRange { .. })
        ));
    }
}

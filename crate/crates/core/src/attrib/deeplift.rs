use super::{check_inputs, split_maps, AttributionMap, Method};
use crate::error::Result;
use crate::net::{Model, Target};
use crate::tensor::Tensor;

/// DeepLIFT with the Rescale rule for several targets.
///
/// Linear layers (conv, dense, pooling averages) pass multipliers through
/// their weights. ReLU uses `Δout / Δin`, falling back to the local gradient
/// when `|Δin| < RESCALE_EPSILON`. Max-pooling sends each window's whole
/// difference to the input's argmax cell, which keeps the sum exact but is
/// an approximation of the window's true dependence on its other cells.
pub fn deeplift_many(
    model: &Model,
    input: &Tensor,
    baseline: &Tensor,
    targets: &[Target],
) -> Result<Vec<AttributionMap>> {
    check_inputs(model, input, baseline, targets)?;
    let (x, b) = (input.to_f64(), baseline.to_f64());
    let t = targets.len();
    let trace = model.trace(x.clone())?;
    let reference = model.trace(b.clone())?;
    let seed = model.seed_cotangent(targets)?;
    let mut multipliers = model.backprop(&trace, Some(&reference), 0, seed, t);
    for ((chunk, &xi), &bi) in multipliers.chunks_exact_mut(t).zip(&x).zip(&b) {
        let d = xi - bi;
        for v in chunk {
            *v *= d;
        }
    }
    let deltas = targets
        .iter()
        .map(|&tg| {
            Ok(model.target_value(trace.features(), tg)?
                - model.target_value(reference.features(), tg)?)
        })
        .collect::<Result<Vec<_>>>()?;
    split_maps(
        input.shape(),
        &multipliers,
        targets,
        Method::DeepLift,
        &baseline.content_hash(),
        &deltas,
    )
}

pub fn deeplift_rescale(
    model: &Model,
    input: &Tensor,
    baseline: &Tensor,
    target: Target,
) -> Result<AttributionMap> {
    Ok(deeplift_many(model, input, baseline, &[target])?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init, Dense, Layer, Pool2d};
    use crate::validate::fixtures;

    fn t(v: &[f32]) -> Tensor {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn linear_fixture_matches_ig() {
        let m = init::linear_fixture();
        let map = deeplift_rescale(&m, &t(&[1.0, 1.0]), &t(&[0.0, 0.0]), Target::Feature(0)).unwrap();
        assert_eq!(map.values.data(), &[2.0, 3.0]);
        assert_eq!(map.completeness_gap, Some(0.0));
    }

    #[test]
    fn relu_fixture() {
        let m = fixtures::relu();
        let map = deeplift_rescale(&m, &t(&[2.0]), &t(&[0.0]), Target::Feature(0)).unwrap();
        assert_eq!(map.values.data(), &[2.0]);
        assert_eq!(map.completeness_gap, Some(0.0));
    }

    #[test]
    fn thresholding_is_continuous() {
        let m = fixtures::thresholding();
        let zero = t(&[0.0]);
        let above = deeplift_rescale(&m, &t(&[1.0 + 1e-6]), &zero, Target::Feature(0)).unwrap();
        let below = deeplift_rescale(&m, &t(&[1.0 - 1e-6]), &zero, Target::Feature(0)).unwrap();
        let jump = (above.values.data()[0] - below.values.data()[0]).abs();
        assert!(jump < 1e-5, "jump {jump}");

        let grad = |x: f32| {
            let (_, tr) = m.forward(&t(&[x])).unwrap();
            m.backward_input_grad(&tr, Target::Feature(0)).unwrap().data()[0]
        };
        assert_eq!(grad(1.0 + 1e-6), 1.0);
        assert_eq!(grad(1.0 - 1e-6), 0.0);
    }

    #[test]
    fn demo_model_is_complete() {
        let m = init::nisqa_like(21, 15, true);
        let data: Vec<f32> = (0..720).map(|i| ((i * 17) % 23) as f32 / 23.0).collect();
        let x = Tensor::from_vec(&[1, 48, 15], data).unwrap();
        let b = Tensor::zeros(&[1, 48, 15]).unwrap();
        let targets: Vec<Target> = (0..20).map(Target::Feature).chain([Target::Head]).collect();
        for map in deeplift_many(&m, &x, &b, &targets).unwrap() {
            assert!(map.completeness_gap.unwrap() < 1e-9);
        }
    }

    #[test]
    fn maxpool_routing_keeps_completeness() {
        let dense = Dense::new(
            4,
            1,
            Tensor::from_vec(&[1, 4], vec![1.0, -2.0, 0.5, 1.5]).unwrap(),
            Tensor::from_vec(&[1], vec![0.1]).unwrap(),
        )
        .unwrap();
        let m = crate::net::Model::new(
            &[1, 4, 4],
            vec![
                Layer::Relu,
                Layer::MaxPool2d(Pool2d { window: [2, 2], stride: [2, 2] }),
                Layer::Flatten,
                Layer::Dense(dense),
            ],
            None,
        )
        .unwrap();
        let x = Tensor::from_vec(&[1, 4, 4], (0..16).map(|i| (i as f32 * 0.7).sin()).collect()).unwrap();
        let b = Tensor::new(&[1, 4, 4], 0.2).unwrap();
        let map = deeplift_rescale(&m, &x, &b, Target::Feature(0)).unwrap();
        assert!(map.completeness_gap.unwrap() < 1e-12);
    }
}

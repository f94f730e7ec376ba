use rayon::prelude::*;

use super::{check_inputs, path_point_f64, split_maps, AttributionMap, Method, PathConfig, Rule};
use crate::error::{Error, Result};
use crate::net::{Model, Target};
use crate::tensor::Tensor;

/// Path nodes evaluated concurrently before their contributions are summed in order.
pub(super) const NODE_CHUNK: usize = 32;

/// Weighted sums of batched input gradients over path nodes.
///
/// Each entry of `weight_sets` holds one weight per alpha; the result has one
/// `[element][target]` buffer per weight set. Summation runs in ascending node
/// order whatever the worker count.
fn weighted_gradient_sums(
    model: &Model,
    x: &[f64],
    b: &[f64],
    seed: &[f64],
    t: usize,
    alphas: &[f64],
    weight_sets: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let len = x.len() * t;
    let mut sums = vec![vec![0.0f64; len]; weight_sets.len()];
    for start in (0..alphas.len()).step_by(NODE_CHUNK) {
        let end = (start + NODE_CHUNK).min(alphas.len());
        let grads: Vec<Vec<f64>> = (start..end)
            .into_par_iter()
            .map(|n| {
                let trace = model.trace(path_point_f64(x, b, alphas[n]))?;
                Ok(model.backprop(&trace, None, 0, seed.to_vec(), t))
            })
            .collect::<Result<_>>()?;
        for (n, g) in (start..end).zip(&grads) {
            for (sum, weights) in sums.iter_mut().zip(weight_sets) {
                let w = weights[n];
                if w == 0.0 {
                    continue;
                }
                for (s, &gi) in sum.iter_mut().zip(g) {
                    *s += w * gi;
                }
            }
        }
    }
    Ok(sums)
}

fn target_deltas(model: &Model, x: &[f64], b: &[f64], targets: &[Target]) -> Result<Vec<f64>> {
    let fx = model.trace(x.to_vec())?;
    let fb = model.trace(b.to_vec())?;
    targets
        .iter()
        .map(|&t| Ok(model.target_value(fx.features(), t)? - model.target_value(fb.features(), t)?))
        .collect()
}

fn scale_by_delta(sum: &mut [f64], x: &[f64], b: &[f64], t: usize) {
    for ((chunk, &xi), &bi) in sum.chunks_exact_mut(t).zip(x).zip(b) {
        let d = xi - bi;
        for v in chunk {
            *v *= d;
        }
    }
}

/// Integrated gradients for several targets sharing the same path evaluations.
pub fn integrated_gradients_many(
    model: &Model,
    input: &Tensor,
    baseline: &Tensor,
    targets: &[Target],
    path: PathConfig,
) -> Result<Vec<AttributionMap>> {
    path.validate()?;
    check_inputs(model, input, baseline, targets)?;
    let (x, b) = (input.to_f64(), baseline.to_f64());
    let t = targets.len();
    let seed = model.seed_cotangent(targets)?;
    let (alphas, weights): (Vec<f64>, Vec<f64>) = path.nodes().into_iter().unzip();
    let mut sums = weighted_gradient_sums(model, &x, &b, &seed, t, &alphas, &[weights])?;
    let mut sum = sums.pop().unwrap();
    scale_by_delta(&mut sum, &x, &b, t);
    let deltas = target_deltas(model, &x, &b, targets)?;
    split_maps(input.shape(), &sum, targets, Method::Ig, &baseline.content_hash(), &deltas)
}

/// Integrated gradients of one target along the straight path from `baseline` to `input`.
pub fn integrated_gradients(
    model: &Model,
    input: &Tensor,
    baseline: &Tensor,
    target: Target,
    path: PathConfig,
) -> Result<AttributionMap> {
    Ok(integrated_gradients_many(model, input, baseline, &[target], path)?.remove(0))
}

/// Trapezoid IG at `steps` and `2 * steps` from one set of `2 * steps + 1` gradient evaluations.
///
/// The coarse grid is the even-indexed subset of the fine grid, so both maps
/// come from identical gradients and their gaps are directly comparable.
pub fn integrated_gradients_refined(
    model: &Model,
    input: &Tensor,
    baseline: &Tensor,
    target: Target,
    steps: usize,
) -> Result<(AttributionMap, AttributionMap)> {
    PathConfig::trapezoid(steps).validate()?;
    check_inputs(model, input, baseline, &[target])?;
    let (x, b) = (input.to_f64(), baseline.to_f64());
    let fine = PathConfig::new(2 * steps, Rule::Trapezoid).nodes();
    let coarse = PathConfig::trapezoid(steps).nodes();
    let alphas: Vec<f64> = fine.iter().map(|n| n.0).collect();
    let fine_w: Vec<f64> = fine.iter().map(|n| n.1).collect();
    let mut coarse_w = vec![0.0; fine.len()];
    for (j, &(alpha, w)) in coarse.iter().enumerate() {
        if alphas[2 * j] != alpha {
            return Err(Error::Invariant("coarse grid is not nested in fine grid".into()));
        }
        coarse_w[2 * j] = w;
    }
    let seed = model.seed_cotangent(&[target])?;
    let sums = weighted_gradient_sums(model, &x, &b, &seed, 1, &alphas, &[coarse_w, fine_w])?;
    let deltas = target_deltas(model, &x, &b, &[target])?;
    let id = baseline.content_hash();
    let mut maps = sums.into_iter().map(|mut sum| {
        scale_by_delta(&mut sum, &x, &b, 1);
        split_maps(input.shape(), &sum, &[target], Method::Ig, &id, &deltas).map(|mut v| v.remove(0))
    });
    let coarse = maps.next().unwrap()?;
    let fine = maps.next().unwrap()?;
    Ok((coarse, fine))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attrib::completeness_gap;
    use crate::net::init;

    fn t(v: &[f32]) -> Tensor {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn linear_fixture_attributions() {
        let m = init::linear_fixture();
        let map = integrated_gradients(&m, &t(&[1.0, 1.0]), &t(&[0.0, 0.0]), Target::Feature(0), PathConfig::default()).unwrap();
        assert_eq!(map.values.data(), &[2.0, 3.0]);
        assert!(map.completeness_gap.unwrap() < 1e-6);
        assert_eq!(map.method, Method::Ig);
        assert!(completeness_gap(&map, &m, &t(&[1.0, 1.0]), &t(&[0.0, 0.0])).unwrap() < 1e-6);
    }

    #[test]
    fn input_equal_to_baseline_gives_zero() {
        let m = init::nisqa_like(2, 15, true);
        let x = Tensor::new(&[1, 48, 15], 0.3).unwrap();
        let map = integrated_gradients(&m, &x, &x, Target::Head, PathConfig::trapezoid(8)).unwrap();
        assert!(map.values.data().iter().all(|&v| v == 0.0));
        assert_eq!(map.completeness_gap, Some(0.0));
    }

    #[test]
    fn saturated_inputs_still_receive_credit() {
        let m = crate::validate::fixtures::saturation();
        let map = integrated_gradients(&m, &t(&[1.0, 1.0]), &t(&[0.0, 0.0]), Target::Feature(0), PathConfig::trapezoid(512)).unwrap();
        let v = map.values.data();
        assert!(v[0] > 0.4 && v[1] > 0.4, "{v:?}");
        // Both alpha = 0 (outer ReLU at exactly 0) and alpha = 0.5 (inner ReLU at 0)
        // are nodes with zero gradient, so the trapezoid loses half a step at each.
        assert!((map.completeness_gap.unwrap() - 2.0 / 512.0).abs() < 1e-9, "{:?}", map.completeness_gap);
    }

    #[test]
    fn errors() {
        let m = init::linear_fixture();
        let x = t(&[1.0, 1.0]);
        assert!(matches!(
            integrated_gradients(&m, &x, &t(&[0.0]), Target::Feature(0), PathConfig::default()),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            integrated_gradients(&m, &x, &x, Target::Feature(4), PathConfig::default()),
            Err(Error::TargetOutOfRange(_))
        ));
    }

    #[test]
    fn refined_coarse_map_equals_direct_computation() {
        let m = init::nisqa_like(4, 15, true);
        let data: Vec<f32> = (0..720).map(|i| ((i * 13) % 29) as f32 / 29.0).collect();
        let x = Tensor::from_vec(&[1, 48, 15], data).unwrap();
        let b = Tensor::zeros(&[1, 48, 15]).unwrap();
        let (coarse, fine) = integrated_gradients_refined(&m, &x, &b, Target::Head, 16).unwrap();
        let direct16 = integrated_gradients(&m, &x, &b, Target::Head, PathConfig::trapezoid(16)).unwrap();
        let direct32 = integrated_gradients(&m, &x, &b, Target::Head, PathConfig::trapezoid(32)).unwrap();
        assert!(coarse.values.max_abs_diff(&direct16.values).unwrap() < 1e-6);
        assert!(fine.values.max_abs_diff(&direct32.values).unwrap() < 1e-6);
    }

    #[test]
    fn many_targets_match_single_target_runs() {
        let m = init::nisqa_like(6, 15, true);
        let data: Vec<f32> = (0..720).map(|i| ((i * 7) % 31) as f32 / 31.0).collect();
        let x = Tensor::from_vec(&[1, 48, 15], data).unwrap();
        let b = Tensor::zeros(&[1, 48, 15]).unwrap();
        let targets = [Target::Feature(0), Target::Feature(11), Target::Head];
        let many = integrated_gradients_many(&m, &x, &b, &targets, PathConfig::trapezoid(8)).unwrap();
        for (map, &target) in many.iter().zip(&targets) {
            let one = integrated_gradients(&m, &x, &b, target, PathConfig::trapezoid(8)).unwrap();
            assert!(map.values.max_abs_diff(&one.values).unwrap() < 1e-6);
        }
    }
}

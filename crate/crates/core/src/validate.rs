//! Oracles and axiom checks that do not share code with the methods they test.

use rayon::prelude::*;
use serde::Serialize;

use crate::attrib::{
    conductance, deeplift_many, deeplift_rescale, integrated_gradients, integrated_gradients_many,
    integrated_gradients_refined, AttributionMap, Method, PathConfig, Rule,
};
use crate::error::{Error, Result};
use crate::net::init::Lcg;
use crate::net::{Dense, Layer, Model, Target};
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const DEFAULT_H: f64 = 1e-3;

/// Small scalar networks with known attribution behaviour.
pub mod fixtures {
    use super::*;

    pub(crate) fn dense(rows: &[&[f32]], bias: &[f32]) -> Dense {
        let (out_dim, in_dim) = (rows.len(), rows[0].len());
        let w: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Dense::new(
            in_dim,
            out_dim,
            Tensor::from_vec(&[out_dim, in_dim], w).expect("finite"),
            Tensor::from_vec(&[out_dim], bias.to_vec()).expect("finite"),
        )
        .expect("consistent fixture shapes")
    }

    fn build(name: &str, input: usize, layers: Vec<Layer>) -> Model {
        Model::new(&[input], layers, None).expect("valid fixture").with_name(name)
    }

    /// `relu(x)`.
    pub fn relu() -> Model {
        build("relu", 1, vec![Layer::Dense(dense(&[&[1.0]], &[0.0])), Layer::Relu])
    }

    /// `relu(x - 1)`: the gradient jumps from 0 to 1 at `x = 1`.
    pub fn thresholding() -> Model {
        build("thresholding", 1, vec![Layer::Dense(dense(&[&[1.0]], &[-1.0])), Layer::Relu])
    }

    /// `relu(1 - relu(1 - x0 - x1))`: flat (zero gradient) once `x0 + x1 >= 1`.
    pub fn saturation() -> Model {
        build(
            "saturation",
            2,
            vec![
                Layer::Dense(dense(&[&[-1.0, -1.0]], &[1.0])),
                Layer::Relu,
                Layer::Dense(dense(&[&[-1.0]], &[1.0])),
                Layer::Relu,
            ],
        )
    }

    /// Input 1 has no outgoing weight and hidden unit 2 (activation 2) none either.
    pub fn dead_input() -> Model {
        build(
            "dead-input",
            3,
            vec![
                Layer::Dense(dense(
                    &[&[1.0, 0.0, -2.0], &[0.5, 0.0, 1.0], &[0.7, 0.0, 0.3]],
                    &[0.1, 0.2, 0.0],
                )),
                Layer::Relu,
                Layer::Dense(dense(&[&[1.0, -1.5, 0.0]], &[0.05])),
            ],
        )
    }

    pub const DEAD_INPUT: usize = 1;
    pub const DEAD_HIDDEN_LAYER: usize = 2;
    pub const DEAD_HIDDEN_UNIT: usize = 2;
}

fn target_of(model: &Model, values: &[f64], target: Target) -> Result<f64> {
    let trace = model.trace(values.to_vec())?;
    model.target_value(trace.features(), target)
}

/// Central differences `(F(x + h e_i) - F(x - h e_i)) / 2h` using forward passes only.
pub fn finite_diff_gradient(model: &Model, input: &Tensor, target: Target, h: f64) -> Result<Tensor> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Domain(format!("finite-difference step must be > 0, got {h}")));
    }
    model.check_target(target)?;
    let x = input.to_f64();
    let grad = (0..x.len())
        .into_par_iter()
        .map(|i| {
            let mut p = x.clone();
            p[i] = x[i] + h;
            let up = target_of(model, &p, target)?;
            p[i] = x[i] - h;
            let down = target_of(model, &p, target)?;
            Ok((up - down) / (2.0 * h))
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_f64(input.shape(), &grad)
}

/// Cells whose ±h perturbation keeps every ReLU state and max-pool choice.
///
/// The network is affine between such points, so central differences are
/// exact there; elsewhere the difference quotient straddles a kink.
pub fn kink_free_cells(model: &Model, input: &Tensor, h: f64) -> Result<Vec<bool>> {
    let x = input.to_f64();
    let base = model.switching_pattern(&model.trace(x.clone())?);
    (0..x.len())
        .into_par_iter()
        .map(|i| {
            let mut p = x.clone();
            for v in [x[i] + h, x[i] - h] {
                p[i] = v;
                if model.switching_pattern(&model.trace(p.clone())?) != base {
                    return Ok(false);
                }
            }
            Ok(true)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientCheck {
    pub max_rel_error: f64,
    pub compared: usize,
    pub excluded_kinks: usize,
    pub below_floor: usize,
}

/// Compares the analytic input gradient with central differences.
///
/// Cells with |grad| <= `floor` or at a kink are skipped.
pub fn gradient_check(model: &Model, input: &Tensor, target: Target, h: f64, floor: f64) -> Result<GradientCheck> {
    let (_, trace) = model.forward(input)?;
    let analytic = model.backward_input_grad(&trace, target)?;
    let numeric = finite_diff_gradient(model, input, target, h)?;
    let smooth = kink_free_cells(model, input, h)?;
    let mut out = GradientCheck {
        max_rel_error: 0.0,
        compared: 0,
        excluded_kinks: 0,
        below_floor: 0,
    };
    for ((&a, &n), &ok) in analytic.data().iter().zip(numeric.data()).zip(&smooth) {
        let (a, n) = (f64::from(a), f64::from(n));
        if !ok {
            out.excluded_kinks += 1;
        } else if a.abs() <= floor {
            out.below_floor += 1;
        } else {
            out.compared += 1;
            out.max_rel_error = out.max_rel_error.max((a - n).abs() / a.abs());
        }
    }
    Ok(out)
}

/// `w_i (x_i - x'_i)`, the IG and DeepLIFT attribution of a linear model.
pub fn linear_oracle(weights: &[f32], bias: f32, input: &Tensor, baseline: &Tensor) -> Result<AttributionMap> {
    input.ensure_same_shape(baseline)?;
    if weights.len() != input.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} input cells",
            weights.len(),
            input.len()
        )));
    }
    let _ = bias;
    let values: Vec<f64> = weights
        .iter()
        .zip(input.data().iter().zip(baseline.data()))
        .map(|(&w, (&x, &b))| f64::from(w) * (f64::from(x) - f64::from(b)))
        .collect();
    Ok(AttributionMap {
        values: Tensor::from_f64(input.shape(), &values)?,
        method: Method::Ig,
        target: Target::Feature(0),
        baseline_id: Some(baseline.content_hash()),
        completeness_gap: Some(0.0),
    })
}

/// Inverse of a square row-major matrix by Gauss-Jordan with partial pivoting.
fn invert(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut m = a.to_vec();
    let mut inv: Vec<f64> = (0..n * n).map(|i| f64::from(u8::from(i / n == i % n))).collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&r, &s| m[r * n + col].abs().total_cmp(&m[s * n + col].abs()))
            .expect("non-empty range");
        if m[pivot * n + col].abs() < 1e-12 {
            return Err(Error::Invariant("singular factor matrix".into()));
        }
        for k in 0..n {
            m.swap(col * n + k, pivot * n + k);
            inv.swap(col * n + k, pivot * n + k);
        }
        let p = m[col * n + col];
        for k in 0..n {
            m[col * n + k] /= p;
            inv[col * n + k] /= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r * n + col];
            if f == 0.0 {
                continue;
            }
            for k in 0..n {
                m[r * n + k] -= f * m[col * n + k];
                inv[r * n + k] -= f * inv[col * n + k];
            }
        }
    }
    Ok(inv)
}

const PAIR_INPUTS: usize = 8;
const PAIR_HIDDEN: usize = 6;
const PAIR_OUTPUTS: usize = 3;

/// Two models computing the same function with different internals.
///
/// A is `V relu(W x + c)`. B first applies a random invertible `W1` and
/// then `W2 = W W1^-1`, so `W2 W1 = W` up to float rounding.
pub fn make_equivalent_pair(seed: u64) -> (Model, Model) {
    let mut rng = Lcg::new(seed);
    let (n, h, k) = (PAIR_INPUTS, PAIR_HIDDEN, PAIR_OUTPUTS);
    let w = rng.tensor(&[h, n], 1.0);
    let c = rng.tensor(&[h], 0.3);
    let v = rng.tensor(&[k, h], 1.0);
    let d = rng.tensor(&[k], 0.3);
    // Diagonally dominant, so well conditioned.
    let w1: Vec<f32> = (0..n * n)
        .map(|i| rng.uniform(-0.3, 0.3) + if i / n == i % n { 1.5 } else { 0.0 })
        .collect();
    let w1_inv = invert(&w1.iter().map(|&x| f64::from(x)).collect::<Vec<_>>(), n).expect("dominant diagonal");
    let mut w2 = vec![0.0f64; h * n];
    for r in 0..h {
        for col in 0..n {
            w2[r * n + col] = (0..n)
                .map(|j| f64::from(w.data()[r * n + j]) * w1_inv[j * n + col])
                .sum();
        }
    }
    let mk = |in_dim, out_dim, wt: Tensor, b: Tensor| Dense::new(in_dim, out_dim, wt, b).expect("consistent");
    let zero_n = Tensor::zeros(&[n]).expect("shape");
    let a = Model::new(
        &[n],
        vec![
            Layer::Dense(mk(n, h, w.clone(), c.clone())),
            Layer::Relu,
            Layer::Dense(mk(h, k, v.clone(), d.clone())),
        ],
        None,
    )
    .expect("valid")
    .with_name("pair-a")
    .with_seed(Some(seed));
    let b = Model::new(
        &[n],
        vec![
            Layer::Dense(mk(n, n, Tensor::from_vec(&[n, n], w1).expect("finite"), zero_n)),
            Layer::Dense(mk(n, h, Tensor::from_f64(&[h, n], &w2).expect("finite"), c)),
            Layer::Relu,
            Layer::Dense(mk(h, k, v, d)),
        ],
        None,
    )
    .expect("valid")
    .with_name("pair-b")
    .with_seed(Some(seed));
    (a, b)
}

/// Seeded uniform probes in `[-1, 1]` for a model's input shape.
pub fn random_probes(shape: &[usize], count: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = Lcg::new(seed);
    (0..count).map(|_| rng.tensor(shape, 1.0)).collect()
}

/// Largest absolute difference of any output over the probes.
pub fn max_output_discrepancy(a: &Model, b: &Model, probes: &[Tensor]) -> Result<f64> {
    let mut worst = 0.0f64;
    for p in probes {
        let (fa, _) = a.forward(p)?;
        let (fb, _) = b.forward(p)?;
        for (x, y) in fa.iter().zip(&fb) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    /// Not expected to hold for this method.
    Exempt,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AxiomCheck {
    pub axiom: String,
    pub method: String,
    pub subject: String,
    pub status: Status,
    pub measured: f64,
    pub limit: f64,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AxiomReport {
    pub model: String,
    pub steps: usize,
    pub rule: Rule,
    pub seed: u64,
    pub checks: Vec<AxiomCheck>,
    pub all_pass: bool,
}

impl AxiomReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }

    pub fn failures(&self) -> impl Iterator<Item = &AxiomCheck> {
        self.checks.iter().filter(|c| c.status == Status::Fail)
    }
}

fn check(axiom: &str, method: &str, subject: &str, pass: bool, measured: f64, limit: f64, note: impl Into<String>) -> AxiomCheck {
    AxiomCheck {
        axiom: axiom.into(),
        method: method.into(),
        subject: subject.into(),
        status: if pass { Status::Pass } else { Status::Fail },
        measured,
        limit,
        note: note.into(),
    }
}

/// Every output of the model: all features, then the head if present.
pub fn all_targets(model: &Model) -> Vec<Target> {
    let mut t: Vec<Target> = (0..model.output_dim()).map(Target::Feature).collect();
    if model.head().is_some() {
        t.push(Target::Head);
    }
    t
}

fn scalar(v: f32) -> Tensor {
    Tensor::from_vec(&[1], vec![v]).expect("finite")
}

/// Completeness, refinement, sensitivity and invariance checks on `model`
/// plus the built-in fixtures. Failures are entries, not errors.
pub fn axiom_report(model: &Model, input: &Tensor, baseline: &Tensor, path: PathConfig, seed: u64) -> Result<AxiomReport> {
    path.validate()?;
    let targets = all_targets(model);
    let subject = model.name().to_string();
    let mut checks = Vec::new();

    // Completeness on the given model; `gap` is the stored (pre-rounding) gap.
    let deltas: Vec<f64> = targets
        .iter()
        .map(|&t| crate::attrib::difference_from_reference(model, input, baseline, t))
        .collect::<Result<_>>()?;
    let ig = integrated_gradients_many(model, input, baseline, &targets, path)?;
    let dl = deeplift_many(model, input, baseline, &targets)?;
    let worst = |maps: &[AttributionMap], tol: &dyn Fn(f64) -> f64| {
        maps.iter().zip(&deltas).fold((true, 0.0f64, f64::INFINITY), |(ok, m, l), (map, &d)| {
            let gap = map.completeness_gap.unwrap_or(f64::INFINITY);
            (ok && gap <= tol(d), m.max(gap), l.min(tol(d)))
        })
    };
    let (ok, gap, limit) = worst(&ig, &|d: f64| 0.01 * d.abs() + 1e-9);
    checks.push(check("completeness", "ig", &subject, ok, gap, limit, "gap <= 1% of |delta| for every target"));
    let (ok, gap, limit) = worst(&dl, &|d: f64| 1e-5 * d.abs().max(1.0));
    checks.push(check("completeness", "deeplift", &subject, ok, gap, limit, "gap <= 1e-5 max(1, |delta|) for every target"));

    // Refinement: doubling the step count should not worsen the gap.
    let mut worst_increase = f64::NEG_INFINITY;
    for &t in &targets {
        let (coarse, fine) = match path.rule {
            Rule::Trapezoid => integrated_gradients_refined(model, input, baseline, t, path.steps)?,
            Rule::Midpoint => (
                integrated_gradients(model, input, baseline, t, path)?,
                integrated_gradients(model, input, baseline, t, PathConfig::new(2 * path.steps, Rule::Midpoint))?,
            ),
        };
        let inc = fine.completeness_gap.unwrap_or(f64::INFINITY) - coarse.completeness_gap.unwrap_or(0.0);
        worst_increase = worst_increase.max(inc);
    }
    checks.push(check(
        "refinement",
        "ig",
        &subject,
        worst_increase <= 1e-7,
        worst_increase,
        1e-7,
        format!("gap(2m) - gap(m) at m = {}", path.steps),
    ));

    // Cells equal to the baseline cannot receive credit.
    let same: Vec<usize> = (0..input.len()).filter(|&i| input.data()[i] == baseline.data()[i]).collect();
    for (name, maps) in [("ig", &ig), ("deeplift", &dl)] {
        let m = maps
            .iter()
            .flat_map(|map| same.iter().map(|&i| f64::from(map.values.data()[i]).abs()))
            .fold(0.0, f64::max);
        checks.push(check("sensitivity-b", name, &subject, m == 0.0, m, 0.0, format!("{} cells equal to the baseline", same.len())));
    }

    // Structurally dead input and hidden unit.
    let dead = fixtures::dead_input();
    let dx = Tensor::from_vec(&[3], vec![0.8, -1.3, 0.4])?;
    let db = Tensor::from_vec(&[3], vec![-0.2, 0.6, 0.1])?;
    let dig = integrated_gradients(&dead, &dx, &db, Target::Feature(0), path)?;
    let ddl = deeplift_rescale(&dead, &dx, &db, Target::Feature(0))?;
    let dc0 = conductance(&dead, &dx, &db, 0, Target::Feature(0), path)?;
    let dch = conductance(&dead, &dx, &db, fixtures::DEAD_HIDDEN_LAYER, Target::Feature(0), path)?;
    for (name, v) in [
        ("ig", dig.values.data()[fixtures::DEAD_INPUT]),
        ("deeplift", ddl.values.data()[fixtures::DEAD_INPUT]),
        ("conductance", dc0.values.data()[fixtures::DEAD_INPUT]),
        ("conductance-hidden", dch.values.data()[fixtures::DEAD_HIDDEN_UNIT]),
    ] {
        let m = f64::from(v).abs();
        checks.push(check("sensitivity-b", name, "dead-input", m == 0.0, m, 0.0, "unit with no path to the output"));
    }

    // A single differing input that changes the output gets credit.
    let relu = fixtures::relu();
    for (name, v) in [
        ("ig", integrated_gradients(&relu, &scalar(2.0), &scalar(0.0), Target::Feature(0), path)?),
        ("deeplift", deeplift_rescale(&relu, &scalar(2.0), &scalar(0.0), Target::Feature(0))?),
    ] {
        let a = f64::from(v.values.data()[0]);
        checks.push(check("sensitivity-a", name, "relu", a != 0.0, a, 0.0, "f(2) - f(0) = 2"));
    }

    // Saturation: IG still credits both inputs where the gradient is zero.
    let sat = fixtures::saturation();
    let ones = Tensor::from_vec(&[2], vec![1.0, 1.0])?;
    let zeros = Tensor::zeros(&[2])?;
    let sat_ig = integrated_gradients(&sat, &ones, &zeros, Target::Feature(0), path)?;
    let min_credit = sat_ig.values.data().iter().map(|&v| f64::from(v)).fold(f64::INFINITY, f64::min);
    let (_, tr) = sat.forward(&ones)?;
    let g = sat.backward_input_grad(&tr, Target::Feature(0))?;
    checks.push(check(
        "saturation",
        "ig",
        "saturation",
        min_credit > 0.0,
        min_credit,
        0.0,
        format!("plain gradient at the input is {:?}", g.data()),
    ));

    // Thresholding: attribution continuous across the kink.
    let thr = fixtures::thresholding();
    let zero = scalar(0.0);
    let jump = |f: &dyn Fn(&Tensor) -> Result<AttributionMap>| -> Result<f64> {
        let up = f(&scalar(1.0 + 1e-6))?;
        let down = f(&scalar(1.0 - 1e-6))?;
        Ok(f64::from((up.values.data()[0] - down.values.data()[0]).abs()))
    };
    let j_dl = jump(&|x| deeplift_rescale(&thr, x, &zero, Target::Feature(0)))?;
    checks.push(check("thresholding", "deeplift", "thresholding", j_dl < 1e-5, j_dl, 1e-5, "x = 1 +- 1e-6; the gradient jumps by 1"));

    // Implementation invariance on a functionally equivalent pair.
    let (pa, pb) = make_equivalent_pair(seed);
    let probes = random_probes(pa.input_shape(), 4, seed ^ 0x5eed);
    let base = Tensor::zeros(pa.input_shape())?;
    let pair_targets = all_targets(&pa);
    let (mut ig_diff, mut dl_diff) = (0.0f64, 0.0f64);
    for p in &probes {
        let ia = integrated_gradients_many(&pa, p, &base, &pair_targets, path)?;
        let ib = integrated_gradients_many(&pb, p, &base, &pair_targets, path)?;
        let da = deeplift_many(&pa, p, &base, &pair_targets)?;
        let db = deeplift_many(&pb, p, &base, &pair_targets)?;
        for (x, y) in ia.iter().zip(&ib) {
            ig_diff = ig_diff.max(x.values.max_abs_diff(&y.values)?);
        }
        for (x, y) in da.iter().zip(&db) {
            dl_diff = dl_diff.max(x.values.max_abs_diff(&y.values)?);
        }
    }
    checks.push(check("invariance", "ig", "equivalent-pair", ig_diff < 1e-5, ig_diff, 1e-5, "max-abs difference of maps"));
    checks.push(AxiomCheck {
        status: Status::Exempt,
        ..check("invariance", "deeplift", "equivalent-pair", true, dl_diff, 1e-5, "rescale multipliers depend on the layer structure")
    });

    let all_pass = checks.iter().all(|c| c.status != Status::Fail);
    Ok(AxiomReport {
        model: subject,
        steps: path.steps,
        rule: path.rule,
        seed,
        checks,
        all_pass,
    })
}

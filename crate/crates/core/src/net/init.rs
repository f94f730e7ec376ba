//! Deterministic fixture models.
//!
//! The generator is a plain 64-bit linear congruential generator so that
//! every platform produces byte-identical weight blobs for the same seed.

use super::{Conv2d, Dense, Layer, Model, Pool2d};
use crate::tensor::Tensor;

/// Number of feature channels of the demo architecture.
pub const DEMO_FEATURES: usize = 20;

/// Knuth MMIX linear congruential generator.
#[derive(Debug, Clone)]
pub struct Lcg {
    state: u64,
}

impl Lcg {
    const MUL: u64 = 6364136223846793005;
    const INC: u64 = 1442695040888963407;

    pub fn new(seed: u64) -> Self {
        let mut lcg = Self {
            state: seed ^ 0x853c_49e6_748f_ea9b,
        };
        lcg.next_u64();
        lcg
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_mul(Self::MUL).wrapping_add(Self::INC);
        self.state
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f32 {
        (lo + (hi - lo) * self.next_f64()) as f32
    }

    pub fn tensor(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.uniform(-bound, bound)).collect();
        Tensor::from_vec(shape, data).expect("uniform values are finite")
    }
}

const BIAS_BOUND: f64 = 0.05;

fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

pub fn random_conv(rng: &mut Lcg, cin: usize, cout: usize, k: usize) -> Conv2d {
    let weight = rng.tensor(&[cout, cin, k, k], he_bound(cin * k * k));
    let bias = rng.tensor(&[cout], BIAS_BOUND);
    Conv2d::new(cin, cout, [k, k], [1, 1], [k / 2, k / 2], weight, bias)
        .expect("shapes are consistent by construction")
}

pub fn random_dense(rng: &mut Lcg, in_dim: usize, out_dim: usize) -> Dense {
    let weight = rng.tensor(&[out_dim, in_dim], he_bound(in_dim));
    let bias = rng.tensor(&[out_dim], BIAS_BOUND);
    Dense::new(in_dim, out_dim, weight, bias).expect("shapes are consistent by construction")
}

/// The demo feature extractor: three conv/ReLU blocks with average pooling,
/// global average pooling to 20 features, and an optional dense quality head.
///
/// Input is `[1, 48, width]`; width must be at least 4 for the two 2x2 pools.
pub fn nisqa_like(seed: u64, width: usize, with_head: bool) -> Model {
    let mut rng = Lcg::new(seed);
    let pool = Pool2d {
        window: [2, 2],
        stride: [2, 2],
    };
    let layers = vec![
        Layer::Conv2d(random_conv(&mut rng, 1, 8, 3)),
        Layer::Relu,
        Layer::AvgPool2d(pool),
        Layer::Conv2d(random_conv(&mut rng, 8, 16, 3)),
        Layer::Relu,
        Layer::AvgPool2d(pool),
        Layer::Conv2d(random_conv(&mut rng, 16, DEMO_FEATURES, 3)),
        Layer::Relu,
        Layer::GlobalAvgPool,
    ];
    let head = with_head.then(|| random_dense(&mut rng, DEMO_FEATURES, 1));
    Model::new(&[1, 48, width], layers, head)
        .expect("demo architecture is valid for width >= 4")
        .with_name("nisqa-like")
        .with_seed(Some(seed))
}

/// `f(x) = 2 x0 + 3 x1` as a single dense 2 -> 1 layer.
pub fn linear_fixture() -> Model {
    linear_model(&[2.0, 3.0], 0.0)
}

/// `f(x) = w . x + b` over a rank-1 input.
pub fn linear_model(weights: &[f32], bias: f32) -> Model {
    let n = weights.len();
    let dense = Dense::new(
        n,
        1,
        Tensor::from_vec(&[1, n], weights.to_vec()).expect("finite weights"),
        Tensor::from_vec(&[1], vec![bias]).expect("finite bias"),
    )
    .expect("consistent shapes");
    Model::new(&[n], vec![Layer::Dense(dense)], None)
        .expect("valid linear model")
        .with_name("linear")
}

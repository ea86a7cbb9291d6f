//! Central finite-difference checks of the analytic gradients.
//!
//! The finite-difference side only ever evaluates losses; it never looks at
//! the analytic gradient code path it is checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attribute_scorer::{scorer_loss, AttributeScorer};
use crate::error::Result;
use crate::label_embedding::{cross_entropy_loss, BilinearMap, CrossEntropyOptions, JointModel};
use crate::tensor::Matrix;
use crate::transform_net::{ranking_loss, Margin, Reduction, TransformNet, DEFAULT_LEAKY_SLOPE};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Anything exposing its parameters as an ordered list of blocks.
pub trait Parameters: Clone {
    fn blocks(&self) -> Vec<&Matrix>;
    fn blocks_mut(&mut self) -> Vec<&mut Matrix>;
}

impl Parameters for TransformNet {
    fn blocks(&self) -> Vec<&Matrix> {
        self.params()
    }
    fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        self.params_mut()
    }
}

impl Parameters for JointModel {
    fn blocks(&self) -> Vec<&Matrix> {
        self.params()
    }
    fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        self.params_mut()
    }
}

impl Parameters for AttributeScorer {
    fn blocks(&self) -> Vec<&Matrix> {
        self.params()
    }
    fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        self.params_mut()
    }
}

/// Central differences of `loss` with respect to every parameter entry.
pub fn numerical_gradient<P: Parameters>(
    params: &P,
    step: f64,
    loss: impl Fn(&P) -> Result<f64>,
) -> Result<Vec<Matrix>> {
    let mut probe = params.clone();
    let mut out = Vec::new();
    let n_blocks = params.blocks().len();
    for b in 0..n_blocks {
        let (rows, cols) = params.blocks()[b].shape();
        let mut grad = Matrix::zeros(rows, cols);
        for k in 0..rows * cols {
            let original = probe.blocks()[b].as_slice()[k];
            probe.blocks_mut()[b].as_mut_slice()[k] = original + step;
            let plus = loss(&probe)?;
            probe.blocks_mut()[b].as_mut_slice()[k] = original - step;
            let minus = loss(&probe)?;
            probe.blocks_mut()[b].as_mut_slice()[k] = original;
            grad.as_mut_slice()[k] = (plus - minus) / (2.0 * step);
        }
        out.push(grad);
    }
    Ok(out)
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)` over one block; blocks whose gradients are
/// both below `1e-10` in norm compare by absolute difference.
pub fn block_relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let diff: f64 = analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.l2_norm_sq().sqrt().max(numeric.l2_norm_sq().sqrt());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Worst block error between analytic and numerical gradients.
pub fn compare<P: Parameters>(
    params: &P,
    analytic: &P,
    step: f64,
    loss: impl Fn(&P) -> Result<f64>,
) -> Result<f64> {
    let numeric = numerical_gradient(params, step, loss)?;
    Ok(analytic
        .blocks()
        .iter()
        .zip(&numeric)
        .map(|(a, n)| block_relative_error(a, n))
        .fold(0.0, f64::max))
}

/// Shape of one randomized check instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CheckShape {
    pub word_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub visual_dim: usize,
    pub classes: usize,
    pub samples: usize,
}

pub const DEFAULT_SHAPES: [CheckShape; 3] = [
    CheckShape {
        word_dim: 4,
        hidden: 5,
        out_dim: 3,
        visual_dim: 6,
        classes: 3,
        samples: 4,
    },
    CheckShape {
        word_dim: 6,
        hidden: 8,
        out_dim: 4,
        visual_dim: 5,
        classes: 4,
        samples: 6,
    },
    CheckShape {
        word_dim: 3,
        hidden: 10,
        out_dim: 6,
        visual_dim: 7,
        classes: 5,
        samples: 3,
    },
];

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub cases: usize,
    pub worst_ranking: f64,
    pub worst_cross_entropy: f64,
    pub worst_attribute_scorer: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.worst_ranking
            .max(self.worst_cross_entropy)
            .max(self.worst_attribute_scorer)
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Matrix::new(rows, cols, data).expect("finite by construction")
}

fn random_net(rng: &mut ChaCha8Rng, shape: &CheckShape) -> Result<TransformNet> {
    let mut net = TransformNet::init(
        &[shape.word_dim, shape.hidden, shape.hidden, shape.out_dim],
        DEFAULT_LEAKY_SLOPE,
        rng,
    )?;
    // non-zero biases so the bias blocks are exercised away from the origin
    for layer_bias in net.params_mut().into_iter().skip(1).step_by(2) {
        for v in layer_bias.as_mut_slice() {
            *v = rng.gen_range(-0.3..0.3);
        }
    }
    Ok(net)
}

fn random_labels(rng: &mut ChaCha8Rng, shape: &CheckShape) -> Vec<usize> {
    (0..shape.samples).map(|i| if i < shape.classes { i } else { rng.gen_range(0..shape.classes) }).collect()
}

/// Ranking-loss check on one random instance.
pub fn check_ranking(seed: u64, shape: &CheckShape, step: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = random_net(&mut rng, shape)?;
    let pooled = random_matrix(&mut rng, shape.samples, shape.word_dim, 1.5);
    let classes = random_matrix(&mut rng, shape.classes, shape.word_dim, 1.5);
    let labels = random_labels(&mut rng, shape);
    let lambda = rng.gen_range(0.01..0.2);
    let margin = Margin::ZeroOne;
    let analytic = ranking_loss(&net, &pooled, &labels, &classes, lambda, &margin, Reduction::Mean)?;
    compare(&net, &analytic.grads, step, |p| {
        Ok(ranking_loss(p, &pooled, &labels, &classes, lambda, &margin, Reduction::Mean)?.loss)
    })
}

/// Cross-entropy check on one random instance, optionally with the
/// truth-excluding softmax.
pub fn check_cross_entropy(seed: u64, shape: &CheckShape, step: f64, strict: bool) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let net = random_net(&mut rng, shape)?;
    let model = JointModel::new(net, BilinearMap::init(shape.visual_dim, shape.out_dim, &mut rng))?;
    let features = random_matrix(&mut rng, shape.samples, shape.visual_dim, 1.5);
    let classes = random_matrix(&mut rng, shape.classes, shape.word_dim, 1.5);
    let labels = random_labels(&mut rng, shape);
    let options = CrossEntropyOptions {
        l2_w: rng.gen_range(0.01..0.2),
        l2_phi: rng.gen_range(0.01..0.2),
        reduction: Reduction::Mean,
        strict_softmax: strict,
    };
    let analytic = cross_entropy_loss(&model, &features, &labels, &classes, &options)?;
    compare(&model, &analytic.grads, step, |p| {
        Ok(cross_entropy_loss(p, &features, &labels, &classes, &options)?.loss)
    })
}

pub fn check_attribute_scorer(seed: u64, shape: &CheckShape, step: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
    let n_attr = shape.classes + 1;
    let mut scorer = AttributeScorer::init(shape.visual_dim, n_attr, &mut rng);
    for v in scorer.params_mut()[1].as_mut_slice() {
        *v = rng.gen_range(-0.5..0.5);
    }
    let features = random_matrix(&mut rng, shape.samples, shape.visual_dim, 1.5);
    let targets = Matrix::new(
        shape.samples,
        n_attr,
        (0..shape.samples * n_attr).map(|_| rng.gen_range(0.0..=1.0)).collect(),
    )?;
    let l2 = rng.gen_range(0.01..0.2);
    let (_, analytic) = scorer_loss(&scorer, &features, &targets, l2)?;
    compare(&scorer, &analytic, step, |p| Ok(scorer_loss(p, &features, &targets, l2)?.0))
}

/// Runs every loss over `seeds × shapes` and keeps the worst errors.
pub fn run_suite(seeds: impl IntoIterator<Item = u64>, shapes: &[CheckShape], step: f64) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        cases: 0,
        worst_ranking: 0.0,
        worst_cross_entropy: 0.0,
        worst_attribute_scorer: 0.0,
    };
    for seed in seeds {
        for shape in shapes {
            report.worst_ranking = report.worst_ranking.max(check_ranking(seed, shape, step)?);
            report.worst_cross_entropy = report
                .worst_cross_entropy
                .max(check_cross_entropy(seed, shape, step, false)?)
                .max(check_cross_entropy(seed, shape, step, true)?);
            report.worst_attribute_scorer = report
                .worst_attribute_scorer
                .max(check_attribute_scorer(seed, shape, step)?);
            report.cases += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numerical_gradient_of_a_quadratic() {
        let net = TransformNet::identity(2);
        // L = Σ w², dL/dw = 2w
        let g = numerical_gradient(&net, DEFAULT_STEP, |p| Ok(p.weight_norm_sq())).unwrap();
        assert!((g[0].get(0, 0) - 2.0).abs() < 1e-8);
        assert!(g[0].get(0, 1).abs() < 1e-8);
        assert!(g[1].l2_norm_sq() < 1e-16);
    }

    #[test]
    fn relative_error_handles_zero_blocks() {
        let z = Matrix::zeros(2, 2);
        assert_eq!(block_relative_error(&z, &z), 0.0);
        let a = Matrix::filled(1, 1, 2.0);
        let b = Matrix::filled(1, 1, 1.0);
        assert_eq!(block_relative_error(&a, &b), 0.5);
    }

    #[test]
    fn ranking_gradients_match() {
        for seed in 0..5 {
            for shape in &DEFAULT_SHAPES {
                let err = check_ranking(seed, shape, DEFAULT_STEP).unwrap();
                assert!(err < 1e-5, "seed {seed} {shape:?}: {err}");
            }
        }
    }

    #[test]
    fn cross_entropy_gradients_match() {
        for seed in 0..5 {
            for shape in &DEFAULT_SHAPES {
                for strict in [false, true] {
                    let err = check_cross_entropy(seed, shape, DEFAULT_STEP, strict).unwrap();
                    assert!(err < 1e-5, "seed {seed} {shape:?} strict={strict}: {err}");
                }
            }
        }
    }

    #[test]
    fn attribute_scorer_gradients_match() {
        for seed in 0..5 {
            let err = check_attribute_scorer(seed, &DEFAULT_SHAPES[1], DEFAULT_STEP).unwrap();
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }
}

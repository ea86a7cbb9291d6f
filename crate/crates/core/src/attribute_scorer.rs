//! One-vs-rest logistic attribute scorers.
//!
//! Image-level training needs a posterior for every attribute of every
//! training image. When those scores are not supplied, they are predicted by
//! independent logistic regressions on the visual features, fit against the
//! predicate row of each image's class.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ZslError};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::Matrix;
use crate::transform_net::uniform_fan;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeScorer {
    /// `visual_dim × n_attributes`
    weights: Matrix,
    /// `1 × n_attributes`
    bias: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            epochs: 300,
            learning_rate: 1e-2,
            l2: 1e-4,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + eᶻ)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl AttributeScorer {
    pub fn init<R: Rng>(visual_dim: usize, n_attributes: usize, rng: &mut R) -> Self {
        AttributeScorer {
            weights: uniform_fan(visual_dim, n_attributes, rng),
            bias: Matrix::zeros(1, n_attributes),
        }
    }

    pub fn params(&self) -> Vec<&Matrix> {
        vec![&self.weights, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.weights, &mut self.bias]
    }

    fn logits(&self, features: &Matrix) -> Result<Matrix> {
        features.matmul(&self.weights)?.add_row_broadcast(&self.bias)
    }

    /// Per-image attribute posteriors in `[0, 1]`.
    pub fn predict(&self, features: &Matrix) -> Result<Matrix> {
        Ok(self.logits(features)?.map(sigmoid))
    }
}

/// Mean over images of the summed binary cross-entropies, plus `l2‖W‖²`.
/// Returns the loss and its gradient (shaped like the scorer).
pub fn scorer_loss(
    scorer: &AttributeScorer,
    features: &Matrix,
    targets: &Matrix,
    l2: f64,
) -> Result<(f64, AttributeScorer)> {
    let logits = scorer.logits(features)?;
    if logits.shape() != targets.shape() {
        return Err(ZslError::Dimension {
            op: "scorer_loss",
            left: logits.shape(),
            right: targets.shape(),
        });
    }
    let n = features.rows().max(1) as f64;
    let mut loss = 0.0;
    let mut d_logits = Matrix::zeros(logits.rows(), logits.cols());
    for ((d, &z), &t) in d_logits
        .as_mut_slice()
        .iter_mut()
        .zip(logits.as_slice())
        .zip(targets.as_slice())
    {
        loss += softplus(z) - t * z;
        *d = (sigmoid(z) - t) / n;
    }
    loss = loss / n + l2 * scorer.weights.l2_norm_sq();
    let mut weights = features.matmul_tn(&d_logits)?;
    weights.add_scaled_assign(&scorer.weights, 2.0 * l2)?;
    let grad = AttributeScorer {
        weights,
        bias: d_logits.sum_rows()?,
    };
    Ok((loss, grad))
}

/// Full-batch Adam fit of one logistic scorer per attribute.
pub fn train_attribute_scorer(
    features: &Matrix,
    targets: &Matrix,
    config: &ScorerConfig,
    seed: u64,
) -> Result<AttributeScorer> {
    if features.rows() != targets.rows() {
        return Err(ZslError::Dimension {
            op: "train_attribute_scorer",
            left: features.shape(),
            right: targets.shape(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scorer = AttributeScorer::init(features.cols(), targets.cols(), &mut rng);
    let adam = AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(scorer.params());
    for _ in 0..config.epochs {
        let (_, grad) = scorer_loss(&scorer, features, targets, config.l2)?;
        adam_step(&mut scorer.params_mut(), &grad.params(), &mut state, &adam)?;
    }
    Ok(scorer)
}

//! Bilinear image/class compatibility `f(x, y) = Θ(x)ᵀ W Φ(y)` and its
//! softmax cross-entropy loss over the training classes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ZslError};
use crate::tensor::{log_sum_exp, softmax_in_place, Matrix};
use crate::transform_net::{uniform_fan, Reduction, TransformNet};

/// `W`, shaped `visual_dim × transformed_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilinearMap {
    pub w: Matrix,
}

impl BilinearMap {
    pub fn init<R: Rng>(visual_dim: usize, transformed_dim: usize, rng: &mut R) -> Self {
        BilinearMap {
            w: uniform_fan(visual_dim, transformed_dim, rng),
        }
    }
}

/// Φ together with W: every trainable parameter of the joint objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointModel {
    pub transform: TransformNet,
    pub bilinear: BilinearMap,
}

impl JointModel {
    pub fn new(transform: TransformNet, bilinear: BilinearMap) -> Result<Self> {
        if transform.output_dim() != bilinear.w.cols() {
            return Err(ZslError::Dimension {
                op: "JointModel",
                left: (transform.input_dim(), transform.output_dim()),
                right: bilinear.w.shape(),
            });
        }
        Ok(JointModel { transform, bilinear })
    }

    pub fn visual_dim(&self) -> usize {
        self.bilinear.w.rows()
    }

    pub fn word_dim(&self) -> usize {
        self.transform.input_dim()
    }

    pub fn zeros_like(&self) -> JointModel {
        JointModel {
            transform: self.transform.zeros_like(),
            bilinear: BilinearMap {
                w: Matrix::zeros(self.bilinear.w.rows(), self.bilinear.w.cols()),
            },
        }
    }

    /// Φ blocks followed by W.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut p = self.transform.params();
        p.push(&self.bilinear.w);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = self.transform.params_mut();
        p.push(&mut self.bilinear.w);
        p
    }

    pub fn add_scaled_assign(&mut self, other: &JointModel, factor: f64) -> Result<()> {
        self.transform.add_scaled_assign(&other.transform, factor)?;
        self.bilinear.w.add_scaled_assign(&other.bilinear.w, factor)
    }
}

/// `n × n_classes` matrix of `Θ(xᵢ)ᵀ W Φ(y_c)`.
pub fn score_all(model: &JointModel, features: &Matrix, class_vectors: &Matrix) -> Result<Matrix> {
    let projected = features.matmul(&model.bilinear.w)?;
    let transformed = model.transform.transform(class_vectors)?;
    projected.matmul_nt(&transformed)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CrossEntropyOptions {
    pub l2_w: f64,
    pub l2_phi: f64,
    pub reduction: Reduction,
    /// Leave the true class out of the softmax denominator.
    pub strict_softmax: bool,
}

#[derive(Debug, Clone)]
pub struct CrossEntropyLoss {
    /// `data + regularization`
    pub loss: f64,
    pub data: f64,
    pub regularization: f64,
    /// Training images whose highest-scoring class is the true one.
    pub correct: usize,
    pub grads: JointModel,
}

/// Softmax cross-entropy over the rows of `class_vectors` plus
/// `l2_w‖W‖² + l2_phi‖Φ‖²`. Gradients flow into both W and Φ.
pub fn cross_entropy_loss(
    model: &JointModel,
    features: &Matrix,
    labels: &[usize],
    class_vectors: &Matrix,
    options: &CrossEntropyOptions,
) -> Result<CrossEntropyLoss> {
    if features.rows() != labels.len() {
        return Err(ZslError::Dimension {
            op: "cross_entropy_loss",
            left: features.shape(),
            right: (labels.len(), 1),
        });
    }
    let n_classes = class_vectors.rows();
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(ZslError::Dataset(format!("label {bad} out of range for {n_classes} classes")));
    }
    if options.strict_softmax && n_classes < 2 {
        return Err(ZslError::Config("the strict softmax needs at least two classes".into()));
    }

    let projected = features.matmul(&model.bilinear.w)?;
    let (transformed, cache) = model.transform.forward(class_vectors)?;
    let scores = projected.matmul_nt(&transformed)?;
    let scale = options.reduction.factor(labels.len());

    let mut data = 0.0;
    let mut correct = 0;
    let mut d_scores = Matrix::zeros(scores.rows(), scores.cols());
    for (i, &y) in labels.iter().enumerate() {
        let row = scores.row(i);
        if crate::eval::argmax(row) == y {
            correct += 1;
        }
        let grad_row = d_scores.row_mut(i);
        if options.strict_softmax {
            let others = row.iter().enumerate().filter(|&(j, _)| j != y).map(|(_, &s)| s);
            data += log_sum_exp(others) - row[y];
            let mut p: Vec<f64> = row.to_vec();
            p[y] = f64::NEG_INFINITY;
            softmax_in_place(&mut p);
            for (j, g) in grad_row.iter_mut().enumerate() {
                *g = if j == y { -scale } else { p[j] * scale };
            }
        } else {
            data += log_sum_exp(row.iter().copied()) - row[y];
            grad_row.copy_from_slice(row);
            softmax_in_place(grad_row);
            grad_row[y] -= 1.0;
            grad_row.iter_mut().for_each(|g| *g *= scale);
        }
    }
    data *= scale;

    let mut grads = model.zeros_like();
    // ∂/∂W = Xᵀ · (dS · Φ(C)),  ∂/∂Φ(C) = dSᵀ · (X W)
    let d_projected = d_scores.matmul(&transformed)?;
    grads.bilinear.w = features.matmul_tn(&d_projected)?;
    let d_transformed = d_scores.matmul_tn(&projected)?;
    model.transform.backward(&cache, &d_transformed, &mut grads.transform)?;

    let regularization =
        options.l2_w * model.bilinear.w.l2_norm_sq() + options.l2_phi * model.transform.weight_norm_sq();
    grads.bilinear.w.add_scaled_assign(&model.bilinear.w, 2.0 * options.l2_w)?;
    model.transform.add_weight_decay_grad(options.l2_phi, &mut grads.transform)?;

    let loss = data + regularization;
    if !loss.is_finite() {
        return Err(ZslError::NonFinite {
            op: "cross_entropy_loss",
        });
    }
    Ok(CrossEntropyLoss {
        loss,
        data,
        regularization,
        correct,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    fn identity_model(dim: usize) -> JointModel {
        JointModel::new(TransformNet::identity(dim), BilinearMap { w: Matrix::identity(dim) }).unwrap()
    }

    #[test]
    fn identity_scores_are_squared_norms() {
        let m = identity_model(3);
        let x = Matrix::from_rows(&[[1.0, -2.0, 2.0]]).unwrap();
        let s = score_all(&m, &x, &x).unwrap();
        assert_eq!(s.get(0, 0), 9.0);
    }

    #[test]
    fn zero_w_gives_zero_scores() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let m = JointModel::new(
            TransformNet::three_layer(4, 5, 3, &mut r).unwrap(),
            BilinearMap { w: Matrix::zeros(6, 3) },
        )
        .unwrap();
        let s = score_all(&m, &random_matrix(&mut r, 5, 6), &random_matrix(&mut r, 3, 4)).unwrap();
        assert!(s.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn score_all_matches_triple_loop() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let m = JointModel::new(
            TransformNet::three_layer(4, 6, 3, &mut r).unwrap(),
            BilinearMap::init(5, 3, &mut r),
        )
        .unwrap();
        let x = random_matrix(&mut r, 7, 5);
        let c = random_matrix(&mut r, 4, 4);
        let phi = m.transform.transform(&c).unwrap();
        let s = score_all(&m, &x, &c).unwrap();
        for i in 0..7 {
            for k in 0..4 {
                let mut want = 0.0;
                for a in 0..5 {
                    for b in 0..3 {
                        want += x.get(i, a) * m.bilinear.w.get(a, b) * phi.get(k, b);
                    }
                }
                assert!((s.get(i, k) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn joint_model_checks_dims() {
        assert!(JointModel::new(TransformNet::identity(3), BilinearMap { w: Matrix::zeros(4, 2) }).is_err());
    }

    #[test]
    fn equal_scores_give_ln2() {
        let m = identity_model(2);
        // both classes score 0 against this feature
        let x = Matrix::from_rows(&[[0.0, 0.0], [0.0, 0.0]]).unwrap();
        let c = Matrix::identity(2);
        let out = cross_entropy_loss(&m, &x, &[0, 1], &c, &CrossEntropyOptions::default()).unwrap();
        assert!((out.data - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn loss_vanishes_as_true_score_dominates() {
        let m = identity_model(2);
        let c = Matrix::identity(2);
        let mut last = f64::INFINITY;
        for gap in [0.5, 1.0, 5.0, 20.0, 50.0] {
            let x = Matrix::from_rows(&[[gap, 0.0]]).unwrap();
            let out = cross_entropy_loss(&m, &x, &[0], &c, &CrossEntropyOptions::default()).unwrap();
            assert!(out.data < last);
            last = out.data;
        }
        assert!(last < 1e-20);
    }

    #[test]
    fn strict_softmax_excludes_truth() {
        let m = identity_model(3);
        let c = Matrix::identity(3);
        let x = Matrix::from_rows(&[[2.0, 1.0, 0.0]]).unwrap();
        let opts = CrossEntropyOptions {
            strict_softmax: true,
            ..Default::default()
        };
        let out = cross_entropy_loss(&m, &x, &[0], &c, &opts).unwrap();
        let want = (1f64.exp() + 1.0).ln() - 2.0;
        assert!((out.data - want).abs() < 1e-14);
    }

    #[test]
    fn shift_invariance() {
        // raising every class score of sample 0 by the same amount: add a
        // constant coordinate on the class side weighted by a feature entry
        let m = identity_model(3);
        let c = Matrix::from_rows(&[[1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [0.3, 0.3, 1.0]]).unwrap();
        let x0 = Matrix::from_rows(&[[0.8, 0.1, 0.0]]).unwrap();
        let x1 = Matrix::from_rows(&[[0.8, 0.1, 7.5]]).unwrap();
        let opts = CrossEntropyOptions::default();
        let a = cross_entropy_loss(&m, &x0, &[1], &c, &opts).unwrap();
        let b = cross_entropy_loss(&m, &x1, &[1], &c, &opts).unwrap();
        assert!((a.data - b.data).abs() < 1e-12);
    }

    #[test]
    fn regularization_terms_are_added() {
        let m = identity_model(2);
        let c = Matrix::identity(2);
        let x = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let opts = CrossEntropyOptions {
            l2_w: 0.5,
            l2_phi: 0.25,
            ..Default::default()
        };
        let out = cross_entropy_loss(&m, &x, &[0], &c, &opts).unwrap();
        assert!((out.regularization - (0.5 * 2.0 + 0.25 * 2.0)).abs() < 1e-15);
    }
}

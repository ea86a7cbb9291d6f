//! The word-vector transformation network Φ and the margin-ranking loss that
//! trains it.
//!
//! Φ is a feed-forward network over row vectors: `h = x·W + b` per layer,
//! leaky rectifier on hidden layers, linear output. The compatibility of an
//! image with a class is `s(x, y) = ⟨Φ(pool(x)), Φ(y)⟩`, where `pool(x)` is
//! the weighted mean of attribute word vectors for that image and `y` is the
//! class-name word vector. The same Φ transforms both sides.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ZslError};
use crate::tensor::{dot, Matrix};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// Denominator floor for attribute pooling.
pub const POOL_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `in × out`
    pub weight: Matrix,
    /// `1 × out`
    pub bias: Matrix,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer {
            weight: Matrix::zeros(inputs, outputs),
            bias: Matrix::zeros(1, outputs),
        }
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn init_uniform<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Layer {
            weight: uniform_fan(inputs, outputs, rng),
            bias: Matrix::zeros(1, outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }
}

pub(crate) fn uniform_fan<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Matrix {
    let bound = (6.0 / (inputs + outputs) as f64).sqrt();
    let mut w = Matrix::zeros(inputs, outputs);
    for v in w.as_mut_slice() {
        *v = rng.gen_range(-bound..=bound);
    }
    w
}

/// Φ. Also used, zero-initialized, as the gradient buffer for itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformNet {
    layers: Vec<Layer>,
    leaky_slope: f64,
}

/// Per-layer inputs and pre-activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
}

impl TransformNet {
    pub fn from_layers(layers: Vec<Layer>, leaky_slope: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(ZslError::Config("a transform network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(ZslError::Dimension {
                    op: "TransformNet layer chain",
                    left: pair[0].weight.shape(),
                    right: pair[1].weight.shape(),
                });
            }
        }
        for layer in &layers {
            if layer.bias.shape() != (1, layer.outputs()) {
                return Err(ZslError::Dimension {
                    op: "TransformNet bias",
                    left: layer.weight.shape(),
                    right: layer.bias.shape(),
                });
            }
        }
        Ok(TransformNet { layers, leaky_slope })
    }

    /// Randomly initialized network with the given layer widths
    /// (`[input, hidden…, output]`).
    pub fn init<R: Rng>(widths: &[usize], leaky_slope: f64, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(ZslError::Config(format!("invalid layer widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| Layer::init_uniform(w[0], w[1], rng))
            .collect();
        TransformNet::from_layers(layers, leaky_slope)
    }

    /// Three layers: `input → hidden → hidden → output`.
    pub fn three_layer<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Result<Self> {
        TransformNet::init(&[input, hidden, hidden, output], DEFAULT_LEAKY_SLOPE, rng)
    }

    /// A single linear layer with identity weights.
    pub fn identity(dim: usize) -> Self {
        TransformNet {
            layers: vec![Layer {
                weight: Matrix::identity(dim),
                bias: Matrix::zeros(1, dim),
            }],
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn zeros_like(&self) -> Self {
        TransformNet {
            layers: self.layers.iter().map(|l| Layer::zeros(l.inputs(), l.outputs())).collect(),
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn leaky_slope(&self) -> f64 {
        self.leaky_slope
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    /// Widths of every layer boundary, input first.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::outputs))
            .collect()
    }

    /// Parameter blocks in a fixed order: `W₁, b₁, W₂, b₂, …`.
    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Σ of squared weight entries; biases are not regularized.
    pub fn weight_norm_sq(&self) -> f64 {
        self.layers.iter().map(|l| l.weight.l2_norm_sq()).sum()
    }

    /// Adds `factor ·` the gradient of `weight_norm_sq` into `grads`.
    pub fn add_weight_decay_grad(&self, factor: f64, grads: &mut TransformNet) -> Result<()> {
        for (l, g) in self.layers.iter().zip(&mut grads.layers) {
            g.weight.add_scaled_assign(&l.weight, 2.0 * factor)?;
        }
        Ok(())
    }

    /// `self += factor · other`, block by block.
    pub fn add_scaled_assign(&mut self, other: &TransformNet, factor: f64) -> Result<()> {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            a.add_scaled_assign(b, factor)?;
        }
        Ok(())
    }

    fn activate(&self, v: f64) -> f64 {
        if v > 0.0 {
            v
        } else {
            self.leaky_slope * v
        }
    }

    fn activate_grad(&self, v: f64) -> f64 {
        if v > 0.0 {
            1.0
        } else {
            self.leaky_slope
        }
    }

    /// Φ applied to every row of `input`.
    pub fn transform(&self, input: &Matrix) -> Result<Matrix> {
        self.forward(input).map(|(out, _)| out)
    }

    /// Φ of a single vector.
    pub fn transform_vector(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.transform(&Matrix::row_vector(v)?)?.into_vec())
    }

    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if input.cols() != self.input_dim() {
            return Err(ZslError::Dimension {
                op: "transform",
                left: input.shape(),
                right: self.layers[0].weight.shape(),
            });
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut h = input.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = h.matmul(&layer.weight)?.add_row_broadcast(&layer.bias)?;
            let next = if k == last { z.clone() } else { z.map(|v| self.activate(v)) };
            inputs.push(h);
            pre_activations.push(z);
            h = next;
        }
        Ok((
            h,
            ForwardCache {
                inputs,
                pre_activations,
            },
        ))
    }

    /// Accumulates parameter gradients for `∂L/∂output` into `grads` and
    /// returns `∂L/∂input`.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &Matrix, grads: &mut TransformNet) -> Result<Matrix> {
        let last = self.layers.len() - 1;
        let mut grad = grad_output.clone();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            if k != last {
                let pre = &cache.pre_activations[k];
                for (g, &z) in grad.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    *g *= self.activate_grad(z);
                }
            }
            let gw = cache.inputs[k].matmul_tn(&grad)?;
            grads.layers[k].weight.add_scaled_assign(&gw, 1.0)?;
            grads.layers[k].bias.add_scaled_assign(&grad.sum_rows()?, 1.0)?;
            grad = grad.matmul_nt(&layer.weight)?;
        }
        Ok(grad)
    }
}

/// A weighted mean of attribute vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledAttributeEmbedding {
    pub weights: Vec<f64>,
    pub vector: Vec<f64>,
    /// Set when every weight is zero; `vector` is then all zeros.
    pub degenerate: bool,
}

/// `Σₐ wₐ·vₐ / max(Σₐ wₐ, ε)`.
pub fn pool_attributes(weights: &[f64], attribute_vectors: &Matrix) -> Result<PooledAttributeEmbedding> {
    if weights.len() != attribute_vectors.rows() {
        return Err(ZslError::Dimension {
            op: "pool_attributes",
            left: (1, weights.len()),
            right: attribute_vectors.shape(),
        });
    }
    for (a, &w) in weights.iter().enumerate() {
        if !(0.0..=1.0).contains(&w) {
            return Err(ZslError::Range {
                what: "attribute weight".into(),
                row: "0".into(),
                col: a.to_string(),
                value: w,
            });
        }
    }
    let total: f64 = weights.iter().sum();
    let mut vector = vec![0.0; attribute_vectors.cols()];
    for (a, &w) in weights.iter().enumerate() {
        if w != 0.0 {
            for (p, &v) in vector.iter_mut().zip(attribute_vectors.row(a)) {
                *p += w * v;
            }
        }
    }
    let denom = total.max(POOL_EPSILON);
    vector.iter_mut().for_each(|p| *p /= denom);
    let degenerate = total == 0.0;
    if degenerate {
        log::warn!("attribute pooling with all-zero weights yields a zero vector");
    }
    Ok(PooledAttributeEmbedding {
        weights: weights.to_vec(),
        vector,
        degenerate,
    })
}

/// Pools every row of a weight matrix; returns the stacked vectors and the
/// indices of degenerate (all-zero) rows.
pub fn pool_rows(weights: &Matrix, attribute_vectors: &Matrix) -> Result<(Matrix, Vec<usize>)> {
    let mut data = Vec::with_capacity(weights.rows() * attribute_vectors.cols());
    let mut degenerate = Vec::new();
    for (i, row) in weights.row_iter().enumerate() {
        let p = pool_attributes(row, attribute_vectors).map_err(|e| match e {
            ZslError::Range { what, col, value, .. } => ZslError::Range {
                what,
                row: i.to_string(),
                col,
                value,
            },
            other => other,
        })?;
        if p.degenerate {
            degenerate.push(i);
        }
        data.extend(p.vector);
    }
    Ok((Matrix::new(weights.rows(), attribute_vectors.cols(), data)?, degenerate))
}

/// `s(x, y) = ⟨Φ(pooled), Φ(class)⟩`.
pub fn compatibility_s(net: &TransformNet, pooled: &PooledAttributeEmbedding, class_vector: &[f64]) -> Result<f64> {
    let a = net.transform_vector(&pooled.vector)?;
    let b = net.transform_vector(class_vector)?;
    Ok(dot(&a, &b))
}

/// Required score gap Δ between a true class and a competitor.
#[derive(Debug, Clone, PartialEq)]
pub enum Margin {
    /// 0 on the diagonal, 1 elsewhere.
    ZeroOne,
    /// Explicit `n × n` table with zero diagonal.
    Table(Matrix),
}

impl Margin {
    pub fn table(m: Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(ZslError::Dimension {
                op: "margin table",
                left: m.shape(),
                right: (m.rows(), m.rows()),
            });
        }
        for i in 0..m.rows() {
            if m.get(i, i) != 0.0 {
                return Err(ZslError::Dataset(format!(
                    "margin table diagonal entry {i} is {} (must be 0)",
                    m.get(i, i)
                )));
            }
        }
        Ok(Margin::Table(m))
    }

    pub fn delta(&self, truth: usize, other: usize) -> f64 {
        match self {
            Margin::ZeroOne => {
                if truth == other {
                    0.0
                } else {
                    1.0
                }
            }
            Margin::Table(m) => m.get(truth, other),
        }
    }

    /// Restricts a table to the listed classes, in order.
    pub fn restrict(&self, classes: &[usize]) -> Margin {
        match self {
            Margin::ZeroOne => Margin::ZeroOne,
            Margin::Table(m) => {
                let mut out = Matrix::zeros(classes.len(), classes.len());
                for (i, &a) in classes.iter().enumerate() {
                    for (j, &b) in classes.iter().enumerate() {
                        out.set(i, j, m.get(a, b));
                    }
                }
                Margin::Table(out)
            }
        }
    }

    pub fn validate_size(&self, n: usize) -> Result<()> {
        match self {
            Margin::Table(m) if m.rows() != n => Err(ZslError::Dimension {
                op: "margin table",
                left: m.shape(),
                right: (n, n),
            }),
            _ => Ok(()),
        }
    }
}

/// Whether per-sample terms are summed or averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    pub(crate) fn factor(self, n: usize) -> f64 {
        match self {
            Reduction::Mean if n > 0 => 1.0 / n as f64,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RankingLoss {
    /// `hinge + regularization`
    pub loss: f64,
    /// Reduced sum of hinge (slack) terms.
    pub hinge: f64,
    /// `λ‖Φ‖²`
    pub regularization: f64,
    /// Constraints holding with zero slack.
    pub satisfied: usize,
    pub constraints: usize,
    pub grads: TransformNet,
}

/// Pairwise score matrix `s(xᵢ, y_c)` for every pooled row and class row.
pub fn score_pairs(net: &TransformNet, pooled: &Matrix, class_vectors: &Matrix) -> Result<Matrix> {
    let a = net.transform(pooled)?;
    let z = net.transform(class_vectors)?;
    a.matmul_nt(&z)
}

/// Margin-ranking loss with slacks at their optimum:
/// `λ‖Φ‖² + Σᵢ Σ_{j≠yᵢ} max(0, Δ(yᵢ,j) + s(xᵢ,j) − s(xᵢ,yᵢ))`,
/// with the double sum scaled by `reduction`. `labels` index rows of
/// `class_vectors`; every other row acts as a competitor.
pub fn ranking_loss(
    net: &TransformNet,
    pooled: &Matrix,
    labels: &[usize],
    class_vectors: &Matrix,
    lambda: f64,
    margin: &Margin,
    reduction: Reduction,
) -> Result<RankingLoss> {
    if pooled.rows() != labels.len() {
        return Err(ZslError::Dimension {
            op: "ranking_loss",
            left: pooled.shape(),
            right: (labels.len(), 1),
        });
    }
    let n_classes = class_vectors.rows();
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(ZslError::Dataset(format!("label {bad} out of range for {n_classes} classes")));
    }
    margin.validate_size(n_classes)?;

    let (a, cache_a) = net.forward(pooled)?;
    let (z, cache_z) = net.forward(class_vectors)?;
    let scores = a.matmul_nt(&z)?;
    let scale = reduction.factor(labels.len());

    let mut hinge = 0.0;
    let mut satisfied = 0;
    let mut constraints = 0;
    let mut d_scores = Matrix::zeros(scores.rows(), scores.cols());
    for (i, &y) in labels.iter().enumerate() {
        let row = scores.row(i);
        let truth = row[y];
        let mut active = 0usize;
        for (j, &s) in row.iter().enumerate() {
            if j == y {
                continue;
            }
            constraints += 1;
            let slack = margin.delta(y, j) + s - truth;
            if slack > 0.0 {
                hinge += slack;
                d_scores.set(i, j, scale);
                active += 1;
            } else {
                satisfied += 1;
            }
        }
        d_scores.set(i, y, -(active as f64) * scale);
    }
    hinge *= scale;

    let mut grads = net.zeros_like();
    let d_a = d_scores.matmul(&z)?;
    let d_z = d_scores.matmul_tn(&a)?;
    net.backward(&cache_a, &d_a, &mut grads)?;
    net.backward(&cache_z, &d_z, &mut grads)?;
    let regularization = lambda * net.weight_norm_sq();
    net.add_weight_decay_grad(lambda, &mut grads)?;

    let loss = hinge + regularization;
    if !loss.is_finite() {
        return Err(ZslError::NonFinite { op: "ranking_loss" });
    }
    Ok(RankingLoss {
        loss,
        hinge,
        regularization,
        satisfied,
        constraints,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    /// Scalar-loop forward pass, independent of the matrix kernels.
    fn scalar_forward(net: &TransformNet, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = net.layers().len() - 1;
        for (k, layer) in net.layers().iter().enumerate() {
            let mut out = vec![0.0; layer.outputs()];
            for (j, o) in out.iter_mut().enumerate() {
                let mut acc = layer.bias.get(0, j);
                for (i, &hi) in h.iter().enumerate() {
                    acc += hi * layer.weight.get(i, j);
                }
                *o = if k == last || acc > 0.0 { acc } else { acc * net.leaky_slope() };
            }
            h = out;
        }
        h
    }

    #[test]
    fn zero_network_maps_to_zero() {
        let layers = vec![Layer::zeros(4, 3), Layer::zeros(3, 3), Layer::zeros(3, 2)];
        let net = TransformNet::from_layers(layers, 0.01).unwrap();
        let out = net.transform_vector(&[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = TransformNet::identity(3);
        assert_eq!(net.transform_vector(&[1.0, -2.0, 0.25]).unwrap(), vec![1.0, -2.0, 0.25]);
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let mut r = rng(17);
        let net = TransformNet::init(&[6, 5, 4, 3], 0.01, &mut r).unwrap();
        let x = random_matrix(&mut r, 4, 6);
        let got = net.transform(&x).unwrap();
        for i in 0..4 {
            let want = scalar_forward(&net, x.row(i));
            for (g, w) in got.row(i).iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_chain_is_validated() {
        let layers = vec![Layer::zeros(4, 3), Layer::zeros(2, 3)];
        assert!(TransformNet::from_layers(layers, 0.01).is_err());
        let net = TransformNet::identity(3);
        assert!(net.transform(&Matrix::zeros(1, 4)).is_err());
    }

    #[test]
    fn compatibility_examples() {
        let net = TransformNet::identity(2);
        let attrs = Matrix::identity(2);
        let pooled = PooledAttributeEmbedding {
            weights: vec![1.0, 1.0],
            vector: vec![1.0, 1.0],
            degenerate: false,
        };
        assert_eq!(compatibility_s(&net, &pooled, &[1.0, 1.0]).unwrap(), 2.0);
        let e0 = pool_attributes(&[1.0, 0.0], &attrs).unwrap();
        assert_eq!(compatibility_s(&net, &e0, &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn compatibility_matches_composition() {
        let mut r = rng(4);
        let net = TransformNet::three_layer(5, 7, 3, &mut r).unwrap();
        let attrs = random_matrix(&mut r, 4, 5);
        let pooled = pool_attributes(&[0.3, 0.9, 0.0, 0.5], &attrs).unwrap();
        let class: Vec<f64> = (0..5).map(|_| r.gen_range(-1.0..1.0)).collect();
        let a = scalar_forward(&net, &pooled.vector);
        let b = scalar_forward(&net, &class);
        let want: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((compatibility_s(&net, &pooled, &class).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn pooling_examples() {
        let attrs = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(pool_attributes(&[0.2, 0.8], &attrs).unwrap().vector, vec![0.2, 0.8]);

        let mut r = rng(9);
        let attrs = random_matrix(&mut r, 5, 3);
        let one_hot = pool_attributes(&[0.0, 0.0, 1.0, 0.0, 0.0], &attrs).unwrap();
        assert_eq!(one_hot.vector, attrs.row(2));

        let uniform = pool_attributes(&[0.4; 5], &attrs).unwrap();
        for c in 0..3 {
            let mean = (0..5).map(|a| attrs.get(a, c)).sum::<f64>() / 5.0;
            assert!((uniform.vector[c] - mean).abs() < 1e-15);
        }

        let zero = pool_attributes(&[0.0; 5], &attrs).unwrap();
        assert!(zero.degenerate);
        assert_eq!(zero.vector, vec![0.0; 3]);

        assert!(matches!(
            pool_attributes(&[0.0, 1.2, 0.0, 0.0, 0.0], &attrs),
            Err(ZslError::Range { .. })
        ));
    }

    #[test]
    fn pool_rows_reports_degenerate_rows() {
        let attrs = Matrix::identity(2);
        let w = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        let (p, degenerate) = pool_rows(&w, &attrs).unwrap();
        assert_eq!(p.row(0), &[1.0, 0.0]);
        assert_eq!(degenerate, vec![1]);
    }

    #[test]
    fn satisfied_constraints_leave_only_regularization() {
        let net = TransformNet::identity(3);
        let classes = Matrix::identity(3).scale(2.0).unwrap();
        // s(x, y) = 4 for the true class and 0 otherwise: every gap ≥ 1
        let pooled = classes.select_rows(&[0, 2, 1]);
        let out = ranking_loss(&net, &pooled, &[0, 2, 1], &classes, 0.5, &Margin::ZeroOne, Reduction::Sum).unwrap();
        assert_eq!(out.hinge, 0.0);
        assert_eq!(out.loss, 0.5 * net.weight_norm_sq());
        assert_eq!(out.satisfied, out.constraints);
        assert_eq!(out.constraints, 6);
    }

    #[test]
    fn single_violation_contributes_its_gap() {
        let net = TransformNet::identity(2);
        let classes = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let pooled = Matrix::from_rows(&[[1.0, 0.7]]).unwrap();
        // s_true = 1.0, s_other = 0.7, so slack = 1 + 0.7 - 1.0
        let out = ranking_loss(&net, &pooled, &[0], &classes, 0.0, &Margin::ZeroOne, Reduction::Sum).unwrap();
        assert!((out.hinge - 0.7).abs() < 1e-12);
        assert_eq!(out.satisfied, 0);
    }

    #[test]
    fn hinge_ignores_a_common_shift() {
        // a third coordinate fixed at 1 on the class side adds pooled[i][2]
        // to every score of sample i
        let net = TransformNet::identity(3);
        let classes = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.5, 0.5, 0.0]]).unwrap();
        let pooled = Matrix::from_rows(&[[0.9, 0.3, 0.0], [0.1, 0.8, 0.0]]).unwrap();
        let base = ranking_loss(&net, &pooled, &[0, 1], &classes, 0.0, &Margin::ZeroOne, Reduction::Sum).unwrap();
        let mut shifted_c = classes.clone();
        let mut shifted_p = pooled.clone();
        for r in 0..3 {
            shifted_c.set(r, 2, 1.0);
        }
        for r in 0..2 {
            shifted_p.set(r, 2, 2.5);
        }
        let shifted = ranking_loss(&net, &shifted_p, &[0, 1], &shifted_c, 0.0, &Margin::ZeroOne, Reduction::Sum).unwrap();
        assert!(base.hinge > 0.0);
        assert!((base.hinge - shifted.hinge).abs() < 1e-12);
    }

    #[test]
    fn margin_table_is_checked() {
        assert!(Margin::table(Matrix::identity(2)).is_err());
        assert!(Margin::table(Matrix::zeros(2, 3)).is_err());
        let m = Margin::table(Matrix::from_rows(&[[0.0, 2.0], [3.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(m.delta(0, 1), 2.0);
        assert_eq!(m.delta(1, 0), 3.0);
        let r = m.restrict(&[1]);
        assert_eq!(r, Margin::Table(Matrix::zeros(1, 1)));
    }

    #[test]
    fn mean_reduction_divides_by_batch() {
        let net = TransformNet::identity(2);
        let classes = Matrix::identity(2);
        let pooled = Matrix::from_rows(&[[1.0, 0.7], [1.0, 0.7]]).unwrap();
        let sum = ranking_loss(&net, &pooled, &[0, 0], &classes, 0.0, &Margin::ZeroOne, Reduction::Sum).unwrap();
        let mean = ranking_loss(&net, &pooled, &[0, 0], &classes, 0.0, &Margin::ZeroOne, Reduction::Mean).unwrap();
        assert!((sum.hinge - 1.4).abs() < 1e-12);
        assert!((mean.hinge - 0.7).abs() < 1e-12);
    }
}

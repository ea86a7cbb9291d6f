//! Zero-shot prediction, normalized per-class accuracy and top-k retrieval.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Result, ZslError};
use crate::label_embedding::{score_all, JointModel};
use crate::tensor::Matrix;

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Assigns each image the highest-scoring class among `candidates`
/// (global class indices). Ties go to the candidate listed first.
pub fn classify(model: &JointModel, features: &Matrix, class_vectors: &Matrix, candidates: &[usize]) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(ZslError::Dataset("no candidate classes to classify into".into()));
    }
    if let Some(&bad) = candidates.iter().find(|&&c| c >= class_vectors.rows()) {
        return Err(ZslError::Dataset(format!("candidate class {bad} has no class vector")));
    }
    let scores = score_all(model, features, &class_vectors.select_rows(candidates))?;
    Ok(scores.row_iter().map(|row| candidates[argmax(row)]).collect())
}

/// [`classify`] restricted to the unseen classes.
pub fn classify_zero_shot(
    model: &JointModel,
    features: &Matrix,
    class_vectors: &Matrix,
    unseen: &[usize],
) -> Result<Vec<usize>> {
    if unseen.is_empty() {
        return Err(ZslError::Dataset("the unseen class set is empty".into()));
    }
    classify(model, features, class_vectors, unseen)
}

/// Image indices of the `k` highest scores for one class vector, best first.
/// Equal scores are ordered by ascending image index.
pub fn top_k_images(model: &JointModel, features: &Matrix, class_vector: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > features.rows() {
        return Err(ZslError::Dataset(format!(
            "k = {k} exceeds the number of images ({})",
            features.rows()
        )));
    }
    let scores = score_all(model, features, &Matrix::row_vector(class_vector)?)?;
    let mut order: Vec<usize> = (0..features.rows()).collect();
    order.sort_by(|&a, &b| scores.get(b, 0).total_cmp(&scores.get(a, 0)).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    /// Evaluated classes (global indices), in the order of the vectors below.
    pub classes: Vec<usize>,
    pub per_class_accuracy: Vec<f64>,
    /// Mean of `per_class_accuracy`.
    pub normalized_accuracy: f64,
    /// `confusion[true][predicted]` over `classes`.
    pub confusion: Vec<Vec<usize>>,
    /// Fraction of all images classified correctly.
    pub overall_accuracy: f64,
    /// Classes in the evaluation set with no test images.
    pub excluded: Vec<usize>,
}

/// Mean over classes of the within-class accuracy.
pub fn normalized_per_class_accuracy(predictions: &[usize], labels: &[usize], class_set: &[usize]) -> Result<EvalResult> {
    if predictions.len() != labels.len() {
        return Err(ZslError::Dimension {
            op: "normalized_per_class_accuracy",
            left: (predictions.len(), 1),
            right: (labels.len(), 1),
        });
    }
    let position = |c: usize, what: &str| {
        class_set
            .iter()
            .position(|&x| x == c)
            .ok_or_else(|| ZslError::Dataset(format!("{what} class {c} is not in the evaluation set")))
    };
    let n = class_set.len();
    let mut confusion = vec![vec![0usize; n]; n];
    for (&p, &l) in predictions.iter().zip(labels) {
        confusion[position(l, "label")?][position(p, "predicted")?] += 1;
    }
    let mut classes = Vec::new();
    let mut per_class_accuracy = Vec::new();
    let mut excluded = Vec::new();
    for (i, row) in confusion.iter().enumerate() {
        let total: usize = row.iter().sum();
        if total == 0 {
            log::warn!("class {} has no test images and is excluded from the mean", class_set[i]);
            excluded.push(class_set[i]);
            continue;
        }
        classes.push(class_set[i]);
        per_class_accuracy.push(row[i] as f64 / total as f64);
    }
    if per_class_accuracy.is_empty() {
        return Err(ZslError::Dataset("no test images in any evaluated class".into()));
    }
    let normalized_accuracy = per_class_accuracy.iter().sum::<f64>() / per_class_accuracy.len() as f64;
    let correct: usize = (0..n).map(|i| confusion[i][i]).sum();
    Ok(EvalResult {
        classes,
        per_class_accuracy,
        normalized_accuracy,
        confusion,
        overall_accuracy: correct as f64 / labels.len() as f64,
        excluded,
    })
}

impl EvalResult {
    /// Human-readable per-class rows followed by a summary.
    pub fn to_text(&self, class_names: &[String]) -> String {
        let mut out = String::new();
        for (&c, acc) in self.classes.iter().zip(&self.per_class_accuracy) {
            let _ = writeln!(out, "class {:<24} accuracy {:.4}", class_names[c], acc);
        }
        for &c in &self.excluded {
            let _ = writeln!(out, "class {:<24} excluded (no images)", class_names[c]);
        }
        let _ = writeln!(out, "normalized per-class accuracy {:.4}", self.normalized_accuracy);
        let _ = writeln!(out, "overall per-image accuracy    {:.4}", self.overall_accuracy);
        out
    }

    /// `class,accuracy` rows.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("class,accuracy\n");
        for (&c, acc) in self.classes.iter().zip(&self.per_class_accuracy) {
            let _ = writeln!(out, "{},{}", class_names[c], acc);
        }
        out
    }
}

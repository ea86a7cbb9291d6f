//! End-to-end training of Φ and W under the joint objective
//!
//! `hinge + λ‖Φ‖² + ce_weight · CE + λ_W‖W‖²`,
//!
//! with minibatch Adam, plus class-level 2-fold cross-validation of the
//! hidden width.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribute_scorer::{train_attribute_scorer, ScorerConfig};
use crate::data_io::{TrainingMode, ZslDataset};
use crate::error::{Result, ZslError};
use crate::eval::{classify, normalized_per_class_accuracy};
use crate::label_embedding::{cross_entropy_loss, BilinearMap, CrossEntropyOptions, JointModel};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::Matrix;
use crate::transform_net::{pool_rows, ranking_loss, Margin, Reduction, TransformNet, DEFAULT_LEAKY_SLOPE};
use crate::wordspace::{LabelSpaces, WordSpace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainingMode,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of `‖Φ‖²`.
    pub lambda: f64,
    /// Weight of `‖W‖²`; `lambda` when unset.
    pub l2_w: Option<f64>,
    pub ce_weight: f64,
    /// Hidden-width candidates; more than one triggers cross-validation.
    pub hidden_widths: Vec<usize>,
    /// Output width of Φ.
    pub embed_dim: usize,
    pub leaky_slope: f64,
    pub seed: u64,
    /// Stop after this many epochs without a lower total loss.
    pub early_stop_patience: Option<usize>,
    /// Average per-sample terms over the batch instead of summing them.
    pub mean_reduction: bool,
    /// Exclude the true class from the softmax denominator.
    pub strict_softmax: bool,
    /// Unit-normalize word vectors before averaging multi-word names.
    pub normalize_words: bool,
    /// Used only when image-level training has to predict attribute scores.
    pub scorer: ScorerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            mode: TrainingMode::Pbt,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            epochs: 200,
            batch_size: 16,
            lambda: 1e-4,
            l2_w: None,
            ce_weight: 1.0,
            hidden_widths: vec![128],
            embed_dim: 32,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            seed: 0,
            early_stop_patience: None,
            mean_reduction: true,
            strict_softmax: false,
            normalize_words: false,
            scorer: ScorerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ZslError::Config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be ≥ 0, got {}", self.lambda));
        }
        if let Some(l2) = self.l2_w {
            if !(l2 >= 0.0 && l2.is_finite()) {
                return fail(format!("l2_w must be ≥ 0, got {l2}"));
            }
        }
        if !(self.ce_weight >= 0.0 && self.ce_weight.is_finite()) {
            return fail(format!("ce_weight must be ≥ 0, got {}", self.ce_weight));
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return fail("hidden_widths must be a non-empty list of positive widths".into());
        }
        if self.batch_size == 0 || self.embed_dim == 0 {
            return fail("batch_size and embed_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return fail("Adam betas must lie in [0, 1) and epsilon must be positive".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn reduction(&self) -> Reduction {
        if self.mean_reduction {
            Reduction::Mean
        } else {
            Reduction::Sum
        }
    }

    pub fn l2_w(&self) -> f64 {
        self.l2_w.unwrap_or(self.lambda)
    }
}

/// Per-epoch losses over the full training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Hinge plus `λ‖Φ‖²`.
    pub ranking_loss: f64,
    pub ce_loss: f64,
    pub total: f64,
    /// Fraction of ranking constraints holding with zero slack.
    pub satisfaction_rate: f64,
    pub hinge: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub hidden_width: usize,
    pub fold_scores: [f64; 2],
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    /// Global class indices of the two folds.
    pub folds: [Vec<usize>; 2],
    pub candidates: Vec<CandidateScore>,
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub selected_hidden_width: usize,
    pub cross_validation: Option<CvReport>,
    /// Seen-class accuracy of the final model on the training images.
    pub train_accuracy: f64,
    pub final_hinge: f64,
    pub final_satisfaction_rate: f64,
    pub wall_clock_seconds: f64,
    pub warnings: Vec<String>,
}

impl TrainReport {
    /// One JSON record per epoch, newline-terminated. Contains no timing, so
    /// equal runs produce equal bytes.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain numeric record") + "\n")
            .collect()
    }
}

/// The joint objective and its gradient for one batch.
#[derive(Debug, Clone)]
pub struct JointObjective {
    pub ranking_loss: f64,
    pub hinge: f64,
    pub ce_loss: f64,
    pub total: f64,
    pub satisfied: usize,
    pub constraints: usize,
    pub correct: usize,
    pub grads: JointModel,
}

/// Training inputs resolved to matrices for one set of training classes.
#[derive(Debug, Clone)]
pub struct Problem {
    /// Global indices of the training classes; `labels` index this list.
    pub classes: Vec<usize>,
    pub class_vectors: Matrix,
    pub features: Matrix,
    pub pooled: Matrix,
    pub labels: Vec<usize>,
    pub margin: Margin,
}

pub fn joint_objective(
    model: &JointModel,
    problem: &Problem,
    batch: &[usize],
    config: &TrainConfig,
) -> Result<JointObjective> {
    let pooled = problem.pooled.select_rows(batch);
    let features = problem.features.select_rows(batch);
    let labels: Vec<usize> = batch.iter().map(|&i| problem.labels[i]).collect();
    let reduction = config.reduction();

    let rank = ranking_loss(
        &model.transform,
        &pooled,
        &labels,
        &problem.class_vectors,
        config.lambda,
        &problem.margin,
        reduction,
    )?;
    let ce = cross_entropy_loss(
        model,
        &features,
        &labels,
        &problem.class_vectors,
        &CrossEntropyOptions {
            l2_w: 0.0,
            l2_phi: 0.0,
            reduction,
            strict_softmax: config.strict_softmax,
        },
    )?;
    let l2_w = config.l2_w();
    let w_reg = l2_w * model.bilinear.w.l2_norm_sq();

    let mut grads = ce.grads;
    for p in grads.params_mut() {
        *p = p.scale(config.ce_weight)?;
    }
    grads.transform.add_scaled_assign(&rank.grads, 1.0)?;
    grads.bilinear.w.add_scaled_assign(&model.bilinear.w, 2.0 * l2_w)?;

    let total = rank.loss + config.ce_weight * ce.data + w_reg;
    Ok(JointObjective {
        ranking_loss: rank.loss,
        hinge: rank.hinge,
        ce_loss: ce.data,
        total,
        satisfied: rank.satisfied,
        constraints: rank.constraints,
        correct: ce.correct,
        grads,
    })
}

/// Class and attribute vectors for a dataset.
pub fn label_spaces(dataset: &ZslDataset, word_space: &WordSpace, config: &TrainConfig) -> Result<LabelSpaces> {
    word_space.build_spaces(&dataset.class_names, &dataset.attribute_names, config.normalize_words)
}

/// Resolves the training images of `classes` into a [`Problem`].
pub fn prepare(
    dataset: &ZslDataset,
    spaces: &LabelSpaces,
    config: &TrainConfig,
    margin: &Margin,
    classes: &[usize],
) -> Result<(Problem, Vec<String>)> {
    let mut warnings = Vec::new();
    let local = |c: usize| classes.iter().position(|&x| x == c);
    let images: Vec<usize> = (0..dataset.n_images()).filter(|&i| local(dataset.labels[i]).is_some()).collect();
    if images.is_empty() {
        return Err(ZslError::Dataset("no training images".into()));
    }
    let labels: Vec<usize> = images.iter().map(|&i| local(dataset.labels[i]).expect("filtered")).collect();
    let features = dataset.features.select_rows(&images);

    let weights = match config.mode {
        TrainingMode::Pbt => {
            let p = dataset
                .predicate_matrix
                .as_ref()
                .ok_or_else(|| ZslError::Dataset("predicate-based training needs a predicate matrix".into()))?;
            p.select_rows(&images.iter().map(|&i| dataset.labels[i]).collect::<Vec<_>>())
        }
        TrainingMode::Ibt => match &dataset.attribute_scores {
            Some(s) => s.select_rows(&images),
            None => {
                let p = dataset.predicate_matrix.as_ref().ok_or_else(|| {
                    ZslError::Dataset("image-based training needs attribute scores or a predicate matrix".into())
                })?;
                let targets = p.select_rows(&images.iter().map(|&i| dataset.labels[i]).collect::<Vec<_>>());
                let scorer = train_attribute_scorer(&features, &targets, &config.scorer, config.seed)?;
                warnings.push("attribute scores predicted by logistic scorers".to_string());
                scorer.predict(&features)?
            }
        },
    };
    let (pooled, degenerate) = pool_rows(&weights, &spaces.attribute_vectors)?;
    if !degenerate.is_empty() {
        let w = format!("{} training image(s) have all-zero attribute weights", degenerate.len());
        log::warn!("{w}");
        warnings.push(w);
    }
    let margin = match margin {
        Margin::ZeroOne => Margin::ZeroOne,
        table => {
            table.validate_size(dataset.class_names.len())?;
            table.restrict(classes)
        }
    };
    Ok((
        Problem {
            classes: classes.to_vec(),
            class_vectors: spaces.class_vectors.select_rows(classes),
            features,
            pooled,
            labels,
            margin,
        },
        warnings,
    ))
}

/// Initial parameters for a given hidden width.
pub fn init_model(word_dim: usize, visual_dim: usize, hidden: usize, config: &TrainConfig) -> Result<JointModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let transform = TransformNet::init(
        &[word_dim, hidden, hidden, config.embed_dim],
        config.leaky_slope,
        &mut rng,
    )?;
    let bilinear = BilinearMap::init(visual_dim, config.embed_dim, &mut rng);
    JointModel::new(transform, bilinear)
}

fn full_record(model: &JointModel, problem: &Problem, config: &TrainConfig, epoch: usize) -> Result<(EpochRecord, usize)> {
    let all: Vec<usize> = (0..problem.labels.len()).collect();
    let o = joint_objective(model, problem, &all, config)?;
    Ok((
        EpochRecord {
            epoch,
            ranking_loss: o.ranking_loss,
            ce_loss: o.ce_loss,
            total: o.total,
            satisfaction_rate: if o.constraints == 0 {
                1.0
            } else {
                o.satisfied as f64 / o.constraints as f64
            },
            hinge: o.hinge,
        },
        o.correct,
    ))
}

fn diverged(epoch: usize, err: ZslError, last_good: &JointModel) -> ZslError {
    match err {
        ZslError::NonFinite { .. } | ZslError::Numerical(_) => ZslError::Diverged {
            epoch,
            detail: err.to_string(),
            last_good: Some(Box::new(last_good.clone())),
        },
        other => other,
    }
}

/// Trains one model with a fixed hidden width.
pub fn fit(problem: &Problem, hidden: usize, config: &TrainConfig) -> Result<(JointModel, Vec<EpochRecord>)> {
    config.validate()?;
    let mut model = init_model(problem.class_vectors.cols(), problem.features.cols(), hidden, config)?;
    let mut state = AdamState::new(model.params());
    let adam = config.adam();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..problem.labels.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);
    let mut best = f64::INFINITY;
    let mut stale = 0usize;

    for epoch in 1..=config.epochs {
        let last_good = model.clone();
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(config.batch_size) {
            let step = joint_objective(&model, problem, batch, config)
                .and_then(|o| adam_step(&mut model.params_mut(), &o.grads.params(), &mut state, &adam));
            step.map_err(|e| diverged(epoch, e, &last_good))?;
        }
        let (record, _) = full_record(&model, problem, config, epoch).map_err(|e| diverged(epoch, e, &last_good))?;
        if !record.total.is_finite() {
            return Err(diverged(epoch, ZslError::Numerical("non-finite loss".into()), &last_good));
        }
        log::debug!(
            "epoch {epoch}: total {:.6} ranking {:.6} ce {:.6} satisfied {:.4}",
            record.total,
            record.ranking_loss,
            record.ce_loss,
            record.satisfaction_rate
        );
        let total = record.total;
        records.push(record);
        if let Some(patience) = config.early_stop_patience {
            if total < best {
                best = total;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    log::info!("early stop after epoch {epoch}");
                    break;
                }
            }
        }
    }
    Ok((model, records))
}

/// Trains on the seen classes of `dataset`. With several hidden-width
/// candidates the width is picked by [`cross_validate`] first.
pub fn train(dataset: &ZslDataset, word_space: &WordSpace, config: &TrainConfig) -> Result<(JointModel, TrainReport)> {
    train_with_margin(dataset, word_space, config, &Margin::ZeroOne)
}

pub fn train_with_margin(
    dataset: &ZslDataset,
    word_space: &WordSpace,
    config: &TrainConfig,
    margin: &Margin,
) -> Result<(JointModel, TrainReport)> {
    config.validate()?;
    let started = Instant::now();
    let spaces = label_spaces(dataset, word_space, config)?;
    let mut warnings = spaces.warnings.clone();

    let (width, cv) = if config.hidden_widths.len() == 1 {
        (config.hidden_widths[0], None)
    } else {
        let report = cross_validate_with(dataset, &spaces, config, margin)?;
        (report.selected, Some(report))
    };

    let (problem, w) = prepare(dataset, &spaces, config, margin, &dataset.seen_classes)?;
    warnings.extend(w);
    let (model, epochs) = fit(&problem, width, config)?;
    let (last, correct) = full_record(&model, &problem, config, epochs.len())?;
    let report = TrainReport {
        epochs,
        selected_hidden_width: width,
        cross_validation: cv,
        train_accuracy: correct as f64 / problem.labels.len() as f64,
        final_hinge: last.hinge,
        final_satisfaction_rate: last.satisfaction_rate,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        warnings,
    };
    Ok((model, report))
}

/// Splits the seen classes into two folds, deterministically from `seed`.
pub fn class_folds(seen: &[usize], seed: u64) -> [Vec<usize>; 2] {
    let mut classes = seen.to_vec();
    classes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xc1a5_5f01_d5ee_d000));
    let half = classes.len().div_ceil(2);
    let mut b = classes.split_off(half);
    classes.sort_unstable();
    b.sort_unstable();
    [classes, b]
}

/// Best mean score; equal means go to the smaller width.
pub fn select_width(candidates: &[CandidateScore]) -> Option<usize> {
    candidates
        .iter()
        .max_by(|a, b| a.mean.total_cmp(&b.mean).then(b.hidden_width.cmp(&a.hidden_width)))
        .map(|c| c.hidden_width)
}

/// 2-fold cross-validation over the hidden-width candidates. Folds split the
/// seen classes, so each fold's held-out classes are scored zero-shot.
pub fn cross_validate(dataset: &ZslDataset, word_space: &WordSpace, config: &TrainConfig) -> Result<CvReport> {
    config.validate()?;
    let spaces = label_spaces(dataset, word_space, config)?;
    cross_validate_with(dataset, &spaces, config, &Margin::ZeroOne)
}

pub fn cross_validate_with(
    dataset: &ZslDataset,
    spaces: &LabelSpaces,
    config: &TrainConfig,
    margin: &Margin,
) -> Result<CvReport> {
    for &c in &dataset.seen_classes {
        if !dataset.labels.contains(&c) {
            return Err(ZslError::Dataset(format!(
                "class `{}` has no images",
                dataset.class_names[c]
            )));
        }
    }
    let folds = class_folds(&dataset.seen_classes, config.seed);
    if folds.iter().any(|f| f.len() < 2) {
        return Err(ZslError::Dataset(format!(
            "cross-validation needs at least 2 seen classes per fold, have {} seen classes",
            dataset.seen_classes.len()
        )));
    }

    let mut candidates = Vec::with_capacity(config.hidden_widths.len());
    for &width in &config.hidden_widths {
        let mut fold_scores = [0.0; 2];
        for (k, score) in fold_scores.iter_mut().enumerate() {
            let (train_classes, held_out) = (&folds[k], &folds[1 - k]);
            let (problem, _) = prepare(dataset, spaces, config, margin, train_classes)?;
            let (model, _) = fit(&problem, width, config)?;
            let images: Vec<usize> = (0..dataset.n_images())
                .filter(|&i| held_out.contains(&dataset.labels[i]))
                .collect();
            let predictions = classify(
                &model,
                &dataset.features.select_rows(&images),
                &spaces.class_vectors,
                held_out,
            )?;
            let labels: Vec<usize> = images.iter().map(|&i| dataset.labels[i]).collect();
            *score = normalized_per_class_accuracy(&predictions, &labels, held_out)?.normalized_accuracy;
        }
        log::info!("hidden width {width}: fold accuracies {fold_scores:?}");
        candidates.push(CandidateScore {
            hidden_width: width,
            fold_scores,
            mean: (fold_scores[0] + fold_scores[1]) / 2.0,
        });
    }
    let selected = select_width(&candidates).expect("validated non-empty candidates");
    Ok(CvReport {
        folds,
        candidates,
        selected,
    })
}

//! Synthetic zero-shot problems with a known generating process.
//!
//! Attribute words get random orthonormal vectors; a class is a sparse binary
//! attribute signature, and its name vector is the sum of its attribute
//! vectors plus a small perturbation. Image features are a fixed random linear map of the class
//! vector plus Gaussian noise. Unseen classes come from the same process, so
//! a model that recovers the map from seen classes transfers to them.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data_io::ZslDataset;
use crate::error::{Result, ZslError};
use crate::tensor::Matrix;
use crate::wordspace::WordSpace;

/// Scale of the per-class perturbation added to class word vectors.
pub const CLASS_PERTURBATION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_seen: usize,
    pub n_unseen: usize,
    pub n_attr: usize,
    pub word_dim: usize,
    pub vis_dim: usize,
    pub images_per_class: usize,
    /// Standard deviation of the feature noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_seen: 8,
            n_unseen: 4,
            n_attr: 12,
            word_dim: 20,
            vis_dim: 30,
            images_per_class: 40,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        self.validate_sizes()?;
        let n_classes = self.n_seen + self.n_unseen;
        if binomial(self.n_attr, active_attributes(self.n_attr)) < n_classes as f64 {
            return Err(ZslError::Config(format!(
                "{} attributes cannot give {n_classes} distinct class signatures",
                self.n_attr
            )));
        }
        Ok(())
    }

    fn validate_sizes(&self) -> Result<()> {
        if self.n_seen < 2 || self.n_unseen < 1 {
            return Err(ZslError::Config("a synthetic spec needs at least 2 seen and 1 unseen class".into()));
        }
        if self.n_attr == 0 || self.word_dim == 0 || self.vis_dim == 0 || self.images_per_class == 0 {
            return Err(ZslError::Config("synthetic dimensions must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(ZslError::Config(format!("noise must be ≥ 0, got {}", self.noise)));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.n_seen + self.n_unseen
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub dataset: ZslDataset,
    pub word_space: WordSpace,
    /// Ground-truth word → visual map, `vis_dim × word_dim`.
    pub visual_map: Matrix,
    pub warnings: Vec<String>,
}

pub fn class_name(i: usize) -> String {
    format!("class{i:02}")
}

pub fn attribute_name(i: usize) -> String {
    format!("attr{i:02}")
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Number of active attributes per generated class signature.
pub fn active_attributes(n_attr: usize) -> usize {
    n_attr.div_ceil(4).max(1)
}

/// Draws distinct binary signatures with [`active_attributes`] ones each,
/// one row per class. Unseen signatures are pairwise disjoint whenever the
/// attribute count allows it, so no two unseen classes differ by a single
/// attribute.
pub fn random_predicates(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Matrix {
    let k = active_attributes(spec.n_attr);
    let disjoint_unseen = spec.n_unseen * k <= spec.n_attr;
    let mut rows = BTreeSet::new();
    let mut unseen_used = BTreeSet::new();
    let mut m = Matrix::zeros(spec.n_classes(), spec.n_attr);
    for c in 0..spec.n_classes() {
        let mut pool: Vec<usize> = if c >= spec.n_seen && disjoint_unseen {
            (0..spec.n_attr).filter(|a| !unseen_used.contains(a)).collect()
        } else {
            (0..spec.n_attr).collect()
        };
        for attempt in 0.. {
            if attempt == 64 {
                // every free subset collides with a seen class
                pool = (0..spec.n_attr).collect();
            }
            let mut row: Vec<usize> = rand::seq::index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
            row.sort_unstable();
            if rows.insert(row.clone()) {
                for &a in &row {
                    m.set(c, a, 1.0);
                }
                if c >= spec.n_seen {
                    unseen_used.extend(row);
                }
                break;
            }
        }
    }
    m
}

/// Unit attribute vectors, mutually orthogonal when `n_attr <= word_dim`.
fn attribute_directions(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    let mut m = Matrix::zeros(spec.n_attr, spec.word_dim);
    for a in 0..spec.n_attr {
        let mut v: Vec<f64> = (0..spec.word_dim).map(|_| normal(rng)).collect();
        if a < spec.word_dim {
            // Gram-Schmidt against the earlier rows, twice for stability
            for _ in 0..2 {
                for b in 0..a {
                    let u = m.row(b);
                    let d = crate::tensor::dot(&v, u);
                    v.iter_mut().zip(u).for_each(|(x, y)| *x -= d * y);
                }
            }
        }
        let n = crate::tensor::dot(&v, &v).sqrt();
        for (dst, x) in m.row_mut(a).iter_mut().zip(&v) {
            *dst = x / n;
        }
    }
    if !m.all_finite() {
        return Err(ZslError::NonFinite { op: "attribute_directions" });
    }
    Ok(m)
}

/// Generates a dataset with random class signatures.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Synthetic> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let predicates = random_predicates(spec, &mut rng);
    generate_inner(spec, predicates, rng)
}

/// Generates a dataset from caller-chosen class signatures
/// (`(n_seen + n_unseen) × n_attr`, entries in `[0, 1]`).
pub fn generate_with_predicates(spec: &SyntheticSpec, predicates: Matrix) -> Result<Synthetic> {
    spec.validate_sizes()?;
    if predicates.shape() != (spec.n_classes(), spec.n_attr) {
        return Err(ZslError::Dimension {
            op: "generate_with_predicates",
            left: predicates.shape(),
            right: (spec.n_classes(), spec.n_attr),
        });
    }
    generate_inner(spec, predicates, ChaCha8Rng::seed_from_u64(spec.seed))
}

fn generate_inner(spec: &SyntheticSpec, predicates: Matrix, mut rng: ChaCha8Rng) -> Result<Synthetic> {
    let n_classes = spec.n_classes();
    let mut warnings = Vec::new();

    let attribute_vectors = attribute_directions(spec, &mut rng)?;
    let mut class_vectors = predicates.matmul(&attribute_vectors)?;
    for c in 0..n_classes {
        for v in class_vectors.row_mut(c) {
            *v += CLASS_PERTURBATION * normal(&mut rng);
        }
    }
    let scale = 1.0 / (spec.word_dim as f64).sqrt();
    let visual_map = Matrix::new(
        spec.vis_dim,
        spec.word_dim,
        (0..spec.vis_dim * spec.word_dim).map(|_| scale * normal(&mut rng)).collect(),
    )?;

    let n_images = n_classes * spec.images_per_class;
    let clean = class_vectors.matmul_nt(&visual_map)?;
    let mut features = Matrix::zeros(n_images, spec.vis_dim);
    let mut scores = Matrix::zeros(n_images, spec.n_attr);
    let mut labels = Vec::with_capacity(n_images);
    for c in 0..n_classes {
        for k in 0..spec.images_per_class {
            let i = c * spec.images_per_class + k;
            labels.push(c);
            for (f, &x) in features.row_mut(i).iter_mut().zip(clean.row(c)) {
                *f = x + spec.noise * normal(&mut rng);
            }
            for (s, &p) in scores.row_mut(i).iter_mut().zip(predicates.row(c)) {
                *s = (p + spec.noise * normal(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }

    let unseen: Vec<usize> = (spec.n_seen..n_classes).collect();
    if spec.noise == 0.0 {
        for (k, &a) in unseen.iter().enumerate() {
            for &b in &unseen[k + 1..] {
                if predicates.row(a) == predicates.row(b) {
                    let w = format!(
                        "unseen classes {} and {} share a predicate row; with zero noise they differ only by the class perturbation",
                        class_name(a),
                        class_name(b)
                    );
                    log::warn!("{w}");
                    warnings.push(w);
                }
            }
        }
    }

    let class_names: Vec<String> = (0..n_classes).map(class_name).collect();
    let attribute_names: Vec<String> = (0..spec.n_attr).map(attribute_name).collect();
    let mut word_space = WordSpace::new(spec.word_dim);
    for (c, name) in class_names.iter().enumerate() {
        word_space.insert(name, class_vectors.row(c).to_vec())?;
    }
    for (a, name) in attribute_names.iter().enumerate() {
        word_space.insert(name, attribute_vectors.row(a).to_vec())?;
    }

    let dataset = ZslDataset {
        features,
        labels,
        class_names,
        attribute_names,
        attribute_scores: Some(scores),
        predicate_matrix: Some(predicates),
        seen_classes: (0..spec.n_seen).collect(),
        unseen_classes: unseen,
    };
    dataset.validate()?;
    Ok(Synthetic {
        dataset,
        word_space,
        visual_map,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shapes() {
        let s = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let d = &s.dataset;
        assert_eq!(d.features.shape(), (12 * 40, 30));
        assert_eq!(d.seen_classes.len(), 8);
        assert_eq!(d.unseen_classes.len(), 4);
        assert_eq!(d.attribute_scores.as_ref().unwrap().shape(), (480, 12));
        assert_eq!(s.word_space.dim(), 20);
        assert_eq!(s.word_space.len(), 24);
        assert!(s.warnings.is_empty());
    }

    #[test]
    fn seed_determinism() {
        let a = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let b = generate_synthetic(&SyntheticSpec::default()).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.word_space, b.word_space);
        let c = generate_synthetic(&SyntheticSpec {
            seed: 1,
            ..SyntheticSpec::default()
        })
        .unwrap();
        assert_ne!(a.dataset.features, c.dataset.features);
    }

    #[test]
    fn noiseless_features_are_constant_within_class() {
        let s = generate_synthetic(&SyntheticSpec {
            noise: 0.0,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let d = &s.dataset;
        for i in 1..d.n_images() {
            if d.labels[i] == d.labels[i - 1] {
                assert_eq!(d.features.row(i), d.features.row(i - 1));
            }
        }
        // scores equal the predicate rows exactly
        let p = d.predicate_matrix.as_ref().unwrap();
        let sc = d.attribute_scores.as_ref().unwrap();
        for i in 0..d.n_images() {
            assert_eq!(sc.row(i), p.row(d.labels[i]));
        }
    }

    #[test]
    fn duplicate_unseen_signatures_warn() {
        let spec = SyntheticSpec {
            n_seen: 2,
            n_unseen: 2,
            n_attr: 3,
            noise: 0.0,
            ..SyntheticSpec::default()
        };
        let p = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 1.0], [0.0, 1.0, 1.0]]).unwrap();
        let s = generate_with_predicates(&spec, p).unwrap();
        assert_eq!(s.warnings.len(), 1);
        let d = &s.dataset;
        let a = d.features.row(2 * 40);
        let b = d.features.row(3 * 40);
        assert_ne!(a, b);
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_synthetic(&SyntheticSpec {
            n_seen: 1,
            ..SyntheticSpec::default()
        })
        .is_err());
        assert!(generate_synthetic(&SyntheticSpec {
            noise: -1.0,
            ..SyntheticSpec::default()
        })
        .is_err());
        assert!(generate_synthetic(&SyntheticSpec {
            n_attr: 2,
            ..SyntheticSpec::default()
        })
        .is_err());
    }
}

//! Triple features and the head-to-tail knowledge transfer stack.
//!
//! A triple feature is the elementwise product of the refined subject,
//! union and refined object features, concatenated with the lifted relative
//! spatial encoding. On top of it sit:
//!
//! * a codebook of one learnable codeword per relation, trained with a
//!   contrastive L1 margin loss;
//! * a coarse softmax classifier whose distribution mixes the codewords into
//!   a hallucinated feature;
//! * additive-attention fusion of the triple feature with its hallucination;
//! * calibration of the fused feature by `alpha · max(p)`;
//! * a bias-free linear relation classifier, optionally offset by a
//!   log-frequency prior indexed by the subject and object classes.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{DiffTensor, Graph, NumericsError, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RelationError {
    #[error("relation count must be positive")]
    NoRelations,
    #[error("relation label {label} out of range for {n_relations} relations")]
    InvalidLabel { label: usize, n_relations: usize },
    #[error("class pair ({subject}, {object}) out of range for {n_classes} classes")]
    InvalidClass {
        subject: usize,
        object: usize,
        n_classes: usize,
    },
    #[error("feature/label count mismatch: {features} features, {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("probabilities sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("margin must be positive, got {0}")]
    BadMargin(f64),
    #[error("bias prior enabled but subject/object classes are missing")]
    MissingClasses,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// One learnable codeword per relation plus the inter-relation margin.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationCodebook {
    pub codewords: DiffTensor,
    pub margin: f64,
}

impl RelationCodebook {
    pub fn n_relations(&self) -> usize {
        self.codewords.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.codewords.shape()[1]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let d = self.dim();
        &self.codewords.value()[r * d..(r + 1) * d]
    }
}

/// Standard deviation of the draw used for relations with no samples.
pub const UNSEEN_CODEWORD_STD: f64 = 0.01;

/// `[f̃_i ⊙ f_u ⊙ f̃_j ; s_ij]`.
pub fn triple_feature(
    g: &mut Graph<'_>,
    f_i: Var,
    f_u: Var,
    f_j: Var,
    s_lifted: Var,
) -> Result<Var, RelationError> {
    let prod = g.mul(f_i, f_u)?;
    let prod = g.mul(prod, f_j)?;
    Ok(g.concat(prod, s_lifted)?)
}

/// Initialises codewords as per-relation cluster centres.
///
/// With one cluster per relation, Lloyd's algorithm converges in a single
/// assignment step to the mean of the relation's samples. Relations without
/// samples draw their codeword from `N(0, 0.01²)`.
pub fn init_codebook(
    features: &[Vec<f64>],
    labels: &[usize],
    n_relations: usize,
    dim: usize,
    margin: f64,
    rng: &mut impl Rng,
) -> Result<RelationCodebook, RelationError> {
    if n_relations == 0 {
        return Err(RelationError::NoRelations);
    }
    if !(margin > 0.0) {
        return Err(RelationError::BadMargin(margin));
    }
    if features.len() != labels.len() {
        return Err(RelationError::LengthMismatch {
            features: features.len(),
            labels: labels.len(),
        });
    }
    let mut sums = vec![0.0; n_relations * dim];
    let mut counts = vec![0usize; n_relations];
    for (f, &r) in features.iter().zip(labels) {
        if r >= n_relations {
            return Err(RelationError::InvalidLabel {
                label: r,
                n_relations,
            });
        }
        if f.len() != dim {
            return Err(NumericsError::ShapeMismatch {
                op: "init_codebook",
                left: vec![dim],
                right: vec![f.len()],
            }
            .into());
        }
        counts[r] += 1;
        for (s, x) in sums[r * dim..(r + 1) * dim].iter_mut().zip(f) {
            *s += x;
        }
    }
    let normal = Normal::new(0.0, UNSEEN_CODEWORD_STD).expect("valid std");
    for r in 0..n_relations {
        let row = &mut sums[r * dim..(r + 1) * dim];
        if counts[r] == 0 {
            row.iter_mut().for_each(|x| *x = normal.sample(rng));
        } else {
            let n = counts[r] as f64;
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    Ok(RelationCodebook {
        codewords: DiffTensor::new(vec![n_relations, dim], sums, true)?,
        margin,
    })
}

/// `Σ_r [Y·dis(f, d_r) + (1 − Y)·max(0, M − dis(f, d_r))]` with mean-abs `dis`.
pub fn codeword_loss(
    g: &mut Graph<'_>,
    f: Var,
    label: usize,
    codewords: Var,
    margin: f64,
) -> Result<Var, RelationError> {
    let n_relations = g.shape(codewords).first().copied().unwrap_or(0);
    if label >= n_relations {
        return Err(RelationError::InvalidLabel { label, n_relations });
    }
    if !(margin > 0.0) {
        return Err(RelationError::BadMargin(margin));
    }
    let dist = g.row_l1_distances(codewords, f)?;
    let mut pos = vec![0.0; n_relations];
    pos[label] = 1.0;
    let neg: Vec<f64> = pos.iter().map(|y| 1.0 - y).collect();
    let pos = g.vector(pos, false);
    let neg = g.vector(neg, false);
    let pull = g.dot(pos, dist)?;
    let gap = g.scale(dist, -1.0);
    let gap = g.add_scalar(gap, margin);
    let hinge = g.relu(gap);
    let push = g.dot(neg, hinge)?;
    Ok(g.add(pull, push)?)
}

/// Logits of the coarse relation classifier.
pub fn coarse_logits(
    g: &mut Graph<'_>,
    f: Var,
    head: Var,
    bias: Var,
) -> Result<Var, RelationError> {
    let z = g.matvec(head, f)?;
    Ok(g.add(z, bias)?)
}

/// Coarse distribution `p = softmax(head · f + bias)`.
pub fn coarse_predict(
    g: &mut Graph<'_>,
    f: Var,
    head: Var,
    bias: Var,
) -> Result<Var, RelationError> {
    let z = coarse_logits(g, f, head, bias)?;
    Ok(g.softmax(z)?)
}

/// `Σ_r p_r d_r`.
pub fn hallucinate(g: &mut Graph<'_>, p: Var, codewords: Var) -> Result<Var, RelationError> {
    let total: f64 = g.value(p).iter().sum();
    if (total - 1.0).abs() > 1e-5 || g.value(p).iter().any(|&x| x < 0.0) {
        return Err(RelationError::NotNormalized(total));
    }
    Ok(g.mat_t_vec(codewords, p)?)
}

/// Additive-attention fusion; returns the fused feature and its coefficient.
pub fn fuse(g: &mut Graph<'_>, f: Var, f_hall: Var, w_f: Var) -> Result<(Var, Var), RelationError> {
    let sum = g.add(f, f_hall)?;
    let z = g.dot(w_f, sum)?;
    let a = g.relu(z);
    let scaled = g.scale_by(f_hall, a)?;
    Ok((g.add(f, scaled)?, a))
}

/// `alpha · max(p) · f`. With `detach_max`, `max(p)` is treated as a constant.
pub fn calibrate(
    g: &mut Graph<'_>,
    f: Var,
    p: Var,
    alpha: f64,
    detach_max: bool,
) -> Result<Var, RelationError> {
    let m = g.max(p)?;
    let m = if detach_max { g.detach(m) } else { m };
    let scaled = g.scale_by(f, m)?;
    Ok(g.scale(scaled, alpha))
}

/// Log-frequency prior over relations for each ordered (subject, object) class pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasTable {
    n_classes: usize,
    n_relations: usize,
    log_probs: Vec<f64>,
}

impl BiasTable {
    /// Add-one smoothed empirical `log p(r | subject class, object class)`.
    pub fn from_triples(
        triples: impl IntoIterator<Item = (usize, usize, usize)>,
        n_classes: usize,
        n_relations: usize,
    ) -> Result<Self, RelationError> {
        if n_relations == 0 {
            return Err(RelationError::NoRelations);
        }
        let mut counts = vec![1.0f64; n_classes * n_classes * n_relations];
        for (s, r, o) in triples {
            if s >= n_classes || o >= n_classes {
                return Err(RelationError::InvalidClass {
                    subject: s,
                    object: o,
                    n_classes,
                });
            }
            if r >= n_relations {
                return Err(RelationError::InvalidLabel {
                    label: r,
                    n_relations,
                });
            }
            counts[(s * n_classes + o) * n_relations + r] += 1.0;
        }
        for row in counts.chunks_exact_mut(n_relations) {
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|c| *c = (*c / total).ln());
        }
        Ok(Self {
            n_classes,
            n_relations,
            log_probs: counts,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_relations(&self) -> usize {
        self.n_relations
    }

    pub fn row(&self, subject: usize, object: usize) -> Result<&[f64], RelationError> {
        if subject >= self.n_classes || object >= self.n_classes {
            return Err(RelationError::InvalidClass {
                subject,
                object,
                n_classes: self.n_classes,
            });
        }
        let start = (subject * self.n_classes + object) * self.n_relations;
        Ok(&self.log_probs[start..start + self.n_relations])
    }
}

/// `final_head · f`, plus the class-pair log-prior when a bias table is given.
pub fn relation_logits(
    g: &mut Graph<'_>,
    f: Var,
    final_head: Var,
    bias: Option<&BiasTable>,
    classes: Option<(usize, usize)>,
) -> Result<Var, RelationError> {
    let z = g.matvec(final_head, f)?;
    match bias {
        None => Ok(z),
        Some(table) => {
            let (s, o) = classes.ok_or(RelationError::MissingClasses)?;
            let prior = g.vector(table.row(s, o)?.to_vec(), false);
            Ok(g.add(z, prior)?)
        }
    }
}

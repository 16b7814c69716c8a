//! Learnable parameter blocks and the forward pass shared by training and
//! evaluation.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{fallback_union, DetectionRecord, SceneSample};
use crate::geometry::{lift_spatial, relative_spatial, BoundingBox, GeometryError};
use crate::numerics::{DiffTensor, Graph, NumericsError, Var};
use crate::relation_head::{
    calibrate, coarse_logits, fuse, hallucinate, relation_logits, triple_feature, BiasTable,
    RelationError,
};
use crate::scene_interaction::{
    interaction_coefficient, object_logits, refine_object_feature, SceneError,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Relation(#[from] RelationError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Module switches: scene-object interaction, knowledge transfer, feature
/// calibration and the frequency prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub so: bool,
    pub kt: bool,
    pub fc: bool,
    pub bias: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            so: true,
            kt: true,
            fc: true,
            bias: true,
        }
    }
}

impl Toggles {
    pub const BASELINE: Toggles = Toggles {
        so: false,
        kt: false,
        fc: false,
        bias: false,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_object_classes: usize,
    pub n_relations: usize,
    pub d_v: usize,
    pub d_s: usize,
    pub alpha: f64,
    pub margin: f64,
    pub toggles: Toggles,
    /// Treat `max(p)` in the calibration as a constant.
    pub detach_calibration: bool,
    /// Feed the coarse classifier a stop-gradient copy of the triple feature.
    pub detach_coarse_input: bool,
}

impl ModelConfig {
    pub fn d_t(&self) -> usize {
        self.d_v + self.d_s
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_object_classes == 0 || self.n_relations < 2 || self.d_v == 0 || self.d_s == 0 {
            return Err(ModelError::Config(
                "class/relation counts and dims must be positive".into(),
            ));
        }
        if !(self.alpha > 0.0) {
            return Err(ModelError::Config(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.margin > 0.0) {
            return Err(ModelError::Config(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        if self.toggles.fc && !self.toggles.kt {
            return Err(ModelError::Config(
                "feature calibration requires knowledge transfer (it consumes the coarse distribution)".into(),
            ));
        }
        Ok(())
    }
}

/// Every learnable block, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub scene_proj: DiffTensor,
    pub scene_proj_bias: DiffTensor,
    pub w_g: DiffTensor,
    pub multilabel_head: DiffTensor,
    pub multilabel_bias: DiffTensor,
    pub object_head: DiffTensor,
    pub object_bias: DiffTensor,
    pub lift_w: DiffTensor,
    pub lift_b: DiffTensor,
    pub coarse_head: DiffTensor,
    pub coarse_bias: DiffTensor,
    pub codebook: DiffTensor,
    pub w_f: DiffTensor,
    pub final_head: DiffTensor,
}

/// Which module a parameter block belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockGroup {
    Base,
    SceneObject,
    KnowledgeTransfer,
}

pub const BLOCK_NAMES: [&str; 14] = [
    "scene_proj",
    "scene_proj_bias",
    "w_g",
    "multilabel_head",
    "multilabel_bias",
    "object_head",
    "object_bias",
    "lift_w",
    "lift_b",
    "coarse_head",
    "coarse_bias",
    "codebook",
    "w_f",
    "final_head",
];

pub fn block_group(name: &str) -> BlockGroup {
    match name {
        "scene_proj" | "scene_proj_bias" | "w_g" | "multilabel_head" | "multilabel_bias" => {
            BlockGroup::SceneObject
        }
        "coarse_head" | "coarse_bias" | "codebook" | "w_f" => BlockGroup::KnowledgeTransfer,
        _ => BlockGroup::Base,
    }
}

fn gaussian(rng: &mut impl Rng, shape: Vec<usize>, mean: f64, std: f64) -> DiffTensor {
    let n: usize = shape.iter().product();
    let normal = Normal::new(mean, std).expect("valid std");
    DiffTensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect(), true)
        .expect("shape matches")
}

impl ModelParams {
    /// Initialises every block; draws happen in a fixed order regardless of
    /// which modules are enabled.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (c, r, dv, ds, dt) = (
            cfg.n_object_classes,
            cfg.n_relations,
            cfg.d_v,
            cfg.d_s,
            cfg.d_t(),
        );
        let mut identity = vec![0.0; dv * dv];
        for i in 0..dv {
            identity[i * dv + i] = 1.0;
        }
        Self {
            scene_proj: DiffTensor::new(vec![dv, dv], identity, true).expect("square"),
            scene_proj_bias: DiffTensor::zeros(vec![dv], true),
            w_g: gaussian(rng, vec![dv], 0.5 / dv as f64, 0.1 / (dv as f64).sqrt()),
            multilabel_head: gaussian(rng, vec![c, dv], 0.0, 0.01),
            multilabel_bias: DiffTensor::zeros(vec![c], true),
            object_head: gaussian(rng, vec![c, dv], 0.0, 0.01),
            object_bias: DiffTensor::zeros(vec![c], true),
            lift_w: gaussian(rng, vec![ds, 5], 0.0, 1.0 / 5f64.sqrt()),
            lift_b: DiffTensor::new(vec![ds], vec![0.1; ds], true).expect("vector"),
            coarse_head: gaussian(rng, vec![r, dt], 0.0, 0.01),
            coarse_bias: DiffTensor::zeros(vec![r], true),
            codebook: DiffTensor::zeros(vec![r, dt], true),
            w_f: gaussian(rng, vec![dt], 0.5 / dt as f64, 0.1 / (dt as f64).sqrt()),
            final_head: gaussian(rng, vec![r, dt], 0.0, 0.01),
        }
    }

    pub fn blocks(&self) -> [(&'static str, &DiffTensor); 14] {
        [
            ("scene_proj", &self.scene_proj),
            ("scene_proj_bias", &self.scene_proj_bias),
            ("w_g", &self.w_g),
            ("multilabel_head", &self.multilabel_head),
            ("multilabel_bias", &self.multilabel_bias),
            ("object_head", &self.object_head),
            ("object_bias", &self.object_bias),
            ("lift_w", &self.lift_w),
            ("lift_b", &self.lift_b),
            ("coarse_head", &self.coarse_head),
            ("coarse_bias", &self.coarse_bias),
            ("codebook", &self.codebook),
            ("w_f", &self.w_f),
            ("final_head", &self.final_head),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut DiffTensor); 14] {
        [
            ("scene_proj", &mut self.scene_proj),
            ("scene_proj_bias", &mut self.scene_proj_bias),
            ("w_g", &mut self.w_g),
            ("multilabel_head", &mut self.multilabel_head),
            ("multilabel_bias", &mut self.multilabel_bias),
            ("object_head", &mut self.object_head),
            ("object_bias", &mut self.object_bias),
            ("lift_w", &mut self.lift_w),
            ("lift_b", &mut self.lift_b),
            ("coarse_head", &mut self.coarse_head),
            ("coarse_bias", &mut self.coarse_bias),
            ("codebook", &mut self.codebook),
            ("w_f", &mut self.w_f),
            ("final_head", &mut self.final_head),
        ]
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut DiffTensor> {
        self.blocks_mut()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
    }

    /// Shapes each block must have under `cfg`.
    pub fn expected_shapes(cfg: &ModelConfig) -> [(&'static str, Vec<usize>); 14] {
        let (c, r, dv, ds, dt) = (
            cfg.n_object_classes,
            cfg.n_relations,
            cfg.d_v,
            cfg.d_s,
            cfg.d_t(),
        );
        [
            ("scene_proj", vec![dv, dv]),
            ("scene_proj_bias", vec![dv]),
            ("w_g", vec![dv]),
            ("multilabel_head", vec![c, dv]),
            ("multilabel_bias", vec![c]),
            ("object_head", vec![c, dv]),
            ("object_bias", vec![c]),
            ("lift_w", vec![ds, 5]),
            ("lift_b", vec![ds]),
            ("coarse_head", vec![r, dt]),
            ("coarse_bias", vec![r]),
            ("codebook", vec![r, dt]),
            ("w_f", vec![dt]),
            ("final_head", vec![r, dt]),
        ]
    }
}

/// Parameter blocks registered on one graph.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub scene_proj: Var,
    pub scene_proj_bias: Var,
    pub w_g: Var,
    pub multilabel_head: Var,
    pub multilabel_bias: Var,
    pub object_head: Var,
    pub object_bias: Var,
    pub lift_w: Var,
    pub lift_b: Var,
    pub coarse_head: Var,
    pub coarse_bias: Var,
    pub codebook: Var,
    pub w_f: Var,
    pub final_head: Var,
}

impl ParamVars {
    pub fn register<'a>(g: &mut Graph<'a>, p: &'a ModelParams) -> Self {
        Self {
            scene_proj: g.param(&p.scene_proj),
            scene_proj_bias: g.param(&p.scene_proj_bias),
            w_g: g.param(&p.w_g),
            multilabel_head: g.param(&p.multilabel_head),
            multilabel_bias: g.param(&p.multilabel_bias),
            object_head: g.param(&p.object_head),
            object_bias: g.param(&p.object_bias),
            lift_w: g.param(&p.lift_w),
            lift_b: g.param(&p.lift_b),
            coarse_head: g.param(&p.coarse_head),
            coarse_bias: g.param(&p.coarse_bias),
            codebook: g.param(&p.codebook),
            w_f: g.param(&p.w_f),
            final_head: g.param(&p.final_head),
        }
    }

    pub fn in_order(&self) -> [Var; 14] {
        [
            self.scene_proj,
            self.scene_proj_bias,
            self.w_g,
            self.multilabel_head,
            self.multilabel_bias,
            self.object_head,
            self.object_bias,
            self.lift_w,
            self.lift_b,
            self.coarse_head,
            self.coarse_bias,
            self.codebook,
            self.w_f,
            self.final_head,
        ]
    }
}

/// Per-(subject class, object class, relation) training counts behind the prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorCount {
    pub subject_class: usize,
    pub object_class: usize,
    pub relation: usize,
    pub count: u64,
}

/// Parameters plus the precomputed, non-learned statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub class_weights: Vec<f64>,
    pub prior_counts: Vec<PriorCount>,
    bias: Option<BiasTable>,
}

impl Model {
    pub fn new(
        config: ModelConfig,
        params: ModelParams,
        class_weights: Vec<f64>,
        prior_counts: Vec<PriorCount>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if class_weights.len() != config.n_object_classes {
            return Err(ModelError::Config(format!(
                "expected {} class weights, got {}",
                config.n_object_classes,
                class_weights.len()
            )));
        }
        let bias = if config.toggles.bias {
            let triples = prior_counts.iter().flat_map(|p| {
                std::iter::repeat((p.subject_class, p.relation, p.object_class))
                    .take(p.count as usize)
            });
            Some(BiasTable::from_triples(
                triples,
                config.n_object_classes,
                config.n_relations,
            )?)
        } else {
            None
        };
        Ok(Self {
            config,
            params,
            class_weights,
            prior_counts,
            bias,
        })
    }

    pub fn bias_table(&self) -> Option<&BiasTable> {
        self.bias.as_ref()
    }

    /// Encodes the raw scene feature (`f^s`); only used with scene-object interaction.
    pub fn scene_feature(
        &self,
        g: &mut Graph<'_>,
        vars: &ParamVars,
        raw: &[f64],
    ) -> Result<Var, ModelError> {
        let x = g.vector(raw.to_vec(), false);
        let z = g.matvec(vars.scene_proj, x)?;
        Ok(g.add(z, vars.scene_proj_bias)?)
    }

    /// Refined object features and object-class logits.
    pub fn forward_objects(
        &self,
        g: &mut Graph<'_>,
        vars: &ParamVars,
        input: &SceneInput,
    ) -> Result<ObjectStage, ModelError> {
        let scene = if self.config.toggles.so {
            Some(self.scene_feature(g, vars, &input.scene_feature)?)
        } else {
            None
        };
        let mut refined = Vec::with_capacity(input.features.len());
        let mut logits = Vec::with_capacity(input.features.len());
        for f in &input.features {
            let f_o = g.vector(f.clone(), false);
            let f = match scene {
                Some(f_s) => {
                    let a = interaction_coefficient(g, f_o, f_s, vars.w_g)?;
                    refine_object_feature(g, f_o, f_s, a)?
                }
                None => f_o,
            };
            logits.push(object_logits(g, f, vars.object_head, vars.object_bias)?);
            refined.push(f);
        }
        Ok(ObjectStage {
            scene,
            refined,
            object_logits: logits,
        })
    }

    /// Relation logits for each requested ordered pair.
    ///
    /// `classes` supplies the subject/object classes the prior is indexed by.
    pub fn forward_pairs(
        &self,
        g: &mut Graph<'_>,
        vars: &ParamVars,
        input: &SceneInput,
        objects: &ObjectStage,
        pairs: &[(usize, usize)],
        classes: Option<&[usize]>,
    ) -> Result<Vec<PairOutput>, ModelError> {
        let t = self.config.toggles;
        let bias = if t.bias { self.bias.as_ref() } else { None };
        if bias.is_some() && classes.is_none() {
            return Err(RelationError::MissingClasses.into());
        }
        pairs
            .iter()
            .map(|&(i, j)| {
                let f_u = g.vector(input.union(i, j), false);
                let s_raw = relative_spatial(&input.boxes[i], &input.boxes[j]);
                let s = lift_spatial(g, &s_raw, vars.lift_w, vars.lift_b)?;
                let triple = triple_feature(g, objects.refined[i], f_u, objects.refined[j], s)?;
                let (feature, coarse) = if t.kt {
                    let coarse_in = if self.config.detach_coarse_input {
                        g.detach(triple)
                    } else {
                        triple
                    };
                    let z = coarse_logits(g, coarse_in, vars.coarse_head, vars.coarse_bias)?;
                    let p = g.softmax(z)?;
                    let hall = hallucinate(g, p, vars.codebook)?;
                    let (fused, _) = fuse(g, triple, hall, vars.w_f)?;
                    let out = if t.fc {
                        calibrate(
                            g,
                            fused,
                            p,
                            self.config.alpha,
                            self.config.detach_calibration,
                        )?
                    } else {
                        fused
                    };
                    (out, Some((z, p)))
                } else {
                    (triple, None)
                };
                let cls = classes.map(|c| (c[i], c[j]));
                let logits = relation_logits(g, feature, vars.final_head, bias, cls)?;
                Ok(PairOutput {
                    subject: i,
                    object: j,
                    triple,
                    coarse_logits: coarse.map(|c| c.0),
                    coarse_probs: coarse.map(|c| c.1),
                    logits,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ObjectStage {
    pub scene: Option<Var>,
    pub refined: Vec<Var>,
    pub object_logits: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct PairOutput {
    pub subject: usize,
    pub object: usize,
    pub triple: Var,
    pub coarse_logits: Option<Var>,
    pub coarse_probs: Option<Var>,
    pub logits: Var,
}

/// Model-facing view of one image: boxes, features and union features.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneInput {
    pub boxes: Vec<BoundingBox>,
    pub features: Vec<Vec<f64>>,
    pub scene_feature: Vec<f64>,
    unions: Vec<((usize, usize), Vec<f64>)>,
}

impl SceneInput {
    pub fn from_scene(s: &SceneSample) -> Self {
        Self {
            boxes: s.objects.iter().map(|o| o.bbox).collect(),
            features: s.objects.iter().map(|o| o.feature.clone()).collect(),
            scene_feature: s.scene_feature.clone(),
            unions: s
                .union_features
                .iter()
                .map(|u| ((u.subject, u.object), u.feature.clone()))
                .collect(),
        }
    }

    /// Detected objects with the image's scene feature; union features use the fallback.
    pub fn from_detections(rec: &DetectionRecord, scene_feature: &[f64]) -> Self {
        Self {
            boxes: rec.detections.iter().map(|d| d.bbox).collect(),
            features: rec.detections.iter().map(|d| d.feature.clone()).collect(),
            scene_feature: scene_feature.to_vec(),
            unions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn union(&self, i: usize, j: usize) -> Vec<f64> {
        self.unions
            .iter()
            .find(|(p, _)| *p == (i, j))
            .map(|(_, f)| f.clone())
            .unwrap_or_else(|| fallback_union(&self.features[i], &self.features[j]))
    }

    /// All ordered pairs `(i, j)` with `i != j`, row-major.
    pub fn all_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.len();
        (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect()
    }
}

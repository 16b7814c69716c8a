//! Composite loss, the SGD training loop and the ablation ladder.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, DetectionRecord, SceneSample, NONE_RELATION};
use crate::evaluation::{evaluate, EvalError, MetricsReport, Task};
use crate::model::{
    block_group, BlockGroup, Model, ModelConfig, ModelError, ModelParams, ParamVars, PriorCount,
    SceneInput, Toggles,
};
use crate::numerics::{Graph, NumericsError, Var};
use crate::relation_head::{codeword_loss, init_codebook};
use crate::scene_interaction::{class_weights, multilabel_target, scene_multilabel_loss};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset has no training scenes")]
    EmptyDataset,
    #[error("loss component `{component}` is not finite ({value})")]
    NonFinite { component: &'static str, value: f64 },
    #[error("training diverged in epoch {epoch}: {source}")]
    Diverged {
        epoch: usize,
        #[source]
        source: Box<TrainError>,
        /// Parameters at the end of the last completed epoch.
        last_good: Box<Model>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        TrainError::Model(e.into())
    }
}

impl From<crate::relation_head::RelationError> for TrainError {
    fn from(e: crate::relation_head::RelationError) -> Self {
        TrainError::Model(e.into())
    }
}

impl From<crate::scene_interaction::SceneError> for TrainError {
    fn from(e: crate::scene_interaction::SceneError) -> Self {
        TrainError::Model(e.into())
    }
}

/// Training hyperparameters; keys are flat so they mirror CLI flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    pub momentum: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub margin: f64,
    pub d_s: usize,
    pub so: bool,
    pub kt: bool,
    pub fc: bool,
    pub bias: bool,
    pub seed: u64,
    /// Sampled none-pairs per positive pair.
    pub none_ratio: f64,
    pub max_none_per_scene: usize,
    pub detach_calibration: bool,
    pub detach_coarse_input: bool,
    /// How per-pair and per-object losses combine within a scene.
    pub reduction: Reduction,
    /// Rescale each block's step gradient to at most this L2 norm; 0 disables.
    pub grad_clip: f64,
    /// Blocks set to zero at initialisation and never updated.
    pub frozen_zero: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            alpha: 10.0,
            lr: 0.001,
            epochs: 40,
            momentum: 0.9,
            lr_decay_factor: 0.5,
            lr_decay_every: 10,
            margin: 1.0,
            d_s: 16,
            so: true,
            kt: true,
            fc: true,
            bias: true,
            seed: 0,
            none_ratio: 1.0,
            max_none_per_scene: 16,
            detach_calibration: false,
            detach_coarse_input: true,
            reduction: Reduction::Sum,
            grad_clip: 1.0,
            frozen_zero: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn toggles(&self) -> Toggles {
        Toggles {
            so: self.so,
            kt: self.kt,
            fc: self.fc,
            bias: self.bias,
        }
    }

    pub fn with_toggles(&self, t: Toggles) -> Self {
        Self {
            so: t.so,
            kt: t.kt,
            fc: t.fc,
            bias: t.bias,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return bad(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if !(self.alpha > 0.0) {
            return bad(format!("alpha must be > 0, got {}", self.alpha));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.lr_decay_factor > 0.0) || self.lr_decay_every == 0 {
            return bad("lr decay needs a positive factor and interval".into());
        }
        if !(self.grad_clip >= 0.0) {
            return bad(format!("grad_clip must be >= 0, got {}", self.grad_clip));
        }
        if !(self.none_ratio >= 0.0) {
            return bad(format!("none_ratio must be >= 0, got {}", self.none_ratio));
        }
        if self.fc && !self.kt {
            return bad(
                "fc requires kt: calibration consumes the coarse relation distribution".into(),
            );
        }
        for name in &self.frozen_zero {
            if !crate::model::BLOCK_NAMES.contains(&name.as_str()) {
                return bad(format!("unknown parameter block `{name}`"));
            }
        }
        Ok(())
    }

    pub fn model_config(
        &self,
        n_object_classes: usize,
        n_relations: usize,
        d_v: usize,
    ) -> ModelConfig {
        ModelConfig {
            n_object_classes,
            n_relations,
            d_v,
            d_s: self.d_s,
            alpha: self.alpha,
            margin: self.margin,
            toggles: self.toggles(),
            detach_calibration: self.detach_calibration,
            detach_coarse_input: self.detach_coarse_input,
        }
    }

    /// Learning rate in effect during 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr
            * self
                .lr_decay_factor
                .powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Loss components of one step; absent terms belong to disabled modules.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub scene: Option<Var>,
    pub coarse: Option<Var>,
    pub relation: Var,
    pub codeword: Option<Var>,
    pub object: Var,
}

fn check(g: &Graph<'_>, v: Var, component: &'static str) -> Result<(), TrainError> {
    let value = g.item(v);
    if value.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFinite { component, value })
    }
}

/// `L_s + L_p + L_rel + ε·L_d + L_obj`; errors name the first non-finite term.
pub fn total_loss(g: &mut Graph<'_>, terms: &LossTerms, epsilon: f64) -> Result<Var, TrainError> {
    let named = [
        (terms.scene, "scene"),
        (terms.coarse, "coarse"),
        (Some(terms.relation), "relation"),
        (terms.codeword, "codeword"),
        (Some(terms.object), "object"),
    ];
    for (v, name) in named {
        if let Some(v) = v {
            check(g, v, name)?;
        }
    }
    let mut parts = vec![terms.relation, terms.object];
    parts.extend(terms.scene);
    parts.extend(terms.coarse);
    if let Some(d) = terms.codeword {
        parts.push(g.scale(d, epsilon));
    }
    Ok(g.sum_scalars(&parts)?)
}

/// Per-epoch averages written to the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_relation: f64,
    pub loss_object: f64,
    pub loss_scene: Option<f64>,
    pub loss_coarse: Option<f64>,
    pub loss_codeword: Option<f64>,
    pub train_pair_accuracy: f64,
    pub train_object_accuracy: f64,
}

/// Positive pairs of `scene` followed by sampled none-pairs, with labels.
pub fn training_pairs(
    scene: &SceneSample,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<((usize, usize), usize)> {
    let mut out: Vec<((usize, usize), usize)> = scene
        .gt_triples
        .iter()
        .map(|t| ((t.subject, t.object), t.relation))
        .collect();
    let related: HashSet<(usize, usize)> = out.iter().map(|(p, _)| *p).collect();
    let n = scene.objects.len();
    let mut free: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .filter(|p| !related.contains(p))
        .collect();
    let want = ((out.len() as f64 * cfg.none_ratio).round() as usize)
        .min(cfg.max_none_per_scene)
        .min(free.len());
    let (picked, _) = free.partial_shuffle(rng, want);
    out.extend(picked.iter().map(|&p| (p, NONE_RELATION)));
    out
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |b, (i, &x)| if x > b.1 { (i, x) } else { b },
        )
        .0
}

/// Training statistics fixed before the first step: class weights and the prior.
pub fn dataset_statistics(dataset: &Dataset) -> Result<(Vec<f64>, Vec<PriorCount>), TrainError> {
    let c = dataset.meta.n_object_classes;
    let mut presence = vec![0u64; c];
    let mut counts: HashMap<(usize, usize, usize), u64> = HashMap::new();
    for s in &dataset.train {
        let mut seen = vec![false; c];
        for o in &s.objects {
            seen[o.label] = true;
        }
        for (p, present) in presence.iter_mut().zip(seen) {
            *p += present as u64;
        }
        for t in &s.gt_triples {
            let key = (
                s.objects[t.subject].label,
                s.objects[t.object].label,
                t.relation,
            );
            *counts.entry(key).or_default() += 1;
        }
    }
    let mut prior: Vec<PriorCount> = counts
        .into_iter()
        .map(
            |((subject_class, object_class, relation), count)| PriorCount {
                subject_class,
                object_class,
                relation,
                count,
            },
        )
        .collect();
    prior.sort_by_key(|p| (p.subject_class, p.object_class, p.relation));
    Ok((class_weights(&presence)?, prior))
}

/// Builds the untrained model: parameters, statistics and (with KT) the codebook.
pub fn init_model(dataset: &Dataset, cfg: &TrainConfig) -> Result<Model, TrainError> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let meta = dataset.meta;
    let mcfg = cfg.model_config(meta.n_object_classes, meta.n_relations, meta.d_v);
    let mut params = ModelParams::init(&mcfg, &mut stream(cfg.seed, 10));
    for name in &cfg.frozen_zero {
        if let Some(t) = params.block_mut(name) {
            t.value_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let (weights, prior) = dataset_statistics(dataset)?;
    let mut model = Model::new(mcfg, params, weights, prior)?;
    if cfg.kt {
        let mut pair_rng = stream(cfg.seed, 11);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for scene in &dataset.train {
            let pairs = training_pairs(scene, cfg, &mut pair_rng);
            let input = SceneInput::from_scene(scene);
            let mut g = Graph::new();
            let vars = ParamVars::register(&mut g, &model.params);
            let stage = model.forward_objects(&mut g, &vars, &input)?;
            let idx: Vec<(usize, usize)> = pairs.iter().map(|p| p.0).collect();
            let outs =
                model.forward_pairs(&mut g, &vars, &input, &stage, &idx, Some(&scene.labels()))?;
            for (o, (_, r)) in outs.iter().zip(&pairs) {
                feats.push(g.value(o.triple).to_vec());
                labels.push(*r);
            }
        }
        let book = init_codebook(
            &feats,
            &labels,
            meta.n_relations,
            model.config.d_t(),
            cfg.margin,
            &mut stream(cfg.seed, 12),
        )?;
        let frozen = cfg.frozen_zero.iter().any(|b| b == "codebook");
        if !frozen {
            model.params.codebook = book.codewords;
        }
    }
    Ok(model)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Loss values and hit counts of one scene step.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub total: f64,
    pub relation: f64,
    pub object: f64,
    pub scene: Option<f64>,
    pub coarse: Option<f64>,
    pub codeword: Option<f64>,
    pub pair_hits: usize,
    pub pairs: usize,
    pub object_hits: usize,
    pub objects: usize,
}

fn reduce(g: &mut Graph<'_>, terms: &[Var], how: Reduction) -> Result<Var, TrainError> {
    let s = g.sum_scalars(terms)?;
    Ok(match how {
        Reduction::Sum => s,
        Reduction::Mean => g.scale(s, 1.0 / terms.len() as f64),
    })
}

/// Gradients of the total loss for one scene, in block order.
pub fn scene_gradients(
    model: &Model,
    cfg: &TrainConfig,
    scene: &SceneSample,
    pairs: &[((usize, usize), usize)],
) -> Result<(Vec<Vec<f64>>, StepStats), TrainError> {
    let t = model.config.toggles;
    let labels = scene.labels();
    let input = SceneInput::from_scene(scene);
    let mut g = Graph::new();
    let vars = ParamVars::register(&mut g, &model.params);
    let stage = model.forward_objects(&mut g, &vars, &input)?;
    let idx: Vec<(usize, usize)> = pairs.iter().map(|p| p.0).collect();
    let outs = model.forward_pairs(&mut g, &vars, &input, &stage, &idx, Some(&labels))?;

    let mut rel = Vec::new();
    let mut coarse = Vec::new();
    let mut code = Vec::new();
    let mut pair_hits = 0;
    for (o, &(_, r)) in outs.iter().zip(pairs) {
        rel.push(g.cross_entropy(o.logits, r)?);
        pair_hits += (argmax(g.value(o.logits)) == r) as usize;
        if let Some(z) = o.coarse_logits {
            coarse.push(g.cross_entropy(z, r)?);
            code.push(codeword_loss(
                &mut g,
                o.triple,
                r,
                vars.codebook,
                cfg.margin,
            )?);
        }
    }
    let mut obj = Vec::new();
    let mut object_hits = 0;
    for (&z, &l) in stage.object_logits.iter().zip(&labels) {
        obj.push(g.cross_entropy(z, l)?);
        object_hits += (argmax(g.value(z)) == l) as usize;
    }
    let scene_loss = match stage.scene {
        Some(f_s) => {
            let target = multilabel_target(labels.iter().copied(), model.config.n_object_classes);
            Some(scene_multilabel_loss(
                &mut g,
                f_s,
                vars.multilabel_head,
                vars.multilabel_bias,
                &target,
                &model.class_weights,
            )?)
        }
        None => None,
    };
    let terms = LossTerms {
        scene: scene_loss,
        coarse: if t.kt {
            Some(reduce(&mut g, &coarse, cfg.reduction)?)
        } else {
            None
        },
        relation: reduce(&mut g, &rel, cfg.reduction)?,
        codeword: if t.kt {
            Some(reduce(&mut g, &code, cfg.reduction)?)
        } else {
            None
        },
        object: reduce(&mut g, &obj, cfg.reduction)?,
    };
    let total = total_loss(&mut g, &terms, cfg.epsilon)?;
    g.backward(total)?;
    let grads = vars
        .in_order()
        .iter()
        .map(|&v| g.grad(v).to_vec())
        .collect();
    let item = |v: Option<Var>| v.map(|v| g.item(v));
    let stats = StepStats {
        total: g.item(total),
        relation: g.item(terms.relation),
        object: g.item(terms.object),
        scene: item(terms.scene),
        coarse: item(terms.coarse),
        codeword: item(terms.codeword),
        pair_hits,
        pairs: pairs.len(),
        object_hits,
        objects: labels.len(),
    };
    Ok((grads, stats))
}

/// Which blocks the optimizer may update.
pub fn trainable_blocks(cfg: &TrainConfig) -> [bool; 14] {
    let mut out = [true; 14];
    for (i, name) in crate::model::BLOCK_NAMES.iter().enumerate() {
        out[i] = match block_group(name) {
            BlockGroup::Base => true,
            BlockGroup::SceneObject => cfg.so,
            BlockGroup::KnowledgeTransfer => cfg.kt,
        } && !cfg.frozen_zero.iter().any(|f| f == name);
    }
    out
}

/// SGD with momentum over the trainable blocks.
pub struct Optimizer {
    momentum: f64,
    clip: f64,
    velocity: Vec<Vec<f64>>,
    trainable: [bool; 14],
}

impl Optimizer {
    pub fn new(params: &ModelParams, cfg: &TrainConfig) -> Self {
        Self {
            momentum: cfg.momentum,
            clip: cfg.grad_clip,
            velocity: params
                .blocks()
                .iter()
                .map(|(_, t)| vec![0.0; t.len()])
                .collect(),
            trainable: trainable_blocks(cfg),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Vec<f64>], lr: f64) {
        for (i, (_, block)) in params.blocks_mut().into_iter().enumerate() {
            if !self.trainable[i] {
                continue;
            }
            let norm = grads[i].iter().map(|x| x * x).sum::<f64>().sqrt();
            let scale = if self.clip > 0.0 && norm > self.clip {
                self.clip / norm
            } else {
                1.0
            };
            let v = &mut self.velocity[i];
            for ((p, vi), gi) in block
                .value_mut()
                .iter_mut()
                .zip(v.iter_mut())
                .zip(&grads[i])
            {
                *vi = self.momentum * *vi + scale * gi;
                *p -= lr * *vi;
            }
        }
    }
}

/// Trains a model, reporting each epoch to `on_epoch`.
pub fn fit(
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Model, Vec<EpochLog>), TrainError> {
    let mut model = init_model(dataset, cfg)?;
    let mut opt = Optimizer::new(&model.params, cfg);
    let mut order_rng = stream(cfg.seed, 13);
    let mut pair_rng = stream(cfg.seed, 14);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut last_good = model.clone();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        order.shuffle(&mut order_rng);
        let mut acc = Accumulator::default();
        for &i in &order {
            let scene = &dataset.train[i];
            let pairs = training_pairs(scene, cfg, &mut pair_rng);
            if pairs.is_empty() {
                continue;
            }
            let result = scene_gradients(&model, cfg, scene, &pairs).and_then(|(grads, stats)| {
                if grads.iter().flatten().all(|x| x.is_finite()) {
                    Ok((grads, stats))
                } else {
                    Err(TrainError::NonFinite {
                        component: "gradient",
                        value: f64::NAN,
                    })
                }
            });
            let (grads, stats) = match result {
                Ok(r) => r,
                Err(e) if is_non_finite(&e) => {
                    return Err(TrainError::Diverged {
                        epoch,
                        source: Box::new(e),
                        last_good: Box::new(last_good),
                    })
                }
                Err(e) => return Err(e),
            };
            opt.step(&mut model.params, &grads, lr);
            acc.add(&stats);
        }
        let entry = acc.finish(epoch, lr);
        on_epoch(&entry);
        log.push(entry);
        last_good = model.clone();
    }
    Ok((model, log))
}

fn is_non_finite(e: &TrainError) -> bool {
    use crate::relation_head::RelationError;
    use crate::scene_interaction::SceneError;
    match e {
        TrainError::NonFinite { .. } => true,
        TrainError::Model(m) => matches!(
            m,
            ModelError::Numerics(NumericsError::NonFinite { .. })
                | ModelError::Scene(SceneError::Numerics(NumericsError::NonFinite { .. }))
                | ModelError::Relation(RelationError::Numerics(NumericsError::NonFinite { .. }))
        ),
        _ => false,
    }
}

#[derive(Default)]
struct Accumulator {
    n: usize,
    total: f64,
    relation: f64,
    object: f64,
    scene: Option<f64>,
    coarse: Option<f64>,
    codeword: Option<f64>,
    pair_hits: usize,
    pairs: usize,
    object_hits: usize,
    objects: usize,
}

impl Accumulator {
    fn add(&mut self, s: &StepStats) {
        let add = |acc: &mut Option<f64>, v: Option<f64>| {
            if let Some(v) = v {
                *acc = Some(acc.unwrap_or(0.0) + v);
            }
        };
        self.n += 1;
        self.total += s.total;
        self.relation += s.relation;
        self.object += s.object;
        add(&mut self.scene, s.scene);
        add(&mut self.coarse, s.coarse);
        add(&mut self.codeword, s.codeword);
        self.pair_hits += s.pair_hits;
        self.pairs += s.pairs;
        self.object_hits += s.object_hits;
        self.objects += s.objects;
    }

    fn finish(&self, epoch: usize, lr: f64) -> EpochLog {
        let n = self.n.max(1) as f64;
        EpochLog {
            epoch: epoch + 1,
            lr,
            loss_total: self.total / n,
            loss_relation: self.relation / n,
            loss_object: self.object / n,
            loss_scene: self.scene.map(|v| v / n),
            loss_coarse: self.coarse.map(|v| v / n),
            loss_codeword: self.codeword.map(|v| v / n),
            train_pair_accuracy: self.pair_hits as f64 / self.pairs.max(1) as f64,
            train_object_accuracy: self.object_hits as f64 / self.objects.max(1) as f64,
        }
    }
}

/// The four rungs of the ablation ladder.
pub const VARIANTS: [(&str, Toggles); 4] = [
    (
        "BL",
        Toggles {
            so: false,
            kt: false,
            fc: false,
            bias: true,
        },
    ),
    (
        "BL+SO",
        Toggles {
            so: true,
            kt: false,
            fc: false,
            bias: true,
        },
    ),
    (
        "BL+SO+KT",
        Toggles {
            so: true,
            kt: true,
            fc: false,
            bias: true,
        },
    ),
    (
        "BL+SO+KT+FC",
        Toggles {
            so: true,
            kt: true,
            fc: true,
            bias: true,
        },
    ),
];

/// Tasks scored by default: the two that need no detections file.
pub const DEFAULT_TASKS: [Task; 2] = [Task::PredCls, Task::SgCls];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: String,
    pub seed: u64,
    pub report: MetricsReport,
}

/// Trains and evaluates every ladder variant with the same seed and epochs.
///
/// The frequency-prior switch of `base` applies to all variants.
pub fn ablate(
    dataset: &Dataset,
    base: &TrainConfig,
    tasks: &[Task],
    detections: Option<&[DetectionRecord]>,
) -> Result<Vec<VariantResult>, TrainError> {
    VARIANTS
        .iter()
        .map(|(name, t)| {
            let cfg = base.with_toggles(Toggles {
                bias: base.bias,
                ..*t
            });
            let (model, _) = fit(dataset, &cfg, |_| {})?;
            let report = evaluate(&model, &dataset.test, tasks, detections)?;
            Ok(VariantResult {
                variant: name.to_string(),
                seed: base.seed,
                report,
            })
        })
        .collect()
}

//! Synthetic long-tail scene generator.
//!
//! Every scene belongs to a latent scene type. Relations are arranged in a
//! grid of visual groups × scene types: relations in the same group share
//! their object-class preferences, layout and most of their union-region
//! appearance, and differ mainly by the scene type they occur in, so telling
//! them apart needs scene context. Each group mixes frequent and rare
//! relations. Relation frequencies follow a Zipf law;
//! sampling the scene type with the Zipf mass of its relations and then each
//! triple's relation from the type-restricted Zipf law leaves the marginal
//! relation distribution exactly Zipf.
//!
//! The union feature of a related pair is the mean of its two object
//! features plus a group and a relation signature, so unrelated pairs are
//! exactly the fallback union the model uses when none is stored.

use rand::distributions::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    fallback_union, DataError, Dataset, DatasetMeta, Detection, DetectionRecord, SceneObject,
    SceneSample, Triple, UnionFeature,
};
use crate::geometry::BoundingBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_object_classes: usize,
    pub n_relations: usize,
    pub zipf_exponent: f64,
    /// Inclusive `[min, max]` object count per scene.
    pub objects_per_scene: [usize; 2],
    pub scenes: usize,
    pub d_v: usize,
    pub d_s: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub test_fraction: f64,
    pub n_scene_types: usize,
    /// Ground-truth triples per object, before capping at the number of ordered pairs.
    pub triples_per_object: f64,
    /// Weight of the class prototype in object features.
    pub object_class_scale: f64,
    /// Weight of the scene-type prototype in scene features.
    pub scene_type_scale: f64,
    /// Weight of the mean present-class prototype in scene features.
    pub scene_class_mix: f64,
    /// Weight of the visual-group signature in union features.
    pub union_group_scale: f64,
    /// Weight of the per-relation signature in union features.
    pub union_relation_scale: f64,
    /// Probability that an object in a triple takes a class from the group's preference list.
    pub preferred_class_prob: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_object_classes: 150,
            n_relations: 50,
            zipf_exponent: 1.5,
            objects_per_scene: [5, 12],
            scenes: 3000,
            d_v: 64,
            d_s: 16,
            noise_sigma: 0.5,
            seed: 0,
            test_fraction: 0.2,
            n_scene_types: 7,
            triples_per_object: 0.8,
            object_class_scale: 0.5,
            scene_type_scale: 1.0,
            scene_class_mix: 0.5,
            union_group_scale: 0.5,
            union_relation_scale: 0.25,
            preferred_class_prob: 0.7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        if self.n_object_classes == 0 || self.scenes == 0 || self.d_v == 0 || self.d_s == 0 {
            return bad("class count, scene count and feature dims must be positive");
        }
        if self.n_relations < 2 {
            return bad("need the none relation plus at least one real relation");
        }
        if !(self.zipf_exponent > 0.0) || !self.zipf_exponent.is_finite() {
            return bad("zipf_exponent must be positive");
        }
        let [lo, hi] = self.objects_per_scene;
        if lo < 2 || hi < lo {
            return bad("objects_per_scene must satisfy 2 <= min <= max");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test_fraction must be in [0, 1)");
        }
        if self.n_scene_types == 0 || self.n_scene_types > self.n_relations - 1 {
            return bad("n_scene_types must be in [1, n_relations - 1]");
        }
        if self.n_object_classes < self.n_scene_types {
            return bad("need at least one object class per scene type");
        }
        if !(self.noise_sigma >= 0.0) || !(self.triples_per_object > 0.0) {
            return bad("noise_sigma must be >= 0 and triples_per_object > 0");
        }
        let scales = [
            self.object_class_scale,
            self.scene_type_scale,
            self.scene_class_mix,
            self.union_group_scale,
            self.union_relation_scale,
        ];
        if scales.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return bad("appearance scales must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.preferred_class_prob) {
            return bad("preferred_class_prob must be in [0, 1]");
        }
        Ok(())
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            n_object_classes: self.n_object_classes,
            n_relations: self.n_relations,
            d_v: self.d_v,
        }
    }
}

/// Zipf weights over relations `1..n_relations` (index 0, the none relation, is 0).
pub fn zipf_weights(n_relations: usize, exponent: f64) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n_relations)
        .map(|r| {
            if r == 0 {
                0.0
            } else {
                (r as f64).powf(-exponent)
            }
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

const PREFERRED_CLASSES: usize = 3;

struct World {
    class_protos: Vec<Vec<f64>>,
    type_protos: Vec<Vec<f64>>,
    group_protos: Vec<Vec<f64>>,
    relation_protos: Vec<Vec<f64>>,
    layouts: Vec<(f64, f64, f64)>,
    type_pools: Vec<Vec<usize>>,
    subject_prefs: Vec<Vec<usize>>,
    object_prefs: Vec<Vec<usize>>,
    relation_type: Vec<usize>,
    relation_group: Vec<usize>,
    type_sampler: WeightedIndex<f64>,
    per_type_samplers: Vec<(Vec<usize>, WeightedIndex<f64>)>,
}

fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

impl World {
    fn new(cfg: &GeneratorConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_v;
        let t = cfg.n_scene_types;
        let n_real = cfg.n_relations - 1;
        let n_groups = n_real.div_ceil(t);
        let relation_type: Vec<usize> = (0..cfg.n_relations)
            .map(|r| if r == 0 { 0 } else { (r - 1) % t })
            .collect();
        // Latin-square layout: each group holds one relation per frequency band.
        let relation_group: Vec<usize> = (0..cfg.n_relations)
            .map(|r| {
                if r == 0 {
                    0
                } else {
                    ((r - 1) / t + (r - 1) % t) % n_groups
                }
            })
            .collect();

        let class_protos = (0..cfg.n_object_classes)
            .map(|_| gaussian_vec(rng, d))
            .collect();
        let type_protos = (0..t).map(|_| gaussian_vec(rng, d)).collect();
        let group_protos = (0..n_groups).map(|_| gaussian_vec(rng, d)).collect();
        let relation_protos = (0..cfg.n_relations).map(|_| gaussian_vec(rng, d)).collect();
        let layouts = (0..n_groups)
            .map(|_| {
                (
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(0.5..2.0),
                )
            })
            .collect();

        let type_pools: Vec<Vec<usize>> = (0..t)
            .map(|ty| (0..cfg.n_object_classes).filter(|c| c % t == ty).collect())
            .collect();
        let all_classes: Vec<usize> = (0..cfg.n_object_classes).collect();
        let k = PREFERRED_CLASSES.min(cfg.n_object_classes);
        let mut pick_prefs =
            || -> Vec<usize> { all_classes.choose_multiple(rng, k).copied().collect() };
        let subject_prefs: Vec<Vec<usize>> = (0..n_groups).map(|_| pick_prefs()).collect();
        let object_prefs: Vec<Vec<usize>> = (0..n_groups).map(|_| pick_prefs()).collect();

        let z = zipf_weights(cfg.n_relations, cfg.zipf_exponent);
        let type_mass: Vec<f64> = (0..t)
            .map(|ty| {
                (1..cfg.n_relations)
                    .filter(|&r| relation_type[r] == ty)
                    .map(|r| z[r])
                    .sum()
            })
            .collect();
        let type_sampler = WeightedIndex::new(&type_mass).expect("positive type mass");
        let per_type_samplers = (0..t)
            .map(|ty| {
                let rels: Vec<usize> = (1..cfg.n_relations)
                    .filter(|&r| relation_type[r] == ty)
                    .collect();
                let weights: Vec<f64> = rels.iter().map(|&r| z[r]).collect();
                (
                    rels,
                    WeightedIndex::new(&weights).expect("positive relation mass"),
                )
            })
            .collect();

        Self {
            class_protos,
            type_protos,
            group_protos,
            relation_protos,
            layouts,
            type_pools,
            subject_prefs,
            object_prefs,
            relation_type,
            relation_group,
            type_sampler,
            per_type_samplers,
        }
    }

    fn scene(&self, cfg: &GeneratorConfig, image_id: String, rng: &mut impl Rng) -> SceneSample {
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("valid sigma");
        let d = cfg.d_v;
        let scene_type = self.type_sampler.sample(rng);
        let n = rng.gen_range(cfg.objects_per_scene[0]..=cfg.objects_per_scene[1]);
        let max_pairs = n * (n - 1);
        let m = ((cfg.triples_per_object * n as f64).round() as usize).clamp(1, max_pairs);

        // Triples over distinct ordered pairs.
        let mut pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
        pairs.shuffle(rng);
        let (rels, sampler) = &self.per_type_samplers[scene_type];
        let triples: Vec<Triple> = pairs[..m]
            .iter()
            .map(|&(s, o)| Triple {
                subject: s,
                relation: rels[sampler.sample(rng)],
                object: o,
            })
            .collect();

        // Classes: the first triple touching an object decides its preference
        // list; everything else comes from the scene type's class pool.
        let pool = &self.type_pools[scene_type];
        let mut labels: Vec<Option<usize>> = vec![None; n];
        for t in &triples {
            let g = self.relation_group[t.relation];
            for (idx, prefs) in [
                (t.subject, &self.subject_prefs[g]),
                (t.object, &self.object_prefs[g]),
            ] {
                if labels[idx].is_none() {
                    labels[idx] = Some(if rng.gen_bool(cfg.preferred_class_prob) {
                        *prefs.choose(rng).expect("non-empty preference list")
                    } else {
                        *pool.choose(rng).expect("non-empty pool")
                    });
                }
            }
        }
        let labels: Vec<usize> = labels
            .into_iter()
            .map(|l| l.unwrap_or_else(|| *pool.choose(rng).expect("non-empty pool")))
            .collect();

        // Layout: objects of a triple sit at the group's typical offset.
        let mut centers: Vec<Option<(f64, f64, f64)>> = vec![None; n];
        let random_center = |rng: &mut dyn rand::RngCore| {
            (
                rng.gen_range(0.15..0.85),
                rng.gen_range(0.15..0.85),
                rng.gen_range(0.1..0.35),
            )
        };
        for t in &triples {
            if centers[t.object].is_none() {
                centers[t.object] = Some(random_center(rng));
            }
            if centers[t.subject].is_none() {
                let (ox, oy, os) = centers[t.object].expect("placed above");
                let (dx, dy, ratio) = self.layouts[self.relation_group[t.relation]];
                centers[t.subject] = Some((
                    (ox + dx + rng.gen_range(-0.05..0.05)).clamp(0.05, 0.95),
                    (oy + dy + rng.gen_range(-0.05..0.05)).clamp(0.05, 0.95),
                    (os * ratio).clamp(0.05, 0.45),
                ));
            }
        }
        let boxes: Vec<BoundingBox> = centers
            .into_iter()
            .map(|c| {
                let (x, y, s) = c.unwrap_or_else(|| random_center(rng));
                let w = s * rng.gen_range(0.8..1.25);
                let h = s * rng.gen_range(0.8..1.25);
                BoundingBox::new(
                    (x - w / 2.0).max(0.0),
                    (y - h / 2.0).max(0.0),
                    (x + w / 2.0).min(1.0),
                    (y + h / 2.0).min(1.0),
                )
                .expect("center in [0.05, 0.95] keeps the box non-degenerate")
            })
            .collect();

        let objects: Vec<SceneObject> = labels
            .iter()
            .zip(boxes)
            .map(|(&label, bbox)| SceneObject {
                bbox,
                label,
                feature: (0..d)
                    .map(|k| {
                        1.0 + cfg.object_class_scale * self.class_protos[label][k]
                            + noise.sample(rng)
                    })
                    .collect(),
            })
            .collect();

        let mut class_mean = vec![0.0; d];
        for &l in &labels {
            for (m, c) in class_mean.iter_mut().zip(&self.class_protos[l]) {
                *m += c / n as f64;
            }
        }
        let scene_feature: Vec<f64> = (0..d)
            .map(|k| {
                cfg.scene_type_scale * self.type_protos[scene_type][k]
                    + cfg.scene_class_mix * class_mean[k]
                    + noise.sample(rng)
            })
            .collect();

        let union_features = triples
            .iter()
            .map(|t| {
                let g = &self.group_protos[self.relation_group[t.relation]];
                let r = &self.relation_protos[t.relation];
                let mut feature =
                    fallback_union(&objects[t.subject].feature, &objects[t.object].feature);
                for (k, f) in feature.iter_mut().enumerate() {
                    *f += cfg.union_group_scale * g[k] + cfg.union_relation_scale * r[k];
                }
                UnionFeature {
                    subject: t.subject,
                    object: t.object,
                    feature,
                }
            })
            .collect();

        SceneSample {
            image_id,
            objects,
            scene_feature,
            union_features,
            gt_triples: triples,
        }
    }
}

/// Generates a deterministic train/test split from `cfg`.
pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let mut world_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    world_rng.set_stream(1);
    let world = World::new(cfg, &mut world_rng);
    debug_assert_eq!(world.relation_type.len(), cfg.n_relations);

    let mut scene_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    scene_rng.set_stream(2);
    let mut scenes: Vec<SceneSample> = (0..cfg.scenes)
        .map(|i| world.scene(cfg, format!("scene-{i:06}"), &mut scene_rng))
        .collect();

    let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    split_rng.set_stream(3);
    scenes.shuffle(&mut split_rng);
    let n_test = ((cfg.scenes as f64) * cfg.test_fraction).round() as usize;
    let train = scenes.split_off(n_test);
    let meta = cfg.meta();
    for s in scenes.iter().chain(&train) {
        s.validate(&meta)?;
    }
    Ok(Dataset {
        meta,
        train,
        test: scenes,
    })
}

/// Simulated detector output for `scenes`: jittered boxes, noisy class
/// scores and perturbed features, in shuffled order, plus one spurious box
/// per image.
pub fn generate_detections(
    scenes: &[SceneSample],
    meta: &DatasetMeta,
    seed: u64,
) -> Vec<DetectionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    let feat_noise = Normal::new(0.0, 0.1).expect("valid sigma");
    scenes
        .iter()
        .map(|s| {
            let mut detections: Vec<Detection> = s
                .objects
                .iter()
                .map(|o| {
                    let [xt, yt, xb, yb] = o.bbox.corners();
                    let (w, h) = (xb - xt, yb - yt);
                    let dx = rng.gen_range(-0.05..0.05) * w;
                    let dy = rng.gen_range(-0.05..0.05) * h;
                    let bbox = BoundingBox::new(xt + dx, yt + dy, xb + dx, yb + dy).expect("shifted box stays valid");
                    let logits: Vec<f64> = (0..meta.n_object_classes)
                        .map(|c| if c == o.label { 4.0 } else { 0.0 } + rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    Detection {
                        bbox,
                        class_scores: softmax(&logits),
                        feature: o.feature.iter().map(|x| x + feat_noise.sample(&mut rng)).collect(),
                    }
                })
                .collect();
            let x = rng.gen_range(0.0..0.8);
            let y = rng.gen_range(0.0..0.8);
            let junk = rng.gen_range(0..meta.n_object_classes);
            detections.push(Detection {
                bbox: BoundingBox::new(x, y, x + 0.2, y + 0.2).expect("valid"),
                class_scores: softmax(
                    &(0..meta.n_object_classes)
                        .map(|c| if c == junk { 2.0 } else { 0.0 })
                        .collect::<Vec<_>>(),
                ),
                feature: gaussian_vec(&mut rng, meta.d_v),
            });
            detections.shuffle(&mut rng);
            DetectionRecord {
                image_id: s.image_id.clone(),
                detections,
            }
        })
        .collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let t: f64 = e.iter().sum();
    e.into_iter().map(|v| v / t).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::relation_histogram;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            scenes: 200,
            n_object_classes: 20,
            n_relations: 12,
            n_scene_types: 3,
            d_v: 8,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&GeneratorConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn splits_are_disjoint_and_valid() {
        let ds = generate(&small()).unwrap();
        assert_eq!(ds.train.len() + ds.test.len(), 200);
        assert_eq!(ds.test.len(), 40);
        let train: std::collections::HashSet<_> = ds.train.iter().map(|s| &s.image_id).collect();
        assert!(ds.test.iter().all(|s| !train.contains(&s.image_id)));
        for s in ds.train.iter().chain(&ds.test) {
            s.validate(&ds.meta).unwrap();
            assert!(!s.gt_triples.is_empty());
            assert_eq!(s.union_features.len(), s.gt_triples.len());
        }
    }

    #[test]
    fn rejects_impossible_configs() {
        for cfg in [
            GeneratorConfig {
                objects_per_scene: [1, 4],
                ..small()
            },
            GeneratorConfig {
                zipf_exponent: 0.0,
                ..small()
            },
            GeneratorConfig {
                n_relations: 1,
                ..small()
            },
            GeneratorConfig {
                objects_per_scene: [6, 4],
                ..small()
            },
        ] {
            assert!(matches!(generate(&cfg), Err(DataError::Config(_))));
        }
    }

    #[test]
    fn zipf_weight_shape() {
        let w = zipf_weights(50, 1.5);
        assert_eq!(w[0], 0.0);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((w[1] / w[40] - 40f64.powf(1.5)).abs() < 1e-9);
        let flat = zipf_weights(50, 1e-12);
        for x in &flat[1..] {
            assert!((x - 1.0 / 49.0).abs() < 1e-9);
        }
    }

    #[test]
    fn tiny_exponent_is_nearly_uniform() {
        let cfg = GeneratorConfig {
            zipf_exponent: 1e-9,
            n_scene_types: 1,
            scenes: 1500,
            ..small()
        };
        let ds = generate(&cfg).unwrap();
        let mut hist = relation_histogram(&ds.train, cfg.n_relations);
        for (h, t) in hist
            .iter_mut()
            .zip(relation_histogram(&ds.test, cfg.n_relations))
        {
            *h += t;
        }
        let total: u64 = hist.iter().sum();
        let expected = total as f64 / 11.0;
        for &h in &hist[1..] {
            assert!((h as f64 - expected).abs() < 0.2 * expected, "{hist:?}");
        }
    }

    #[test]
    fn detections_cover_every_object() {
        let cfg = small();
        let ds = generate(&cfg).unwrap();
        let dets = generate_detections(&ds.test, &ds.meta, 3);
        assert_eq!(dets.len(), ds.test.len());
        for (rec, scene) in dets.iter().zip(&ds.test) {
            assert_eq!(rec.detections.len(), scene.objects.len() + 1);
            for o in &scene.objects {
                assert!(rec.detections.iter().any(|d| d.bbox.iou(&o.bbox) >= 0.5));
            }
            for d in &rec.detections {
                assert!((d.class_scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}

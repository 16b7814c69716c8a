//! Recall@K evaluation for PredCls, SGCls and SGDet, with and without the
//! one-predicate-per-pair graph constraint.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DetectionRecord, SceneSample, NONE_RELATION};
use crate::model::{Model, ModelError, ParamVars, SceneInput};
use crate::numerics::Graph;

pub const RECALL_KS: [usize; 3] = [20, 50, 100];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("K must be positive")]
    ZeroK,
    #[error("sgdet evaluation needs a detections file")]
    MissingDetections,
    #[error("no detections for image `{0}`")]
    MissingImage(String),
    #[error(
        "detection {index} in image `{image_id}` has {found} class scores, expected {expected}"
    )]
    ClassScores {
        image_id: String,
        index: usize,
        found: usize,
        expected: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<crate::numerics::NumericsError> for EvalError {
    fn from(e: crate::numerics::NumericsError) -> Self {
        EvalError::Model(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    PredCls,
    SgCls,
    SgDet,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::PredCls, Task::SgCls, Task::SgDet];
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::PredCls => "predcls",
            Task::SgCls => "sgcls",
            Task::SgDet => "sgdet",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Constrained,
    Unconstrained,
}

impl Mode {
    pub const BOTH: [Mode; 2] = [Mode::Constrained, Mode::Unconstrained];
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Constrained => "constrained",
            Mode::Unconstrained => "unconstrained",
        })
    }
}

/// One scored (subject, predicate, object) candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedTriple {
    /// Position of the ordered pair in enumeration order; used for tie-breaking.
    pub pair: usize,
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
    pub subject_class: usize,
    pub object_class: usize,
    pub subject_prob: f64,
    pub predicate_prob: f64,
    pub object_prob: f64,
    pub score: f64,
}

/// Ground-truth triple with the classes a prediction must reproduce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GtTriple {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
    pub subject_class: usize,
    pub object_class: usize,
}

/// How candidate objects correspond to ground-truth objects.
#[derive(Debug, Clone, PartialEq)]
pub enum ObjectMatch {
    /// Candidate object `i` is ground-truth object `i`.
    Identity,
    /// `table[candidate][gt]` is true when the boxes overlap with IoU ≥ 0.5.
    Table(Vec<Vec<bool>>),
}

impl ObjectMatch {
    fn matches(&self, candidate: usize, gt: usize) -> bool {
        match self {
            ObjectMatch::Identity => candidate == gt,
            ObjectMatch::Table(t) => t[candidate][gt],
        }
    }
}

pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recall {
    pub value: f64,
    /// Set when there was no ground truth and the value is vacuously 1.
    pub vacuous: bool,
}

fn triple_matches(c: &RankedTriple, gt: &GtTriple, m: &ObjectMatch) -> bool {
    c.relation == gt.relation
        && c.subject_class == gt.subject_class
        && c.object_class == gt.object_class
        && m.matches(c.subject, gt.subject)
        && m.matches(c.object, gt.object)
}

fn by_rank(a: &RankedTriple, b: &RankedTriple) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.pair.cmp(&b.pair))
        .then(a.relation.cmp(&b.relation))
}

/// Orders candidates by score; the constrained mode first keeps only each
/// pair's best predicate.
pub fn rank(candidates: &[RankedTriple], mode: Mode) -> Vec<RankedTriple> {
    let mut out: Vec<RankedTriple> = match mode {
        Mode::Unconstrained => candidates.to_vec(),
        Mode::Constrained => {
            let mut best: HashMap<usize, RankedTriple> = HashMap::new();
            for c in candidates {
                best.entry(c.pair)
                    .and_modify(|b| {
                        if by_rank(c, b) == Ordering::Less {
                            *b = *c;
                        }
                    })
                    .or_insert(*c);
            }
            best.into_values().collect()
        }
    };
    out.sort_by(by_rank);
    out
}

/// Rank (0-based) of the first candidate matching each gt triple, if any.
pub fn first_hits(
    ranked: &[RankedTriple],
    gt: &[GtTriple],
    matching: &ObjectMatch,
) -> Vec<Option<usize>> {
    gt.iter()
        .map(|t| ranked.iter().position(|c| triple_matches(c, t, matching)))
        .collect()
}

/// Fraction of gt triples matched within the top `k`.
pub fn recall_at_k(
    ranked: &[RankedTriple],
    gt: &[GtTriple],
    k: usize,
    matching: &ObjectMatch,
) -> Result<Recall, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if gt.is_empty() {
        return Ok(Recall {
            value: 1.0,
            vacuous: true,
        });
    }
    let top = &ranked[..k.min(ranked.len())];
    let hit = first_hits(top, gt, matching)
        .iter()
        .filter(|h| h.is_some())
        .count();
    Ok(Recall {
        value: hit as f64 / gt.len() as f64,
        vacuous: false,
    })
}

pub fn gt_triples(scene: &SceneSample) -> Vec<GtTriple> {
    scene
        .gt_triples
        .iter()
        .map(|t| GtTriple {
            subject: t.subject,
            relation: t.relation,
            object: t.object,
            subject_class: scene.objects[t.subject].label,
            object_class: scene.objects[t.object].label,
        })
        .collect()
}

fn argmax(v: &[f64]) -> (usize, f64) {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
            if x > best.1 {
                (i, x)
            } else {
                best
            }
        })
}

/// Object classes, their probabilities and the model view for one image.
pub struct ScoredObjects {
    pub input: SceneInput,
    pub classes: Vec<usize>,
    pub probs: Vec<f64>,
    pub matching: ObjectMatch,
}

/// Prepares the objects of `scene` for `task`.
pub fn task_objects(
    model: &Model,
    scene: &SceneSample,
    task: Task,
    detections: Option<&DetectionRecord>,
) -> Result<ScoredObjects, EvalError> {
    match task {
        Task::PredCls => Ok(ScoredObjects {
            input: SceneInput::from_scene(scene),
            classes: scene.labels(),
            probs: vec![1.0; scene.objects.len()],
            matching: ObjectMatch::Identity,
        }),
        Task::SgCls => {
            let input = SceneInput::from_scene(scene);
            let mut g = Graph::new();
            let vars = ParamVars::register(&mut g, &model.params);
            let stage = model.forward_objects(&mut g, &vars, &input)?;
            let mut classes = Vec::with_capacity(input.len());
            let mut probs = Vec::with_capacity(input.len());
            for z in stage.object_logits {
                let p = g.softmax(z)?;
                let (c, pc) = argmax(g.value(p));
                classes.push(c);
                probs.push(pc);
            }
            Ok(ScoredObjects {
                input,
                classes,
                probs,
                matching: ObjectMatch::Identity,
            })
        }
        Task::SgDet => {
            let rec = detections.ok_or(EvalError::MissingDetections)?;
            let n_classes = model.config.n_object_classes;
            let mut classes = Vec::with_capacity(rec.detections.len());
            let mut probs = Vec::with_capacity(rec.detections.len());
            for (index, d) in rec.detections.iter().enumerate() {
                if d.class_scores.len() != n_classes {
                    return Err(EvalError::ClassScores {
                        image_id: rec.image_id.clone(),
                        index,
                        found: d.class_scores.len(),
                        expected: n_classes,
                    });
                }
                let (c, pc) = argmax(&d.class_scores);
                classes.push(c);
                probs.push(pc);
            }
            let table = rec
                .detections
                .iter()
                .map(|d| {
                    scene
                        .objects
                        .iter()
                        .map(|o| d.bbox.iou(&o.bbox) >= IOU_THRESHOLD)
                        .collect()
                })
                .collect();
            Ok(ScoredObjects {
                input: SceneInput::from_detections(rec, &scene.scene_feature),
                classes,
                probs,
                matching: ObjectMatch::Table(table),
            })
        }
    }
}

/// Every (ordered pair, non-none predicate) candidate, pair-major.
pub fn score_candidates(
    model: &Model,
    objects: &ScoredObjects,
) -> Result<Vec<RankedTriple>, EvalError> {
    let input = &objects.input;
    let pairs = input.all_pairs();
    let mut g = Graph::new();
    let vars = ParamVars::register(&mut g, &model.params);
    let stage = model.forward_objects(&mut g, &vars, input)?;
    let outs = model.forward_pairs(&mut g, &vars, input, &stage, &pairs, Some(&objects.classes))?;
    let mut out = Vec::with_capacity(pairs.len() * model.config.n_relations.saturating_sub(1));
    for (pair, o) in outs.iter().enumerate() {
        let p = g.softmax(o.logits)?;
        let (s, ob) = (o.subject, o.object);
        for (r, &pr) in g.value(p).iter().enumerate() {
            if r == NONE_RELATION {
                continue;
            }
            let (ps, po) = (objects.probs[s], objects.probs[ob]);
            out.push(RankedTriple {
                pair,
                subject: s,
                relation: r,
                object: ob,
                subject_class: objects.classes[s],
                object_class: objects.classes[ob],
                subject_prob: ps,
                predicate_prob: pr,
                object_prob: po,
                score: ps * pr * po,
            });
        }
    }
    Ok(out)
}

/// Candidates for one scene under `task`, with the object matching to use.
pub fn score_scene(
    model: &Model,
    scene: &SceneSample,
    task: Task,
    detections: Option<&DetectionRecord>,
) -> Result<(Vec<RankedTriple>, ObjectMatch), EvalError> {
    let objects = task_objects(model, scene, task, detections)?;
    let cands = score_candidates(model, &objects)?;
    Ok((cands, objects.matching))
}

/// Recall at 20/50/100; `None` when there is nothing to recall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub r20: Option<f64>,
    pub r50: Option<f64>,
    pub r100: Option<f64>,
}

impl RecallRow {
    fn from_counts(hits: [u64; 3], total: u64) -> Self {
        let f = |h: u64| (total > 0).then(|| h as f64 / total as f64);
        Self {
            r20: f(hits[0]),
            r50: f(hits[1]),
            r100: f(hits[2]),
        }
    }

    pub fn cells(&self) -> [Option<f64>; 3] {
        [self.r20, self.r50, self.r100]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationRecall {
    pub relation: usize,
    pub gt_count: u64,
    pub recall: RecallRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: Mode,
    pub recall: RecallRow,
    pub per_relation: Vec<RelationRecall>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: Task,
    pub modes: Vec<ModeReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_scenes: usize,
    /// Scenes without ground-truth triples; vacuous, so excluded from recall.
    pub vacuous_scenes: usize,
    pub gt_triples: u64,
    pub tasks: Vec<TaskReport>,
    /// Mean over every reported R@K cell.
    pub mean_recall: f64,
}

impl MetricsReport {
    pub fn mode(&self, task: Task, mode: Mode) -> Option<&ModeReport> {
        self.tasks
            .iter()
            .find(|t| t.task == task)
            .and_then(|t| t.modes.iter().find(|m| m.mode == mode))
    }

    /// True when R@20 ≤ R@50 ≤ R@100 for every task, mode and relation row.
    pub fn is_monotone(&self) -> bool {
        let ok = |r: &RecallRow| match (r.r20, r.r50, r.r100) {
            (Some(a), Some(b), Some(c)) => a <= b && b <= c && (0.0..=1.0).contains(&a) && c <= 1.0,
            (None, None, None) => true,
            _ => false,
        };
        self.tasks
            .iter()
            .flat_map(|t| &t.modes)
            .all(|m| ok(&m.recall) && m.per_relation.iter().all(|r| ok(&r.recall)))
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<8} {:<14} {:>7} {:>7} {:>7}",
            "task", "mode", "R@20", "R@50", "R@100"
        );
        for t in &self.tasks {
            for m in &t.modes {
                let _ = writeln!(
                    s,
                    "{:<8} {:<14} {:>7} {:>7} {:>7}",
                    t.task.to_string(),
                    m.mode.to_string(),
                    pct(m.recall.r20),
                    pct(m.recall.r50),
                    pct(m.recall.r100)
                );
            }
        }
        let _ = writeln!(s, "mean recall: {:.2}", 100.0 * self.mean_recall);
        if self.vacuous_scenes > 0 {
            let _ = writeln!(
                s,
                "scenes without ground truth (excluded): {}",
                self.vacuous_scenes
            );
        }
        s
    }
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x))
        .unwrap_or_else(|| "-".into())
}

#[derive(Default, Clone)]
struct Tally {
    hits: [u64; 3],
    total: u64,
    per_relation: Vec<([u64; 3], u64)>,
}

/// Evaluates `scenes` on each task in both modes.
///
/// Recall is pooled over gt triples, so per-relation recalls weighted by
/// their gt counts add up to the overall value.
pub fn evaluate(
    model: &Model,
    scenes: &[SceneSample],
    tasks: &[Task],
    detections: Option<&[DetectionRecord]>,
) -> Result<MetricsReport, EvalError> {
    let n_rel = model.config.n_relations;
    let by_image: HashMap<&str, &DetectionRecord> = detections
        .unwrap_or(&[])
        .iter()
        .map(|d| (d.image_id.as_str(), d))
        .collect();
    if tasks.contains(&Task::SgDet) && detections.is_none() {
        return Err(EvalError::MissingDetections);
    }
    let mut tallies: Vec<[Tally; 2]> = tasks
        .iter()
        .map(|_| {
            let t = Tally {
                per_relation: vec![([0; 3], 0); n_rel],
                ..Tally::default()
            };
            [t.clone(), t]
        })
        .collect();
    let mut vacuous = 0;
    let mut n_gt = 0;
    for scene in scenes {
        let gt = gt_triples(scene);
        if gt.is_empty() {
            vacuous += 1;
            continue;
        }
        n_gt += gt.len() as u64;
        for (ti, &task) in tasks.iter().enumerate() {
            let rec = match task {
                Task::SgDet => Some(
                    *by_image
                        .get(scene.image_id.as_str())
                        .ok_or_else(|| EvalError::MissingImage(scene.image_id.clone()))?,
                ),
                _ => None,
            };
            let (cands, matching) = score_scene(model, scene, task, rec)?;
            for (mi, &mode) in Mode::BOTH.iter().enumerate() {
                let ranked = rank(&cands, mode);
                let hits = first_hits(&ranked, &gt, &matching);
                let tally = &mut tallies[ti][mi];
                for (t, h) in gt.iter().zip(hits) {
                    tally.total += 1;
                    tally.per_relation[t.relation].1 += 1;
                    for (ki, &k) in RECALL_KS.iter().enumerate() {
                        if h.is_some_and(|pos| pos < k) {
                            tally.hits[ki] += 1;
                            tally.per_relation[t.relation].0[ki] += 1;
                        }
                    }
                }
            }
        }
    }
    let mut cells = Vec::new();
    let task_reports = tasks
        .iter()
        .zip(tallies)
        .map(|(&task, t)| TaskReport {
            task,
            modes: Mode::BOTH
                .iter()
                .zip(t)
                .map(|(&mode, tally)| {
                    let recall = RecallRow::from_counts(tally.hits, tally.total);
                    cells.extend(recall.cells().into_iter().flatten());
                    ModeReport {
                        mode,
                        recall,
                        per_relation: tally
                            .per_relation
                            .iter()
                            .enumerate()
                            .skip(1)
                            .map(|(relation, &(h, n))| RelationRecall {
                                relation,
                                gt_count: n,
                                recall: RecallRow::from_counts(h, n),
                            })
                            .collect(),
                    }
                })
                .collect(),
        })
        .collect();
    let mean_recall = if cells.is_empty() {
        0.0
    } else {
        cells.iter().sum::<f64>() / cells.len() as f64
    };
    Ok(MetricsReport {
        n_scenes: scenes.len(),
        vacuous_scenes: vacuous,
        gt_triples: n_gt,
        tasks: task_reports,
        mean_recall,
    })
}

/// One row of the tail-relation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub relation: usize,
    pub train_count: u64,
    pub test_count: u64,
    pub r50: Option<f64>,
    pub r100: Option<f64>,
}

/// Unconstrained R@50/R@100 for the `bottom_n` least frequent training relations.
///
/// Relations without test instances report `None`.
pub fn per_relation_report(
    report: &MetricsReport,
    task: Task,
    train_counts: &[u64],
    bottom_n: usize,
) -> Vec<TailRow> {
    let Some(m) = report.mode(task, Mode::Unconstrained) else {
        return Vec::new();
    };
    let mut rows: Vec<TailRow> = m
        .per_relation
        .iter()
        .map(|r| TailRow {
            relation: r.relation,
            train_count: train_counts.get(r.relation).copied().unwrap_or(0),
            test_count: r.gt_count,
            r50: r.recall.r50,
            r100: r.recall.r100,
        })
        .collect();
    rows.sort_by_key(|r| (r.train_count, r.relation));
    rows.truncate(bottom_n);
    rows
}

/// Mean of the non-null R@50 entries.
pub fn tail_mean_r50(rows: &[TailRow]) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter_map(|r| r.r50).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Two tail tables side by side.
pub fn tail_comparison_table(
    without: &[TailRow],
    with: &[TailRow],
    labels: (&str, &str),
) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<9} {:>6} {:>6} | {:>10} {:>10} | {:>10} {:>10}",
        "relation",
        "train",
        "test",
        format!("{} R@50", labels.0),
        "R@100",
        format!("{} R@50", labels.1),
        "R@100"
    );
    for (a, b) in without.iter().zip(with) {
        let _ = writeln!(
            s,
            "{:<9} {:>6} {:>6} | {:>10} {:>10} | {:>10} {:>10}",
            a.relation,
            a.train_count,
            a.test_count,
            pct(a.r50),
            pct(a.r100),
            pct(b.r50),
            pct(b.r100)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(pair: usize, s: usize, o: usize, r: usize, score: f64) -> RankedTriple {
        RankedTriple {
            pair,
            subject: s,
            relation: r,
            object: o,
            subject_class: 0,
            object_class: 0,
            subject_prob: 1.0,
            predicate_prob: score,
            object_prob: 1.0,
            score,
        }
    }

    fn gt(s: usize, r: usize, o: usize) -> GtTriple {
        GtTriple {
            subject: s,
            relation: r,
            object: o,
            subject_class: 0,
            object_class: 0,
        }
    }

    #[test]
    fn recall_example() {
        let ranked = vec![
            cand(0, 0, 1, 1, 0.9),
            cand(0, 0, 1, 3, 0.8),
            cand(1, 1, 2, 2, 0.7),
        ];
        let g = [gt(0, 1, 1), gt(1, 2, 2)];
        let r = recall_at_k(&ranked, &g, 2, &ObjectMatch::Identity).unwrap();
        assert_eq!(r.value, 0.5);
        assert_eq!(
            recall_at_k(&ranked, &g, 10, &ObjectMatch::Identity)
                .unwrap()
                .value,
            1.0
        );
        assert_eq!(
            recall_at_k(&ranked, &[gt(2, 1, 0)], 10, &ObjectMatch::Identity)
                .unwrap()
                .value,
            0.0
        );
        let empty = recall_at_k(&ranked, &[], 5, &ObjectMatch::Identity).unwrap();
        assert!(empty.vacuous && empty.value == 1.0);
        assert!(matches!(
            recall_at_k(&ranked, &g, 0, &ObjectMatch::Identity),
            Err(EvalError::ZeroK)
        ));
    }

    #[test]
    fn constrained_keeps_best_predicate_per_pair() {
        let c = vec![
            cand(0, 0, 1, 1, 0.9),
            cand(0, 0, 1, 2, 0.1),
            cand(1, 1, 0, 1, 0.3),
            cand(1, 1, 0, 2, 0.3),
        ];
        let r = rank(&c, Mode::Constrained);
        assert_eq!(r.len(), 2);
        assert_eq!((r[0].pair, r[0].relation), (0, 1));
        // tie between relations 1 and 2 resolves to the lower id
        assert_eq!((r[1].pair, r[1].relation), (1, 1));
        let u = rank(&c, Mode::Unconstrained);
        assert_eq!(u.len(), 4);
        assert!(r.iter().all(|x| u.contains(x)));
    }

    #[test]
    fn ties_break_by_pair_then_relation() {
        let c = vec![
            cand(1, 1, 0, 2, 0.5),
            cand(0, 0, 1, 3, 0.5),
            cand(0, 0, 1, 2, 0.5),
        ];
        let order: Vec<_> = rank(&c, Mode::Unconstrained)
            .iter()
            .map(|t| (t.pair, t.relation))
            .collect();
        assert_eq!(order, vec![(0, 2), (0, 3), (1, 2)]);
    }

    #[test]
    fn constrained_rank_is_invariant_to_monotone_rescaling() {
        let c: Vec<_> = (0..30)
            .map(|i| cand(i / 5, 0, 1, i % 5 + 1, ((i * 7919) % 31) as f64 / 31.0))
            .collect();
        let squashed: Vec<_> = c
            .iter()
            .map(|t| RankedTriple {
                score: (3.0 * t.score).exp() + 1.0,
                ..*t
            })
            .collect();
        let key = |v: Vec<RankedTriple>| v.iter().map(|t| (t.pair, t.relation)).collect::<Vec<_>>();
        assert_eq!(
            key(rank(&c, Mode::Constrained)),
            key(rank(&squashed, Mode::Constrained))
        );
    }

    #[test]
    fn class_mismatch_is_not_a_hit() {
        let mut c = cand(0, 0, 1, 1, 0.9);
        c.subject_class = 4;
        assert_eq!(
            recall_at_k(&[c], &[gt(0, 1, 1)], 5, &ObjectMatch::Identity)
                .unwrap()
                .value,
            0.0
        );
    }

    #[test]
    fn box_matching_table() {
        let m = ObjectMatch::Table(vec![vec![false, true], vec![true, false]]);
        let c = cand(0, 0, 1, 1, 0.9);
        assert_eq!(recall_at_k(&[c], &[gt(1, 1, 0)], 5, &m).unwrap().value, 1.0);
        assert_eq!(recall_at_k(&[c], &[gt(0, 1, 1)], 5, &m).unwrap().value, 0.0);
    }

    #[test]
    fn tail_rows_sorted_by_training_frequency() {
        let rel = |relation, gt_count, r50| RelationRecall {
            relation,
            gt_count,
            recall: RecallRow {
                r20: r50,
                r50,
                r100: r50,
            },
        };
        let report = MetricsReport {
            n_scenes: 1,
            vacuous_scenes: 0,
            gt_triples: 3,
            tasks: vec![TaskReport {
                task: Task::PredCls,
                modes: vec![ModeReport {
                    mode: Mode::Unconstrained,
                    recall: RecallRow {
                        r20: Some(0.5),
                        r50: Some(0.5),
                        r100: Some(0.5),
                    },
                    per_relation: vec![rel(1, 2, Some(1.0)), rel(2, 0, None), rel(3, 1, Some(0.0))],
                }],
            }],
            mean_recall: 0.5,
        };
        let rows = per_relation_report(&report, Task::PredCls, &[0, 100, 5, 7], 2);
        assert_eq!(
            rows.iter().map(|r| r.relation).collect::<Vec<_>>(),
            vec![2, 3]
        );
        assert_eq!(rows[0].r50, None);
        assert_eq!(tail_mean_r50(&rows), Some(0.0));
        assert!(report.is_monotone());
    }
}

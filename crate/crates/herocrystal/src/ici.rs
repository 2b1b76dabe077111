//! Stage 3: inconsistent-categories integration over heterogeneous teacher
//! heads, followed by distillation of a unified student head on the frozen
//! global backbone.
//!
//! For each target category, the covering sources are collected; a proposal
//! from one covering source is kept only when it passes the cross-source
//! consensus test against every other covering source. Proposals from a sole
//! covering source are kept unconditionally.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::losses;
use crate::rngutil;
use crate::tinynet::{
    backbone_cell_feats, clip_grad_norm, sgd_step, Assignment, DetectorConfig, DetectorOutput,
    GridDetector, ParameterMap, SgdState, Tape,
};
use crate::types::{iou, BoundingBox, Category, CategorySet, Detection, SceneImage};

/// Consensus rule for multi-source categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsensusMode {
    /// A proposal is kept when, for every other covering source, at least one
    /// same-class proposal of that source overlaps it (IoU > 0).
    Exists,
    /// The literal product test: the product of IoUs against all proposals of
    /// every other covering source (no class filter) must be nonzero. An
    /// empty product counts as nonzero.
    LiteralProduct,
}

/// The frozen fused backbone plus the per-client teacher heads.
pub struct TeacherBank {
    pub backbone: ParameterMap,
    pub base_cfg: DetectorConfig,
    pub teachers: Vec<TeacherHead>,
}

pub struct TeacherHead {
    pub client_id: usize,
    pub categories: CategorySet,
    detector: GridDetector,
}

impl TeacherBank {
    /// Assemble the bank; every head is paired with the shared backbone.
    pub fn new(
        backbone: ParameterMap,
        base_cfg: DetectorConfig,
        heads: Vec<(usize, ParameterMap, CategorySet)>,
    ) -> Result<TeacherBank> {
        let mut teachers = Vec::with_capacity(heads.len());
        for (client_id, head, categories) in heads {
            let mut cfg = base_cfg.clone();
            cfg.categories = categories;
            let mut params = backbone.clone();
            for (name, tensor) in head.iter() {
                if !name.starts_with(crate::tinynet::HEAD_PREFIX) {
                    return Err(Error::protocol(format!("teacher head contains non-head entry `{name}`")));
                }
                params.insert(name, tensor.shape().to_vec(), tensor.data().to_vec())?;
            }
            let detector = GridDetector { cfg, params };
            teachers.push(TeacherHead { client_id, categories, detector });
        }
        Ok(TeacherBank { backbone, base_cfg, teachers })
    }

    pub fn source_sets(&self) -> Vec<CategorySet> {
        self.teachers.iter().map(|t| t.categories).collect()
    }

    /// Union of every teacher's category set.
    pub fn union_categories(&self) -> Result<CategorySet> {
        let mut acc: Option<CategorySet> = None;
        for t in &self.teachers {
            acc = Some(match acc {
                Some(a) => a.union(&t.categories),
                None => t.categories,
            });
        }
        acc.ok_or_else(|| Error::protocol("teacher bank has no heads"))
    }
}

/// Run the shared backbone once per scene and apply every teacher head to the
/// same features.
pub fn teacher_predict(bank: &TeacherBank, raster: &SceneImage, score_thresh: f64) -> Result<Vec<Vec<Detection>>> {
    let patches = GridDetector::patches(&bank.base_cfg, raster)?;
    let cell_feats = backbone_cell_feats(&bank.base_cfg, &bank.backbone, &patches);
    Ok(bank
        .teachers
        .iter()
        .map(|teacher| {
            let (cell_logits, cell_box_raw) = teacher.detector.head_apply(&cell_feats);
            let output = DetectorOutput {
                cell_feats: Vec::new(),
                cell_logits,
                cell_box_raw,
                embedding: Vec::new(),
            };
            let (dets, _) = teacher.detector.decode(&output, score_thresh);
            dets
        })
        .collect())
}

/// A retained pseudo-label with provenance.
#[derive(Debug, Clone)]
pub struct RetainedLabel {
    pub detection: Detection,
    /// Index of the emitting source.
    pub source: usize,
    /// Index of the proposal within that source's list.
    pub proposal: usize,
}

/// Integrated pseudo-labels for one scene, keyed by class.
#[derive(Debug, Clone, Default)]
pub struct IntegratedLabels {
    pub per_class: BTreeMap<Category, Vec<RetainedLabel>>,
}

impl IntegratedLabels {
    pub fn total(&self) -> usize {
        self.per_class.values().map(|v| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    /// Flatten to (class, box) training targets.
    pub fn objects(&self) -> Vec<(Category, BoundingBox)> {
        self.per_class
            .values()
            .flat_map(|labels| labels.iter().map(|l| (l.detection.category, l.detection.bbox)))
            .collect()
    }

    /// Serialize into detection-dump records carrying provenance.
    pub fn records(&self) -> Vec<crate::types::DetectionRecord> {
        self.per_class
            .values()
            .flat_map(|labels| {
                labels.iter().map(|l| {
                    let mut rec = crate::types::DetectionRecord::from_detection(&l.detection);
                    rec.provenance = Some(crate::types::Provenance { source: l.source, proposal: l.proposal });
                    rec
                })
            })
            .collect()
    }
}

fn consensus(
    candidate: &Detection,
    other: &[Detection],
    class: Category,
    mode: ConsensusMode,
) -> bool {
    match mode {
        ConsensusMode::Exists => other
            .iter()
            .any(|m| m.category == class && iou(&candidate.bbox, &m.bbox) > 0.0),
        ConsensusMode::LiteralProduct => other.iter().all(|m| iou(&candidate.bbox, &m.bbox) > 0.0),
    }
}

/// Inconsistent Categories Integration.
///
/// For each target category `l`: with one covering source its class-`l`
/// proposals are adopted wholesale; with several, a class-`l` proposal is
/// kept only when the consensus test passes against every other covering
/// source; with none, the class stays empty.
pub fn ici(
    per_teacher: &[Vec<Detection>],
    source_sets: &[CategorySet],
    targets: &CategorySet,
    mode: ConsensusMode,
) -> Result<IntegratedLabels> {
    if per_teacher.len() != source_sets.len() {
        return Err(Error::protocol(format!(
            "{} detection lists for {} source sets",
            per_teacher.len(),
            source_sets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::config("target category set must be non-empty"));
    }
    let mut out = IntegratedLabels::default();
    for class in targets.iter() {
        let covering: Vec<usize> = (0..source_sets.len())
            .filter(|i| source_sets[*i].contains(class))
            .collect();
        let retained: Vec<RetainedLabel> = match covering.len() {
            0 => Vec::new(),
            1 => {
                let i = covering[0];
                per_teacher[i]
                    .iter()
                    .enumerate()
                    .filter(|(_, det)| det.category == class)
                    .map(|(j, det)| RetainedLabel { detection: det.clone(), source: i, proposal: j })
                    .collect()
            }
            _ => {
                let mut kept = Vec::new();
                for &i in &covering {
                    for (j, det) in per_teacher[i].iter().enumerate() {
                        if det.category != class {
                            continue;
                        }
                        let agreed = covering
                            .iter()
                            .filter(|&&n| n != i)
                            .all(|&n| consensus(det, &per_teacher[n], class, mode));
                        if agreed {
                            kept.push(RetainedLabel { detection: det.clone(), source: i, proposal: j });
                        }
                    }
                }
                kept
            }
        };
        if !retained.is_empty() {
            out.per_class.insert(class, retained);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Teacher pseudo-label emission threshold.
    pub score_thresh: f64,
    pub mode: ConsensusMode,
    pub seed: u64,
}

impl DistillConfig {
    pub fn desk_default(seed: u64) -> DistillConfig {
        DistillConfig {
            steps: 300,
            lr: 0.02,
            momentum: 0.9,
            score_thresh: 0.5,
            mode: ConsensusMode::Exists,
            seed,
        }
    }
}

pub struct DistillOutcome {
    /// Frozen fused backbone plus the trained unified head.
    pub student: GridDetector,
    pub loss_trace: Vec<f64>,
    /// Integrated labels per scene (provenance preserved).
    pub integrated: Vec<IntegratedLabels>,
}

/// Distill the teacher bank into a unified student head over unlabeled
/// target rasters. The backbone is frozen: gradients only reach `head.*`
/// entries; ground-truth labels are never seen here (the inputs are bare
/// rasters).
pub fn distill(
    bank: &TeacherBank,
    target_rasters: &[SceneImage],
    student_init: Option<GridDetector>,
    cfg: &DistillConfig,
) -> Result<DistillOutcome> {
    if target_rasters.is_empty() {
        return Err(Error::stage("distill", "no target scenes"));
    }
    let union = bank.union_categories()?;
    let mut student = match student_init {
        Some(s) => {
            if s.cfg.categories != union {
                // the student must cover every category any teacher can emit
                let missing: Vec<_> = union.iter().filter(|c| !s.cfg.categories.contains(*c)).collect();
                if !missing.is_empty() {
                    return Err(Error::config(format!(
                        "student head lacks categories {:?}",
                        missing.iter().map(|c| c.name()).collect::<Vec<_>>()
                    )));
                }
            }
            s
        }
        None => {
            let mut cfg_student = bank.base_cfg.clone();
            cfg_student.categories = union;
            let mut rng = rngutil::stream(cfg.seed, &["distill", "student_init"]);
            let fresh = GridDetector::init(cfg_student, &mut rng)?;
            let mut params = bank.backbone.clone();
            for (name, tensor) in fresh.params.head().iter() {
                params.insert(name, tensor.shape().to_vec(), tensor.data().to_vec())?;
            }
            GridDetector { cfg: fresh.cfg, params }
        }
    };

    // precompute per scene: frozen features, teacher predictions, integration
    let mut feats = Vec::with_capacity(target_rasters.len());
    let mut integrated = Vec::with_capacity(target_rasters.len());
    let mut assignments = Vec::with_capacity(target_rasters.len());
    for raster in target_rasters {
        let patches = GridDetector::patches(&bank.base_cfg, raster)?;
        let cell_feats = backbone_cell_feats(&bank.base_cfg, &bank.backbone, &patches);
        let preds = teacher_predict(bank, raster, cfg.score_thresh)?;
        let labels = ici(&preds, &bank.source_sets(), &union, cfg.mode)?;
        assignments.push(Assignment::from_objects(&student.cfg, &labels.objects()));
        feats.push(cell_feats);
        integrated.push(labels);
    }
    if integrated.iter().all(|l| l.is_empty()) {
        return Err(Error::stage(
            "distill",
            "teachers produced no consensus pseudo-labels on any scene",
        ));
    }

    let before = bank.backbone.checksum()?;
    let mut rng = rngutil::stream(cfg.seed, &["distill", "train"]);
    let mut sgd = SgdState::new();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = rng.gen_range(0..target_rasters.len());
        let mut tape = Tape::new();
        let forward = student.forward_tape_head_only(&mut tape, &feats[idx]);
        let loss = losses::tape_detection_loss(&mut tape, &forward, &assignments[idx], &student.cfg);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::stage("distill", format!("loss became non-finite at step {step}")));
        }
        trace.push(value);
        let mut grads = tape.backward(loss);
        debug_assert!(grads.iter().all(|(name, _)| name.starts_with(crate::tinynet::HEAD_PREFIX)));
        clip_grad_norm(&mut grads, crate::federation::GRAD_CLIP_NORM);
        sgd_step(&mut student.params, &grads, cfg.lr, cfg.momentum, &mut sgd)?;
    }
    debug_assert_eq!(bank.backbone.checksum()?, before, "distillation must not touch the backbone");

    Ok(DistillOutcome { student, loss_trace: trace, integrated })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(cat: Category, x: f64, y: f64, w: f64, h: f64, score: f64) -> Detection {
        Detection { category: cat, bbox: BoundingBox::new(x, y, w, h).unwrap(), score, gaussian: None }
    }

    fn set(cats: &[Category]) -> CategorySet {
        CategorySet::new(cats).unwrap()
    }

    #[test]
    fn singleton_source_adopts_everything() {
        let a = vec![det(Category::Bus, 10.0, 10.0, 6.0, 4.0, 0.9), det(Category::Bus, 30.0, 30.0, 6.0, 4.0, 0.8)];
        let b = vec![det(Category::Car, 11.0, 10.0, 6.0, 4.0, 0.7)];
        let sets = vec![set(&[Category::Bus]), set(&[Category::Car])];
        let out = ici(&[a, b], &sets, &set(&[Category::Bus]), ConsensusMode::Exists).unwrap();
        let bus = &out.per_class[&Category::Bus];
        assert_eq!(bus.len(), 2);
        assert!(bus.iter().all(|l| l.source == 0));
    }

    #[test]
    fn overlapping_proposals_from_two_sources_are_both_kept() {
        let a = vec![det(Category::Car, 10.0, 10.0, 6.0, 4.0, 0.9)];
        let b = vec![det(Category::Car, 11.0, 10.5, 6.0, 4.0, 0.8)];
        let sets = vec![set(&[Category::Car]), set(&[Category::Car])];
        let out = ici(&[a, b], &sets, &set(&[Category::Car]), ConsensusMode::Exists).unwrap();
        assert_eq!(out.per_class[&Category::Car].len(), 2);
    }

    #[test]
    fn disjoint_proposal_is_dropped_under_exists() {
        let a = vec![det(Category::Car, 5.0, 5.0, 4.0, 4.0, 0.9)];
        let b = vec![det(Category::Car, 40.0, 40.0, 4.0, 4.0, 0.8)];
        let sets = vec![set(&[Category::Car]), set(&[Category::Car])];
        let out = ici(&[a, b], &sets, &set(&[Category::Car]), ConsensusMode::Exists).unwrap();
        assert!(out.per_class.get(&Category::Car).is_none());
    }

    #[test]
    fn uncovered_class_stays_empty() {
        let a = vec![det(Category::Car, 5.0, 5.0, 4.0, 4.0, 0.9)];
        let sets = vec![set(&[Category::Car])];
        let out = ici(&[a], &sets, &set(&[Category::Car, Category::Train]), ConsensusMode::Exists).unwrap();
        assert!(out.per_class.get(&Category::Train).is_none());
        assert_eq!(out.per_class[&Category::Car].len(), 1);
    }

    #[test]
    fn class_purity_holds() {
        let a = vec![
            det(Category::Car, 10.0, 10.0, 6.0, 4.0, 0.9),
            det(Category::Bus, 10.0, 10.0, 8.0, 5.0, 0.7),
        ];
        let b = vec![det(Category::Car, 11.0, 10.0, 6.0, 4.0, 0.8), det(Category::Bus, 9.0, 10.0, 8.0, 5.0, 0.6)];
        let sets = vec![CategorySet::full(), CategorySet::full()];
        let out = ici(&[a, b], &sets, &CategorySet::full(), ConsensusMode::Exists).unwrap();
        for (class, labels) in &out.per_class {
            assert!(labels.iter().all(|l| l.detection.category == *class));
        }
    }

    #[test]
    fn literal_product_vacuous_when_other_source_has_no_proposals() {
        // empty product over zero proposals counts as nonzero
        let a = vec![det(Category::Car, 10.0, 10.0, 6.0, 4.0, 0.9)];
        let b: Vec<Detection> = Vec::new();
        let sets = vec![set(&[Category::Car]), set(&[Category::Car])];
        let lit = ici(&[a.clone(), b.clone()], &sets, &set(&[Category::Car]), ConsensusMode::LiteralProduct).unwrap();
        assert_eq!(lit.per_class[&Category::Car].len(), 1);
        // under the existential rule the same proposal is dropped
        let ex = ici(&[a, b], &sets, &set(&[Category::Car]), ConsensusMode::Exists).unwrap();
        assert!(ex.per_class.get(&Category::Car).is_none());
    }

    #[test]
    fn literal_product_is_zeroed_by_any_disjoint_proposal() {
        let a = vec![det(Category::Car, 10.0, 10.0, 6.0, 4.0, 0.9)];
        // source b has an overlapping car and a disjoint bus; the class-blind
        // product picks up the bus and zeroes out
        let b = vec![
            det(Category::Car, 11.0, 10.0, 6.0, 4.0, 0.8),
            det(Category::Bus, 40.0, 40.0, 8.0, 5.0, 0.9),
        ];
        let sets = vec![set(&[Category::Car]), set(&[Category::Car, Category::Bus])];
        let lit = ici(&[a.clone(), b.clone()], &sets, &set(&[Category::Car]), ConsensusMode::LiteralProduct).unwrap();
        // a's car fails the product test; b's car still overlaps everything in a
        let kept = &lit.per_class[&Category::Car];
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].source, 1);
        // exists mode keeps both cars
        let ex = ici(&[a, b], &sets, &set(&[Category::Car]), ConsensusMode::Exists).unwrap();
        assert_eq!(ex.per_class[&Category::Car].len(), 2);
    }

    #[test]
    fn monotonicity_adding_overlap_never_removes_retained() {
        let a = vec![det(Category::Car, 10.0, 10.0, 6.0, 4.0, 0.9)];
        let b = vec![det(Category::Car, 11.0, 10.0, 6.0, 4.0, 0.8)];
        let sets = vec![set(&[Category::Car]), set(&[Category::Car])];
        let before = ici(&[a.clone(), b.clone()], &sets, &set(&[Category::Car]), ConsensusMode::Exists).unwrap();
        let mut b2 = b;
        b2.push(det(Category::Car, 9.5, 10.5, 5.0, 4.0, 0.6));
        let after = ici(&[a, b2], &sets, &set(&[Category::Car]), ConsensusMode::Exists).unwrap();
        assert!(after.per_class[&Category::Car].len() >= before.per_class[&Category::Car].len());
    }
}

//! End-to-end scenario runner: style generation, federation, distillation
//! and evaluation, with deterministic seed derivation, artifact persistence
//! and a stable report schema.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evalkit::{self, EvalScene, LeakageBands, LeakageReport, SourceBreakdown};
use crate::federation::{self, ClientState, RoundConfig};
use crate::ici::{self, ConsensusMode, DistillConfig, TeacherBank};
use crate::losses;
use crate::rngutil;
use crate::scenesim::{self, DomainSpec};
use crate::stylegen::{self, DiffusionConfig, GenStrategy};
use crate::tinynet::{
    clip_grad_norm, sgd_step, Assignment, BoxLossKind, DetectorConfig, GridDetector, SgdState, Tape,
};
use crate::types::{
    write_detections_jsonl, Category, CategorySet, DetectionRecord, DomainTag, LabeledScene,
    SceneDetections, SceneImage,
};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Decode threshold for evaluation sweeps: AP needs the full score ranking,
/// so evaluation keeps nearly everything and lets the PR sweep sort it out.
pub const EVAL_SCORE_THRESH: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugStrategy {
    None,
    All,
    Rare,
}

/// Shared detector architecture (per-client heads differ only in width).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorSettings {
    pub grid: usize,
    pub patch_margin: usize,
    pub cell_feat: usize,
    pub embed_dim: usize,
    pub score_thresh: f64,
    pub box_loss: BoxLossKind,
}

impl DetectorSettings {
    pub fn desk_default() -> DetectorSettings {
        DetectorSettings { grid: 6, patch_margin: 4, cell_feat: 48, embed_dim: 32, score_thresh: 0.5, box_loss: BoxLossKind::GaussianNll }
    }

    fn config_for(&self, scene_size: (usize, usize, usize), categories: CategorySet) -> DetectorConfig {
        DetectorConfig {
            scene_h: scene_size.0,
            scene_w: scene_size.1,
            channels: scene_size.2,
            grid: self.grid,
            patch_margin: self.patch_margin,
            cell_feat: self.cell_feat,
            embed_dim: self.embed_dim,
            categories,
            score_thresh: self.score_thresh,
            box_loss: self.box_loss,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillSettings {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub score_thresh: f64,
    pub mode: ConsensusMode,
}

impl DistillSettings {
    pub fn desk_default() -> DistillSettings {
        DistillSettings { steps: 400, lr: 0.02, momentum: 0.9, score_thresh: 0.5, mode: ConsensusMode::Exists }
    }
}

/// Complete description of one run; the master seed determines every derived
/// stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: String,
    pub master_seed: u64,
    pub sources: Vec<DomainSpec>,
    pub target: DomainSpec,
    pub augmentation: AugStrategy,
    /// Explicit class set for the rare strategy; defaults to
    /// bus/motorcycle/truck/train.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rare_classes: Option<CategorySet>,
    pub per_class: usize,
    pub train_scenes_per_source: usize,
    pub distill_scenes: usize,
    pub eval_scenes: usize,
    pub round: RoundConfig,
    pub diffusion: DiffusionConfig,
    pub detector: DetectorSettings,
    pub distill: DistillSettings,
    pub parallel: bool,
}

impl ScenarioConfig {
    pub fn ck2b_analog(master_seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            scenario: "ck2b_analog".into(),
            master_seed,
            sources: scenesim::ck2b_analog_sources(master_seed),
            target: scenesim::ck2b_analog_target(master_seed),
            augmentation: AugStrategy::Rare,
            rare_classes: None,
            per_class: 12,
            train_scenes_per_source: 60,
            distill_scenes: 48,
            eval_scenes: 48,
            round: RoundConfig::desk_default(),
            diffusion: DiffusionConfig::desk_default(),
            detector: DetectorSettings::desk_default(),
            distill: DistillSettings::desk_default(),
            parallel: false,
        }
    }

    pub fn skf2c_analog(master_seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            scenario: "skf2c_analog".into(),
            sources: scenesim::skf2c_analog_sources(master_seed),
            target: scenesim::skf2c_analog_target(master_seed),
            ..ScenarioConfig::ck2b_analog(master_seed)
        }
    }

    pub fn by_name(name: &str, master_seed: u64) -> Result<ScenarioConfig> {
        match name {
            "ck2b" | "ck2b_analog" => Ok(ScenarioConfig::ck2b_analog(master_seed)),
            "skf2c" | "skf2c_analog" => Ok(ScenarioConfig::skf2c_analog(master_seed)),
            other => Err(Error::config(format!("unknown scenario `{other}`"))),
        }
    }

    pub fn from_file(path: &Path) -> Result<ScenarioConfig> {
        let bytes = std::fs::read(path)?;
        let cfg: ScenarioConfig = serde_json::from_slice(&bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::config("at least one source domain required"));
        }
        for spec in self.sources.iter().chain([&self.target]) {
            spec.validate()?;
            if spec.scene_size != self.target.scene_size {
                return Err(Error::config("all domains must share one scene size"));
            }
        }
        self.round.validate()?;
        self.diffusion.validate()?;
        if self.train_scenes_per_source == 0 || self.eval_scenes == 0 || self.distill_scenes == 0 {
            return Err(Error::config("scene counts must be >= 1"));
        }
        if self.augmentation != AugStrategy::None && self.per_class == 0 {
            return Err(Error::config("per_class must be >= 1 when augmentation is enabled"));
        }
        // target must cover the union of the classes evaluation needs
        let mut union = self.sources[0].categories;
        for s in &self.sources[1..] {
            union = union.union(&s.categories);
        }
        for cat in union.iter() {
            if !self.target.categories.contains(cat) {
                return Err(Error::config(format!("target categories must cover `{cat}`")));
            }
        }
        let sample = self.detector.config_for(self.target.scene_size, CategorySet::full());
        sample.validate()?;
        Ok(())
    }

    fn gen_strategy(&self) -> Option<GenStrategy> {
        match self.augmentation {
            AugStrategy::None => None,
            AugStrategy::All => Some(GenStrategy::All),
            AugStrategy::Rare => Some(match self.rare_classes {
                Some(set) => GenStrategy::Rare(set),
                None => GenStrategy::rare_default(),
            }),
        }
    }
}

/// What target-domain data a stage consumed; the privacy audit asserted by
/// the tests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditEntry {
    pub stage: String,
    pub data: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeakageSummary {
    pub bands: LeakageBands,
    pub mean_ssim: f64,
    pub max_ssim: f64,
    pub mean_psnr_db: f64,
    pub max_psnr_db: f64,
    pub per_scene: Vec<LeakageReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommSummary {
    pub rounds: usize,
    pub clients: usize,
    pub backbone_bytes: u64,
    pub bytes_down: u64,
    pub bytes_up: u64,
    pub total_bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub scenario: String,
    pub variant: String,
    pub master_seed: u64,
    pub iou_thresh: f64,
    pub map: f64,
    pub per_class_ap: BTreeMap<String, Option<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<SourceBreakdown>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub leakage: Option<LeakageSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comm: Option<CommSummary>,
    pub checksums: BTreeMap<String, String>,
    pub config: ScenarioConfig,
}

impl Report {
    pub fn read(path: &Path) -> Result<Report> {
        let bytes = std::fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(())
    }
}

pub struct RunArtifacts {
    pub report: Report,
    pub audit: Vec<AuditEntry>,
    pub out_dir: Option<PathBuf>,
}

fn derive_split(spec: &DomainSpec, split: &str) -> DomainSpec {
    spec.with_seed(rngutil::derive_seed(spec.seed, &["split", split]))
}

/// Train/val data for one run, rendered deterministically from the config.
struct RenderedData {
    source_scenes: Vec<Vec<LabeledScene>>,
    reference: LabeledScene,
    distill_rasters: Vec<SceneImage>,
    eval_scenes: Vec<LabeledScene>,
}

fn render_all(cfg: &ScenarioConfig, audit: &mut Vec<AuditEntry>) -> Result<RenderedData> {
    let source_scenes = cfg
        .sources
        .iter()
        .enumerate()
        .map(|(i, spec)| scenesim::make_dataset(spec, cfg.train_scenes_per_source, DomainTag::Source(i)))
        .collect::<Result<Vec<_>>>()?;
    let reference = {
        let spec = derive_split(&cfg.target, "reference");
        scenesim::make_dataset(&spec, 1, DomainTag::Target)?.remove(0)
    };
    let distill_rasters: Vec<SceneImage> = {
        let spec = derive_split(&cfg.target, "distill");
        let scenes = scenesim::make_dataset(&spec, cfg.distill_scenes, DomainTag::Target)?;
        audit.push(AuditEntry { stage: "distill".into(), data: "rasters".into() });
        scenes.into_iter().map(|s| s.image).collect()
    };
    let eval_scenes = {
        let spec = derive_split(&cfg.target, "eval");
        scenesim::make_dataset(&spec, cfg.eval_scenes, DomainTag::Target)?
    };
    Ok(RenderedData { source_scenes, reference, distill_rasters, eval_scenes })
}

/// Objects a client's head cannot represent are dropped from its training
/// view of a scene (they become background, exactly as unlabeled classes in
/// its own source data would).
fn restrict_to_head(scene: &LabeledScene, categories: &CategorySet) -> LabeledScene {
    LabeledScene {
        image: scene.image.clone(),
        objects: scene.objects.iter().filter(|(c, _)| categories.contains(*c)).cloned().collect(),
        domain: scene.domain,
    }
}

fn detector_for_client(cfg: &ScenarioConfig, idx: usize, categories: CategorySet) -> Result<GridDetector> {
    let det_cfg = cfg.detector.config_for(cfg.target.scene_size, categories);
    let idx_str = idx.to_string();
    let mut rng = rngutil::stream(cfg.master_seed, &["detector", "init", &idx_str]);
    GridDetector::init(det_cfg, &mut rng)
}

/// Decode detections for a set of scenes into evaluation pairs.
fn eval_pairs(detector: &GridDetector, scenes: &[LabeledScene], score_thresh: f64) -> Result<Vec<EvalScene>> {
    scenes
        .iter()
        .map(|scene| {
            let out = detector.forward(&scene.image)?;
            let (preds, _) = detector.decode(&out, score_thresh);
            Ok(EvalScene { preds, truths: scene.objects.clone() })
        })
        .collect()
}

fn write_predictions(path: &Path, detector: &GridDetector, scenes: &[LabeledScene], score_thresh: f64, tag: &str) -> Result<()> {
    let mut dump = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let out = detector.forward(&scene.image)?;
        let (preds, _) = detector.decode(&out, score_thresh);
        dump.push(SceneDetections {
            scene_id: format!("eval_{i:06}"),
            domain_tag: tag.to_string(),
            detections: preds.iter().map(DetectionRecord::from_detection).collect(),
        });
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::fs::File::create(path)?;
    write_detections_jsonl(&mut file, &dump)?;
    Ok(())
}

/// Run the full three-stage pipeline; artifacts are written under `out_dir`
/// when given. Reruns with the same config are byte-identical.
pub fn run_pipeline(cfg: &ScenarioConfig, out_dir: Option<&Path>) -> Result<RunArtifacts> {
    cfg.validate()?;
    let mut audit: Vec<AuditEntry> = Vec::new();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut bytes = serde_json::to_vec_pretty(cfg)?;
        bytes.push(b'\n');
        std::fs::write(dir.join("config.json"), bytes)?;
    }
    let data = render_all(cfg, &mut audit)?;

    // stage 1: one-shot personalization and class-aware generation
    let mut leakage = None;
    let synthetic: Vec<LabeledScene> = match cfg.gen_strategy() {
        None => Vec::new(),
        Some(strategy) => {
            audit.push(AuditEntry { stage: "stylegen".into(), data: "rasters".into() });
            let init = stylegen::Denoiser::init(rngutil::derive_seed(cfg.master_seed, &["stylegen", "init"]))?;
            let personalized = stylegen::personalize(
                &init,
                &data.reference,
                &cfg.diffusion,
                rngutil::derive_seed(cfg.master_seed, &["stylegen", "personalize"]),
            )
            .map_err(|e| Error::stage("stylegen", e.to_string()))?;
            let scenes = stylegen::generate_augmentation(
                &personalized.denoiser,
                &strategy,
                cfg.per_class,
                &cfg.target,
                &cfg.diffusion,
                rngutil::derive_seed(cfg.master_seed, &["stylegen", "generate"]),
            )
            .map_err(|e| Error::stage("stylegen", e.to_string()))?;

            let bands = LeakageBands::default();
            let mut reports = Vec::with_capacity(scenes.len());
            for scene in &scenes {
                reports.push(evalkit::leakage_metrics(&scene.image, &data.reference.image, &bands)?);
            }
            let mean = |f: fn(&LeakageReport) -> f64| reports.iter().map(f).sum::<f64>() / reports.len() as f64;
            let max = |f: fn(&LeakageReport) -> f64| reports.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
            leakage = Some(LeakageSummary {
                bands,
                mean_ssim: mean(|r| r.ssim),
                max_ssim: max(|r| r.ssim),
                mean_psnr_db: mean(|r| r.psnr_db),
                max_psnr_db: max(|r| r.psnr_db),
                per_scene: reports,
            });

            if let Some(dir) = out_dir {
                stylegen::save_model(&personalized.denoiser, &cfg.diffusion, &dir.join("stage1/model.ckpt"))?;
                scenesim::export_dataset(&dir.join("stage1/synthetic"), &scenes, None)?;
            }
            scenes
        }
    };

    // stage 2: federated training with backbone-only fusion
    let mut clients = Vec::with_capacity(cfg.sources.len());
    for (i, (spec, scenes)) in cfg.sources.iter().zip(&data.source_scenes).enumerate() {
        let detector = detector_for_client(cfg, i, spec.categories)?;
        let synth_view: Vec<LabeledScene> = synthetic.iter().map(|s| restrict_to_head(s, &spec.categories)).collect();
        clients.push(ClientState::new(i, detector, scenes.clone(), synth_view, cfg.master_seed)?);
    }
    let init_backbone = {
        let mut rng = rngutil::stream(cfg.master_seed, &["server", "init"]);
        GridDetector::init(cfg.detector.config_for(cfg.target.scene_size, CategorySet::full()), &mut rng)?
            .params
            .backbone()
    };
    let fed = federation::run_federation(&mut clients, &init_backbone, &cfg.round, cfg.parallel)
        .map_err(|e| Error::stage("federation", e.to_string()))?;
    if let Some(dir) = out_dir {
        fed.ledger.write_csv(&dir.join("stage2/ledger.csv"))?;
        for (r, map) in fed.round_backbones.iter().enumerate() {
            map.write_file(&dir.join(format!("stage2/round_{}/global_backbone.ckpt", r + 1)))?;
        }
        for client in &clients {
            client
                .detector
                .params
                .head()
                .write_file(&dir.join(format!("stage2/client_{}_head.ckpt", client.id)))?;
        }
    }

    // stage 3: integration and distillation into a unified student head
    let bank = TeacherBank::new(
        fed.global_backbone.clone(),
        cfg.detector.config_for(cfg.target.scene_size, CategorySet::full()),
        clients
            .iter()
            .map(|c| (c.id, c.detector.params.head(), c.detector.cfg.categories))
            .collect(),
    )?;
    let distill_cfg = DistillConfig {
        steps: cfg.distill.steps,
        lr: cfg.distill.lr,
        momentum: cfg.distill.momentum,
        score_thresh: cfg.distill.score_thresh,
        mode: cfg.distill.mode,
        seed: rngutil::derive_seed(cfg.master_seed, &["distill"]),
    };
    let distilled = ici::distill(&bank, &data.distill_rasters, None, &distill_cfg)
        .map_err(|e| match e {
            Error::StageAbort { .. } => e,
            other => Error::stage("distill", other.to_string()),
        })?;
    if let Some(dir) = out_dir {
        distilled.student.params.write_file(&dir.join("stage3/student.ckpt"))?;
        let records: Vec<SceneDetections> = distilled
            .integrated
            .iter()
            .enumerate()
            .map(|(i, labels)| SceneDetections {
                scene_id: format!("distill_{i:06}"),
                domain_tag: "target".into(),
                detections: labels.records(),
            })
            .collect();
        let mut file = std::fs::File::create(dir.join("stage3/integrated.jsonl"))?;
        write_detections_jsonl(&mut file, &records)?;
    }

    // evaluation on the held-out target split (the only label consumer)
    audit.push(AuditEntry { stage: "evalkit".into(), data: "labels".into() });
    let pairs = eval_pairs(&distilled.student, &data.eval_scenes, EVAL_SCORE_THRESH)?;
    let classes: Vec<Category> = cfg.target.categories.iter().collect();
    let summary = evalkit::evaluate(&pairs, &classes, 0.5)?;

    let breakdown = if clients.len() >= 2 {
        let mut per_source: Vec<Vec<Vec<crate::types::Detection>>> = vec![Vec::new(); clients.len()];
        for scene in &data.eval_scenes {
            let preds = ici::teacher_predict(&bank, &scene.image, cfg.distill.score_thresh)?;
            for (s, dets) in preds.into_iter().enumerate() {
                per_source[s].push(dets);
            }
        }
        let truths: Vec<Vec<(Category, crate::types::BoundingBox)>> =
            data.eval_scenes.iter().map(|s| s.objects.clone()).collect();
        Some(evalkit::source_breakdown(&per_source, &truths, 0.5)?)
    } else {
        None
    };

    let mut checksums = BTreeMap::new();
    checksums.insert("global_backbone".to_string(), fed.global_backbone.checksum()?);
    checksums.insert("student".to_string(), distilled.student.params.checksum()?);

    let report = Report {
        schema_version: REPORT_SCHEMA_VERSION,
        scenario: cfg.scenario.clone(),
        variant: "full_pipeline".into(),
        master_seed: cfg.master_seed,
        iou_thresh: 0.5,
        map: summary.map,
        per_class_ap: summary.per_class_ap,
        breakdown,
        leakage,
        comm: Some(CommSummary {
            rounds: cfg.round.rounds,
            clients: clients.len(),
            backbone_bytes: init_backbone.byte_size()? as u64,
            bytes_down: fed.ledger.rows.iter().map(|r| r.bytes_down).sum(),
            bytes_up: fed.ledger.rows.iter().map(|r| r.bytes_up).sum(),
            total_bytes: fed.ledger.total_bytes(),
        }),
        checksums,
        config: cfg.clone(),
    };
    if let Some(dir) = out_dir {
        write_predictions(
            &dir.join("eval/predictions.jsonl"),
            &distilled.student,
            &data.eval_scenes,
            EVAL_SCORE_THRESH,
            "target",
        )?;
        report.write(&dir.join("report.json"))?;
    }
    Ok(RunArtifacts { report, audit, out_dir: out_dir.map(|p| p.to_path_buf()) })
}

/// Train one client alone on its own source data (no synthetic data, no
/// contrastive term, no fusion, no distillation) for the same total
/// iteration budget, then evaluate it on the identical held-out target
/// split. The lower baseline the full pipeline has to beat.
pub fn run_source_only(cfg: &ScenarioConfig, source_idx: usize, out_dir: Option<&Path>) -> Result<RunArtifacts> {
    cfg.validate()?;
    if source_idx >= cfg.sources.len() {
        return Err(Error::config(format!("source index {source_idx} out of range")));
    }
    let mut audit = Vec::new();
    let data = render_all(cfg, &mut audit)?;
    let spec = &cfg.sources[source_idx];
    let mut detector = detector_for_client(cfg, source_idx, spec.categories)?;
    let det_cfg = detector.cfg.clone();
    let scenes = &data.source_scenes[source_idx];
    let caches: Vec<(Vec<Vec<f64>>, Assignment)> = scenes
        .iter()
        .map(|s| {
            Ok((
                GridDetector::patches(&det_cfg, &s.image)?,
                Assignment::from_objects(&det_cfg, &s.objects),
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let total_iters = cfg.round.rounds * cfg.round.local_iters;
    let idx_str = source_idx.to_string();
    let mut rng = rngutil::stream(cfg.master_seed, &["source_only", &idx_str]);
    let mut sgd = SgdState::new();
    use rand::Rng;
    for _ in 0..total_iters {
        let mut tape = Tape::new();
        let mut terms = Vec::with_capacity(cfg.round.batch_size);
        for _ in 0..cfg.round.batch_size {
            let idx = rng.gen_range(0..caches.len());
            let forward = detector.forward_tape(&mut tape, &caches[idx].0);
            terms.push(losses::tape_detection_loss(&mut tape, &forward, &caches[idx].1, &det_cfg));
        }
        let loss = tape.mean_nodes(&terms);
        if !tape.scalar(loss).is_finite() {
            return Err(Error::stage("source_only", "loss became non-finite"));
        }
        let mut grads = tape.backward(loss);
        clip_grad_norm(&mut grads, crate::federation::GRAD_CLIP_NORM);
        sgd_step(&mut detector.params, &grads, cfg.round.lr, cfg.round.momentum, &mut sgd)?;
    }

    audit.push(AuditEntry { stage: "evalkit".into(), data: "labels".into() });
    let pairs = eval_pairs(&detector, &data.eval_scenes, EVAL_SCORE_THRESH)?;
    let classes: Vec<Category> = cfg.target.categories.iter().collect();
    let summary = evalkit::evaluate(&pairs, &classes, 0.5)?;
    let mut checksums = BTreeMap::new();
    checksums.insert("detector".to_string(), detector.params.checksum()?);

    let report = Report {
        schema_version: REPORT_SCHEMA_VERSION,
        scenario: cfg.scenario.clone(),
        variant: format!("source_only_{source_idx}"),
        master_seed: cfg.master_seed,
        iou_thresh: 0.5,
        map: summary.map,
        per_class_ap: summary.per_class_ap,
        breakdown: None,
        leakage: None,
        comm: None,
        checksums,
        config: cfg.clone(),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        report.write(&dir.join("report.json"))?;
    }
    Ok(RunArtifacts { report, audit, out_dir: out_dir.map(|p| p.to_path_buf()) })
}

/// Signed per-class AP difference between two runs.
#[derive(Debug, Clone, Serialize)]
pub struct DeltaTable {
    pub per_class: BTreeMap<String, Option<f64>>,
    pub delta_map: f64,
}

impl DeltaTable {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("class        delta_ap\n");
        for (name, delta) in &self.per_class {
            match delta {
                Some(d) => out.push_str(&format!("{name:<12} {d:+.4}\n")),
                None => out.push_str(&format!("{name:<12} n/a\n")),
            }
        }
        out.push_str(&format!("{:<12} {:+.4}\n", "mAP", self.delta_map));
        out
    }
}

/// Candidate minus baseline, per class and overall.
pub fn compare_runs(baseline: &Report, candidate: &Report) -> Result<DeltaTable> {
    let base_classes: Vec<&String> = baseline.per_class_ap.keys().collect();
    let cand_classes: Vec<&String> = candidate.per_class_ap.keys().collect();
    if base_classes != cand_classes {
        return Err(Error::config(format!(
            "class sets differ: {base_classes:?} vs {cand_classes:?}"
        )));
    }
    let mut per_class = BTreeMap::new();
    for (name, base_ap) in &baseline.per_class_ap {
        let cand_ap = candidate.per_class_ap[name];
        let delta = match (base_ap, cand_ap) {
            (Some(b), Some(c)) => Some(c - b),
            _ => None,
        };
        per_class.insert(name.clone(), delta);
    }
    Ok(DeltaTable { per_class, delta_map: candidate.map - baseline.map })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_configs_validate() {
        ScenarioConfig::ck2b_analog(7).validate().unwrap();
        ScenarioConfig::skf2c_analog(7).validate().unwrap();
    }

    #[test]
    fn config_json_roundtrip() {
        let cfg = ScenarioConfig::ck2b_analog(42);
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ScenarioConfig = serde_json::from_str(&json).unwrap();
        back.validate().unwrap();
        assert_eq!(serde_json::to_string_pretty(&back).unwrap(), json);
    }

    #[test]
    fn unknown_scenario_is_a_config_error() {
        let err = ScenarioConfig::by_name("nope", 1).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn compare_requires_matching_classes() {
        let cfg = ScenarioConfig::ck2b_analog(1);
        let mut a = Report {
            schema_version: 1,
            scenario: "x".into(),
            variant: "full_pipeline".into(),
            master_seed: 1,
            iou_thresh: 0.5,
            map: 0.30,
            per_class_ap: BTreeMap::from([("car".to_string(), Some(0.5))]),
            breakdown: None,
            leakage: None,
            comm: None,
            checksums: BTreeMap::new(),
            config: cfg,
        };
        let mut b = a.clone();
        b.map = 0.32;
        b.per_class_ap.insert("car".to_string(), Some(0.55));
        let table = compare_runs(&a, &b).unwrap();
        assert!((table.delta_map - 0.02).abs() < 1e-12);
        assert!((table.per_class["car"].unwrap() - 0.05).abs() < 1e-12);

        a.per_class_ap.insert("bus".to_string(), Some(0.1));
        assert!(compare_runs(&a, &b).is_err());
    }

    #[test]
    fn identical_reports_compare_to_zero() {
        let cfg = ScenarioConfig::ck2b_analog(1);
        let a = Report {
            schema_version: 1,
            scenario: "x".into(),
            variant: "full_pipeline".into(),
            master_seed: 1,
            iou_thresh: 0.5,
            map: 0.30,
            per_class_ap: BTreeMap::from([("car".to_string(), Some(0.5)), ("bus".to_string(), None)]),
            breakdown: None,
            leakage: None,
            comm: None,
            checksums: BTreeMap::new(),
            config: cfg,
        };
        let table = compare_runs(&a, &a).unwrap();
        assert_eq!(table.delta_map, 0.0);
        assert_eq!(table.per_class["car"], Some(0.0));
        assert_eq!(table.per_class["bus"], None);
    }
}

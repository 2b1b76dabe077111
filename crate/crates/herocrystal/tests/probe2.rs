//! Deeper probe of federation training quality.

use herocrystal::federation::{run_federation, ClientState, RoundConfig};
use herocrystal::ici::{teacher_predict, TeacherBank};
use herocrystal::pipeline::ScenarioConfig;
use herocrystal::rngutil;
use herocrystal::scenesim::{self};
use herocrystal::tinynet::{DetectorConfig, GridDetector};
use herocrystal::types::{CategorySet, DomainTag};

#[test]
#[ignore]
fn probe_federation_learning() {
    let cfg = ScenarioConfig::ck2b_analog(1);
    let sources: Vec<Vec<_>> = cfg
        .sources
        .iter()
        .enumerate()
        .map(|(i, s)| scenesim::make_dataset(s, cfg.train_scenes_per_source, DomainTag::Source(i)).unwrap())
        .collect();

    let det_cfg = |cats| DetectorConfig::desk_default(cats);
    let mut clients = Vec::new();
    for (i, spec) in cfg.sources.iter().enumerate() {
        let mut rng = rngutil::stream(cfg.master_seed, &["detector", "init", &i.to_string()]);
        let det = GridDetector::init(det_cfg(spec.categories), &mut rng).unwrap();
        clients.push(ClientState::new(i, det, sources[i].clone(), vec![], cfg.master_seed).unwrap());
    }
    let init_backbone = {
        let mut rng = rngutil::stream(cfg.master_seed, &["server", "init"]);
        GridDetector::init(det_cfg(CategorySet::full()), &mut rng).unwrap().params.backbone()
    };
    let round = RoundConfig { local_iters: 200, ..RoundConfig::desk_default() };
    let start = std::time::Instant::now();
    let run = run_federation(&mut clients, &init_backbone, &round, false).unwrap();
    println!("federation took {:.1}s", start.elapsed().as_secs_f64());
    for row in &run.ledger.rows {
        println!("round {}: mean loss {:.4}", row.round, row.mean_client_loss);
    }

    // evaluate teachers on target scenes
    let bank = TeacherBank::new(
        run.global_backbone.clone(),
        det_cfg(CategorySet::full()),
        clients.iter().map(|c| (c.id, c.detector.params.head(), c.detector.cfg.categories)).collect(),
    )
    .unwrap();
    let target = scenesim::make_dataset(&cfg.target, 8, DomainTag::Target).unwrap();
    for thresh in [0.5, 0.3, 0.2] {
        let mut counts = vec![0usize; clients.len()];
        for scene in &target {
            let preds = teacher_predict(&bank, &scene.image, thresh).unwrap();
            for (s, p) in preds.iter().enumerate() {
                counts[s] += p.len();
            }
        }
        println!("thresh {thresh}: teacher detections over 8 scenes = {counts:?}");
    }
    // and on their own source data
    for thresh in [0.5, 0.3] {
        let mut counts = vec![0usize; clients.len()];
        let mut gt = 0;
        for scene in sources[0].iter().take(8) {
            let preds = teacher_predict(&bank, &scene.image, thresh).unwrap();
            for (s, p) in preds.iter().enumerate() {
                counts[s] += p.len();
            }
            gt += scene.objects.len();
        }
        println!("source0 thresh {thresh}: detections {counts:?} vs gt {gt}");
    }

    // client training loss trajectory, first vs last
    println!("round losses present; inspect decode on train scene:");
    let c0 = &clients[0];
    let scene = &sources[0][0];
    let out = c0.detector.forward(&scene.image).unwrap();
    let (dets, _) = c0.detector.decode(&out, 0.3);
    println!("client0 on own scene: {} detections, {} gt", dets.len(), scene.objects.len());
    for d in dets.iter().take(5) {
        println!("  {:?} score {:.3} box ({:.1},{:.1},{:.1},{:.1})", d.category, d.score, d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h);
    }
    for (c, b) in scene.objects.iter().take(5) {
        println!("  gt {:?} ({:.1},{:.1},{:.1},{:.1})", c, b.x, b.y, b.w, b.h);
    }
}

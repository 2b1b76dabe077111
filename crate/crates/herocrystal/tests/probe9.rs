//! Isolate classification: detector trained with the cls term only.

use herocrystal::losses;
use herocrystal::pipeline::ScenarioConfig;
use herocrystal::rngutil;
use herocrystal::scenesim;
use herocrystal::tinynet::{clip_grad_norm, sgd_step, Assignment, DetectorConfig, GridDetector, SgdState, Tape};
use herocrystal::types::DomainTag;
use rand::Rng;

#[test]
#[ignore]
fn cls_only_training() {
    let cfg = ScenarioConfig::ck2b_analog(1);
    let spec = &cfg.sources[0];
    let train = scenesim::make_dataset(spec, 200, DomainTag::Source(0)).unwrap();
    let eval_spec = spec.with_seed(rngutil::derive_seed(spec.seed, &["own-eval"]));
    let eval = scenesim::make_dataset(&eval_spec, 50, DomainTag::Source(0)).unwrap();
    let mut det_cfg = DetectorConfig::desk_default(spec.categories);
    if let Ok(cf) = std::env::var("P_CF") {
        det_cfg.cell_feat = cf.parse().unwrap();
    }
    println!("cell_feat {}", det_cfg.cell_feat);
    let mut rng = rngutil::stream(5, &["probe9"]);
    let mut det = GridDetector::init(det_cfg.clone(), &mut rng).unwrap();
    let caches: Vec<_> = train
        .iter()
        .map(|s| {
            (
                GridDetector::patches(&det_cfg, &s.image).unwrap(),
                Assignment::from_objects(&det_cfg, &s.objects),
            )
        })
        .collect();
    let mut sgd = SgdState::new();
    let cls_only: bool = std::env::var("P_CLS_ONLY").map(|v| v == "1").unwrap_or(true);
    for _ in 0..4000 {
        let mut tape = Tape::new();
        let mut terms = Vec::new();
        for _ in 0..8 {
            let i = rng.gen_range(0..caches.len());
            let fwd = det.forward_tape(&mut tape, &caches[i].0);
            let node = if cls_only {
                losses::tape_cls_loss(&mut tape, &fwd, &caches[i].1, &det_cfg)
            } else {
                losses::tape_detection_loss(&mut tape, &fwd, &caches[i].1, &det_cfg)
            };
            terms.push(node);
        }
        let loss = tape.mean_nodes(&terms);
        let mut grads = tape.backward(loss);
        clip_grad_norm(&mut grads, std::env::var("P_CLIP").unwrap_or("5.0".into()).parse().unwrap());
        sgd_step(&mut det.params, &grads, 0.007, 0.9, &mut sgd).unwrap();
    }
    let mut ok = 0usize;
    let mut total = 0usize;
    for scene in &eval {
        let out = det.forward(&scene.image).unwrap();
        for (cat, gt) in &scene.objects {
            let col = ((gt.x / det_cfg.cell_w()) as usize).min(det_cfg.grid - 1);
            let row = ((gt.y / det_cfg.cell_h()) as usize).min(det_cfg.grid - 1);
            let cell = row * det_cfg.grid + col;
            let probs = herocrystal::tinynet::softmax(&out.cell_logits[cell]);
            let arg = probs.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            total += 1;
            if det_cfg.categories.local_index(*cat) == Some(arg) {
                ok += 1;
            }
        }
    }
    println!("cls_only={cls_only}: center-cell accuracy {ok}/{total} = {:.3}", ok as f64 / total as f64);
}

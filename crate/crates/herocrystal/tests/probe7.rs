//! Localization-vs-classification diagnosis on held-out scenes.

use herocrystal::losses;
use herocrystal::pipeline::ScenarioConfig;
use herocrystal::rngutil;
use herocrystal::scenesim;
use herocrystal::tinynet::{clip_grad_norm, sgd_step, Assignment, DetectorConfig, GridDetector, SgdState, Tape};
use herocrystal::types::{iou, DomainTag};
use rand::Rng;

#[test]
#[ignore]
fn localization_vs_classification() {
    let cfg = ScenarioConfig::ck2b_analog(1);
    let spec = &cfg.sources[0];
    let train = scenesim::make_dataset(spec, 200, DomainTag::Source(0)).unwrap();
    let eval_spec = spec.with_seed(rngutil::derive_seed(spec.seed, &["own-eval"]));
    let eval = scenesim::make_dataset(&eval_spec, 12, DomainTag::Source(0)).unwrap();
    let det_cfg = DetectorConfig::desk_default(spec.categories);
    let mut rng = rngutil::stream(5, &["probe7"]);
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
    let (lr, momentum, steps, clip): (f64, f64, usize, f64) = (
        std::env::var("P_LR").unwrap_or("0.007".into()).parse().unwrap(),
        std::env::var("P_M").unwrap_or("0.9".into()).parse().unwrap(),
        std::env::var("P_STEPS").unwrap_or("2000".into()).parse().unwrap(),
        std::env::var("P_CLIP").unwrap_or("5.0".into()).parse().unwrap(),
    );
    println!("lr {lr} momentum {momentum} steps {steps} clip {clip}");
    let mut sgd = SgdState::new();
    for _ in 0..steps {
        let mut tape = Tape::new();
        let mut terms = Vec::new();
        for _ in 0..8 {
            let i = rng.gen_range(0..caches.len());
            let fwd = det.forward_tape(&mut tape, &caches[i].0);
            terms.push(losses::tape_detection_loss(&mut tape, &fwd, &caches[i].1, &det_cfg));
        }
        let loss = tape.mean_nodes(&terms);
        let mut grads = tape.backward(loss);
        clip_grad_norm(&mut grads, clip);
        sgd_step(&mut det.params, &grads, lr, momentum, &mut sgd).unwrap();
    }

    let mut hist = [0usize; 5]; // best same-class IoU bins: 0, (0,.25), [.25,.5), [.5,.75), [.75,1]
    let mut class_at_cell = (0usize, 0usize);
    for scene in &eval {
        let out = det.forward(&scene.image).unwrap();
        let (preds, _) = det.decode(&out, 0.05);
        for (cat, gt) in &scene.objects {
            let best_same = preds
                .iter()
                .filter(|d| d.category == *cat)
                .map(|d| iou(&d.bbox, gt))
                .fold(0.0f64, f64::max);
            let bin = if best_same == 0.0 {
                0
            } else if best_same < 0.25 {
                1
            } else if best_same < 0.5 {
                2
            } else if best_same < 0.75 {
                3
            } else {
                4
            };
            hist[bin] += 1;
            // does the center cell classify correctly?
            let col = ((gt.x / det_cfg.cell_w()) as usize).min(det_cfg.grid - 1);
            let row = ((gt.y / det_cfg.cell_h()) as usize).min(det_cfg.grid - 1);
            let cell = row * det_cfg.grid + col;
            let probs = herocrystal::tinynet::softmax(&out.cell_logits[cell]);
            let arg = probs.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            let want = det_cfg.categories.local_index(*cat).unwrap();
            class_at_cell.1 += 1;
            if arg == want {
                class_at_cell.0 += 1;
            }
        }
        // how many cells fire?
        println!(
            "scene: {} preds for {} gt (scores {:?})",
            preds.len(),
            scene.objects.len(),
            preds.iter().map(|d| (d.category.name(), (d.score * 100.0) as i32)).take(8).collect::<Vec<_>>()
        );
    }
    println!("best same-class IoU histogram [none, <.25, <.5, <.75, >=.75]: {hist:?}");
    println!("center-cell class accuracy: {}/{}", class_at_cell.0, class_at_cell.1);
    // confusion: gt class -> predicted local argmax at the center cell
    let mut confusion = std::collections::BTreeMap::new();
    for scene in &eval {
        let out = det.forward(&scene.image).unwrap();
        for (cat, gt) in &scene.objects {
            let col = ((gt.x / det_cfg.cell_w()) as usize).min(det_cfg.grid - 1);
            let row = ((gt.y / det_cfg.cell_h()) as usize).min(det_cfg.grid - 1);
            let cell = row * det_cfg.grid + col;
            let probs = herocrystal::tinynet::softmax(&out.cell_logits[cell]);
            let arg = probs.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
            let name = det_cfg
                .categories
                .from_local_index(arg)
                .map(|c| c.name())
                .unwrap_or("background");
            *confusion.entry((cat.name(), name)).or_insert(0usize) += 1;
        }
    }
    println!("confusion (gt -> pred): {confusion:?}");
}

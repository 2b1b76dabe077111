//! Shared test oracles, independent of the implementation paths they check.

#![allow(dead_code)]

use herocrystal::tinynet::{Gradients, ParameterMap};
use herocrystal::types::{iou, BoundingBox, Category, CategorySet, Detection};

/// Central finite differences of `f` with respect to every entry of
/// `params`, evaluated by mutating one coordinate at a time.
pub fn fd_gradients<F>(params: &ParameterMap, names: &[&str], mut f: F, h: f64) -> Vec<(String, Vec<f64>)>
where
    F: FnMut(&ParameterMap) -> f64,
{
    let mut out = Vec::new();
    for name in names {
        let tensor = params.get(name).expect("parameter exists");
        let n = tensor.len();
        let mut grad = vec![0.0; n];
        for i in 0..n {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= h;
            grad[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out.push((name.to_string(), grad));
    }
    out
}

/// Max relative error between analytic and finite-difference gradients,
/// with a floor that keeps near-zero pairs from exploding the ratio.
pub fn max_rel_error(analytic: &Gradients, fd: &[(String, Vec<f64>)]) -> f64 {
    let mut worst = 0.0f64;
    for (name, fd_grad) in fd {
        // a parameter off the differentiated path has an implicit zero
        // gradient
        let zeros = vec![0.0; fd_grad.len()];
        let a = analytic.get(name).unwrap_or(&zeros);
        assert_eq!(a.len(), fd_grad.len());
        for (x, y) in a.iter().zip(fd_grad) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Naive all-point-interpolated AP: an O(n^2) reimplementation that sweeps
/// every distinct score threshold and integrates the precision envelope
/// directly from the definition.
pub fn naive_average_precision(
    scenes: &[(Vec<Detection>, Vec<(Category, BoundingBox)>)],
    category: Category,
    iou_thresh: f64,
) -> Option<f64> {
    // per-scene greedy matching in score order, reimplemented with plain loops
    let mut events: Vec<(f64, bool)> = Vec::new();
    let mut gt_count = 0usize;
    for (preds, truths) in scenes {
        let truths: Vec<&BoundingBox> = truths.iter().filter(|(c, _)| *c == category).map(|(_, b)| b).collect();
        gt_count += truths.len();
        let mut order: Vec<usize> = (0..preds.len()).filter(|i| preds[*i].category == category).collect();
        order.sort_by(|a, b| preds[*b].score.partial_cmp(&preds[*a].score).unwrap());
        let mut taken = vec![false; truths.len()];
        for pi in order {
            let mut best: Option<(usize, f64)> = None;
            for (ti, gt) in truths.iter().enumerate() {
                if taken[ti] {
                    continue;
                }
                let overlap = iou(&preds[pi].bbox, gt);
                if overlap >= iou_thresh {
                    match best {
                        Some((_, b)) if b >= overlap => {}
                        _ => best = Some((ti, overlap)),
                    }
                }
            }
            match best {
                Some((ti, _)) => {
                    taken[ti] = true;
                    events.push((preds[pi].score, true));
                }
                None => events.push((preds[pi].score, false)),
            }
        }
    }
    if gt_count == 0 {
        return None;
    }
    events.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    // precision/recall at every prefix
    let mut points: Vec<(f64, f64)> = Vec::new(); // (recall, precision)
    let mut tp = 0usize;
    for (k, (_, is_tp)) in events.iter().enumerate() {
        if *is_tp {
            tp += 1;
        }
        points.push((tp as f64 / gt_count as f64, tp as f64 / (k + 1) as f64));
    }
    // integrate sum over distinct recall levels of (r_i - r_{i-1}) * max
    // precision among points with recall >= r_i, straight from the definition
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for i in 0..points.len() {
        let (r, _) = points[i];
        if r <= prev_r {
            continue;
        }
        let envelope = points
            .iter()
            .filter(|(rr, _)| *rr >= r)
            .map(|(_, pp)| *pp)
            .fold(0.0f64, f64::max);
        ap += (r - prev_r) * envelope;
        prev_r = r;
    }
    Some(ap)
}

/// Naive ICI: exhaustive loops evaluating the retention predicate directly.
pub fn naive_ici(
    per_teacher: &[Vec<Detection>],
    source_sets: &[CategorySet],
    targets: &CategorySet,
    literal_product: bool,
) -> std::collections::BTreeMap<Category, Vec<(usize, usize)>> {
    let mut out: std::collections::BTreeMap<Category, Vec<(usize, usize)>> = Default::default();
    for class in targets.iter() {
        let mut covering = Vec::new();
        for (i, set) in source_sets.iter().enumerate() {
            if set.contains(class) {
                covering.push(i);
            }
        }
        let mut kept: Vec<(usize, usize)> = Vec::new();
        if covering.len() == 1 {
            let i = covering[0];
            for (j, det) in per_teacher[i].iter().enumerate() {
                if det.category == class {
                    kept.push((i, j));
                }
            }
        } else if covering.len() >= 2 {
            for &i in &covering {
                'proposal: for (j, det) in per_teacher[i].iter().enumerate() {
                    if det.category != class {
                        continue;
                    }
                    for &n in &covering {
                        if n == i {
                            continue;
                        }
                        if literal_product {
                            let mut product = 1.0f64;
                            for m in &per_teacher[n] {
                                product *= iou(&det.bbox, &m.bbox);
                            }
                            if product == 0.0 {
                                continue 'proposal;
                            }
                        } else {
                            let mut any = false;
                            for m in &per_teacher[n] {
                                if m.category == class && iou(&det.bbox, &m.bbox) > 0.0 {
                                    any = true;
                                }
                            }
                            if !any {
                                continue 'proposal;
                            }
                        }
                    }
                    kept.push((i, j));
                }
            }
        }
        if !kept.is_empty() {
            out.insert(class, kept);
        }
    }
    out
}

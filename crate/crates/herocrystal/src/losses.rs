//! Training objectives: classification cross-entropy, probabilistic box
//! regression, the model-contrastive family with its dynamic interpolation,
//! the per-client total, the optional proximal penalty and the distillation
//! loss.
//!
//! Each loss exists twice: a plain closed-form evaluation used for reporting
//! and formula tests, and a tape builder used during training. Tests pin the
//! two routes against each other.

use crate::error::{Error, Result};
use crate::tinynet::{Assignment, BoxLossKind, DetectorConfig, DetectorOutput, NodeId, Tape, TapeForward};
use crate::types::{BoundingBox, Category, GaussianBox};

pub const LN_2PI: f64 = 1.8378770664093453;

/// Embeddings and knobs for the contrastive family: the current local
/// representation, the frozen global one, the frozen previous-round local
/// one, the temperature and the interpolation weight.
#[derive(Debug, Clone)]
pub struct ContrastiveInputs {
    pub z: Vec<f64>,
    pub z_glob: Vec<f64>,
    pub z_prev: Vec<f64>,
    pub tau: f64,
    pub lambda: f64,
}

impl ContrastiveInputs {
    pub fn new(z: Vec<f64>, z_glob: Vec<f64>, z_prev: Vec<f64>, tau: f64, lambda: f64) -> Result<ContrastiveInputs> {
        if z.len() != z_glob.len() || z.len() != z_prev.len() {
            return Err(Error::config("contrastive embeddings must share a dimension"));
        }
        if !(tau > 0.0) {
            return Err(Error::config(format!("temperature must be positive, got {tau}")));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::config(format!("lambda {lambda} outside [0,1]")));
        }
        for (name, v) in [("z", &z), ("z_glob", &z_glob), ("z_prev", &z_prev)] {
            if norm(v) < 1e-12 {
                return Err(Error::protocol(format!("zero-norm embedding `{name}`")));
            }
        }
        Ok(ContrastiveInputs { z, z_glob, z_prev, tau, lambda })
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity; errors on zero-norm arguments.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::config("cosine similarity of mismatched dimensions"));
    }
    let (na, nb) = (norm(a), norm(b));
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::protocol("cosine similarity of zero-norm embedding"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// ln(1 + e^d), stable for large |d|.
fn log1p_exp(d: f64) -> f64 {
    if d > 35.0 {
        d
    } else if d < -35.0 {
        d.exp()
    } else {
        d.exp().ln_1p()
    }
}

fn logsumexp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Mean softmax cross-entropy over all cells; background cells target the
/// background class.
pub fn cls_loss(cell_logits: &[Vec<f64>], assignment: &Assignment, cfg: &DetectorConfig) -> f64 {
    let bg = cfg.background_index();
    let mut total = 0.0;
    for (cell, logits) in cell_logits.iter().enumerate() {
        let target = match &assignment.targets[cell] {
            Some((cat, _)) => cfg.categories.local_index(*cat).expect("assigned class in head set"),
            None => bg,
        };
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - logits[target];
    }
    total / cell_logits.len() as f64
}

/// Negative log-likelihood of a ground-truth box under the per-coordinate
/// Gaussian prediction: sum over the four coordinates of
/// `0.5*ln(2*pi*var) + (gt - mu)^2 / (2*var)`.
pub fn bbox_nll(pred: &GaussianBox, gt: &BoundingBox) -> f64 {
    let gt_coords = [gt.x, gt.y, gt.w, gt.h];
    let mut total = 0.0;
    for i in 0..4 {
        let var = pred.log_var[i].exp();
        let diff = gt_coords[i] - pred.mu[i];
        total += 0.5 * (LN_2PI + pred.log_var[i]) + diff * diff / (2.0 * var);
    }
    total
}

/// Squared-error counterpart used by the deterministic head variant.
pub fn bbox_squared_error(pred: &GaussianBox, gt: &BoundingBox) -> f64 {
    let gt_coords = [gt.x, gt.y, gt.w, gt.h];
    (0..4).map(|i| (gt_coords[i] - pred.mu[i]).powi(2)).sum()
}

/// Mean box term over foreground cells; 0 when there is no foreground.
pub fn bbox_loss(cell_gauss: &[GaussianBox], assignment: &Assignment, kind: BoxLossKind) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (cell, gauss) in cell_gauss.iter().enumerate() {
        if let Some((_, gt)) = &assignment.targets[cell] {
            total += match kind {
                BoxLossKind::GaussianNll => bbox_nll(gauss, gt),
                BoxLossKind::SquaredError => bbox_squared_error(gauss, gt),
            };
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Detection loss: classification plus box regression.
pub fn detection_loss(output: &DetectorOutput, assignment: &Assignment, cfg: &DetectorConfig) -> f64 {
    let gauss: Vec<GaussianBox> = output
        .cell_box_raw
        .iter()
        .enumerate()
        .map(|(cell, raw)| cfg.gaussian_from_raw(cell, raw))
        .collect();
    cls_loss(&output.cell_logits, assignment, cfg) + bbox_loss(&gauss, assignment, cfg.box_loss)
}

/// Distillation loss: the detection loss with integrated pseudo-labels
/// playing the role of ground truth.
pub fn distill_loss(output: &DetectorOutput, pseudo_labels: &[(Category, BoundingBox)], cfg: &DetectorConfig) -> f64 {
    let assignment = Assignment::from_objects(cfg, pseudo_labels);
    detection_loss(output, &assignment, cfg)
}

/// Contrastive loss with the global representation as the positive sample.
pub fn moon_loss(c: &ContrastiveInputs) -> Result<f64> {
    let s1 = cosine_sim(&c.z, &c.z_glob)?;
    let s2 = cosine_sim(&c.z, &c.z_prev)?;
    Ok(log1p_exp((s2 - s1) / c.tau))
}

/// Contrastive loss with the roles swapped: the previous local
/// representation is the positive sample.
pub fn moon_loss_inverted(c: &ContrastiveInputs) -> Result<f64> {
    let s1 = cosine_sim(&c.z, &c.z_glob)?;
    let s2 = cosine_sim(&c.z, &c.z_prev)?;
    Ok(log1p_exp((s1 - s2) / c.tau))
}

/// Dynamic contrastive loss: the closed-form interpolation between
/// [`moon_loss`] (lambda = 0) and [`moon_loss_inverted`] (lambda = 1).
pub fn contrastive_loss(c: &ContrastiveInputs) -> Result<f64> {
    let s1 = cosine_sim(&c.z, &c.z_glob)?;
    let s2 = cosine_sim(&c.z, &c.z_prev)?;
    let combo = ((1.0 - c.lambda) * s1 + c.lambda * s2) / c.tau;
    Ok(logsumexp2(s1 / c.tau, s2 / c.tau) - combo)
}

/// Total per-client objective.
pub fn client_loss(l_p: f64, l_con: f64) -> f64 {
    l_p + l_con
}

/// Proximal penalty `(mu/2) * ||local - global||^2` over backbone entries.
pub fn fedprox_term(
    local: &crate::tinynet::ParameterMap,
    global_ref: &crate::tinynet::ParameterMap,
    mu: f64,
) -> Result<f64> {
    Ok(mu / 2.0 * local.sq_distance(global_ref, crate::tinynet::BACKBONE_PREFIX)?)
}

// ---------------------------------------------------------------------------
// Tape builders
// ---------------------------------------------------------------------------

/// Classification term over tape logits.
pub fn tape_cls_loss(tape: &mut Tape, forward: &TapeForward, assignment: &Assignment, cfg: &DetectorConfig) -> NodeId {
    let bg = cfg.background_index();
    let ces: Vec<NodeId> = forward
        .cell_logits
        .iter()
        .enumerate()
        .map(|(cell, logits)| {
            let target = match &assignment.targets[cell] {
                Some((cat, _)) => cfg.categories.local_index(*cat).expect("assigned class in head set"),
                None => bg,
            };
            tape.softmax_ce(*logits, target)
        })
        .collect();
    tape.mean_nodes(&ces)
}

/// One per-cell box term from the raw head outputs, mirroring
/// [`DetectorConfig::gaussian_from_raw`].
fn tape_box_term(
    tape: &mut Tape,
    cfg: &DetectorConfig,
    cell: usize,
    raw: NodeId,
    gt: &BoundingBox,
    kind: BoxLossKind,
) -> NodeId {
    use crate::tinynet::detector::{LOG_VAR_FLOOR, LOG_VAR_SHIFT};
    let (cx, cy) = cfg.cell_anchor(cell);
    let gt_coords = [gt.x, gt.y, gt.w, gt.h];
    // scene-unit means, linear in the raw outputs
    let mut mus = Vec::with_capacity(4);
    for (i, scale_by, anchor) in [
        (0usize, cfg.cell_w(), cx),
        (1, cfg.cell_h(), cy),
        (2, cfg.cell_w(), cfg.cell_w()),
        (3, cfg.cell_h(), cfg.cell_h()),
    ] {
        let d = tape.slice(raw, i, 1);
        let scaled = tape.scale(d, scale_by);
        mus.push(tape.offset(scaled, anchor));
    }
    let mut terms = Vec::with_capacity(4);
    match kind {
        BoxLossKind::GaussianNll => {
            for (i, mu) in mus.iter().enumerate() {
                // log_var = floor + softplus(raw + shift)
                let raw_lv = tape.slice(raw, 4 + i, 1);
                let shifted = tape.offset(raw_lv, LOG_VAR_SHIFT);
                let e = tape.exp(shifted);
                let e1 = tape.offset(e, 1.0);
                let softplus = tape.log(e1);
                let lv = tape.offset(softplus, LOG_VAR_FLOOR);
                let diff = tape.offset(*mu, -gt_coords[i]);
                let d2 = tape.mul(diff, diff);
                let neg_lv = tape.scale(lv, -1.0);
                let inv_var = tape.exp(neg_lv);
                let maha = tape.mul(d2, inv_var);
                let inner = tape.add(lv, maha);
                let half = tape.scale(inner, 0.5);
                terms.push(tape.offset(half, 0.5 * LN_2PI));
            }
        }
        BoxLossKind::SquaredError => {
            for (i, mu) in mus.iter().enumerate() {
                let diff = tape.offset(*mu, -gt_coords[i]);
                terms.push(tape.mul(diff, diff));
            }
        }
    }
    tape.sum_nodes(&terms)
}

/// Mean box term over foreground cells; a constant zero node when empty.
pub fn tape_bbox_loss(tape: &mut Tape, forward: &TapeForward, assignment: &Assignment, cfg: &DetectorConfig) -> NodeId {
    let mut terms = Vec::new();
    for (cell, raw) in forward.cell_box_raw.iter().enumerate() {
        if let Some((_, gt)) = &assignment.targets[cell] {
            terms.push(tape_box_term(tape, cfg, cell, *raw, gt, cfg.box_loss));
        }
    }
    if terms.is_empty() {
        tape.constant_scalar(0.0)
    } else {
        tape.mean_nodes(&terms)
    }
}

/// Detection loss on the tape.
pub fn tape_detection_loss(tape: &mut Tape, forward: &TapeForward, assignment: &Assignment, cfg: &DetectorConfig) -> NodeId {
    let cls = tape_cls_loss(tape, forward, assignment, cfg);
    let bbox = tape_bbox_loss(tape, forward, assignment, cfg);
    tape.add(cls, bbox)
}

/// Contrastive loss on the tape; `z` is a live node, the other embeddings
/// are frozen constants.
pub fn tape_contrastive_loss(
    tape: &mut Tape,
    z: NodeId,
    z_glob: &[f64],
    z_prev: &[f64],
    tau: f64,
    lambda: f64,
) -> Result<NodeId> {
    let zg = tape.constant(z_glob);
    let zp = tape.constant(z_prev);
    let s1 = tape.cosine_sim(z, zg)?;
    let s2 = tape.cosine_sim(z, zp)?;
    let a = tape.scale(s1, 1.0 / tau);
    let b = tape.scale(s2, 1.0 / tau);
    let ea = tape.exp(a);
    let eb = tape.exp(b);
    let denom = tape.add(ea, eb);
    let log_denom = tape.log(denom);
    let wa = tape.scale(s1, (1.0 - lambda) / tau);
    let wb = tape.scale(s2, lambda / tau);
    let combo = tape.add(wa, wb);
    Ok(tape.sub(log_denom, combo))
}

/// Proximal penalty on the tape over entries with the given prefix.
pub fn tape_fedprox_term(
    tape: &mut Tape,
    local: &crate::tinynet::ParameterMap,
    global_ref: &crate::tinynet::ParameterMap,
    mu: f64,
    prefix: &str,
) -> Result<NodeId> {
    let mut terms = Vec::new();
    for (name, tensor) in local.iter() {
        if !name.starts_with(prefix) {
            continue;
        }
        let peer = global_ref
            .get(name)
            .ok_or_else(|| Error::protocol(format!("missing parameter `{name}` in reference map")))?;
        let live = tape.input(name, tensor.data());
        let frozen = tape.constant(peer.data());
        let diff = tape.sub(live, frozen);
        terms.push(tape.dot(diff, diff));
    }
    let total = if terms.is_empty() {
        tape.constant_scalar(0.0)
    } else {
        tape.sum_nodes(&terms)
    };
    Ok(tape.scale(total, mu / 2.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::CategorySet;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "expected {b}, got {a} (diff {})", (a - b).abs());
    }

    fn cfg() -> DetectorConfig {
        DetectorConfig::desk_default(CategorySet::full())
    }

    fn contrastive(s_glob_axis: usize, s_prev_axis: usize, tau: f64, lambda: f64) -> ContrastiveInputs {
        // unit axes give exact similarities of 1 (same axis) or 0 (orthogonal)
        let mut z = vec![0.0; 3];
        z[0] = 1.0;
        let mut zg = vec![0.0; 3];
        zg[s_glob_axis] = 1.0;
        let mut zp = vec![0.0; 3];
        zp[s_prev_axis] = 1.0;
        ContrastiveInputs::new(z, zg, zp, tau, lambda).unwrap()
    }

    #[test]
    fn cls_loss_saturated_correct_is_zero() {
        let c = cfg();
        let assignment = Assignment { targets: vec![None; c.cells()] };
        let bg = c.background_index();
        let logits: Vec<Vec<f64>> = (0..c.cells())
            .map(|_| {
                let mut l = vec![0.0; c.categories.len() + 1];
                l[bg] = 1e6;
                l
            })
            .collect();
        close(cls_loss(&logits, &assignment, &c), 0.0, 1e-9);
    }

    #[test]
    fn cls_loss_uniform_is_ln_k() {
        let c = cfg();
        let assignment = Assignment { targets: vec![None; c.cells()] };
        let logits: Vec<Vec<f64>> = (0..c.cells()).map(|_| vec![0.0; 9]).collect();
        close(cls_loss(&logits, &assignment, &c), 9.0f64.ln(), 1e-12);
    }

    #[test]
    fn cls_loss_decreases_with_background_margin() {
        let c = cfg();
        let assignment = Assignment { targets: vec![None; c.cells()] };
        let with_margin = |m: f64| -> f64 {
            let bg = c.background_index();
            let logits: Vec<Vec<f64>> = (0..c.cells())
                .map(|_| {
                    let mut l = vec![0.0; 9];
                    l[bg] = m;
                    l
                })
                .collect();
            cls_loss(&logits, &assignment, &c)
        };
        let l1 = with_margin(1.0);
        let l2 = with_margin(2.0);
        assert!(l1 > 0.0 && l2 > 0.0 && l2 < l1);
        // closed form: ln(1 + 8 e^-m)
        close(l1, (1.0 + 8.0 * (-1.0f64).exp()).ln(), 1e-12);
    }

    #[test]
    fn bbox_nll_frozen_values() {
        let gt = BoundingBox::new(1.0, 2.0, 3.0, 4.0).unwrap();
        // unit-density case: var = 1/(2*pi) makes each coordinate term vanish
        let lv = (1.0 / (2.0 * std::f64::consts::PI)).ln();
        let unit = GaussianBox { mu: [1.0, 2.0, 3.0, 4.0], log_var: [lv; 4] };
        close(bbox_nll(&unit, &gt), 0.0, 1e-12);

        let iso = GaussianBox { mu: [1.0, 2.0, 3.0, 4.0], log_var: [0.0; 4] };
        close(bbox_nll(&iso, &gt), 2.0 * LN_2PI, 1e-12); // 3.675754...

        let shifted = GaussianBox { mu: [0.0, 2.0, 3.0, 4.0], log_var: [0.0; 4] };
        close(bbox_nll(&shifted, &gt), 2.0 * LN_2PI + 0.5, 1e-12); // 4.175754...
    }

    #[test]
    fn bbox_nll_fixed_variance_argmin_is_gt() {
        // with var frozen, the NLL is a scaled squared error plus a constant
        let gt = BoundingBox::new(5.0, 5.0, 2.0, 2.0).unwrap();
        let at = |dx: f64| {
            let g = GaussianBox { mu: [5.0 + dx, 5.0, 2.0, 2.0], log_var: [0.3; 4] };
            bbox_nll(&g, &gt)
        };
        let center = at(0.0);
        for dx in [-0.5, -0.1, 0.1, 0.5] {
            assert!(at(dx) > center);
        }
        // quadratic coefficient is 1/(2v)
        let v = 0.3f64.exp();
        close(at(1.0) - center, 1.0 / (2.0 * v), 1e-12);
    }

    #[test]
    fn bbox_loss_empty_foreground_is_zero() {
        let c = cfg();
        let assignment = Assignment { targets: vec![None; c.cells()] };
        let gauss = vec![GaussianBox { mu: [0.0; 4], log_var: [0.0; 4] }; c.cells()];
        assert_eq!(bbox_loss(&gauss, &assignment, BoxLossKind::GaussianNll), 0.0);
    }

    #[test]
    fn bbox_loss_is_mean_over_foreground() {
        let c = cfg();
        let mut targets = vec![None; c.cells()];
        let gt_a = BoundingBox::new(4.0, 4.0, 2.0, 2.0).unwrap();
        let gt_b = BoundingBox::new(20.0, 20.0, 2.0, 2.0).unwrap();
        targets[0] = Some((Category::Car, gt_a));
        targets[10] = Some((Category::Bus, gt_b));
        let assignment = Assignment { targets };
        let mut gauss = vec![GaussianBox { mu: [0.0; 4], log_var: [0.0; 4] }; c.cells()];
        gauss[0] = GaussianBox { mu: [4.0, 4.0, 2.0, 2.0], log_var: [0.0; 4] };
        gauss[10] = GaussianBox { mu: [19.0, 20.0, 2.0, 2.0], log_var: [0.0; 4] };
        let a = bbox_nll(&gauss[0], &gt_a);
        let b = bbox_nll(&gauss[10], &gt_b);
        close(bbox_loss(&gauss, &assignment, BoxLossKind::GaussianNll), (a + b) / 2.0, 1e-12);
    }

    #[test]
    fn moon_symmetric_is_ln2() {
        let c = contrastive(0, 0, 0.5, 0.0);
        close(moon_loss(&c).unwrap(), 2.0f64.ln(), 1e-12);
        close(moon_loss_inverted(&c).unwrap(), 2.0f64.ln(), 1e-12);
    }

    #[test]
    fn moon_frozen_values() {
        // sims (1, 0), tau 0.5
        let c = contrastive(0, 1, 0.5, 0.0);
        close(moon_loss(&c).unwrap(), 0.126928011042973, 1e-12);
        close(moon_loss_inverted(&c).unwrap(), 2.126928011042972, 1e-12);
        // sims (0, 1)
        let c2 = contrastive(1, 0, 0.5, 0.0);
        close(moon_loss(&c2).unwrap(), 2.126928011042972, 1e-12);
    }

    #[test]
    fn moon_pair_bounded_below_by_2ln2() {
        for i in 0..200 {
            let t = i as f64 / 200.0;
            let z = vec![1.0, 0.2 * t, -0.3];
            let zg = vec![0.4 - t, 1.0, 0.1];
            let zp = vec![0.2, t - 0.5, 0.9];
            let c = ContrastiveInputs::new(z, zg, zp, 0.3 + t, 0.0).unwrap();
            let total = moon_loss(&c).unwrap() + moon_loss_inverted(&c).unwrap();
            assert!(total >= 2.0 * 2.0f64.ln() - 1e-12, "got {total} at t={t}");
        }
    }

    #[test]
    fn contrastive_endpoints_match_moon_variants() {
        let c0 = contrastive(0, 1, 0.5, 0.0);
        close(contrastive_loss(&c0).unwrap(), moon_loss(&c0).unwrap(), 1e-12);
        let c1 = contrastive(0, 1, 0.5, 1.0);
        close(contrastive_loss(&c1).unwrap(), moon_loss_inverted(&c1).unwrap(), 1e-12);
    }

    #[test]
    fn contrastive_midpoint_frozen_value() {
        // sims (1, 0), tau 0.5, lambda 0.5
        let c = contrastive(0, 1, 0.5, 0.5);
        close(contrastive_loss(&c).unwrap(), 1.126928011042973, 1e-12);
    }

    #[test]
    fn contrastive_invariant_under_embedding_rescale() {
        let base = ContrastiveInputs::new(
            vec![0.3, -0.7, 0.5],
            vec![0.9, 0.1, -0.2],
            vec![-0.4, 0.8, 0.6],
            0.5,
            0.37,
        )
        .unwrap();
        let v0 = contrastive_loss(&base).unwrap();
        let mut scaled = base.clone();
        for x in scaled.z.iter_mut() {
            *x *= 3.0;
        }
        let v1 = contrastive_loss(&scaled).unwrap();
        assert!((v0 - v1).abs() <= 1e-9);
    }

    #[test]
    fn contrastive_monotone_in_lambda() {
        let mut prev = None;
        for i in 0..=20 {
            let lambda = i as f64 / 20.0;
            let c = contrastive(0, 1, 0.5, lambda); // s1 > s2: loss increases with lambda
            let v = contrastive_loss(&c).unwrap();
            if let Some(p) = prev {
                assert!(v >= p, "loss must be monotone in lambda");
            }
            prev = Some(v);
        }
    }

    #[test]
    fn contrastive_lower_bound_on_random_inputs() {
        let mut state = 0x12345u64;
        let mut rnd = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        for _ in 0..500 {
            let z = vec![rnd(), rnd(), rnd(), rnd()];
            let zg = vec![rnd(), rnd(), rnd(), rnd()];
            let zp = vec![rnd(), rnd(), rnd(), rnd()];
            if norm(&z) < 1e-6 || norm(&zg) < 1e-6 || norm(&zp) < 1e-6 {
                continue;
            }
            let tau = 0.2 + rnd().abs();
            let lambda = (rnd() + 1.0) / 2.0;
            let c = ContrastiveInputs::new(z, zg, zp, tau, lambda).unwrap();
            let s1 = cosine_sim(&c.z, &c.z_glob).unwrap();
            let s2 = cosine_sim(&c.z, &c.z_prev).unwrap();
            let bound = -(s1 - s2).abs() / c.tau;
            assert!(contrastive_loss(&c).unwrap() >= bound - 1e-12);
        }
    }

    #[test]
    fn client_loss_is_additive() {
        assert_eq!(client_loss(0.0, 0.0), 0.0);
        assert_eq!(client_loss(3.5, 0.7), 4.2);
    }

    #[test]
    fn fedprox_frozen_values() {
        let mut local = crate::tinynet::ParameterMap::new();
        local.insert("backbone.w", vec![1], vec![3.0]).unwrap();
        local.insert("head.w", vec![1], vec![50.0]).unwrap();
        let mut global = crate::tinynet::ParameterMap::new();
        global.insert("backbone.w", vec![1], vec![1.0]).unwrap();
        global.insert("head.w", vec![1], vec![0.0]).unwrap();
        // single backbone weight differing by 2 at mu = 0.01: (0.01/2)*4 = 0.02
        close(fedprox_term(&local, &global, 0.01).unwrap(), 0.02, 1e-15);
        close(fedprox_term(&local, &local, 0.01).unwrap(), 0.0, 1e-15);
        close(fedprox_term(&local, &global, 0.0).unwrap(), 0.0, 1e-15);
    }

    #[test]
    fn tape_detection_loss_matches_plain_route() {
        use crate::scenesim::{self, scene_stream};
        use crate::tinynet::GridDetector;
        let c = cfg();
        let spec = scenesim::ck2b_analog_target(77);
        let scene = scenesim::render_scene(&spec, &mut scene_stream(&spec, 1), crate::types::DomainTag::Target).unwrap();
        let mut rng = crate::rngutil::stream(78, &["loss", "det"]);
        let det = GridDetector::init(c.clone(), &mut rng).unwrap();
        let out = det.forward(&scene.image).unwrap();
        let assignment = Assignment::from_objects(&c, &scene.objects);
        let plain = detection_loss(&out, &assignment, &c);
        let patches = GridDetector::patches(&c, &scene.image).unwrap();
        let mut tape = Tape::new();
        let fwd = det.forward_tape(&mut tape, &patches);
        let node = tape_detection_loss(&mut tape, &fwd, &assignment, &c);
        close(tape.scalar(node), plain, 1e-10);
    }

    #[test]
    fn tape_contrastive_matches_plain() {
        let c = ContrastiveInputs::new(
            vec![0.3, -0.7, 0.5],
            vec![0.9, 0.1, -0.2],
            vec![-0.4, 0.8, 0.6],
            0.5,
            0.37,
        )
        .unwrap();
        let plain = contrastive_loss(&c).unwrap();
        let mut tape = Tape::new();
        let z = tape.input("z", &c.z);
        let node = tape_contrastive_loss(&mut tape, z, &c.z_glob, &c.z_prev, c.tau, c.lambda).unwrap();
        close(tape.scalar(node), plain, 1e-12);
    }

    #[test]
    fn gen_degenerate_contrastive_has_zero_gradient() {
        // identical global and previous embeddings: ln 2 with no gradient
        let zg = vec![0.5, -0.25, 0.8];
        let mut tape = Tape::new();
        let z = tape.input("z", &[0.2, 0.9, -0.1]);
        let node = tape_contrastive_loss(&mut tape, z, &zg, &zg, 0.5, 1.0).unwrap();
        close(tape.scalar(node), 2.0f64.ln(), 1e-12);
        let grads = tape.backward(node);
        for g in grads.get("z").unwrap() {
            assert!(g.abs() < 1e-12);
        }
    }
}

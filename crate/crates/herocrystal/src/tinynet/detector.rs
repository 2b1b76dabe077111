//! The toy grid detector: a shared-weight per-cell encoder with a pooled
//! embedding head (the fusable backbone) and a per-cell linear prediction
//! head over the client's own category set.
//!
//! Ground-truth objects are assigned to the cell containing their center, so
//! per-proposal loss terms become per-cell terms. The head emits, per cell,
//! `K+1` class logits (background last) plus four box-mean offsets and four
//! log-variances.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BoundingBox, Category, CategorySet, Detection, GaussianBox, SceneImage};

use super::params::ParameterMap;
use super::tape::{NodeId, Tape};

/// How the box-regression term is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxLossKind {
    /// Gaussian negative log-likelihood over all four coordinates.
    GaussianNll,
    /// Plain squared error on the means; log-variances are left untrained.
    SquaredError,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub scene_h: usize,
    pub scene_w: usize,
    pub channels: usize,
    pub grid: usize,
    /// Extra context pixels around each cell's patch window (windows overlap
    /// so a cell can see the full extent of objects centered on it).
    pub patch_margin: usize,
    pub cell_feat: usize,
    pub embed_dim: usize,
    pub categories: CategorySet,
    pub score_thresh: f64,
    pub box_loss: BoxLossKind,
}

impl DetectorConfig {
    pub fn desk_default(categories: CategorySet) -> DetectorConfig {
        DetectorConfig {
            scene_h: 48,
            scene_w: 48,
            channels: 3,
            grid: 6,
            patch_margin: 4,
            cell_feat: 48,
            embed_dim: 32,
            categories,
            score_thresh: 0.5,
            box_loss: BoxLossKind::GaussianNll,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.scene_h % self.grid != 0 || self.scene_w % self.grid != 0 {
            return Err(Error::config(format!(
                "grid {} must evenly divide scene {}x{}",
                self.grid, self.scene_h, self.scene_w
            )));
        }
        if self.cell_feat == 0 || self.embed_dim == 0 {
            return Err(Error::config("feature dimensions must be positive"));
        }
        Ok(())
    }

    pub fn cell_h(&self) -> f64 {
        self.scene_h as f64 / self.grid as f64
    }

    pub fn cell_w(&self) -> f64 {
        self.scene_w as f64 / self.grid as f64
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    fn window_h(&self) -> usize {
        self.scene_h / self.grid + 2 * self.patch_margin
    }

    fn window_w(&self) -> usize {
        self.scene_w / self.grid + 2 * self.patch_margin
    }

    /// Length of one cell descriptor: pooled color grids, per-channel
    /// statistics and row/column occupancy profiles for both the cell core
    /// and its context window.
    fn patch_dim(&self) -> usize {
        let core_h = self.scene_h / self.grid;
        let core_w = self.scene_w / self.grid;
        let per_window = |h: usize, w: usize| 16 * self.channels + 4 * self.channels + h + w;
        per_window(core_h, core_w) + per_window(self.window_h(), self.window_w())
    }

    /// Head output width per cell: class logits incl. background plus eight
    /// Gaussian box values.
    pub fn head_width(&self) -> usize {
        self.categories.len() + 1 + 8
    }

    pub fn background_index(&self) -> usize {
        self.categories.len()
    }

    /// Scene-space anchor center of a cell.
    pub fn cell_anchor(&self, cell: usize) -> (f64, f64) {
        let row = cell / self.grid;
        let col = cell % self.grid;
        (
            (col as f64 + 0.5) * self.cell_w(),
            (row as f64 + 0.5) * self.cell_h(),
        )
    }

    /// Decode raw per-cell head values into scene-unit Gaussian box params.
    ///
    /// Centers and sizes are linear in the raw outputs (cell-relative, like
    /// standard box-delta encodings), so the Gaussian over raw deltas maps
    /// affinely onto scene coordinates. The log-variance goes through a
    /// softplus with a floor: it starts wide (sigma = 4 scene units), anneals
    /// as the means converge, and can never collapse far enough to blow up
    /// the likelihood.
    pub fn gaussian_from_raw(&self, cell: usize, raw: &[f64]) -> GaussianBox {
        debug_assert_eq!(raw.len(), 8);
        let (cx, cy) = self.cell_anchor(cell);
        let mu = [
            cx + raw[0] * self.cell_w(),
            cy + raw[1] * self.cell_h(),
            self.cell_w() * (1.0 + raw[2]),
            self.cell_h() * (1.0 + raw[3]),
        ];
        GaussianBox {
            mu,
            log_var: [
                log_var_from_raw(raw[4]),
                log_var_from_raw(raw[5]),
                log_var_from_raw(raw[6]),
                log_var_from_raw(raw[7]),
            ],
        }
    }
}

/// Variance floor: sigma never drops below 0.5 scene units.
pub const LOG_VAR_FLOOR: f64 = -1.3862943611198906; // ln(0.25)
/// Softplus shift putting the zero-raw variance at 16 scene units squared.
pub const LOG_VAR_SHIFT: f64 = 4.143134726391533; // ln(63)

/// `floor + softplus(raw + shift)`.
pub fn log_var_from_raw(raw: f64) -> f64 {
    let x = raw + LOG_VAR_SHIFT;
    let softplus = if x > 35.0 { x } else { x.exp().ln_1p() };
    LOG_VAR_FLOOR + softplus
}

/// Per-cell training target: background or one assigned ground-truth object.
#[derive(Debug, Clone)]
pub struct Assignment {
    pub targets: Vec<Option<(Category, BoundingBox)>>,
}

impl Assignment {
    /// Assign each object to the cell containing its center. When two objects
    /// land in the same cell, the larger-area object wins.
    pub fn from_objects(cfg: &DetectorConfig, objects: &[(Category, BoundingBox)]) -> Assignment {
        let mut targets: Vec<Option<(Category, BoundingBox)>> = vec![None; cfg.cells()];
        for (cat, bbox) in objects {
            let col = ((bbox.x / cfg.cell_w()) as usize).min(cfg.grid - 1);
            let row = ((bbox.y / cfg.cell_h()) as usize).min(cfg.grid - 1);
            let cell = row * cfg.grid + col;
            match &targets[cell] {
                Some((_, existing)) if existing.area() >= bbox.area() => {}
                _ => targets[cell] = Some((*cat, *bbox)),
            }
        }
        Assignment { targets }
    }

    pub fn foreground_count(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }

    pub fn is_foreground(&self, cell: usize) -> bool {
        self.targets[cell].is_some()
    }
}

/// Plain (inference) forward outputs.
#[derive(Debug, Clone)]
pub struct DetectorOutput {
    pub cell_feats: Vec<Vec<f64>>,
    pub cell_logits: Vec<Vec<f64>>,
    /// Raw eight head values per cell (mu offsets + log-variances).
    pub cell_box_raw: Vec<Vec<f64>>,
    pub embedding: Vec<f64>,
}

/// Tape forward handles used to build training losses.
pub struct TapeForward {
    pub cell_logits: Vec<NodeId>,
    pub cell_box_raw: Vec<NodeId>,
    pub embedding: NodeId,
}

#[derive(Debug, Clone)]
pub struct GridDetector {
    pub cfg: DetectorConfig,
    pub params: ParameterMap,
}

impl GridDetector {
    /// Fresh detector with uniform +-1/sqrt(fan_in) init from the given stream.
    pub fn init(cfg: DetectorConfig, rng: &mut ChaCha8Rng) -> Result<GridDetector> {
        cfg.validate()?;
        let mut params = ParameterMap::new();
        let patch = cfg.patch_dim();
        let tensor = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| -> Vec<f64> {
            let bound = 1.0 / (cols as f64).sqrt();
            (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        // small nonzero bias init keeps embeddings away from the exact-zero
        // degenerate point even on featureless rasters
        let bias = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect() };
        params.insert("backbone.enc_w", vec![cfg.cell_feat, patch], tensor(rng, cfg.cell_feat, patch))?;
        params.insert("backbone.enc_b", vec![cfg.cell_feat], bias(rng, cfg.cell_feat))?;
        params.insert("backbone.emb_w", vec![cfg.embed_dim, cfg.cell_feat], tensor(rng, cfg.embed_dim, cfg.cell_feat))?;
        params.insert("backbone.emb_b", vec![cfg.embed_dim], bias(rng, cfg.embed_dim))?;
        params.insert("head.w", vec![cfg.head_width(), cfg.cell_feat], tensor(rng, cfg.head_width(), cfg.cell_feat))?;
        params.insert("head.b", vec![cfg.head_width()], vec![0.0; cfg.head_width()])?;
        Ok(GridDetector { cfg, params })
    }

    /// Zero-initialized detector; mainly for degenerate-case tests.
    pub fn zeros(cfg: DetectorConfig) -> Result<GridDetector> {
        cfg.validate()?;
        let mut params = ParameterMap::new();
        let patch = cfg.patch_dim();
        params.insert("backbone.enc_w", vec![cfg.cell_feat, patch], vec![0.0; cfg.cell_feat * patch])?;
        params.insert("backbone.enc_b", vec![cfg.cell_feat], vec![0.0; cfg.cell_feat])?;
        params.insert("backbone.emb_w", vec![cfg.embed_dim, cfg.cell_feat], vec![0.0; cfg.embed_dim * cfg.cell_feat])?;
        params.insert("backbone.emb_b", vec![cfg.embed_dim], vec![0.0; cfg.embed_dim])?;
        params.insert("head.w", vec![cfg.head_width(), cfg.cell_feat], vec![0.0; cfg.head_width() * cfg.cell_feat])?;
        params.insert("head.b", vec![cfg.head_width()], vec![0.0; cfg.head_width()])?;
        Ok(GridDetector { cfg, params })
    }

    /// Per-cell descriptor vectors.
    ///
    /// The raster is first standardized per channel (zero mean, unit
    /// variance over the scene), which strips affine style shifts such as
    /// brightness and fog. Each cell then summarizes the window extending
    /// `patch_margin` pixels beyond it (zero-padded at the raster edge) as:
    ///
    /// - a 4x4 average-pooled color grid (translation-robust layout),
    /// - per-channel mean / std / min / max over the window,
    /// - row and column occupancy profiles (mean absolute deviation from the
    ///   window mean), which carry object position and extent.
    ///
    /// Raw pixels are deliberately not part of the descriptor: a shared
    /// dense encoder over raw windows memorizes glyph placements instead of
    /// generalizing.
    pub fn patches(cfg: &DetectorConfig, raster: &SceneImage) -> Result<Vec<Vec<f64>>> {
        if raster.height != cfg.scene_h || raster.width != cfg.scene_w || raster.channels != cfg.channels {
            return Err(Error::config(format!(
                "raster {}x{}x{} does not match configured scene {}x{}x{}",
                raster.height, raster.width, raster.channels, cfg.scene_h, cfg.scene_w, cfg.channels
            )));
        }
        // per-channel standardization
        let px = (raster.height * raster.width) as f64;
        let mut mean = vec![0.0; cfg.channels];
        let mut var = vec![0.0; cfg.channels];
        for y in 0..raster.height {
            for x in 0..raster.width {
                for (c, m) in mean.iter_mut().enumerate() {
                    *m += raster.at(y, x, c);
                }
            }
        }
        for m in mean.iter_mut() {
            *m /= px;
        }
        for y in 0..raster.height {
            for x in 0..raster.width {
                for (c, v) in var.iter_mut().enumerate() {
                    let d = raster.at(y, x, c) - mean[c];
                    *v += d * d;
                }
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / px).sqrt().max(1e-3)).collect();
        let value_at = |y: isize, x: isize, c: usize| -> f64 {
            if y >= 0 && x >= 0 && (y as usize) < raster.height && (x as usize) < raster.width {
                (raster.at(y as usize, x as usize, c) - mean[c]) / std[c]
            } else {
                0.0
            }
        };

        let ph = cfg.scene_h / cfg.grid;
        let pw = cfg.scene_w / cfg.grid;
        let m = cfg.patch_margin as isize;

        // pooled grid + channel stats + occupancy profiles of one window
        let describe = |descriptor: &mut Vec<f64>, y0: isize, x0: isize, wh: usize, ww: usize| {
            let at = |y: usize, x: usize, c: usize| value_at(y0 + y as isize, x0 + x as isize, c);
            for by in 0..4 {
                for bx in 0..4 {
                    let (ys, ye) = (by * wh / 4, (by + 1) * wh / 4);
                    let (xs, xe) = (bx * ww / 4, (bx + 1) * ww / 4);
                    for c in 0..cfg.channels {
                        let mut acc = 0.0;
                        for y in ys..ye {
                            for x in xs..xe {
                                acc += at(y, x, c);
                            }
                        }
                        descriptor.push(acc / ((ye - ys) * (xe - xs)) as f64);
                    }
                }
            }
            let wn = (wh * ww) as f64;
            let mut ch_mean = vec![0.0; cfg.channels];
            for c in 0..cfg.channels {
                let mut sum = 0.0;
                let mut sq = 0.0;
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for y in 0..wh {
                    for x in 0..ww {
                        let v = at(y, x, c);
                        sum += v;
                        sq += v * v;
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                let mu = sum / wn;
                ch_mean[c] = mu;
                descriptor.push(mu);
                descriptor.push((sq / wn - mu * mu).max(0.0).sqrt());
                descriptor.push(lo);
                descriptor.push(hi);
            }
            for y in 0..wh {
                let mut acc = 0.0;
                for x in 0..ww {
                    for c in 0..cfg.channels {
                        acc += (at(y, x, c) - ch_mean[c]).abs();
                    }
                }
                descriptor.push(acc / (ww * cfg.channels) as f64);
            }
            for x in 0..ww {
                let mut acc = 0.0;
                for y in 0..wh {
                    for c in 0..cfg.channels {
                        acc += (at(y, x, c) - ch_mean[c]).abs();
                    }
                }
                descriptor.push(acc / (wh * cfg.channels) as f64);
            }
        };

        let mut out = Vec::with_capacity(cfg.cells());
        for row in 0..cfg.grid {
            for col in 0..cfg.grid {
                let mut descriptor = Vec::with_capacity(cfg.patch_dim());
                // core: the bare cell, where the assigned object's center
                // lives; small glyphs dominate these statistics
                describe(&mut descriptor, (row * ph) as isize, (col * pw) as isize, ph, pw);
                // context: the margin-extended window, which sees the full
                // extent of larger objects
                describe(
                    &mut descriptor,
                    (row * ph) as isize - m,
                    (col * pw) as isize - m,
                    cfg.window_h(),
                    cfg.window_w(),
                );
                debug_assert_eq!(descriptor.len(), cfg.patch_dim());
                out.push(descriptor);
            }
        }
        Ok(out)
    }

    pub fn forward(&self, raster: &SceneImage) -> Result<DetectorOutput> {
        let patches = Self::patches(&self.cfg, raster)?;
        Ok(self.forward_patches(&patches))
    }

    /// Forward pass from precomputed patches (deterministic, no hidden state).
    pub fn forward_patches(&self, patches: &[Vec<f64>]) -> DetectorOutput {
        let cell_feats = backbone_cell_feats(&self.cfg, &self.params, patches);
        let embedding = backbone_embedding(&self.cfg, &self.params, &cell_feats);
        let (cell_logits, cell_box_raw) = self.head_apply(&cell_feats);
        DetectorOutput { cell_feats, cell_logits, cell_box_raw, embedding }
    }

    /// Apply this detector's head to externally computed cell features.
    pub fn head_apply(&self, cell_feats: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let k1 = self.cfg.categories.len() + 1;
        let w = self.params.get("head.w").expect("head.w").data();
        let b = self.params.get("head.b").expect("head.b").data();
        let width = self.cfg.head_width();
        let mut logits = Vec::with_capacity(cell_feats.len());
        let mut boxes = Vec::with_capacity(cell_feats.len());
        for feat in cell_feats {
            let mut out = vec![0.0; width];
            for (i, o) in out.iter_mut().enumerate() {
                let row = &w[i * feat.len()..(i + 1) * feat.len()];
                *o = b[i] + row.iter().zip(feat).map(|(a, x)| a * x).sum::<f64>();
            }
            logits.push(out[..k1].to_vec());
            boxes.push(out[k1..].to_vec());
        }
        (logits, boxes)
    }

    /// Decode per-cell outputs into detections, sorted by descending score.
    ///
    /// Returns the detections plus the number of boxes that needed clamping
    /// into the scene bounds.
    pub fn decode(&self, output: &DetectorOutput, score_thresh: f64) -> (Vec<Detection>, usize) {
        let mut dets = Vec::new();
        let mut clamps = 0usize;
        let bg = self.cfg.background_index();
        for (cell, logits) in output.cell_logits.iter().enumerate() {
            let probs = softmax(logits);
            let (arg, &p) = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
                .expect("non-empty logits");
            if arg == bg || p < score_thresh {
                continue;
            }
            let category = self.cfg.categories.from_local_index(arg).expect("valid local index");
            let gauss = self.cfg.gaussian_from_raw(cell, &output.cell_box_raw[cell]);
            let raw_box = BoundingBox { x: gauss.mu[0], y: gauss.mu[1], w: gauss.mu[2], h: gauss.mu[3] };
            let (bbox, changed) = raw_box.clamped(self.cfg.scene_w as f64, self.cfg.scene_h as f64);
            if changed {
                clamps += 1;
            }
            dets.push(Detection { category, bbox, score: p, gaussian: Some(gauss) });
        }
        dets.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
        (dets, clamps)
    }

    /// Build the full tape forward (backbone + head tracked for gradients).
    pub fn forward_tape(&self, tape: &mut Tape, patches: &[Vec<f64>]) -> TapeForward {
        let cfg = &self.cfg;
        let enc_w = tape.input("backbone.enc_w", self.params.get("backbone.enc_w").unwrap().data());
        let enc_b = tape.input("backbone.enc_b", self.params.get("backbone.enc_b").unwrap().data());
        let emb_w = tape.input("backbone.emb_w", self.params.get("backbone.emb_w").unwrap().data());
        let emb_b = tape.input("backbone.emb_b", self.params.get("backbone.emb_b").unwrap().data());
        let head_w = tape.input("head.w", self.params.get("head.w").unwrap().data());
        let head_b = tape.input("head.b", self.params.get("head.b").unwrap().data());

        let mut feats = Vec::with_capacity(cfg.cells());
        for patch in patches {
            let p = tape.constant(patch);
            let lin = tape.matvec(enc_w, p, cfg.cell_feat, cfg.patch_dim());
            feats.push(tape.add(lin, enc_b));
        }
        let mut pooled = feats[0];
        for f in &feats[1..] {
            pooled = tape.add(pooled, *f);
        }
        pooled = tape.scale(pooled, 1.0 / feats.len() as f64);
        let emb_lin = tape.matvec(emb_w, pooled, cfg.embed_dim, cfg.cell_feat);
        let emb_lin = tape.add(emb_lin, emb_b);
        let embedding = tape.tanh(emb_lin);

        let (cell_logits, cell_box_raw) = head_tape(tape, cfg, head_w, head_b, &feats);
        TapeForward { cell_logits, cell_box_raw, embedding }
    }

    /// Head-only tape over frozen cell features (used by distillation, where
    /// the backbone must receive no gradients).
    pub fn forward_tape_head_only(&self, tape: &mut Tape, cell_feats: &[Vec<f64>]) -> TapeForward {
        let cfg = &self.cfg;
        let head_w = tape.input("head.w", self.params.get("head.w").unwrap().data());
        let head_b = tape.input("head.b", self.params.get("head.b").unwrap().data());
        let feats: Vec<NodeId> = cell_feats.iter().map(|f| tape.constant(f)).collect();
        let (cell_logits, cell_box_raw) = head_tape(tape, cfg, head_w, head_b, &feats);
        // Embedding is irrelevant for head-only training; expose a constant.
        let embedding = tape.constant(&vec![0.0; cfg.embed_dim]);
        TapeForward { cell_logits, cell_box_raw, embedding }
    }
}

/// Backbone cell features from cell descriptors using the given parameters.
///
/// The per-cell encoder is affine; the nonlinearity lives only on the pooled
/// embedding branch. A linear feature path trains stably under fusion and
/// matches the capacity a linear probe already achieves on the descriptors.
pub fn backbone_cell_feats(cfg: &DetectorConfig, params: &ParameterMap, patches: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let w = params.get("backbone.enc_w").expect("backbone.enc_w").data();
    let b = params.get("backbone.enc_b").expect("backbone.enc_b").data();
    let patch_dim = cfg.patch_dim();
    patches
        .iter()
        .map(|patch| {
            (0..cfg.cell_feat)
                .map(|i| {
                    let row = &w[i * patch_dim..(i + 1) * patch_dim];
                    b[i] + row.iter().zip(patch).map(|(a, x)| a * x).sum::<f64>()
                })
                .collect()
        })
        .collect()
}

/// Pooled scene embedding from cell features using the given parameters.
pub fn backbone_embedding(cfg: &DetectorConfig, params: &ParameterMap, cell_feats: &[Vec<f64>]) -> Vec<f64> {
    let mut pooled = vec![0.0; cfg.cell_feat];
    for feat in cell_feats {
        for (p, f) in pooled.iter_mut().zip(feat) {
            *p += f;
        }
    }
    for p in pooled.iter_mut() {
        *p /= cell_feats.len() as f64;
    }
    let w = params.get("backbone.emb_w").expect("backbone.emb_w").data();
    let b = params.get("backbone.emb_b").expect("backbone.emb_b").data();
    (0..cfg.embed_dim)
        .map(|i| {
            let row = &w[i * cfg.cell_feat..(i + 1) * cfg.cell_feat];
            (b[i] + row.iter().zip(&pooled).map(|(a, x)| a * x).sum::<f64>()).tanh()
        })
        .collect()
}

/// Embedding straight from a raster with standalone backbone parameters
/// (used for the frozen global/previous embeddings in contrastive training).
pub fn embed_with_backbone(cfg: &DetectorConfig, backbone: &ParameterMap, patches: &[Vec<f64>]) -> Vec<f64> {
    let feats = backbone_cell_feats(cfg, backbone, patches);
    backbone_embedding(cfg, backbone, &feats)
}

/// Apply the head on the tape. The classification slice reads the live cell
/// features; the box slice reads a detached copy, so box-regression
/// gradients train the head rows but never reshape the backbone (the
/// encoder is shaped by classification and the contrastive objective).
fn head_tape(
    tape: &mut Tape,
    cfg: &DetectorConfig,
    head_w: NodeId,
    head_b: NodeId,
    feats: &[NodeId],
) -> (Vec<NodeId>, Vec<NodeId>) {
    let k1 = cfg.categories.len() + 1;
    let width = cfg.head_width();
    let mut cell_logits = Vec::with_capacity(feats.len());
    let mut cell_box_raw = Vec::with_capacity(feats.len());
    for feat in feats {
        let lin = tape.matvec(head_w, *feat, width, cfg.cell_feat);
        let out = tape.add(lin, head_b);
        cell_logits.push(tape.slice(out, 0, k1));
        let frozen_feat = tape.detach(*feat);
        let lin_frozen = tape.matvec(head_w, frozen_feat, width, cfg.cell_feat);
        let out_frozen = tape.add(lin_frozen, head_b);
        cell_box_raw.push(tape.slice(out_frozen, k1, 8));
    }
    (cell_logits, cell_box_raw)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|e| e / denom).collect()
}

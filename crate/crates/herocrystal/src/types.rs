//! Geometry, detections, the category registry, and scene containers shared
//! by every other module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The fixed registry of eight unified traffic categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Car,
    Truck,
    Rider,
    Person,
    Motorcycle,
    Bicycle,
    Bus,
    Train,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::Car,
        Category::Truck,
        Category::Rider,
        Category::Person,
        Category::Motorcycle,
        Category::Bicycle,
        Category::Bus,
        Category::Train,
    ];

    /// Long-tailed subset used by the `rare` augmentation strategy.
    pub const RARE: [Category; 4] = [
        Category::Bus,
        Category::Motorcycle,
        Category::Truck,
        Category::Train,
    ];

    pub fn index(self) -> usize {
        Category::ALL.iter().position(|c| *c == self).expect("registry member")
    }

    pub fn from_index(idx: usize) -> Option<Category> {
        Category::ALL.get(idx).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Car => "car",
            Category::Truck => "truck",
            Category::Rider => "rider",
            Category::Person => "person",
            Category::Motorcycle => "motorcycle",
            Category::Bicycle => "bicycle",
            Category::Bus => "bus",
            Category::Train => "train",
        }
    }

    pub fn from_name(name: &str) -> Option<Category> {
        Category::ALL.iter().copied().find(|c| c.name() == name)
    }
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A non-empty ordered subset of the global category registry.
///
/// Ordering follows registry order, which also defines the local class index
/// used by a detection head (`local index = position within the set`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CategorySet {
    mask: u8,
}

impl CategorySet {
    pub fn new(categories: &[Category]) -> Result<CategorySet> {
        if categories.is_empty() {
            return Err(Error::config("category set must be non-empty"));
        }
        let mut mask = 0u8;
        for c in categories {
            let bit = 1u8 << c.index();
            if mask & bit != 0 {
                return Err(Error::config(format!("duplicate category `{c}`")));
            }
            mask |= bit;
        }
        Ok(CategorySet { mask })
    }

    pub fn full() -> CategorySet {
        CategorySet { mask: 0xff }
    }

    pub fn contains(&self, c: Category) -> bool {
        self.mask & (1 << c.index()) != 0
    }

    pub fn len(&self) -> usize {
        self.mask.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.mask == 0
    }

    /// Categories in registry order.
    pub fn iter(&self) -> impl Iterator<Item = Category> + '_ {
        Category::ALL.iter().copied().filter(|c| self.contains(*c))
    }

    /// Position of `c` within this set's registry-ordered listing.
    pub fn local_index(&self, c: Category) -> Option<usize> {
        if !self.contains(c) {
            return None;
        }
        Some(self.iter().position(|x| x == c).expect("contained"))
    }

    pub fn from_local_index(&self, idx: usize) -> Option<Category> {
        self.iter().nth(idx)
    }

    pub fn union(&self, other: &CategorySet) -> CategorySet {
        CategorySet { mask: self.mask | other.mask }
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.iter().map(|c| c.name()).collect()
    }
}

impl Serialize for CategorySet {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let names: Vec<&str> = self.names();
        names.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for CategorySet {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let names: Vec<String> = Vec::deserialize(deserializer)?;
        let cats: Vec<Category> = names
            .iter()
            .map(|n| Category::from_name(n).ok_or_else(|| serde::de::Error::custom(format!("unknown category `{n}`"))))
            .collect::<std::result::Result<_, _>>()?;
        CategorySet::new(&cats).map_err(serde::de::Error::custom)
    }
}

/// Axis-aligned box in center+size form, scene units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<BoundingBox> {
        if !(w > 0.0) || !(h > 0.0) {
            return Err(Error::Geometry(format!(
                "box size must be positive, got w={w}, h={h}"
            )));
        }
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::Geometry("box coordinates must be finite".into()));
        }
        Ok(BoundingBox { x, y, w, h })
    }

    pub fn x1(&self) -> f64 {
        self.x - self.w / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.y - self.h / 2.0
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w / 2.0
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Clamp the box into `[0, width] x [0, height]`.
    ///
    /// Returns the clamped box and whether anything changed; callers are
    /// expected to count clamps rather than let them pass silently. Boxes that
    /// collapse under clamping keep a minimal positive size.
    pub fn clamped(&self, width: f64, height: f64) -> (BoundingBox, bool) {
        const MIN_SIDE: f64 = 1e-3;
        let x1 = self.x1().clamp(0.0, width - MIN_SIDE);
        let y1 = self.y1().clamp(0.0, height - MIN_SIDE);
        let x2 = self.x2().clamp(x1 + MIN_SIDE, width);
        let y2 = self.y2().clamp(y1 + MIN_SIDE, height);
        let clamped = BoundingBox {
            x: (x1 + x2) / 2.0,
            y: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        };
        let changed = (clamped.x - self.x).abs() > 1e-12
            || (clamped.y - self.y).abs() > 1e-12
            || (clamped.w - self.w).abs() > 1e-12
            || (clamped.h - self.h).abs() > 1e-12;
        (clamped, changed)
    }

    /// True when the box lies entirely inside `[0, width] x [0, height]`.
    pub fn inside(&self, width: f64, height: f64) -> bool {
        self.x1() >= -1e-9 && self.y1() >= -1e-9 && self.x2() <= width + 1e-9 && self.y2() <= height + 1e-9
    }
}

/// Per-coordinate Gaussian parameters of a predicted box: four means and four
/// log-variances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianBox {
    pub mu: [f64; 4],
    pub log_var: [f64; 4],
}

impl GaussianBox {
    pub fn new(mu: [f64; 4], log_var: [f64; 4]) -> Result<GaussianBox> {
        for v in mu.iter().chain(log_var.iter()) {
            if !v.is_finite() {
                return Err(Error::Geometry("gaussian box parameters must be finite".into()));
            }
        }
        // exp(log_var) finite and positive for every coordinate
        for lv in &log_var {
            if !lv.exp().is_finite() || lv.exp() <= 0.0 {
                return Err(Error::Geometry(format!("log_var {lv} out of range")));
            }
        }
        Ok(GaussianBox { mu, log_var })
    }

    pub fn variance(&self) -> [f64; 4] {
        [
            self.log_var[0].exp(),
            self.log_var[1].exp(),
            self.log_var[2].exp(),
            self.log_var[3].exp(),
        ]
    }
}

/// One detector output: class, box, confidence and optionally the Gaussian
/// box parameters it was decoded from.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub category: Category,
    pub bbox: BoundingBox,
    pub score: f64,
    pub gaussian: Option<GaussianBox>,
}

impl Detection {
    pub fn new(category: Category, bbox: BoundingBox, score: f64, gaussian: Option<GaussianBox>) -> Result<Detection> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Geometry(format!("score {score} outside [0,1]")));
        }
        Ok(Detection { category, bbox, score, gaussian })
    }
}

/// Raster image in HWC layout with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl SceneImage {
    pub fn zeros(height: usize, width: usize, channels: usize) -> SceneImage {
        SceneImage { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn at_mut(&mut self, y: usize, x: usize, c: usize) -> &mut f64 {
        &mut self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Which domain a scene belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source(usize),
    Target,
    Synthetic,
}

impl std::fmt::Display for DomainTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DomainTag::Source(i) => write!(f, "source{i}"),
            DomainTag::Target => f.write_str("target"),
            DomainTag::Synthetic => f.write_str("synthetic"),
        }
    }
}

impl DomainTag {
    pub fn parse(s: &str) -> Option<DomainTag> {
        match s {
            "target" => Some(DomainTag::Target),
            "synthetic" => Some(DomainTag::Synthetic),
            other => other.strip_prefix("source").and_then(|i| i.parse().ok()).map(DomainTag::Source),
        }
    }
}

/// A rendered scene together with its exact ground-truth object list.
#[derive(Debug, Clone)]
pub struct LabeledScene {
    pub image: SceneImage,
    pub objects: Vec<(Category, BoundingBox)>,
    pub domain: DomainTag,
}

/// Intersection-over-union of two boxes. 0 when disjoint, 1 for identical
/// boxes, symmetric in its arguments.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let iy = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Outcome of greedy matching for one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchOutcome {
    Matched(usize),
    Miss,
}

/// Greedy score-ordered one-to-one matching of predictions against ground
/// truth (PASCAL VOC protocol).
///
/// Predictions must be sorted by descending score. Each prediction is matched
/// to the highest-IoU unmatched truth of the same class with IoU >= the
/// threshold; each truth is matched at most once.
pub fn match_detections(
    preds: &[Detection],
    truth: &[(Category, BoundingBox)],
    iou_thresh: f64,
) -> Vec<(usize, MatchOutcome)> {
    debug_assert!(
        preds.windows(2).all(|w| w[0].score >= w[1].score),
        "predictions must be sorted by descending score"
    );
    let mut taken = vec![false; truth.len()];
    let mut out = Vec::with_capacity(preds.len());
    for (pi, pred) in preds.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (ti, (cat, gt_box)) in truth.iter().enumerate() {
            if taken[ti] || *cat != pred.category {
                continue;
            }
            let overlap = iou(&pred.bbox, gt_box);
            if overlap >= iou_thresh && best.map_or(true, |(_, b)| overlap > b) {
                best = Some((ti, overlap));
            }
        }
        match best {
            Some((ti, _)) => {
                taken[ti] = true;
                out.push((pi, MatchOutcome::Matched(ti)));
            }
            None => out.push((pi, MatchOutcome::Miss)),
        }
    }
    out
}

/// One line of the JSON-lines detection dump: a scene id, its domain tag and
/// the detections emitted for it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneDetections {
    pub scene_id: String,
    pub domain_tag: String,
    pub detections: Vec<DetectionRecord>,
}

/// Serialized detection. `class` is the registry name; `mu`/`log_var` are
/// present when the emitting head is probabilistic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub class: String,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_var: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

/// Where an integrated pseudo-label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: usize,
    pub proposal: usize,
}

impl DetectionRecord {
    pub fn from_detection(det: &Detection) -> DetectionRecord {
        DetectionRecord {
            class: det.category.name().to_string(),
            x: det.bbox.x,
            y: det.bbox.y,
            w: det.bbox.w,
            h: det.bbox.h,
            score: det.score,
            mu: det.gaussian.map(|g| g.mu),
            log_var: det.gaussian.map(|g| g.log_var),
            provenance: None,
        }
    }

    pub fn to_detection(&self) -> Result<Detection> {
        let category = Category::from_name(&self.class)
            .ok_or_else(|| Error::config(format!("unknown category `{}`", self.class)))?;
        let gaussian = match (self.mu, self.log_var) {
            (Some(mu), Some(log_var)) => Some(GaussianBox::new(mu, log_var)?),
            _ => None,
        };
        Detection::new(category, BoundingBox::new(self.x, self.y, self.w, self.h)?, self.score, gaussian)
    }
}

/// Write scene detections as JSON lines.
pub fn write_detections_jsonl<W: std::io::Write>(mut w: W, scenes: &[SceneDetections]) -> Result<()> {
    for scene in scenes {
        serde_json::to_writer(&mut w, scene)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Read a JSON-lines detection dump.
pub fn read_detections_jsonl<R: std::io::BufRead>(r: R) -> Result<Vec<SceneDetections>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

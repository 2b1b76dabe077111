//! Parametric synthetic-scene generator that plays the role of the source
//! and target datasets: class-specific glyphs on a styled background with
//! controllable long-tailed category distributions.
//!
//! Rendering is a pure function of (spec, seed, scene index). Style is
//! applied as draw -> brightness -> fog blend toward white -> additive
//! Gaussian noise, then a final clip to [0, 1].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rngutil;
use crate::types::{BoundingBox, Category, CategorySet, DomainTag, LabeledScene, SceneImage};

/// Visual style knobs of one domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub background_hue: [f64; 3],
    pub fog: f64,
    pub noise_sigma: f64,
    pub brightness: f64,
}

impl DomainStyle {
    pub fn validate(&self) -> Result<()> {
        for h in &self.background_hue {
            if !(0.0..=1.0).contains(h) {
                return Err(Error::config(format!("background hue {h} outside [0,1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.fog) {
            return Err(Error::config(format!("fog {} outside [0,1]", self.fog)));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::config("noise sigma must be >= 0"));
        }
        if !(0.5..=1.5).contains(&self.brightness) {
            return Err(Error::config(format!("brightness {} outside [0.5,1.5]", self.brightness)));
        }
        Ok(())
    }
}

/// Everything needed to sample scenes from one domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSpec {
    pub style: DomainStyle,
    pub categories: CategorySet,
    /// Sampling weight per registry index; strictly positive over
    /// `categories`, zero elsewhere.
    pub class_frequency: [f64; 8],
    pub objects_per_scene: (usize, usize),
    /// (height, width, channels)
    pub scene_size: (usize, usize, usize),
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        self.style.validate()?;
        for cat in Category::ALL {
            let w = self.class_frequency[cat.index()];
            if self.categories.contains(cat) {
                if !(w > 0.0) {
                    return Err(Error::config(format!("class frequency for `{cat}` must be positive")));
                }
            } else if w != 0.0 {
                return Err(Error::config(format!("class frequency for `{cat}` must be zero outside the category set")));
            }
        }
        if self.objects_per_scene.0 > self.objects_per_scene.1 {
            return Err(Error::config("objects_per_scene range inverted"));
        }
        let (h, w, c) = self.scene_size;
        if h < 8 || w < 8 || c == 0 {
            return Err(Error::config(format!("scene size {h}x{w}x{c} too small")));
        }
        Ok(())
    }

    /// Same spec pointing at a different seed.
    pub fn with_seed(&self, seed: u64) -> DomainSpec {
        let mut out = self.clone();
        out.seed = seed;
        out
    }
}

/// Glyph archetype: base size echoes real aspect ratios (bus and train wide,
/// person tall), colors and pixel patterns are class-distinct so the toy
/// detector has something to learn.
struct Glyph {
    w: usize,
    h: usize,
    color: [f64; 3],
}

fn glyph(cat: Category) -> Glyph {
    match cat {
        Category::Car => Glyph { w: 8, h: 4, color: [0.85, 0.15, 0.15] },
        Category::Truck => Glyph { w: 11, h: 5, color: [0.55, 0.35, 0.20] },
        Category::Rider => Glyph { w: 3, h: 5, color: [0.80, 0.20, 0.80] },
        Category::Person => Glyph { w: 3, h: 6, color: [0.90, 0.80, 0.20] },
        Category::Motorcycle => Glyph { w: 5, h: 3, color: [0.20, 0.80, 0.85] },
        Category::Bicycle => Glyph { w: 5, h: 3, color: [0.25, 0.80, 0.30] },
        Category::Bus => Glyph { w: 13, h: 6, color: [0.95, 0.55, 0.10] },
        Category::Train => Glyph { w: 16, h: 6, color: [0.35, 0.35, 0.40] },
    }
}

const OUTLINE_VALUE: f64 = 0.02;
const MARKER_VALUE: f64 = 0.95;
const MAX_PLACEMENT_IOU: f64 = 0.3;
const PLACEMENT_TRIES: usize = 40;

fn draw_glyph(img: &mut SceneImage, cat: Category, x0: usize, y0: usize, gw: usize, gh: usize) {
    let color = glyph(cat).color;
    for dy in 0..gh {
        for dx in 0..gw {
            let (x, y) = (x0 + dx, y0 + dy);
            let on_border = dy == 0 || dx == 0 || dy == gh - 1 || dx == gw - 1;
            // class-distinct interior pattern
            let marker = match cat {
                Category::Car => dx >= gw - 2 && dy == gh / 2,
                Category::Truck => dx == gw / 4 && !on_border,
                Category::Rider => dy == 1 && dx == gw / 2,
                Category::Person => dy <= 1 && dx == gw / 2,
                Category::Motorcycle => dx == gw / 2 && dy == gh / 2,
                Category::Bicycle => (dx + dy) % 2 == 0 && !on_border,
                Category::Bus => dy == 1 && dx % 2 == 0 && !on_border,
                Category::Train => dy == gh / 2 && !on_border,
            };
            // the outline alternates dark and bright so every glyph carries
            // both calibration anchors the style encoder relies on
            let value = if on_border {
                if (dx + dy) % 2 == 0 {
                    [OUTLINE_VALUE; 3]
                } else {
                    [MARKER_VALUE; 3]
                }
            } else if marker {
                [MARKER_VALUE; 3]
            } else {
                color
            };
            for c in 0..img.channels.min(3) {
                *img.at_mut(y, x, c) = value[c];
            }
        }
    }
}

fn sample_category(spec: &DomainSpec, rng: &mut ChaCha8Rng) -> Category {
    let total: f64 = spec.class_frequency.iter().sum();
    let mut draw = rng.gen_range(0.0..total);
    for cat in Category::ALL {
        let w = spec.class_frequency[cat.index()];
        if draw < w {
            return cat;
        }
        draw -= w;
    }
    // numeric edge of the cumulative walk
    spec.categories.iter().last().expect("non-empty category set")
}

fn try_place(
    spec: &DomainSpec,
    cat: Category,
    placed: &[(Category, BoundingBox)],
    rng: &mut ChaCha8Rng,
) -> Option<(usize, usize, usize, usize)> {
    let (scene_h, scene_w, _) = spec.scene_size;
    let base = glyph(cat);
    for _ in 0..PLACEMENT_TRIES {
        let scale = rng.gen_range(0.8..1.25);
        let gw = ((base.w as f64 * scale).round() as usize).max(3);
        let gh = ((base.h as f64 * scale).round() as usize).max(3);
        if gw >= scene_w || gh >= scene_h {
            continue;
        }
        let x0 = rng.gen_range(0..=(scene_w - gw));
        let y0 = rng.gen_range(0..=(scene_h - gh));
        let candidate = BoundingBox {
            x: x0 as f64 + gw as f64 / 2.0,
            y: y0 as f64 + gh as f64 / 2.0,
            w: gw as f64,
            h: gh as f64,
        };
        let overlaps = placed
            .iter()
            .any(|(_, b)| crate::types::iou(&candidate, b) > MAX_PLACEMENT_IOU);
        if !overlaps {
            return Some((x0, y0, gw, gh));
        }
    }
    None
}

/// Render one scene from the spec using the provided stream.
///
/// `required` forces the first object to be of that class (used by the
/// class-aware generation stage); its placement failing is an error.
pub fn render_scene_with(
    spec: &DomainSpec,
    rng: &mut ChaCha8Rng,
    domain: DomainTag,
    required: Option<Category>,
) -> Result<LabeledScene> {
    spec.validate()?;
    let (scene_h, scene_w, channels) = spec.scene_size;
    let mut img = SceneImage::zeros(scene_h, scene_w, channels);
    for y in 0..scene_h {
        for x in 0..scene_w {
            for c in 0..channels {
                *img.at_mut(y, x, c) = spec.style.background_hue[c.min(2)];
            }
        }
    }

    let count = rng.gen_range(spec.objects_per_scene.0..=spec.objects_per_scene.1);
    let mut wanted: Vec<Category> = Vec::with_capacity(count + 1);
    if let Some(cat) = required {
        if Category::ALL.iter().all(|c| *c != cat) {
            return Err(Error::config("required class outside the registry"));
        }
        wanted.push(cat);
    }
    for _ in 0..count {
        wanted.push(sample_category(spec, rng));
    }

    let mut objects: Vec<(Category, BoundingBox)> = Vec::with_capacity(wanted.len());
    for (i, cat) in wanted.iter().enumerate() {
        match try_place(spec, *cat, &objects, rng) {
            Some((x0, y0, gw, gh)) => {
                draw_glyph(&mut img, *cat, x0, y0, gw, gh);
                objects.push((
                    *cat,
                    BoundingBox {
                        x: x0 as f64 + gw as f64 / 2.0,
                        y: y0 as f64 + gh as f64 / 2.0,
                        w: gw as f64,
                        h: gh as f64,
                    },
                ));
            }
            None => {
                if i == 0 && required.is_some() {
                    return Err(Error::Geometry(format!(
                        "could not place required `{cat}` glyph in a {scene_h}x{scene_w} scene"
                    )));
                }
            }
        }
    }
    if !wanted.is_empty() && objects.is_empty() {
        return Err(Error::Geometry(format!(
            "scene size {scene_h}x{scene_w} too small to place any object"
        )));
    }

    // style: brightness, then fog blend toward white, then noise, then clip
    for v in img.data.iter_mut() {
        *v *= spec.style.brightness;
        *v = (1.0 - spec.style.fog) * *v + spec.style.fog;
    }
    if spec.style.noise_sigma > 0.0 {
        for v in img.data.iter_mut() {
            let (a, b): (f64, f64) = (rng.gen_range(1e-12..1.0), rng.gen_range(0.0..std::f64::consts::TAU));
            // Box-Muller
            let gauss = (-2.0 * a.ln()).sqrt() * b.cos();
            *v += spec.style.noise_sigma * gauss;
        }
    }
    for v in img.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    Ok(LabeledScene { image: img, objects, domain })
}

/// Render one scene; stream should come from [`scene_stream`].
pub fn render_scene(spec: &DomainSpec, rng: &mut ChaCha8Rng, domain: DomainTag) -> Result<LabeledScene> {
    render_scene_with(spec, rng, domain, None)
}

/// Independent per-scene stream for a dataset indexed by `index`.
pub fn scene_stream(spec: &DomainSpec, index: usize) -> ChaCha8Rng {
    rngutil::stream_indexed(spec.seed, &["scenesim", "scene"], index)
}

/// Render `n` scenes from the spec's seeded stream family.
pub fn make_dataset(spec: &DomainSpec, n: usize, domain: DomainTag) -> Result<Vec<LabeledScene>> {
    if n == 0 {
        return Err(Error::config("dataset size must be >= 1"));
    }
    spec.validate()?;
    (0..n)
        .map(|i| {
            let mut rng = scene_stream(spec, i);
            render_scene(spec, &mut rng, domain)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Scenario preset styles
// ---------------------------------------------------------------------------

/// Long-tailed per-class weights restricted to `categories` (zero outside).
pub fn long_tail_frequency(categories: &CategorySet) -> [f64; 8] {
    let base: [(Category, f64); 8] = [
        (Category::Car, 0.34),
        (Category::Person, 0.24),
        (Category::Bicycle, 0.12),
        (Category::Rider, 0.10),
        (Category::Bus, 0.07),
        (Category::Motorcycle, 0.05),
        (Category::Truck, 0.05),
        (Category::Train, 0.03),
    ];
    let mut out = [0.0; 8];
    for (cat, w) in base {
        if categories.contains(cat) {
            out[cat.index()] = w;
        }
    }
    out
}

fn spec_from(style: DomainStyle, categories: CategorySet, seed: u64) -> DomainSpec {
    DomainSpec {
        style,
        class_frequency: long_tail_frequency(&categories),
        categories,
        objects_per_scene: (2, 6),
        scene_size: (48, 48, 3),
        seed,
    }
}

/// Five-class set lacking motorcycle, bicycle, and bus.
pub fn five_class_set() -> CategorySet {
    CategorySet::new(&[
        Category::Car,
        Category::Truck,
        Category::Rider,
        Category::Person,
        Category::Train,
    ])
    .expect("static set")
}

/// Two sources (one full 8-class urban set, one warm 5-class set) adapting to
/// a darker, noisier target.
pub fn ck2b_analog_sources(seed: u64) -> Vec<DomainSpec> {
    vec![
        spec_from(
            DomainStyle { background_hue: [0.32, 0.38, 0.42], fog: 0.0, noise_sigma: 0.01, brightness: 1.0 },
            CategorySet::full(),
            rngutil::derive_seed(seed, &["scenesim", "source", "0"]),
        ),
        spec_from(
            DomainStyle { background_hue: [0.45, 0.42, 0.33], fog: 0.0, noise_sigma: 0.02, brightness: 1.2 },
            five_class_set(),
            rngutil::derive_seed(seed, &["scenesim", "source", "1"]),
        ),
    ]
}

pub fn ck2b_analog_target(seed: u64) -> DomainSpec {
    spec_from(
        DomainStyle { background_hue: [0.22, 0.25, 0.31], fog: 0.18, noise_sigma: 0.035, brightness: 0.8 },
        CategorySet::full(),
        rngutil::derive_seed(seed, &["scenesim", "target"]),
    )
}

/// Three sources (car-only clean synthetic, warm 5-class, foggy full
/// 8-class) adapting to a clear urban target.
pub fn skf2c_analog_sources(seed: u64) -> Vec<DomainSpec> {
    let car_only = CategorySet::new(&[Category::Car]).expect("static set");
    vec![
        spec_from(
            DomainStyle { background_hue: [0.50, 0.50, 0.55], fog: 0.0, noise_sigma: 0.002, brightness: 1.1 },
            car_only,
            rngutil::derive_seed(seed, &["scenesim", "source", "0"]),
        ),
        spec_from(
            DomainStyle { background_hue: [0.45, 0.42, 0.33], fog: 0.0, noise_sigma: 0.02, brightness: 1.2 },
            five_class_set(),
            rngutil::derive_seed(seed, &["scenesim", "source", "1"]),
        ),
        spec_from(
            DomainStyle { background_hue: [0.32, 0.38, 0.42], fog: 0.6, noise_sigma: 0.02, brightness: 1.0 },
            CategorySet::full(),
            rngutil::derive_seed(seed, &["scenesim", "source", "2"]),
        ),
    ]
}

pub fn skf2c_analog_target(seed: u64) -> DomainSpec {
    spec_from(
        DomainStyle { background_hue: [0.32, 0.38, 0.42], fog: 0.0, noise_sigma: 0.012, brightness: 1.0 },
        CategorySet::full(),
        rngutil::derive_seed(seed, &["scenesim", "target"]),
    )
}

// ---------------------------------------------------------------------------
// Dataset export / import
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestObject {
    pub class: String,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestScene {
    pub id: String,
    pub file: String,
    pub domain_tag: String,
    pub objects: Vec<ManifestObject>,
}

/// JSON manifest written next to the raw rasters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// (height, width, channels); rasters are f64 little-endian, row-major
    /// in (y, x, channel) order.
    pub scene_size: (usize, usize, usize),
    #[serde(skip_serializing_if = "Option::is_none")]
    pub style: Option<DomainStyle>,
    pub scenes: Vec<ManifestScene>,
}

/// Write scenes as `manifest.json` plus `scenes/<id>.f64` raw rasters.
pub fn export_dataset(dir: &std::path::Path, scenes: &[LabeledScene], style: Option<&DomainStyle>) -> Result<()> {
    if scenes.is_empty() {
        return Err(Error::config("refusing to export an empty dataset"));
    }
    let size = (scenes[0].image.height, scenes[0].image.width, scenes[0].image.channels);
    std::fs::create_dir_all(dir.join("scenes"))?;
    let mut manifest = DatasetManifest { scene_size: size, style: style.copied(), scenes: Vec::new() };
    for (i, scene) in scenes.iter().enumerate() {
        let id = format!("scene_{i:06}");
        let file = format!("scenes/{id}.f64");
        let mut bytes = Vec::with_capacity(scene.image.data.len() * 8);
        for v in &scene.image.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(dir.join(&file), bytes)?;
        manifest.scenes.push(ManifestScene {
            id,
            file,
            domain_tag: scene.domain.to_string(),
            objects: scene
                .objects
                .iter()
                .map(|(cat, b)| ManifestObject { class: cat.name().to_string(), x: b.x, y: b.y, w: b.w, h: b.h })
                .collect(),
        });
    }
    let json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn read_manifest(dir: &std::path::Path) -> Result<DatasetManifest> {
    let bytes = std::fs::read(dir.join("manifest.json"))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn read_raster(dir: &std::path::Path, scene: &ManifestScene, size: (usize, usize, usize)) -> Result<SceneImage> {
    let bytes = std::fs::read(dir.join(&scene.file))?;
    let (h, w, c) = size;
    if bytes.len() != h * w * c * 8 {
        return Err(Error::Checkpoint(format!(
            "raster `{}` has {} bytes, expected {}",
            scene.file,
            bytes.len(),
            h * w * c * 8
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|chunk| f64::from_le_bytes(chunk.try_into().unwrap()))
        .collect();
    Ok(SceneImage { height: h, width: w, channels: c, data })
}

/// Read back a full labeled dataset.
pub fn import_dataset(dir: &std::path::Path) -> Result<Vec<LabeledScene>> {
    let manifest = read_manifest(dir)?;
    manifest
        .scenes
        .iter()
        .map(|scene| {
            let image = read_raster(dir, scene, manifest.scene_size)?;
            let objects = scene
                .objects
                .iter()
                .map(|o| {
                    let cat = Category::from_name(&o.class)
                        .ok_or_else(|| Error::config(format!("unknown category `{}`", o.class)))?;
                    Ok((cat, BoundingBox::new(o.x, o.y, o.w, o.h)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let domain = DomainTag::parse(&scene.domain_tag)
                .ok_or_else(|| Error::config(format!("unknown domain tag `{}`", scene.domain_tag)))?;
            Ok(LabeledScene { image, objects, domain })
        })
        .collect()
}

/// Read only the rasters; label data is never touched.
pub fn import_rasters_only(dir: &std::path::Path) -> Result<Vec<SceneImage>> {
    let manifest = read_manifest(dir)?;
    manifest
        .scenes
        .iter()
        .map(|scene| read_raster(dir, scene, manifest.scene_size))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_spec(seed: u64) -> DomainSpec {
        spec_from(
            DomainStyle { background_hue: [0.3, 0.4, 0.5], fog: 0.1, noise_sigma: 0.02, brightness: 1.0 },
            CategorySet::full(),
            seed,
        )
    }

    #[test]
    fn empty_object_range_gives_background_only() {
        let mut spec = test_spec(1);
        spec.objects_per_scene = (0, 0);
        spec.style.noise_sigma = 0.0;
        let mut rng = scene_stream(&spec, 0);
        let scene = render_scene(&spec, &mut rng, DomainTag::Target).unwrap();
        assert!(scene.objects.is_empty());
        // background only: every pixel is the styled hue
        let expected: Vec<f64> = (0..3)
            .map(|c| (1.0 - spec.style.fog) * spec.style.background_hue[c] * spec.style.brightness + spec.style.fog)
            .collect();
        for y in 0..48 {
            for c in 0..3 {
                assert!((scene.image.at(y, 7, c) - expected[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_fog_whites_out_everything() {
        let mut spec = test_spec(2);
        spec.style.fog = 1.0;
        spec.style.noise_sigma = 0.0;
        let mut rng = scene_stream(&spec, 0);
        let scene = render_scene(&spec, &mut rng, DomainTag::Target).unwrap();
        assert!(scene.image.data.iter().all(|v| (*v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn fixed_seed_renders_bit_identical_scenes() {
        let spec = test_spec(3);
        let a = render_scene(&spec, &mut scene_stream(&spec, 5), DomainTag::Target).unwrap();
        let b = render_scene(&spec, &mut scene_stream(&spec, 5), DomainTag::Target).unwrap();
        assert_eq!(a.image.data, b.image.data);
        assert_eq!(a.objects, b.objects);
    }

    #[test]
    fn disjoint_seeds_give_disjoint_sequences() {
        let a = make_dataset(&test_spec(10), 4, DomainTag::Target).unwrap();
        let b = make_dataset(&test_spec(11), 4, DomainTag::Target).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| x.image.data != y.image.data));
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(make_dataset(&test_spec(1), 0, DomainTag::Target).is_err());
    }

    #[test]
    fn every_box_lies_inside_the_raster() {
        let scenes = make_dataset(&test_spec(12), 20, DomainTag::Target).unwrap();
        for scene in &scenes {
            for (_, b) in &scene.objects {
                assert!(b.inside(48.0, 48.0), "box {b:?} escapes the raster");
            }
        }
    }

    #[test]
    fn placement_respects_overlap_cap() {
        let scenes = make_dataset(&test_spec(13), 20, DomainTag::Target).unwrap();
        for scene in &scenes {
            for i in 0..scene.objects.len() {
                for j in i + 1..scene.objects.len() {
                    let overlap = crate::types::iou(&scene.objects[i].1, &scene.objects[j].1);
                    assert!(overlap <= MAX_PLACEMENT_IOU + 1e-12);
                }
            }
        }
    }

    #[test]
    fn tiny_scene_with_objects_is_an_error() {
        // train glyphs are at least 13 pixels wide after jitter and can never
        // be placed in a 10-pixel scene; rendering must report it rather than
        // silently returning an empty scene
        let mut spec = test_spec(14);
        spec.scene_size = (10, 10, 3);
        spec.objects_per_scene = (3, 3);
        let mut only_train_freq = [0.0; 8];
        only_train_freq[Category::Train.index()] = 1.0;
        spec.class_frequency = only_train_freq;
        spec.categories = CategorySet::new(&[Category::Train]).unwrap();
        let mut rng = scene_stream(&spec, 0);
        assert!(render_scene(&spec, &mut rng, DomainTag::Target).is_err());
    }

    #[test]
    fn class_histogram_tracks_frequency() {
        // two classes weighted 9:1 over 1000 scenes
        let mut spec = test_spec(15);
        spec.categories = CategorySet::new(&[Category::Car, Category::Bus]).unwrap();
        spec.class_frequency = [0.0; 8];
        spec.class_frequency[Category::Car.index()] = 0.9;
        spec.class_frequency[Category::Bus.index()] = 0.1;
        spec.objects_per_scene = (1, 3);
        spec.style.noise_sigma = 0.0;
        let scenes = make_dataset(&spec, 1000, DomainTag::Target).unwrap();
        let mut cars = 0usize;
        let mut buses = 0usize;
        for scene in &scenes {
            for (cat, _) in &scene.objects {
                match cat {
                    Category::Car => cars += 1,
                    Category::Bus => buses += 1,
                    other => panic!("unexpected class {other}"),
                }
            }
        }
        let ratio = cars as f64 / buses as f64;
        assert!((7.2..=10.8).contains(&ratio), "ratio {ratio} outside 9 +- 20%");
        // chi-square against the 9:1 expectation
        let total = (cars + buses) as f64;
        let (e_car, e_bus) = (0.9 * total, 0.1 * total);
        let chi2 = (cars as f64 - e_car).powi(2) / e_car + (buses as f64 - e_bus).powi(2) / e_bus;
        assert!(chi2 < 10.83, "chi-square {chi2} beyond the 0.001 critical value");
    }

    #[test]
    fn required_class_is_always_present() {
        let spec = test_spec(16);
        for i in 0..10 {
            let mut rng = scene_stream(&spec, i);
            let scene = render_scene_with(&spec, &mut rng, DomainTag::Synthetic, Some(Category::Bus)).unwrap();
            assert!(scene.objects.iter().any(|(c, _)| *c == Category::Bus));
        }
    }

    #[test]
    fn export_import_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = make_dataset(&test_spec(17), 3, DomainTag::Source(1)).unwrap();
        export_dataset(dir.path(), &scenes, Some(&test_spec(17).style)).unwrap();
        let back = import_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in scenes.iter().zip(&back) {
            assert_eq!(a.image.data, b.image.data);
            assert_eq!(a.objects, b.objects);
            assert_eq!(a.domain, b.domain);
        }
        let rasters = import_rasters_only(dir.path()).unwrap();
        assert_eq!(rasters.len(), 3);
        assert_eq!(rasters[0].data, scenes[0].image.data);
    }

    #[test]
    fn frequency_outside_category_set_rejected() {
        let mut spec = test_spec(18);
        spec.categories = CategorySet::new(&[Category::Car]).unwrap();
        // keeps full-registry frequencies -> invalid
        assert!(spec.validate().is_err());
    }
}

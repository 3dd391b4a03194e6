//! Procedurally drawn scenes of coloured shapes with templated object- and
//! part-level expressions. Used for the overfit run, fixtures and demos.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::dataset::{save_benchmark, BenchmarkSplit, DatasetError, Granularity, ReferringSample, SplitName};
use crate::mask::{rle_encode, BinaryMask};

pub const BACKGROUND: [u8; 3] = [128, 128, 128];

pub fn color_rgb(name: &str) -> [u8; 3] {
    match name {
        "red" => [220, 40, 40],
        "green" => [40, 200, 60],
        "blue" => [40, 70, 230],
        "yellow" => [235, 215, 40],
        _ => [250, 250, 250],
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
    Square { x0: usize, y0: usize, x1: usize, y1: usize },
    Disk { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    pub fn name(&self) -> &'static str {
        match self {
            Shape::Square { .. } => "square",
            Shape::Disk { .. } => "disk",
        }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        match *self {
            Shape::Square { x0, y0, x1, y1 } => (x0..x1).contains(&x) && (y0..y1).contains(&y),
            Shape::Disk { cx, cy, r } => {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                dx * dx + dy * dy <= r * r
            }
        }
    }

    fn vertical_span(&self) -> (f64, f64) {
        match *self {
            Shape::Square { y0, y1, .. } => (y0 as f64, y1 as f64),
            Shape::Disk { cy, r, .. } => (cy - r, cy + r),
        }
    }

    fn center_x(&self) -> f64 {
        match *self {
            Shape::Square { x0, x1, .. } => (x0 + x1) as f64 / 2.0,
            Shape::Disk { cx, .. } => cx,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub color: &'static str,
    pub shape: Shape,
}

impl SceneObject {
    pub fn category(&self) -> String {
        format!("{} {}", self.color, self.shape.name())
    }

    pub fn mask(&self, w: usize, h: usize) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| self.shape.contains(x, y)).expect("positive scene size")
    }

    /// The `top` or `bottom` half of the shape.
    pub fn part_mask(&self, part: &str, w: usize, h: usize) -> BinaryMask {
        let (top, bottom) = self.shape.vertical_span();
        let mid = (top + bottom) / 2.0;
        BinaryMask::from_fn(w, h, |x, y| {
            let cy = y as f64 + 0.5;
            self.shape.contains(x, y) && if part == "top" { cy < mid } else { cy >= mid }
        })
        .expect("positive scene size")
    }

    pub fn side(&self, w: usize) -> &'static str {
        if self.shape.center_x() < w as f64 / 2.0 {
            "left"
        } else {
            "right"
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub name: String,
    pub size: usize,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn render(&self) -> RgbImage {
        let s = self.size as u32;
        RgbImage::from_fn(s, s, |x, y| {
            let hit = self.objects.iter().rev().find(|o| o.shape.contains(x as usize, y as usize));
            Rgb(hit.map_or(BACKGROUND, |o| color_rgb(o.color)))
        })
    }
}

/// A split together with the images its samples reference.
#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub split: BenchmarkSplit,
    pub images: Vec<(String, RgbImage)>,
}

impl SyntheticSet {
    /// Writes PNGs and `<split>.jsonl` under `root`.
    pub fn write(&self, root: &Path) -> Result<(), DatasetError> {
        for (name, img) in &self.images {
            let path = root.join(name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|source| DatasetError::Io {
                    path: parent.to_path_buf(),
                    source,
                })?;
            }
            img.save(&path).map_err(|e| DatasetError::Io {
                path: path.clone(),
                source: std::io::Error::other(e.to_string()),
            })?;
        }
        save_benchmark(root, &self.split)?;
        Ok(())
    }

    pub fn image(&self, name: &str) -> Option<&RgbImage> {
        self.images.iter().find(|(n, _)| n == name).map(|(_, i)| i)
    }
}

fn sample(
    id: String,
    scene: &Scene,
    image_ref: &str,
    expression: String,
    mask: &BinaryMask,
    object: &SceneObject,
    part: Option<&str>,
) -> ReferringSample {
    ReferringSample {
        sample_id: id,
        image_ref: image_ref.to_string(),
        image_w: scene.size,
        image_h: scene.size,
        expression,
        mask: rle_encode(mask),
        granularity: if part.is_some() { Granularity::Part } else { Granularity::Object },
        object_category: object.category(),
        part_category: part.map(String::from),
    }
}

fn square(color: &'static str, x0: usize, y0: usize, x1: usize, y1: usize) -> SceneObject {
    SceneObject {
        color,
        shape: Shape::Square { x0, y0, x1, y1 },
    }
}

fn disk(color: &'static str, cx: f64, cy: f64, r: f64) -> SceneObject {
    SceneObject {
        color,
        shape: Shape::Disk { cx, cy, r },
    }
}

/// Eight samples over four 16×16 scenes of two squares each. Every scene
/// yields one object expression (`the <color> square`) for its first square
/// and one part expression (`<part> of the <color> square`) for its second.
/// All boundaries fall on even pixel coordinates.
pub fn toy_set() -> SyntheticSet {
    let layouts = [
        (square("red", 2, 2, 8, 6), square("blue", 8, 8, 14, 16), "top"),
        (square("green", 8, 2, 14, 10), square("yellow", 2, 10, 8, 14), "bottom"),
        (square("blue", 2, 6, 10, 14), square("red", 10, 2, 16, 6), "top"),
        (square("yellow", 10, 8, 16, 16), square("green", 2, 2, 8, 6), "bottom"),
    ];
    let mut samples = Vec::new();
    let mut images = Vec::new();
    for (k, (a, b, part)) in layouts.into_iter().enumerate() {
        let scene = Scene {
            name: format!("toy_{k}"),
            size: 16,
            objects: vec![a.clone(), b.clone()],
        };
        let image_ref = format!("images/{}.png", scene.name);
        let s = scene.size;
        samples.push(sample(
            format!("toy-{}", 2 * k),
            &scene,
            &image_ref,
            format!("the {} square", a.color),
            &a.mask(s, s),
            &a,
            None,
        ));
        samples.push(sample(
            format!("toy-{}", 2 * k + 1),
            &scene,
            &image_ref,
            format!("{part} of the {} square", b.color),
            &b.part_mask(part, s, s),
            &b,
            Some(part),
        ));
        images.push((image_ref, scene.render()));
    }
    SyntheticSet {
        split: BenchmarkSplit {
            name: SplitName::Train,
            samples,
        },
        images,
    }
}

/// Twenty samples over five 32×32 scenes: twelve object expressions of the
/// form `the <color> <shape> at <side>` or `the <color> <shape> on <side>`
/// and eight part expressions `<part> of the <color> <shape>`. Every
/// expression has five words.
pub fn fixture_set(split: SplitName) -> SyntheticSet {
    let scenes = [
        vec![square("red", 4, 4, 14, 14), disk("blue", 22.0, 20.0, 6.0)],
        vec![square("green", 18, 4, 28, 12), disk("yellow", 8.0, 22.0, 5.0)],
        vec![square("blue", 2, 18, 12, 30), disk("red", 22.0, 10.0, 7.0)],
        vec![square("yellow", 16, 16, 30, 30), disk("green", 8.0, 8.0, 5.0)],
        vec![square("red", 20, 2, 30, 10), square("green", 4, 18, 14, 28)],
    ];
    let mut samples = Vec::new();
    let mut images = Vec::new();
    for (k, objects) in scenes.into_iter().enumerate() {
        let scene = Scene {
            name: format!("scene_{k}"),
            size: 32,
            objects,
        };
        let image_ref = format!("images/{}.png", scene.name);
        let s = scene.size;
        let mut push = |expr: String, mask: BinaryMask, obj: &SceneObject, part: Option<&str>| {
            let id = format!("fx-{:02}", samples.len());
            samples.push(sample(id, &scene, &image_ref, expr, &mask, obj, part));
        };
        for obj in &scene.objects {
            let expr = format!("the {} {} at {}", obj.color, obj.shape.name(), obj.side(s));
            push(expr, obj.mask(s, s), obj, None);
        }
        if k == 0 || k == 4 {
            let obj = &scene.objects[1];
            let expr = format!("the {} {} on {}", obj.color, obj.shape.name(), obj.side(s));
            push(expr, obj.mask(s, s), obj, None);
        }
        if k < 4 {
            for (obj, part) in scene.objects.iter().zip(["top", "bottom"]) {
                let expr = format!("{part} of the {} {}", obj.color, obj.shape.name());
                push(expr, obj.part_mask(part, s, s), obj, Some(part));
            }
        }
        images.push((image_ref, scene.render()));
    }
    SyntheticSet {
        split: BenchmarkSplit { name: split, samples },
        images,
    }
}


/// Ten scenes for an end-to-end engine run, with a stub backend config.
#[derive(Debug, Clone)]
pub struct EngineFixture {
    pub inputs: Vec<crate::engine::EngineInput>,
    pub images: Vec<(String, RgbImage)>,
    pub backends: crate::engine::BackendsConfig,
    /// Caption the scorer rates exactly at the threshold.
    pub at_threshold_caption: String,
    /// Caption the scorer rates just above the threshold.
    pub above_threshold_caption: String,
}

pub const ENGINE_PART_TABLE: [(&str, &[&str]); 3] = [
    ("dog", &["head", "leg", "tail"]),
    ("cat", &["head", "ear"]),
    ("car", &["wheel", "door"]),
];

impl EngineFixture {
    /// Writes the images, `manifest.jsonl` and `backends.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), DatasetError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| DatasetError::Io { path, source }
        };
        for (name, img) in &self.images {
            let path = dir.join(name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(io(parent))?;
            }
            img.save(&path).map_err(|e| DatasetError::Io {
                path: path.clone(),
                source: std::io::Error::other(e.to_string()),
            })?;
        }
        let manifest: String = self
            .inputs
            .iter()
            .map(|i| serde_json::to_string(i).expect("input serializes") + "\n")
            .collect();
        let mpath = dir.join("manifest.jsonl");
        std::fs::write(&mpath, manifest).map_err(io(&mpath))?;
        let bpath = dir.join("backends.json");
        let backends = serde_json::to_string_pretty(&self.backends).expect("config serializes") + "\n";
        std::fs::write(&bpath, backends).map_err(io(&bpath))?;
        Ok(())
    }
}

/// Scene `k` holds `1 + k % 3` animals or cars laid out left to right.
/// Scene 3 adds a box of category `ghost` that the segmenter refuses and
/// scene 7 a zero-area `speck`. One object caption is pinned to score 0.5
/// and another to 0.51; all other records score 0.9.
pub fn engine_fixture() -> EngineFixture {
    use crate::engine::{normalize_bbox, BBox, BackendSpec, BackendsConfig, EngineInput, ObjectBox};

    let (w, h) = (48usize, 32usize);
    let cats = ["dog", "cat", "car"];
    let mut inputs = Vec::new();
    let mut images = Vec::new();
    for k in 0..10usize {
        let n = 1 + k % 3;
        let mut objects: Vec<ObjectBox> = (0..n)
            .map(|j| {
                let x0 = (2 + j * 15) as f64;
                let y0 = (2 + (k + j) % 4 * 2) as f64;
                ObjectBox {
                    bbox: BBox::new(x0, y0, x0 + 12.0, y0 + 18.0),
                    category: cats[(k + j) % 3].to_string(),
                }
            })
            .collect();
        if k == 3 {
            objects.push(ObjectBox {
                bbox: BBox::new(40.0, 20.0, 46.0, 30.0),
                category: "ghost".into(),
            });
        }
        if k == 7 {
            objects.push(ObjectBox {
                bbox: BBox::new(44.0, 10.0, 44.0, 10.0),
                category: "speck".into(),
            });
        }
        let name = format!("images/engine_{k:02}.png");
        let palette = ["red", "green", "blue", "yellow"];
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let hit = objects.iter().position(|o| {
                let (cx, cy) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
                o.bbox.x0 <= cx && cx < o.bbox.x1 && o.bbox.y0 <= cy && cy < o.bbox.y1
            });
            Rgb(hit.map_or(BACKGROUND, |i| color_rgb(palette[(i + k) % 4])))
        });
        images.push((name.clone(), img));
        inputs.push(EngineInput {
            image: name,
            width: Some(w),
            height: Some(h),
            objects,
        });
    }
    let caption_of = |input: &EngineInput, i: usize| {
        let o = &input.objects[i];
        let norm = normalize_bbox(&o.bbox, w, h).expect("fixture boxes are valid");
        format!("obj:{}@{norm}", o.category)
    };
    let at_threshold_caption = caption_of(&inputs[1], 0);
    let above_threshold_caption = caption_of(&inputs[2], 1);

    let stub = |v: serde_json::Value| match v {
        serde_json::Value::Object(m) => Some(BackendSpec::Stub(m)),
        _ => unreachable!(),
    };
    let table: serde_json::Map<String, serde_json::Value> = ENGINE_PART_TABLE
        .iter()
        .map(|(c, parts)| (c.to_string(), serde_json::json!(parts)))
        .collect();
    let backends = BackendsConfig {
        captioner: stub(serde_json::json!({})),
        promptable_segmenter: stub(serde_json::json!({"fail_on": ["ghost"]})),
        part_segmenter: stub(serde_json::json!({})),
        decomposer: stub(serde_json::json!({ "table": table })),
        scorer: stub(serde_json::json!({
            "default": 0.9,
            "overrides": { at_threshold_caption.clone(): 0.5, above_threshold_caption.clone(): 0.51 },
        })),
    };
    EngineFixture {
        inputs,
        images,
        backends,
        at_threshold_caption,
        above_threshold_caption,
    }
}

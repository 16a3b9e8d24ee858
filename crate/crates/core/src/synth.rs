//! Procedural panoptic scenes: two stuff classes (sky, ground), two
//! in-distribution thing classes (circle, square) and two held-out thing
//! classes (triangle, cross) that only ever appear in the open split.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::rng::SplitMix64;

/// Class value for unlabeled pixels.
pub const VOID: u16 = u16::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: u16,
    pub name: String,
    pub is_thing: bool,
    pub is_ood: bool,
    /// Base RGB in `[0, 1]`.
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub classes: Vec<ClassInfo>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

pub const SKY: u16 = 0;
pub const GROUND: u16 = 1;
pub const CIRCLE: u16 = 2;
pub const SQUARE: u16 = 3;
pub const TRIANGLE: u16 = 4;
pub const CROSS: u16 = 5;

impl Default for Catalog {
    fn default() -> Self {
        let c = |id, name: &str, is_thing, is_ood, color| ClassInfo {
            id,
            name: name.to_string(),
            is_thing,
            is_ood,
            color,
        };
        Self {
            classes: vec![
                c(SKY, "sky", false, false, [0.45, 0.65, 0.95]),
                c(GROUND, "ground", false, false, [0.35, 0.55, 0.25]),
                c(CIRCLE, "circle", true, false, [0.85, 0.20, 0.15]),
                c(SQUARE, "square", true, false, [0.95, 0.80, 0.20]),
                c(TRIANGLE, "triangle", true, true, [0.70, 0.30, 0.80]),
                c(CROSS, "cross", true, true, [0.15, 0.80, 0.80]),
            ],
        }
    }
}

impl Catalog {
    pub fn get(&self, id: u16) -> Option<&ClassInfo> {
        self.classes.iter().find(|c| c.id == id)
    }

    /// Number of in-distribution classes; these are the model's classes
    /// `0..num_known()`.
    pub fn num_known(&self) -> usize {
        self.classes.iter().filter(|c| !c.is_ood).count()
    }

    pub fn is_thing(&self, id: u16) -> bool {
        self.get(id).is_some_and(|c| c.is_thing)
    }

    pub fn is_ood(&self, id: u16) -> bool {
        self.get(id).is_some_and(|c| c.is_ood)
    }

    /// Label used for all held-out classes once merged for open-world
    /// evaluation.
    pub fn anomaly_class(&self) -> u16 {
        self.classes.len() as u16
    }
}

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    /// Channel-major `[3, H, W]` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.width * self.height;
        let mut data = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                data[c * hw + p] = f64::from(self.rgb[3 * p + c]) / 255.0;
            }
        }
        Tensor::new(vec![3, self.height, self.width], data).expect("consistent shape")
    }

    pub fn hflip(&self) -> Self {
        let mut rgb = vec![0; self.rgb.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                let (s, d) = (y * self.width + x, y * self.width + self.width - 1 - x);
                rgb[3 * d..3 * d + 3].copy_from_slice(&self.rgb[3 * s..3 * s + 3]);
            }
        }
        Self { rgb, ..*self }
    }
}

/// Per-pixel class and instance ids. Instance 0 marks stuff.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanopticLabel {
    pub width: usize,
    pub height: usize,
    pub class_map: Vec<u16>,
    pub instance_map: Vec<u16>,
}

impl PanopticLabel {
    pub fn len(&self) -> usize {
        self.class_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_map.is_empty()
    }

    pub fn hflip(&self) -> Self {
        let flip = |m: &[u16]| {
            let mut out = vec![0; m.len()];
            for y in 0..self.height {
                for x in 0..self.width {
                    out[y * self.width + self.width - 1 - x] = m[y * self.width + x];
                }
            }
            out
        };
        Self {
            class_map: flip(&self.class_map),
            instance_map: flip(&self.instance_map),
            ..*self
        }
    }

    /// Pixel sets of every thing instance, keyed by instance id (ascending).
    pub fn instances(&self) -> Vec<(u16, u16, Vec<usize>)> {
        let mut map: std::collections::BTreeMap<u16, (u16, Vec<usize>)> = Default::default();
        for (p, (&c, &i)) in self.class_map.iter().zip(&self.instance_map).enumerate() {
            if i != 0 {
                map.entry(i).or_insert_with(|| (c, Vec::new())).1.push(p);
            }
        }
        map.into_iter().map(|(i, (c, px))| (i, c, px)).collect()
    }

    /// Copy with held-out classes merged into the catalog's anomaly class.
    pub fn with_merged_ood(&self, catalog: &Catalog) -> Self {
        let anomaly = catalog.anomaly_class();
        let class_map = self
            .class_map
            .iter()
            .map(|&c| if catalog.is_ood(c) { anomaly } else { c })
            .collect();
        Self {
            class_map,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: PanopticLabel,
}

impl Sample {
    pub fn hflip(&self) -> Self {
        Self {
            image: self.image.hflip(),
            label: self.label.hflip(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    ValClosed,
    ValOpen,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::ValClosed, Split::ValOpen];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::ValClosed => "val_closed",
            Split::ValOpen => "val_open",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::ValClosed => 2,
            Split::ValOpen => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub min_things: usize,
    pub max_things: usize,
    /// Uniform per-instance color offset half-width, per channel.
    pub instance_jitter: f64,
    pub noise_sigma: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 64,
            width: 64,
            min_things: 1,
            max_things: 4,
            instance_jitter: 0.08,
            noise_sigma: 0.05,
        }
    }
}

/// Visible fraction an occluded instance must keep.
const MIN_VISIBLE: f64 = 0.6;
const MIN_AREA: usize = 20;
const PLACEMENT_ATTEMPTS: usize = 40;

struct Canvas {
    h: usize,
    w: usize,
    class_map: Vec<u16>,
    instance_map: Vec<u16>,
    /// Full (unoccluded) area of every instance, index = id - 1.
    areas: Vec<usize>,
    colors: Vec<[f64; 3]>,
}

fn shape_of(class: u16) -> Shape {
    match class {
        CIRCLE => Shape::Circle,
        SQUARE => Shape::Square,
        TRIANGLE => Shape::Triangle,
        CROSS => Shape::Cross,
        _ => unreachable!("not a thing class"),
    }
}

/// Rasterized footprint of a shape, clipped by construction to the canvas.
fn footprint(shape: Shape, rng: &mut SplitMix64, h: usize, w: usize) -> Vec<usize> {
    let (h_i, w_i) = (h as i64, w as i64);
    let mut px = Vec::new();
    match shape {
        Shape::Circle => {
            let r = rng.range_inclusive(4, 9);
            let cy = rng.range_inclusive(r, h_i - 1 - r);
            let cx = rng.range_inclusive(r, w_i - 1 - r);
            let r2 = (r as f64 + 0.3).powi(2);
            for y in cy - r..=cy + r {
                for x in cx - r..=cx + r {
                    if ((y - cy).pow(2) + (x - cx).pow(2)) as f64 <= r2 {
                        px.push((y * w_i + x) as usize);
                    }
                }
            }
        }
        Shape::Square => {
            let s = rng.range_inclusive(4, 8);
            let cy = rng.range_inclusive(s, h_i - 1 - s);
            let cx = rng.range_inclusive(s, w_i - 1 - s);
            for y in cy - s..=cy + s {
                for x in cx - s..=cx + s {
                    px.push((y * w_i + x) as usize);
                }
            }
        }
        Shape::Triangle => {
            // Upward isosceles triangle with apex at the top.
            let s = rng.range_inclusive(6, 10);
            let top = rng.range_inclusive(0, h_i - 1 - s);
            let cx = rng.range_inclusive(s, w_i - 1 - s);
            for dy in 0..=s {
                let half = dy;
                for x in cx - half..=cx + half {
                    px.push(((top + dy) * w_i + x) as usize);
                }
            }
        }
        Shape::Cross => {
            let arm = rng.range_inclusive(5, 9);
            let t = rng.range_inclusive(1, 2);
            let cy = rng.range_inclusive(arm, h_i - 1 - arm);
            let cx = rng.range_inclusive(arm, w_i - 1 - arm);
            for y in cy - arm..=cy + arm {
                for x in cx - arm..=cx + arm {
                    if (y - cy).abs() <= t || (x - cx).abs() <= t {
                        px.push((y * w_i + x) as usize);
                    }
                }
            }
        }
    }
    px
}

/// True when `pixels` forms a single 4-connected component.
pub fn is_four_connected(pixels: &[usize], w: usize, h: usize) -> bool {
    if pixels.is_empty() {
        return false;
    }
    let mut member = vec![false; w * h];
    for &p in pixels {
        member[p] = true;
    }
    let mut seen = vec![false; w * h];
    let mut stack = vec![pixels[0]];
    seen[pixels[0]] = true;
    let mut count = 0;
    while let Some(p) = stack.pop() {
        count += 1;
        let (y, x) = (p / w, p % w);
        let mut visit = |q: usize| {
            if member[q] && !seen[q] {
                seen[q] = true;
                stack.push(q);
            }
        };
        if y > 0 {
            visit(p - w);
        }
        if y + 1 < h {
            visit(p + w);
        }
        if x > 0 {
            visit(p - 1);
        }
        if x + 1 < w {
            visit(p + 1);
        }
    }
    count == pixels.len()
}

impl Canvas {
    fn new(h: usize, w: usize, rng: &mut SplitMix64) -> Self {
        // Tilted horizon splitting sky (above) from ground (below).
        let base = rng.uniform(0.3, 0.6) * h as f64;
        let slope = rng.uniform(-0.25, 0.25);
        let mut class_map = vec![GROUND; h * w];
        for y in 0..h {
            for x in 0..w {
                let horizon = base + slope * (x as f64 - w as f64 / 2.0);
                if (y as f64) < horizon {
                    class_map[y * w + x] = SKY;
                }
            }
        }
        Self {
            h,
            w,
            class_map,
            instance_map: vec![0; h * w],
            areas: Vec::new(),
            colors: Vec::new(),
        }
    }

    /// Draws one instance on top; reverts and returns false if it would
    /// fragment or mostly hide an earlier instance.
    fn try_place(&mut self, class: u16, rng: &mut SplitMix64) -> bool {
        let shape = shape_of(class);
        for _ in 0..PLACEMENT_ATTEMPTS {
            let px = footprint(shape, rng, self.h, self.w);
            if px.len() < MIN_AREA {
                continue;
            }
            let id = self.areas.len() as u16 + 1;
            let saved = (self.class_map.clone(), self.instance_map.clone());
            for &p in &px {
                self.class_map[p] = class;
                self.instance_map[p] = id;
            }
            let ok = (1..id).all(|prev| {
                let pixels: Vec<usize> = (0..self.h * self.w)
                    .filter(|&p| self.instance_map[p] == prev)
                    .collect();
                pixels.len() as f64 >= MIN_VISIBLE * self.areas[prev as usize - 1] as f64
                    && is_four_connected(&pixels, self.w, self.h)
            });
            if ok {
                self.areas.push(px.len());
                return true;
            }
            self.class_map = saved.0;
            self.instance_map = saved.1;
        }
        false
    }
}

fn split_classes(split: Split) -> (&'static [u16], &'static [u16]) {
    match split {
        Split::Train | Split::ValClosed => (&[CIRCLE, SQUARE], &[]),
        Split::ValOpen => (&[CIRCLE, SQUARE], &[TRIANGLE, CROSS]),
    }
}

/// Scene `index` of `split`; depends only on `(spec.seed, split, index)`.
pub fn generate_sample(spec: &SceneSpec, catalog: &Catalog, split: Split, index: u64) -> Sample {
    let mut rng = SplitMix64::keyed(spec.seed, split.stream(), index);
    let (ind, ood) = split_classes(split);
    loop {
        let mut canvas = Canvas::new(spec.height, spec.width, &mut rng);
        let mut classes = Vec::new();
        if ood.is_empty() {
            let n = rng.range_inclusive(spec.min_things as i64, spec.max_things as i64);
            for _ in 0..n {
                classes.push(ind[rng.below(ind.len() as u64) as usize]);
            }
        } else {
            let n_ood = rng.range_inclusive(1, 2);
            let n_ind = rng.range_inclusive(0, spec.max_things.saturating_sub(1) as i64);
            for _ in 0..n_ind {
                classes.push(ind[rng.below(ind.len() as u64) as usize]);
            }
            for _ in 0..n_ood {
                classes.push(ood[rng.below(ood.len() as u64) as usize]);
            }
            rng.shuffle(&mut classes);
        }
        let mut placed_ood = false;
        for &c in &classes {
            if canvas.try_place(c, &mut rng) {
                let color = jitter(catalog, c, spec.instance_jitter, &mut rng);
                canvas.colors.push(color);
                placed_ood |= catalog.is_ood(c);
            }
        }
        if canvas.areas.is_empty() || (!ood.is_empty() && !placed_ood) {
            continue;
        }
        let image = render(spec, catalog, &canvas, &mut rng);
        return Sample {
            image,
            label: PanopticLabel {
                width: spec.width,
                height: spec.height,
                class_map: canvas.class_map,
                instance_map: canvas.instance_map,
            },
        };
    }
}

fn jitter(catalog: &Catalog, class: u16, amount: f64, rng: &mut SplitMix64) -> [f64; 3] {
    let base = catalog.get(class).expect("known class").color;
    [
        base[0] + rng.uniform(-amount, amount),
        base[1] + rng.uniform(-amount, amount),
        base[2] + rng.uniform(-amount, amount),
    ]
}

fn render(spec: &SceneSpec, catalog: &Catalog, canvas: &Canvas, rng: &mut SplitMix64) -> Image {
    let stuff = [
        jitter(catalog, SKY, spec.instance_jitter, rng),
        jitter(catalog, GROUND, spec.instance_jitter, rng),
    ];
    let n = canvas.h * canvas.w;
    let mut rgb = Vec::with_capacity(3 * n);
    for p in 0..n {
        let color = match canvas.instance_map[p] {
            0 => stuff[canvas.class_map[p] as usize],
            id => canvas.colors[id as usize - 1],
        };
        for c in color {
            let v = (c + spec.noise_sigma * rng.gaussian()).clamp(0.0, 1.0);
            rgb.push((v * 255.0).round() as u8);
        }
    }
    Image {
        width: canvas.w,
        height: canvas.h,
        rgb,
    }
}

pub fn generate_split(spec: &SceneSpec, catalog: &Catalog, split: Split, count: usize) -> Vec<Sample> {
    (0..count as u64)
        .map(|i| generate_sample(spec, catalog, split, i))
        .collect()
}

/// Binary mask targets: one per stuff class present, then one per thing
/// instance. Held-out classes and void are left out of every mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMasks {
    pub masks: Vec<Vec<bool>>,
    pub classes: Vec<usize>,
}

impl BinaryMasks {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

pub fn to_binary_masks(label: &PanopticLabel, catalog: &Catalog) -> BinaryMasks {
    let n = label.len();
    let mut masks = Vec::new();
    let mut classes = Vec::new();
    let mut stuff: Vec<u16> = label
        .class_map
        .iter()
        .copied()
        .filter(|&c| c != VOID && !catalog.is_thing(c))
        .collect();
    stuff.sort_unstable();
    stuff.dedup();
    for c in stuff {
        masks.push(label.class_map.iter().map(|&v| v == c).collect());
        classes.push(c as usize);
    }
    for (id, class, pixels) in label.instances() {
        if class == VOID || catalog.is_ood(class) {
            continue;
        }
        let mut m = vec![false; n];
        for p in pixels {
            m[p] = label.instance_map[p] == id;
        }
        masks.push(m);
        classes.push(class as usize);
    }
    BinaryMasks { masks, classes }
}

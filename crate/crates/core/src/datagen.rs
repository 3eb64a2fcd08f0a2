//! Procedural interaction-context scenes and training-triplet samplers.
//!
//! Scenes are drawn from box primitives laid out on a 16-unit design grid
//! (z up) and rasterized at the requested resolution, so a scene family
//! looks the same at every `R`. Every scene stands on a floor patch that
//! carries the "supporting" label.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::voxel::{
    neighbors, normalize_object, read_manifest, read_scene_file, write_manifest,
    write_scene_file, Manifest, ManifestEntry, ObjectGrid, SceneGrid, SceneRecord, SegmentedScene,
    TransformParams,
};

pub const CATEGORY_NAMES: [&str; 6] = ["table", "desk", "chair", "shelf", "handcart", "hanger"];
pub const LABEL_NAMES: [&str; 6] = [
    "supporting",
    "supported",
    "sitting",
    "pushing",
    "hanging",
    "surrounding",
];
pub const NUM_CATEGORIES: usize = CATEGORY_NAMES.len();
pub const NUM_LABELS: usize = LABEL_NAMES.len();

pub const SUPPORTING: u8 = 0;
pub const SUPPORTED: u8 = 1;
pub const SITTING: u8 = 2;
pub const PUSHING: u8 = 3;
pub const HANGING: u8 = 4;
pub const SURROUNDING: u8 = 5;

const DESIGN_UNITS: f64 = 16.0;

/// An interaction label with its vocabulary name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InteractionType {
    pub id: u8,
    pub name: &'static str,
}

pub fn interaction_types() -> Vec<InteractionType> {
    LABEL_NAMES
        .iter()
        .enumerate()
        .map(|(id, &name)| InteractionType { id: id as u8, name })
        .collect()
}

/// Labels a category's generator can emit.
pub fn allowed_labels(category: usize) -> &'static [u8] {
    match category {
        0 => &[SUPPORTING, SUPPORTED, SURROUNDING],
        1 => &[SUPPORTING, SUPPORTED, SURROUNDING],
        2 => &[SUPPORTING, SITTING],
        3 => &[SUPPORTING, SUPPORTED],
        4 => &[SUPPORTING, SUPPORTED, PUSHING],
        5 => &[SUPPORTING, HANGING],
        _ => &[],
    }
}

/// A labeled training scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub seg: SegmentedScene,
    pub category: usize,
    /// Maps `central_normalized` onto the Central voxels.
    pub gt_transform: TransformParams,
    pub central_normalized: ObjectGrid,
}

impl SceneSample {
    pub fn scene(&self) -> &SceneGrid {
        self.seg.scene()
    }

    pub fn res(&self) -> usize {
        self.seg.res()
    }

    /// Rebuilds the derived fields from what a scene file stores.
    pub fn from_record(rec: SceneRecord) -> Result<Self> {
        let (central_normalized, _) = normalize_object(&rec.seg.scene().central_object())?;
        Ok(SceneSample {
            seg: rec.seg,
            category: rec.category,
            gt_transform: rec.transform,
            central_normalized,
        })
    }

    pub fn to_record(&self, num_categories: usize) -> SceneRecord {
        SceneRecord {
            seg: self.seg.clone(),
            num_categories,
            category: self.category,
            transform: self.gt_transform,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Cell {
    Empty,
    Central,
    Context(u8),
}

/// Rasterizes design-unit boxes into a voxel grid. Earlier writes win.
struct Canvas {
    res: usize,
    scale: f64,
    cells: Vec<Cell>,
    /// Design-unit xy footprint of everything drawn so far.
    footprint: Option<([i32; 2], [i32; 2])>,
}

impl Canvas {
    fn new(res: usize) -> Self {
        Canvas {
            res,
            scale: res as f64 / DESIGN_UNITS,
            cells: vec![Cell::Empty; res.pow(3)],
            footprint: None,
        }
    }

    /// Half-open box `[lo, hi)` in design units; every axis spans at least
    /// one voxel.
    fn draw(&mut self, lo: [i32; 3], hi: [i32; 3], cell: Cell) {
        let r = self.res as i64;
        let mut a = [0usize; 3];
        let mut b = [0usize; 3];
        for k in 0..3 {
            let i0 = (lo[k] as f64 * self.scale).round() as i64;
            let i1 = ((hi[k] as f64 * self.scale).round() as i64).max(i0 + 1);
            a[k] = i0.clamp(0, r) as usize;
            b[k] = i1.clamp(0, r) as usize;
        }
        for x in a[0]..b[0] {
            for y in a[1]..b[1] {
                for z in a[2]..b[2] {
                    let i = (x * self.res + y) * self.res + z;
                    if self.cells[i] == Cell::Empty {
                        self.cells[i] = cell;
                    }
                }
            }
        }
        let (fl, fh) = self.footprint.unwrap_or(([lo[0], lo[1]], [hi[0], hi[1]]));
        self.footprint = Some((
            [fl[0].min(lo[0]), fl[1].min(lo[1])],
            [fh[0].max(hi[0]), fh[1].max(hi[1])],
        ));
    }

    fn central(&mut self, lo: [i32; 3], hi: [i32; 3]) {
        self.draw(lo, hi, Cell::Central);
    }

    fn context(&mut self, lo: [i32; 3], hi: [i32; 3], label: u8) {
        self.draw(lo, hi, Cell::Context(label));
    }

    /// Floor slab under the whole footprint plus a one-unit margin.
    fn floor(&mut self) {
        let (lo, hi) = self.footprint.expect("floor drawn after objects");
        self.context(
            [lo[0] - 1, lo[1] - 1, 0],
            [hi[0] + 1, hi[1] + 1, 1],
            SUPPORTING,
        );
    }

    fn finish(self) -> Result<SegmentedScene> {
        let central: Vec<bool> = self.cells.iter().map(|&c| c == Cell::Central).collect();
        let labels: Vec<Option<u8>> = self
            .cells
            .iter()
            .map(|&c| match c {
                Cell::Context(l) => Some(l),
                _ => None,
            })
            .collect();
        SegmentedScene::from_label_field(self.res, &central, &labels, NUM_LABELS)
    }
}

/// Block chair with its back toward `back_dir` (±1 along y). `y_front` is
/// the seat edge nearest the central object.
fn side_chair(c: &mut Canvas, x0: i32, y_near: i32, back_dir: i32, label: u8) {
    let (ya, yb) = if back_dir > 0 {
        (y_near, y_near + 3)
    } else {
        (y_near - 3, y_near)
    };
    let back_y = if back_dir > 0 { yb - 1 } else { ya };
    c.context([x0, ya, 3], [x0 + 3, yb, 4], label);
    c.context([x0, back_y, 4], [x0 + 3, back_y + 1, 7], label);
    for (lx, ly) in [(x0, ya), (x0 + 2, ya), (x0, yb - 1), (x0 + 2, yb - 1)] {
        c.context([lx, ly, 1], [lx + 1, ly + 1, 3], label);
    }
}

/// Small items resting on a horizontal surface at height `z`.
fn items_on(c: &mut Canvas, rng: &mut ChaCha8Rng, lo: [i32; 2], hi: [i32; 2], z: i32, count: usize) {
    for _ in 0..count {
        let w = rng.gen_range(1..=2).min(hi[0] - lo[0]);
        let d = rng.gen_range(1..=2).min(hi[1] - lo[1]);
        let h = rng.gen_range(1..=2);
        let x = rng.gen_range(lo[0]..=hi[0] - w);
        let y = rng.gen_range(lo[1]..=hi[1] - d);
        c.context([x, y, z], [x + w, y + d, z + h], SUPPORTED);
    }
}

fn table(c: &mut Canvas, rng: &mut ChaCha8Rng) {
    let w = rng.gen_range(6..=9);
    let d = rng.gen_range(4..=6);
    let h = rng.gen_range(5..=7);
    let x0 = 8 - w / 2 + rng.gen_range(-1..=1);
    let y0 = 8 - d / 2;
    let (x1, y1) = (x0 + w, y0 + d);
    c.central([x0, y0, h - 1], [x1, y1, h]);
    for (lx, ly) in [(x0, y0), (x1 - 1, y0), (x0, y1 - 1), (x1 - 1, y1 - 1)] {
        c.central([lx, ly, 1], [lx + 1, ly + 1, h - 1]);
    }
    let sides = match rng.gen_range(0..3) {
        0 => vec![-1],
        1 => vec![1],
        _ => vec![-1, 1],
    };
    for s in sides {
        let cx = rng.gen_range(x0..=x1 - 3);
        if s < 0 {
            side_chair(c, cx, y0 - 1, -1, SURROUNDING);
        } else {
            side_chair(c, cx, y1 + 1, 1, SURROUNDING);
        }
    }
    let n = rng.gen_range(0..=2);
    items_on(c, rng, [x0 + 1, y0 + 1], [x1 - 1, y1 - 1], h, n);
}

fn desk(c: &mut Canvas, rng: &mut ChaCha8Rng) {
    let w = rng.gen_range(7..=9);
    let d = rng.gen_range(4..=5);
    let h = rng.gen_range(6..=7);
    let x0 = 8 - w / 2;
    let y0 = 8 - d / 2 + 1;
    let (x1, y1) = (x0 + w, y0 + d);
    c.central([x0, y0, h - 1], [x1, y1, h]);
    // Drawer block on +x, legs on -x.
    let dw = rng.gen_range(2..=3);
    c.central([x1 - dw, y0, 1], [x1, y1, h - 1]);
    c.central([x0, y0, 1], [x0 + 1, y0 + 1, h - 1]);
    c.central([x0, y1 - 1, 1], [x0 + 1, y1, h - 1]);
    // Monitor against the back edge.
    let mw = rng.gen_range(2..=4);
    let mx = rng.gen_range(x0 + 1..=x1 - 1 - mw);
    c.context([mx, y1 - 1, h], [mx + mw, y1, h + rng.gen_range(2..=3)], SUPPORTED);
    if rng.gen_bool(0.5) {
        items_on(c, rng, [x0 + 1, y0], [x1 - 1, y1 - 2], h, 1);
    }
    let cx = rng.gen_range(x0 + 1..=x1 - dw - 3);
    side_chair(c, cx, y0 - 1, -1, SURROUNDING);
}

fn chair(c: &mut Canvas, rng: &mut ChaCha8Rng) {
    let w = rng.gen_range(4..=5);
    let d = rng.gen_range(4..=5);
    let s = rng.gen_range(4..=5); // seat top
    let x0 = 8 - w / 2;
    let y0 = 8 - d / 2;
    let (x1, y1) = (x0 + w, y0 + d);
    c.central([x0, y0, s - 1], [x1, y1, s]);
    c.central([x0, y1 - 1, s], [x1, y1, s + rng.gen_range(4..=5)]);
    for (lx, ly) in [(x0, y0), (x1 - 1, y0), (x0, y1 - 1), (x1 - 1, y1 - 1)] {
        c.central([lx, ly, 1], [lx + 1, ly + 1, s - 1]);
    }
    // Seated figure facing -y.
    let fx = x0 + (w - 3) / 2 + rng.gen_range(0..=w - 3 - (w - 3) / 2);
    c.context([fx, y0 - 1, s], [fx + 3, y1 - 1, s + 1], SITTING);
    c.context([fx, y0 - 1, 1], [fx + 3, y0, s], SITTING);
    c.context([fx, y1 - 3, s + 1], [fx + 3, y1 - 1, s + 5], SITTING);
    c.context([fx + 1, y1 - 3, s + 5], [fx + 2, y1 - 1, s + 7], SITTING);
    if rng.gen_bool(0.5) {
        // Arms resting forward.
        c.context([fx - 1, y1 - 4, s + 2], [fx, y1 - 1, s + 3], SITTING);
        c.context([fx + 3, y1 - 4, s + 2], [fx + 4, y1 - 1, s + 3], SITTING);
    }
}

fn shelf(c: &mut Canvas, rng: &mut ChaCha8Rng) {
    let w = rng.gen_range(6..=8);
    let d = 3;
    let top = rng.gen_range(10..=11);
    let x0 = 8 - w / 2;
    let y0 = 8 - d / 2;
    let (x1, y1) = (x0 + w, y0 + d);
    c.central([x0, y0, 1], [x0 + 1, y1, top]);
    c.central([x1 - 1, y0, 1], [x1, y1, top]);
    c.central([x0, y1 - 1, 1], [x1, y1, top]);
    let gap = rng.gen_range(3..=4);
    let mut boards = vec![1];
    while boards.last().unwrap() + gap < top - 2 {
        boards.push(boards.last().unwrap() + gap);
    }
    boards.push(top - 1);
    for &z in &boards {
        c.central([x0, y0, z], [x1, y1, z + 1]);
    }
    for win in boards.windows(2) {
        let (z, next) = (win[0] + 1, win[1]);
        let mut x = x0 + 1;
        while x < x1 - 1 {
            if rng.gen_bool(0.7) {
                let h = rng.gen_range(1..=(next - z).min(3));
                c.context([x, y0, z], [x + 1, y1 - 1, z + h], SUPPORTED);
            }
            x += 1;
        }
    }
}

fn handcart(c: &mut Canvas, rng: &mut ChaCha8Rng) {
    let w = rng.gen_range(5..=6);
    let d = rng.gen_range(4..=5);
    let top = rng.gen_range(9..=10);
    let x0 = 8 - w / 2;
    let y0 = 3 + rng.gen_range(0..=1);
    let (x1, y1) = (x0 + w, y0 + d);
    c.central([x0, y0, 2], [x1, y1, 3]);
    for (lx, ly) in [(x0, y0), (x1 - 1, y0), (x0, y1 - 1), (x1 - 1, y1 - 1)] {
        c.central([lx, ly, 1], [lx + 1, ly + 1, 2]);
    }
    c.central([x0, y1 - 1, 3], [x0 + 1, y1, top]);
    c.central([x1 - 1, y1 - 1, 3], [x1, y1, top]);
    c.central([x0, y1 - 1, top - 1], [x1, y1, top]);
    let n = rng.gen_range(1..=2);
    for _ in 0..n {
        let bw = rng.gen_range(2..=3).min(w - 2);
        let bd = rng.gen_range(2..=3).min(d - 1);
        let bx = rng.gen_range(x0..=x1 - bw);
        let by = rng.gen_range(y0..=y1 - 1 - bd);
        c.context([bx, by, 3], [bx + bw, by + bd, 3 + rng.gen_range(1..=3)], SUPPORTED);
    }
    // Figure behind the handle, hands on the bar.
    let fx = 8 - 1;
    let fy = y1 + 1;
    c.context([fx, fy, 1], [fx + 2, fy + 1, top - 4], PUSHING);
    c.context([fx - 1, fy, top - 4], [fx + 3, fy + 2, top], PUSHING);
    c.context([fx, fy, top], [fx + 2, fy + 2, top + 2], PUSHING);
    c.context([fx - 1, y1, top - 2], [fx, fy, top - 1], PUSHING);
    c.context([fx + 2, y1, top - 2], [fx + 3, fy, top - 1], PUSHING);
}

fn hanger(c: &mut Canvas, rng: &mut ChaCha8Rng) {
    let top = rng.gen_range(10..=11);
    let half = rng.gen_range(3..=4);
    let cx = 8;
    let cy = 8;
    c.central([cx - 1, cy - 1, 1], [cx + 2, cy + 2, 2]);
    c.central([cx, cy, 2], [cx + 1, cy + 1, top]);
    c.central([cx - half, cy, top - 1], [cx + half + 1, cy + 1, top]);
    for side in [-1, 1] {
        let mut filled = false;
        for k in 1..half {
            if rng.gen_bool(0.6) || (!filled && k == half - 1) {
                let x = if side < 0 { cx - k - 1 } else { cx + k + 1 };
                let len = rng.gen_range(3..=6);
                c.context([x, cy - 1, top - 1 - len], [x + 1, cy + 2, top - 1], HANGING);
                filled = true;
            }
        }
    }
}

/// Generates one scene of `category` at resolution `res`; a pure function
/// of its arguments.
pub fn generate_scene(category: usize, seed: u64, res: usize) -> Result<SceneSample> {
    if category >= NUM_CATEGORIES {
        return Err(Error::invalid(format!(
            "category {category} out of range for {NUM_CATEGORIES} categories"
        )));
    }
    if !(8..=64).contains(&res) {
        return Err(Error::invalid(format!("resolution {res} outside 8..=64")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Canvas::new(res);
    match category {
        0 => table(&mut c, &mut rng),
        1 => desk(&mut c, &mut rng),
        2 => chair(&mut c, &mut rng),
        3 => shelf(&mut c, &mut rng),
        4 => handcart(&mut c, &mut rng),
        _ => hanger(&mut c, &mut rng),
    }
    c.floor();
    let seg = c.finish()?;
    let (central_normalized, gt_transform) = normalize_object(&seg.scene().central_object())?;
    Ok(SceneSample {
        seg,
        category,
        gt_transform,
        central_normalized,
    })
}

/// Seed of scene `index` of `category` under a dataset seed.
pub fn scene_seed(seed: u64, category: usize, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((category as u64) << 32) ^ index as u64
}

/// A generated or loaded set of scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub res: usize,
    pub num_categories: usize,
    pub samples: Vec<SceneSample>,
    pub seeds: Vec<u64>,
}

impl Dataset {
    /// `per_category` scenes for each of the first `categories` categories,
    /// grouped by category.
    pub fn generate(categories: usize, per_category: usize, res: usize, seed: u64) -> Result<Self> {
        if categories == 0 || categories > NUM_CATEGORIES {
            return Err(Error::invalid(format!(
                "category count {categories} outside 1..={NUM_CATEGORIES}"
            )));
        }
        let mut samples = Vec::with_capacity(categories * per_category);
        let mut seeds = Vec::with_capacity(categories * per_category);
        for cat in 0..categories {
            for i in 0..per_category {
                let s = scene_seed(seed, cat, i);
                samples.push(generate_scene(cat, s, res)?);
                seeds.push(s);
            }
        }
        Ok(Dataset {
            res,
            num_categories: categories,
            samples,
            seeds,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn categories(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.category).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            res: self.res,
            num_categories: self.num_categories,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            seeds: indices.iter().map(|&i| self.seeds[i]).collect(),
        }
    }

    /// Writes one `VXSC` file per scene plus `manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut scenes = Vec::with_capacity(self.len());
        for (i, (s, &seed)) in self.samples.iter().zip(&self.seeds).enumerate() {
            let file = format!("scene_{i:05}_{}.vxsc", CATEGORY_NAMES[s.category]);
            write_scene_file(dir.join(&file), &s.to_record(self.num_categories))?;
            scenes.push(ManifestEntry {
                file,
                category: s.category,
                seed,
            });
        }
        let manifest = Manifest {
            resolution: self.res,
            categories: CATEGORY_NAMES[..self.num_categories]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            labels: LABEL_NAMES.iter().map(|s| s.to_string()).collect(),
            scenes,
        };
        write_manifest(dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = read_manifest(dir.join("manifest.json"))?;
        let mut samples = Vec::with_capacity(manifest.scenes.len());
        let mut seeds = Vec::with_capacity(manifest.scenes.len());
        for entry in &manifest.scenes {
            let rec = read_scene_file(dir.join(&entry.file))?;
            if rec.seg.res() != manifest.resolution || rec.category != entry.category {
                return Err(Error::format(
                    "manifest",
                    format!("{} disagrees with the manifest", entry.file),
                ));
            }
            samples.push(SceneSample::from_record(rec)?);
            seeds.push(entry.seed);
        }
        Ok(Dataset {
            res: manifest.resolution,
            num_categories: manifest.categories.len(),
            samples,
            seeds,
        })
    }
}

/// Object-to-scene triplet: the central object of scene `object` should be
/// closer to scene `positive` than to scene `negative`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TripletO2S {
    pub object: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Scene-to-object triplet: scene `scene` should be closer to the central
/// object of `positive` than to that of `negative`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TripletS2O {
    pub scene: usize,
    pub positive: usize,
    pub negative: usize,
}

struct ByCategory {
    groups: Vec<Vec<usize>>,
    present: Vec<usize>,
}

fn group(categories: &[usize]) -> Result<ByCategory> {
    let n = categories.iter().copied().max().map_or(0, |m| m + 1);
    let mut groups = vec![Vec::new(); n];
    for (i, &c) in categories.iter().enumerate() {
        groups[c].push(i);
    }
    let present: Vec<usize> = (0..n).filter(|&c| !groups[c].is_empty()).collect();
    if present.len() < 2 {
        return Err(Error::invalid("triplets need at least two categories"));
    }
    if let Some(&c) = present.iter().find(|&&c| groups[c].len() < 2) {
        return Err(Error::invalid(format!("category {c} has fewer than two scenes")));
    }
    Ok(ByCategory { groups, present })
}

impl ByCategory {
    /// (anchor, same-category partner, other-category item)
    fn draw(&self, anchor: usize, cat: usize, rng: &mut impl Rng) -> (usize, usize) {
        let same = &self.groups[cat];
        let pos = loop {
            let p = *same.choose(rng).expect("nonempty group");
            if p != anchor {
                break p;
            }
        };
        let others: Vec<usize> = self.present.iter().copied().filter(|&c| c != cat).collect();
        let neg_cat = *others.choose(rng).expect("two categories");
        let neg = *self.groups[neg_cat].choose(rng).expect("nonempty group");
        (pos, neg)
    }
}

fn anchors(n_items: usize, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut perm: Vec<usize> = (0..n_items).collect();
        perm.shuffle(rng);
        out.extend(perm.into_iter().take(n - out.len()));
    }
    out
}

/// `n` triplets; anchors cycle through shuffled passes over the dataset,
/// each with one positive and one negative.
pub fn sample_triplets_o2s(categories: &[usize], n: usize, rng: &mut impl Rng) -> Result<Vec<TripletO2S>> {
    let g = group(categories)?;
    Ok(anchors(categories.len(), n, rng)
        .into_iter()
        .map(|a| {
            let (positive, negative) = g.draw(a, categories[a], rng);
            TripletO2S {
                object: a,
                positive,
                negative,
            }
        })
        .collect())
}

pub fn sample_triplets_s2o(categories: &[usize], n: usize, rng: &mut impl Rng) -> Result<Vec<TripletS2O>> {
    let g = group(categories)?;
    Ok(anchors(categories.len(), n, rng)
        .into_iter()
        .map(|a| {
            let (positive, negative) = g.draw(a, categories[a], rng);
            TripletS2O {
                scene: a,
                positive,
                negative,
            }
        })
        .collect())
}

/// Stratified split. `ratio` is the training fraction; each category keeps
/// at least one scene on each side. Returns sorted index lists.
pub fn split(categories: &[usize], ratio: f64, rng: &mut impl Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio {ratio} outside (0, 1)")));
    }
    let n = categories.iter().copied().max().map_or(0, |m| m + 1);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..n {
        let mut idx: Vec<usize> = (0..categories.len()).filter(|&i| categories[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::invalid(format!("category {c} has fewer than two scenes")));
        }
        idx.shuffle(rng);
        let k = idx.len();
        let n_test = ((k as f64 * (1.0 - ratio)).round() as usize).clamp(1, k - 1);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Symmetric `M × M` matrix of how often two different labels touch
/// (26-adjacency), normalized by the largest off-diagonal count. The
/// diagonal is 1.
pub fn adjacency_frequency(scenes: &[&SegmentedScene], num_labels: usize) -> Vec<f64> {
    let m = num_labels;
    let mut counts = vec![0u64; m * m];
    for seg in scenes {
        let res = seg.res();
        let labels = seg.labels();
        for (i, li) in labels.iter().enumerate() {
            let Some(a) = *li else { continue };
            for j in neighbors(res, i) {
                if j <= i {
                    continue;
                }
                if let Some(b) = labels[j] {
                    if a != b {
                        counts[a as usize * m + b as usize] += 1;
                        counts[b as usize * m + a as usize] += 1;
                    }
                }
            }
        }
    }
    let max = (0..m * m)
        .filter(|k| k / m != k % m)
        .map(|k| counts[k])
        .max()
        .unwrap_or(0);
    (0..m * m)
        .map(|k| {
            if k / m == k % m {
                1.0
            } else if max == 0 {
                0.0
            } else {
                counts[k] as f64 / max as f64
            }
        })
        .collect()
}

//! Scene refinement: each segmented component is replaced by the library
//! part with the closest classifier feature, scaled and translated so that
//! its box relative to the central object matches the component's.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{train_classifier, ClassifierConfig, VolumeClassifier};
use crate::datagen::{generate_scene, scene_seed};
use crate::error::{Error, Result};
use crate::nn::TrainConfig;
use crate::voxel::{
    connected_components, mask_points, prune_components, voxel_coord, voxel_index, BoundingBox, Coord, ObjectGrid,
    SegmentedScene, TransformParams, NORMALIZED_EXTENT,
};

/// Separates library scene seeds from training scene seeds.
const LIBRARY_SALT: u64 = 0x5_eed0_f11b;

/// One interacting object cut out of a library scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LibraryPart {
    pub id: usize,
    pub label: u8,
    pub category: usize,
    pub res: usize,
    pub points: Vec<Coord>,
    pub bbox: BoundingBox,
    pub central_bbox: BoundingBox,
}

impl LibraryPart {
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.res.pow(3)];
        for &p in &self.points {
            m[voxel_index(self.res, p)] = true;
        }
        m
    }
}

/// Cuts every labeled component out of `categories × per_category` scenes
/// generated at twice the pipeline resolution.
pub fn build_library(categories: usize, per_category: usize, res: usize, seed: u64) -> Result<Vec<LibraryPart>> {
    let lib_res = 2 * res;
    let mut parts = Vec::new();
    for category in 0..categories {
        for i in 0..per_category {
            let sample = generate_scene(category, scene_seed(seed ^ LIBRARY_SALT, category, i), lib_res)?;
            let seg = prune_components(&sample.seg);
            let central_bbox = BoundingBox::of_mask(lib_res, &seg.scene().central_mask())?;
            for label in 0..seg.num_labels() {
                for comp in connected_components(lib_res, &seg.label_mask(label)) {
                    let points: Vec<Coord> = comp.iter().map(|&v| voxel_coord(lib_res, v)).collect();
                    parts.push(LibraryPart {
                        id: parts.len(),
                        label: label as u8,
                        category,
                        res: lib_res,
                        bbox: BoundingBox::of_points(&points)?,
                        points,
                        central_bbox,
                    });
                }
            }
        }
    }
    Ok(parts)
}

/// Shape of a voxel set at `res_out`, centered with its largest extent
/// spanning 75% of the cube (nearest-neighbour sampling).
pub fn part_grid(res_in: usize, points: &[Coord], res_out: usize) -> Result<ObjectGrid> {
    let b = BoundingBox::of_points(points)?;
    let mut mask = vec![false; res_in.pow(3)];
    for &p in points {
        mask[voxel_index(res_in, p)] = true;
    }
    let span = b.span();
    let longest = (0..3).map(|a| span[a].1 - span[a].0).fold(0.0, f64::max);
    let step = longest / (NORMALIZED_EXTENT * res_out as f64);
    let half = res_out as f64 / 2.0;
    let mut out = Vec::new();
    for x in 0..res_out {
        for y in 0..res_out {
            for z in 0..res_out {
                let c = [x, y, z];
                let src: [f64; 3] =
                    std::array::from_fn(|a| 0.5 * (span[a].0 + span[a].1) + (c[a] as f64 + 0.5 - half) * step);
                if src.iter().any(|&s| s < 0.0 || s >= res_in as f64) {
                    continue;
                }
                if mask[voxel_index(res_in, src.map(|s| s as usize))] {
                    out.push(c);
                }
            }
        }
    }
    if out.is_empty() {
        out.push([res_out / 2; 3]);
    }
    ObjectGrid::from_points(res_out, &out)
}

/// Fits a part classifier over `num_labels` interaction types.
pub fn train_part_classifier(
    parts: &[LibraryPart],
    res: usize,
    num_labels: usize,
    tc: &TrainConfig,
) -> Result<(VolumeClassifier, Vec<f64>)> {
    let grids = parts
        .iter()
        .map(|p| part_grid(p.res, &p.points, res))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ObjectGrid> = grids.iter().collect();
    let labels: Vec<usize> = parts.iter().map(|p| p.label as usize).collect();
    train_classifier(&refs, &labels, ClassifierConfig::new(res, num_labels), tc)
}

/// Classifier feature of a voxel set given at `res_in`.
pub fn feature(res_in: usize, points: &[Coord], classifier: &VolumeClassifier) -> Result<Vec<f64>> {
    classifier.feature(&part_grid(res_in, points, classifier.config.res)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub part: LibraryPart,
    pub feature: Vec<f64>,
}

/// Library parts with precomputed features; entry `i` has id `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalIndex {
    pub entries: Vec<IndexEntry>,
}

impl RetrievalIndex {
    pub fn build(parts: Vec<LibraryPart>, classifier: &VolumeClassifier) -> Result<Self> {
        let grids = parts
            .iter()
            .map(|p| part_grid(p.res, &p.points, classifier.config.res))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ObjectGrid> = grids.iter().collect();
        let feats = classifier.features(&refs)?;
        let entries = parts
            .into_iter()
            .zip(feats)
            .enumerate()
            .map(|(i, (mut part, feature))| {
                part.id = i;
                IndexEntry { part, feature }
            })
            .collect();
        let index = RetrievalIndex { entries };
        index.validate()?;
        Ok(index)
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.entries.first().map(|e| e.feature.len());
        for (i, e) in self.entries.iter().enumerate() {
            if Some(e.feature.len()) != dim {
                return Err(Error::invalid(format!("index entry {i} has a feature of a different size")));
            }
            if e.part.id != i {
                return Err(Error::invalid(format!("index entry {i} carries id {}", e.part.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let w = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let r = std::io::BufReader::new(std::fs::File::open(path)?);
        let index: RetrievalIndex = serde_json::from_reader(r)?;
        index.validate()?;
        Ok(index)
    }

    /// Entry with the smallest L2 feature distance; ties go to the lowest id.
    pub fn nearest(&self, query: &[f64]) -> Result<Replacement> {
        let mut best: Option<Replacement> = None;
        for e in &self.entries {
            if e.feature.len() != query.len() {
                return Err(Error::shape("retrieval query", format!("{} vs {}", query.len(), e.feature.len())));
            }
            let d = crate::fsim::l2(query, &e.feature);
            if best.is_none_or(|b| d < b.distance) {
                best = Some(Replacement { id: e.part.id, distance: d });
            }
        }
        best.ok_or_else(|| Error::invalid("retrieval index is empty"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Replacement {
    pub id: usize,
    pub distance: f64,
}

/// Nearest library part to a component given at `res`.
pub fn retrieve_replacement(
    res: usize,
    component: &[Coord],
    index: &RetrievalIndex,
    classifier: &VolumeClassifier,
) -> Result<Replacement> {
    if index.is_empty() {
        return Err(Error::invalid("retrieval index is empty"));
    }
    index.nearest(&feature(res, component, classifier)?)
}

/// Per-axis map from source voxel coordinates to scene voxel coordinates:
/// `x ↦ scale · x + offset`, on continuous `[lo, hi)` spans.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub scale: [f64; 3],
    pub offset: [f64; 3],
}

impl Placement {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.scale[a] * p[a] + self.offset[a])
    }

    pub fn invert(&self, q: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (q[a] - self.offset[a]) / self.scale[a])
    }
}

fn relative(span: (f64, f64), frame: (f64, f64)) -> (f64, f64) {
    let w = frame.1 - frame.0;
    ((span.0 - frame.0) / w, (span.1 - frame.0) / w)
}

/// Placement taking `object_bbox` (in its source scene, framed by
/// `central_source`) onto `component_bbox` (framed by `central_scene`).
pub fn place(
    object_bbox: &BoundingBox,
    component_bbox: &BoundingBox,
    central_scene: &BoundingBox,
    central_source: &BoundingBox,
) -> Placement {
    let (ob, cb, cs, cg) = (object_bbox.span(), component_bbox.span(), central_source.span(), central_scene.span());
    let mut scale = [0.0; 3];
    let mut offset = [0.0; 3];
    for a in 0..3 {
        let ro = relative(ob[a], cs[a]);
        let rc = relative(cb[a], cg[a]);
        // Relative frame: r' = k r + m.
        let k = (rc.1 - rc.0) / (ro.1 - ro.0);
        let m = rc.0 - k * ro.0;
        let (ws, wg) = (cs[a].1 - cs[a].0, cg[a].1 - cg[a].0);
        scale[a] = wg * k / ws;
        offset[a] = cg[a].0 + wg * (m - k * cs[a].0 / ws);
    }
    Placement { scale, offset }
}

/// Voxels at `res` covered by a placed part: inverse nearest sampling plus
/// a forward splat of every source voxel center, clipped to the cube.
pub fn render_part(part: &LibraryPart, placement: &Placement, res: usize) -> Vec<bool> {
    let src = part.mask();
    let mut out = vec![false; res.pow(3)];
    let lo = placement.apply(part.bbox.span().map(|s| s.0));
    let hi = placement.apply(part.bbox.span().map(|s| s.1));
    let range = |a: usize| {
        let a0 = lo[a].min(hi[a]).floor().max(0.0) as usize;
        let a1 = (lo[a].max(hi[a]).ceil().max(0.0) as usize).min(res);
        a0..a1
    };
    for x in range(0) {
        for y in range(1) {
            for z in range(2) {
                let s = placement.invert([x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5]);
                if s.iter().any(|&v| v < 0.0 || v >= part.res as f64) {
                    continue;
                }
                if src[voxel_index(part.res, s.map(|v| v as usize))] {
                    out[voxel_index(res, [x, y, z])] = true;
                }
            }
        }
    }
    for p in &part.points {
        let q = placement.apply(p.map(|v| v as f64 + 0.5));
        if q.iter().all(|&v| v >= 0.0 && v < res as f64) {
            out[voxel_index(res, q.map(|v| v as usize))] = true;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedPart {
    pub label: u8,
    pub component_voxels: usize,
    pub object_id: usize,
    pub distance: f64,
    pub placement: Placement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinedScene {
    pub res: usize,
    pub central: Vec<Coord>,
    pub central_transform: TransformParams,
    pub parts: Vec<PlacedPart>,
}

impl RefinedScene {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let w = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let r = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(r)?)
    }

    /// Voxelizes the refined scene; parts never overwrite the central
    /// object or earlier parts.
    pub fn render(&self, index: &RetrievalIndex) -> Result<SegmentedScene> {
        let n = self.res.pow(3);
        let mut central = vec![false; n];
        for &p in &self.central {
            central[voxel_index(self.res, p)] = true;
        }
        let mut labels: Vec<Option<u8>> = vec![None; n];
        for placed in &self.parts {
            let entry = index
                .entries
                .get(placed.object_id)
                .ok_or_else(|| Error::invalid(format!("unknown library object {}", placed.object_id)))?;
            for (v, on) in render_part(&entry.part, &placed.placement, self.res).into_iter().enumerate() {
                if on && !central[v] && labels[v].is_none() {
                    labels[v] = Some(placed.label);
                }
            }
        }
        let m = self.parts.iter().map(|p| p.label as usize + 1).max().unwrap_or(1).max(index_labels(index));
        SegmentedScene::from_label_field(self.res, &central, &labels, m)
    }
}

fn index_labels(index: &RetrievalIndex) -> usize {
    index.entries.iter().map(|e| e.part.label as usize + 1).max().unwrap_or(1)
}

/// Replaces each connected same-label component of `seg` by its nearest
/// library part.
pub fn refine_scene(seg: &SegmentedScene, index: &RetrievalIndex, classifier: &VolumeClassifier) -> Result<RefinedScene> {
    let res = seg.res();
    let central_mask = seg.scene().central_mask();
    let central_bbox = BoundingBox::of_mask(res, &central_mask)?;
    let mut parts = Vec::new();
    for label in 0..seg.num_labels() {
        for comp in connected_components(res, &seg.label_mask(label)) {
            let points: Vec<Coord> = comp.iter().map(|&v| voxel_coord(res, v)).collect();
            let hit = retrieve_replacement(res, &points, index, classifier)?;
            let part = &index.entries[hit.id].part;
            parts.push(PlacedPart {
                label: label as u8,
                component_voxels: points.len(),
                object_id: hit.id,
                distance: hit.distance,
                placement: place(&part.bbox, &BoundingBox::of_points(&points)?, &central_bbox, &part.central_bbox),
            });
        }
    }
    Ok(RefinedScene {
        res,
        central: mask_points(res, &central_mask),
        central_transform: TransformParams::IDENTITY,
        parts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(min: Coord, max: Coord) -> BoundingBox {
        BoundingBox { min, max }
    }

    #[test]
    fn matching_frames_give_identity() {
        let c = bb([4, 4, 0], [11, 11, 5]);
        let o = bb([5, 6, 6], [8, 9, 8]);
        let p = place(&o, &o, &c, &c);
        for a in 0..3 {
            assert!((p.scale[a] - 1.0).abs() < 1e-12);
            assert!(p.offset[a].abs() < 1e-12);
        }
    }

    #[test]
    fn doubled_central_box_doubles_scale() {
        let src = bb([0, 0, 0], [3, 3, 3]);
        let gen = bb([0, 0, 0], [7, 7, 7]);
        let o = bb([1, 1, 4], [2, 2, 5]);
        let comp = bb([2, 2, 8], [5, 5, 11]);
        let p = place(&o, &comp, &gen, &src);
        for a in 0..3 {
            assert!((p.scale[a] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn part_grid_is_centered() {
        let g = part_grid(8, &[[0, 0, 0], [1, 1, 1]], 8).unwrap();
        let b = g.bbox();
        assert_eq!(b.extent(), [6, 6, 6]);
        assert_eq!(b.min, [1, 1, 1]);
    }

    #[test]
    fn empty_index_is_rejected() {
        let index = RetrievalIndex { entries: vec![] };
        assert!(index.nearest(&[0.0]).is_err());
    }
}

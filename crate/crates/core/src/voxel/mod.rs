//! Voxel grids, geometry utilities and the scene file format.
//!
//! Grids are cubes of `res³` voxels addressed as `(x * res + y) * res + z`,
//! with `z` pointing up. The same order is used for the `D, H, W` axes of
//! network tensors.

mod geometry;
mod io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::resample::source_coord;
use crate::tensor::{resample_volume, Tensor};

pub use geometry::{
    chamfer, chamfer_grid, connected_components, edt_squared, prune_components, PRUNE_FRACTION,
};
pub use io::{
    read_manifest, read_scene, read_scene_file, write_manifest, write_scene, write_scene_file,
    Manifest, ManifestEntry, SceneRecord,
};

pub type Coord = [usize; 3];

/// Fraction of each axis the normalized object's largest extent occupies.
pub const NORMALIZED_EXTENT: f64 = 0.75;

#[inline]
pub fn voxel_index(res: usize, [x, y, z]: Coord) -> usize {
    (x * res + y) * res + z
}

#[inline]
pub fn voxel_coord(res: usize, i: usize) -> Coord {
    [i / (res * res), (i / res) % res, i % res]
}

/// Offsets of the 26 neighbours of a voxel.
pub fn neighbor_offsets() -> impl Iterator<Item = [isize; 3]> {
    (0..27)
        .filter(|&k| k != 13)
        .map(|k| [k / 9 - 1, (k / 3) % 3 - 1, k % 3 - 1])
}

/// In-bounds 26-neighbours of voxel `i`.
pub fn neighbors(res: usize, i: usize) -> impl Iterator<Item = usize> {
    let c = voxel_coord(res, i);
    neighbor_offsets().filter_map(move |o| {
        let mut n = [0usize; 3];
        for a in 0..3 {
            let v = c[a] as isize + o[a];
            if v < 0 || v >= res as isize {
                return None;
            }
            n[a] = v as usize;
        }
        Some(voxel_index(res, n))
    })
}

/// Binary occupancy of a single object.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ObjectGrid {
    res: usize,
    occupancy: Vec<bool>,
}

impl ObjectGrid {
    /// Fails when the grid is empty or the buffer does not hold `res³` cells.
    pub fn new(res: usize, occupancy: Vec<bool>) -> Result<Self> {
        if occupancy.len() != res.pow(3) {
            return Err(Error::shape(
                "object grid",
                format!("{} cells for resolution {res}", occupancy.len()),
            ));
        }
        if !occupancy.iter().any(|&b| b) {
            return Err(Error::invalid("object grid has no occupied voxel"));
        }
        Ok(ObjectGrid { res, occupancy })
    }

    pub fn from_points(res: usize, points: &[Coord]) -> Result<Self> {
        let mut occ = vec![false; res.pow(3)];
        for p in points {
            if p.iter().any(|&v| v >= res) {
                return Err(Error::invalid(format!("point {p:?} outside a {res}³ grid")));
            }
            occ[voxel_index(res, *p)] = true;
        }
        ObjectGrid::new(res, occ)
    }

    pub fn res(&self) -> usize {
        self.res
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupancy
    }

    pub fn get(&self, c: Coord) -> bool {
        self.occupancy[voxel_index(self.res, c)]
    }

    pub fn count(&self) -> usize {
        self.occupancy.iter().filter(|&&b| b).count()
    }

    pub fn points(&self) -> Vec<Coord> {
        mask_points(self.res, &self.occupancy)
    }

    pub fn bbox(&self) -> BoundingBox {
        BoundingBox::of_mask(self.res, &self.occupancy).expect("object grids are nonempty")
    }

    /// Occupancy as a `[1, 1, R, R, R]` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let r = self.res;
        let data = self.occupancy.iter().map(|&b| b as u8 as f32).collect();
        Tensor::new(vec![1, 1, r, r, r], data).expect("cube volume")
    }

    pub fn iou(&self, other: &ObjectGrid) -> f64 {
        iou(&self.occupancy, &other.occupancy)
    }
}

pub fn mask_points(res: usize, mask: &[bool]) -> Vec<Coord> {
    mask.iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| voxel_coord(res, i))
        .collect()
}

/// Intersection over union of two masks; two empty masks give 1.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut uni) = (0usize, 0usize);
    for (&p, &q) in a.iter().zip(b) {
        inter += (p && q) as usize;
        uni += (p || q) as usize;
    }
    if uni == 0 {
        1.0
    } else {
        inter as f64 / uni as f64
    }
}

/// Per-voxel scene state. The discriminants are the channel indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum VoxelState {
    Empty = 0,
    Central = 1,
    Interacting = 2,
}

impl VoxelState {
    pub const ALL: [VoxelState; 3] = [VoxelState::Empty, VoxelState::Central, VoxelState::Interacting];

    pub fn channel(self) -> usize {
        self as usize
    }
}

/// A central object with its interaction context.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SceneGrid {
    res: usize,
    state: Vec<VoxelState>,
}

impl SceneGrid {
    /// Fails unless the grid holds `res³` cells with at least one Central.
    pub fn new(res: usize, state: Vec<VoxelState>) -> Result<Self> {
        if state.len() != res.pow(3) {
            return Err(Error::shape(
                "scene grid",
                format!("{} cells for resolution {res}", state.len()),
            ));
        }
        if !state.contains(&VoxelState::Central) {
            return Err(Error::invalid("scene has no central voxel"));
        }
        Ok(SceneGrid { res, state })
    }

    /// Central wins where the two masks overlap.
    pub fn from_masks(res: usize, central: &[bool], interacting: &[bool]) -> Result<Self> {
        if central.len() != interacting.len() {
            return Err(Error::shape("scene grid", "mask lengths differ"));
        }
        let state = central
            .iter()
            .zip(interacting)
            .map(|(&c, &i)| match (c, i) {
                (true, _) => VoxelState::Central,
                (false, true) => VoxelState::Interacting,
                _ => VoxelState::Empty,
            })
            .collect();
        SceneGrid::new(res, state)
    }

    pub fn res(&self) -> usize {
        self.res
    }

    pub fn states(&self) -> &[VoxelState] {
        &self.state
    }

    pub fn get(&self, c: Coord) -> VoxelState {
        self.state[voxel_index(self.res, c)]
    }

    pub fn mask(&self, which: VoxelState) -> Vec<bool> {
        self.state.iter().map(|&s| s == which).collect()
    }

    pub fn central_mask(&self) -> Vec<bool> {
        self.mask(VoxelState::Central)
    }

    pub fn interacting_mask(&self) -> Vec<bool> {
        self.mask(VoxelState::Interacting)
    }

    pub fn count(&self, which: VoxelState) -> usize {
        self.state.iter().filter(|&&s| s == which).count()
    }

    /// The Central voxels as an object in scene placement.
    pub fn central_object(&self) -> ObjectGrid {
        ObjectGrid::new(self.res, self.central_mask()).expect("scenes have a central voxel")
    }

    /// All non-empty voxels.
    pub fn occupied_points(&self) -> Vec<Coord> {
        let occ: Vec<bool> = self.state.iter().map(|&s| s != VoxelState::Empty).collect();
        mask_points(self.res, &occ)
    }
}

/// One-hot `[3, R, R, R]` encoding of a scene.
pub fn to_channels(scene: &SceneGrid) -> Tensor<f32> {
    let r = scene.res;
    let n = r.pow(3);
    let mut data = vec![0.0f32; 3 * n];
    for (i, &s) in scene.state.iter().enumerate() {
        data[s.channel() * n + i] = 1.0;
    }
    Tensor::new(vec![3, r, r, r], data).expect("cube volume")
}

/// Inverse of [`to_channels`]: per-voxel argmax, ties to the lowest channel.
pub fn from_channels(channels: &Tensor<f32>) -> Result<SceneGrid> {
    let s = channels.shape();
    if s.len() != 4 || s[0] != 3 || s[1] != s[2] || s[2] != s[3] {
        return Err(Error::shape("from_channels", format!("expected [3, R, R, R], got {s:?}")));
    }
    let n = s[1].pow(3);
    let d = channels.data();
    let state = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..3 {
                if d[c * n + i] > d[best * n + i] {
                    best = c;
                }
            }
            VoxelState::ALL[best]
        })
        .collect();
    SceneGrid::new(s[1], state)
}

/// A scene whose Interacting voxels carry interaction labels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SegmentedScene {
    scene: SceneGrid,
    labels: Vec<Option<u8>>,
    num_labels: usize,
}

impl SegmentedScene {
    /// `labels` must be `Some` exactly on Interacting voxels and below
    /// `num_labels`.
    pub fn new(scene: SceneGrid, labels: Vec<Option<u8>>, num_labels: usize) -> Result<Self> {
        if labels.len() != scene.state.len() {
            return Err(Error::shape("segmented scene", "label buffer size differs from grid"));
        }
        if num_labels == 0 || num_labels > 254 {
            return Err(Error::invalid(format!("label count {num_labels} outside 1..=254")));
        }
        for (i, (&s, &l)) in scene.state.iter().zip(&labels).enumerate() {
            match (s, l) {
                (VoxelState::Interacting, Some(l)) if (l as usize) < num_labels => {}
                (VoxelState::Interacting, Some(l)) => {
                    return Err(Error::invalid(format!(
                        "label {l} at voxel {i} exceeds label count {num_labels}"
                    )))
                }
                (VoxelState::Interacting, None) => {
                    return Err(Error::invalid(format!("interacting voxel {i} has no label")))
                }
                (_, Some(_)) => {
                    return Err(Error::invalid(format!("non-interacting voxel {i} has a label")))
                }
                _ => {}
            }
        }
        Ok(SegmentedScene {
            scene,
            labels,
            num_labels,
        })
    }

    /// Builds a scene from a central mask plus a per-voxel label field.
    /// Labels on Central voxels are dropped.
    pub fn from_label_field(
        res: usize,
        central: &[bool],
        labels: &[Option<u8>],
        num_labels: usize,
    ) -> Result<Self> {
        let interacting: Vec<bool> = labels.iter().map(|l| l.is_some()).collect();
        let scene = SceneGrid::from_masks(res, central, &interacting)?;
        let labels = labels
            .iter()
            .zip(central)
            .map(|(&l, &c)| if c { None } else { l })
            .collect();
        SegmentedScene::new(scene, labels, num_labels)
    }

    pub fn scene(&self) -> &SceneGrid {
        &self.scene
    }

    pub fn labels(&self) -> &[Option<u8>] {
        &self.labels
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn res(&self) -> usize {
        self.scene.res
    }

    pub fn label_mask(&self, label: usize) -> Vec<bool> {
        self.labels.iter().map(|&l| l == Some(label as u8)).collect()
    }

    pub fn into_parts(self) -> (SceneGrid, Vec<Option<u8>>, usize) {
        (self.scene, self.labels, self.num_labels)
    }
}

/// Inclusive integer voxel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: Coord,
    pub max: Coord,
}

impl BoundingBox {
    pub fn of_points(points: &[Coord]) -> Result<Self> {
        let first = points
            .first()
            .ok_or_else(|| Error::invalid("bounding box of an empty voxel set"))?;
        let mut b = BoundingBox {
            min: *first,
            max: *first,
        };
        for p in points {
            for a in 0..3 {
                b.min[a] = b.min[a].min(p[a]);
                b.max[a] = b.max[a].max(p[a]);
            }
        }
        Ok(b)
    }

    pub fn of_mask(res: usize, mask: &[bool]) -> Result<Self> {
        BoundingBox::of_points(&mask_points(res, mask))
    }

    /// Number of voxels spanned along each axis.
    pub fn extent(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.max[a] - self.min[a] + 1)
    }

    /// Continuous `[lo, hi)` span along each axis in voxel units.
    pub fn span(&self) -> [(f64, f64); 3] {
        std::array::from_fn(|a| (self.min[a] as f64, self.max[a] as f64 + 1.0))
    }
}

/// Alias kept for symmetry with the other geometry helpers.
pub fn bbox(points: &[Coord]) -> Result<BoundingBox> {
    BoundingBox::of_points(points)
}

/// Per-axis scale and translation in normalized `[-1, 1]` coordinates.
/// Under resampling, the output at `u` reads the input at `(u - t) / s`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub s: [f32; 3],
    pub t: [f32; 3],
}

impl TransformParams {
    pub const IDENTITY: TransformParams = TransformParams {
        s: [1.0; 3],
        t: [0.0; 3],
    };

    pub fn validate(&self) -> Result<()> {
        if self.s.iter().chain(&self.t).any(|v| !v.is_finite()) {
            return Err(Error::invalid("transform has non-finite entries"));
        }
        if self.s.iter().any(|&v| v <= 0.0) {
            return Err(Error::invalid(format!("nonpositive scale {:?}", self.s)));
        }
        Ok(())
    }
}

/// Places an object grid under `tp` with trilinear sampling and keeps voxels
/// whose sampled occupancy exceeds one half.
pub fn transform_object(obj: &ObjectGrid, tp: &TransformParams) -> Result<Vec<bool>> {
    tp.validate()?;
    let r = obj.res;
    let vol: Vec<f32> = obj.occupancy.iter().map(|&b| b as u8 as f32).collect();
    Ok(resample_volume(&vol, [r; 3], tp.s, tp.t)
        .into_iter()
        .map(|v| v > 0.5)
        .collect())
}

/// Rescales an object so that its largest bounding-box extent spans 75% of
/// the cube, centered, sampling with nearest neighbours.
///
/// The returned transform maps the normalized grid back to the original
/// placement when passed to the resampler.
pub fn normalize_object(grid: &ObjectGrid) -> Result<(ObjectGrid, TransformParams)> {
    let r = grid.res;
    let rf = r as f64;
    let b = grid.bbox();
    let span = b.span();
    // Bounding box in [-1, 1] coordinates.
    let lo: [f64; 3] = std::array::from_fn(|a| 2.0 * span[a].0 / rf - 1.0);
    let hi: [f64; 3] = std::array::from_fn(|a| 2.0 * span[a].1 / rf - 1.0);
    let max_extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    let magnify = 2.0 * NORMALIZED_EXTENT / max_extent;
    let s = (1.0 / magnify) as f32;
    let t: [f32; 3] = std::array::from_fn(|a| (0.5 * (lo[a] + hi[a])) as f32);
    let tp = TransformParams { s: [s; 3], t };

    let src: [Vec<Option<usize>>; 3] = std::array::from_fn(|a| {
        (0..r)
            .map(|i| {
                // Normalized voxel i reads the original at s * u + t.
                let p = source_coord(i, r, 1.0 / s as f64, -t[a] as f64 / s as f64).round();
                (p >= 0.0 && p < rf).then_some(p as usize)
            })
            .collect()
    });
    let mut occ = vec![false; r.pow(3)];
    for x in 0..r {
        let Some(sx) = src[0][x] else { continue };
        for y in 0..r {
            let Some(sy) = src[1][y] else { continue };
            for z in 0..r {
                let Some(sz) = src[2][z] else { continue };
                occ[voxel_index(r, [x, y, z])] = grid.get([sx, sy, sz]);
            }
        }
    }
    if !occ.iter().any(|&v| v) {
        // Thin objects can fall between sampling sites; keep the center.
        let c = b.min.map(|_| r / 2);
        occ[voxel_index(r, c)] = true;
    }
    Ok((ObjectGrid::new(r, occ)?, tp))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn box_object(res: usize, lo: Coord, hi: Coord) -> ObjectGrid {
        let mut pts = Vec::new();
        for x in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for z in lo[2]..hi[2] {
                    pts.push([x, y, z]);
                }
            }
        }
        ObjectGrid::from_points(res, &pts).unwrap()
    }

    #[test]
    fn index_round_trip() {
        for i in 0..512 {
            assert_eq!(voxel_index(8, voxel_coord(8, i)), i);
        }
        assert_eq!(neighbor_offsets().count(), 26);
        assert_eq!(neighbors(4, 0).count(), 7);
    }

    #[test]
    fn channels_of_single_central_voxel() {
        let mut st = vec![VoxelState::Empty; 64];
        st[5] = VoxelState::Central;
        let scene = SceneGrid::new(4, st).unwrap();
        let ch = to_channels(&scene);
        let sums: Vec<f32> = ch.data().chunks(64).map(|c| c.iter().sum()).collect();
        assert_eq!(sums, vec![63.0, 1.0, 0.0]);
        assert_eq!(from_channels(&ch).unwrap(), scene);
    }

    #[test]
    fn scene_requires_central() {
        assert!(SceneGrid::new(2, vec![VoxelState::Empty; 8]).is_err());
        assert!(ObjectGrid::new(2, vec![false; 8]).is_err());
    }

    #[test]
    fn segmented_scene_checks_labels() {
        let mut st = vec![VoxelState::Empty; 8];
        st[0] = VoxelState::Central;
        st[1] = VoxelState::Interacting;
        let scene = SceneGrid::new(2, st).unwrap();
        let mut labels = vec![None; 8];
        assert!(SegmentedScene::new(scene.clone(), labels.clone(), 3).is_err());
        labels[1] = Some(3);
        assert!(SegmentedScene::new(scene.clone(), labels.clone(), 3).is_err());
        labels[1] = Some(2);
        assert!(SegmentedScene::new(scene.clone(), labels.clone(), 3).is_ok());
        labels[2] = Some(0);
        assert!(SegmentedScene::new(scene, labels, 3).is_err());
    }

    #[test]
    fn normalized_object_is_a_fixed_point() {
        let obj = box_object(16, [2, 2, 2], [14, 14, 14]);
        let (norm, tp) = normalize_object(&obj).unwrap();
        for a in 0..3 {
            assert!((tp.s[a] - 1.0).abs() < 1e-6);
            assert!(tp.t[a].abs() < 1e-6);
        }
        assert_eq!(norm, obj);
    }

    #[test]
    fn octant_object_is_magnified_two_fold() {
        // Bbox [1, 7)^3: extent 0.75, center -0.5 in normalized units.
        let obj = box_object(16, [1, 1, 1], [7, 7, 7]);
        let (norm, tp) = normalize_object(&obj).unwrap();
        assert_eq!(tp.s, [0.5; 3]);
        assert_eq!(tp.t, [-0.5; 3]);
        assert_eq!(norm.bbox(), BoundingBox { min: [2; 3], max: [13; 3] });
    }

    #[test]
    fn normalization_round_trip_iou() {
        let obj = box_object(16, [3, 5, 0], [9, 8, 11]);
        let (norm, tp) = normalize_object(&obj).unwrap();
        let back = transform_object(&norm, &tp).unwrap();
        assert!(iou(&back, obj.occupancy()) >= 0.9);
    }

    #[test]
    fn bbox_of_empty_set_fails() {
        assert!(bbox(&[]).is_err());
        let b = bbox(&[[1, 5, 2], [3, 0, 2]]).unwrap();
        assert_eq!(b, BoundingBox { min: [1, 0, 2], max: [3, 5, 2] });
        assert_eq!(b.extent(), [3, 6, 1]);
    }
}

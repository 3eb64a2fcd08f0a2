use funcnet::classifier::{ClassifierConfig, VolumeClassifier};
use funcnet::datagen::generate_scene;
use funcnet::nn::TrainConfig;
use funcnet::refine::*;
use funcnet::voxel::{connected_components, BoundingBox, Coord, SegmentedScene};
use proptest::prelude::*;

fn part(id: usize, label: u8, points: Vec<Coord>, res: usize) -> LibraryPart {
    LibraryPart {
        id,
        label,
        category: 0,
        res,
        bbox: BoundingBox::of_points(&points).unwrap(),
        central_bbox: BoundingBox { min: [0, 0, 0], max: [res - 1; 3] },
        points,
    }
}

fn two_entry_index() -> RetrievalIndex {
    RetrievalIndex {
        entries: vec![
            IndexEntry { part: part(0, 0, vec![[0, 0, 0]], 4), feature: vec![0.0, 0.0] },
            IndexEntry { part: part(1, 1, vec![[1, 1, 1]], 4), feature: vec![3.0, 4.0] },
        ],
    }
}

#[test]
fn two_entry_retrieval_matches_manual_distances() {
    let index = two_entry_index();
    // |(3,3)−(0,0)| = √18, |(3,3)−(3,4)| = 1.
    assert_eq!(index.nearest(&[3.0, 3.0]).unwrap(), Replacement { id: 1, distance: 1.0 });
    // Equidistant (2.5 each): the lower id wins.
    let r = index.nearest(&[1.5, 2.0]).unwrap();
    assert_eq!(r.id, 0);
    assert!((r.distance - 2.5).abs() < 1e-12);
    assert!(index.nearest(&[1.0]).is_err());
}

fn small_classifier() -> VolumeClassifier {
    VolumeClassifier::new(
        ClassifierConfig {
            channels: vec![4, 8, 8, 8],
            ..ClassifierConfig::new(16, 6)
        },
        4,
    )
    .unwrap()
}

#[test]
fn library_object_retrieves_itself() {
    let parts = build_library(6, 1, 16, 5).unwrap();
    let c = small_classifier();
    let index = RetrievalIndex::build(parts, &c).unwrap();
    for e in index.entries.iter().step_by(3) {
        let hit = retrieve_replacement(e.part.res, &e.part.points, &index, &c).unwrap();
        assert_eq!(hit.distance, 0.0);
        assert!(hit.id <= e.part.id);
        assert_eq!(index.entries[hit.id].feature, e.feature);
    }
    let empty = RetrievalIndex { entries: vec![] };
    assert!(retrieve_replacement(16, &[[1, 1, 1]], &empty, &c).is_err());
}

#[test]
fn single_label_library_is_rejected() {
    let parts = vec![part(0, 2, vec![[0, 0, 0]], 16), part(1, 2, vec![[1, 1, 1]], 16)];
    assert!(train_part_classifier(&parts, 16, 6, &TrainConfig::default()).is_err());
}

#[test]
fn index_save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("index.json");
    let index = two_entry_index();
    index.save(&p).unwrap();
    assert_eq!(RetrievalIndex::load(&p).unwrap(), index);
}

#[test]
fn refine_places_one_part_per_component() {
    let parts = build_library(6, 1, 16, 5).unwrap();
    let c = small_classifier();
    let index = RetrievalIndex::build(parts, &c).unwrap();
    for cat in 0..6 {
        let s = generate_scene(cat, 77, 16).unwrap();
        let refined = refine_scene(&s.seg, &index, &c).unwrap();
        let comps: usize = (0..6).map(|l| connected_components(16, &s.seg.label_mask(l)).len()).sum();
        assert_eq!(refined.parts.len(), comps);
        let rendered = refined.render(&index).unwrap();
        assert_eq!(rendered.scene().central_mask(), s.scene().central_mask());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("refined.json");
        refined.save(&p).unwrap();
        assert_eq!(RefinedScene::load(&p).unwrap(), refined);
    }
    // No context: only the central object survives.
    let s = generate_scene(2, 1, 16).unwrap();
    let bare = SegmentedScene::from_label_field(16, &s.scene().central_mask(), &vec![None; 4096], 6).unwrap();
    let refined = refine_scene(&bare, &index, &c).unwrap();
    assert!(refined.parts.is_empty());
    assert_eq!(refined.central.len(), s.scene().central_object().count());
}

fn boxes() -> impl Strategy<Value = (Coord, Coord)> {
    (prop::array::uniform3(0usize..10), prop::array::uniform3(1usize..6))
        .prop_map(|(lo, ext)| (lo, std::array::from_fn(|a| lo[a] + ext[a] - 1)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nearest_is_the_global_argmin(feats in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..12), q in prop::collection::vec(-3.0f64..3.0, 4)) {
        let entries = feats.iter().enumerate().map(|(i, f)| IndexEntry { part: part(i, 0, vec![[0, 0, 0]], 2), feature: f.clone() }).collect();
        let index = RetrievalIndex { entries };
        let hit = index.nearest(&q).unwrap();
        for (i, f) in feats.iter().enumerate() {
            let d = f.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(hit.distance <= d + 1e-12);
            if d < hit.distance { prop_assert!(false, "entry {} closer", i); }
        }
    }

    #[test]
    fn placement_is_frame_covariant(o in boxes(), c in boxes(), cs in boxes(), cg in boxes(), k in 1usize..4) {
        let bb = |(min, max): (Coord, Coord)| BoundingBox { min, max };
        let grow = |(min, max): (Coord, Coord)| BoundingBox { min: min.map(|v| v * k), max: max.map(|v| (v + 1) * k - 1) };
        let p = place(&bb(o), &bb(c), &bb(cg), &bb(cs));
        let q = place(&bb(o), &grow(c), &grow(cg), &bb(cs));
        for a in 0..3 {
            prop_assert!((q.scale[a] - k as f64 * p.scale[a]).abs() < 1e-9);
            prop_assert!((q.offset[a] - k as f64 * p.offset[a]).abs() < 1e-9);
        }
    }

    #[test]
    fn placed_part_bbox_matches_component(pick in 0usize..40, c in boxes(), cg in boxes()) {
        let lib = build_library(6, 1, 16, 9).unwrap();
        let p = &lib[pick % lib.len()];
        let comp = BoundingBox { min: c.0, max: c.1 };
        let placement = place(&p.bbox, &comp, &BoundingBox { min: cg.0, max: cg.1 }, &p.central_bbox);
        let mask = render_part(p, &placement, 16);
        let got = BoundingBox::of_mask(16, &mask).unwrap();
        for a in 0..3 {
            prop_assert!((got.min[a] as i64 - comp.min[a] as i64).abs() <= 1, "{:?} vs {:?}", got, comp);
            prop_assert!((got.max[a] as i64 - comp.max[a] as i64).abs() <= 1, "{:?} vs {:?}", got, comp);
        }
    }
}

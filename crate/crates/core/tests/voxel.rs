use std::collections::VecDeque;

use funcnet::voxel::{
    chamfer, connected_components, from_channels, neighbors, prune_components, read_scene,
    to_channels, voxel_index, write_scene, Coord, SceneGrid, SceneRecord, SegmentedScene,
    TransformParams, VoxelState,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_chamfer(a: &[Coord], b: &[Coord]) -> f64 {
    let d2 = |p: &Coord, q: &Coord| -> u64 {
        (0..3).map(|k| (p[k] as i64 - q[k] as i64).pow(2) as u64).sum()
    };
    let ab: u64 = a.iter().map(|p| b.iter().map(|q| d2(p, q)).min().unwrap()).sum();
    let ba: u64 = b.iter().map(|q| a.iter().map(|p| d2(p, q)).min().unwrap()).sum();
    ab as f64 / a.len() as f64 + ba as f64 / b.len() as f64
}

fn flood_fill(res: usize, mask: &[bool]) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut comps = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = vec![];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            for j in neighbors(res, i) {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, res: usize) -> Vec<Coord> {
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.gen_range(0..res)))
        .collect()
}

#[test]
fn chamfer_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let na = rng.gen_range(1..40);
        let nb = rng.gen_range(1..40);
        let a = random_points(&mut rng, na, 16);
        let b = random_points(&mut rng, nb, 16);
        assert_eq!(chamfer(&a, &b).unwrap(), brute_chamfer(&a, &b));
    }
}

#[test]
fn components_match_flood_fill() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for density in [0.05, 0.15, 0.3] {
        for _ in 0..20 {
            let mask: Vec<bool> = (0..512).map(|_| rng.gen_bool(density)).collect();
            let mut ours = connected_components(8, &mask);
            let mut oracle = flood_fill(8, &mask);
            for w in ours.windows(2) {
                assert!(w[0].len() >= w[1].len());
            }
            ours.sort();
            oracle.sort();
            assert_eq!(ours, oracle);
        }
    }
}

fn random_segmented(rng: &mut ChaCha8Rng, res: usize, m: usize) -> SegmentedScene {
    let n = res.pow(3);
    let mut central = vec![false; n];
    let mut labels = vec![None; n];
    central[rng.gen_range(0..n)] = true;
    for i in 0..n {
        if !central[i] && rng.gen_bool(0.3) {
            labels[i] = Some(rng.gen_range(0..m) as u8);
        }
    }
    SegmentedScene::from_label_field(res, &central, &labels, m).unwrap()
}

#[test]
fn channel_sums_equal_state_histogram() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let seg = random_segmented(&mut rng, 6, 3);
        let ch = to_channels(seg.scene());
        let n = 216;
        for s in VoxelState::ALL {
            let sum: f32 = ch.data()[s.channel() * n..(s.channel() + 1) * n].iter().sum();
            assert_eq!(sum as usize, seg.scene().count(s));
        }
        for i in 0..n {
            assert_eq!(ch.data()[i] + ch.data()[n + i] + ch.data()[2 * n + i], 1.0);
        }
        assert_eq!(&from_channels(&ch).unwrap(), seg.scene());
    }
}

#[test]
fn scene_file_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..5 {
        let rec = SceneRecord {
            seg: random_segmented(&mut rng, 8, 6),
            num_categories: 6,
            category: rng.gen_range(0..6),
            transform: TransformParams {
                s: [0.3, 1.0 / 3.0, 0.77],
                t: [-0.1, 0.25, f32::MIN_POSITIVE],
            },
        };
        let mut bytes = Vec::new();
        write_scene(&mut bytes, &rec).unwrap();
        assert_eq!(bytes.len(), 4 + 2 * 5 + 512 + 24);
        let back = read_scene(bytes.as_slice()).unwrap();
        assert_eq!(back, rec);
        let mut again = Vec::new();
        write_scene(&mut again, &back).unwrap();
        assert_eq!(bytes, again);
    }
}

#[test]
fn prune_keeps_largest_and_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..30 {
        let seg = random_segmented(&mut rng, 8, 3);
        let once = prune_components(&seg);
        assert_eq!(prune_components(&once), once);
        for label in 0..3 {
            let before = connected_components(8, &seg.label_mask(label));
            let after = connected_components(8, &once.label_mask(label));
            if let Some(largest) = before.first() {
                assert!(after.contains(largest));
                for c in &after {
                    assert!(10 * c.len() >= largest.len());
                }
            }
        }
        let central_before = seg.scene().central_mask();
        assert_eq!(once.scene().central_mask(), central_before);
    }
}

#[test]
fn scene_from_single_voxel() {
    let mut st = vec![VoxelState::Empty; 27];
    st[voxel_index(3, [1, 1, 1])] = VoxelState::Central;
    let s = SceneGrid::new(3, st).unwrap();
    assert_eq!(s.central_object().count(), 1);
}

proptest! {
    #[test]
    fn chamfer_is_symmetric(
        a in proptest::collection::vec((0usize..10, 0usize..10, 0usize..10), 1..20),
        b in proptest::collection::vec((0usize..10, 0usize..10, 0usize..10), 1..20),
    ) {
        let a: Vec<Coord> = a.into_iter().map(|(x, y, z)| [x, y, z]).collect();
        let b: Vec<Coord> = b.into_iter().map(|(x, y, z)| [x, y, z]).collect();
        prop_assert_eq!(chamfer(&a, &b).unwrap(), chamfer(&b, &a).unwrap());
        prop_assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
    }
}

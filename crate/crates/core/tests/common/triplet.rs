//! Triplet-loss properties on small random models.

use funcnet::datagen::generate_scene;
use funcnet::fsim::{FsimConfig, FsimModel, TrainDirection};
use funcnet::tensor::Graph;
use funcnet::voxel::{ObjectGrid, SceneGrid};

pub fn small_config() -> FsimConfig {
    FsimConfig {
        res: 8,
        embed_dim: 4,
        components: 2,
        categories: 6,
        channels: vec![4, 8],
        classifier_hidden: 8,
        ..FsimConfig::default()
    }
}

pub fn small_scenes() -> (Vec<ObjectGrid>, Vec<SceneGrid>) {
    let mut objects = Vec::new();
    let mut scenes = Vec::new();
    for cat in 0..6 {
        for i in 0..2 {
            let s = generate_scene(cat, 40 + i, 8).unwrap();
            objects.push(s.central_normalized.clone());
            scenes.push(s.scene().clone());
        }
    }
    (objects, scenes)
}

/// Loss and the largest absolute parameter gradient on a batch where every
/// negative scores at least the margin above its positive.
pub fn zero_region(seed: u64) -> (f32, f32) {
    let model = FsimModel::new(small_config(), TrainDirection::ObjectToScene, seed).unwrap();
    let (objects, scenes) = small_scenes();
    let mut trip = Vec::new();
    for i in 0..objects.len() {
        let a = &scenes[(i + 1) % scenes.len()];
        let b = &scenes[(i + 5) % scenes.len()];
        let mut g = Graph::new();
        let (_, ep, en) = model.triplet_loss_o2s(&mut g, &[&objects[i]], &[a], &[b], 1.0).unwrap();
        let (ep, en) = (g.value(ep).item(), g.value(en).item());
        if ep < en {
            trip.push((i, a, b, en - ep));
        } else if en < ep {
            trip.push((i, b, a, ep - en));
        }
    }
    let margin = trip.iter().map(|t| t.3).fold(f32::INFINITY, f32::min) as f64 * 0.5;
    assert!(margin > 0.0);
    let objs: Vec<&ObjectGrid> = trip.iter().map(|t| &objects[t.0]).collect();
    let pos: Vec<&SceneGrid> = trip.iter().map(|t| t.1).collect();
    let neg: Vec<&SceneGrid> = trip.iter().map(|t| t.2).collect();
    let mut store = model.store.clone();
    let mut g = Graph::new();
    let (loss, _, _) = model.triplet_loss_o2s(&mut g, &objs, &pos, &neg, margin).unwrap();
    let value = g.value(loss).item();
    g.backward(loss).unwrap();
    g.write_param_grads(&mut store);
    let worst = store
        .iter()
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|t| t.data().iter().map(|v| v.abs()))
        .fold(0.0f32, f32::max);
    (value, worst)
}

/// Whether exchanging positive and negative exchanges both scores bit for
/// bit, in each training direction.
pub fn branch_swap_is_exact(seed: u64) -> bool {
    let (objects, scenes) = small_scenes();
    let objs: Vec<&ObjectGrid> = objects.iter().collect();
    let pos: Vec<&SceneGrid> = scenes.iter().collect();
    let neg: Vec<&SceneGrid> = scenes.iter().rev().collect();

    let o2s = FsimModel::new(small_config(), TrainDirection::ObjectToScene, seed).unwrap();
    let mut g = Graph::new();
    let (_, ep, en) = o2s.triplet_loss_o2s(&mut g, &objs, &pos, &neg, 1.0).unwrap();
    let mut h = Graph::new();
    let (_, sp, sn) = o2s.triplet_loss_o2s(&mut h, &objs, &neg, &pos, 1.0).unwrap();
    let forward = g.value(ep).data() == h.value(sn).data() && g.value(en).data() == h.value(sp).data();

    let rotated: Vec<&ObjectGrid> = objs[1..].iter().chain(&objs[..1]).copied().collect();
    let s2o = FsimModel::new(small_config(), TrainDirection::SceneToObject, seed).unwrap();
    let mut g = Graph::new();
    let (_, ep, en) = s2o.triplet_loss_s2o(&mut g, &objs, &rotated, &pos, 1.0).unwrap();
    let mut h = Graph::new();
    let (_, sp, sn) = s2o.triplet_loss_s2o(&mut h, &rotated, &objs, &pos, 1.0).unwrap();
    let backward = g.value(ep).data() == h.value(sn).data() && g.value(en).data() == h.value(sp).data();
    forward && backward
}

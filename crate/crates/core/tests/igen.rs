use funcnet::datagen::{Dataset, SceneSample};
use funcnet::igen::*;
use funcnet::nn::TrainConfig;
use funcnet::tensor::{AdamConfig, AdamState, Graph, ParamId, Tensor};
use funcnet::voxel::{TransformParams, VoxelState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> GenConfig {
    GenConfig {
        res: 8,
        encoder_channels: vec![4, 8],
        decoder_channels: vec![8, 4],
        embed_dim: 16,
        fused_dim: 32,
        categories: 6,
        transform_hidden: 16,
        ..GenConfig::default()
    }
}

fn snapshot(model: &GenModel, ids: &[ParamId]) -> Vec<Vec<u32>> {
    ids.iter()
        .map(|&id| model.store.value(id).data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

#[test]
fn phases_freeze_the_other_head_bit_exactly() {
    let ds = Dataset::generate(6, 2, 8, 5).unwrap();
    let samples: Vec<&SceneSample> = ds.samples.iter().collect();
    let mut model = GenModel::new(small_config(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut log = GenLog::default();
    let tp = model.transformer_params();
    let dp = model.decoder_params();

    let before = snapshot(&model, &dp);
    let mut adam = AdamState::new(AdamConfig::default());
    train_phase(&mut model, &mut adam, &samples, Phase::Placement, 2, 4, &mut rng, &mut log).unwrap();
    assert_eq!(snapshot(&model, &dp), before);

    let before = snapshot(&model, &tp);
    let dec_before = snapshot(&model, &dp);
    let mut adam = AdamState::new(AdamConfig::default());
    train_phase(&mut model, &mut adam, &samples, Phase::Synthesis, 2, 4, &mut rng, &mut log).unwrap();
    assert_eq!(snapshot(&model, &tp), before);
    assert_ne!(snapshot(&model, &dp), dec_before);

    let mut adam = AdamState::new(AdamConfig::default());
    train_phase(&mut model, &mut adam, &samples, Phase::Joint, 1, 4, &mut rng, &mut log).unwrap();
    assert_ne!(snapshot(&model, &tp), before);
    assert_eq!(log.phase.len(), 5);
    assert_eq!(log.last_of(Phase::Synthesis).unwrap().0, 0.0);
    assert_eq!(log.last_of(Phase::Placement).unwrap().1, 0.0);
}

#[test]
fn identical_seeds_reproduce_losses_bit_exactly() {
    let ds = Dataset::generate(6, 2, 8, 5).unwrap();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let tc = TrainConfig { epochs: 0, batch_size: 4, lr: 1e-3, seed: 9 };
    let (m1, l1) = train_igen(&ds, &idx, small_config(), &tc, [1, 1, 1]).unwrap();
    let (m2, l2) = train_igen(&ds, &idx, small_config(), &tc, [1, 1, 1]).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&l1.placement), bits(&l2.placement));
    assert_eq!(bits(&l1.synthesis), bits(&l2.synthesis));
    let x = &ds.samples[0].central_normalized;
    assert_eq!(m1.synthesize(x, Some(0)).unwrap(), m2.synthesize(x, Some(0)).unwrap());
}

#[test]
fn placement_loss_vanishes_at_ground_truth() {
    let gt = [
        TransformParams { s: [0.5, 0.6, 0.7], t: [0.1, -0.2, 0.3] },
        TransformParams::IDENTITY,
    ];
    let mut g = Graph::<f32>::new();
    let s = g.input(Tensor::new(vec![2, 3], gt.iter().flat_map(|p| p.s).collect()).unwrap());
    let t = g.input(Tensor::new(vec![2, 3], gt.iter().flat_map(|p| p.t).collect()).unwrap());
    let l = placement_loss(&mut g, s, t, &gt).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let off = TransformParams { s: [1.0, 1.0, 1.0], t: [0.3, 0.4, 0.0] };
    assert!((placement_error(&off, &TransformParams::IDENTITY) - 0.5).abs() < 1e-6);
}

#[test]
fn synthesis_loss_ignores_central_voxels() {
    let ds = Dataset::generate(1, 2, 8, 1).unwrap();
    let scene = ds.samples[0].scene();
    let states = scene.states();
    let base: Vec<f32> = (0..512).map(|i| 0.2 + 0.6 * ((i * 7 % 11) as f32 / 11.0)).collect();
    let mut moved = base.clone();
    for (i, s) in states.iter().enumerate() {
        if *s == VoxelState::Central {
            moved[i] = 0.999;
        }
    }
    let loss = |p: Vec<f32>| {
        let mut g = Graph::<f32>::new();
        let v = g.input(Tensor::new(vec![1, 1, 8, 8, 8], p).unwrap());
        let l = synthesis_loss(&mut g, v, &[scene]).unwrap();
        g.value(l).item()
    };
    assert_eq!(loss(base), loss(moved));
}

#[test]
fn assembled_scene_keeps_object_and_thresholds_context() {
    let ds = Dataset::generate(1, 2, 8, 1).unwrap();
    let x = &ds.samples[0].central_normalized;
    let empty = assemble_scene(x, &TransformParams::IDENTITY, &vec![0.2; 512], 0.5).unwrap();
    assert_eq!(empty.central_mask(), x.occupancy());
    assert!(empty.states().iter().all(|&s| s != VoxelState::Interacting));
    let full = assemble_scene(x, &TransformParams::IDENTITY, &vec![0.8; 512], 0.5).unwrap();
    assert_eq!(full.central_mask(), x.occupancy());
    assert_eq!(full.count(VoxelState::Interacting) + x.count(), 512);
    let far = TransformParams { s: [0.1; 3], t: [5.0; 3] };
    assert!(assemble_scene(x, &far, &vec![0.0; 512], 0.5).is_err());
}

#[test]
fn label_conditioning_changes_the_output() {
    let model = GenModel::new(small_config(), 2).unwrap();
    let ds = Dataset::generate(1, 2, 8, 1).unwrap();
    let x = &ds.samples[0].central_normalized;
    let a = model.synthesize(x, Some(0)).unwrap();
    let b = model.synthesize(x, Some(3)).unwrap();
    let none = model.synthesize(x, None).unwrap();
    assert_ne!(a.context, b.context);
    assert_ne!(a.context, none.context);
    assert!(a.context.iter().all(|&p| (0.0..=1.0).contains(&p)));
    a.transform.validate().unwrap();
    assert!(model.synthesize(x, Some(6)).is_err());
}

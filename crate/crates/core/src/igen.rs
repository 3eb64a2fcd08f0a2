//! Interaction-context generation: from a normalized object and a category
//! label, synthesize the surrounding context and the transform that places
//! the object inside it.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, SceneSample};
use crate::error::{Error, Result};
use crate::fsim::object_batch;
use crate::nn::{self, ConvPyramid, ConvTranspose3d, Linear, TrainConfig, DOWN_KERNEL, DOWN_PAD, DOWN_STRIDE};
use crate::tensor::{AdamConfig, AdamState, Graph, ParamId, ParamStore, Tensor, Var};
use crate::voxel::{transform_object, ObjectGrid, SceneGrid, TransformParams, VoxelState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub res: usize,
    pub embed_dim: usize,
    pub fused_dim: usize,
    pub categories: usize,
    pub encoder_channels: Vec<usize>,
    /// Channels entering each upsampling stage; the last stage emits one.
    pub decoder_channels: Vec<usize>,
    pub transform_hidden: usize,
    pub threshold: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            res: 16,
            embed_dim: 128,
            fused_dim: 256,
            categories: 6,
            encoder_channels: vec![8, 16, 32, 64],
            decoder_channels: vec![64, 32, 16],
            transform_hidden: 64,
            threshold: 0.5,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fused_dim < self.embed_dim {
            return Err(Error::invalid("fused dimension must be at least the embedding dimension"));
        }
        if self.embed_dim == 0 || self.categories == 0 || self.decoder_channels.is_empty() {
            return Err(Error::invalid("generator dimensions must be positive"));
        }
        nn::pyramid_extent(self.res, self.encoder_channels.len())?;
        nn::pyramid_extent(self.res, self.decoder_channels.len())?;
        Ok(())
    }
}

/// One synthesized result.
#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    /// Context occupancy probabilities, `R³` in voxel order.
    pub context: Vec<f64>,
    pub transform: TransformParams,
}

#[derive(Clone, Debug)]
pub struct GenModel {
    pub config: GenConfig,
    pub store: ParamStore<f32>,
    enc: ConvPyramid,
    embed: Linear,
    fuse1: Linear,
    fuse2: Linear,
    seed_layer: Linear,
    up: Vec<ConvTranspose3d>,
    tf_hidden: Linear,
    tf_out: Linear,
}

/// Validated one-hot rows for a batch of category ids.
fn one_hot(labels: &[usize], c: usize) -> Result<Tensor<f32>> {
    let mut data = vec![0f32; labels.len() * c];
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::invalid(format!("label {l} out of range for {c} categories")));
        }
        data[i * c + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), c], data)
}

fn check_one_hot(c: &[f64]) -> Result<()> {
    let ones = c.iter().filter(|&&v| v == 1.0).count();
    let zeros = c.iter().filter(|&&v| v == 0.0).count();
    if ones != 1 || ones + zeros != c.len() {
        return Err(Error::invalid("label vector is not one-hot"));
    }
    Ok(())
}

fn row_tensor(v: &[f64]) -> Tensor<f32> {
    Tensor::new(vec![1, v.len()], v.iter().map(|&x| x as f32).collect()).expect("row shape")
}

impl GenModel {
    pub fn new(config: GenConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = ConvPyramid::new(&mut store, "embed", config.res, 1, &config.encoder_channels, &mut rng)?;
        let embed = Linear::new(&mut store, "embed.out", enc.flat_dim(), config.embed_dim, &mut rng)?;
        let fuse1 = Linear::new(&mut store, "fuse.0", config.embed_dim + config.categories, config.fused_dim, &mut rng)?;
        let fuse2 = Linear::new(&mut store, "fuse.1", config.fused_dim, config.fused_dim, &mut rng)?;
        let ext = nn::pyramid_extent(config.res, config.decoder_channels.len())?;
        let seed_layer = Linear::new(
            &mut store,
            "decode.seed",
            config.fused_dim,
            config.decoder_channels[0] * ext.pow(3),
            &mut rng,
        )?;
        let mut up = Vec::new();
        for (i, &c) in config.decoder_channels.iter().enumerate() {
            let next = config.decoder_channels.get(i + 1).copied().unwrap_or(1);
            up.push(ConvTranspose3d::new(
                &mut store,
                &format!("decode.up{i}"),
                c,
                next,
                DOWN_KERNEL,
                DOWN_STRIDE,
                DOWN_PAD,
                &mut rng,
            )?);
        }
        let tf_hidden = Linear::new(&mut store, "place.hidden", config.fused_dim, config.transform_hidden, &mut rng)?;
        let tf_out = Linear::new(&mut store, "place.out", config.transform_hidden, 6, &mut rng)?;
        Ok(GenModel {
            config,
            store,
            enc,
            embed,
            fuse1,
            fuse2,
            seed_layer,
            up,
            tf_hidden,
            tf_out,
        })
    }

    /// Parameters of the placement head.
    pub fn transformer_params(&self) -> Vec<ParamId> {
        let mut p = self.tf_hidden.params();
        p.extend(self.tf_out.params());
        p
    }

    /// Parameters of the context decoder.
    pub fn decoder_params(&self) -> Vec<ParamId> {
        let mut p = self.seed_layer.params();
        for u in &self.up {
            p.extend(u.params());
        }
        p
    }

    /// `[B, 1, R, R, R]` objects to `[B, embed_dim]`.
    pub fn embed_var(&self, g: &mut Graph<f32>, x: Var) -> Result<Var> {
        let h = self.enc.forward_flat(g, &self.store, x)?;
        self.embed.forward(g, &self.store, h)
    }

    /// Embedding and label rows to the fused feature `[B, fused_dim]`.
    pub fn fuse_var(&self, g: &mut Graph<f32>, e: Var, c: Var) -> Result<Var> {
        let z = g.concat(&[e, c], 1)?;
        let h = self.fuse1.forward(g, &self.store, z)?;
        let h = g.relu(h);
        let h = self.fuse2.forward(g, &self.store, h)?;
        Ok(g.relu(h))
    }

    /// Fused feature to context probabilities `[B, 1, R, R, R]`.
    pub fn decode_var(&self, g: &mut Graph<f32>, h: Var) -> Result<Var> {
        let b = g.shape(h)[0];
        let ext = nn::pyramid_extent(self.config.res, self.up.len())?;
        let z = self.seed_layer.forward(g, &self.store, h)?;
        let z = g.relu(z);
        let mut v = g.reshape(z, &[b, self.config.decoder_channels[0], ext, ext, ext])?;
        for (i, u) in self.up.iter().enumerate() {
            v = u.forward(g, &self.store, v)?;
            if i + 1 < self.up.len() {
                v = g.relu(v);
            }
        }
        Ok(g.sigmoid(v))
    }

    /// Fused feature to `(scale [B, 3], translation [B, 3])`.
    pub fn transform_var(&self, g: &mut Graph<f32>, h: Var) -> Result<(Var, Var)> {
        let z = self.tf_hidden.forward(g, &self.store, h)?;
        let z = g.relu(z);
        let raw = self.tf_out.forward(g, &self.store, z)?;
        let s = g.narrow(raw, 1, 0, 3)?;
        let s = g.softplus(s);
        let t = g.narrow(raw, 1, 3, 3)?;
        Ok((s, t))
    }

    fn feature_var(&self, g: &mut Graph<f32>, objects: &[&ObjectGrid], labels: Tensor<f32>) -> Result<Var> {
        let x = g.input(object_batch(objects, self.config.res)?);
        let e = self.embed_var(g, x)?;
        let c = g.input(labels);
        self.fuse_var(g, e, c)
    }

    pub fn embed_object(&self, x: &ObjectGrid) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xv = g.input(object_batch(&[x], self.config.res)?);
        let e = self.embed_var(&mut g, xv)?;
        Ok(g.value(e).data().iter().map(|&v| v as f64).collect())
    }

    /// Fails unless `c` is one-hot of length C.
    pub fn fuse(&self, e: &[f64], c: &[f64]) -> Result<Vec<f64>> {
        if e.len() != self.config.embed_dim || c.len() != self.config.categories {
            return Err(Error::shape("fuse", format!("embedding {} and label {}", e.len(), c.len())));
        }
        check_one_hot(c)?;
        let mut g = Graph::new();
        let ev = g.input(row_tensor(e));
        let cv = g.input(row_tensor(c));
        let h = self.fuse_var(&mut g, ev, cv)?;
        Ok(g.value(h).data().iter().map(|&v| v as f64).collect())
    }

    pub fn decode_context(&self, feature: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let h = g.input(row_tensor(feature));
        let p = self.decode_var(&mut g, h)?;
        Ok(g.value(p).data().iter().map(|&v| v as f64).collect())
    }

    pub fn predict_transform(&self, feature: &[f64]) -> Result<TransformParams> {
        let mut g = Graph::new();
        let h = g.input(row_tensor(feature));
        let (s, t) = self.transform_var(&mut g, h)?;
        let (s, t) = (g.value(s).data(), g.value(t).data());
        Ok(TransformParams {
            s: [s[0], s[1], s[2]],
            t: [t[0], t[1], t[2]],
        })
    }

    /// Context and placement for a batch of objects. `None` labels feed an
    /// all-zero label vector, which the trained model never saw.
    pub fn synthesize_batch(&self, objects: &[&ObjectGrid], labels: &[Option<usize>]) -> Result<Vec<Synthesis>> {
        if objects.len() != labels.len() {
            return Err(Error::shape("synthesize", "one label per object"));
        }
        let c = self.config.categories;
        let mut rows = vec![0f32; labels.len() * c];
        for (i, l) in labels.iter().enumerate() {
            if let Some(l) = *l {
                if l >= c {
                    return Err(Error::invalid(format!("label {l} out of range for {c} categories")));
                }
                rows[i * c + l] = 1.0;
            }
        }
        let mut g = Graph::new();
        let h = self.feature_var(&mut g, objects, Tensor::new(vec![labels.len(), c], rows)?)?;
        let p = self.decode_var(&mut g, h)?;
        let (s, t) = self.transform_var(&mut g, h)?;
        let n = self.config.res.pow(3);
        let (pd, sd, td) = (g.value(p).data(), g.value(s).data(), g.value(t).data());
        Ok((0..objects.len())
            .map(|i| Synthesis {
                context: pd[i * n..(i + 1) * n].iter().map(|&v| v as f64).collect(),
                transform: TransformParams {
                    s: [sd[3 * i], sd[3 * i + 1], sd[3 * i + 2]],
                    t: [td[3 * i], td[3 * i + 1], td[3 * i + 2]],
                },
            })
            .collect())
    }

    pub fn synthesize(&self, x: &ObjectGrid, label: Option<usize>) -> Result<Synthesis> {
        Ok(self.synthesize_batch(&[x], &[label])?.remove(0))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        nn::save_model(path, &self.config, &self.store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let config: GenConfig = nn::load_meta(path.as_ref())?;
        let mut m = GenModel::new(config, 0)?;
        nn::load_weights(path, &mut m.store)?;
        Ok(m)
    }
}

/// Target occupancy and loss mask for a scene: Interacting voxels are 1,
/// Empty voxels 0, Central voxels excluded.
pub fn synthesis_target(scene: &SceneGrid) -> (Vec<f32>, Vec<bool>) {
    scene
        .states()
        .iter()
        .map(|&s| match s {
            VoxelState::Interacting => (1.0, true),
            VoxelState::Empty => (0.0, true),
            VoxelState::Central => (0.0, false),
        })
        .unzip()
}

/// Masked voxel-wise binary cross-entropy of `probs: [B, 1, R, R, R]`
/// against the scenes' context.
pub fn synthesis_loss(g: &mut Graph<f32>, probs: Var, targets: &[&SceneGrid]) -> Result<Var> {
    let mut t = Vec::new();
    let mut m = Vec::new();
    for s in targets {
        let (a, b) = synthesis_target(s);
        t.extend(a);
        m.extend(b);
    }
    g.masked_bce_mean(probs, &t, &m)
}

/// Mean over the batch of `‖s − s*‖ + ‖t − t*‖`.
pub fn placement_loss(g: &mut Graph<f32>, s: Var, t: Var, gt: &[TransformParams]) -> Result<Var> {
    let b = gt.len();
    let st = Tensor::new(vec![b, 3], gt.iter().flat_map(|p| p.s).collect())?;
    let tt = Tensor::new(vec![b, 3], gt.iter().flat_map(|p| p.t).collect())?;
    let st = g.input(st);
    let tt = g.input(tt);
    let ds = g.sub(s, st)?;
    let dt = g.sub(t, tt)?;
    let ns = g.row_norm(ds)?;
    let nt = g.row_norm(dt)?;
    let sum = g.add(ns, nt)?;
    Ok(g.mean(sum))
}

/// `‖s − s*‖ + ‖t − t*‖` for one pair.
pub fn placement_error(pred: &TransformParams, gt: &TransformParams) -> f64 {
    let n = |a: [f32; 3], b: [f32; 3]| {
        (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum::<f64>().sqrt()
    };
    n(pred.s, gt.s) + n(pred.t, gt.t)
}

/// Places `x` with `tp` and adds context voxels above `threshold`.
pub fn assemble_scene(
    x: &ObjectGrid,
    tp: &TransformParams,
    context_probs: &[f64],
    threshold: f64,
) -> Result<SceneGrid> {
    let r = x.res();
    if context_probs.len() != r.pow(3) {
        return Err(Error::shape("assemble_scene", format!("{} context values for R={r}", context_probs.len())));
    }
    let central = transform_object(x, tp)?;
    if !central.iter().any(|&b| b) {
        return Err(Error::invalid("placed object has no voxel inside the scene"));
    }
    let context: Vec<bool> = context_probs.iter().map(|&p| p > threshold).collect();
    SceneGrid::from_masks(r, &central, &context)
}

/// Epoch budgets for the three phases in the ratio 1:2:1.
pub fn phase_split(total: usize) -> [usize; 3] {
    let p1 = total / 4;
    let p2 = total / 2;
    [p1, p2, total - p1 - p2]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Placement,
    Synthesis,
    Joint,
}

/// Per-epoch mean losses, tagged by phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenLog {
    pub phase: Vec<Phase>,
    pub placement: Vec<f64>,
    pub synthesis: Vec<f64>,
}

impl GenLog {
    /// Last recorded epoch of `phase`, as (placement, synthesis).
    pub fn last_of(&self, phase: Phase) -> Option<(f64, f64)> {
        (0..self.phase.len())
            .rev()
            .find(|&i| self.phase[i] == phase)
            .map(|i| (self.placement[i], self.synthesis[i]))
    }
}

/// Runs one phase over `samples`; returns the per-epoch means.
pub fn train_phase(
    model: &mut GenModel,
    adam: &mut AdamState<f32>,
    samples: &[&SceneSample],
    phase: Phase,
    epochs: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    log: &mut GenLog,
) -> Result<()> {
    model.store.set_all_trainable(true);
    match phase {
        Phase::Placement => {
            let p = model.decoder_params();
            model.store.set_trainable(&p, false);
        }
        Phase::Synthesis => {
            let p = model.transformer_params();
            model.store.set_trainable(&p, false);
        }
        Phase::Joint => {}
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(rng);
        let (mut ps, mut ss) = (0.0, 0.0);
        for batch in order.chunks(batch_size) {
            let objs: Vec<&ObjectGrid> = batch.iter().map(|&i| &samples[i].central_normalized).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| samples[i].category).collect();
            let mut g = Graph::new();
            let h = model.feature_var(&mut g, &objs, one_hot(&labels, model.config.categories)?)?;
            let mut terms = Vec::new();
            if phase != Phase::Synthesis {
                let (s, t) = model.transform_var(&mut g, h)?;
                let gt: Vec<TransformParams> = batch.iter().map(|&i| samples[i].gt_transform).collect();
                let l = placement_loss(&mut g, s, t, &gt)?;
                ps += g.value(l).item() as f64 * batch.len() as f64;
                terms.push(l);
            }
            if phase != Phase::Placement {
                let p = model.decode_var(&mut g, h)?;
                let scenes: Vec<&SceneGrid> = batch.iter().map(|&i| samples[i].scene()).collect();
                let l = synthesis_loss(&mut g, p, &scenes)?;
                ss += g.value(l).item() as f64 * batch.len() as f64;
                terms.push(l);
            }
            let loss = if terms.len() == 2 { g.add(terms[0], terms[1])? } else { terms[0] };
            let v = g.value(loss).item();
            if !v.is_finite() {
                return Err(Error::Divergence(format!("{phase:?} loss became {v} in epoch {}", epoch + 1)));
            }
            g.backward(loss)?;
            g.write_param_grads(&mut model.store);
            adam.step(&mut model.store)?;
        }
        let n = samples.len() as f64;
        log.phase.push(phase);
        log.placement.push(ps / n);
        log.synthesis.push(ss / n);
        log::info!("igen {phase:?} epoch {}: placement {:.5}, synthesis {:.5}", epoch + 1, ps / n, ss / n);
    }
    model.store.set_all_trainable(true);
    Ok(())
}

/// Placement alone, then synthesis with the placement head frozen, then
/// both jointly. `phases` gives each phase's epoch budget.
pub fn train_igen(
    dataset: &Dataset,
    train: &[usize],
    config: GenConfig,
    tc: &TrainConfig,
    phases: [usize; 3],
) -> Result<(GenModel, GenLog)> {
    tc.validate()?;
    if dataset.res != config.res {
        return Err(Error::invalid(format!("dataset resolution {} vs model {}", dataset.res, config.res)));
    }
    let samples: Vec<&SceneSample> = train.iter().map(|&i| &dataset.samples[i]).collect();
    if samples.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let mut model = GenModel::new(config, tc.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(1));
    let mut log = GenLog::default();
    for (phase, epochs) in [Phase::Placement, Phase::Synthesis, Phase::Joint].into_iter().zip(phases) {
        // Fresh moments per phase: the frozen set changes between phases.
        let mut adam = AdamState::new(AdamConfig {
            lr: tc.lr,
            ..AdamConfig::default()
        });
        train_phase(&mut model, &mut adam, &samples, phase, epochs, tc.batch_size, &mut rng, &mut log)?;
    }
    Ok((model, log))
}

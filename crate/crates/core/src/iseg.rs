//! Interaction-type segmentation of context voxels.
//!
//! An encoder/decoder with skip connections predicts a label distribution
//! per voxel from the context mask and the category label. Hard labels come
//! from an argmax, optionally smoothed by alpha-expansion over the
//! 26-connected context voxels, and finally pruned of small fragments.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, SceneSample};
use crate::error::{Error, Result};
use crate::graphcut::{alpha_expansion, energy, EnergyModel, GridGraph};
use crate::nn::{self, ConvPyramid, ConvTranspose3d, Linear, TrainConfig, DOWN_KERNEL, DOWN_PAD, DOWN_STRIDE};
use crate::tensor::{AdamConfig, AdamState, Graph, ParamStore, Tensor, Var};
use crate::voxel::{prune_components, SceneGrid, SegmentedScene};

const INFER_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegConfig {
    pub res: usize,
    pub labels: usize,
    pub categories: usize,
    pub channels: Vec<usize>,
    pub bottleneck: usize,
    pub label_dim: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            res: 16,
            labels: 6,
            categories: 6,
            channels: vec![8, 16, 32, 64],
            bottleneck: 128,
            label_dim: 32,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.labels < 2 {
            return Err(Error::invalid("segmentation needs at least two labels"));
        }
        if self.categories == 0 || self.bottleneck == 0 || self.label_dim == 0 {
            return Err(Error::invalid("segmentation dimensions must be positive"));
        }
        nn::pyramid_extent(self.res, self.channels.len())?;
        Ok(())
    }
}

/// Per-voxel label distributions, stored label-major (`[M, R³]`).
#[derive(Clone, Debug, PartialEq)]
pub struct SegProbs {
    pub res: usize,
    pub labels: usize,
    pub data: Vec<f64>,
}

impl SegProbs {
    pub fn new(res: usize, labels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != labels * res.pow(3) {
            return Err(Error::shape("label probabilities", format!("{} values for M={labels}, R={res}", data.len())));
        }
        Ok(SegProbs { res, labels, data })
    }

    pub fn get(&self, label: usize, voxel: usize) -> f64 {
        self.data[label * self.res.pow(3) + voxel]
    }

    /// Distribution at one voxel.
    pub fn at(&self, voxel: usize) -> Vec<f64> {
        (0..self.labels).map(|l| self.get(l, voxel)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct SegModel {
    pub config: SegConfig,
    pub store: ParamStore<f32>,
    enc: ConvPyramid,
    bottleneck: Linear,
    label_fc: Linear,
    join: Linear,
    up: Vec<ConvTranspose3d>,
}

impl SegModel {
    pub fn new(config: SegConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ch = &config.channels;
        let enc = ConvPyramid::new(&mut store, "enc", config.res, 1, ch, &mut rng)?;
        let bottleneck = Linear::new(&mut store, "enc.out", enc.flat_dim(), config.bottleneck, &mut rng)?;
        let label_fc = Linear::new(&mut store, "label", config.categories, config.label_dim, &mut rng)?;
        let join = Linear::new(
            &mut store,
            "join",
            config.bottleneck + config.label_dim,
            enc.flat_dim(),
            &mut rng,
        )?;
        // Decoder stage i upsamples [its input ‖ encoder stage i] by two.
        let mut up = Vec::with_capacity(ch.len());
        for i in (0..ch.len()).rev() {
            let out = if i == 0 { config.labels } else { ch[i - 1] };
            up.push(ConvTranspose3d::new(
                &mut store,
                &format!("dec.up{i}"),
                2 * ch[i],
                out,
                DOWN_KERNEL,
                DOWN_STRIDE,
                DOWN_PAD,
                &mut rng,
            )?);
        }
        Ok(SegModel {
            config,
            store,
            enc,
            bottleneck,
            label_fc,
            join,
            up,
        })
    }

    /// Logits `[B, M, R, R, R]` for masks `[B, 1, R, R, R]` and one-hot
    /// labels `[B, C]`.
    pub fn logits(&self, g: &mut Graph<f32>, x: Var, c: Var) -> Result<Var> {
        let skips = self.enc.forward_stages(g, &self.store, x)?;
        let last = *skips.last().expect("nonempty pyramid");
        let b = g.shape(last)[0];
        let flat = g.reshape(last, &[b, self.enc.flat_dim()])?;
        let z = self.bottleneck.forward(g, &self.store, flat)?;
        let z = g.relu(z);
        let l = self.label_fc.forward(g, &self.store, c)?;
        let l = g.relu(l);
        let zl = g.concat(&[z, l], 1)?;
        let h = self.join.forward(g, &self.store, zl)?;
        let h = g.relu(h);
        let mut v = g.reshape(h, g.shape(last).to_vec().as_slice())?;
        let n = self.up.len();
        for (k, u) in self.up.iter().enumerate() {
            let skip = skips[n - 1 - k];
            let cat = g.concat(&[v, skip], 1)?;
            v = u.forward(g, &self.store, cat)?;
            if k + 1 < n {
                v = g.relu(v);
            }
        }
        Ok(v)
    }

    fn inputs(&self, g: &mut Graph<f32>, masks: &[&[bool]], categories: &[usize]) -> Result<(Var, Var)> {
        let r = self.config.res;
        let c = self.config.categories;
        let mut xd = Vec::with_capacity(masks.len() * r.pow(3));
        for m in masks {
            if m.len() != r.pow(3) {
                return Err(Error::shape("segmentation input", format!("{} voxels for R={r}", m.len())));
            }
            xd.extend(m.iter().map(|&b| b as u8 as f32));
        }
        let mut cd = vec![0f32; categories.len() * c];
        for (i, &k) in categories.iter().enumerate() {
            if k >= c {
                return Err(Error::invalid(format!("category {k} out of range for {c}")));
            }
            cd[i * c + k] = 1.0;
        }
        let x = g.input(Tensor::new(vec![masks.len(), 1, r, r, r], xd)?);
        let cv = g.input(Tensor::new(vec![categories.len(), c], cd)?);
        Ok((x, cv))
    }

    /// Label distributions for a batch of context masks.
    pub fn segment_probs_batch(&self, masks: &[&[bool]], categories: &[usize]) -> Result<Vec<SegProbs>> {
        if masks.len() != categories.len() {
            return Err(Error::shape("segment_probs", "one category per mask"));
        }
        if masks.iter().any(|m| !m.iter().any(|&b| b)) {
            return Err(Error::invalid("segmentation input has no context voxel"));
        }
        let per = self.config.labels * self.config.res.pow(3);
        let mut out = Vec::with_capacity(masks.len());
        for (mc, cc) in masks.chunks(INFER_BATCH).zip(categories.chunks(INFER_BATCH)) {
            let mut g = Graph::new();
            let (x, c) = self.inputs(&mut g, mc, cc)?;
            let l = self.logits(&mut g, x, c)?;
            let p = g.softmax(l, 1)?;
            for item in g.value(p).data().chunks(per) {
                out.push(SegProbs::new(
                    self.config.res,
                    self.config.labels,
                    item.iter().map(|&v| v as f64).collect(),
                )?);
            }
        }
        Ok(out)
    }

    pub fn segment_probs(&self, mask: &[bool], category: usize) -> Result<SegProbs> {
        Ok(self.segment_probs_batch(&[mask], &[category])?.remove(0))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        nn::save_model(path, &self.config, &self.store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let config: SegConfig = nn::load_meta(path.as_ref())?;
        let mut m = SegModel::new(config, 0)?;
        nn::load_weights(path, &mut m.store)?;
        Ok(m)
    }
}

/// Mean cross-entropy of `logits` over the scenes' Interacting voxels.
pub fn seg_loss(g: &mut Graph<f32>, logits: Var, targets: &[&SegmentedScene]) -> Result<Var> {
    let mut labels = Vec::new();
    let mut mask = Vec::new();
    for t in targets {
        for l in t.labels() {
            labels.push(l.unwrap_or(0) as usize);
            mask.push(l.is_some());
        }
    }
    g.categorical_ce_mean(logits, &labels, &mask)
}

/// Argmax label of one distribution; ties go to the lowest label.
pub fn argmax_label(p: &[f64]) -> usize {
    crate::classifier::argmax(p)
}

/// Argmax labels on `mask` voxels.
pub fn hard_max(probs: &SegProbs, mask: &[bool]) -> Vec<Option<u8>> {
    mask.iter()
        .enumerate()
        .map(|(v, &m)| m.then(|| argmax_label(&probs.at(v)) as u8))
        .collect()
}

/// Checks an `M × M` label-adjacency matrix: symmetric with entries in
/// `[0, 1]`.
pub fn validate_adjacency(f: &[f64], m: usize) -> Result<()> {
    if f.len() != m * m {
        return Err(Error::shape("adjacency", format!("{} entries for {m} labels", f.len())));
    }
    for i in 0..m {
        for j in 0..m {
            let v = f[i * m + j];
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("adjacency entry ({i}, {j}) = {v} outside [0, 1]")));
            }
            if v != f[j * m + i] {
                return Err(Error::invalid(format!("adjacency is asymmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// Energy over the context voxels: data cost `1 − p_l`, pairwise cost
/// `1 − f_ij` between different labels. Returns the graph, the model and
/// the voxel index of each node.
pub fn label_energy(probs: &SegProbs, mask: &[bool], f: &[f64]) -> Result<(GridGraph, EnergyModel, Vec<usize>)> {
    let m = probs.labels;
    validate_adjacency(f, m)?;
    if mask.len() != probs.res.pow(3) {
        return Err(Error::shape("label energy", "mask and probabilities differ in size"));
    }
    let (graph, nodes) = GridGraph::from_mask(probs.res, mask);
    let mut data = Vec::with_capacity(nodes.len() * m);
    for &v in &nodes {
        for l in 0..m {
            data.push((1.0 - probs.get(l, v)).max(0.0));
        }
    }
    let pairwise = (0..m * m)
        .map(|k| if k / m == k % m { 0.0 } else { 1.0 - f[k] })
        .collect();
    let model = EnergyModel::new(m, data, pairwise)?;
    Ok((graph, model, nodes))
}

/// Alpha-expansion labels on `mask` voxels, started from the hard max.
pub fn smooth_labels(probs: &SegProbs, mask: &[bool], f: &[f64]) -> Result<Vec<Option<u8>>> {
    let (graph, model, nodes) = label_energy(probs, mask, f)?;
    let init: Vec<usize> = nodes.iter().map(|&v| argmax_label(&probs.at(v))).collect();
    let labels = alpha_expansion(&graph, &model, &init)?;
    debug_assert!(energy(&graph, &model, &labels) <= energy(&graph, &model, &init) + 1e-9);
    let mut out = vec![None; mask.len()];
    for (&v, &l) in nodes.iter().zip(&labels) {
        out[v] = Some(l as u8);
    }
    Ok(out)
}

/// Labels, prunes and recombines with the scene's Central voxels, repeating
/// on the surviving voxels until pruning removes nothing.
pub fn finish_segmentation(scene: &SceneGrid, probs: &SegProbs, f: &[f64], smooth: bool) -> Result<SegmentedScene> {
    let central = scene.central_mask();
    let mut mask = scene.interacting_mask();
    loop {
        let labels = if smooth {
            smooth_labels(probs, &mask, f)?
        } else {
            hard_max(probs, &mask)
        };
        let seg = prune_components(&SegmentedScene::from_label_field(scene.res(), &central, &labels, probs.labels)?);
        let kept = seg.scene().interacting_mask();
        if kept == mask || !kept.iter().any(|&b| b) {
            return Ok(seg);
        }
        mask = kept;
    }
}

/// Full pipeline: probabilities, graph-cut smoothing, pruning.
pub fn segment_scene(scene: &SceneGrid, category: usize, model: &SegModel, f: &[f64]) -> Result<SegmentedScene> {
    let probs = model.segment_probs(&scene.interacting_mask(), category)?;
    finish_segmentation(scene, &probs, f, true)
}

/// Fraction of ground-truth Interacting voxels labeled correctly; voxels
/// missing from `pred` count as wrong. A scene without context scores 1.
pub fn seg_accuracy(pred: &SegmentedScene, gt: &SegmentedScene) -> Result<f64> {
    if pred.res() != gt.res() {
        return Err(Error::shape("seg_accuracy", "resolutions differ"));
    }
    let (mut total, mut right) = (0usize, 0usize);
    for (p, g) in pred.labels().iter().zip(gt.labels()) {
        if let Some(g) = g {
            total += 1;
            right += (*p == Some(*g)) as usize;
        }
    }
    Ok(if total == 0 { 1.0 } else { right as f64 / total as f64 })
}

/// Trains on the scenes `train` of `dataset`; returns per-epoch mean loss.
pub fn train_iseg(dataset: &Dataset, train: &[usize], config: SegConfig, tc: &TrainConfig) -> Result<(SegModel, Vec<f64>)> {
    tc.validate()?;
    if dataset.res != config.res {
        return Err(Error::invalid(format!("dataset resolution {} vs model {}", dataset.res, config.res)));
    }
    let samples: Vec<&SceneSample> = train.iter().map(|&i| &dataset.samples[i]).collect();
    if samples.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let masks: Vec<Vec<bool>> = samples.iter().map(|s| s.scene().interacting_mask()).collect();
    let mut model = SegModel::new(config, tc.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(1));
    let mut adam = AdamState::new(AdamConfig {
        lr: tc.lr,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let bm: Vec<&[bool]> = batch.iter().map(|&i| masks[i].as_slice()).collect();
            let bc: Vec<usize> = batch.iter().map(|&i| samples[i].category).collect();
            let bt: Vec<&SegmentedScene> = batch.iter().map(|&i| &samples[i].seg).collect();
            let mut g = Graph::new();
            let (x, c) = model.inputs(&mut g, &bm, &bc)?;
            let logits = model.logits(&mut g, x, c)?;
            let loss = seg_loss(&mut g, logits, &bt)?;
            let v = g.value(loss).item() as f64;
            if !v.is_finite() {
                return Err(Error::Divergence(format!("segmentation loss became {v} in epoch {}", epoch + 1)));
            }
            sum += v * batch.len() as f64;
            g.backward(loss)?;
            g.write_param_grads(&mut model.store);
            adam.step(&mut model.store)?;
        }
        let mean = sum / samples.len() as f64;
        log::info!("iseg epoch {}: loss {mean:.5}", epoch + 1);
        losses.push(mean);
    }
    Ok((model, losses))
}

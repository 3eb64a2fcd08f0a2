//! Standalone occupancy-grid classifier: a convolutional pyramid followed by
//! a hidden fully connected layer and a softmax.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsim::object_batch;
use crate::nn::{self, ConvPyramid, Mlp, TrainConfig};
use crate::tensor::{AdamConfig, AdamState, Graph, ParamStore, Var};
use crate::voxel::ObjectGrid;

const INFER_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub res: usize,
    pub channels: Vec<usize>,
    pub hidden: usize,
    pub classes: usize,
}

impl ClassifierConfig {
    pub fn new(res: usize, classes: usize) -> Self {
        ClassifierConfig {
            res,
            channels: vec![8, 16, 32, 64],
            hidden: 64,
            classes,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VolumeClassifier {
    pub config: ClassifierConfig,
    pub store: ParamStore<f32>,
    enc: ConvPyramid,
    head: Mlp,
}

impl VolumeClassifier {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        if config.classes < 2 {
            return Err(Error::invalid("a classifier needs at least two classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = ConvPyramid::new(&mut store, "enc", config.res, 1, &config.channels, &mut rng)?;
        let head = Mlp::new(&mut store, "head", enc.flat_dim(), config.hidden, config.classes, &mut rng)?;
        Ok(VolumeClassifier {
            config,
            store,
            enc,
            head,
        })
    }

    /// `(hidden features [B, hidden], logits [B, classes])`.
    pub fn forward(&self, g: &mut Graph<f32>, x: Var) -> Result<(Var, Var)> {
        let h = self.enc.forward_flat(g, &self.store, x)?;
        self.head.forward(g, &self.store, h)
    }

    fn run(&self, objects: &[&ObjectGrid], features: bool) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(objects.len());
        for chunk in objects.chunks(INFER_BATCH) {
            let mut g = Graph::new();
            let x = g.input(object_batch(chunk, self.config.res)?);
            let (h, l) = self.forward(&mut g, x)?;
            let v = if features { h } else { g.softmax(l, 1)? };
            let t = g.value(v);
            let cols = t.shape()[1];
            out.extend(t.data().chunks(cols).map(|r| r.iter().map(|&v| v as f64).collect()));
        }
        Ok(out)
    }

    pub fn probabilities(&self, objects: &[&ObjectGrid]) -> Result<Vec<Vec<f64>>> {
        self.run(objects, false)
    }

    /// Penultimate-layer activations.
    pub fn features(&self, objects: &[&ObjectGrid]) -> Result<Vec<Vec<f64>>> {
        self.run(objects, true)
    }

    pub fn feature(&self, object: &ObjectGrid) -> Result<Vec<f64>> {
        Ok(self.features(&[object])?.remove(0))
    }

    pub fn predict(&self, objects: &[&ObjectGrid]) -> Result<Vec<usize>> {
        Ok(self.probabilities(objects)?.iter().map(|p| argmax(p)).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        nn::save_model(path, &self.config, &self.store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let config: ClassifierConfig = nn::load_meta(path.as_ref())?;
        let mut m = VolumeClassifier::new(config, 0)?;
        nn::load_weights(path, &mut m.store)?;
        Ok(m)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fits a classifier with mean cross-entropy; returns per-epoch losses.
pub fn train_classifier(
    objects: &[&ObjectGrid],
    labels: &[usize],
    config: ClassifierConfig,
    tc: &TrainConfig,
) -> Result<(VolumeClassifier, Vec<f64>)> {
    tc.validate()?;
    if objects.len() != labels.len() || objects.is_empty() {
        return Err(Error::invalid("classifier training needs one label per object"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= config.classes) {
        return Err(Error::invalid(format!("label {l} out of range for {} classes", config.classes)));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::invalid("classifier training set has a single label"));
    }
    let mut model = VolumeClassifier::new(config, tc.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(1));
    let mut adam = AdamState::new(AdamConfig {
        lr: tc.lr,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..objects.len()).collect();
    let mut losses = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let objs: Vec<&ObjectGrid> = batch.iter().map(|&i| objects[i]).collect();
            let lab: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let x = g.input(object_batch(&objs, model.config.res)?);
            let (_, logits) = model.forward(&mut g, x)?;
            let loss = g.categorical_ce_mean(logits, &lab, &vec![true; lab.len()])?;
            let v = g.value(loss).item() as f64;
            if !v.is_finite() {
                return Err(Error::Divergence(format!("classifier loss became {v} in epoch {}", epoch + 1)));
            }
            sum += v * batch.len() as f64;
            g.backward(loss)?;
            g.write_param_grads(&mut model.store);
            adam.step(&mut model.store)?;
        }
        let mean = sum / objects.len() as f64;
        log::info!("classifier epoch {}: loss {mean:.5}", epoch + 1);
        losses.push(mean);
    }
    Ok((model, losses))
}

//! Cross-domain functional similarity network.
//!
//! Scenes map to points in a latent space; objects map to Gaussian mixtures
//! over that space. The dissimilarity of an object and a scene is the
//! negative log-density of the scene's embedding under the object's mixture.

use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{sample_triplets_o2s, sample_triplets_s2o, Dataset};
use crate::error::{Error, Result};
use crate::nn::{self, hinge_mean, ConvPyramid, Linear, Mlp, TrainConfig};
use crate::tensor::{AdamConfig, AdamState, Graph, ParamStore, Tensor, Var};
use crate::voxel::{to_channels, ObjectGrid, SceneGrid};

const INFER_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FsimConfig {
    pub res: usize,
    pub embed_dim: usize,
    pub components: usize,
    pub margin: f64,
    pub categories: usize,
    pub channels: Vec<usize>,
    /// Lower bound added to every predicted standard deviation.
    pub sigma_floor: f64,
    pub classifier_hidden: usize,
}

impl Default for FsimConfig {
    fn default() -> Self {
        FsimConfig {
            res: 16,
            embed_dim: 64,
            components: 4,
            margin: 1.0,
            categories: 6,
            channels: vec![8, 16, 32, 64],
            sigma_floor: 1e-2,
            classifier_hidden: 64,
        }
    }
}

impl FsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(Error::invalid("embedding dimension must be at least 2"));
        }
        if self.components == 0 {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        if !(self.margin > 0.0) {
            return Err(Error::invalid(format!("margin {} must be positive", self.margin)));
        }
        if self.categories == 0 {
            return Err(Error::invalid("category count must be positive"));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::invalid("sigma floor must be positive"));
        }
        nn::pyramid_extent(self.res, self.channels.len())?;
        Ok(())
    }

    fn gmm_width(&self) -> usize {
        self.components * (1 + 2 * self.embed_dim)
    }
}

/// Which triplets a model was trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainDirection {
    #[serde(rename = "o2s")]
    ObjectToScene,
    #[serde(rename = "s2o")]
    SceneToObject,
}

impl std::str::FromStr for TrainDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "o2s" => Ok(TrainDirection::ObjectToScene),
            "s2o" => Ok(TrainDirection::SceneToObject),
            _ => Err(Error::invalid(format!("unknown direction {s:?} (expected o2s or s2o)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RetrievalDirection {
    ObjectToScene,
    SceneToObject,
    SceneToScene,
}

impl std::str::FromStr for RetrievalDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "o2s" => Ok(RetrievalDirection::ObjectToScene),
            "s2o" => Ok(RetrievalDirection::SceneToObject),
            "s2s" => Ok(RetrievalDirection::SceneToScene),
            _ => Err(Error::invalid(format!("unknown direction {s:?} (expected o2s, s2o or s2s)"))),
        }
    }
}

/// Diagonal Gaussian mixture over the latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub sigmas: Vec<Vec<f64>>,
}

/// `-log Σ_k w_k N(f | μ_k, diag σ_k²)`, evaluated with log-sum-exp.
pub fn expectation(g: &GmmParams, f: &[f64]) -> Result<f64> {
    let n = g.weights.len();
    if n == 0 || g.means.len() != n || g.sigmas.len() != n {
        return Err(Error::shape("expectation", format!("{n} weights with {} means", g.means.len())));
    }
    let half_log_2pi = 0.5 * (2.0 * PI).ln();
    let mut terms = Vec::with_capacity(n);
    for k in 0..n {
        let (mu, sigma) = (&g.means[k], &g.sigmas[k]);
        if mu.len() != f.len() || sigma.len() != f.len() {
            return Err(Error::shape(
                "expectation",
                format!("point of dimension {} vs component {k} of {}", f.len(), mu.len()),
            ));
        }
        let mut t = g.weights[k].ln();
        for j in 0..f.len() {
            if !(sigma[j] > 0.0) {
                return Err(Error::invalid("expectation: standard deviations must be positive"));
            }
            let z = (f[j] - mu[j]) / sigma[j];
            t += -sigma[j].ln() - half_log_2pi - 0.5 * z * z;
        }
        terms.push(t);
    }
    let mx = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return Ok(f64::INFINITY);
    }
    Ok(-(mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln()))
}

/// `max(0, m + e_pos − e_neg)`.
pub fn triplet_hinge(e_pos: f64, e_neg: f64, margin: f64) -> f64 {
    (margin + e_pos - e_neg).max(0.0)
}

/// Mixture parameters of a batch, on the tape.
#[derive(Clone, Copy, Debug)]
pub struct GmmVars {
    pub logw: Var,
    pub mu: Var,
    pub sigma: Var,
}

/// One ranked retrieval result.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub score: f64,
}

/// Ascending by score, ties by index; at most `k` entries.
pub fn rank(scores: &[f64], k: usize) -> Vec<Hit> {
    let mut hits: Vec<Hit> = scores
        .iter()
        .enumerate()
        .map(|(index, &score)| Hit { index, score })
        .collect();
    hits.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.index.cmp(&b.index)));
    hits.truncate(k);
    hits
}

#[derive(Clone, Copy, Debug)]
pub enum Query<'a> {
    Object(&'a ObjectGrid),
    Scene(&'a SceneGrid),
}

#[derive(Clone, Copy, Debug)]
pub enum Corpus<'a> {
    Objects(&'a [ObjectGrid]),
    Scenes(&'a [SceneGrid]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FsimMeta {
    pub config: FsimConfig,
    pub direction: TrainDirection,
}

/// Scene encoder, object encoder with mixture head, and classifier heads.
#[derive(Clone, Debug)]
pub struct FsimModel {
    pub config: FsimConfig,
    pub direction: TrainDirection,
    pub store: ParamStore<f32>,
    scene_enc: ConvPyramid,
    scene_out: Linear,
    obj_enc: ConvPyramid,
    obj_out: Linear,
    scene_head: Mlp,
    obj_head: Mlp,
}

pub(crate) fn scene_batch(scenes: &[&SceneGrid], res: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(scenes.len() * 3 * res.pow(3));
    for s in scenes {
        if s.res() != res {
            return Err(Error::shape("scene input", format!("resolution {} vs model {res}", s.res())));
        }
        data.extend_from_slice(to_channels(s).data());
    }
    Tensor::new(vec![scenes.len(), 3, res, res, res], data)
}

pub(crate) fn object_batch(objects: &[&ObjectGrid], res: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(objects.len() * res.pow(3));
    for o in objects {
        if o.res() != res {
            return Err(Error::shape("object input", format!("resolution {} vs model {res}", o.res())));
        }
        data.extend(o.occupancy().iter().map(|&b| b as u8 as f32));
    }
    Tensor::new(vec![objects.len(), 1, res, res, res], data)
}

fn softmax_rows(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    let cols = t.shape()[1];
    t.data()
        .chunks(cols)
        .map(|row| {
            let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let e: Vec<f64> = row.iter().map(|&v| (v as f64 - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

impl FsimModel {
    pub fn new(config: FsimConfig, direction: TrainDirection, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let scene_enc = ConvPyramid::new(&mut store, "scene", config.res, 3, &config.channels, &mut rng)?;
        let scene_out = Linear::new(&mut store, "scene.embed", scene_enc.flat_dim(), config.embed_dim, &mut rng)?;
        let obj_enc = ConvPyramid::new(&mut store, "object", config.res, 1, &config.channels, &mut rng)?;
        let obj_out = Linear::new(&mut store, "object.gmm", obj_enc.flat_dim(), config.gmm_width(), &mut rng)?;
        let scene_head = Mlp::new(
            &mut store,
            "scene.classify",
            config.embed_dim,
            config.classifier_hidden,
            config.categories,
            &mut rng,
        )?;
        let obj_head = Mlp::new(
            &mut store,
            "object.classify",
            obj_enc.flat_dim(),
            config.classifier_hidden,
            config.categories,
            &mut rng,
        )?;
        Ok(FsimModel {
            config,
            direction,
            store,
            scene_enc,
            scene_out,
            obj_enc,
            obj_out,
            scene_head,
            obj_head,
        })
    }

    /// Scene embeddings `[B, d]` for a `[B, 3, R, R, R]` input.
    pub fn scene_embedding(&self, g: &mut Graph<f32>, x: Var) -> Result<Var> {
        let h = self.scene_enc.forward_flat(g, &self.store, x)?;
        self.scene_out.forward(g, &self.store, h)
    }

    /// Object trunk features `[B, flat]` for a `[B, 1, R, R, R]` input.
    fn object_trunk(&self, g: &mut Graph<f32>, x: Var) -> Result<Var> {
        self.obj_enc.forward_flat(g, &self.store, x)
    }

    fn gmm_head(&self, g: &mut Graph<f32>, trunk: Var) -> Result<GmmVars> {
        let (n, d) = (self.config.components, self.config.embed_dim);
        let raw = self.obj_out.forward(g, &self.store, trunk)?;
        let b = g.shape(raw)[0];
        let logits = g.narrow(raw, 1, 0, n)?;
        let logw = g.log_softmax(logits, 1)?;
        let mu = g.narrow(raw, 1, n, n * d)?;
        let mu = g.reshape(mu, &[b, n, d])?;
        let s = g.narrow(raw, 1, n + n * d, n * d)?;
        let s = g.reshape(s, &[b, n, d])?;
        let s = g.softplus(s);
        let sigma = g.add_scalar(s, self.config.sigma_floor as f32);
        Ok(GmmVars { logw, mu, sigma })
    }

    /// Mixture parameters for a `[B, 1, R, R, R]` input.
    pub fn object_gmm(&self, g: &mut Graph<f32>, x: Var) -> Result<GmmVars> {
        let trunk = self.object_trunk(g, x)?;
        self.gmm_head(g, trunk)
    }

    fn narrow_gmm(g: &mut Graph<f32>, m: GmmVars, start: usize, len: usize) -> Result<GmmVars> {
        Ok(GmmVars {
            logw: g.narrow(m.logw, 0, start, len)?,
            mu: g.narrow(m.mu, 0, start, len)?,
            sigma: g.narrow(m.sigma, 0, start, len)?,
        })
    }

    /// Object-to-scene triplet batch. Both scene branches run through one
    /// encoder call. Returns `(loss, E⁺, E⁻)`.
    pub fn triplet_loss_o2s(
        &self,
        g: &mut Graph<f32>,
        objects: &[&ObjectGrid],
        positives: &[&SceneGrid],
        negatives: &[&SceneGrid],
        margin: f64,
    ) -> Result<(Var, Var, Var)> {
        let b = objects.len();
        if positives.len() != b || negatives.len() != b || b == 0 {
            return Err(Error::shape("triplet batch", "branch sizes differ or are zero"));
        }
        let x = g.input(object_batch(objects, self.config.res)?);
        let gmm = self.object_gmm(g, x)?;
        let scenes: Vec<&SceneGrid> = positives.iter().chain(negatives).copied().collect();
        let y = g.input(scene_batch(&scenes, self.config.res)?);
        let f = self.scene_embedding(g, y)?;
        let f_pos = g.narrow(f, 0, 0, b)?;
        let f_neg = g.narrow(f, 0, b, b)?;
        let e_pos = g.gmm_nll(gmm.logw, gmm.mu, gmm.sigma, f_pos)?;
        let e_neg = g.gmm_nll(gmm.logw, gmm.mu, gmm.sigma, f_neg)?;
        let loss = hinge_mean(g, e_pos, e_neg, margin as f32)?;
        Ok((loss, e_pos, e_neg))
    }

    /// Scene-to-object triplet batch; both object branches share one call.
    pub fn triplet_loss_s2o(
        &self,
        g: &mut Graph<f32>,
        positives: &[&ObjectGrid],
        negatives: &[&ObjectGrid],
        scenes: &[&SceneGrid],
        margin: f64,
    ) -> Result<(Var, Var, Var)> {
        let b = scenes.len();
        if positives.len() != b || negatives.len() != b || b == 0 {
            return Err(Error::shape("triplet batch", "branch sizes differ or are zero"));
        }
        let objs: Vec<&ObjectGrid> = positives.iter().chain(negatives).copied().collect();
        let x = g.input(object_batch(&objs, self.config.res)?);
        let gmm = self.object_gmm(g, x)?;
        let y = g.input(scene_batch(scenes, self.config.res)?);
        let f = self.scene_embedding(g, y)?;
        let pos = Self::narrow_gmm(g, gmm, 0, b)?;
        let neg = Self::narrow_gmm(g, gmm, b, b)?;
        let e_pos = g.gmm_nll(pos.logw, pos.mu, pos.sigma, f)?;
        let e_neg = g.gmm_nll(neg.logw, neg.mu, neg.sigma, f)?;
        let loss = hinge_mean(g, e_pos, e_neg, margin as f32)?;
        Ok((loss, e_pos, e_neg))
    }

    pub fn encode_scenes(&self, scenes: &[&SceneGrid]) -> Result<Vec<Vec<f64>>> {
        let d = self.config.embed_dim;
        let mut out = Vec::with_capacity(scenes.len());
        for chunk in scenes.chunks(INFER_BATCH) {
            let mut g = Graph::new();
            let x = g.input(scene_batch(chunk, self.config.res)?);
            let f = self.scene_embedding(&mut g, x)?;
            out.extend(g.value(f).data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect()));
        }
        Ok(out)
    }

    pub fn encode_scene(&self, scene: &SceneGrid) -> Result<Vec<f64>> {
        Ok(self.encode_scenes(&[scene])?.remove(0))
    }

    pub fn encode_objects(&self, objects: &[&ObjectGrid]) -> Result<Vec<GmmParams>> {
        let (n, d) = (self.config.components, self.config.embed_dim);
        let mut out = Vec::with_capacity(objects.len());
        for chunk in objects.chunks(INFER_BATCH) {
            let mut g = Graph::new();
            let x = g.input(object_batch(chunk, self.config.res)?);
            let m = self.object_gmm(&mut g, x)?;
            let (lw, mu, sg) = (g.value(m.logw).data(), g.value(m.mu).data(), g.value(m.sigma).data());
            for i in 0..chunk.len() {
                let rows = |buf: &[f32]| -> Vec<Vec<f64>> {
                    (0..n)
                        .map(|k| {
                            let o = (i * n + k) * d;
                            buf[o..o + d].iter().map(|&v| v as f64).collect()
                        })
                        .collect()
                };
                out.push(GmmParams {
                    weights: lw[i * n..(i + 1) * n].iter().map(|&v| (v as f64).exp()).collect(),
                    means: rows(mu),
                    sigmas: rows(sg),
                });
            }
        }
        Ok(out)
    }

    pub fn encode_object(&self, object: &ObjectGrid) -> Result<GmmParams> {
        Ok(self.encode_objects(&[object])?.remove(0))
    }

    /// Category logits `[B, C]` for objects.
    pub fn object_logits(&self, g: &mut Graph<f32>, x: Var) -> Result<Var> {
        let trunk = self.object_trunk(g, x)?;
        Ok(self.obj_head.forward(g, &self.store, trunk)?.1)
    }

    /// Category logits `[B, C]` for scenes.
    pub fn scene_logits(&self, g: &mut Graph<f32>, y: Var) -> Result<Var> {
        let f = self.scene_embedding(g, y)?;
        Ok(self.scene_head.forward(g, &self.store, f)?.1)
    }

    pub fn classify_objects(&self, objects: &[&ObjectGrid]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(objects.len());
        for chunk in objects.chunks(INFER_BATCH) {
            let mut g = Graph::new();
            let x = g.input(object_batch(chunk, self.config.res)?);
            let l = self.object_logits(&mut g, x)?;
            out.extend(softmax_rows(g.value(l)));
        }
        Ok(out)
    }

    pub fn classify_object(&self, object: &ObjectGrid) -> Result<Vec<f64>> {
        Ok(self.classify_objects(&[object])?.remove(0))
    }

    pub fn classify_scenes(&self, scenes: &[&SceneGrid]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(scenes.len());
        for chunk in scenes.chunks(INFER_BATCH) {
            let mut g = Graph::new();
            let y = g.input(scene_batch(chunk, self.config.res)?);
            let l = self.scene_logits(&mut g, y)?;
            out.extend(softmax_rows(g.value(l)));
        }
        Ok(out)
    }

    pub fn classify_scene(&self, scene: &SceneGrid) -> Result<Vec<f64>> {
        Ok(self.classify_scenes(&[scene])?.remove(0))
    }

    /// Euclidean distance between the two scene embeddings.
    pub fn scene_scene_distance(&self, a: &SceneGrid, b: &SceneGrid) -> Result<f64> {
        let f = self.encode_scenes(&[a, b])?;
        Ok(l2(&f[0], &f[1]))
    }

    /// Top `k` corpus items for `query`, most similar first. Object-to-scene
    /// and scene-to-scene need an o2s-trained model; scene-to-object needs an
    /// s2o-trained model.
    /// Scores of every query against every corpus item (rows are queries);
    /// smaller is closer.
    pub fn score_matrix(
        &self,
        queries: Corpus<'_>,
        corpus: Corpus<'_>,
        direction: RetrievalDirection,
    ) -> Result<Vec<Vec<f64>>> {
        let needed = match direction {
            RetrievalDirection::SceneToObject => TrainDirection::SceneToObject,
            _ => TrainDirection::ObjectToScene,
        };
        if self.direction != needed {
            return Err(Error::invalid(format!(
                "{direction:?} retrieval needs a model trained {needed:?}, this one was trained {:?}",
                self.direction
            )));
        }
        let empty = match corpus {
            Corpus::Objects(xs) => xs.is_empty(),
            Corpus::Scenes(ys) => ys.is_empty(),
        };
        if empty {
            return Err(Error::invalid("empty retrieval corpus"));
        }
        match (direction, queries, corpus) {
            (RetrievalDirection::ObjectToScene, Corpus::Objects(xs), Corpus::Scenes(ys)) => {
                let gmms = self.encode_objects(&xs.iter().collect::<Vec<_>>())?;
                let feats = self.encode_scenes(&ys.iter().collect::<Vec<_>>())?;
                gmms.iter()
                    .map(|g| feats.iter().map(|f| expectation(g, f)).collect())
                    .collect()
            }
            (RetrievalDirection::SceneToObject, Corpus::Scenes(ys), Corpus::Objects(xs)) => {
                let feats = self.encode_scenes(&ys.iter().collect::<Vec<_>>())?;
                let gmms = self.encode_objects(&xs.iter().collect::<Vec<_>>())?;
                feats
                    .iter()
                    .map(|f| gmms.iter().map(|g| expectation(g, f)).collect())
                    .collect()
            }
            (RetrievalDirection::SceneToScene, Corpus::Scenes(qs), Corpus::Scenes(ys)) => {
                let qf = self.encode_scenes(&qs.iter().collect::<Vec<_>>())?;
                let feats = self.encode_scenes(&ys.iter().collect::<Vec<_>>())?;
                Ok(qf.iter().map(|q| feats.iter().map(|f| l2(q, f)).collect()).collect())
            }
            _ => Err(Error::invalid(format!(
                "query and corpus kinds do not match {direction:?} retrieval"
            ))),
        }
    }

    /// The `k` closest corpus items to one query.
    pub fn retrieve(
        &self,
        query: Query<'_>,
        corpus: Corpus<'_>,
        k: usize,
        direction: RetrievalDirection,
    ) -> Result<Vec<Hit>> {
        let queries = match query {
            Query::Object(x) => Corpus::Objects(std::slice::from_ref(x)),
            Query::Scene(y) => Corpus::Scenes(std::slice::from_ref(y)),
        };
        let scores = self.score_matrix(queries, corpus, direction)?.remove(0);
        Ok(rank(&scores, k))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = FsimMeta {
            config: self.config.clone(),
            direction: self.direction,
        };
        nn::save_model(path, &meta, &self.store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let meta: FsimMeta = nn::load_meta(path.as_ref())?;
        let mut m = FsimModel::new(meta.config, meta.direction, 0)?;
        nn::load_weights(path, &mut m.store)?;
        Ok(m)
    }
}

pub fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Per-epoch means of the training losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub triplet: Vec<f64>,
    pub classifier: Vec<f64>,
}

fn check_finite(what: &str, epoch: usize, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("{what} loss became {v} in epoch {}", epoch + 1)))
    }
}

/// Trains one direction's model on the scenes `train` of `dataset`.
/// Classifier heads are trained jointly with cross-entropy weighted by
/// `classifier_weight`.
pub fn train_fsim(
    dataset: &Dataset,
    train: &[usize],
    config: FsimConfig,
    direction: TrainDirection,
    tc: &TrainConfig,
    classifier_weight: f64,
) -> Result<(FsimModel, TrainLog)> {
    tc.validate()?;
    if dataset.res != config.res {
        return Err(Error::invalid(format!(
            "dataset resolution {} vs model {}",
            dataset.res, config.res
        )));
    }
    let mut model = FsimModel::new(config, direction, tc.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(1));
    let mut adam = AdamState::new(AdamConfig {
        lr: tc.lr,
        ..AdamConfig::default()
    });
    let samples: Vec<_> = train.iter().map(|&i| &dataset.samples[i]).collect();
    let cats: Vec<usize> = samples.iter().map(|s| s.category).collect();
    let margin = model.config.margin;
    let mut log = TrainLog::default();
    for epoch in 0..tc.epochs {
        let (mut trip_sum, mut cls_sum) = (0.0, 0.0);
        // (anchor, positive, negative) as indices into `samples`.
        let triplets: Vec<(usize, usize, usize)> = match direction {
            TrainDirection::ObjectToScene => sample_triplets_o2s(&cats, samples.len(), &mut rng)?
                .into_iter()
                .map(|t| (t.object, t.positive, t.negative))
                .collect(),
            TrainDirection::SceneToObject => sample_triplets_s2o(&cats, samples.len(), &mut rng)?
                .into_iter()
                .map(|t| (t.scene, t.positive, t.negative))
                .collect(),
        };
        for batch in triplets.chunks(tc.batch_size) {
            let mut g = Graph::new();
            let anchors: Vec<usize> = batch.iter().map(|t| t.0).collect();
            let (trip, cls_objects, cls_scenes) = match direction {
                TrainDirection::ObjectToScene => {
                    let x: Vec<&ObjectGrid> = batch.iter().map(|t| &samples[t.0].central_normalized).collect();
                    let yp: Vec<&SceneGrid> = batch.iter().map(|t| samples[t.1].scene()).collect();
                    let yn: Vec<&SceneGrid> = batch.iter().map(|t| samples[t.2].scene()).collect();
                    let (loss, ..) = model.triplet_loss_o2s(&mut g, &x, &yp, &yn, margin)?;
                    let sc: Vec<usize> = batch.iter().map(|t| t.1).collect();
                    (loss, anchors, sc)
                }
                TrainDirection::SceneToObject => {
                    let xp: Vec<&ObjectGrid> = batch.iter().map(|t| &samples[t.1].central_normalized).collect();
                    let xn: Vec<&ObjectGrid> = batch.iter().map(|t| &samples[t.2].central_normalized).collect();
                    let y: Vec<&SceneGrid> = batch.iter().map(|t| samples[t.0].scene()).collect();
                    let (loss, ..) = model.triplet_loss_s2o(&mut g, &xp, &xn, &y, margin)?;
                    let ob: Vec<usize> = batch.iter().map(|t| t.1).collect();
                    (loss, ob, anchors)
                }
            };
            let objs: Vec<&ObjectGrid> = cls_objects.iter().map(|&i| &samples[i].central_normalized).collect();
            let x = g.input(object_batch(&objs, model.config.res)?);
            let lo = model.object_logits(&mut g, x)?;
            let labels_o: Vec<usize> = cls_objects.iter().map(|&i| cats[i]).collect();
            let ce_o = g.categorical_ce_mean(lo, &labels_o, &vec![true; labels_o.len()])?;
            let scs: Vec<&SceneGrid> = cls_scenes.iter().map(|&i| samples[i].scene()).collect();
            let y = g.input(scene_batch(&scs, model.config.res)?);
            let ls = model.scene_logits(&mut g, y)?;
            let labels_s: Vec<usize> = cls_scenes.iter().map(|&i| cats[i]).collect();
            let ce_s = g.categorical_ce_mean(ls, &labels_s, &vec![true; labels_s.len()])?;
            let ce = g.add(ce_o, ce_s)?;
            let ce_w = g.scale(ce, classifier_weight as f32);
            let total = g.add(trip, ce_w)?;

            let (tv, cv) = (g.value(trip).item() as f64, g.value(ce).item() as f64);
            check_finite("triplet", epoch, tv)?;
            check_finite("classifier", epoch, cv)?;
            trip_sum += tv * batch.len() as f64;
            cls_sum += cv * batch.len() as f64;
            g.backward(total)?;
            model.store.zero_grads();
            g.write_param_grads(&mut model.store);
            adam.step(&mut model.store)?;
        }
        let n = triplets.len() as f64;
        log.triplet.push(trip_sum / n);
        log.classifier.push(cls_sum / n);
        log::info!(
            "fsim {:?} epoch {}: triplet {:.5}, classifier {:.5}",
            direction,
            epoch + 1,
            trip_sum / n,
            cls_sum / n
        );
    }
    Ok((model, log))
}

//! Parameterized layers shared by the networks.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{load_checkpoint, save_checkpoint, Graph, ParamId, ParamStore, Real, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add_he(format!("{name}.w"), &[out_dim, in_dim], in_dim, rng)?;
        let b = store.add_zeros(format!("{name}.b"), &[out_dim])?;
        Ok(Linear { w, b, in_dim, out_dim })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

/// Kernel 4, stride 2, padding 1: halves each spatial extent.
pub const DOWN_KERNEL: usize = 4;
pub const DOWN_STRIDE: usize = 2;
pub const DOWN_PAD: usize = 1;

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel.pow(3);
        let w = store.add_he(format!("{name}.w"), &[out_ch, in_ch, kernel, kernel, kernel], fan_in, rng)?;
        let b = store.add_zeros(format!("{name}.b"), &[out_ch])?;
        Ok(Conv3d { w, b, stride, pad })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv3d(x, w, b, self.stride, self.pad)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose3d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose3d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        // Each output voxel sees about in_ch · (k / s)³ taps.
        let fan_in = in_ch * (kernel / stride.max(1)).max(1).pow(3);
        let w = store.add_he(format!("{name}.w"), &[in_ch, out_ch, kernel, kernel, kernel], fan_in, rng)?;
        let b = store.add_zeros(format!("{name}.b"), &[out_ch])?;
        Ok(ConvTranspose3d { w, b, stride, pad })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv_transpose3d(x, w, b, self.stride, self.pad)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

/// Spatial extent after `stages` halvings of `res`, if every halving is exact.
pub fn pyramid_extent(res: usize, stages: usize) -> Result<usize> {
    let div = 1usize << stages;
    if stages == 0 || !res.is_multiple_of(div) {
        return Err(Error::invalid(format!(
            "resolution {res} is not divisible by 2^{stages} for a {stages}-stage pyramid"
        )));
    }
    Ok(res / div)
}

/// Stack of halving convolutions, each followed by ReLU.
#[derive(Clone, Debug)]
pub struct ConvPyramid {
    pub stages: Vec<Conv3d>,
    pub out_channels: usize,
    pub out_extent: usize,
}

impl ConvPyramid {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        res: usize,
        in_ch: usize,
        channels: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let out_extent = pyramid_extent(res, channels.len())?;
        let mut stages = Vec::with_capacity(channels.len());
        let mut prev = in_ch;
        for (i, &c) in channels.iter().enumerate() {
            stages.push(Conv3d::new(
                store,
                &format!("{name}.conv{i}"),
                prev,
                c,
                DOWN_KERNEL,
                DOWN_STRIDE,
                DOWN_PAD,
                rng,
            )?);
            prev = c;
        }
        Ok(ConvPyramid {
            stages,
            out_channels: prev,
            out_extent,
        })
    }

    /// Flattened size of the last stage.
    pub fn flat_dim(&self) -> usize {
        self.out_channels * self.out_extent.pow(3)
    }

    /// Every stage output, finest first.
    pub fn forward_stages<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Vec<Var>> {
        let mut outs = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for s in &self.stages {
            let z = s.forward(g, store, h)?;
            h = g.relu(z);
            outs.push(h);
        }
        Ok(outs)
    }

    /// Last stage flattened to `[B, flat_dim]`.
    pub fn forward_flat<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let last = *self.forward_stages(g, store, x)?.last().expect("nonempty pyramid");
        let b = g.shape(last)[0];
        g.reshape(last, &[b, self.flat_dim()])
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.stages.iter().flat_map(Conv3d::params).collect()
    }
}

/// Hidden ReLU layer followed by a linear output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Mlp {
            hidden: Linear::new(store, &format!("{name}.hidden"), in_dim, hidden, rng)?,
            out: Linear::new(store, &format!("{name}.out"), hidden, out_dim, rng)?,
        })
    }

    /// Returns `(hidden activation, output)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Var)> {
        let h = self.hidden.forward(g, store, x)?;
        let h = g.relu(h);
        let y = self.out.forward(g, store, h)?;
        Ok((h, y))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.hidden.params();
        p.extend(self.out.params());
        p
    }
}

/// `max(0, margin + a − b)` averaged over the batch.
pub fn hinge_mean<T: Real>(g: &mut Graph<T>, a: Var, b: Var, margin: T) -> Result<Var> {
    let diff = g.sub(a, b)?;
    let shifted = g.add_scalar(diff, margin);
    let h = g.relu(shifted);
    Ok(g.mean(h))
}

/// Optimizer schedule shared by the training loops.
#[derive(Clone, Debug, PartialEq, serde::Deserialize, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Path of the JSON configuration stored next to a checkpoint.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

/// Writes `store` as a checkpoint and `meta` as its JSON sidecar.
pub fn save_model<M: Serialize>(path: impl AsRef<Path>, meta: &M, store: &ParamStore<f32>) -> Result<()> {
    let path = path.as_ref();
    save_checkpoint(path, &store.named_values())?;
    let w = std::io::BufWriter::new(std::fs::File::create(sidecar_path(path))?);
    serde_json::to_writer_pretty(w, meta)?;
    Ok(())
}

/// Reads a model's sidecar configuration.
pub fn load_meta<M: DeserializeOwned>(path: impl AsRef<Path>) -> Result<M> {
    let r = std::io::BufReader::new(std::fs::File::open(sidecar_path(path.as_ref()))?);
    Ok(serde_json::from_reader(r)?)
}

/// Overwrites a freshly built store with checkpointed values.
pub fn load_weights(path: impl AsRef<Path>, store: &mut ParamStore<f32>) -> Result<()> {
    store.load_from(&load_checkpoint(path)?)
}

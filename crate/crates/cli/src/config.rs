use std::path::Path;

use anyhow::Context;
use funcnet::fsim::FsimConfig;
use funcnet::igen::GenConfig;
use funcnet::iseg::SegConfig;
use funcnet::nn::TrainConfig;
use serde::Deserialize;

/// Every module configuration; absent sections keep their defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub fsim: FsimConfig,
    pub igen: GenConfig,
    pub iseg: SegConfig,
    /// Batch size and learning rate; epochs and seed come from flags.
    pub train: TrainConfig,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>, res: Option<u16>) -> anyhow::Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text)
                    .map_err(funcnet::Error::from)
                    .with_context(|| format!("parsing {}", p.display()))?
            }
            None => PipelineConfig::default(),
        };
        if let Some(r) = res {
            let r = r as usize;
            config.fsim.res = r;
            config.igen.res = r;
            config.iseg.res = r;
        }
        Ok(config)
    }

    pub fn train(&self, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            seed,
            ..self.train.clone()
        }
    }
}

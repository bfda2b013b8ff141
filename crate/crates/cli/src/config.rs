//! Run configuration: one JSON file, every field defaulted, flags override.

use sbgan_core::checkpoint;
use sbgan_core::end2end::{AblationEval, FineTuneConfig};
use sbgan_core::imgsynth::{DiscConfig, SpadeConfig, SpadeTrainConfig};
use sbgan_core::seggen::{ProgressiveSchedule, SegNetConfig, SegTrainConfig};
use sbgan_core::{Error, Result, ToyWorldSpec};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub toy: ToyWorldSpec,
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegSection {
    pub latent_dim: usize,
    pub base: (usize, usize),
    pub channels: Vec<usize>,
    pub steps_per_stage: u64,
    pub fadein_fraction: f64,
    pub train: SegTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpadeSection {
    pub channels: Vec<usize>,
    pub hidden: usize,
    pub latent_dim: Option<usize>,
    pub disc_channels: Vec<usize>,
    pub disc_scales: usize,
    pub train: SpadeTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneSection {
    pub d2_channels: Vec<usize>,
    pub d2_scales: usize,
    pub train: FineTuneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub n_per_trial: usize,
    pub trials: usize,
    pub seed: u64,
    pub embedder_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// relative to the workdir
    pub data_dir: String,
    pub out_dir: String,
    pub device: String,
    pub deterministic: bool,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub sample_count: usize,
    pub data: DataConfig,
    pub seg: SegSection,
    pub spade: SpadeSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
}

/// Desk-scale street scenes: 32×64, six classes.
const RES: (usize, usize) = (32, 64);
const K: usize = 6;

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { toy: ToyWorldSpec::street(K, RES, 0), n_train: 3000, n_val: 500, seed: 0 }
    }
}

impl Default for SegSection {
    fn default() -> Self {
        SegSection {
            latent_dim: 64,
            base: (4, 8),
            channels: vec![64, 64, 32, 16],
            steps_per_stage: 1000,
            fadein_fraction: 0.5,
            train: SegTrainConfig::default(),
        }
    }
}

impl Default for SpadeSection {
    fn default() -> Self {
        SpadeSection {
            channels: vec![64, 48, 32, 16],
            hidden: 32,
            latent_dim: None,
            disc_channels: vec![32, 64, 64],
            disc_scales: 2,
            train: SpadeTrainConfig { steps: 3000, ..SpadeTrainConfig::default() },
        }
    }
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection { d2_channels: vec![32, 64, 64], d2_scales: 2, train: FineTuneConfig { steps: 1000, ..Default::default() } }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { n_per_trial: 500, trials: 5, seed: 0, embedder_seed: 1234 }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: "data".into(),
            out_dir: "runs".into(),
            device: "cpu".into(),
            deterministic: false,
            seed: 0,
            checkpoint_interval: 500,
            sample_count: 16,
            data: DataConfig::default(),
            seg: SegSection::default(),
            spade: SpadeSection::default(),
            finetune: FinetuneSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        checkpoint::config_hash(&self.to_json())
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("stored config: {e}")))
    }

    pub fn k(&self) -> usize {
        self.data.toy.k
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.data.toy.resolution
    }

    pub fn validate(&self) -> Result<()> {
        if self.device != "cpu" {
            return Err(Error::Config(format!("device {:?} unavailable; only \"cpu\" is supported", self.device)));
        }
        self.data.toy.validate()?;
        self.schedule()?;
        self.spade_net().validate()?;
        self.finetune.train.validate()?;
        if self.data.n_train == 0 || self.data.n_val < 2 {
            return Err(Error::Config("need n_train >= 1 and n_val >= 2".into()));
        }
        Ok(())
    }

    pub fn seg_net(&self) -> SegNetConfig {
        SegNetConfig {
            k: self.k(),
            latent_dim: self.seg.latent_dim,
            base: self.seg.base,
            channels: self.seg.channels.clone(),
            seed: self.seed,
        }
    }

    pub fn schedule(&self) -> Result<ProgressiveSchedule> {
        let s = ProgressiveSchedule::doubling(
            self.seg.base,
            self.resolution(),
            self.seg.steps_per_stage,
            self.seg.fadein_fraction,
        )?;
        if s.num_stages() != self.seg.channels.len() {
            return Err(Error::Config(format!(
                "seg.channels has {} entries but {:?} → {:?} needs {} stages",
                self.seg.channels.len(),
                self.seg.base,
                self.resolution(),
                s.num_stages()
            )));
        }
        Ok(s)
    }

    pub fn spade_net(&self) -> SpadeConfig {
        SpadeConfig {
            k: self.k(),
            resolution: self.resolution(),
            channels: self.spade.channels.clone(),
            hidden: self.spade.hidden,
            latent_dim: self.spade.latent_dim,
            seed: self.seed,
        }
    }

    pub fn spade_disc(&self) -> DiscConfig {
        DiscConfig {
            in_channels: self.k() + 3,
            channels: self.spade.disc_channels.clone(),
            num_scales: self.spade.disc_scales,
            seed: self.seed,
        }
    }

    pub fn ablation_eval(&self) -> AblationEval {
        AblationEval { n_per_trial: self.eval.n_per_trial, trials: self.eval.trials, seed: self.eval.seed }
    }

    /// A tiny configuration for smoke tests: 8×8, three classes, a few steps.
    pub fn tiny() -> Self {
        let mut c = RunConfig::default();
        c.data = DataConfig { toy: ToyWorldSpec::street(3, (8, 8), 0), n_train: 24, n_val: 8, seed: 0 };
        c.seg = SegSection {
            latent_dim: 8,
            base: (4, 4),
            channels: vec![8, 8],
            steps_per_stage: 3,
            fadein_fraction: 0.5,
            train: SegTrainConfig { batch_size: 4, eval_interval: 2, eval_samples: 8, ..Default::default() },
        };
        c.spade = SpadeSection {
            channels: vec![8, 4],
            hidden: 8,
            latent_dim: None,
            disc_channels: vec![8, 8],
            disc_scales: 1,
            train: SpadeTrainConfig { steps: 4, batch_size: 4, eval_interval: 2, ..Default::default() },
        };
        c.finetune = FinetuneSection {
            d2_channels: vec![8, 8],
            d2_scales: 1,
            train: FineTuneConfig { steps: 3, batch_size: 4, eval_interval: 1, ..Default::default() },
        };
        c.eval = EvalSection { n_per_trial: 8, trials: 2, seed: 0, embedder_seed: 1234 };
        c.checkpoint_interval = 2;
        c.sample_count = 4;
        c
    }
}

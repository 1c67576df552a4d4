//! One TOML file holding every module's settings. Files are layered over a
//! named preset: keys present in the file win, everything else comes from
//! the preset.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::SDEditConfig;
use crate::error::{Error, Result};
use crate::metrics::FsvrConfig;
use crate::network::NetworkConfig;
use crate::pipeline::DensifyConfig;
use crate::prior::Stage0Config;
use crate::scene::{generate_scene, make_sweep_pair, random_scene_spec, SceneGenConfig, SceneSpec, SensorModel, SweepPair};
use crate::training::{mix, CurriculumSchedule, LossWeights, OptimizerConfig, TrainSettings};

/// Synthetic dataset layout for `synth`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub scene: SceneGenConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_scenes: 8,
            val_scenes: 2,
            scene: SceneGenConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub sparse_sensor: SensorModel,
    pub dense_sensor: SensorModel,
    pub stage0: Stage0Config,
    pub sdedit: SDEditConfig,
    pub network: NetworkConfig,
    pub loss: LossWeights,
    pub curriculum: CurriculumSchedule,
    pub optimizer: OptimizerConfig,
    pub densify: DensifyConfig,
    pub fsvr: FsvrConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset '{other}' (desk or paper)"))),
        }
    }
}

impl RunConfig {
    /// Small sensors and network, sized for a single CPU core. The short
    /// schedule uses a larger step and single-scene batches, averaged by EMA.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            dataset: DatasetConfig::default(),
            sparse_sensor: SensorModel::desk_sparse(),
            dense_sensor: SensorModel::desk_dense(),
            stage0: Stage0Config::default(),
            sdedit: SDEditConfig::default(),
            network: NetworkConfig::desk(),
            loss: LossWeights::default(),
            curriculum: CurriculumSchedule::default(),
            optimizer: OptimizerConfig {
                lr: 4e-3,
                batch_size: 1,
                rays_per_scene: 2048,
                warmup_steps: 10,
                ema_decay: 0.9,
                ..OptimizerConfig::default()
            },
            densify: DensifyConfig::default(),
            fsvr: FsvrConfig::default(),
        }
    }

    /// Full-size hyperparameters: 64/32-beam sensors, H=256, 6 layers,
    /// 200 epochs, batch 8, lr 1e-4.
    pub fn paper() -> Self {
        Self {
            sparse_sensor: SensorModel::hdl32(),
            dense_sensor: SensorModel::hdl64(),
            network: NetworkConfig::paper(),
            curriculum: CurriculumSchedule {
                total_epochs: 200,
                ..CurriculumSchedule::default()
            },
            optimizer: OptimizerConfig {
                batch_size: 8,
                rays_per_scene: 65_536,
                ..OptimizerConfig::default()
            },
            ..Self::desk()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Parses `text` layered over `base`.
    pub fn from_toml_over(text: &str, base: &RunConfig) -> Result<Self> {
        let overlay: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged: toml::Table =
            toml::Table::try_from(base).map_err(|e| Error::Config(format!("serializing base config: {e}")))?;
        merge(&mut merged, overlay);
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// First 8 bytes of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    /// Every failure is reported as [`Error::Config`].
    pub fn validate(&self) -> Result<()> {
        let config = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.sparse_sensor.validate().map_err(|e| config(e.into()))?;
        self.dense_sensor.validate().map_err(|e| config(e.into()))?;
        self.stage0.validate().map_err(|e| config(e.into()))?;
        self.sdedit.validate().map_err(|e| config(e.into()))?;
        self.network.validate().map_err(|e| config(e.into()))?;
        self.loss.validate().map_err(config)?;
        self.curriculum.validate().map_err(config)?;
        self.optimizer.validate().map_err(config)?;
        self.densify.validate().map_err(config)?;
        self.fsvr.validate().map_err(Error::Config)?;
        Ok(())
    }

    /// Deterministic synthetic scenes: `train_scenes` then `val_scenes`.
    pub fn synth_scenes(&self) -> Result<Vec<(SceneSpec, SweepPair)>> {
        let n = self.dataset.train_scenes + self.dataset.val_scenes;
        (0..n)
            .map(|i| {
                let spec = random_scene_spec(mix(self.seed, 11, i as u64), &self.dataset.scene);
                let geom = generate_scene(&spec)?;
                let pair = make_sweep_pair(&geom, &self.sparse_sensor, &self.dense_sensor)?;
                Ok((spec, pair))
            })
            .collect()
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            network: self.network.clone(),
            optimizer: self.optimizer,
            loss: self.loss,
            curriculum: self.curriculum,
            stage0: self.stage0,
            sdedit: self.sdedit,
            densify: self.densify,
            fsvr: self.fsvr,
        }
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::desk();
        let back = RunConfig::from_toml_over(&c.to_toml(), &RunConfig::paper()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn file_values_override_preset() {
        let c = RunConfig::from_toml_over("seed = 7\n[loss]\nlambda_free = 0.0\n", &RunConfig::desk()).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.loss.lambda_free, 0.0);
        assert_eq!(c.loss.lambda_occ, 1.0);
        assert_ne!(c.hash(), RunConfig::desk().hash());
    }

    #[test]
    fn paper_preset_values() {
        let p = RunConfig::paper();
        assert_eq!((p.network.hidden, p.network.layers, p.network.bev_res), (256, 6, 64));
        assert_eq!((p.curriculum.total_epochs, p.optimizer.batch_size), (200, 8));
        assert_eq!(p.optimizer.lr, 1e-4);
        assert_eq!(p.densify.diffusion_steps, 1000);
        assert_eq!(p.optimizer.self_cond_prob, 0.5);
        assert_eq!((p.curriculum.start_ratio, p.curriculum.end_ratio), (2.0, 8.0));
        assert_eq!((p.stage0.k_neighbors, p.stage0.jitter_sigma), (8, 0.10));
        assert_eq!((p.sdedit.ddim_steps, p.sdedit.alpha_frac), (50, 0.25));
        p.validate().unwrap();
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(matches!(
            RunConfig::from_toml_over("[network]\nbev_res = 48\n", &RunConfig::desk()),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::from_toml_over("bogus = 1\n", &RunConfig::desk()).is_err());
    }
}

//! Run configuration. One TOML file drives every subcommand; the same
//! struct round-trips through serialization losslessly so a config can be
//! copied into a run directory and hashed for checkpoint compatibility.

use std::fs;
use std::path::Path;

use graincode::{Error, GrainGeometry, GrainSpec, PriorConfig, Result, Stage1Config, Vocab};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageCfg {
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrainsCfg {
    /// Downsampling factors, ascending; the largest is the region size.
    pub factors: Vec<usize>,
    /// Target fraction of regions per granularity, summing to 1.
    pub ratios: Vec<f64>,
    pub budget_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookCfg {
    pub entries: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Cfg {
    pub hidden: usize,
    pub beta: f64,
    pub tau: f64,
    pub lr: f64,
    pub steps: u64,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Cfg {
    pub d: usize,
    pub pos_depth: usize,
    pub content_depth: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Class labels for conditional generation; 0 disables conditioning.
    pub labels: usize,
    /// Extra slots added to each segment's batch pad length.
    pub pad_headroom: usize,
    pub lr: f64,
    pub steps: u64,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimCfg {
    pub warmup: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataCfg {
    /// "synth" for the procedural corpus, otherwise a path to a directory
    /// of PNGs or to a .dqtn tensor file.
    pub source: String,
    /// Corpus size when source is "synth".
    pub images: usize,
    /// Fraction of regions given high-frequency texture in synth images.
    pub busy_fraction: f64,
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub image: ImageCfg,
    pub grains: GrainsCfg,
    pub codebook: CodebookCfg,
    pub stage1: Stage1Cfg,
    pub stage2: Stage2Cfg,
    pub optim: OptimCfg,
    pub data: DataCfg,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::desk()
    }
}

impl RunConfig {
    /// Desk-scale defaults: everything trains in minutes on a CPU.
    pub fn desk() -> Self {
        RunConfig {
            seed: 7,
            image: ImageCfg { h: 32, w: 32 },
            grains: GrainsCfg {
                factors: vec![4, 8],
                ratios: vec![0.5, 0.5],
                budget_weight: 10.0,
            },
            codebook: CodebookCfg {
                entries: 64,
                dim: 16,
            },
            stage1: Stage1Cfg {
                hidden: 32,
                beta: 0.25,
                tau: 1.0,
                lr: 2e-3,
                steps: 600,
                batch: 16,
            },
            stage2: Stage2Cfg {
                d: 64,
                pos_depth: 2,
                content_depth: 4,
                heads: 4,
                dropout: 0.0,
                labels: 0,
                pad_headroom: 4,
                lr: 1e-3,
                steps: 800,
                batch: 16,
            },
            optim: OptimCfg {
                warmup: 50,
                log_every: 25,
                checkpoint_every: 200,
            },
            data: DataCfg {
                source: "synth".into(),
                images: 64,
                busy_fraction: 0.3,
                test_fraction: 0.25,
            },
        }
    }

    /// Full-scale geometry kept for arithmetic checks only; training at
    /// this size is out of scope.
    pub fn paper() -> Self {
        let mut cfg = RunConfig::desk();
        cfg.image = ImageCfg { h: 256, w: 256 };
        cfg.grains = GrainsCfg {
            factors: vec![8, 16],
            ratios: vec![0.5, 0.5],
            budget_weight: 10.0,
        };
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }

    /// Hex SHA-256 of the canonical serialization; stamped into
    /// checkpoints so a config/checkpoint mismatch is detectable.
    pub fn hash(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml()?.as_bytes());
        let digest = hasher.finalize();
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn grain_spec(&self) -> Result<GrainSpec> {
        GrainSpec::new(
            self.grains.factors.clone(),
            self.grains.ratios.clone(),
            self.grains.budget_weight,
        )
    }

    pub fn geometry(&self) -> Result<GrainGeometry> {
        GrainGeometry::new(self.grain_spec()?, self.image.h, self.image.w)
    }

    pub fn stage1_config(&self) -> Result<Stage1Config> {
        Ok(Stage1Config {
            img_h: self.image.h,
            img_w: self.image.w,
            n_z: self.codebook.dim,
            k_c: self.codebook.entries,
            hidden: self.stage1.hidden,
            beta: self.stage1.beta,
            tau: self.stage1.tau,
            spec: self.grain_spec()?,
        })
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Ok(Vocab::new(
            &self.geometry()?,
            self.codebook.entries,
            self.stage2.labels,
        ))
    }

    /// Worst-case sequence length: every segment at its natural maximum.
    pub fn max_seq_len(&self) -> Result<usize> {
        let geo = self.geometry()?;
        Ok((0..geo.spec.k_g()).map(|k| geo.cells(k) + 2).sum())
    }

    pub fn prior_config(&self) -> Result<PriorConfig> {
        Ok(PriorConfig {
            d: self.stage2.d,
            pos_depth: self.stage2.pos_depth,
            content_depth: self.stage2.content_depth,
            heads: self.stage2.heads,
            max_len: self.max_seq_len()?,
            dropout: self.stage2.dropout,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1_config()?.validate()?;
        self.prior_config()?.validate()?;
        if self.stage1.batch == 0 || self.stage2.batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.stage1.steps == 0 || self.stage2.steps == 0 {
            return Err(Error::Config("step budgets must be positive".into()));
        }
        if !(self.stage1.lr > 0.0) || !(self.stage2.lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(Error::Config(format!(
                "test fraction must lie in [0, 1), got {}",
                self.data.test_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.data.busy_fraction) {
            return Err(Error::Config(format!(
                "busy fraction must lie in [0, 1], got {}",
                self.data.busy_fraction
            )));
        }
        if self.data.source == "synth" && self.data.images == 0 {
            return Err(Error::Config("synth corpus must hold at least one image".into()));
        }
        if self.optim.log_every == 0 || self.optim.checkpoint_every == 0 {
            return Err(Error::Config("log/checkpoint intervals must be positive".into()));
        }
        Ok(())
    }
}

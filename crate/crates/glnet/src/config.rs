//! Training configuration: a UTF-8 `key = value` file (TOML syntax) with
//! command-line overrides that win over the file.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use glnet_core::inference::InferConfig;
use glnet_core::losses::LossConfig;
use glnet_core::model::{BranchConfig, Depth, Direction, SharePlan};
use glnet_core::training::TrainPlan;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which part of the training schedule to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseSel {
    One,
    Two,
    Three,
    All,
    /// The local-only baseline.
    Local,
}

impl FromStr for PhaseSel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(PhaseSel::One),
            "2" => Ok(PhaseSel::Two),
            "3" => Ok(PhaseSel::Three),
            "all" => Ok(PhaseSel::All),
            "local" => Ok(PhaseSel::Local),
            _ => Err(Error::Config(format!("unknown phase {s:?} (1, 2, 3, all, local)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Dataset root.
    pub data: PathBuf,
    pub split: String,
    /// Output directory for checkpoints and loss curves.
    pub out: PathBuf,
    /// `1`, `2`, `3`, `all` or `local`.
    pub phases: String,
    pub epochs: [usize; 3],
    pub local_epochs: usize,
    pub repeat: usize,
    pub lr_global: f64,
    pub lr_local: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub accum_period: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub main_weight: f64,
    pub local_weight: f64,
    pub global_weight: f64,
    pub patch: usize,
    pub overlap: usize,
    pub global_size: usize,
    pub patches_per_image: usize,
    pub scored_patches: usize,
    pub classes: usize,
    pub encoder: Vec<usize>,
    pub convs_per_stage: usize,
    pub pyramid: usize,
    /// `none`, `shallow-g2l`, `deep-g2l`, `shallow-bidir` or `deep-bidir`.
    pub sharing: String,
    /// Train on the relaxed foreground box of every image instead of the
    /// whole image (fine stage of the coarse-to-fine variant).
    pub boxed: bool,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let plan = TrainPlan::default();
        let branch = BranchConfig::desk(3);
        TrainConfig {
            data: PathBuf::from("data"),
            split: "train".into(),
            out: PathBuf::from("runs"),
            phases: "all".into(),
            epochs: plan.epochs,
            local_epochs: plan.local_only_epochs,
            repeat: plan.repeat,
            lr_global: plan.lr_global,
            lr_local: plan.lr_local,
            beta1: plan.beta1,
            beta2: plan.beta2,
            batch_size: plan.batch_size,
            accum_period: plan.accum_period,
            gamma: plan.loss.gamma,
            lambda: plan.loss.lambda,
            main_weight: plan.loss.main_weight,
            local_weight: plan.loss.local_weight,
            global_weight: plan.loss.global_weight,
            patch: plan.patch,
            overlap: plan.overlap,
            global_size: plan.global_size,
            patches_per_image: plan.patches_per_image,
            scored_patches: plan.scored_patches,
            classes: branch.classes,
            encoder: branch.encoder,
            convs_per_stage: branch.convs_per_stage,
            pyramid: branch.pyramid,
            sharing: "deep-bidir".into(),
            boxed: false,
            tolerance: glnet_core::coarse2fine::DEFAULT_TOLERANCE,
            seed: plan.seed,
        }
    }
}

/// Parses `text` as a config, then applies `key=value` overrides.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<TrainConfig> {
    let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
    for item in overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
        table.insert(key.trim().to_string(), parse_value(value.trim()));
    }
    let cfg: TrainConfig = table.try_into().map_err(|e| Error::Config(format!("{e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// A TOML literal when `text` is one, else the text as a string.
fn parse_value(text: &str) -> toml::Value {
    format!("v = {text}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

/// Reads the config at `path` (defaults when `None`) with overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    parse_config(&text, overrides)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.phase()?;
        self.share()?;
        self.branch().validate()?;
        self.plan().validate()?;
        if !(self.tolerance >= 0.0) {
            return Err(Error::Config(format!("tolerance {} must be non-negative", self.tolerance)));
        }
        Ok(())
    }

    pub fn phase(&self) -> Result<PhaseSel> {
        self.phases.parse()
    }

    pub fn share(&self) -> Result<SharePlan> {
        let (direction, depth) = match self.sharing.as_str() {
            "none" => (Direction::None, Depth::Deep),
            "shallow-g2l" => (Direction::GlobalToLocal, Depth::Shallow),
            "deep-g2l" => (Direction::GlobalToLocal, Depth::Deep),
            "shallow-bidir" => (Direction::Bidirectional, Depth::Shallow),
            "deep-bidir" => (Direction::Bidirectional, Depth::Deep),
            other => return Err(Error::Config(format!("unknown sharing {other:?}"))),
        };
        Ok(SharePlan { direction, depth })
    }

    pub fn branch(&self) -> BranchConfig {
        let taps = 2 * self.encoder.len().max(1) - 1;
        BranchConfig {
            input_channels: 3,
            encoder: self.encoder.clone(),
            convs_per_stage: self.convs_per_stage,
            pyramid: self.pyramid,
            classes: self.classes,
            input_h: self.global_size,
            input_w: self.global_size,
            tap_stages: (0..taps.saturating_sub(1)).collect(),
        }
    }

    pub fn plan(&self) -> TrainPlan {
        TrainPlan {
            epochs: self.epochs,
            local_only_epochs: self.local_epochs,
            repeat: self.repeat,
            lr_global: self.lr_global,
            lr_local: self.lr_local,
            beta1: self.beta1,
            beta2: self.beta2,
            batch_size: self.batch_size,
            accum_period: self.accum_period,
            loss: LossConfig {
                gamma: self.gamma,
                lambda: self.lambda,
                main_weight: self.main_weight,
                local_weight: self.local_weight,
                global_weight: self.global_weight,
            },
            global_size: self.global_size,
            patch: self.patch,
            overlap: self.overlap,
            patches_per_image: self.patches_per_image,
            scored_patches: self.scored_patches,
            seed: self.seed,
        }
    }

    pub fn infer(&self) -> InferConfig {
        InferConfig {
            patch: self.patch,
            overlap: self.overlap,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        assert_eq!(parse_config("", &[]).unwrap(), TrainConfig::default());
    }

    #[test]
    fn overrides_win_over_the_file() {
        let cfg = parse_config("seed = 3\nlr_global = 0.5\nsplit = \"x\"", &["seed=9".into(), "split=val".into()]).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.lr_global, 0.5);
        assert_eq!(cfg.split, "val");
        let cfg = parse_config("", &["epochs=[1, 2, 3]".into()]).unwrap();
        assert_eq!(cfg.epochs, [1, 2, 3]);
    }

    #[test]
    fn shipped_configs_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let bench = load_config(Some(&dir.join("benchmark.toml")), &[]).unwrap();
        assert_eq!(bench.phase().unwrap(), PhaseSel::All);
        assert_eq!(bench.epochs, [40, 5, 10]);
        let lesion = load_config(Some(&dir.join("lesion.toml")), &["boxed=false".into()]).unwrap();
        assert_eq!((lesion.classes, lesion.boxed), (2, false));
        let sweep = fs::read_to_string(dir.join("sweep.toml")).unwrap();
        assert_eq!(crate::sweep::SweepConfig::parse(&sweep).unwrap().models.len(), 3);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for bad in ["nope = 1", "overlap = 128", "sharing = \"sideways\"", "phases = \"4\"", "accum_period = 0"] {
            let err = parse_config(bad, &[]).unwrap_err();
            assert!(err.is_usage(), "{bad}: {err}");
        }
        assert!(parse_config("", &["seed".into()]).is_err());
    }
}

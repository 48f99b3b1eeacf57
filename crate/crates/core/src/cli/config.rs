use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::BootstrapConfig;
use crate::network::FcrnConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrPolicy {
    #[default]
    Constant,
    /// `lr * (1 - step/steps)^0.9`.
    Poly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub steps: usize,
    /// Crops whose gradients are averaged into each update.
    #[serde(default = "one")]
    pub accumulation: usize,
    #[serde(default)]
    pub lr_policy: LrPolicy,
}

fn default_momentum() -> f64 {
    0.9
}

fn one() -> usize {
    1
}

impl OptimConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_policy {
            LrPolicy::Constant => self.lr,
            LrPolicy::Poly => {
                let frac = step as f64 / self.steps.max(1) as f64;
                self.lr * (1.0 - frac).max(0.0).powf(0.9)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: PathBuf,
    #[serde(default)]
    pub val_manifest: Option<PathBuf>,
    pub crop: usize,
    #[serde(default = "default_scale_min")]
    pub scale_min: f64,
    #[serde(default = "default_scale_max")]
    pub scale_max: f64,
}

fn default_scale_min() -> f64 {
    0.5
}

fn default_scale_max() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StitchSettings {
    #[serde(default = "one")]
    pub ratio: usize,
    /// Train with shifted passes at `ratio`.
    #[serde(default)]
    pub train: bool,
    /// Evaluate with shifted passes at `ratio`.
    #[serde(default)]
    pub test: bool,
}

impl Default for StitchSettings {
    fn default() -> Self {
        StitchSettings {
            ratio: 1,
            train: false,
            test: false,
        }
    }
}

impl StitchSettings {
    pub fn train_ratio(&self) -> usize {
        if self.train {
            self.ratio
        } else {
            1
        }
    }

    pub fn test_ratio(&self) -> usize {
        if self.test {
            self.ratio
        } else {
            1
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSettings {
    pub train_count: usize,
    #[serde(default)]
    pub val_count: usize,
    pub size: usize,
    pub num_classes: usize,
    #[serde(default = "default_rare")]
    pub rare_fraction: f64,
}

fn default_rare() -> f64 {
    0.1
}

/// Everything a run depends on besides the files it reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub network: Option<FcrnConfig>,
    #[serde(default)]
    pub optim: Option<OptimConfig>,
    #[serde(default)]
    pub loss: BootstrapConfig,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub stitch: StitchSettings,
    #[serde(default)]
    pub synth: Option<SynthSettings>,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text, path)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes relative paths relative to `base` (the config file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        if let Some(d) = &mut self.data {
            fix(&mut d.train_manifest);
            if let Some(v) = &mut d.val_manifest {
                fix(v);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Every problem relevant to training, one message per bad field.
    pub fn training_problems(&self) -> Vec<String> {
        let mut bad = Vec::new();
        match &self.network {
            Some(n) => bad.extend(n.problems()),
            None => bad.push("network: section missing".to_string()),
        }
        match &self.optim {
            Some(o) => {
                if !(o.lr > 0.0 && o.lr.is_finite()) {
                    bad.push(format!("optim.lr: must be positive, got {}", o.lr));
                }
                if !(0.0..1.0).contains(&o.momentum) {
                    bad.push(format!("optim.momentum: must lie in [0, 1), got {}", o.momentum));
                }
                if o.weight_decay < 0.0 {
                    bad.push(format!("optim.weight_decay: must be >= 0, got {}", o.weight_decay));
                }
                if o.accumulation == 0 {
                    bad.push("optim.accumulation: must be >= 1".to_string());
                }
            }
            None => bad.push("optim: section missing".to_string()),
        }
        bad.extend(self.loss.problems());
        match &self.data {
            Some(d) => {
                if d.crop == 0 {
                    bad.push("data.crop: must be >= 1".to_string());
                }
                if !(d.scale_min > 0.0 && d.scale_min <= d.scale_max) {
                    bad.push(format!(
                        "data.scale_min/scale_max: need 0 < min <= max, got {}..{}",
                        d.scale_min, d.scale_max
                    ));
                }
                if !d.train_manifest.is_file() {
                    bad.push(format!(
                        "data.train_manifest: {} does not exist",
                        d.train_manifest.display()
                    ));
                }
                if let Some(v) = &d.val_manifest {
                    if !v.is_file() {
                        bad.push(format!("data.val_manifest: {} does not exist", v.display()));
                    }
                }
            }
            None => bad.push("data: section missing".to_string()),
        }
        bad.extend(self.stitch_problems());
        bad
    }

    pub fn stitch_problems(&self) -> Vec<String> {
        let mut bad = Vec::new();
        let r = self.stitch.ratio;
        if r == 0 || !r.is_power_of_two() {
            bad.push(format!("stitch.ratio: must be a power of two, got {r}"));
        } else if let Some(n) = &self.network {
            if r > n.output_stride {
                bad.push(format!(
                    "stitch.ratio: {r} exceeds network.output_stride {}",
                    n.output_stride
                ));
            }
        }
        bad
    }

    pub fn validate_training(&self) -> Result<()> {
        let bad = self.training_problems();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

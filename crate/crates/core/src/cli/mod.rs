//! Commands behind the `dilseg` binary. Each is a plain function of its
//! configuration and input files so it can be driven from tests as well.

mod checks;
mod config;
mod train;

pub use checks::{
    cmd_fov_table, cmd_stitch_check, default_fov_rows, format_fov_table, fov_grid, FovRow,
    StitchCheckReport, STITCH_CHECK_TOLERANCE,
};
pub use config::{DataConfig, LrPolicy, OptimConfig, RunConfig, StitchSettings, SynthSettings};
pub use train::{cmd_train, TrainOutcome, CHECKPOINT_DIR, TRAIN_LOG};

use std::path::{Path, PathBuf};

use crate::data::{synth_generate, DatasetManifest, SynthConfig};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::metrics::{ConfusionMatrix, Scores};
use crate::network::{load_checkpoint, NetworkSpec};
use crate::resolution::{stitched_forward, StitchConfig};
use crate::tensor::{dropout_key, Tensor};

/// Flag values that take precedence over the config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub stitch_ratio: Option<usize>,
    pub steps: Option<usize>,
    pub threshold: Option<f64>,
    pub min_keep: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out_dir {
            cfg.out_dir = o.clone();
        }
        if let Some(r) = self.stitch_ratio {
            cfg.stitch.ratio = r;
        }
        if let (Some(s), Some(o)) = (self.steps, cfg.optim.as_mut()) {
            o.steps = s;
        }
        if let Some(t) = self.threshold {
            cfg.loss.threshold = t;
        }
        if let Some(k) = self.min_keep {
            cfg.loss.min_keep = k;
        }
    }
}

/// Paths of the corpora written by [`cmd_synth`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutcome {
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
}

/// Writes `out_dir/train` and `out_dir/val` from the `[synth]` section. The
/// two splits are drawn from distinct seeds derived from the run seed.
pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthOutcome> {
    let s = cfg
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config(vec!["synth: section missing".to_string()]))?;
    let split = |count: usize, which: u64| SynthConfig {
        count,
        size: s.size,
        num_classes: s.num_classes,
        rare_fraction: s.rare_fraction,
        seed: dropout_key(cfg.seed, 0x5917, which),
    };
    let train = split(s.train_count, 0);
    let val = split(s.val_count, 1);
    let problems = train.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let train_dir = cfg.out_dir.join("train");
    let val_dir = cfg.out_dir.join("val");
    synth_generate(&train, &train_dir)?;
    synth_generate(&val, &val_dir)?;
    Ok(SynthOutcome {
        train_manifest: train_dir.join("manifest.txt"),
        val_manifest: val_dir.join("manifest.txt"),
    })
}

/// Full-resolution label prediction for one `(1, c, h, w)` image.
///
/// Scores come from a plain forward pass (`ratio == 1`) or from
/// shift-and-stitch at `ratio`. Whatever stride remains is undone by bilinear
/// interpolation of the scores, score `i` sitting at pixel `stride * i`,
/// followed by an argmax with ties going to the lower class.
pub fn predict_labels(net: &NetworkSpec, image: &Tensor, ratio: usize) -> Result<LabelMap> {
    let scores = stitched_forward(net, image, &StitchConfig::new(net, ratio)?)?;
    let stride = net.output_stride / ratio;
    let s = image.shape();
    Ok(upsample_argmax(&scores, s.h, s.w, stride))
}

fn upsample_argmax(scores: &Tensor, h: usize, w: usize, stride: usize) -> LabelMap {
    let s = scores.shape();
    let axis = |i: usize, len: usize| -> (usize, usize, f64) {
        let f = i as f64 / stride as f64;
        let lo = (f.floor() as usize).min(len - 1);
        let hi = (lo + 1).min(len - 1);
        (lo, hi, if hi == lo { 0.0 } else { f - lo as f64 })
    };
    let mut out = LabelMap::filled(h, w, 0);
    let mut best = vec![0.0; s.c];
    for y in 0..h {
        let (y0, y1, wy) = axis(y, s.h);
        for x in 0..w {
            let (x0, x1, wx) = axis(x, s.w);
            for (c, b) in best.iter_mut().enumerate() {
                *b = if stride == 1 {
                    scores.at(0, c, y, x)
                } else {
                    let top = scores.at(0, c, y0, x0) * (1.0 - wx) + scores.at(0, c, y0, x1) * wx;
                    let bottom = scores.at(0, c, y1, x0) * (1.0 - wx) + scores.at(0, c, y1, x1) * wx;
                    top * (1.0 - wy) + bottom * wy
                };
            }
            let mut arg = 0;
            for c in 1..s.c {
                if best[c] > best[arg] {
                    arg = c;
                }
            }
            out.set(y, x, arg as u8);
        }
    }
    out
}

/// Whole-image evaluation over every record of a manifest.
pub fn evaluate(net: &NetworkSpec, manifest: &DatasetManifest, ratio: usize) -> Result<ConfusionMatrix> {
    if net.num_classes != manifest.num_classes {
        return Err(Error::invalid(format!(
            "checkpoint predicts {} classes but the manifest has {}",
            net.num_classes, manifest.num_classes
        )));
    }
    let mut cm = ConfusionMatrix::new(net.num_classes);
    for i in 0..manifest.records.len() {
        let sample = manifest.load(i)?;
        let pred = predict_labels(net, &sample.image, ratio)?;
        cm.update(&pred, &sample.labels, manifest.ignore_label)?;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub images: usize,
    pub stitch_ratio: usize,
    pub confusion: ConfusionMatrix,
    pub scores: Scores,
}

impl EvalReport {
    /// `key=value` lines with four decimals.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let mut out = format!(
            "images={}\nstitch_ratio={}\npixel_acc={:.4}\nmean_acc={:.4}\nmean_iou={:.4}\n",
            self.images, self.stitch_ratio, self.scores.pixel_acc, self.scores.mean_acc, self.scores.mean_iou
        );
        for c in 0..self.scores.class_acc.len() {
            out.push_str(&format!(
                "class_{c}_acc={}\nclass_{c}_iou={}\n",
                opt(self.scores.class_acc[c]),
                opt(self.scores.class_iou[c])
            ));
        }
        out
    }
}

/// Loads a checkpoint directory and evaluates it on a manifest.
pub fn cmd_eval(checkpoint: &Path, manifest: &Path, stitch_ratio: usize) -> Result<EvalReport> {
    let (net, _) = load_checkpoint(checkpoint)?;
    let manifest = DatasetManifest::read(manifest)?;
    let confusion = evaluate(&net, &manifest, stitch_ratio)?;
    Ok(EvalReport {
        images: manifest.records.len(),
        stitch_ratio,
        scores: confusion.scores()?,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn upsampling_at_stride_one_is_a_plain_argmax() {
        let scores = Tensor::from_fn(Shape::new(1, 3, 2, 2), |_, c, y, x| if c == (y + x) % 3 { 1.0 } else { 0.0 });
        let l = upsample_argmax(&scores, 2, 2, 1);
        assert_eq!(l.data(), &[0, 1, 1, 2]);
    }

    #[test]
    fn upsampling_hits_score_sites_exactly() {
        let scores = Tensor::from_fn(Shape::new(1, 2, 2, 2), |_, c, y, x| {
            let v = (y * 2 + x) as f64;
            if c == 0 {
                v
            } else {
                1.5
            }
        });
        let l = upsample_argmax(&scores, 4, 4, 2);
        // Pixel (2y, 2x) sits on score (y, x): class 1 wins only where v < 1.5.
        assert_eq!(l.get(0, 0), 1);
        assert_eq!(l.get(0, 2), 1);
        assert_eq!(l.get(2, 0), 0);
        assert_eq!(l.get(2, 2), 0);
        // Clamped beyond the last score row and column.
        assert_eq!(l.get(3, 3), 0);
    }

    #[test]
    fn ties_go_to_the_lower_class() {
        let scores = Tensor::zeros(Shape::new(1, 3, 1, 1));
        assert_eq!(upsample_argmax(&scores, 1, 1, 1).get(0, 0), 0);
    }

    #[test]
    fn overrides_win() {
        let mut cfg: RunConfig = RunConfig::from_toml(
            "out_dir = \"x\"\n[optim]\nlr = 0.1\nsteps = 5\n",
            Path::new("c.toml"),
        )
        .unwrap();
        Overrides {
            seed: Some(9),
            steps: Some(2),
            min_keep: Some(7),
            ..Default::default()
        }
        .apply(&mut cfg);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.optim.unwrap().steps, 2);
        assert_eq!(cfg.loss.min_keep, 7);
    }
}

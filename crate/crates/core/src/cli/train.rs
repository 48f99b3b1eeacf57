use std::fs;
use std::io::Write;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::RunConfig;
use super::evaluate;
use crate::data::{random_resize_crop, DatasetManifest};
use crate::error::{Error, Result};
use crate::loss::bootstrapped_ce;
use crate::metrics::Scores;
use crate::network::{backward, build_mini_fcrn, forward, save_checkpoint, Mode, NetworkSpec, OptState, SgdConfig};
use crate::resolution::{stitched_accumulate, StitchConfig};
use crate::tensor::dropout_key;

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// The trained network exactly as stored in the checkpoint.
    pub net: NetworkSpec,
    pub checkpoint_dir: PathBuf,
    pub log_path: PathBuf,
    pub final_train: Scores,
    pub final_val: Option<Scores>,
}

#[derive(Serialize)]
struct StepRecord {
    step: usize,
    /// Mean loss over the crops that had valid pixels; absent when none did.
    loss: Option<f64>,
    selected: usize,
    lr: f64,
}

#[derive(Serialize)]
struct FinalRecord<'a> {
    #[serde(rename = "final")]
    split: &'a str,
    stitch_ratio: usize,
    pixel_acc: f64,
    mean_acc: f64,
    mean_iou: f64,
    class_iou: &'a [Option<f64>],
}

/// Hyperparameters stored with the checkpoint; paths are left out so runs
/// in different directories produce identical files.
#[derive(Serialize)]
struct Hyper<'a> {
    seed: u64,
    network: &'a crate::network::FcrnConfig,
    optim: &'a super::OptimConfig,
    loss: &'a crate::loss::BootstrapConfig,
    crop: usize,
    scale: (f64, f64),
    stitch: &'a super::StitchSettings,
}

/// Trains a mini-FCRN, writing `checkpoint/` and `train_log.jsonl` under the
/// output directory.
///
/// Every random choice (initialization, which image, crop geometry, dropout)
/// is keyed by the run seed and the crop's draw index, so the run is a pure
/// function of the config and the data. The network seed is the run seed.
/// Parameters are rounded to the checkpoint precision before the final
/// metrics are computed, so evaluating the saved checkpoint reproduces them.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate_training()?;
    let (Some(net_cfg), Some(optim), Some(data)) = (&cfg.network, &cfg.optim, &cfg.data) else {
        unreachable!("validated above");
    };
    let mut net_cfg = net_cfg.clone();
    net_cfg.init_seed = cfg.seed;
    let mut net = build_mini_fcrn(&net_cfg)?;

    let train = DatasetManifest::read(&data.train_manifest)?;
    if train.num_classes != net.num_classes {
        return Err(Error::Config(vec![format!(
            "network.num_classes: {} but the training manifest has {}",
            net.num_classes, train.num_classes
        )]));
    }
    if train.records.is_empty() {
        return Err(Error::Config(vec!["data.train_manifest: no records".to_string()]));
    }
    let samples = train.load_all()?;
    let val = data.val_manifest.as_ref().map(DatasetManifest::read).transpose()?;

    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let log_path = cfg.out_dir.join(TRAIN_LOG);
    let mut log = Vec::new();

    let train_ratio = cfg.stitch.train_ratio();
    let stitch = StitchConfig::new(&net, train_ratio)?;
    let label_stride = net.output_stride / train_ratio;
    let mut opt = OptState::new(
        &net,
        SgdConfig {
            lr: optim.lr,
            momentum: optim.momentum,
            weight_decay: optim.weight_decay,
        },
    );

    for step in 0..optim.steps {
        opt.config.lr = optim.lr_at(step);
        let mut losses = Vec::new();
        let mut selected = 0;
        for a in 0..optim.accumulation {
            let draw = (step * optim.accumulation + a) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(dropout_key(cfg.seed, 0xDA7A, draw));
            let idx = rng.gen_range(0..samples.len());
            let crop = random_resize_crop(
                &samples[idx],
                data.crop,
                (data.scale_min, data.scale_max),
                rng.gen(),
                train.ignore_label,
            )?;
            let labels = crop.labels.at_stride(label_stride);
            let mode = Mode::Train {
                seed: cfg.seed,
                step: draw,
            };
            if train_ratio > 1 {
                match stitched_accumulate(&net, &crop.image, &labels, &stitch, &cfg.loss, &mut opt, mode) {
                    Ok(report) => {
                        losses.extend(report.mean_loss());
                        selected += report.selected();
                    }
                    Err(Error::EmptyCrop) => {}
                    Err(e) => return Err(e),
                }
            } else {
                let (scores, tape) = forward(&net, &crop.image, mode)?;
                match bootstrapped_ce(&scores, &labels, &cfg.loss) {
                    Ok(res) => {
                        opt.accumulate(&backward(&net, &tape, &res.grad_scores)?)?;
                        losses.push(res.loss);
                        selected += res.selected_count;
                    }
                    Err(Error::EmptyCrop) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        if opt.passes() > 0 {
            opt.sgd_step(&mut net)?;
        }
        let loss = (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);
        push_json(
            &mut log,
            &StepRecord {
                step,
                loss,
                selected,
                lr: opt.config.lr,
            },
        );
    }

    net.round_params_to_f32();
    let hyper = Hyper {
        seed: cfg.seed,
        network: &net_cfg,
        optim,
        loss: &cfg.loss,
        crop: data.crop,
        scale: (data.scale_min, data.scale_max),
        stitch: &cfg.stitch,
    };
    let checkpoint_dir = cfg.out_dir.join(CHECKPOINT_DIR);
    save_checkpoint(
        &checkpoint_dir,
        &net,
        serde_json::to_value(&hyper).expect("hyperparameters serialize"),
    )?;

    let test_ratio = cfg.stitch.test_ratio();
    let final_train = evaluate(&net, &train, test_ratio)?.scores()?;
    push_final(&mut log, "train", test_ratio, &final_train);
    let final_val = match &val {
        Some(v) => {
            let s = evaluate(&net, v, test_ratio)?.scores()?;
            push_final(&mut log, "val", test_ratio, &s);
            Some(s)
        }
        None => None,
    };
    let mut file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    file.write_all(&log).map_err(|e| Error::io(&log_path, e))?;

    Ok(TrainOutcome {
        net,
        checkpoint_dir,
        log_path,
        final_train,
        final_val,
    })
}

fn push_json(log: &mut Vec<u8>, record: &impl Serialize) {
    serde_json::to_writer(&mut *log, record).expect("log record serializes");
    log.push(b'\n');
}

fn push_final(log: &mut Vec<u8>, split: &str, ratio: usize, s: &Scores) {
    push_json(
        log,
        &FinalRecord {
            split,
            stitch_ratio: ratio,
            pixel_acc: s.pixel_acc,
            mean_acc: s.mean_acc,
            mean_iou: s.mean_iou,
            class_iou: &s.class_iou,
        },
    );
}

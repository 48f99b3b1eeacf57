//! Checkpoints: `manifest.json` describing the layer graph and
//! hyperparameters, plus one `DST1` tensor file per parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layer, NetworkSpec, ResidualBlock};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, ConvParams, Shape, Tensor};

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
const FORMAT: &str = "dilseg-checkpoint-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvDesc {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerDesc {
    Conv(ConvDesc),
    Affine { channels: usize },
    Relu,
    Dropout { rate: f64 },
    ResidualBlock { body: Vec<LayerDesc>, projection: Option<ConvDesc> },
    ClassifierConv(ConvDesc),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 4],
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub num_classes: usize,
    pub output_stride: usize,
    pub layers: Vec<LayerDesc>,
    pub params: Vec<ParamEntry>,
    #[serde(default)]
    pub hyperparameters: serde_json::Value,
}

fn conv_desc(p: &ConvParams) -> ConvDesc {
    ConvDesc {
        c_in: p.c_in(),
        c_out: p.c_out(),
        kernel: p.kernel(),
        stride: p.stride,
        dilation: p.dilation,
        padding: p.padding,
    }
}

fn layer_desc(l: &Layer) -> LayerDesc {
    match l {
        Layer::Conv(p) => LayerDesc::Conv(conv_desc(p)),
        Layer::Classifier(p) => LayerDesc::ClassifierConv(conv_desc(p)),
        Layer::Affine { scale, .. } => LayerDesc::Affine { channels: scale.len() },
        Layer::Relu => LayerDesc::Relu,
        Layer::Dropout { rate } => LayerDesc::Dropout { rate: *rate },
        Layer::Residual(b) => LayerDesc::ResidualBlock {
            body: b.body.iter().map(layer_desc).collect(),
            projection: b.projection.as_ref().map(conv_desc),
        },
    }
}

fn conv_from_desc(d: &ConvDesc) -> ConvParams {
    let mut p = ConvParams::zeros(d.c_out, d.c_in, d.kernel.0, d.kernel.1);
    p.stride = d.stride;
    p.dilation = d.dilation;
    p.padding = d.padding;
    p
}

fn layer_from_desc(d: &LayerDesc) -> Layer {
    match d {
        LayerDesc::Conv(c) => Layer::Conv(conv_from_desc(c)),
        LayerDesc::ClassifierConv(c) => Layer::Classifier(conv_from_desc(c)),
        LayerDesc::Affine { channels } => Layer::Affine {
            scale: vec![0.0; *channels],
            shift: vec![0.0; *channels],
        },
        LayerDesc::Relu => Layer::Relu,
        LayerDesc::Dropout { rate } => Layer::Dropout { rate: *rate },
        LayerDesc::ResidualBlock { body, projection } => Layer::Residual(ResidualBlock {
            body: body.iter().map(layer_from_desc).collect(),
            projection: projection.as_ref().map(conv_from_desc),
        }),
    }
}

pub fn save_checkpoint(dir: impl AsRef<Path>, net: &NetworkSpec, hyperparameters: serde_json::Value) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::new();
    let mut write_result = Ok(());
    net.visit_params(|key, values, shape| {
        if write_result.is_err() {
            return;
        }
        let name = key.name();
        let file = format!("{name}.dst");
        let t = Tensor::from_vec(shape, values.to_vec()).expect("parameter shape");
        write_result = write_tensor(dir.join(&file), &t);
        params.push(ParamEntry {
            name,
            shape: [shape.n, shape.c, shape.h, shape.w],
            file,
        });
    });
    write_result?;
    let ckpt = Checkpoint {
        format: FORMAT.to_string(),
        num_classes: net.num_classes,
        output_stride: net.output_stride,
        layers: net.layers.iter().map(layer_desc).collect(),
        params,
        hyperparameters,
    };
    let text = serde_json::to_string_pretty(&ckpt).expect("checkpoint manifest serializes");
    let path = dir.join(CHECKPOINT_MANIFEST);
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(ckpt)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(NetworkSpec, Checkpoint)> {
    let dir = dir.as_ref();
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    if ckpt.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown checkpoint format {:?}", ckpt.format)));
    }
    let mut net = NetworkSpec {
        layers: ckpt.layers.iter().map(layer_from_desc).collect(),
        num_classes: ckpt.num_classes,
        output_stride: ckpt.output_stride,
    };
    let keys = net.param_keys();
    if keys.len() != ckpt.params.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} parameters but the layer graph has {}",
            ckpt.params.len(),
            keys.len()
        )));
    }
    let mut tensors = Vec::with_capacity(keys.len());
    for (key, entry) in keys.iter().zip(&ckpt.params) {
        if key.name() != entry.name {
            return Err(Error::Checkpoint(format!(
                "parameter {} listed where {} was expected",
                entry.name,
                key.name()
            )));
        }
        let t = read_tensor(dir.join(&entry.file))?;
        let [n, c, h, w] = entry.shape;
        if t.shape() != Shape::new(n, c, h, w) {
            return Err(Error::Checkpoint(format!(
                "{} has shape {} but the manifest says {:?}",
                entry.file,
                t.shape(),
                entry.shape
            )));
        }
        tensors.push(t.into_data());
    }
    let mut i = 0;
    let mut size_error = None;
    net.visit_params_mut(|key, v| {
        if v.len() == tensors[i].len() {
            v.copy_from_slice(&tensors[i]);
        } else {
            size_error.get_or_insert_with(|| key.name());
        }
        i += 1;
    });
    if let Some(name) = size_error {
        return Err(Error::Checkpoint(format!("{name} does not fit its layer")));
    }
    net.validate()?;
    Ok((net, ckpt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_mini_fcrn, FcrnConfig};

    #[test]
    fn save_then_load_reproduces_rounded_network() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = build_mini_fcrn(&FcrnConfig {
            stage_widths: vec![4, 8],
            blocks_per_stage: vec![1, 1],
            num_classes: 3,
            dropout_rate: 0.1,
            init_seed: 3,
            ..FcrnConfig::default()
        })
        .unwrap();
        net.round_params_to_f32();
        save_checkpoint(dir.path(), &net, serde_json::json!({"note": "x"})).unwrap();
        let (back, ckpt) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, net);
        assert_eq!(ckpt.hyperparameters["note"], "x");
        assert!(dir.path().join("000_weight.dst").exists());
    }

    #[test]
    fn corrupt_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(CHECKPOINT_MANIFEST), "{ not json").unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Parse { .. })));
    }
}

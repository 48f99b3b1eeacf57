use super::{Layer, NetworkSpec, ParamGrads, ResidualBlock};
use crate::error::{Error, Result};
use crate::tensor::{
    affine_backward, affine_forward, conv2d_backward, conv2d_forward, dropout_backward,
    dropout_forward, dropout_key, relu_backward, relu_forward, ConvParams, Shape, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout disabled.
    Eval,
    /// Dropout masks keyed by `(seed, dropout layer ordinal, step)`.
    Train { seed: u64, step: u64 },
}

#[derive(Clone, Debug)]
enum Record {
    Conv(Tensor),
    Affine(Tensor),
    Relu(Tensor),
    Dropout(Option<Vec<f64>>),
    Residual { input: Tensor, body: Vec<Record> },
    Classifier(Tensor),
}

/// Activations recorded by [`forward`] for use by [`backward`].
#[derive(Clone, Debug)]
pub struct Tape {
    records: Vec<Record>,
    input_shape: Shape,
    output_shape: Shape,
}

impl Tape {
    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn output_shape(&self) -> Shape {
        self.output_shape
    }
}

fn forward_layer(layer: &Layer, x: &Tensor, mode: Mode, dropouts: &mut u64) -> Result<(Tensor, Record)> {
    Ok(match layer {
        Layer::Conv(p) => (conv2d_forward(x, p)?, Record::Conv(x.clone())),
        Layer::Classifier(p) => (conv2d_forward(x, p)?, Record::Classifier(x.clone())),
        Layer::Affine { scale, shift } => (affine_forward(x, scale, shift)?, Record::Affine(x.clone())),
        Layer::Relu => (relu_forward(x), Record::Relu(x.clone())),
        Layer::Dropout { rate } => {
            let ordinal = *dropouts;
            *dropouts += 1;
            match mode {
                Mode::Eval => (x.clone(), Record::Dropout(None)),
                Mode::Train { seed, step } => {
                    let (y, mask) = dropout_forward(x, *rate, dropout_key(seed, ordinal, step))?;
                    (y, Record::Dropout(Some(mask)))
                }
            }
        }
        Layer::Residual(block) => {
            let mut h = x.clone();
            let mut body = Vec::with_capacity(block.body.len());
            for l in &block.body {
                let (next, rec) = forward_layer(l, &h, mode, dropouts)?;
                body.push(rec);
                h = next;
            }
            let shortcut = match &block.projection {
                Some(p) => conv2d_forward(x, p)?,
                None => x.clone(),
            };
            if shortcut.shape() != h.shape() {
                return Err(Error::shape(format!(
                    "residual branch produces {} but shortcut produces {}",
                    h.shape(),
                    shortcut.shape()
                )));
            }
            for (o, s) in h.data_mut().iter_mut().zip(shortcut.data()) {
                *o += s;
            }
            (h, Record::Residual { input: x.clone(), body })
        }
    })
}

/// Runs the network, returning class scores and the activation tape.
pub fn forward(net: &NetworkSpec, input: &Tensor, mode: Mode) -> Result<(Tensor, Tape)> {
    if let Some(c) = net.in_channels() {
        if c != input.shape().c {
            return Err(Error::shape(format!(
                "network expects {c} input channels, got input {}",
                input.shape()
            )));
        }
    }
    let mut dropouts = 0u64;
    let mut x = input.clone();
    let mut records = Vec::with_capacity(net.layers.len());
    for l in &net.layers {
        let (y, rec) = forward_layer(l, &x, mode, &mut dropouts)?;
        records.push(rec);
        x = y;
    }
    let tape = Tape {
        records,
        input_shape: input.shape(),
        output_shape: x.shape(),
    };
    Ok((x, tape))
}

fn mismatch(layer: &Layer) -> Error {
    Error::invalid(format!("tape does not match network at a {} layer", layer.kind()))
}

fn conv_grads(p: &ConvParams, x: &Tensor, g: &Tensor, gp: &mut ConvParams) -> Result<Tensor> {
    let cg = conv2d_backward(x, p, g)?;
    for (a, b) in gp.weight.data_mut().iter_mut().zip(cg.weight.data()) {
        *a += b;
    }
    for (a, b) in gp.bias.iter_mut().zip(&cg.bias) {
        *a += b;
    }
    Ok(cg.input)
}

fn backward_layer(layer: &Layer, rec: &Record, g: &Tensor, grads: &mut Layer) -> Result<Tensor> {
    match (layer, rec, grads) {
        (Layer::Conv(p), Record::Conv(x), Layer::Conv(gp))
        | (Layer::Classifier(p), Record::Classifier(x), Layer::Classifier(gp)) => conv_grads(p, x, g, gp),
        (
            Layer::Affine { scale, shift },
            Record::Affine(x),
            Layer::Affine { scale: gs, shift: gb },
        ) => {
            let ag = affine_backward(x, scale, shift, g)?;
            for (a, b) in gs.iter_mut().zip(&ag.scale) {
                *a += b;
            }
            for (a, b) in gb.iter_mut().zip(&ag.shift) {
                *a += b;
            }
            Ok(ag.input)
        }
        (Layer::Relu, Record::Relu(x), _) => relu_backward(x, g),
        (Layer::Dropout { .. }, Record::Dropout(mask), _) => match mask {
            Some(m) => dropout_backward(g, m),
            None => Ok(g.clone()),
        },
        (Layer::Residual(block), Record::Residual { input, body }, Layer::Residual(gblock)) => {
            residual_backward(block, input, body, g, gblock)
        }
        _ => Err(mismatch(layer)),
    }
}

fn residual_backward(
    block: &ResidualBlock,
    input: &Tensor,
    records: &[Record],
    g: &Tensor,
    gblock: &mut ResidualBlock,
) -> Result<Tensor> {
    if records.len() != block.body.len() {
        return Err(Error::invalid("tape does not match residual block length"));
    }
    let mut gb = g.clone();
    for ((l, rec), gl) in block.body.iter().zip(records).zip(gblock.body.iter_mut()).rev() {
        gb = backward_layer(l, rec, &gb, gl)?;
    }
    let gs = match (&block.projection, &mut gblock.projection) {
        (Some(p), Some(gp)) => conv_grads(p, input, g, gp)?,
        (None, None) => g.clone(),
        _ => return Err(Error::invalid("tape does not match residual projection")),
    };
    for (a, b) in gb.data_mut().iter_mut().zip(gs.data()) {
        *a += b;
    }
    Ok(gb)
}

/// Parameter gradients and the gradient with respect to the network input.
pub fn backward_with_input(net: &NetworkSpec, tape: &Tape, grad_scores: &Tensor) -> Result<(ParamGrads, Tensor)> {
    grad_scores.expect_shape(tape.output_shape, "backward grad_scores")?;
    if tape.records.len() != net.layers.len() {
        return Err(Error::invalid(format!(
            "tape has {} records but network has {} layers",
            tape.records.len(),
            net.layers.len()
        )));
    }
    let mut gnet = net.zeros_like();
    let mut g = grad_scores.clone();
    for ((l, rec), gl) in net.layers.iter().zip(&tape.records).zip(gnet.layers.iter_mut()).rev() {
        g = backward_layer(l, rec, &g, gl)?;
    }
    Ok((gnet.grads_from_shaped(), g))
}

/// Exact adjoint of [`forward`] with respect to every parameter.
pub fn backward(net: &NetworkSpec, tape: &Tape, grad_scores: &Tensor) -> Result<ParamGrads> {
    backward_with_input(net, tape, grad_scores).map(|(p, _)| p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_mini_fcrn, random_tensor, FcrnConfig};

    fn small_net(dropout: f64) -> NetworkSpec {
        build_mini_fcrn(&FcrnConfig {
            stage_widths: vec![4, 6],
            blocks_per_stage: vec![1, 1],
            num_classes: 3,
            dropout_rate: dropout,
            init_seed: 5,
            ..FcrnConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn eval_forward_is_pure() {
        let net = small_net(0.3);
        let x = random_tensor(Shape::new(1, 3, 16, 16), 1);
        let (a, _) = forward(&net, &x, Mode::Eval).unwrap();
        let (b, _) = forward(&net, &x, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_forward_is_seed_deterministic() {
        let net = small_net(0.3);
        let x = random_tensor(Shape::new(1, 3, 16, 16), 1);
        let m = Mode::Train { seed: 9, step: 2 };
        let (a, _) = forward(&net, &x, m).unwrap();
        let (b, _) = forward(&net, &x, m).unwrap();
        assert_eq!(a, b);
        let (c, _) = forward(&net, &x, Mode::Train { seed: 9, step: 3 }).unwrap();
        assert_ne!(a, c);
        let (e, _) = forward(&net, &x, Mode::Eval).unwrap();
        assert_ne!(a, e);
    }

    #[test]
    fn zero_residual_branch_passes_input_through() {
        let mut body_conv = ConvParams::zeros(4, 4, 3, 3).with_padding(1);
        body_conv.bias.fill(0.0);
        let block = ResidualBlock {
            body: vec![
                Layer::Conv(body_conv.clone()),
                Layer::Affine { scale: vec![1.0; 4], shift: vec![0.0; 4] },
                Layer::Relu,
                Layer::Conv(body_conv),
                Layer::Affine { scale: vec![1.0; 4], shift: vec![0.0; 4] },
            ],
            projection: None,
        };
        let x = random_tensor(Shape::new(1, 4, 6, 6), 3);
        let (y, _) = forward_layer(&Layer::Residual(block), &x, Mode::Eval, &mut 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_grad_scores_give_zero_grads() {
        let net = small_net(0.0);
        let x = random_tensor(Shape::new(1, 3, 16, 16), 2);
        let (s, tape) = forward(&net, &x, Mode::Eval).unwrap();
        let g = backward(&net, &tape, &Tensor::zeros(s.shape())).unwrap();
        assert!(g.is_zero());
        assert_eq!(g.keys, net.param_keys());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let net = small_net(0.0);
        let x = random_tensor(Shape::new(1, 2, 16, 16), 2);
        assert!(matches!(forward(&net, &x, Mode::Eval), Err(Error::Shape(_))));
    }

    #[test]
    fn tape_from_other_net_rejected() {
        let net = small_net(0.0);
        let other = build_mini_fcrn(&FcrnConfig {
            stage_widths: vec![4],
            blocks_per_stage: vec![1],
            num_classes: 3,
            ..FcrnConfig::default()
        })
        .unwrap();
        let x = random_tensor(Shape::new(1, 3, 16, 16), 2);
        let (s, tape) = forward(&other, &x, Mode::Eval).unwrap();
        assert!(backward(&net, &tape, &Tensor::zeros(s.shape())).is_err());
    }
}

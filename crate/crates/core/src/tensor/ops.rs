use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

pub fn relu_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    grad_out.expect_shape(input.shape(), "relu_backward grad_out")?;
    let mut g = grad_out.clone();
    for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *gv = 0.0;
        }
    }
    Ok(g)
}

fn check_affine(input: &Tensor, scale: &[f64], shift: &[f64]) -> Result<()> {
    let c = input.shape().c;
    if scale.len() != c || shift.len() != c {
        return Err(Error::shape(format!(
            "affine expects scale/shift of length {c}, got {}/{}",
            scale.len(),
            shift.len()
        )));
    }
    Ok(())
}

/// Per-channel `scale * x + shift`: batch normalization with frozen statistics.
pub fn affine_forward(input: &Tensor, scale: &[f64], shift: &[f64]) -> Result<Tensor> {
    check_affine(input, scale, shift)?;
    let s = input.shape();
    let plane = s.plane();
    let mut out = input.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let c = i % s.c;
        for v in chunk {
            *v = scale[c] * *v + shift[c];
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineGrads {
    pub input: Tensor,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

pub fn affine_backward(
    input: &Tensor,
    scale: &[f64],
    shift: &[f64],
    grad_out: &Tensor,
) -> Result<AffineGrads> {
    check_affine(input, scale, shift)?;
    grad_out.expect_shape(input.shape(), "affine_backward grad_out")?;
    let s = input.shape();
    let plane = s.plane();
    let mut gin = grad_out.clone();
    let mut gscale = vec![0.0; s.c];
    let mut gshift = vec![0.0; s.c];
    for (i, (gchunk, xchunk)) in gin
        .data_mut()
        .chunks_mut(plane)
        .zip(input.data().chunks(plane))
        .enumerate()
    {
        let c = i % s.c;
        for (g, &x) in gchunk.iter_mut().zip(xchunk) {
            gscale[c] += *g * x;
            gshift[c] += *g;
            *g *= scale[c];
        }
    }
    Ok(AffineGrads {
        input: gin,
        scale: gscale,
        shift: gshift,
    })
}

pub fn add_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    b.expect_shape(a.shape(), "add_forward rhs")?;
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    Ok(out)
}

/// Both summands receive the incoming gradient unchanged.
pub fn add_backward(grad_out: &Tensor) -> (Tensor, Tensor) {
    (grad_out.clone(), grad_out.clone())
}

/// Softmax over the channel axis at every `(n, y, x)`.
pub fn softmax_channel(input: &Tensor) -> Tensor {
    let s = input.shape();
    let plane = s.plane();
    let src = input.data();
    let mut out = Tensor::zeros(s);
    let dst = out.data_mut();
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let idx = |c: usize| base + c * plane + p;
            let max = (0..s.c).map(|c| src[idx(c)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for c in 0..s.c {
                let e = (src[idx(c)] - max).exp();
                dst[idx(c)] = e;
                total += e;
            }
            for c in 0..s.c {
                dst[idx(c)] /= total;
            }
        }
    }
    out
}

/// Mixes a run seed with a layer ordinal and a step counter into the key for
/// one dropout mask.
pub fn dropout_key(seed: u64, layer: u64, step: u64) -> u64 {
    let mut z = seed ^ layer.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step.rotate_left(32);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-element multipliers: `0` with probability `rate`, otherwise `1/(1-rate)`.
pub fn dropout_mask(len: usize, rate: f64, key: u64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    if rate == 0.0 {
        return Ok(vec![1.0; len]);
    }
    let keep = 1.0 / (1.0 - rate);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    Ok((0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect())
}

/// Training-mode dropout. Returns the output and the mask needed by
/// [`dropout_backward`].
pub fn dropout_forward(input: &Tensor, rate: f64, key: u64) -> Result<(Tensor, Vec<f64>)> {
    let mask = dropout_mask(input.data().len(), rate, key)?;
    let mut out = input.clone();
    for (o, m) in out.data_mut().iter_mut().zip(&mask) {
        *o *= m;
    }
    Ok((out, mask))
}

pub fn dropout_backward(grad_out: &Tensor, mask: &[f64]) -> Result<Tensor> {
    if mask.len() != grad_out.data().len() {
        return Err(Error::shape(format!(
            "dropout mask length {} does not match gradient {}",
            mask.len(),
            grad_out.shape()
        )));
    }
    let mut g = grad_out.clone();
    for (gv, m) in g.data_mut().iter_mut().zip(mask) {
        *gv *= m;
    }
    Ok(g)
}

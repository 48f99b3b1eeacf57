use super::parallel::for_each_block;
use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// A 2-D convolution with zero padding, stride, dilation and a sampling
/// origin offset.
///
/// Output element `(y, x)` reads input rows `y*s + offset - p + u*d`. The
/// offset is zero for ordinary layers; shift-and-stitch uses it to move the
/// sampling grid of a strided layer by a sub-stride amount.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
    pub offset: (usize, usize),
    /// `(c_out, c_in, k_h, k_w)`.
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn new(weight: Tensor, bias: Vec<f64>) -> Result<Self> {
        let p = ConvParams {
            stride: (1, 1),
            dilation: (1, 1),
            padding: (0, 0),
            offset: (0, 0),
            weight,
            bias,
        };
        p.validate()?;
        Ok(p)
    }

    /// Zero weights and bias, stride 1, dilation 1, no padding.
    pub fn zeros(c_out: usize, c_in: usize, k_h: usize, k_w: usize) -> Self {
        ConvParams {
            stride: (1, 1),
            dilation: (1, 1),
            padding: (0, 0),
            offset: (0, 0),
            weight: Tensor::zeros(Shape::new(c_out, c_in, k_h, k_w)),
            bias: vec![0.0; c_out],
        }
    }

    pub fn with_stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn with_dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }

    pub fn with_padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    /// Padding `d*(k-1)/2` on each axis, which preserves spatial size at
    /// stride 1 for odd kernels.
    pub fn with_same_padding(mut self) -> Self {
        let (kh, kw) = self.kernel();
        self.padding = (
            self.dilation.0 * (kh - 1) / 2,
            self.dilation.1 * (kw - 1) / 2,
        );
        self
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().c
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weight.shape();
        (s.h, s.w)
    }

    /// Effective kernel extent `d*(k-1)+1` per axis.
    pub fn extent(&self) -> (usize, usize) {
        let (kh, kw) = self.kernel();
        (
            self.dilation.0 * (kh - 1) + 1,
            self.dilation.1 * (kw - 1) + 1,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::invalid("convolution stride must be >= 1"));
        }
        if self.dilation.0 == 0 || self.dilation.1 == 0 {
            return Err(Error::invalid("convolution dilation must be >= 1"));
        }
        if self.bias.len() != self.c_out() {
            return Err(Error::shape(format!(
                "bias length {} does not match {} output channels",
                self.bias.len(),
                self.c_out()
            )));
        }
        Ok(())
    }

    /// Output spatial size for an `h x w` input, or an error when either
    /// axis would be empty.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (eh, ew) = self.extent();
        let oh = axis_output(h, self.padding.0, eh, self.stride.0, self.offset.0);
        let ow = axis_output(w, self.padding.1, ew, self.stride.1, self.offset.1);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::shape(format!(
                "convolution with extent {eh}x{ew}, stride {:?}, padding {:?}, offset {:?} \
                 produces an empty output on a {h}x{w} input",
                self.stride, self.padding, self.offset
            ))),
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.c_in() {
            return Err(Error::shape(format!(
                "convolution expects {} input channels, got {} (input {input})",
                self.c_in(),
                input.c
            )));
        }
        let (oh, ow) = self.output_size(input.h, input.w)?;
        Ok(Shape::new(input.n, self.c_out(), oh, ow))
    }
}

fn axis_output(i: usize, p: usize, e: usize, s: usize, off: usize) -> Option<usize> {
    let span = (i + 2 * p) as i64 - e as i64 - off as i64;
    if span < 0 {
        None
    } else {
        Some(span as usize / s + 1)
    }
}

/// Output positions `o` in `0..out` for which `o*s + base` lies in `0..len`.
#[inline]
fn valid_range(base: i64, s: usize, len: usize, out: usize) -> (usize, usize) {
    let s = s as i64;
    let lo = if base >= 0 { 0 } else { (-base + s - 1) / s };
    let last = len as i64 - 1 - base;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let hi = hi.min(out as i64);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

pub fn conv2d_forward(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    params.validate()?;
    let is = input.shape();
    let os = params.output_shape(is)?;
    let (kh, kw) = params.kernel();
    let (sh, sw) = params.stride;
    let (dh, dw) = params.dilation;
    let (ph, pw) = (params.padding.0 as i64, params.padding.1 as i64);
    let (fy, fx) = (params.offset.0 as i64, params.offset.1 as i64);
    let c_in = is.c;
    let c_out = os.c;
    let in_data = input.data();
    let w_data = params.weight.data();
    let iplane = is.plane();

    let mut out = Tensor::zeros(os);
    for_each_block(out.data_mut(), os.plane(), |b, plane| {
        let n = b / c_out;
        let co = b % c_out;
        plane.fill(params.bias[co]);
        for ci in 0..c_in {
            let src = &in_data[(n * c_in + ci) * iplane..(n * c_in + ci + 1) * iplane];
            for u in 0..kh {
                let by = fy + (u * dh) as i64 - ph;
                let (ylo, yhi) = valid_range(by, sh, is.h, os.h);
                for v in 0..kw {
                    let wv = w_data[((co * c_in + ci) * kh + u) * kw + v];
                    if wv == 0.0 {
                        continue;
                    }
                    let bx = fx + (v * dw) as i64 - pw;
                    let (xlo, xhi) = valid_range(bx, sw, is.w, os.w);
                    for y in ylo..yhi {
                        let iy = (y as i64 * sh as i64 + by) as usize;
                        let row = &src[iy * is.w..(iy + 1) * is.w];
                        let orow = &mut plane[y * os.w..(y + 1) * os.w];
                        for x in xlo..xhi {
                            let ix = (x as i64 * sw as i64 + bx) as usize;
                            orow[x] += wv * row[ix];
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(input: &Tensor, params: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    params.validate()?;
    let is = input.shape();
    let os = params.output_shape(is)?;
    grad_out.expect_shape(os, "conv2d_backward grad_out")?;
    let (kh, kw) = params.kernel();
    let (sh, sw) = params.stride;
    let (dh, dw) = params.dilation;
    let (ph, pw) = (params.padding.0 as i64, params.padding.1 as i64);
    let (fy, fx) = (params.offset.0 as i64, params.offset.1 as i64);
    let c_in = is.c;
    let c_out = os.c;
    let in_data = input.data();
    let g_data = grad_out.data();
    let w_data = params.weight.data();
    let iplane = is.plane();
    let oplane = os.plane();

    let mut grad_bias = vec![0.0; c_out];
    for (co, gb) in grad_bias.iter_mut().enumerate() {
        for n in 0..os.n {
            *gb += grad_out.plane(n, co).iter().sum::<f64>();
        }
    }

    let mut grad_weight = Tensor::zeros(params.weight.shape());
    for_each_block(grad_weight.data_mut(), c_in * kh * kw, |co, block| {
        for n in 0..os.n {
            let g = &g_data[(n * c_out + co) * oplane..(n * c_out + co + 1) * oplane];
            for ci in 0..c_in {
                let src = &in_data[(n * c_in + ci) * iplane..(n * c_in + ci + 1) * iplane];
                for u in 0..kh {
                    let by = fy + (u * dh) as i64 - ph;
                    let (ylo, yhi) = valid_range(by, sh, is.h, os.h);
                    for v in 0..kw {
                        let bx = fx + (v * dw) as i64 - pw;
                        let (xlo, xhi) = valid_range(bx, sw, is.w, os.w);
                        let mut acc = 0.0;
                        for y in ylo..yhi {
                            let iy = (y as i64 * sh as i64 + by) as usize;
                            let row = &src[iy * is.w..(iy + 1) * is.w];
                            let grow = &g[y * os.w..(y + 1) * os.w];
                            for x in xlo..xhi {
                                let ix = (x as i64 * sw as i64 + bx) as usize;
                                acc += grow[x] * row[ix];
                            }
                        }
                        block[(ci * kh + u) * kw + v] += acc;
                    }
                }
            }
        }
    });

    let mut grad_input = Tensor::zeros(is);
    for_each_block(grad_input.data_mut(), iplane, |b, plane| {
        let n = b / c_in;
        let ci = b % c_in;
        for co in 0..c_out {
            let g = &g_data[(n * c_out + co) * oplane..(n * c_out + co + 1) * oplane];
            for u in 0..kh {
                let by = fy + (u * dh) as i64 - ph;
                let (ylo, yhi) = valid_range(by, sh, is.h, os.h);
                for v in 0..kw {
                    let wv = w_data[((co * c_in + ci) * kh + u) * kw + v];
                    if wv == 0.0 {
                        continue;
                    }
                    let bx = fx + (v * dw) as i64 - pw;
                    let (xlo, xhi) = valid_range(bx, sw, is.w, os.w);
                    for y in ylo..yhi {
                        let iy = (y as i64 * sh as i64 + by) as usize;
                        let grow = &g[y * os.w..(y + 1) * os.w];
                        let irow = &mut plane[iy * is.w..(iy + 1) * is.w];
                        for x in xlo..xhi {
                            let ix = (x as i64 * sw as i64 + bx) as usize;
                            irow[ix] += wv * grow[x];
                        }
                    }
                }
            }
        }
    });

    Ok(ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    })
}
